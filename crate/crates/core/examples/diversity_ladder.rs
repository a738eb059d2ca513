//! Measure how far apart the augmented support and query distributions are
//! for each configuration on the diversity ladder, using histogram KL in
//! pixel space and the Fréchet distance between backbone features.
//!
//! Pass a checkpoint written by `ulda train` to use trained features;
//! otherwise a freshly initialised backbone is used.
//!
//! ```text
//! cargo run --release --example diversity_ladder -- out/run/last.ckpt
//! ```

use ulda::augment::{DstimAlphas, OperatorSet, DIVERSITY_LADDER};
use ulda::data_io::generate_synthetic;
use ulda::diagnostics::{diversity_report, reports_to_csv};
use ulda::model::{ModelConfig, ProtoNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = generate_synthetic(100, 20, (1, 16, 16), 0)?.into_pool()?;
    let model = match std::env::args().nth(1) {
        Some(path) => ProtoNet::load(path.as_ref())?,
        None => ProtoNet::new(ModelConfig::conv64f(pool.shape()), 0)?,
    };

    let mut reports = Vec::new();
    for (s, q) in DIVERSITY_LADDER {
        let a_s = OperatorSet::preset(s, DstimAlphas::default())?;
        let a_q = OperatorSet::preset(q, DstimAlphas::default())?;
        let r = diversity_report(&pool, &a_s, &a_q, &model, 300, 0)?;
        println!(
            "{s:>10} | {q:<12} KL {:>7.4}  Fréchet {:>9.3}",
            r.kl, r.frechet
        );
        reports.push(r);
    }
    println!("\n{}", reports_to_csv(&reports));
    Ok(())
}
