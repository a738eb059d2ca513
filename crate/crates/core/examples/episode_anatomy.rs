//! Build one pretext episode from unlabeled images and print where every
//! support and query item came from. Optionally dumps the images.
//!
//! ```text
//! cargo run --release --example episode_anatomy -- out/episode
//! ```

use std::path::PathBuf;

use ulda::augment::{DstimAlphas, OperatorSet};
use ulda::data_io::{dump_episode, generate_synthetic};
use ulda::episodes::{sample_episode, EpisodeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = generate_synthetic(30, 2, (1, 28, 28), 1)?.into_pool()?;
    let cfg = EpisodeConfig {
        n_way: 5,
        k_shot: 1,
        m_query: 3,
        episodes_per_epoch: 1,
    };
    let a_s = OperatorSet::preset("AA+TIMsub", DstimAlphas::default())?;
    let a_q = OperatorSet::preset("R+TA+TIMadd", DstimAlphas::default())?;
    let ep = sample_episode(&pool, &cfg, &a_s, &a_q, 2024)?;

    println!(
        "episode seed {:#018x}: {}-way {}-shot, {} queries",
        ep.seed,
        ep.n_way,
        ep.k_shot,
        ep.query.len()
    );
    for s in &ep.support {
        println!("support  label {}  source image {:>3}", s.label, s.source);
    }
    for q in &ep.query {
        let rot = q
            .rotation
            .map_or("-".to_string(), |k| format!("{}°", 90 * k as u32));
        println!(
            "query    label {}  source image {:>3}  rotation {rot}",
            q.label, q.source
        );
    }

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        dump_episode(&dir, &ep)?;
        println!("images written to {}", dir.display());
    }
    Ok(())
}
