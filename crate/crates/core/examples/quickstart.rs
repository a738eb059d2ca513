//! Train a small prototype network on the built-in synthetic corpus with
//! diverse support/query augmentation, then evaluate it on held-out classes.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use ulda::data_io::generate_synthetic;
use ulda::episodes::EpisodeConfig;
use ulda::evaluator::{evaluate, EvalConfig};
use ulda::trainer::{train, LrSchedule, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_synthetic(60, 20, (1, 16, 16), 0)?;
    let train_set = corpus.subset_classes(&(0..50).collect::<Vec<_>>())?;
    let test_set = corpus.subset_classes(&(50..60).collect::<Vec<_>>())?;

    // labels are discarded: every training image is its own pseudo-class
    let pool = train_set.into_pool()?;
    let cfg = TrainConfig {
        epochs: 3,
        lr: LrSchedule::constant(0.001),
        episode: EpisodeConfig {
            episodes_per_epoch: 150,
            ..EpisodeConfig::default()
        },
        filters: 32,
        ..TrainConfig::default()
    };
    println!(
        "support set {}, query set {}",
        cfg.aug_support, cfg.aug_query
    );

    let (model, log) = train(&pool, cfg, None)?;
    for r in &log.records {
        println!(
            "epoch {} train_acc {:.3} loss_few {:.3} loss_self {:.3}",
            r.epoch, r.train_acc, r.loss_few, r.loss_self
        );
    }

    let report = evaluate(
        &model,
        &test_set,
        &EvalConfig {
            episodes: 200,
            ..EvalConfig::default()
        },
    )?;
    println!("held-out {}", report.summary());
    Ok(())
}
