//! Checkpoint a run halfway, restore it, and confirm that finishing the
//! restored run matches an uninterrupted one bit for bit.
//!
//! ```text
//! cargo run --release --example resume_training
//! ```

use ulda::data_io::generate_synthetic;
use ulda::episodes::EpisodeConfig;
use ulda::trainer::{LrSchedule, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = generate_synthetic(40, 2, (1, 16, 16), 3)?.into_pool()?;
    let cfg = TrainConfig {
        epochs: 4,
        lr: LrSchedule::rescaled(4),
        seed: 5,
        episode: EpisodeConfig {
            episodes_per_epoch: 30,
            ..EpisodeConfig::default()
        },
        filters: 16,
        ..TrainConfig::default()
    };

    let mut straight = Trainer::new(&pool, cfg.clone())?;
    straight.run(|r| {
        println!(
            "straight epoch {} lr {:e} train_acc {:.3}",
            r.epoch, r.lr, r.train_acc
        )
    })?;

    let dir = std::env::temp_dir().join(format!("ulda-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("half.ckpt");
    let mut first = Trainer::new(&pool, cfg.clone())?;
    first.run_epoch()?;
    first.run_epoch()?;
    first.save(&ckpt)?;
    println!(
        "saved after {} epochs to {}",
        first.epochs_done(),
        ckpt.display()
    );

    let mut resumed = Trainer::resume(&pool, cfg, &ckpt)?;
    resumed.run(|r| {
        println!(
            "resumed  epoch {} lr {:e} train_acc {:.3}",
            r.epoch, r.lr, r.train_acc
        )
    })?;

    let same_log = resumed.log.to_csv() == straight.log.to_csv();
    let same_weights = resumed.model.to_named_tensors() == straight.model.to_named_tensors();
    println!("identical log: {same_log}, identical weights: {same_weights}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
