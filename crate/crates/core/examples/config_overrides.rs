//! The plain-text configuration used by the `ulda` binary: parse a file,
//! apply `key = value` overrides, validate, and render the resolved result.
//!
//! ```text
//! cargo run --release --example config_overrides
//! ```

use ulda::config::Config;

const TEXT: &str = "\
# desk-scale run on the synthetic corpus
seed = 3
episode.per_epoch = 500
train.epochs = 10
aug.support = AA+TIMsub
aug.query = R+TA+TIMadd
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = Config::default();
    cfg.apply_text(TEXT)?;
    cfg.set("train.lr_schedule", "constant")?;
    cfg.set("aug.alpha_add", "0.8")?;
    cfg.validate()?;

    let train = cfg.train_config();
    println!(
        "{} epochs × {} episodes, lr {:?}",
        train.epochs, train.episode.episodes_per_epoch, train.lr
    );
    print!("{}", cfg.render());

    for (key, value) in [
        ("aug.query", "R+XYZ"),
        ("train.epochs", "ten"),
        ("no.such", "1"),
    ] {
        let mut bad = cfg.clone();
        let err = bad
            .set(key, value)
            .and_then(|_| bad.validate())
            .unwrap_err();
        println!("{key} = {value}: {err}");
    }
    Ok(())
}
