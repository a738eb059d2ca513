//! The evaluation protocol on its own: 5-way 1-shot episodes from held-out
//! classes, nearest-prototype classification, mean accuracy with a 95%
//! interval. Compares raw pixels with an untrained backbone's features.
//!
//! ```text
//! cargo run --release --example evaluate_baselines
//! ```

use ulda::augment::Image;
use ulda::data_io::generate_synthetic;
use ulda::evaluator::{evaluate, evaluate_with, EvalConfig};
use ulda::model::{ModelConfig, ProtoNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let test_set = generate_synthetic(20, 20, (1, 16, 16), 42)?;
    let cfg = EvalConfig::default();

    let pixels = |imgs: &[&Image]| Ok(imgs.iter().map(|im| im.pixels().to_vec()).collect());
    let r = evaluate_with(pixels, false, &test_set, &cfg)?;
    println!("raw pixels         {}", r.summary());

    let model: ProtoNet<f32> = ProtoNet::new(ModelConfig::conv64f((1, 16, 16)), 0)?;
    let r = evaluate(&model, &test_set, &cfg)?;
    println!("untrained backbone {}", r.summary());

    // five repeats of 1,000 episodes, averaged
    let heavy = EvalConfig {
        seed: 1,
        ..cfg.full_protocol()
    };
    let r = evaluate_with(pixels, false, &test_set, &heavy)?;
    for (i, (m, h)) in r.repeats.iter().enumerate() {
        println!("  repeat {i}: {:.2}% ± {:.2}", 100.0 * m, 100.0 * h);
    }
    println!("raw pixels, 5×1000 {}", r.summary());
    Ok(())
}
