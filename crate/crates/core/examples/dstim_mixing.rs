//! TIM_add and TIM_sub up close: the sampled mixing weights and where the
//! mixed image lands relative to its two sources.
//!
//! ```text
//! cargo run --release --example dstim_mixing
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ulda::augment::ops::{add_lambda, sub_lambda, tim_add_with, tim_sub_with};
use ulda::data_io::generate_synthetic;

fn histogram(values: &[f32], lo: f32, hi: f32, bins: usize) {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f32) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let peak = *counts.iter().max().unwrap_or(&1);
    for (b, c) in counts.iter().enumerate() {
        let left = lo + (hi - lo) * b as f32 / bins as f32;
        println!("  {left:.3} {}", "#".repeat(40 * c / peak.max(1)));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (alpha_add, alpha_sub) = (0.6, 0.8);

    let adds: Vec<f32> = (0..5000)
        .map(|_| add_lambda(alpha_add, &mut rng))
        .collect::<ulda::Result<_>>()?;
    let subs: Vec<f32> = (0..5000)
        .map(|_| sub_lambda(alpha_sub, &mut rng))
        .collect::<ulda::Result<_>>()?;
    println!("TIM_add λ, α = {alpha_add}");
    histogram(&adds, 0.5, 1.0, 10);
    println!("TIM_sub λ, α = {alpha_sub}");
    histogram(&subs, 1.0, 1.5, 10);

    let pair = generate_synthetic(2, 1, (1, 16, 16), 5)?;
    let (x, y) = (&pair.images()[0], &pair.images()[1]);
    println!("\n  λ     | add: d(x)  d(y)  | sub: d(x)  d(y)");
    for lambda in [0.5f32, 0.6, 0.75, 0.9, 1.0] {
        let a = tim_add_with(x, y, lambda)?;
        // the subtractive weight lives half a unit higher
        let s = tim_sub_with(x, y, lambda + 0.5)?;
        println!(
            "  {lambda:.2}  |      {:.3} {:.3} |      {:.3} {:.3}",
            a.l2_distance(x),
            a.l2_distance(y),
            s.l2_distance(x),
            s.l2_distance(y)
        );
    }
    Ok(())
}
