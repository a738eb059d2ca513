//! Apply every operator preset to a few images and write one PGM grid per
//! preset. The first column holds the source image.
//!
//! ```text
//! cargo run --release --example augment_gallery -- out/gallery
//! ```

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ulda::augment::{apply_set, DstimAlphas, OperatorSet};
use ulda::data_io::{generate_synthetic, tile_grid, write_pnm};

const PRESETS: [&str; 8] = [
    "TA",
    "AA",
    "R",
    "TIMadd",
    "TIMsub",
    "AA+TIMsub",
    "R+TA+TIMadd",
    "AA+R+TA",
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/gallery".into()),
    );
    std::fs::create_dir_all(&out)?;
    let set = generate_synthetic(4, 1, (1, 28, 28), 7)?;
    let images = set.images();

    for name in PRESETS {
        let ops = OperatorSet::preset(name, DstimAlphas::default())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        for (i, src) in images.iter().enumerate() {
            // the mixing operators blend with the next image in the list
            let partner = &images[(i + 1) % images.len()];
            let mut row = vec![src.clone()];
            for _ in 0..6 {
                row.push(apply_set(src, &ops, Some(partner), &mut rng)?.0);
            }
            rows.push(row);
        }
        let path = out.join(format!("{}.pgm", name.replace('+', "_").to_lowercase()));
        write_pnm(&path, &tile_grid(&rows)?)?;
        println!(
            "{name:<12} {} operators -> {}",
            ops.ops().len(),
            path.display()
        );
    }
    Ok(())
}
