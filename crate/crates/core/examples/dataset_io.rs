//! Datasets on disk: a `split/class/*.pgm` tree, loading it labeled and
//! unlabeled, and converting it to the packed binary format.
//!
//! ```text
//! cargo run --release --example dataset_io -- out/data
//! ```

use std::path::PathBuf;

use ulda::data_io::{
    generate_synthetic, load_dataset, pack_directory, read_packed, write_class_tree, Dataset, Split,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/data".into()));
    let set = generate_synthetic(5, 4, (1, 28, 28), 9)?;
    write_class_tree(&root.join("train"), &set)?;
    println!(
        "wrote {} images in {} classes under {}",
        set.len(),
        set.num_classes(),
        root.join("train").display()
    );

    let (labeled, manifest) = load_dataset(&root, Split::Train, true)?;
    println!(
        "labeled load: {} images, classes {:?}, shape {:?}",
        labeled.len(),
        manifest.class_names,
        manifest.shape
    );
    if let (Dataset::Unlabeled(pool), _) = load_dataset(&root, Split::Train, false)? {
        println!(
            "unlabeled load: {} images, each its own pseudo-class",
            pool.len()
        );
    }

    let packed = root.join("train.bin");
    let n = pack_directory(&root.join("train"), &packed)?;
    let back = read_packed(&packed)?;
    let bytes = std::fs::metadata(&packed)?.len();
    println!(
        "packed {n} images into {} ({bytes} bytes); labels kept: {}",
        packed.display(),
        back.labels.is_some()
    );
    Ok(())
}
