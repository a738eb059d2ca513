use std::path::Path;

use ulda::augment::Image;
use ulda::data_io::{
    generate_synthetic, load_dataset, pack_directory, read_packed, write_packed, write_pnm,
    Dataset, Split,
};
use ulda::evaluator::{evaluate_with, EvalConfig};

fn write_tree(root: &Path) {
    for (c, class) in ["alpha", "beta"].iter().enumerate() {
        let dir = root.join("train").join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..3 {
            let img = Image::from_fn(1, 4, 5, |_, y, x| {
                ((c * 50 + i * 20 + y * 5 + x) % 256) as f32 / 255.0
            });
            write_pnm(&dir.join(format!("{i}.pgm")), &img).unwrap();
        }
    }
}

#[test]
fn directory_tree_loads_labeled_and_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let (d, manifest) = load_dataset(dir.path(), Split::Train, true).unwrap();
    let Dataset::Labeled(set) = d else {
        panic!("expected labeled")
    };
    assert_eq!((set.len(), set.num_classes()), (6, 2));
    assert_eq!(manifest.class_names, vec!["alpha", "beta"]);
    assert_eq!(manifest.shape, (1, 4, 5));

    let (d, manifest) = load_dataset(dir.path(), Split::Train, false).unwrap();
    let Dataset::Unlabeled(pool) = d else {
        panic!("expected unlabeled")
    };
    assert_eq!(pool.len(), 6);
    assert!(manifest.class_names.is_empty());
}

#[test]
fn packed_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(4, 5, (3, 8, 8), 2).unwrap();
    let path = dir.path().join("train.bin");
    write_packed(&path, set.images(), Some((set.class_names(), set.labels()))).unwrap();
    let first = read_packed(&path).unwrap();
    assert_eq!(first.images.len(), set.len());
    // pixels are stored as u8, so the first export is within half a step
    for (a, b) in first.images.iter().zip(set.images()) {
        assert!(a
            .pixels()
            .iter()
            .zip(b.pixels())
            .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
    assert_eq!(first.labels.as_deref(), Some(set.labels()));
    assert_eq!(first.class_names, set.class_names());

    let again = dir.path().join("again.bin");
    let labels = first.labels.clone().unwrap();
    write_packed(&again, &first.images, Some((&first.class_names, &labels))).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
    let second = read_packed(&again).unwrap();
    let bits = |im: &Image| im.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert!(second
        .images
        .iter()
        .zip(&first.images)
        .all(|(a, b)| bits(a) == bits(b)));

    write_packed(&path, set.images(), None).unwrap();
    assert!(read_packed(&path).unwrap().labels.is_none());
}

#[test]
fn packed_file_takes_precedence_over_tree() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let n = pack_directory(&dir.path().join("train"), &dir.path().join("train.bin")).unwrap();
    assert_eq!(n, 6);
    std::fs::remove_dir_all(dir.path().join("train")).unwrap();
    let (d, _) = load_dataset(dir.path(), Split::Train, true).unwrap();
    assert_eq!(d.len(), 6);
}

#[test]
fn truncated_packed_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(2, 2, (1, 4, 4), 0).unwrap();
    let path = dir.path().join("x.bin");
    write_packed(&path, set.images(), None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_packed(&path).is_err());
}

#[test]
fn synthetic_corpus_counts_and_determinism() {
    let a = generate_synthetic(5, 20, (1, 16, 16), 11).unwrap();
    assert_eq!((a.len(), a.num_classes()), (100, 5));
    assert!(a.images().iter().all(|im| im.shape() == (1, 16, 16)));
    let b = generate_synthetic(5, 20, (1, 16, 16), 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synthetic_classes_are_separable_in_pixel_space() {
    let set = generate_synthetic(60, 20, (1, 16, 16), 3).unwrap();
    let cfg = EvalConfig {
        episodes: 1000,
        ..EvalConfig::default()
    };
    let pixels = |imgs: &[&Image]| Ok(imgs.iter().map(|im| im.pixels().to_vec()).collect());
    let r = evaluate_with(pixels, false, &set, &cfg).unwrap();
    assert!(r.mean_accuracy > 0.60, "{}", r.summary());
}
