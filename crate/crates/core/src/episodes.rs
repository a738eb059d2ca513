//! Pretext and evaluation episode construction.
//!
//! Labels inside an episode are 0-based class slots `0..n_way`. Every episode
//! is a pure function of its inputs and a single `u64` seed, so any episode of
//! an epoch can be rebuilt alone from `(epoch_seed, z)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{Image, OperatorSet};
use crate::error::{Error, Result};

/// Unlabeled training images. There is deliberately no label field.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPool {
    images: Vec<Image>,
    source_ids: Vec<u64>,
}

fn check_uniform_shape(images: &[Image]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("image collection is empty"))?;
    if let Some((i, bad)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| !im.same_shape(first))
    {
        return Err(Error::invalid(format!(
            "image 0 has shape {:?} but image {i} has shape {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(())
}

impl UnlabeledPool {
    /// Pool with source ids `0..len`.
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let ids = (0..images.len() as u64).collect();
        Self::with_ids(images, ids)
    }

    pub fn with_ids(images: Vec<Image>, source_ids: Vec<u64>) -> Result<Self> {
        check_uniform_shape(&images)?;
        if source_ids.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} images but {} source ids",
                images.len(),
                source_ids.len()
            )));
        }
        Ok(Self { images, source_ids })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn source_id(&self, i: usize) -> u64 {
        self.source_ids[i]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }
}

/// Images with true class labels `0..class_names.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    by_class: Vec<Vec<usize>>,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        check_uniform_shape(&images)?;
        if labels.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_class
                .get_mut(l)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "label {l} of item {i} exceeds {} classes",
                        class_names.len()
                    ))
                })?
                .push(i);
        }
        Ok(Self {
            images,
            labels,
            class_names,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    /// Item indices of class `c`, in dataset order.
    pub fn items_of(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    /// Keeps only the classes in `classes`, relabelled `0..classes.len()` in that order.
    pub fn subset_classes(&self, classes: &[usize]) -> Result<LabeledSet> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut names = Vec::new();
        for (new, &c) in classes.iter().enumerate() {
            let items = self
                .by_class
                .get(c)
                .ok_or_else(|| Error::invalid(format!("class {c} out of range")))?;
            names.push(self.class_names[c].clone());
            for &i in items {
                images.push(self.images[i].clone());
                labels.push(new);
            }
        }
        LabeledSet::new(images, labels, names)
    }

    /// Drops every label.
    pub fn into_pool(self) -> Result<UnlabeledPool> {
        UnlabeledPool::new(self.images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes_per_epoch: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            m_query: 5,
            episodes_per_epoch: 10_000,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, pool_len: usize) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::invalid(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 || self.m_query == 0 {
            return Err(Error::invalid("k_shot and m_query must be positive"));
        }
        if self.n_way > pool_len {
            return Err(Error::invalid(format!(
                "n_way {} exceeds pool size {pool_len}",
                self.n_way
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportItem {
    pub image: Image,
    pub label: usize,
    /// Index of the originating image in the pool or labeled set.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryItem {
    pub image: Image,
    pub label: usize,
    pub rotation: Option<u8>,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<SupportItem>,
    pub query: Vec<QueryItem>,
    pub seed: u64,
}

impl Episode {
    pub fn m_query(&self) -> usize {
        self.query.len() / self.n_way
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.label).collect()
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of episode `z` within an epoch.
pub fn episode_seed(epoch_seed: u64, z: u64) -> u64 {
    splitmix64(splitmix64(epoch_seed) ^ z)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Uniform class slot other than `own`.
fn other_slot<R: Rng + ?Sized>(own: usize, n: usize, rng: &mut R) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= own {
        j + 1
    } else {
        j
    }
}

/// Builds one pretext episode from unlabeled images.
///
/// `n_way` distinct sources are drawn without replacement and given slots
/// `0..n_way`. Each support and query item is one operator drawn from its set
/// applied to the slot's source image. Mixing partners are the raw source of
/// a uniformly chosen different slot, so an item never mixes with its own
/// source.
pub fn sample_episode(
    pool: &UnlabeledPool,
    cfg: &EpisodeConfig,
    a_s: &OperatorSet,
    a_q: &OperatorSet,
    seed: u64,
) -> Result<Episode> {
    cfg.validate(pool.len())?;
    let n = cfg.n_way;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = index::sample(&mut rng, pool.len(), n).into_vec();

    let mut support = Vec::with_capacity(n * cfg.k_shot);
    for (label, &src) in sources.iter().enumerate() {
        for _ in 0..cfg.k_shot {
            let op = a_s.sample(&mut rng);
            let partner = op
                .needs_partner()
                .then(|| pool.image(sources[other_slot(label, n, &mut rng)]));
            let (image, _) = op.apply(pool.image(src), partner, &mut rng)?;
            support.push(SupportItem {
                image,
                label,
                source: src,
            });
        }
    }

    let mut query = Vec::with_capacity(n * cfg.m_query);
    for (label, &src) in sources.iter().enumerate() {
        for _ in 0..cfg.m_query {
            let op = a_q.sample(&mut rng);
            let partner = op
                .needs_partner()
                .then(|| pool.image(sources[other_slot(label, n, &mut rng)]));
            let (image, rotation) = op.apply(pool.image(src), partner, &mut rng)?;
            query.push(QueryItem {
                image,
                label,
                rotation,
                source: src,
            });
        }
    }

    Ok(Episode {
        n_way: n,
        k_shot: cfg.k_shot,
        support,
        query,
        seed,
    })
}

/// Episode `z` of the epoch seeded by `epoch_seed`.
pub fn episode_at(
    pool: &UnlabeledPool,
    cfg: &EpisodeConfig,
    a_s: &OperatorSet,
    a_q: &OperatorSet,
    epoch_seed: u64,
    z: usize,
) -> Result<Episode> {
    sample_episode(pool, cfg, a_s, a_q, episode_seed(epoch_seed, z as u64))
}

/// All `episodes_per_epoch` episodes of one epoch, built in parallel.
pub fn build_epoch(
    pool: &UnlabeledPool,
    cfg: &EpisodeConfig,
    a_s: &OperatorSet,
    a_q: &OperatorSet,
    epoch_seed: u64,
) -> Result<Vec<Episode>> {
    (0..cfg.episodes_per_epoch)
        .into_par_iter()
        .map(|z| episode_at(pool, cfg, a_s, a_q, epoch_seed, z))
        .collect()
}

/// Supervised N-way K-shot episode with `m_query` queries per class and no augmentation.
pub fn sample_labeled_episode(
    set: &LabeledSet,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    seed: u64,
) -> Result<Episode> {
    check_labeled_capacity(set, n_way, k_shot, m_query)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = index::sample(&mut rng, set.num_classes(), n_way).into_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * m_query);
    for (label, &c) in classes.iter().enumerate() {
        let items = set.items_of(c);
        let picked = index::sample(&mut rng, items.len(), k_shot + m_query);
        for (slot, i) in picked.iter().enumerate() {
            let src = items[i];
            let image = set.images()[src].clone();
            if slot < k_shot {
                support.push(SupportItem {
                    image,
                    label,
                    source: src,
                });
            } else {
                query.push(QueryItem {
                    image,
                    label,
                    rotation: None,
                    source: src,
                });
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        support,
        query,
        seed,
    })
}

/// Fails naming the first class with fewer than `k_shot + m_query` items.
pub fn check_labeled_capacity(
    set: &LabeledSet,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
) -> Result<()> {
    if n_way < 2 || k_shot == 0 || m_query == 0 {
        return Err(Error::invalid(format!(
            "invalid episode shape {n_way}-way {k_shot}-shot {m_query}-query"
        )));
    }
    if set.num_classes() < n_way {
        return Err(Error::invalid(format!(
            "{n_way}-way episodes need {n_way} classes, set has {}",
            set.num_classes()
        )));
    }
    let need = k_shot + m_query;
    for c in 0..set.num_classes() {
        let have = set.items_of(c).len();
        if have < need {
            return Err(Error::InsufficientClass {
                class: set.class_names()[c].clone(),
                have,
                need,
            });
        }
    }
    Ok(())
}
