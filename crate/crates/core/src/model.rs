//! Four-block convolutional embedding, prototype classifier and the
//! rotation-prediction head.
//!
//! Each block is `conv3x3 (no bias) -> batchnorm -> relu -> maxpool2x2`.
//! The embedding is the flattened output of the last block, so
//! `d = filters · ⌊H/16⌋ · ⌊W/16⌋`.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Image;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchNormMode, NamedTensor, ParamId, ParamStore, Real,
    RunningStats, Tape, Tensor, Var,
};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NUM_ROTATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// `(channels, height, width)` of every input image.
    pub input: (usize, usize, usize),
    pub filters: usize,
    pub blocks: usize,
    /// Use the raw distance-ratio score instead of softmax over negative distances.
    pub literal_scores: bool,
}

impl ModelConfig {
    pub fn conv64f(input: (usize, usize, usize)) -> Self {
        Self {
            input,
            filters: 64,
            blocks: 4,
            literal_scores: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        let (_, mut h, mut w) = self.input;
        for _ in 0..self.blocks {
            h /= 2;
            w /= 2;
        }
        self.filters * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || self.filters == 0 || self.blocks == 0 {
            return Err(Error::invalid(
                "model needs positive channels, filters and blocks",
            ));
        }
        if self.embed_dim() == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is too small for {} pooling blocks",
                self.blocks
            )));
        }
        Ok(())
    }
}

struct Block {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Backbone plus rotation head, with parameters, optimizer moments and
/// batch-norm running statistics.
pub struct ProtoNet<T> {
    cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Differentiable pieces of one episode's loss.
pub struct EpisodeLosses {
    pub few: Var,
    /// `None` when no query item carries a rotation label.
    pub rotation: Option<Var>,
    pub total: Var,
    /// Query items whose predicted class matches the label.
    pub correct: usize,
    pub queries: usize,
}

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn filled<T: Real>(n: usize, v: f64) -> Tensor<T> {
    Tensor::new(vec![n], vec![T::from_f64_lossy(v); n]).expect("1-d")
}

impl<T: Real> ProtoNet<T> {
    /// Kaiming-uniform conv and head weights, batch-norm scale 1 and shift 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut running = Vec::with_capacity(cfg.blocks);
        let mut in_ch = cfg.input.0;
        for i in 0..cfg.blocks {
            let f = cfg.filters;
            let conv = store.add(
                format!("block{i}.conv.weight"),
                kaiming_uniform(&[f, in_ch, 3, 3], in_ch * 9, &mut rng),
            )?;
            let gamma = store.add(format!("block{i}.bn.weight"), filled(f, 1.0))?;
            let beta = store.add(format!("block{i}.bn.bias"), filled(f, 0.0))?;
            blocks.push(Block { conv, gamma, beta });
            running.push(RunningStats::new(f));
            in_ch = f;
        }
        let d = cfg.embed_dim();
        let head_w = store.add(
            "rotation.weight",
            kaiming_uniform(&[NUM_ROTATIONS, d], d, &mut rng),
        )?;
        let head_b = store.add("rotation.bias", filled(NUM_ROTATIONS, 0.0))?;
        Ok(Self {
            cfg,
            store,
            running,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim()
    }

    /// Stacks images into an NCHW batch tensor.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (c, h, w) = self.cfg.input;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != self.cfg.input {
                return Err(Error::Shape {
                    op: "embed",
                    lhs: vec![c, h, w],
                    rhs: vec![img.channels(), img.height(), img.width()],
                });
            }
            data.extend(img.pixels().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Records the backbone on `tape`. `x` is `[B, C, H, W]`; the result is `[B, d]`.
    ///
    /// In training mode batch statistics are used and folded into the
    /// running statistics.
    pub fn embed_var(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let mut h = x;
        for (block, running) in self.blocks.iter().zip(self.running.iter_mut()) {
            let w = tape.param(&self.store, block.conv)?;
            let g = tape.param(&self.store, block.gamma)?;
            let b = tape.param(&self.store, block.beta)?;
            h = tape.conv2d(h, w, 1)?;
            let mode = if train {
                BatchNormMode::Train {
                    running,
                    momentum: BN_MOMENTUM,
                }
            } else {
                BatchNormMode::Eval { running }
            };
            h = tape.batchnorm2d(h, g, b, mode)?;
            h = tape.relu(h)?;
            h = tape.maxpool2x2(h)?;
        }
        tape.flatten(h)
    }

    /// Eval-mode embeddings, one row per image. Never mutates the model, so
    /// it may be called from several threads at once.
    pub fn embed_frozen(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(self.batch_tensor(images)?)?;
        for (block, running) in self.blocks.iter().zip(&self.running) {
            let w = tape.constant(self.store.get(block.conv).tensor.clone())?;
            let g = tape.constant(self.store.get(block.gamma).tensor.clone())?;
            let b = tape.constant(self.store.get(block.beta).tensor.clone())?;
            h = tape.conv2d(h, w, 1)?;
            h = tape.batchnorm2d(h, g, b, BatchNormMode::Eval { running })?;
            h = tape.relu(h)?;
            h = tape.maxpool2x2(h)?;
        }
        let e = tape.flatten(h)?;
        let d = self.embed_dim();
        Ok(tape
            .value(e)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
            .collect())
    }

    /// Rotation logits `[B, 4]` for embeddings `[B, d]`.
    pub fn rotation_logits(&self, tape: &mut Tape<T>, emb: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.head_w)?;
        let b = tape.param(&self.store, self.head_b)?;
        tape.linear(emb, w, b)
    }

    /// Records the full episode objective: few-shot loss on the query set plus
    /// `gamma` times the rotation loss over rotation-labelled queries.
    ///
    /// Support and query go through the backbone as one batch.
    pub fn episode_losses(
        &mut self,
        tape: &mut Tape<T>,
        ep: &Episode,
        gamma: f64,
        train: bool,
    ) -> Result<EpisodeLosses> {
        let images: Vec<&Image> = ep
            .support
            .iter()
            .map(|s| &s.image)
            .chain(ep.query.iter().map(|q| &q.image))
            .collect();
        let x = tape.constant(self.batch_tensor(&images)?)?;
        let emb = self.embed_var(tape, x, train)?;
        let ns = ep.support.len();
        let support_rows: Vec<usize> = (0..ns).collect();
        let query_rows: Vec<usize> = (ns..ns + ep.query.len()).collect();
        let s_emb = tape.select_rows(emb, &support_rows)?;
        let q_emb = tape.select_rows(emb, &query_rows)?;

        let protos = prototypes(tape, s_emb, &ep.support_labels(), ep.n_way)?;
        let q_labels = ep.query_labels();
        let (few, scores) = few_shot_loss(tape, q_emb, protos, &q_labels, self.cfg.literal_scores)?;
        let correct = count_correct(tape.value(scores), &q_labels);

        let rot_rows: Vec<usize> = ep
            .query
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.rotation.map(|_| i))
            .collect();
        let rotation = if rot_rows.is_empty() || gamma == 0.0 {
            None
        } else {
            let targets: Vec<usize> = rot_rows
                .iter()
                .map(|&i| ep.query[i].rotation.unwrap() as usize)
                .collect();
            let sel = tape.select_rows(q_emb, &rot_rows)?;
            let logits = self.rotation_logits(tape, sel)?;
            Some(tape.softmax_cross_entropy(logits, &targets)?)
        };
        let total = match rotation {
            Some(r) => total_loss(tape, few, r, gamma)?,
            None => few,
        };
        Ok(EpisodeLosses {
            few,
            rotation,
            total,
            correct,
            queries: q_labels.len(),
        })
    }

    // ------------------------------------------------------------ persistence

    /// Parameters, optimizer state, running statistics and model metadata.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let f32s = |v: &[T]| {
            v.iter()
                .map(|x| x.to_f32().unwrap_or(f32::NAN))
                .collect::<Vec<f32>>()
        };
        let mut out = Vec::new();
        let (c, h, w) = self.cfg.input;
        out.push(NamedTensor {
            name: "meta.model".into(),
            dims: vec![7],
            data: vec![
                c as f32,
                h as f32,
                w as f32,
                self.cfg.filters as f32,
                self.cfg.blocks as f32,
                self.embed_dim() as f32,
                if self.cfg.literal_scores { 1.0 } else { 0.0 },
            ],
        });
        for p in self.store.iter() {
            out.push(NamedTensor {
                name: p.name.clone(),
                dims: p.tensor.shape().to_vec(),
                data: f32s(p.tensor.data()),
            });
        }
        for p in self.store.iter() {
            let n = p.tensor.numel();
            out.push(NamedTensor {
                name: format!("adam.m.{}", p.name),
                dims: vec![n],
                data: f32s(&p.adam_m),
            });
            out.push(NamedTensor {
                name: format!("adam.v.{}", p.name),
                dims: vec![n],
                data: f32s(&p.adam_v),
            });
            out.push(NamedTensor {
                name: format!("adam.step.{}", p.name),
                dims: vec![2],
                data: encode_u64(p.step_count).to_vec(),
            });
        }
        for (i, r) in self.running.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("block{i}.bn.running_mean"),
                dims: vec![r.mean.len()],
                data: f32s(&r.mean),
            });
            out.push(NamedTensor {
                name: format!("block{i}.bn.running_var"),
                dims: vec![r.var.len()],
                data: f32s(&r.var),
            });
        }
        out
    }

    /// Rebuilds a model from checkpoint records. Every tensor the model owns
    /// must be present with the right shape; unknown records are ignored.
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))
        };
        let meta = find("meta.model")?;
        if meta.data.len() != 7 {
            return Err(Error::Config(
                "checkpoint `meta.model` has wrong length".into(),
            ));
        }
        let u = |i: usize| meta.data[i] as usize;
        let cfg = ModelConfig {
            input: (u(0), u(1), u(2)),
            filters: u(3),
            blocks: u(4),
            literal_scores: meta.data[6] != 0.0,
        };
        if cfg.embed_dim() != u(5) {
            return Err(Error::Config(
                "checkpoint embedding size disagrees with its shape metadata".into(),
            ));
        }
        let mut model = ProtoNet::new(cfg, 0)?;
        let take = |t: &NamedTensor, dims: &[usize]| -> Result<Vec<T>> {
            if t.dims != dims {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: dims.to_vec(),
                    rhs: t.dims.clone(),
                });
            }
            Ok(t.data
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect())
        };
        for p in model.store.iter_mut() {
            let dims = p.tensor.shape().to_vec();
            let n = p.tensor.numel();
            p.tensor = Tensor::new(dims.clone(), take(find(&p.name)?, &dims)?)?;
            p.adam_m = take(find(&format!("adam.m.{}", p.name))?, &[n])?;
            p.adam_v = take(find(&format!("adam.v.{}", p.name))?, &[n])?;
            let step = find(&format!("adam.step.{}", p.name))?;
            p.step_count = decode_u64(&step.data)
                .ok_or_else(|| Error::Config(format!("malformed step count for `{}`", p.name)))?;
            p.grad = None;
        }
        for (i, r) in model.running.iter_mut().enumerate() {
            let c = r.mean.len();
            r.mean = take(find(&format!("block{i}.bn.running_mean"))?, &[c])?;
            r.var = take(find(&format!("block{i}.bn.running_var"))?, &[c])?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named_tensors(&read_checkpoint(path)?)
    }
}

/// Splits a `u64` into two `f32` bit patterns so it survives the float-only
/// checkpoint format exactly.
pub(crate) fn encode_u64(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

pub(crate) fn decode_u64(d: &[f32]) -> Option<u64> {
    match d {
        [lo, hi] => Some(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
        _ => None,
    }
}

/// Class means of `support [S, d]` as `[n_way, d]`.
///
/// Computed as a constant averaging matrix times the embeddings, so
/// gradients reach every support row.
pub fn prototypes<T: Real>(
    tape: &mut Tape<T>,
    support: Var,
    labels: &[usize],
    n_way: usize,
) -> Result<Var> {
    let s = labels.len();
    if tape.shape(support)[0] != s {
        return Err(Error::Shape {
            op: "prototypes",
            lhs: tape.shape(support).to_vec(),
            rhs: vec![s],
        });
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| {
            Error::invalid(format!(
                "support label {l} out of range for {n_way} classes"
            ))
        })? += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {missing} has no support example"
        )));
    }
    let mut avg = vec![T::zero(); n_way * s];
    for (j, &l) in labels.iter().enumerate() {
        avg[l * s + j] = T::one() / T::from_usize(counts[l]).unwrap();
    }
    let a = tape.constant(Tensor::new(vec![n_way, s], avg)?)?;
    tape.matmul(a, support)
}

/// Few-shot loss of `query [Q, d]` against `protos [N, d]`.
///
/// Returns `(loss, scores)` where `scores [Q, N]` are the logits
/// `-‖q − p‖²`, or the raw squared distances when `literal` is set.
pub fn few_shot_loss<T: Real>(
    tape: &mut Tape<T>,
    query: Var,
    protos: Var,
    labels: &[usize],
    literal: bool,
) -> Result<(Var, Var)> {
    let dist = tape.sq_dist(query, protos)?;
    if literal {
        let loss = tape.dist_ratio_nll(dist, labels)?;
        Ok((loss, dist))
    } else {
        let logits = tape.scale(dist, -T::one())?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((loss, logits))
    }
}

/// `l_few + gamma · l_self`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, few: Var, rotation: Var, gamma: f64) -> Result<Var> {
    let weighted = tape.scale(rotation, T::from_f64_lossy(gamma))?;
    tape.add(few, weighted)
}

/// Number of rows whose highest score sits at the label. With `literal`
/// scores are distance ratios, whose largest entry is the prediction.
fn count_correct<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> usize {
    let n = scores.shape()[1];
    scores
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Plain-array prototype means. `embeddings[i]` has label `labels[i]`.
pub fn compute_prototypes(
    embeddings: &[Vec<f32>],
    labels: &[usize],
    n_way: usize,
) -> Result<Vec<Vec<f32>>> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("one label per embedding required"));
    }
    let d = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0f64; d]; n_way];
    let mut counts = vec![0usize; n_way];
    for (e, &l) in embeddings.iter().zip(labels) {
        if e.len() != d {
            return Err(Error::Shape {
                op: "compute_prototypes",
                lhs: vec![d],
                rhs: vec![e.len()],
            });
        }
        let slot = sums
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range for {n_way} classes")))?;
        for (s, &v) in slot.iter_mut().zip(e) {
            *s += v as f64;
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {missing} has no support embedding"
        )));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| (v / c as f64) as f32).collect())
        .collect())
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Softmax over negative squared distances from `q` to each prototype.
pub fn classify_query(q: &[f32], protos: &[Vec<f32>]) -> Result<Vec<f64>> {
    if let Some(p) = protos.iter().find(|p| p.len() != q.len()) {
        return Err(Error::Shape {
            op: "classify_query",
            lhs: vec![q.len()],
            rhs: vec![p.len()],
        });
    }
    let logits: Vec<f64> = protos.iter().map(|p| -squared_distance(q, p)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Literal ratio scores `d_i / Σ_j d_j` over squared distances.
pub fn distance_ratio_scores(q: &[f32], protos: &[Vec<f32>]) -> Result<Vec<f64>> {
    if let Some(p) = protos.iter().find(|p| p.len() != q.len()) {
        return Err(Error::Shape {
            op: "distance_ratio_scores",
            lhs: vec![q.len()],
            rhs: vec![p.len()],
        });
    }
    let d: Vec<f64> = protos.iter().map(|p| squared_distance(q, p)).collect();
    let z: f64 = d.iter().sum();
    Ok(d.into_iter().map(|v| v / z).collect())
}

/// Scalar form of the combined objective; rejects non-finite inputs.
pub fn combine_losses(few: f64, rotation: f64, gamma: f64) -> Result<f64> {
    if !(few.is_finite() && rotation.is_finite() && gamma.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(few + gamma * rotation)
}

pub fn argmax_f64(row: &[f64]) -> usize {
    argmax(row)
}
