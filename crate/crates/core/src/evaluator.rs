//! Supervised N-way K-shot evaluation with 95% confidence intervals.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::episodes::{
    check_labeled_capacity, derive_seed, episode_seed, sample_labeled_episode, LabeledSet,
};
use crate::error::{Error, Result};
use crate::model::{
    argmax_f64, classify_query, compute_prototypes, distance_ratio_scores, ProtoNet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Episodes per repeat.
    pub episodes: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            m_query: 15,
            episodes: 600,
            repeats: 1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Five repeats of 1,000 episodes.
    pub fn full_protocol(self) -> Self {
        Self {
            episodes: 1000,
            repeats: 5,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episode_count: usize,
    pub per_episode: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// `(mean, ci95)` of each repeat; the headline numbers are their means.
    pub repeats: Vec<(f64, f64)>,
    pub seed: u64,
}

impl EvalReport {
    /// `5-way 1-shot: 40.63 ± 0.61`, in percent.
    pub fn summary(&self) -> String {
        format!(
            "{}-way {}-shot: {:.2} ± {:.2}",
            self.n_way,
            self.k_shot,
            100.0 * self.mean_accuracy,
            100.0 * self.ci95
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `(mean, 1.96 · s / √T)` with `s` the unbiased sample standard deviation.
pub fn confidence_interval(accs: &[f64]) -> Result<(f64, f64)> {
    let t = accs.len();
    if t < 2 {
        return Err(Error::invalid(format!(
            "confidence interval needs at least 2 values, got {t}"
        )));
    }
    let mean = accs.iter().sum::<f64>() / t as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (t as f64).sqrt()))
}

/// Evaluates an arbitrary embedding function. `embed` maps a batch of images
/// to one row per image; it must not depend on batch composition, since every
/// image of `set` is embedded once up front and episodes index into the cache.
pub fn evaluate_with<F>(
    embed: F,
    literal: bool,
    set: &LabeledSet,
    cfg: &EvalConfig,
) -> Result<EvalReport>
where
    F: Fn(&[&Image]) -> Result<Vec<Vec<f32>>> + Sync,
{
    check_labeled_capacity(set, cfg.n_way, cfg.k_shot, cfg.m_query)?;
    if cfg.episodes < 2 || cfg.repeats == 0 {
        return Err(Error::invalid(
            "evaluation needs at least 2 episodes and 1 repeat",
        ));
    }
    let cache: Vec<Vec<f32>> = set
        .images()
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| embed(&chunk.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if cache.len() != set.len() {
        return Err(Error::invalid(
            "embedding function returned the wrong number of rows",
        ));
    }
    let mut per_episode = Vec::with_capacity(cfg.episodes * cfg.repeats);
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let base = derive_seed(cfg.seed, r as u64);
        let accs = (0..cfg.episodes)
            .into_par_iter()
            .map(|t| {
                let ep = sample_labeled_episode(
                    set,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.m_query,
                    episode_seed(base, t as u64),
                )?;
                let support: Vec<Vec<f32>> =
                    ep.support.iter().map(|s| cache[s.source].clone()).collect();
                let protos = compute_prototypes(&support, &ep.support_labels(), ep.n_way)?;
                let mut correct = 0usize;
                for q in &ep.query {
                    let e = &cache[q.source];
                    let scores = if literal {
                        distance_ratio_scores(e, &protos)?
                    } else {
                        classify_query(e, &protos)?
                    };
                    correct += usize::from(argmax_f64(&scores) == q.label);
                }
                Ok(correct as f64 / ep.query.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        repeats.push(confidence_interval(&accs)?);
        per_episode.extend(accs);
    }
    let k = repeats.len() as f64;
    let mean_accuracy = repeats.iter().map(|r| r.0).sum::<f64>() / k;
    let ci95 = repeats.iter().map(|r| r.1).sum::<f64>() / k;
    Ok(EvalReport {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        episode_count: per_episode.len(),
        per_episode,
        mean_accuracy,
        ci95,
        repeats,
        seed: cfg.seed,
    })
}

const EMBED_CHUNK: usize = 64;

/// Evaluates a frozen model; parameters and running statistics are untouched.
pub fn evaluate(model: &ProtoNet<f32>, set: &LabeledSet, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(
        |imgs| model.embed_frozen(imgs),
        model.config().literal_scores,
        set,
        cfg,
    )
}
