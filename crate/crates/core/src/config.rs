//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! episode.n_way = 5
//! aug.support = AA+TIMsub
//! ```
//!
//! [`Config::render`] emits every key in a fixed order, and parsing that
//! output yields the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{DstimAlphas, OperatorSet, DIVERSITY_LADDER};
use crate::data_io::Split;
use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Default step thresholds scaled to the configured epoch count.
    Rescaled,
    Constant,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescaled" => Ok(Self::Rescaled),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::Config(format!(
                "train.lr_schedule must be `rescaled` or `constant`, got `{s}`"
            ))),
        }
    }
}

impl ScheduleKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Rescaled => "rescaled",
            Self::Constant => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Classes `0..train_classes` form the training pool, the rest the eval set.
    pub train_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 120,
            per_class: 20,
            train_classes: 100,
            channels: 1,
            size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    /// Dataset root; `None` selects the synthetic corpus.
    pub data_root: Option<PathBuf>,
    pub train_split: Split,
    pub eval_split: Split,
    pub synthetic: SyntheticConfig,
    pub episode: EpisodeConfig,
    pub aug_support: String,
    pub aug_query: String,
    pub alphas: DstimAlphas,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: ScheduleKind,
    pub gamma: f64,
    pub filters: usize,
    pub literal_scores: bool,
    pub eval_each_epoch: bool,
    pub wall_clock: bool,
    pub resume: Option<PathBuf>,
    pub eval: EvalConfig,
    /// Model used by `eval` and `diagnose`.
    pub checkpoint: Option<PathBuf>,
    pub diagnose_pairs: Vec<(String, String)>,
    pub diagnose_samples: usize,
    pub preview_sets: Vec<String>,
    pub preview_images: usize,
    pub preview_draws: usize,
    pub pack_input: Option<PathBuf>,
    pub dump_episode: Option<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            threads: 0,
            data_root: None,
            train_split: Split::Train,
            eval_split: Split::Test,
            synthetic: SyntheticConfig::default(),
            episode: t.episode,
            aug_support: t.aug_support,
            aug_query: t.aug_query,
            alphas: t.alphas,
            epochs: t.epochs,
            lr: t.lr.initial,
            lr_schedule: ScheduleKind::Rescaled,
            gamma: t.gamma,
            filters: t.filters,
            literal_scores: t.literal_scores,
            eval_each_epoch: false,
            wall_clock: false,
            resume: None,
            eval: EvalConfig::default(),
            checkpoint: None,
            diagnose_pairs: DIVERSITY_LADDER
                .iter()
                .map(|&(s, q)| (s.to_string(), q.to_string()))
                .collect(),
            diagnose_samples: 500,
            preview_sets: ["TA", "AA", "R", "TIMadd", "TIMsub"]
                .map(String::from)
                .to_vec(),
            preview_images: 6,
            preview_draws: 8,
            pack_input: None,
            dump_episode: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

/// `TA:TA,AA:R+TA` into preset pairs.
pub fn parse_pairs(value: &str) -> Result<Vec<(String, String)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            pair.split_once(':')
                .map(|(s, q)| (s.trim().to_string(), q.trim().to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("pair `{pair}` is not of the form SUPPORT:QUERY"))
                })
        })
        .collect()
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines over the current values. A key may appear
    /// at most once per text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "data.root" => self.data_root = optional_path(value),
            "data.train_split" => self.train_split = parse(key, value)?,
            "data.eval_split" => self.eval_split = parse(key, value)?,
            "data.synthetic.classes" => self.synthetic.classes = parse(key, value)?,
            "data.synthetic.per_class" => self.synthetic.per_class = parse(key, value)?,
            "data.synthetic.train_classes" => self.synthetic.train_classes = parse(key, value)?,
            "data.synthetic.channels" => self.synthetic.channels = parse(key, value)?,
            "data.synthetic.size" => self.synthetic.size = parse(key, value)?,
            "data.synthetic.seed" => self.synthetic.seed = parse(key, value)?,
            "episode.n_way" => self.episode.n_way = parse(key, value)?,
            "episode.k_shot" => self.episode.k_shot = parse(key, value)?,
            "episode.m_query" => self.episode.m_query = parse(key, value)?,
            "episode.per_epoch" => self.episode.episodes_per_epoch = parse(key, value)?,
            "aug.support" => self.aug_support = value.to_string(),
            "aug.query" => self.aug_query = value.to_string(),
            "aug.alpha_sub" => self.alphas.sub = parse(key, value)?,
            "aug.alpha_add" => self.alphas.add = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.lr_schedule" => self.lr_schedule = value.parse()?,
            "train.gamma" => self.gamma = parse(key, value)?,
            "train.filters" => self.filters = parse(key, value)?,
            "train.literal_scores" => self.literal_scores = parse_bool(key, value)?,
            "train.eval_each_epoch" => self.eval_each_epoch = parse_bool(key, value)?,
            "train.wall_clock" => self.wall_clock = parse_bool(key, value)?,
            "train.resume" => self.resume = optional_path(value),
            "eval.n_way" => self.eval.n_way = parse(key, value)?,
            "eval.k_shot" => self.eval.k_shot = parse(key, value)?,
            "eval.m_query" => self.eval.m_query = parse(key, value)?,
            "eval.episodes" => self.eval.episodes = parse(key, value)?,
            "eval.repeats" => self.eval.repeats = parse(key, value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "checkpoint" => self.checkpoint = optional_path(value),
            "diagnose.pairs" => self.diagnose_pairs = parse_pairs(value)?,
            "diagnose.samples" => self.diagnose_samples = parse(key, value)?,
            "preview.sets" => {
                self.preview_sets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "preview.images" => self.preview_images = parse(key, value)?,
            "preview.draws" => self.preview_draws = parse(key, value)?,
            "pack.input" => self.pack_input = optional_path(value),
            "dump_episode" => {
                self.dump_episode = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let pairs = self
            .diagnose_pairs
            .iter()
            .map(|(s, q)| format!("{s}:{q}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("data.root", show_path(&self.data_root)),
            ("data.train_split", self.train_split.as_str().into()),
            ("data.eval_split", self.eval_split.as_str().into()),
            ("data.synthetic.classes", self.synthetic.classes.to_string()),
            (
                "data.synthetic.per_class",
                self.synthetic.per_class.to_string(),
            ),
            (
                "data.synthetic.train_classes",
                self.synthetic.train_classes.to_string(),
            ),
            (
                "data.synthetic.channels",
                self.synthetic.channels.to_string(),
            ),
            ("data.synthetic.size", self.synthetic.size.to_string()),
            ("data.synthetic.seed", self.synthetic.seed.to_string()),
            ("episode.n_way", self.episode.n_way.to_string()),
            ("episode.k_shot", self.episode.k_shot.to_string()),
            ("episode.m_query", self.episode.m_query.to_string()),
            (
                "episode.per_epoch",
                self.episode.episodes_per_epoch.to_string(),
            ),
            ("aug.support", self.aug_support.clone()),
            ("aug.query", self.aug_query.clone()),
            // `{:?}` keeps the shortest round-tripping float text
            ("aug.alpha_sub", format!("{:?}", self.alphas.sub)),
            ("aug.alpha_add", format!("{:?}", self.alphas.add)),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr", format!("{:?}", self.lr)),
            ("train.lr_schedule", self.lr_schedule.as_str().into()),
            ("train.gamma", format!("{:?}", self.gamma)),
            ("train.filters", self.filters.to_string()),
            ("train.literal_scores", self.literal_scores.to_string()),
            ("train.eval_each_epoch", self.eval_each_epoch.to_string()),
            ("train.wall_clock", self.wall_clock.to_string()),
            ("train.resume", show_path(&self.resume)),
            ("eval.n_way", self.eval.n_way.to_string()),
            ("eval.k_shot", self.eval.k_shot.to_string()),
            ("eval.m_query", self.eval.m_query.to_string()),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.repeats", self.eval.repeats.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("diagnose.pairs", pairs),
            ("diagnose.samples", self.diagnose_samples.to_string()),
            ("preview.sets", self.preview_sets.join(",")),
            ("preview.images", self.preview_images.to_string()),
            ("preview.draws", self.preview_draws.to_string()),
            ("pack.input", show_path(&self.pack_input)),
            (
                "dump_episode",
                self.dump_episode.map(|z| z.to_string()).unwrap_or_default(),
            ),
        ]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Checks that every referenced preset resolves and that values are in range.
    pub fn validate(&self) -> Result<()> {
        self.alphas_checked()?;
        OperatorSet::preset(&self.aug_support, self.alphas)?;
        OperatorSet::preset(&self.aug_query, self.alphas)?;
        for (s, q) in &self.diagnose_pairs {
            OperatorSet::preset(s, self.alphas)?;
            OperatorSet::preset(q, self.alphas)?;
        }
        for name in &self.preview_sets {
            OperatorSet::preset(name, self.alphas)?;
        }
        let syn = &self.synthetic;
        if self.data_root.is_none() && (syn.train_classes == 0 || syn.train_classes >= syn.classes)
        {
            return Err(Error::Config(format!(
                "data.synthetic.train_classes must lie in 1..{}, got {}",
                syn.classes, syn.train_classes
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    fn alphas_checked(&self) -> Result<()> {
        for (name, a) in [
            ("aug.alpha_sub", self.alphas.sub),
            ("aug.alpha_add", self.alphas.add),
        ] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {a}")));
            }
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.lr_schedule {
            ScheduleKind::Rescaled => LrSchedule {
                initial: self.lr,
                ..LrSchedule::rescaled(self.epochs)
            },
            ScheduleKind::Constant => LrSchedule::constant(self.lr),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr_schedule(),
            gamma: self.gamma,
            seed: self.seed,
            episode: self.episode,
            aug_support: self.aug_support.clone(),
            aug_query: self.aug_query.clone(),
            alphas: self.alphas,
            filters: self.filters,
            literal_scores: self.literal_scores,
            eval: self.eval_each_epoch.then_some(self.eval),
            wall_clock: self.wall_clock,
        }
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
