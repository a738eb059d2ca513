//! Episodic training: one Adam step per pretext episode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::augment::{DstimAlphas, OperatorSet};
use crate::episodes::{derive_seed, episode_at, EpisodeConfig, LabeledSet, UnlabeledPool};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::model::{decode_u64, encode_u64, ModelConfig, ProtoNet};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, NamedTensor, Tape};

/// Learning-rate multipliers keyed by the first epoch they apply to.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    /// `(epoch, factor)`, strictly increasing in epoch.
    pub factors: Vec<(usize, f64)>,
    /// Multiply factors together instead of each replacing the last.
    pub compound: bool,
}

pub const DEFAULT_LR_FACTORS: [(usize, f64); 3] = [(20, 0.06), (40, 0.012), (50, 0.0024)];
pub const DEFAULT_EPOCHS: usize = 60;

impl LrSchedule {
    pub fn standard() -> Self {
        Self {
            initial: 0.001,
            factors: DEFAULT_LR_FACTORS.to_vec(),
            compound: false,
        }
    }

    /// The default thresholds rescaled from 60 epochs to `epochs`. Thresholds
    /// that collide or fall on or after the last epoch are dropped.
    pub fn rescaled(epochs: usize) -> Self {
        let mut factors: Vec<(usize, f64)> = Vec::new();
        for (t, f) in DEFAULT_LR_FACTORS {
            let e = ((t * epochs) as f64 / DEFAULT_EPOCHS as f64).round() as usize;
            if e == 0 || e >= epochs || factors.last().is_some_and(|&(p, _)| p >= e) {
                continue;
            }
            factors.push((e, f));
        }
        Self {
            factors,
            ..Self::standard()
        }
    }

    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            factors: Vec::new(),
            compound: false,
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!(
                "initial lr must be positive, got {}",
                self.initial
            )));
        }
        let mut prev = None;
        for &(e, f) in &self.factors {
            if prev.is_some_and(|p| e <= p) {
                return Err(Error::Config(
                    "lr factor epochs must be strictly increasing".into(),
                ));
            }
            if e >= epochs {
                return Err(Error::Config(format!(
                    "lr factor epoch {e} is not below epochs = {epochs}"
                )));
            }
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("lr factor {f} must be positive")));
            }
            prev = Some(e);
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch`.
pub fn lr_at(epoch: usize, epochs: usize, schedule: &LrSchedule) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range 0..{epochs}"
        )));
    }
    let active = schedule.factors.iter().filter(|&&(e, _)| e <= epoch);
    let factor = if schedule.compound {
        active.map(|&(_, f)| f).product()
    } else {
        active.last().map_or(1.0, |&(_, f)| f)
    };
    Ok(schedule.initial * factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub gamma: f64,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub aug_support: String,
    pub aug_query: String,
    pub alphas: DstimAlphas,
    pub filters: usize,
    pub literal_scores: bool,
    /// Held-out evaluation after every epoch; `None` disables it.
    pub eval: Option<EvalConfig>,
    /// Record measured seconds in the run log. Off keeps logs bit-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: LrSchedule::standard(),
            gamma: 1.0,
            seed: 0,
            episode: EpisodeConfig::default(),
            aug_support: "AA+TIMsub".into(),
            aug_query: "R+TA+TIMadd".into(),
            alphas: DstimAlphas::default(),
            filters: 64,
            literal_scores: false,
            eval: None,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, pool_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        self.lr.validate(self.epochs)?;
        self.episode.validate(pool_len)
    }

    pub fn operator_sets(&self) -> Result<(OperatorSet, OperatorSet)> {
        Ok((
            OperatorSet::preset(&self.aug_support, self.alphas)?,
            OperatorSet::preset(&self.aug_query, self.alphas)?,
        ))
    }

    pub fn model_config(&self, input: (usize, usize, usize)) -> ModelConfig {
        ModelConfig {
            input,
            filters: self.filters,
            blocks: 4,
            literal_scores: self.literal_scores,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub loss_few: f64,
    pub loss_self: f64,
    pub lr: f64,
    pub seconds: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

pub const RUNLOG_HEADER: &str = "epoch,train_acc,loss_few,loss_self,lr,seconds,eval_acc";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let eval = r.eval_acc.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:e},{:.3},{}",
                r.epoch, r.train_acc, r.loss_few, r.loss_self, r.lr, r.seconds, eval
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-episode training statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_few: f64,
    pub loss_self: f64,
    pub accuracy: f64,
}

/// Drives training of one model on one pool.
pub struct Trainer<'a> {
    pool: &'a UnlabeledPool,
    eval_set: Option<&'a LabeledSet>,
    cfg: TrainConfig,
    a_s: OperatorSet,
    a_q: OperatorSet,
    effective_gamma: f64,
    pub model: ProtoNet<f32>,
    pub log: RunLog,
    next_epoch: usize,
    best_eval: Option<f64>,
    out_dir: Option<PathBuf>,
    warnings: Vec<String>,
}

fn f64_record(v: f64) -> [f32; 2] {
    encode_u64(v.to_bits())
}

impl<'a> Trainer<'a> {
    pub fn new(pool: &'a UnlabeledPool, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(pool.len())?;
        let model = ProtoNet::new(
            cfg.model_config(pool.shape()),
            derive_seed(cfg.seed, 0x1217),
        )?;
        Self::with_model(pool, cfg, model)
    }

    fn with_model(pool: &'a UnlabeledPool, cfg: TrainConfig, model: ProtoNet<f32>) -> Result<Self> {
        cfg.validate(pool.len())?;
        if model.config().input != pool.shape() {
            return Err(Error::Config(format!(
                "model expects {:?} images, pool has {:?}",
                model.config().input,
                pool.shape()
            )));
        }
        let (a_s, a_q) = cfg.operator_sets()?;
        let mut warnings = Vec::new();
        let effective_gamma = if cfg.gamma > 0.0 && !a_q.contains_rotation() {
            warnings.push(format!(
                "rotation loss enabled (gamma = {}) but query set `{}` has no rotation; using gamma = 0",
                cfg.gamma,
                a_q.name()
            ));
            0.0
        } else {
            cfg.gamma
        };
        Ok(Self {
            pool,
            eval_set: None,
            cfg,
            a_s,
            a_q,
            effective_gamma,
            model,
            log: RunLog::default(),
            next_epoch: 0,
            best_eval: None,
            out_dir: None,
            warnings,
        })
    }

    /// Evaluate on `set` after each epoch when the config enables it.
    pub fn with_eval_set(mut self, set: &'a LabeledSet) -> Self {
        self.eval_set = Some(set);
        self
    }

    /// Write `last.ckpt`, `best.ckpt` and `runlog.csv` into `dir` as training proceeds.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn effective_gamma(&self) -> f64 {
        self.effective_gamma
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.cfg.epochs
    }

    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.cfg.seed, 0x100_0000 + epoch as u64)
    }

    /// Zero gradients, forward, backward, one Adam step.
    fn step(&mut self, epoch: usize, z: usize, lr: f64) -> Result<StepStats> {
        let ep = episode_at(
            self.pool,
            &self.cfg.episode,
            &self.a_s,
            &self.a_q,
            self.epoch_seed(epoch),
            z,
        )?;
        let diverged = || Error::Diverged {
            seed: ep.seed,
            epoch,
            index: z,
        };
        self.model.store.zero_grad();
        let mut tape = Tape::new();
        let losses = match self
            .model
            .episode_losses(&mut tape, &ep, self.effective_gamma, true)
        {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        let few = tape.value(losses.few).item() as f64;
        let rot = losses.rotation.map_or(0.0, |r| tape.value(r).item() as f64);
        match tape.backward(losses.total, &mut self.model.store) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Err(diverged()),
            Err(e) => return Err(e),
        }
        if self.model.store.iter().any(|p| {
            p.grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        }) {
            return Err(diverged());
        }
        Adam::new(lr).step(&mut self.model.store)?;
        Ok(StepStats {
            loss_few: few,
            loss_self: rot,
            accuracy: losses.correct as f64 / losses.queries as f64,
        })
    }

    /// Trains one full epoch and appends its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let epoch = self.next_epoch;
        let lr = lr_at(epoch, self.cfg.epochs, &self.cfg.lr)?;
        let start = Instant::now();
        let z_total = self.cfg.episode.episodes_per_epoch;
        let (mut acc, mut few, mut rot) = (0.0, 0.0, 0.0);
        for z in 0..z_total {
            let s = self.step(epoch, z, lr)?;
            acc += s.accuracy;
            few += s.loss_few;
            rot += s.loss_self;
        }
        let denom = z_total.max(1) as f64;
        let eval_acc = match (self.cfg.eval, self.eval_set) {
            (Some(ec), Some(set)) => Some(evaluate(&self.model, set, &ec)?.mean_accuracy),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_acc: acc / denom,
            loss_few: few / denom,
            loss_self: rot / denom,
            lr,
            seconds: if self.cfg.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            eval_acc,
        };
        self.log.records.push(record);
        self.next_epoch += 1;
        let improved = match (eval_acc, self.best_eval) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best_eval = eval_acc;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir.join("last.ckpt"))?;
            if improved {
                self.save(&dir.join("best.ckpt"))?;
            }
            self.log.write_csv(&dir.join("runlog.csv"))?;
        }
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.is_finished() {
            let r = self.run_epoch()?;
            on_epoch(&r);
        }
        Ok(())
    }

    /// Model, optimizer state and trainer progress.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = self.model.to_named_tensors();
        t.push(NamedTensor {
            name: "trainer.next_epoch".into(),
            dims: vec![2],
            data: encode_u64(self.next_epoch as u64).to_vec(),
        });
        if let Some(b) = self.best_eval {
            t.push(NamedTensor {
                name: "trainer.best_eval".into(),
                dims: vec![2],
                data: f64_record(b).to_vec(),
            });
        }
        let mut rows = Vec::new();
        for r in &self.log.records {
            let fields = [
                r.epoch as f64,
                r.train_acc,
                r.loss_few,
                r.loss_self,
                r.lr,
                r.seconds,
                r.eval_acc.unwrap_or(f64::NAN),
            ];
            rows.extend(fields.iter().flat_map(|&v| f64_record(v)));
        }
        t.push(NamedTensor {
            name: "trainer.log".into(),
            dims: vec![self.log.records.len(), 14],
            data: rows,
        });
        write_checkpoint(path, &t)
    }

    /// Restores a trainer saved by [`Trainer::save`] so that finishing the
    /// run reproduces an uninterrupted one exactly.
    pub fn resume(pool: &'a UnlabeledPool, cfg: TrainConfig, path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(path)?;
        let model = ProtoNet::from_named_tensors(&tensors)?;
        if *model.config() != cfg.model_config(pool.shape()) {
            return Err(Error::Config(format!(
                "checkpoint model {:?} does not match the configured model",
                model.config()
            )));
        }
        let mut trainer = Self::with_model(pool, cfg, model)?;
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let bad = |what: &str| Error::format(path, 0, format!("malformed `{what}` record"));
        let next = find("trainer.next_epoch").ok_or_else(|| bad("trainer.next_epoch"))?;
        trainer.next_epoch =
            decode_u64(&next.data).ok_or_else(|| bad("trainer.next_epoch"))? as usize;
        if let Some(b) = find("trainer.best_eval") {
            trainer.best_eval = Some(f64::from_bits(
                decode_u64(&b.data).ok_or_else(|| bad("trainer.best_eval"))?,
            ));
        }
        if let Some(log) = find("trainer.log") {
            let vals: Vec<f64> = log
                .data
                .chunks(2)
                .map(|c| {
                    decode_u64(c)
                        .map(f64::from_bits)
                        .ok_or_else(|| bad("trainer.log"))
                })
                .collect::<Result<_>>()?;
            for r in vals.chunks(7) {
                if r.len() != 7 {
                    return Err(bad("trainer.log"));
                }
                trainer.log.records.push(EpochRecord {
                    epoch: r[0] as usize,
                    train_acc: r[1],
                    loss_few: r[2],
                    loss_self: r[3],
                    lr: r[4],
                    seconds: r[5],
                    eval_acc: (!r[6].is_nan()).then_some(r[6]),
                });
            }
        }
        Ok(trainer)
    }
}

/// Trains from scratch and returns the model with its log.
pub fn train(
    pool: &UnlabeledPool,
    cfg: TrainConfig,
    eval_set: Option<&LabeledSet>,
) -> Result<(ProtoNet<f32>, RunLog)> {
    let mut trainer = Trainer::new(pool, cfg)?;
    if let Some(set) = eval_set {
        trainer = trainer.with_eval_set(set);
    }
    trainer.run(|_| {})?;
    Ok((trainer.model, trainer.log))
}
