//! Command-line front end: `train`, `eval`, `diagnose`, `preview`, `pack`.
//!
//! Every command resolves its configuration (defaults, then `--config`, then
//! flags), prints it, saves a copy as `<out>/config.txt`, and only writes
//! inside `--out`. Failures print one line to stderr,
//! `error kind=<kind> code=<n>: <message>`, and exit with code `n`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_set, OperatorSet};
use crate::config::{parse_pairs, Config};
use crate::data_io::{
    dump_episode, generate_synthetic, load_dataset, pack_directory, tile_grid, write_pnm, Dataset,
    Split,
};
use crate::diagnostics::{diversity_report, write_reports_csv};
use crate::episodes::{derive_seed, episode_at, LabeledSet, UnlabeledPool};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::ProtoNet;
use crate::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(
    name = "ulda",
    version,
    about = "Unsupervised few-shot learning with diverse augmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a backbone on the unlabeled pool.
    Train(CommonArgs),
    /// Evaluate a checkpoint on labeled few-shot episodes.
    Eval(CommonArgs),
    /// Measure support/query distribution shift for operator-set pairs.
    Diagnose(CommonArgs),
    /// Write image galleries of augmentation operator sets.
    Preview(CommonArgs),
    /// Convert `<input>/<split>/<class>/*.pgm|ppm` trees to packed files.
    Pack(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, env = "ULDA_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dataset root; omitted means the synthetic corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ways; applies to evaluation episodes for `eval`, training episodes otherwise.
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub m_query: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "PRESET")]
    pub aug_support: Option<String>,
    #[arg(long, value_name = "PRESET")]
    pub aug_query: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Five repeats of 1,000 evaluation episodes.
    #[arg(long)]
    pub full_protocol: bool,
    /// Also write the images of training episode `z` of epoch 0.
    #[arg(long, value_name = "Z")]
    pub dump_episode: Option<u64>,
    /// Score queries with the distance-ratio form instead of softmax over distances.
    #[arg(long)]
    pub literal_scores: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Operator-set pairs for `diagnose`, e.g. `TA:TA,AA:R+TA`.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Input tree for `pack`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Any config key, e.g. `--set train.lr=0.0005`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Diagnose(_) => "diagnose",
            Command::Preview(_) => "preview",
            Command::Pack(_) => "pack",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Eval(a)
            | Command::Diagnose(a)
            | Command::Preview(a)
            | Command::Pack(a) => a,
        }
    }
}

/// Exit code and short kind for each error class.
pub fn error_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => (3, "config"),
        Error::UnknownPreset(_) => (4, "unknown_preset"),
        Error::Io { .. } => (5, "io"),
        Error::Format { .. } => (6, "format"),
        Error::InsufficientClass { .. } => (7, "insufficient_class"),
        Error::Diverged { .. } => (8, "diverged"),
        Error::Eigen(_) => (9, "eigen"),
        Error::Shape { .. }
        | Error::NonFinite { .. }
        | Error::Backward(_)
        | Error::MissingGrad(_) => (10, "internal"),
    }
}

/// Applies config file and flags on top of the defaults.
pub fn resolve(command: &Command) -> Result<Config> {
    let a = command.args();
    let mut cfg = match &a.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    let is_eval = matches!(command, Command::Eval(_));
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    if let Some(v) = &a.data {
        cfg.data_root = Some(v.clone());
    }
    if let Some(v) = a.n_way {
        if is_eval {
            cfg.eval.n_way = v
        } else {
            cfg.episode.n_way = v
        }
    }
    if let Some(v) = a.k_shot {
        if is_eval {
            cfg.eval.k_shot = v
        } else {
            cfg.episode.k_shot = v
        }
    }
    if let Some(v) = a.m_query {
        if is_eval {
            cfg.eval.m_query = v
        } else {
            cfg.episode.m_query = v
        }
    }
    if let Some(v) = a.episodes_per_epoch {
        cfg.episode.episodes_per_epoch = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = &a.aug_support {
        cfg.aug_support = v.clone();
    }
    if let Some(v) = &a.aug_query {
        cfg.aug_query = v.clone();
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if a.full_protocol {
        cfg.eval = cfg.eval.full_protocol();
    }
    if let Some(v) = a.dump_episode {
        cfg.dump_episode = Some(v);
    }
    if a.literal_scores {
        cfg.literal_scores = true;
    }
    if let Some(v) = &a.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = &a.pairs {
        cfg.diagnose_pairs = parse_pairs(v)?;
    }
    if let Some(v) = &a.input {
        cfg.pack_input = Some(v.clone());
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training pool and held-out labeled set.
pub fn load_data(cfg: &Config) -> Result<(UnlabeledPool, LabeledSet)> {
    match &cfg.data_root {
        Some(root) => {
            let pool = match load_dataset(root, cfg.train_split, false)?.0 {
                Dataset::Unlabeled(p) => p,
                Dataset::Labeled(s) => s.into_pool()?,
            };
            let set = match load_dataset(root, cfg.eval_split, true)?.0 {
                Dataset::Labeled(s) => s,
                Dataset::Unlabeled(_) => unreachable!("labeled load returns a labeled set"),
            };
            Ok((pool, set))
        }
        None => {
            let s = &cfg.synthetic;
            let all =
                generate_synthetic(s.classes, s.per_class, (s.channels, s.size, s.size), s.seed)?;
            let train: Vec<usize> = (0..s.train_classes).collect();
            let test: Vec<usize> = (s.train_classes..s.classes).collect();
            Ok((
                all.subset_classes(&train)?.into_pool()?,
                all.subset_classes(&test)?,
            ))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_checkpoint(cfg: &Config) -> Result<ProtoNet<f32>> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        Error::Config("no checkpoint given (--checkpoint or `checkpoint =`)".into())
    })?;
    ProtoNet::load(path)
}

fn dump_requested(cfg: &Config, pool: &UnlabeledPool, out: &Path) -> Result<()> {
    if let Some(z) = cfg.dump_episode {
        let t = cfg.train_config();
        let (a_s, a_q) = t.operator_sets()?;
        let epoch_seed = derive_seed(t.seed, 0x100_0000);
        let ep = episode_at(pool, &t.episode, &a_s, &a_q, epoch_seed, z as usize)?;
        let dir = out.join(format!("episode_{z}"));
        dump_episode(&dir, &ep)?;
        println!("episode {z} written to {}", dir.display());
    }
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path) -> Result<()> {
    let (pool, eval_set) = load_data(cfg)?;
    dump_requested(cfg, &pool, out)?;
    let tc = cfg.train_config();
    let trainer = match &cfg.resume {
        Some(p) => Trainer::resume(&pool, tc, p)?,
        None => Trainer::new(&pool, tc)?,
    };
    let mut trainer = trainer.with_eval_set(&eval_set).with_output_dir(out);
    for w in trainer.warnings() {
        eprintln!("warning: {w}");
    }
    trainer.run(|r| {
        let eval = r
            .eval_acc
            .map_or(String::new(), |a| format!(" eval_acc {a:.4}"));
        println!(
            "epoch {} train_acc {:.4} loss_few {:.4} loss_self {:.4} lr {:e}{eval}",
            r.epoch, r.train_acc, r.loss_few, r.loss_self, r.lr
        );
    })?;
    // an epochs-already-done resume still leaves a log behind
    trainer.log.write_csv(&out.join("runlog.csv"))?;
    println!("checkpoint {}", out.join("last.ckpt").display());
    Ok(())
}

fn cmd_eval(cfg: &Config, out: &Path) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let (_, set) = load_data(cfg)?;
    let report = evaluate(&model, &set, &cfg.eval)?;
    report.write_json(&out.join("eval.json"))?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_diagnose(cfg: &Config, out: &Path) -> Result<()> {
    let (pool, _) = load_data(cfg)?;
    let model = match &cfg.checkpoint {
        Some(_) => load_checkpoint(cfg)?,
        None => {
            eprintln!("warning: no checkpoint given; features come from an untrained backbone");
            ProtoNet::new(
                cfg.train_config().model_config(pool.shape()),
                derive_seed(cfg.seed, 0x1217),
            )?
        }
    };
    let mut reports = Vec::new();
    for (s, q) in &cfg.diagnose_pairs {
        let a_s = OperatorSet::preset(s, cfg.alphas)?;
        let a_q = OperatorSet::preset(q, cfg.alphas)?;
        let r = diversity_report(&pool, &a_s, &a_q, &model, cfg.diagnose_samples, cfg.seed)?;
        println!(
            "{:<12} | {:<16} kl {:.4} frechet {:.4}",
            r.aug_support, r.aug_query, r.kl, r.frechet
        );
        reports.push(r);
    }
    write_reports_csv(&out.join("diagnose.csv"), &reports)
}

fn file_stem(preset: &str) -> String {
    preset.replace('+', "_").to_lowercase()
}

fn cmd_preview(cfg: &Config, out: &Path) -> Result<()> {
    let (pool, _) = load_data(cfg)?;
    dump_requested(cfg, &pool, out)?;
    let n = cfg.preview_images.min(pool.len());
    if n < 2 {
        return Err(Error::Config("preview needs at least 2 images".into()));
    }
    for name in &cfg.preview_sets {
        let set = OperatorSet::preset(name, cfg.alphas)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x9E11));
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let src = pool.image(i);
            let partner = pool.image((i + 1) % n);
            let mut row = vec![src.clone()];
            for _ in 0..cfg.preview_draws {
                row.push(apply_set(src, &set, Some(partner), &mut rng)?.0);
            }
            rows.push(row);
        }
        let grid = tile_grid(&rows)?;
        let ext = if grid.channels() == 1 { "pgm" } else { "ppm" };
        let path = out.join(format!("preview_{}.{ext}", file_stem(name)));
        write_pnm(&path, &grid)?;
        println!("{name}: {}", path.display());
    }
    Ok(())
}

fn cmd_pack(cfg: &Config, out: &Path) -> Result<()> {
    let input = cfg
        .pack_input
        .as_ref()
        .ok_or_else(|| Error::Config("pack needs --input".into()))?;
    let mut packed = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = input.join(split.as_str());
        if dir.is_dir() {
            let dest = out.join(format!("{}.bin", split.as_str()));
            let n = pack_directory(&dir, &dest)?;
            println!("{}: {n} images -> {}", split.as_str(), dest.display());
            packed += 1;
        }
    }
    if packed == 0 {
        return Err(Error::Config(format!(
            "{} has no train/, val/ or test/ directory",
            input.display()
        )));
    }
    Ok(())
}

/// Runs a parsed command after resolving its configuration.
pub fn execute(command: &Command) -> Result<()> {
    let cfg = resolve(command)?;
    let out = command.args().out.clone();
    if cfg.threads > 0 {
        // fails only if a pool already exists, in which case that pool is used
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let rendered = cfg.render();
    println!("# {} configuration", command.name());
    print!("{rendered}");
    create_dir(&out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, &rendered).map_err(|e| Error::io(&cfg_path, e))?;
    match command {
        Command::Train(_) => cmd_train(&cfg, &out),
        Command::Eval(_) => cmd_eval(&cfg, &out),
        Command::Diagnose(_) => cmd_diagnose(&cfg, &out),
        Command::Preview(_) => cmd_preview(&cfg, &out),
        Command::Pack(_) => cmd_pack(&cfg, &out),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = error_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind} code={code}: {msg}");
            code
        }
    }
}
