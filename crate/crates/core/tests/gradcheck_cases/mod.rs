//! Reverse-mode gradients against central finite differences in f64, shared
//! by the gradient tests and the acceptance report.
//!
//! Each check perturbs one parameter coordinate by ±h and compares
//! `(f(θ+h) − f(θ−h)) / 2h` with the recorded gradient. Piecewise-linear ops
//! (ReLU, max-pool) are only compared where both perturbed passes take the
//! same branches as the unperturbed one; other coordinates are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ulda::augment::{Image, OperatorSet};
use ulda::episodes::{sample_episode, EpisodeConfig, UnlabeledPool};
use ulda::model::{ModelConfig, ProtoNet};
use ulda::tensor::{BatchNormMode, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TRIALS: usize = 60;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(lo..hi))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ r ⊙ v` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n: usize = tape.shape(v).iter().product();
    let flat = tape.reshape(v, &[1, n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(randn(&mut rng, &[n, 1], 1.0)).unwrap();
    tape.matmul(flat, r).unwrap()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        // both vanish; compare absolutely
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub struct Outcome {
    pub checked: usize,
    pub worst: f64,
}

/// Runs `TRIALS` accepted coordinate checks of `f` over the parameters in `store`.
fn check<F>(name: &str, store: &mut ParamStore<f64>, seed: u64, mut f: F) -> Result<Outcome, String>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let base_sig = tape.branch_signature();
    store.zero_grad();
    tape.backward(loss, store).unwrap();
    let grads: Vec<(ParamId, Vec<f64>)> = store
        .ids()
        .map(|id| {
            (
                id,
                store
                    .get(id)
                    .grad
                    .clone()
                    .expect("every parameter reaches the loss"),
            )
        })
        .collect();

    let mut eval = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let l = f(&mut t, store);
        (t.value(l).item(), t.branch_signature())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut attempts, mut worst) = (0, 0, 0.0f64);
    while checked < TRIALS {
        attempts += 1;
        if attempts >= 50 * TRIALS {
            return Err(format!("{name}: too many coordinates sit on kinks"));
        }
        let (id, g) = &grads[rng.random_range(0..grads.len())];
        let k = rng.random_range(0..g.len());
        let orig = store.get(*id).tensor.data()[k];
        store.get_mut(*id).tensor.data_mut()[k] = orig + H;
        let (fp, sp) = eval(store);
        store.get_mut(*id).tensor.data_mut()[k] = orig - H;
        let (fm, sm) = eval(store);
        store.get_mut(*id).tensor.data_mut()[k] = orig;
        if sp != base_sig || sm != base_sig {
            continue;
        }
        let numeric = (fp - fm) / (2.0 * H);
        let err = relative_error(g[k], numeric);
        if err > TOL {
            return Err(format!(
                "{name}: {} [{k}] analytic {} numeric {numeric} rel err {err:e}",
                store.get(*id).name,
                g[k]
            ));
        }
        worst = worst.max(err);
        checked += 1;
    }
    Ok(Outcome { checked, worst })
}

fn store_with(params: Vec<(&str, Tensor<f64>)>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = params
        .into_iter()
        .map(|(n, t)| s.add(n, t).unwrap())
        .collect();
    (s, ids)
}

pub fn conv2d() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut s, ids) = store_with(vec![
        ("x", randn(&mut rng, &[2, 3, 5, 5], 1.0)),
        ("w", randn(&mut rng, &[4, 3, 3, 3], 0.5)),
    ]);
    check("conv2d", &mut s, 11, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let w = t.param(s, ids[1]).unwrap();
        let y = t.conv2d(x, w, 1).unwrap();
        project(t, y, 100)
    })
}

pub fn maxpool2x2_odd_extent() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut s, ids) = store_with(vec![("x", randn(&mut rng, &[2, 2, 5, 7], 1.0))]);
    check("maxpool2x2", &mut s, 12, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let y = t.maxpool2x2(x).unwrap();
        project(t, y, 101)
    })
}

pub fn batchnorm2d_train_and_eval() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut s, ids) = store_with(vec![
        ("x", randn(&mut rng, &[3, 2, 3, 3], 1.0)),
        ("gamma", uniform(&mut rng, &[2], 0.5, 1.5)),
        ("beta", randn(&mut rng, &[2], 0.3)),
    ]);
    let train = check("batchnorm2d/train", &mut s, 13, |t, s| {
        let mut running = RunningStats::new(2);
        let x = t.param(s, ids[0]).unwrap();
        let g = t.param(s, ids[1]).unwrap();
        let b = t.param(s, ids[2]).unwrap();
        let mode = BatchNormMode::Train {
            running: &mut running,
            momentum: 0.1,
        };
        let y = t.batchnorm2d(x, g, b, mode).unwrap();
        project(t, y, 102)
    })?;

    let running = RunningStats {
        mean: vec![0.2, -0.1],
        var: vec![0.7, 1.3],
    };
    let eval = check("batchnorm2d/eval", &mut s, 14, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let g = t.param(s, ids[1]).unwrap();
        let b = t.param(s, ids[2]).unwrap();
        let y = t
            .batchnorm2d(x, g, b, BatchNormMode::Eval { running: &running })
            .unwrap();
        project(t, y, 103)
    })?;
    Ok(Outcome {
        checked: train.checked.min(eval.checked),
        worst: train.worst.max(eval.worst),
    })
}

pub fn relu() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut s, ids) = store_with(vec![("x", randn(&mut rng, &[4, 6], 1.0))]);
    check("relu", &mut s, 15, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let y = t.relu(x).unwrap();
        project(t, y, 104)
    })
}

pub fn linear() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut s, ids) = store_with(vec![
        ("x", randn(&mut rng, &[3, 5], 1.0)),
        ("w", randn(&mut rng, &[4, 5], 0.5)),
        ("b", randn(&mut rng, &[4], 0.5)),
    ]);
    check("linear", &mut s, 16, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let w = t.param(s, ids[1]).unwrap();
        let b = t.param(s, ids[2]).unwrap();
        let y = t.linear(x, w, b).unwrap();
        project(t, y, 105)
    })
}

pub fn flatten_and_reshape() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut s, ids) = store_with(vec![("x", randn(&mut rng, &[2, 3, 2, 2], 1.0))]);
    check("flatten", &mut s, 17, |t, s| {
        let x = t.param(s, ids[0]).unwrap();
        let f = t.flatten(x).unwrap();
        let r = t.reshape(f, &[4, 6]).unwrap();
        // a non-linear consumer makes the routing of each coordinate observable
        let y = t.sq_dist(r, r).unwrap();
        project(t, y, 106)
    })
}

pub fn add_sub_scale() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut s, ids) = store_with(vec![
        ("a", randn(&mut rng, &[3, 4], 1.0)),
        ("b", randn(&mut rng, &[3, 4], 1.0)),
    ]);
    check("add/sub/scale", &mut s, 18, |t, s| {
        let a = t.param(s, ids[0]).unwrap();
        let b = t.param(s, ids[1]).unwrap();
        let sum = t.add(a, b).unwrap();
        let diff = t.sub(a, b).unwrap();
        let sc = t.scale(diff, -1.7).unwrap();
        let y = t.sq_dist(sum, sc).unwrap();
        project(t, y, 107)
    })
}

pub fn matmul() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut s, ids) = store_with(vec![
        ("a", randn(&mut rng, &[3, 5], 1.0)),
        ("b", randn(&mut rng, &[5, 4], 1.0)),
    ]);
    check("matmul", &mut s, 19, |t, s| {
        let a = t.param(s, ids[0]).unwrap();
        let b = t.param(s, ids[1]).unwrap();
        let y = t.matmul(a, b).unwrap();
        project(t, y, 108)
    })
}

pub fn sq_dist_and_select_rows() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut s, ids) = store_with(vec![
        ("a", randn(&mut rng, &[5, 4], 1.0)),
        ("b", randn(&mut rng, &[3, 4], 1.0)),
    ]);
    check("sq_dist", &mut s, 20, |t, s| {
        let a = t.param(s, ids[0]).unwrap();
        let b = t.param(s, ids[1]).unwrap();
        // repeated and reordered rows exercise gradient accumulation
        let picked = t.select_rows(a, &[4, 0, 2, 0]).unwrap();
        let y = t.sq_dist(picked, b).unwrap();
        project(t, y, 109)
    })
}

pub fn softmax_cross_entropy() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut s, ids) = store_with(vec![("logits", randn(&mut rng, &[6, 5], 2.0))]);
    check("softmax_ce", &mut s, 21, |t, s| {
        let l = t.param(s, ids[0]).unwrap();
        t.softmax_cross_entropy(l, &[0, 4, 2, 2, 1, 3]).unwrap()
    })
}

pub fn dist_ratio_nll() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut s, ids) = store_with(vec![("d", uniform(&mut rng, &[4, 3], 0.5, 3.0))]);
    check("dist_ratio_nll", &mut s, 22, |t, s| {
        let d = t.param(s, ids[0]).unwrap();
        t.dist_ratio_nll(d, &[2, 0, 1, 1]).unwrap()
    })
}

fn tiny_episode_model(literal: bool) -> (ProtoNet<f64>, ulda::episodes::Episode) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images: Vec<Image> = (0..12)
        .map(|_| Image::from_fn(1, 16, 16, |_, _, _| rng.random_range(0.0..1.0)))
        .collect();
    let pool = UnlabeledPool::new(images).unwrap();
    let cfg = EpisodeConfig {
        n_way: 3,
        k_shot: 1,
        m_query: 2,
        episodes_per_epoch: 1,
    };
    let a_s = OperatorSet::preset("AA+TIMsub", Default::default()).unwrap();
    let a_q = OperatorSet::preset("R", Default::default()).unwrap();
    let ep = sample_episode(&pool, &cfg, &a_s, &a_q, 77).unwrap();
    let model = ProtoNet::new(
        ModelConfig {
            input: (1, 16, 16),
            filters: 8,
            blocks: 4,
            literal_scores: literal,
        },
        5,
    )
    .unwrap();
    (model, ep)
}

pub fn full_loss(literal: bool, seed: u64) -> Result<Outcome, String> {
    let (mut model, ep) = tiny_episode_model(literal);
    let mut store = std::mem::take(&mut model.store);
    check("full loss", &mut store, seed, |t, s| {
        model.store = s.clone();
        let l = model.episode_losses(t, &ep, 1.0, true).unwrap();
        assert!(l.rotation.is_some());
        l.total
    })
}

pub fn full_episode_loss() -> Result<Outcome, String> {
    full_loss(false, 23)
}

pub fn full_episode_loss_literal_scores() -> Result<Outcome, String> {
    full_loss(true, 24)
}

pub type Case = (&'static str, fn() -> Result<Outcome, String>);

/// Every checked op followed by the complete episode loss.
pub const CASES: [Case; 13] = [
    ("conv2d", conv2d),
    ("maxpool2x2", maxpool2x2_odd_extent),
    ("batchnorm2d", batchnorm2d_train_and_eval),
    ("relu", relu),
    ("linear", linear),
    ("flatten+reshape", flatten_and_reshape),
    ("add/sub/scale", add_sub_scale),
    ("matmul", matmul),
    ("sq_dist+select_rows", sq_dist_and_select_rows),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("dist_ratio_nll", dist_ratio_nll),
    ("episode loss", full_episode_loss),
    ("episode loss (literal)", full_episode_loss_literal_scores),
];
