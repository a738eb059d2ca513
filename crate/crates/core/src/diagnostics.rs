//! Distribution-shift measurements between two augmented populations.
//!
//! * Pixel-intensity histograms per channel, compared with a Laplace-smoothed
//!   KL divergence.
//! * A Gaussian fit of backbone embeddings, compared with the Fréchet
//!   distance `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, OperatorSet};
use crate::episodes::{derive_seed, UnlabeledPool};
use crate::error::{Error, Result};
use crate::model::ProtoNet;

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_RANGE: (f32, f32) = (-0.5, 1.5);
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramLayout {
    pub bins: usize,
    pub range: (f32, f32),
}

impl Default for HistogramLayout {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            range: DEFAULT_RANGE,
        }
    }
}

impl HistogramLayout {
    /// Bin of `v`; values outside the range land in the edge bins.
    pub fn bin(&self, v: f32) -> usize {
        let (lo, hi) = self.range;
        let t = ((v - lo) / (hi - lo) * self.bins as f32).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }
}

/// Mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "Gaussian fit needs at least 2 samples, got {n}"
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
        }
        let cov = (centered.transpose() * &centered) / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Per-channel histograms plus an optional feature Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStats {
    pub layout: HistogramLayout,
    /// `hist[c][b]`: pixels of channel `c` in bin `b`, summed over samples.
    pub hist: Vec<Vec<u64>>,
    pub count: usize,
    pub features: Option<GaussianFit>,
}

impl SampleStats {
    pub fn from_images(images: &[Image], layout: HistogramLayout) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("no samples"))?;
        if layout.bins == 0 || !(layout.range.1 > layout.range.0) {
            return Err(Error::invalid(
                "histogram needs bins > 0 and an increasing range",
            ));
        }
        let mut hist = vec![vec![0u64; layout.bins]; first.channels()];
        for img in images {
            img.check_same_shape(first, "histogram")?;
            for (c, h) in hist.iter_mut().enumerate() {
                for &v in img.plane(c) {
                    h[layout.bin(v)] += 1;
                }
            }
        }
        Ok(Self {
            layout,
            hist,
            count: images.len(),
            features: None,
        })
    }

    pub fn with_features(mut self, rows: &[Vec<f32>]) -> Result<Self> {
        self.features = Some(GaussianFit::from_rows(rows)?);
        Ok(self)
    }
}

/// Mean over channels of `KL(P_a ‖ P_b)` with add-`smoothing` histograms.
pub fn histogram_kl_smoothed(a: &SampleStats, b: &SampleStats, smoothing: f64) -> Result<f64> {
    if a.layout != b.layout || a.hist.len() != b.hist.len() {
        return Err(Error::invalid(format!(
            "histogram layouts differ: {:?} × {} channels vs {:?} × {} channels",
            a.layout,
            a.hist.len(),
            b.layout,
            b.hist.len()
        )));
    }
    if a.count == 0 || b.count == 0 {
        return Err(Error::invalid("histogram KL needs non-empty samples"));
    }
    if !(smoothing > 0.0) {
        return Err(Error::invalid("smoothing must be positive"));
    }
    let bins = a.layout.bins as f64;
    let mut total = 0.0;
    for (ha, hb) in a.hist.iter().zip(&b.hist) {
        let na: f64 = ha.iter().sum::<u64>() as f64 + smoothing * bins;
        let nb: f64 = hb.iter().sum::<u64>() as f64 + smoothing * bins;
        let mut kl = 0.0;
        for (&ca, &cb) in ha.iter().zip(hb) {
            let p = (ca as f64 + smoothing) / na;
            let q = (cb as f64 + smoothing) / nb;
            kl += p * (p / q).ln();
        }
        total += kl.max(0.0);
    }
    Ok(total / a.hist.len() as f64)
}

pub fn histogram_kl(a: &SampleStats, b: &SampleStats) -> Result<f64> {
    histogram_kl_smoothed(a, b, 1.0)
}

fn ridge(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + DMatrix::identity(m.nrows(), m.ncols()) * COVARIANCE_RIDGE
}

fn condition_note(m: &DMatrix<f64>) -> String {
    let diag = m.diagonal();
    format!(
        "dimension {}, trace {:.3e}, diagonal range [{:.3e}, {:.3e}]",
        m.nrows(),
        m.trace(),
        diag.min(),
        diag.max()
    )
}

/// Symmetric eigendecomposition with negative eigenvalues clipped to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .clone()
        .try_symmetric_eigen(1e-12, 10_000)
        .ok_or_else(|| Error::Eigen(condition_note(&sym)))?;
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen(condition_note(&sym)));
    }
    Ok((vals, eig.eigenvectors))
}

/// `tr((Σa Σb)^½)`, computed as `Σ √λ` over the eigenvalues of the symmetric
/// matrix `Σa^½ Σb Σa^½`, which shares its spectrum with `Σa Σb`.
pub fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let (va, ua) = psd_eigen(sa)?;
    let root_a = &ua * DMatrix::from_diagonal(&va.map(f64::sqrt)) * ua.transpose();
    let inner = &root_a * sb * &root_a;
    let (vals, _) = psd_eigen(&inner)?;
    Ok(vals.iter().map(|v| v.sqrt()).sum())
}

pub fn frechet_between(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape {
            op: "frechet_distance",
            lhs: vec![a.mean.len()],
            rhs: vec![b.mean.len()],
        });
    }
    let (sa, sb) = (ridge(&a.cov), ridge(&b.cov));
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(&sa, &sb)?;
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    // cancellation can leave a tiny negative residue
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &SampleStats, b: &SampleStats) -> Result<f64> {
    match (&a.features, &b.features) {
        (Some(fa), Some(fb)) => frechet_between(fa, fb),
        _ => Err(Error::invalid(
            "Fréchet distance needs feature fits on both samples",
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub aug_support: String,
    pub aug_query: String,
    pub kl: f64,
    pub frechet: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Augments the same `sample_count` sources once with each set and measures
/// the shift between the two populations.
///
/// Source images and mixing partners are shared by both arms, and sample `i`
/// of each arm draws its operator randomness from the same seed, so two
/// equal sets yield identical populations.
pub fn augmented_populations(
    pool: &UnlabeledPool,
    a_s: &OperatorSet,
    a_q: &OperatorSet,
    sample_count: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if pool.len() < 2 {
        return Err(Error::invalid(
            "diversity measurement needs at least 2 pool images",
        ));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD1A6));
    let mut pop_s = Vec::with_capacity(sample_count);
    let mut pop_q = Vec::with_capacity(sample_count);
    for i in 0..sample_count {
        let src = pick.random_range(0..pool.len());
        let mut partner = pick.random_range(0..pool.len() - 1);
        if partner >= src {
            partner += 1;
        }
        let aug_seed = derive_seed(seed, i as u64);
        for (set, out) in [(a_s, &mut pop_s), (a_q, &mut pop_q)] {
            let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
            let op = set.sample(&mut rng);
            let (img, _) = op.apply(pool.image(src), Some(pool.image(partner)), &mut rng)?;
            out.push(img);
        }
    }
    Ok((pop_s, pop_q))
}

pub fn diversity_report(
    pool: &UnlabeledPool,
    a_s: &OperatorSet,
    a_q: &OperatorSet,
    model: &ProtoNet<f32>,
    sample_count: usize,
    seed: u64,
) -> Result<DiversityReport> {
    let (pop_s, pop_q) = augmented_populations(pool, a_s, a_q, sample_count, seed)?;
    let layout = HistogramLayout::default();
    let embed = |pop: &[Image]| -> Result<Vec<Vec<f32>>> {
        let mut rows = Vec::with_capacity(pop.len());
        for chunk in pop.chunks(64) {
            rows.extend(model.embed_frozen(&chunk.iter().collect::<Vec<_>>())?);
        }
        Ok(rows)
    };
    let stats_s = SampleStats::from_images(&pop_s, layout)?.with_features(&embed(&pop_s)?)?;
    let stats_q = SampleStats::from_images(&pop_q, layout)?.with_features(&embed(&pop_q)?)?;
    Ok(DiversityReport {
        aug_support: a_s.name().to_string(),
        aug_query: a_q.name().to_string(),
        kl: histogram_kl(&stats_s, &stats_q)?,
        frechet: frechet_distance(&stats_s, &stats_q)?,
        samples: sample_count,
        seed,
    })
}

pub const DIAGNOSE_HEADER: &str = "aug_support,aug_query,kl,frechet,samples,seed";

pub fn reports_to_csv(reports: &[DiversityReport]) -> String {
    let mut s = String::from(DIAGNOSE_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{}",
            r.aug_support, r.aug_query, r.kl, r.frechet, r.samples, r.seed
        );
    }
    s
}

pub fn write_reports_csv(path: &Path, reports: &[DiversityReport]) -> Result<()> {
    std::fs::write(path, reports_to_csv(reports)).map_err(|e| Error::io(path, e))
}
