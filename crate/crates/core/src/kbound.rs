//! Exponential-moment bound `K(λ)`: estimation from prior samples and the
//! piecewise-linear curve queried during training.
//!
//! For prior samples `h_1..h_n` and training points `z_1..z_m`, the
//! deviations are `X_lj = ℓ(h_l; S) − ℓ(h_l; z_j)`. At each grid `γ` the
//! empirical moment `(1/nm) Σ exp(γ X_lj)` is kept as its logarithm, and
//! `K̂ = max(0, max_γ ln moment(γ) / γ²)`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Var};
use crate::bayes::PriorKind;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ce_per_example, MlpModel};
use crate::rng::{self, Stream};

pub const KCURVE_VERSION: u32 = 1;

/// Ascending grid over `[γ1, γ2]` that includes both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaGrid {
    points: Vec<f64>,
}

impl GammaGrid {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Invalid(format!("gamma range needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        if n < 2 {
            return Err(Error::Invalid(format!("gamma grid needs at least 2 points, got {n}")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        points[n - 1] = hi;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points[0] <= 0.0 || points.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Invalid("gamma grid must be positive, strictly ascending, with at least 2 points".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Natural logarithm of an empirical moment.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogMoment(pub f64);

impl LogMoment {
    pub fn ln(self) -> f64 {
        self.0
    }

    /// The moment itself, or `None` when it is not representable.
    pub fn value(self) -> Option<f64> {
        let v = self.0.exp();
        (v.is_finite()).then_some(v)
    }
}

/// Flattened `X_lj` for a loss matrix with one row per prior sample.
pub fn deviations(losses: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = losses.first().map(Vec::len).unwrap_or(0);
    if m == 0 {
        return Err(Error::Invalid("moment needs at least one model and one example".into()));
    }
    let mut out = Vec::with_capacity(losses.len() * m);
    for row in losses {
        if row.len() != m {
            return Err(Error::Invalid(format!("loss rows of length {} and {m}", row.len())));
        }
        if row.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite per-example loss in moment estimate".into()));
        }
        let mean = row.iter().sum::<f64>() / m as f64;
        out.extend(row.iter().map(|l| mean - l));
    }
    Ok(out)
}

fn log_moment_of(dev: &[f64], gamma: f64) -> LogMoment {
    let scaled: Vec<f64> = dev.iter().map(|x| gamma * x).collect();
    LogMoment(logsumexp(&scaled) - (dev.len() as f64).ln())
}

/// Empirical moment at `gamma` for per-example losses (rows: models).
pub fn empirical_moment(losses: &[Vec<f64>], gamma: f64) -> Result<LogMoment> {
    Ok(log_moment_of(&deviations(losses)?, gamma))
}

/// Log-moments at every grid point.
pub fn log_moments(losses: &[Vec<f64>], grid: &GammaGrid) -> Result<Vec<f64>> {
    let dev = deviations(losses)?;
    Ok(grid.points().iter().map(|&g| log_moment_of(&dev, g).ln()).collect())
}

/// Smallest `K ≥ 0` with `γ² K ≥ ln moment(γ)` at every grid point.
pub fn solve_kmin(grid: &GammaGrid, log_moments: &[f64]) -> Result<f64> {
    if log_moments.len() != grid.len() {
        return Err(Error::Invalid(format!("{} log-moments for {} grid points", log_moments.len(), grid.len())));
    }
    let mut k = 0.0f64;
    for (&g, &lm) in grid.points().iter().zip(log_moments) {
        if !lm.is_finite() {
            return Err(Error::Numeric(format!("non-finite log-moment at gamma = {g}")));
        }
        k = k.max(lm / (g * g));
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub query: f64,
    pub k: f64,
}

/// Piecewise-linear `K̃` over the scalar key (λ, or mean λ for layerwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCurve {
    pub version: u32,
    pub kind: PriorKind,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub grid_size: usize,
    pub samples: usize,
    pub seed: u64,
    pub knots: Vec<Knot>,
}

impl KCurve {
    pub fn from_knots(kind: PriorKind, grid: &GammaGrid, samples: usize, seed: u64, knots: Vec<Knot>) -> Result<Self> {
        let curve = Self {
            version: KCURVE_VERSION,
            kind,
            gamma_lo: grid.lo(),
            gamma_hi: grid.hi(),
            grid_size: grid.len(),
            samples,
            seed,
            knots,
        };
        curve.validate("kcurve")?;
        Ok(curve)
    }

    fn validate(&self, context: &str) -> Result<()> {
        if self.version != KCURVE_VERSION {
            return Err(Error::format(context, format!("unsupported version {}", self.version)));
        }
        if self.knots.is_empty() {
            return Err(Error::format(context, "curve has no knots"));
        }
        if self.knots.iter().any(|k| !(k.query > 0.0 && k.query.is_finite() && k.k >= 0.0 && k.k.is_finite())) {
            return Err(Error::format(context, "knots need positive queries and finite K >= 0"));
        }
        if self.knots.windows(2).any(|w| w[0].query.partial_cmp(&w[1].query) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::format(context, "knot queries must be strictly ascending"));
        }
        Ok(())
    }

    /// `(K̃(q), dK̃/dq)`. Outside the knot range the value is clamped and the
    /// slope is zero; at an interior knot the slope of the right segment is used.
    pub fn eval_with_slope(&self, q: f64) -> (f64, f64) {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if q <= first.query {
            let slope = if q == first.query && self.knots.len() > 1 { segment_slope(first, self.knots[1]) } else { 0.0 };
            return (first.k, slope);
        }
        if q >= last.query {
            return (last.k, 0.0);
        }
        let i = self.knots.partition_point(|k| k.query <= q);
        let (l, r) = (self.knots[i - 1], self.knots[i]);
        let slope = segment_slope(l, r);
        if q == l.query {
            return (l.k, slope);
        }
        let t = (q - l.query) / (r.query - l.query);
        (l.k + t * (r.k - l.k), slope)
    }

    pub fn eval(&self, q: f64) -> f64 {
        self.eval_with_slope(q).0
    }

    /// Evaluates at the mean of `lambdas`.
    pub fn eval_mean(&self, lambdas: &[f64]) -> f64 {
        self.eval(lambdas.iter().sum::<f64>() / lambdas.len() as f64)
    }

    pub fn eval_taped<'t>(&self, key: Var<'t>) -> Result<Var<'t>> {
        Ok(key.map_with_grad(|q| self.eval_with_slope(q))?)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("kcurve", e.to_string()))
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let curve: KCurve = serde_json::from_str(text).map_err(|e| Error::format(context, e.to_string()))?;
        curve.validate(context)?;
        Ok(curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

fn segment_slope(l: Knot, r: Knot) -> f64 {
    (r.k - l.k) / (r.query - l.query)
}

/// `s` log-uniformly spaced values over `[lo, hi]`, endpoints included.
/// A single query sits at the geometric midpoint.
pub fn log_uniform_queries(lo: f64, hi: f64, s: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::Invalid(format!("query range needs 0 < lo < hi, got [{lo}, {hi}]")));
    }
    match s {
        0 => Err(Error::Invalid("need at least one query".into())),
        1 => Ok(vec![(lo * hi).sqrt()]),
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut q: Vec<f64> = (0..s).map(|i| (a + (b - a) * i as f64 / (s - 1) as f64).exp()).collect();
            q[0] = lo;
            q[s - 1] = hi;
            Ok(q)
        }
    }
}

/// Per-example losses of `n` draws from the isotropic prior `N(h0, λ I)`.
///
/// Draw `l` uses a substream keyed by `(λ, l)`, so a query value always
/// sees the same samples.
pub fn prior_losses(
    model: &MlpModel,
    anchor: &[f64],
    lambda: f64,
    data: &Dataset,
    n: usize,
    smoothing: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let scale = lambda.sqrt();
    (0..n)
        .map(|l| {
            let mut r = rng::substream(seed, Stream::Prior, &[lambda.to_bits(), l as u64]);
            let xi = rng::standard_normals(&mut r, anchor.len());
            let h: Vec<f64> = anchor.iter().zip(&xi).map(|(a, x)| a + scale * x).collect();
            let logits = model.logits(&h, data.features())?;
            ce_per_example(&logits, data.labels(), smoothing)
        })
        .collect()
}

/// Estimates `K̂` at each query prior and returns the sorted, de-duplicated curve.
#[allow(clippy::too_many_arguments)]
pub fn build_curve(
    kind: PriorKind,
    queries: &[f64],
    anchor: &[f64],
    model: &MlpModel,
    data: &Dataset,
    n: usize,
    grid: &GammaGrid,
    smoothing: f64,
    seed: u64,
) -> Result<KCurve> {
    if queries.is_empty() {
        return Err(Error::Invalid("K estimation needs at least one query".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("K estimation needs at least one prior sample".into()));
    }
    if let Some(q) = queries.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
        return Err(Error::Invalid(format!("query variance {q} must be positive and finite")));
    }
    if anchor.len() != model.dim() {
        return Err(Error::Invalid(format!("anchor has {} entries, model has {}", anchor.len(), model.dim())));
    }
    let mut sorted = queries.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let knots = sorted
        .par_iter()
        .map(|&lambda| {
            let losses = prior_losses(model, anchor, lambda, data, n, smoothing, seed)?;
            let k = solve_kmin(grid, &log_moments(&losses, grid)?)?;
            Ok(Knot { query: lambda, k })
        })
        .collect::<Result<Vec<_>>>()?;
    KCurve::from_knots(kind, grid, n, seed, knots)
}
