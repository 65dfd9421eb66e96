//! Diagonal Gaussian posterior and scalar / layerwise Gaussian priors.
//!
//! Both distributions store **log-variances**: the posterior variance is
//! `σ = exp(v)` and the prior variance is `λ = exp(b)`. Sampling therefore
//! scales standard normals by `exp(v / 2)` and `exp(b / 2)`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::standard_normals;

/// `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSpec {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Scalar,
    Layerwise,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Scalar => "scalar",
            PriorKind::Layerwise => "layerwise",
        })
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(PriorKind::Scalar),
            "layerwise" => Ok(PriorKind::Layerwise),
            other => Err(Error::config("prior", format!("expected `scalar` or `layerwise`, got `{other}`"))),
        }
    }
}

/// `N(anchor, BlockDiag(exp(log_var)))` over contiguous parameter groups.
///
/// A scalar prior has one log-variance shared by every group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub anchor: Vec<f64>,
    pub kind: PriorKind,
    pub log_var: Vec<f64>,
    pub group_sizes: Vec<usize>,
}

/// `ln(‖h0‖₁ / d)`, the starting log-variance for both distributions.
pub fn initial_log_var(anchor: &[f64]) -> Result<f64> {
    let l1: f64 = anchor.iter().map(|x| x.abs()).sum();
    if anchor.is_empty() || l1 <= 0.0 {
        return Err(Error::Invalid("initial log-variance needs a non-zero anchor".into()));
    }
    Ok((l1 / anchor.len() as f64).ln())
}

impl PosteriorSpec {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Invalid(format!("posterior mean {} vs log-variance {}", mean.len(), log_var.len())));
        }
        Ok(Self { mean, log_var })
    }

    /// Mean at the anchor, isotropic log-variance `ln(‖h0‖₁/d)`.
    pub fn init(anchor: &[f64]) -> Result<Self> {
        let v0 = initial_log_var(anchor)?;
        Ok(Self { mean: anchor.to_vec(), log_var: vec![v0; anchor.len()] })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn mean_variance(&self) -> f64 {
        self.variances().iter().sum::<f64>() / self.dim() as f64
    }

    /// `h + exp(v/2) ⊙ ξ` for caller-supplied standard normals.
    pub fn sample_with_noise(&self, noise: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((h, v), xi)| h + (0.5 * v).exp() * xi)
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let xi = standard_normals(rng, self.dim());
        self.sample_with_noise(&xi)
    }
}

impl PriorSpec {
    pub fn new(anchor: Vec<f64>, kind: PriorKind, log_var: Vec<f64>, group_sizes: Vec<usize>) -> Result<Self> {
        let covered: usize = group_sizes.iter().sum();
        if covered != anchor.len() {
            return Err(Error::Invalid(format!("groups cover {covered} of {} parameters", anchor.len())));
        }
        let expected = match kind {
            PriorKind::Scalar => 1,
            PriorKind::Layerwise => group_sizes.len(),
        };
        if log_var.len() != expected {
            return Err(Error::Invalid(format!("{kind} prior needs {expected} log-variances, got {}", log_var.len())));
        }
        Ok(Self { anchor, kind, log_var, group_sizes })
    }

    pub fn init(anchor: Vec<f64>, kind: PriorKind, group_sizes: Vec<usize>) -> Result<Self> {
        let b0 = initial_log_var(&anchor)?;
        let k = match kind {
            PriorKind::Scalar => 1,
            PriorKind::Layerwise => group_sizes.len(),
        };
        Self::new(anchor, kind, vec![b0; k], group_sizes)
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// Degrees of freedom of the prior family.
    pub fn degrees_of_freedom(&self) -> usize {
        self.log_var.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|b| b.exp()).collect()
    }

    /// Mean of `λ`, the key used to look up the exponential-moment curve.
    pub fn mean_variance(&self) -> f64 {
        let l = self.variances();
        l.iter().sum::<f64>() / l.len() as f64
    }

    /// For each parameter, the index into `log_var` that governs it.
    pub fn log_var_index(&self) -> Arc<Vec<usize>> {
        Arc::new(match self.kind {
            PriorKind::Scalar => vec![0; self.dim()],
            PriorKind::Layerwise => self
                .group_sizes
                .iter()
                .enumerate()
                .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
                .collect(),
        })
    }

    /// Keeps `λ` inside `[lo, hi]`.
    pub fn project(&mut self, lo: f64, hi: f64) {
        let (lo, hi) = (lo.ln(), hi.ln());
        for b in &mut self.log_var {
            *b = b.clamp(lo, hi);
        }
    }

    pub fn sample_with_noise(&self, noise: &[f64]) -> Vec<f64> {
        let idx = self.log_var_index();
        self.anchor
            .iter()
            .zip(noise)
            .zip(idx.iter())
            .map(|((h0, xi), &g)| h0 + (0.5 * self.log_var[g]).exp() * xi)
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let xi = standard_normals(rng, self.dim());
        self.sample_with_noise(&xi)
    }
}

fn check_pair(post: &PosteriorSpec, prior: &PriorSpec) -> Result<()> {
    if post.dim() != prior.dim() {
        return Err(Error::Invalid(format!("posterior dim {} vs prior dim {}", post.dim(), prior.dim())));
    }
    Ok(())
}

/// Recorded KL for the scalar prior:
/// `½[−Σv + d(b − 1) + (Σ exp v + ‖h − h0‖²)·exp(−b)]`.
pub fn kl_scalar_taped<'t>(mean: Var<'t>, log_var: Var<'t>, anchor: Var<'t>, prior_log_var: Var<'t>) -> Result<Var<'t>> {
    let d = mean.value().len() as f64;
    let b = prior_log_var.reshape(vec![])?;
    let neg_log_det = log_var.sum()?.neg()?;
    let dim_term = b.add_scalar(-1.0)?.scale(d)?;
    let trace = log_var.exp()?.sum()?;
    let dist = mean.sub(anchor)?.square()?.sum()?;
    let weighted = trace.add(dist)?.mul(b.neg()?.exp()?)?;
    Ok(neg_log_det.add(dim_term)?.add(weighted)?.scale(0.5)?)
}

/// Recorded KL for a layerwise prior, `index[i]` naming the prior group of
/// parameter `i`.
pub fn kl_layerwise_taped<'t>(
    mean: Var<'t>,
    log_var: Var<'t>,
    anchor: Var<'t>,
    prior_log_var: Var<'t>,
    index: Arc<Vec<usize>>,
) -> Result<Var<'t>> {
    let d = mean.value().len() as f64;
    if index.len() != mean.value().len() {
        return Err(Error::Invalid(format!("group map covers {} of {d} parameters", index.len())));
    }
    let b = prior_log_var.gather(index)?;
    let neg_log_det = log_var.sum()?.neg()?;
    let dim_term = b.sum()?.add_scalar(-d)?;
    let spread = log_var.exp()?.add(mean.sub(anchor)?.square()?)?;
    let weighted = spread.mul(b.neg()?.exp()?)?.sum()?;
    Ok(neg_log_det.add(dim_term)?.add(weighted)?.scale(0.5)?)
}

/// Recorded KL for whichever kind `prior` is.
pub fn kl_taped<'t>(mean: Var<'t>, log_var: Var<'t>, prior: &PriorSpec, anchor: Var<'t>, prior_log_var: Var<'t>) -> Result<Var<'t>> {
    match prior.kind {
        PriorKind::Scalar => kl_scalar_taped(mean, log_var, anchor, prior_log_var),
        PriorKind::Layerwise => kl_layerwise_taped(mean, log_var, anchor, prior_log_var, prior.log_var_index()),
    }
}

pub fn kl_scalar(post: &PosteriorSpec, prior: &PriorSpec) -> Result<f64> {
    check_pair(post, prior)?;
    if prior.kind != PriorKind::Scalar {
        return Err(Error::Invalid("kl_scalar needs a scalar prior".into()));
    }
    let tape = Tape::new();
    let kl = kl_scalar_taped(
        tape.constant(Tensor::vector(post.mean.clone())),
        tape.constant(Tensor::vector(post.log_var.clone())),
        tape.constant(Tensor::vector(prior.anchor.clone())),
        tape.constant(Tensor::vector(prior.log_var.clone())),
    )?;
    Ok(kl.item()?)
}

pub fn kl_layerwise(post: &PosteriorSpec, prior: &PriorSpec) -> Result<f64> {
    check_pair(post, prior)?;
    let tape = Tape::new();
    let kl = kl_layerwise_taped(
        tape.constant(Tensor::vector(post.mean.clone())),
        tape.constant(Tensor::vector(post.log_var.clone())),
        tape.constant(Tensor::vector(prior.anchor.clone())),
        tape.constant(Tensor::vector(prior.log_var.clone())),
        prior.log_var_index(),
    )?;
    Ok(kl.item()?)
}

/// KL(posterior ‖ prior) for either prior kind.
pub fn kl_divergence(post: &PosteriorSpec, prior: &PriorSpec) -> Result<f64> {
    match prior.kind {
        PriorKind::Scalar => kl_scalar(post, prior),
        PriorKind::Layerwise => kl_layerwise(post, prior),
    }
}

/// Raises every log-variance in both specs to at least `floor`.
pub fn clamp_log_noise(post: &mut PosteriorSpec, prior: &mut PriorSpec, floor: f64) {
    for v in post.log_var.iter_mut().chain(prior.log_var.iter_mut()) {
        if *v < floor {
            *v = floor;
        }
    }
}
