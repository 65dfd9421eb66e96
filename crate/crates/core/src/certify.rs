//! Numerical generalization certificates for trained runs with a
//! trainable Gaussian prior.
//!
//! The bound is `L_PAC + η` where `η` accounts for choosing the prior
//! variances from data. With `C = 1/(γ1 m) + γ2` and `L = L1 + L2`,
//! `η = k/(γ1 m)·(1 + ln(C L (a+b) γ1 m / (2k)))`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{kl_divergence, PosteriorSpec, PriorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kbound::KCurve;
use crate::nn::{ce_per_example, MlpModel};
use crate::pacloss::{PacBayesConfig, PacLossBreakdown};
use crate::rng::{self, Stream};

pub const CERTIFICATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateParams {
    /// Weight scale: `‖h‖₂ ≤ √d M`.
    pub weight_scale: f64,
    /// Variance budget: `‖σ‖₁ ≤ d T`.
    pub variance_budget: f64,
    /// `λ ≥ e^{-a}`.
    pub a: f64,
    /// `λ ≤ e^{b}`.
    pub b_up: f64,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub epsilon: f64,
}

impl CertificateParams {
    /// Measures `M` and `T` from the trained posterior.
    pub fn from_run(post: &PosteriorSpec, prior: &PriorSpec, cfg: &PacBayesConfig, m: usize) -> Self {
        let d = post.dim();
        let norm = post.mean.iter().map(|h| h * h).sum::<f64>().sqrt();
        let l1: f64 = post.variances().iter().sum();
        Self {
            weight_scale: (norm / (d as f64).sqrt()).max(1.0),
            variance_budget: (l1 / d as f64).max(1.0),
            a: -cfg.lambda_lo.ln(),
            b_up: cfg.lambda_hi.ln(),
            k: prior.degrees_of_freedom(),
            m,
            d,
            gamma_lo: cfg.gamma_lo,
            gamma_hi: cfg.gamma_hi,
            epsilon: cfg.delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |x: f64| x > 0.0 && x.is_finite();
        if !(finite_pos(self.weight_scale) && finite_pos(self.variance_budget)) {
            return Err(Error::Invalid("weight scale and variance budget must be positive".into()));
        }
        if !(self.a >= 0.0 && self.b_up >= 0.0 && finite_pos(self.a + self.b_up)) {
            return Err(Error::Invalid(format!(
                "prior range needs a, b >= 0 with a + b > 0, got a = {}, b = {}",
                self.a, self.b_up
            )));
        }
        if self.k == 0 || self.k > self.d || self.m == 0 {
            return Err(Error::Invalid(format!("need 1 <= k <= d and m >= 1, got k = {}, d = {}, m = {}", self.k, self.d, self.m)));
        }
        if !(finite_pos(self.gamma_lo) && self.gamma_lo < self.gamma_hi && self.gamma_hi.is_finite()) {
            return Err(Error::Invalid("need 0 < gamma_lo < gamma_hi".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// `(L1, L2)`.
pub fn lipschitz_constants(p: &CertificateParams) -> (f64, f64) {
    let d = p.d as f64;
    let ea = p.a.exp();
    let l1 = 0.5 * d.max(ea * (2.0 * d.sqrt() * p.weight_scale + d * p.variance_budget));
    let l2 = (2.0 * d * p.weight_scale * p.weight_scale * (2.0 * p.a).exp() + d * (p.a + p.b_up) / 2.0)
        / (p.gamma_lo * p.gamma_lo);
    (l1, l2)
}

pub fn c_constant(p: &CertificateParams) -> f64 {
    1.0 / (p.gamma_lo * p.m as f64) + p.gamma_hi
}

pub fn correction_eta(p: &CertificateParams, l: f64) -> Result<f64> {
    let k = p.k as f64;
    let gm = p.gamma_lo * p.m as f64;
    let arg = c_constant(p) * l * (p.a + p.b_up) * gm / (2.0 * k);
    if !(arg > 0.0 && arg.is_finite()) {
        return Err(Error::Numeric(format!("correction term log argument {arg} is not positive")));
    }
    Ok(k / gm * (1.0 + arg.ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub version: u32,
    pub params: CertificateParams,
    pub breakdown: PacLossBreakdown,
    pub eval_samples: usize,
    pub l1: f64,
    pub l2: f64,
    pub c: f64,
    pub eta: f64,
    pub bound: f64,
    pub heldout_loss: Option<f64>,
    pub holds: Option<bool>,
}

impl BoundCertificate {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("certificate", e.to_string()))
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::format(context, e.to_string()))?;
        if c.version != CERTIFICATE_VERSION {
            return Err(Error::format(context, format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn summary(&self) -> String {
        let b = &self.breakdown;
        let mut s = format!(
            "bound = L_PAC + eta = {:.6} + {:.6} = {:.6}\n  empirical  {:.6} (mean of {} posterior draws)\n  complexity {:.6} (KL {:.4}, gamma {:.4}, m {})\n  moment     {:.6} (K {:.6})\n  L1 {:.6e}  L2 {:.6e}  C {:.6}  k {}  d {}\n",
            b.total, self.eta, self.bound, b.empirical, self.eval_samples, b.complexity, b.kl, b.gamma,
            self.params.m, b.moment, b.k_value, self.l1, self.l2, self.c, self.params.k, self.params.d,
        );
        if let (Some(h), Some(ok)) = (self.heldout_loss, self.holds) {
            s.push_str(&format!("  held-out loss {h:.6}: bound {}\n", if ok { "holds" } else { "VIOLATED" }));
        }
        s
    }
}

/// Mean per-draw loss over `draws` posterior samples, in draw order.
pub fn posterior_loss(
    model: &MlpModel,
    post: &PosteriorSpec,
    data: &Dataset,
    draws: usize,
    smoothing: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let losses = (0..draws)
        .into_par_iter()
        .map(|l| {
            let mut r = rng::substream(seed, Stream::Eval, &[l as u64]);
            let h = post.sample(&mut r);
            let per = ce_per_example(&model.logits(&h, data.features())?, data.labels(), smoothing)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / draws as f64)
}

/// Certificate for a trained run on its full training set `train`.
pub fn evaluate_bound(
    model: &MlpModel,
    post: &PosteriorSpec,
    prior: &PriorSpec,
    curve: Option<&KCurve>,
    cfg: &PacBayesConfig,
    train: &Dataset,
    heldout: Option<&Dataset>,
) -> Result<BoundCertificate> {
    let curve = curve.ok_or_else(|| Error::Invalid("certification needs the K curve of the run".into()))?;
    let m = train.len();
    let params = CertificateParams::from_run(post, prior, cfg, m);
    params.validate()?;
    let empirical = posterior_loss(model, post, train, cfg.eval_samples, cfg.label_smoothing, cfg.seed)?;
    let kl = kl_divergence(post, prior)?;
    let k_value = curve.eval(prior.mean_variance());
    let breakdown = PacLossBreakdown::assemble(empirical, kl, k_value, m, cfg, None);
    let (l1, l2) = lipschitz_constants(&params);
    let eta = correction_eta(&params, l1 + l2)?;
    let bound = breakdown.total + eta;
    if !bound.is_finite() {
        return Err(Error::Numeric("certificate bound is not finite".into()));
    }
    let heldout_loss = heldout
        .map(|h| posterior_loss(model, post, h, cfg.eval_samples, cfg.label_smoothing, rng::derive_seed(cfg.seed, &[1])))
        .transpose()?;
    Ok(BoundCertificate {
        version: CERTIFICATE_VERSION,
        params,
        breakdown,
        eval_samples: cfg.eval_samples,
        l1,
        l2,
        c: c_constant(&params),
        eta,
        bound,
        heldout_loss,
        holds: heldout_loss.map(|h| bound >= h),
    })
}
