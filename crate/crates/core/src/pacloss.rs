//! The PAC-Bayes training objective
//! `L = E ℓ(h̃; S) + (ln(1/δ) + KL) / (γ m) + γ K(λ)`
//! and the closed-form choice of `γ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Tensor, Var};
use crate::bayes::{kl_taped, PriorSpec};
use crate::error::{Error, Result};
use crate::kbound::KCurve;
use crate::nn::{ce_loss, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// `(1/K) √(A/m)`.
    #[default]
    Paper,
    /// `√(A/(mK))`, the minimizer of `A/(γm) + γK`.
    Argmin,
}

impl std::fmt::Display for GammaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GammaMode::Paper => "paper",
            GammaMode::Argmin => "argmin",
        })
    }
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(GammaMode::Paper),
            "argmin" => Ok(GammaMode::Argmin),
            other => Err(Error::config("gamma_mode", format!("expected `paper` or `argmin`, got `{other}`"))),
        }
    }
}

/// Every knob of the tuning-free procedure, with its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacBayesConfig {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub delta: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub stage1_epochs: usize,
    pub prior_samples: usize,
    pub lambda_queries: usize,
    pub gamma_grid: usize,
    pub warmup_epochs: usize,
    /// Apply the per-group warmup tying to the scalar prior as well.
    pub warmup_scalar_prior: bool,
    pub clip_log_noise: bool,
    pub log_noise_floor: f64,
    /// Multiplies the initial posterior and prior variances.
    pub noise_init_scale: f64,
    pub lr: f64,
    pub stage2_lr: f64,
    pub stage2_max_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub gamma_mode: GammaMode,
    pub eval_samples: usize,
}

impl Default for PacBayesConfig {
    fn default() -> Self {
        Self {
            gamma_lo: 0.5,
            gamma_hi: 10.0,
            delta: 0.1,
            lambda_lo: (-7.0f64).exp(),
            lambda_hi: 1.0,
            stage1_epochs: 200,
            prior_samples: 10,
            lambda_queries: 10,
            gamma_grid: 50,
            warmup_epochs: 50,
            warmup_scalar_prior: true,
            clip_log_noise: false,
            log_noise_floor: -(10.0f64.ln()),
            noise_init_scale: 0.01,
            lr: 1e-4,
            stage2_lr: 1e-4,
            stage2_max_epochs: 1000,
            batch_size: 100,
            label_smoothing: 0.1,
            seed: 0,
            gamma_mode: GammaMode::Paper,
            eval_samples: 30,
        }
    }
}

impl PacBayesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if !(self.gamma_lo > 0.0 && self.gamma_lo < self.gamma_hi && self.gamma_hi.is_finite()) {
            return bad("gamma_lo", format!("need 0 < gamma_lo < gamma_hi, got {} and {}", self.gamma_lo, self.gamma_hi));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("need 0 < delta < 1, got {}", self.delta));
        }
        if !(self.lambda_lo > 0.0 && self.lambda_lo < self.lambda_hi && self.lambda_hi.is_finite()) {
            return bad("lambda_lo", format!("need 0 < lambda_lo < lambda_hi, got {} and {}", self.lambda_lo, self.lambda_hi));
        }
        for (key, v) in [
            ("prior_samples", self.prior_samples),
            ("lambda_queries", self.lambda_queries),
            ("batch_size", self.batch_size),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if self.gamma_grid < 2 {
            return bad("gamma_grid", format!("need at least 2 points, got {}", self.gamma_grid));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.stage2_lr > 0.0 && self.stage2_lr.is_finite()) {
            return bad("stage2_lr", format!("must be positive, got {}", self.stage2_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", format!("must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.noise_init_scale > 0.0 && self.noise_init_scale.is_finite()) {
            return bad("noise_init_scale", format!("must be positive, got {}", self.noise_init_scale));
        }
        if !self.log_noise_floor.is_finite() {
            return bad("log_noise_floor", "must be finite".into());
        }
        Ok(())
    }
}

/// Closed-form `γ` clamped to `[lo, hi]`; `K = 0` gives `hi`.
pub fn optimal_gamma(kl: f64, k: f64, m: usize, delta: f64, lo: f64, hi: f64, mode: GammaMode) -> f64 {
    if k <= 0.0 {
        return hi;
    }
    let a = (1.0 / delta).ln() + kl;
    let mf = m as f64;
    let g = match mode {
        GammaMode::Paper => (a / mf).sqrt() / k,
        GammaMode::Argmin => (a / (mf * k)).sqrt(),
    };
    g.clamp(lo, hi)
}

/// The three summands and their ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacLossBreakdown {
    pub empirical: f64,
    pub kl: f64,
    pub gamma: f64,
    pub k_value: f64,
    pub complexity: f64,
    pub moment: f64,
    pub total: f64,
}

impl PacLossBreakdown {
    /// Combines the ingredients; with `gamma = None` the closed form is used.
    pub fn assemble(empirical: f64, kl: f64, k_value: f64, m: usize, cfg: &PacBayesConfig, gamma: Option<f64>) -> Self {
        let gamma = gamma.unwrap_or_else(|| {
            optimal_gamma(kl, k_value, m, cfg.delta, cfg.gamma_lo, cfg.gamma_hi, cfg.gamma_mode)
        });
        let complexity = (kl + (1.0 / cfg.delta).ln()) * (1.0 / (gamma * m as f64));
        let moment = k_value * gamma;
        Self { empirical, kl, gamma, k_value, complexity, moment, total: empirical + complexity + moment }
    }
}

/// Differentiable handles for one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PacVars<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
    pub prior_log_var: Var<'t>,
}

fn term(name: &'static str) -> impl Fn(AdError) -> Error {
    move |e| match e {
        AdError::NonFinite { op } => Error::Numeric(format!("non-finite {name} term (in {op})")),
        other => Error::Autodiff(other),
    }
}

/// Builds `L_PAC` on the tape for one posterior draw `h + exp(v/2) ⊙ noise`.
///
/// `m` is the full training-set size. `gamma` overrides the closed form;
/// either way `γ` is a constant of the graph.
#[allow(clippy::too_many_arguments)]
pub fn pac_loss<'t>(
    vars: PacVars<'t>,
    model: &MlpModel,
    prior: &PriorSpec,
    curve: &KCurve,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    m: usize,
    cfg: &PacBayesConfig,
    gamma: Option<f64>,
) -> Result<(Var<'t>, PacLossBreakdown)> {
    let tape = vars.mean.tape();
    if noise.len() != model.dim() || prior.dim() != model.dim() {
        return Err(Error::Invalid(format!(
            "objective dims: model {}, prior {}, noise {}",
            model.dim(),
            prior.dim(),
            noise.len()
        )));
    }
    let xi = tape.constant(Tensor::vector(noise.to_vec()));
    let sample = vars
        .log_var
        .scale(0.5)
        .and_then(|s| s.exp())
        .and_then(|s| s.mul(xi))
        .and_then(|s| s.add(vars.mean))
        .map_err(term("posterior sample"))?;
    let xb = tape.constant(x.clone());
    let logits = model.forward(sample, xb)?;
    let empirical = ce_loss(logits, labels, cfg.label_smoothing)?;
    let anchor = tape.constant(Tensor::vector(prior.anchor.clone()));
    let kl = kl_taped(vars.mean, vars.log_var, prior, anchor, vars.prior_log_var)?;
    let key = vars.prior_log_var.exp().and_then(|l| l.mean()).map_err(term("prior variance"))?;
    let k = curve.eval_taped(key)?;

    let b = PacLossBreakdown::assemble(empirical.item()?, kl.item()?, k.item()?, m, cfg, gamma);
    let complexity = kl
        .add_scalar((1.0 / cfg.delta).ln())
        .and_then(|c| c.scale(1.0 / (b.gamma * m as f64)))
        .map_err(term("complexity"))?;
    let moment = k.scale(b.gamma).map_err(term("moment"))?;
    let total = empirical.add(complexity).and_then(|t| t.add(moment)).map_err(term("total"))?;
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::bayes::{PosteriorSpec, PriorKind};
    use crate::kbound::{GammaGrid, Knot};
    use crate::rng::{self, Stream};

    fn curve(kind: PriorKind) -> KCurve {
        let grid = GammaGrid::uniform(0.5, 10.0, 50).unwrap();
        let knots = vec![
            Knot { query: 0.001, k: 0.05 },
            Knot { query: 0.01, k: 0.08 },
            Knot { query: 0.1, k: 0.2 },
            Knot { query: 1.0, k: 0.9 },
        ];
        KCurve::from_knots(kind, &grid, 10, 0, knots).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let g = optimal_gamma(10.0, 1.0, 100, 0.1, 0.5, 10.0, GammaMode::Paper);
        assert_eq!(g, 0.5);
        let g = optimal_gamma(40.0, 0.5, 100, 0.1, 0.5, 10.0, GammaMode::Paper);
        assert!((g - 1.3008).abs() < 1e-4, "{g}");
        for kl in [0.0, 3.0, 250.0] {
            let p = optimal_gamma(kl, 1.0, 77, 0.05, 0.1, 10.0, GammaMode::Paper);
            let a = optimal_gamma(kl, 1.0, 77, 0.05, 0.1, 10.0, GammaMode::Argmin);
            assert_eq!(p, a);
        }
        assert_eq!(optimal_gamma(5.0, 0.0, 10, 0.1, 0.5, 10.0, GammaMode::Argmin), 10.0);
    }

    #[test]
    fn breakdown_sums() {
        let cfg = PacBayesConfig::default();
        let b = PacLossBreakdown::assemble(0.6, 12.5, 0.3, 1000, &cfg, None);
        assert_eq!(b.total, b.empirical + b.complexity + b.moment);
        assert!(b.total >= b.empirical);
    }

    #[test]
    fn config_defaults_are_valid() {
        let cfg = PacBayesConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_lo, (-7.0f64).exp());
        let bad = PacBayesConfig { delta: 1.0, ..cfg.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "delta"));
        let bad = PacBayesConfig { gamma_lo: 20.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    fn setup(kind: PriorKind) -> (MlpModel, PosteriorSpec, PriorSpec, Tensor, Vec<usize>, Vec<f64>) {
        let model = MlpModel::new(&[2, 8, 2]).unwrap();
        let h0 = model.init_params(11);
        let sizes: Vec<usize> = model.groups().iter().map(|g| g.len).collect();
        let mut prior = PriorSpec::init(h0.clone(), kind, sizes).unwrap();
        for (i, b) in prior.log_var.iter_mut().enumerate() {
            *b += 0.1 * i as f64 - 0.7;
        }
        let mut r = rng::stream(5, Stream::Init);
        let mut post = PosteriorSpec::init(&h0).unwrap();
        let shift = rng::standard_normals(&mut r, h0.len());
        for (i, (h, s)) in post.mean.iter_mut().zip(&shift).enumerate() {
            *h += 0.3 * s;
            post.log_var[i] += 0.05 * (i % 7) as f64 - 1.0;
        }
        let data = crate::data::gen_blobs(2, 32, 2, 0.3, 0.1).unwrap();
        let noise = rng::standard_normals(&mut r, h0.len());
        (model, post, prior, data.features().clone(), data.labels().to_vec(), noise)
    }

    #[allow(clippy::too_many_arguments)]
    fn value(
        model: &MlpModel,
        post: &PosteriorSpec,
        prior: &PriorSpec,
        c: &KCurve,
        x: &Tensor,
        y: &[usize],
        noise: &[f64],
        gamma: Option<f64>,
    ) -> f64 {
        let tape = Tape::new();
        let vars = PacVars {
            mean: tape.leaf(Tensor::vector(post.mean.clone())),
            log_var: tape.leaf(Tensor::vector(post.log_var.clone())),
            prior_log_var: tape.leaf(Tensor::vector(prior.log_var.clone())),
        };
        let cfg = PacBayesConfig::default();
        pac_loss(vars, model, prior, c, x, y, noise, 1000, &cfg, gamma).unwrap().1.total
    }

    fn fd_check(kind: PriorKind) {
        let (model, post, prior, x, y, noise) = setup(kind);
        let c = curve(kind);
        let cfg = PacBayesConfig::default();
        let tape = Tape::new();
        let vars = PacVars {
            mean: tape.leaf(Tensor::vector(post.mean.clone())),
            log_var: tape.leaf(Tensor::vector(post.log_var.clone())),
            prior_log_var: tape.leaf(Tensor::vector(prior.log_var.clone())),
        };
        let (total, b) = pac_loss(vars, &model, &prior, &c, &x, &y, &noise, 1000, &cfg, None).unwrap();
        let g = tape.backward(total).unwrap();
        let gamma = Some(b.gamma);
        let step = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * step);
            let ok = (analytic - fd).abs() <= 1e-8 || (analytic - fd).abs() / fd.abs().max(analytic.abs()) <= 1e-4;
            assert!(ok, "{what}: analytic {analytic} vs fd {fd}");
        };
        for i in 0..post.dim() {
            let mut p = post.clone();
            p.mean[i] += step;
            let up = value(&model, &p, &prior, &c, &x, &y, &noise, gamma);
            p.mean[i] -= 2.0 * step;
            let down = value(&model, &p, &prior, &c, &x, &y, &noise, gamma);
            check(g.wrt(vars.mean).data()[i], up, down, "h");
            let mut p = post.clone();
            p.log_var[i] += step;
            let up = value(&model, &p, &prior, &c, &x, &y, &noise, gamma);
            p.log_var[i] -= 2.0 * step;
            let down = value(&model, &p, &prior, &c, &x, &y, &noise, gamma);
            check(g.wrt(vars.log_var).data()[i], up, down, "v");
        }
        for j in 0..prior.log_var.len() {
            let mut q = prior.clone();
            q.log_var[j] += step;
            let up = value(&model, &post, &q, &c, &x, &y, &noise, gamma);
            q.log_var[j] -= 2.0 * step;
            let down = value(&model, &post, &q, &c, &x, &y, &noise, gamma);
            check(g.wrt(vars.prior_log_var).data()[j], up, down, "b");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_scalar() {
        fd_check(PriorKind::Scalar);
    }

    #[test]
    fn gradient_matches_finite_differences_layerwise() {
        fd_check(PriorKind::Layerwise);
    }

    #[test]
    fn zero_noise_at_prior_has_no_kl() {
        let (model, _, prior, x, y, _) = setup(PriorKind::Scalar);
        let post = PosteriorSpec::new(prior.anchor.clone(), vec![prior.log_var[0]; prior.dim()]).unwrap();
        let c = curve(PriorKind::Scalar);
        let cfg = PacBayesConfig::default();
        let tape = Tape::new();
        let vars = PacVars {
            mean: tape.leaf(Tensor::vector(post.mean.clone())),
            log_var: tape.leaf(Tensor::vector(post.log_var.clone())),
            prior_log_var: tape.leaf(Tensor::vector(prior.log_var.clone())),
        };
        let zeros = vec![0.0; model.dim()];
        let (_, b) = pac_loss(vars, &model, &prior, &c, &x, &y, &zeros, 1000, &cfg, None).unwrap();
        assert!(b.kl.abs() < 1e-9, "kl {}", b.kl);
        let logits = model.logits(&prior.anchor, &x).unwrap();
        let plain = crate::nn::ce_per_example(&logits, &y, cfg.label_smoothing).unwrap();
        let plain = plain.iter().sum::<f64>() / plain.len() as f64;
        assert!((b.empirical - plain).abs() < 1e-12);
        let k = c.eval(prior.log_var[0].exp());
        let expect = plain + (1.0 / cfg.delta).ln() / (b.gamma * 1000.0) + b.gamma * k;
        assert!((b.total - expect).abs() < 1e-9);
    }
}
