//! Two-stage training and the grid-search baseline.
//!
//! Stage 1 minimizes the PAC-Bayes objective over the posterior mean and
//! log-variances and the prior log-variances. Stage 2 freezes all noise
//! levels and runs noise-injected Adam on the mean only. Predictions use
//! the posterior mean.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::bayes::{clamp_log_noise, PosteriorSpec, PriorKind, PriorSpec};
use crate::certify::{evaluate_bound, BoundCertificate};
use crate::config::{RunConfig, Splits};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kbound::{build_curve, log_uniform_queries, GammaGrid, KCurve};
use crate::nn::{accuracy, ce_loss, ce_per_example, AdamState, MlpModel, Optimizer, SgdState};
use crate::pacloss::{pac_loss, PacBayesConfig, PacVars};
use crate::rng::{self, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "stage,epoch,train_loss,train_acc,pac_total,kl,gamma,k_value,mean_sigma,lr,heldout_loss,heldout_acc";

/// Learning-rate plateau decay and termination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub plateau: usize,
    pub decay: f64,
    pub accuracy: f64,
    pub lr_floor: f64,
    pub max_epochs: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { plateau: 20, decay: 0.1, accuracy: 0.999, lr_floor: 1e-5, max_epochs: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Accuracy,
    LrFloor,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    rule: StopRule,
    lr: f64,
    best: f64,
    since_best: usize,
    held: usize,
}

impl Scheduler {
    pub fn new(rule: StopRule, lr: f64) -> Self {
        Self { rule, lr, best: f64::NEG_INFINITY, since_best: 0, held: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the training accuracy after epoch `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, acc: f64) -> Option<StopReason> {
        if acc > self.best {
            self.best = acc;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.rule.plateau {
                self.lr *= self.rule.decay;
                self.since_best = 0;
            }
        }
        self.held = if acc >= self.rule.accuracy { self.held + 1 } else { 0 };
        if self.held >= self.rule.plateau {
            Some(StopReason::Accuracy)
        } else if self.lr < self.rule.lr_floor * (1.0 - 1e-9) {
            Some(StopReason::LrFloor)
        } else if epoch >= self.rule.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        }
    }
}

/// One epoch of logged training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub pac_total: Option<f64>,
    pub kl: Option<f64>,
    pub gamma: Option<f64>,
    pub k_value: Option<f64>,
    pub mean_sigma: f64,
    pub lr: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_acc: Option<f64>,
    /// Not written to the CSV.
    pub complexity: Option<f64>,
    pub moment: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{},{},{},{},{:?},{:?},{},{}",
            r.stage,
            r.epoch,
            r.train_loss,
            r.train_acc,
            cell(r.pac_total),
            cell(r.kl),
            cell(r.gamma),
            cell(r.k_value),
            r.mean_sigma,
            r.lr,
            cell(r.heldout_loss),
            cell(r.heldout_acc),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub posterior: PosteriorSpec,
    pub prior: PriorSpec,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ctx = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::format(ctx, format!("unsupported version {}", c.version)));
        }
        let model = MlpModel::new(&c.widths)?;
        if c.posterior.dim() != model.dim() || c.prior.dim() != model.dim() {
            return Err(Error::format(ctx, "parameter vectors do not match the layer widths"));
        }
        Ok(c)
    }

    pub fn model(&self) -> Result<MlpModel> {
        MlpModel::new(&self.widths)
    }
}

/// Everything a training run carries between stages.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: MlpModel,
    pub post: PosteriorSpec,
    pub prior: PriorSpec,
    pub curve: KCurve,
    pub cfg: PacBayesConfig,
    pub stage: u8,
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
}

impl RunState {
    /// Posterior and prior both start at `h0 = init(seed)` with
    /// log-variance `ln(noise_init_scale · ‖h0‖₁/d)`.
    pub fn init(model: MlpModel, kind: PriorKind, curve: KCurve, cfg: PacBayesConfig) -> Result<Self> {
        let h0 = model.init_params(cfg.seed);
        let shift = cfg.noise_init_scale.ln();
        let mut post = PosteriorSpec::init(&h0)?;
        post.log_var.iter_mut().for_each(|v| *v += shift);
        let sizes = model.groups().iter().map(|g| g.len).collect();
        let mut prior = PriorSpec::init(h0, kind, sizes)?;
        prior.log_var.iter_mut().for_each(|b| *b += shift);
        prior.project(cfg.lambda_lo, cfg.lambda_hi);
        Ok(Self { model, post, prior, curve, cfg, stage: 0, epoch: 0, metrics: Vec::new() })
    }

    pub fn checkpoint(&self, stage: &str) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            widths: self.model.widths(),
            stage: stage.to_string(),
            epoch: self.epoch,
            seed: self.cfg.seed,
            posterior: self.post.clone(),
            prior: self.prior.clone(),
        }
    }
}

fn epoch_batches(n: usize, batch: usize, seed: u64, stage: u8, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, Stream::Shuffle, &[stage as u64, epoch as u64]));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn with_context(e: Error, stage: u8, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("stage {stage}, epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Mean-model loss and accuracy.
pub fn deterministic_eval(model: &MlpModel, h: &[f64], data: &Dataset, smoothing: f64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.logits(h, data.features())?;
    let per = ce_per_example(&logits, data.labels(), smoothing)?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, accuracy(&logits, data.labels())))
}

fn heldout_eval(model: &MlpModel, h: &[f64], heldout: Option<&Dataset>, smoothing: f64) -> Result<(Option<f64>, Option<f64>)> {
    match heldout {
        Some(d) if !d.is_empty() => {
            let (l, a) = deterministic_eval(model, h, d, smoothing)?;
            Ok((Some(l), Some(a)))
        }
        _ => Ok((None, None)),
    }
}

fn gather(values: &[f64], index: &[usize]) -> Vec<f64> {
    index.iter().map(|&g| values[g]).collect()
}

/// Stage 1: `stage1_epochs` epochs of Adam descent on the PAC-Bayes objective.
pub fn stage1(state: &mut RunState, train: &Dataset, heldout: Option<&Dataset>) -> Result<()> {
    let cfg = state.cfg.clone();
    let model = state.model.clone();
    let d = model.dim();
    let m = train.len();
    let group_of = model.group_index();
    let tie = cfg.warmup_epochs > 0 && (state.prior.kind == PriorKind::Layerwise || cfg.warmup_scalar_prior);
    let mut v_group: Vec<f64> = model
        .groups()
        .iter()
        .map(|g| state.post.log_var[g.range()].iter().sum::<f64>() / g.len as f64)
        .collect();
    if tie {
        state.post.log_var = gather(&v_group, &group_of);
    }
    let mut opt_h = AdamState::new(d, cfg.lr);
    let mut opt_v = AdamState::new(if tie { v_group.len() } else { d }, cfg.lr);
    let mut opt_b = AdamState::new(state.prior.log_var.len(), cfg.lr);
    state.stage = 1;

    for epoch in 1..=cfg.stage1_epochs {
        let warm = tie && epoch <= cfg.warmup_epochs;
        if tie && epoch == cfg.warmup_epochs + 1 {
            opt_v = AdamState::new(d, cfg.lr);
        }
        let batches = epoch_batches(m, cfg.batch_size, cfg.seed, 1, epoch);
        let mut sums = [0.0f64; 7];
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = train.rows(idx);
            let tape = Tape::new();
            let mean = tape.leaf(Tensor::vector(state.post.mean.clone()));
            let (log_var, v_leaf) = if warm {
                let vg = tape.leaf(Tensor::vector(v_group.clone()));
                (vg.gather(group_of.clone())?, vg)
            } else {
                let v = tape.leaf(Tensor::vector(state.post.log_var.clone()));
                (v, v)
            };
            let b = tape.leaf(Tensor::vector(state.prior.log_var.clone()));
            let mut r = rng::substream(cfg.seed, Stream::Posterior, &[1, epoch as u64, bi as u64]);
            let noise = rng::standard_normals(&mut r, d);
            let vars = PacVars { mean, log_var, prior_log_var: b };
            let (total, br) = pac_loss(vars, &model, &state.prior, &state.curve, &x, &y, &noise, m, &cfg, None)
                .map_err(|e| with_context(e, 1, epoch, bi))?;
            let grads = tape.backward(total)?;
            let step = |r: Result<()>| r.map_err(|e| with_context(e, 1, epoch, bi));
            step(opt_h.step(&mut state.post.mean, grads.wrt(mean).data()))?;
            if warm {
                step(opt_v.step(&mut v_group, grads.wrt(v_leaf).data()))?;
            } else {
                step(opt_v.step(&mut state.post.log_var, grads.wrt(v_leaf).data()))?;
            }
            step(opt_b.step(&mut state.prior.log_var, grads.wrt(b).data()))?;
            state.prior.project(cfg.lambda_lo, cfg.lambda_hi);
            if cfg.clip_log_noise {
                for v in &mut v_group {
                    *v = v.max(cfg.log_noise_floor);
                }
                clamp_log_noise(&mut state.post, &mut state.prior, cfg.log_noise_floor);
            }
            if warm {
                state.post.log_var = gather(&v_group, &group_of);
            }
            for (s, v) in sums.iter_mut().zip([br.empirical, br.total, br.kl, br.gamma, br.k_value, br.complexity, br.moment]) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let [emp, total, kl, gamma, k, complexity, moment] = sums.map(|s| s / nb);
        let (_, train_acc) = deterministic_eval(&model, &state.post.mean, train, cfg.label_smoothing)?;
        let (heldout_loss, heldout_acc) = heldout_eval(&model, &state.post.mean, heldout, cfg.label_smoothing)?;
        state.epoch = epoch;
        state.metrics.push(MetricsRow {
            stage: 1,
            epoch,
            train_loss: emp,
            train_acc,
            pac_total: Some(total),
            kl: Some(kl),
            gamma: Some(gamma),
            k_value: Some(k),
            mean_sigma: state.post.mean_variance(),
            lr: cfg.lr,
            heldout_loss,
            heldout_acc,
            complexity: Some(complexity),
            moment: Some(moment),
        });
    }
    Ok(())
}

/// Mini-batch descent on the noise-perturbed empirical loss: each step
/// evaluates the gradient at `h + std ⊙ ξ` and applies it to `h`.
///
/// `after_epoch(epoch, lr, mean_batch_loss, h)` returns the training
/// accuracy that drives the scheduler.
#[allow(clippy::too_many_arguments)]
pub fn noisy_descent(
    model: &MlpModel,
    h: &mut [f64],
    std: &[f64],
    opt: &mut Optimizer,
    train: &Dataset,
    smoothing: f64,
    batch_size: usize,
    rule: StopRule,
    seed: u64,
    stage: u8,
    mut after_epoch: impl FnMut(usize, f64, f64, &[f64]) -> Result<f64>,
) -> Result<(usize, StopReason)> {
    let d = model.dim();
    if rule.max_epochs == 0 {
        return Ok((0, StopReason::MaxEpochs));
    }
    let mut sched = Scheduler::new(rule, opt.lr());
    for epoch in 1.. {
        let lr = sched.lr();
        opt.set_lr(lr);
        let batches = epoch_batches(train.len(), batch_size, seed, stage, epoch);
        let mut loss_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = train.rows(idx);
            let mut r = rng::substream(seed, Stream::Posterior, &[stage as u64, epoch as u64, bi as u64]);
            let xi = rng::standard_normals(&mut r, d);
            let shift: Vec<f64> = xi.iter().zip(std).map(|(x, s)| x * s).collect();
            let tape = Tape::new();
            let hv = tape.leaf(Tensor::vector(h.to_vec()));
            let sample = hv.add(tape.constant(Tensor::vector(shift)))?;
            let logits = model.forward(sample, tape.constant(x))?;
            let loss = ce_loss(logits, &y, smoothing).map_err(|e| with_context(e, stage, epoch, bi))?;
            loss_sum += loss.item()?;
            let g = tape.backward(loss)?;
            opt.step(h, g.wrt(hv).data()).map_err(|e| with_context(e, stage, epoch, bi))?;
        }
        let acc = after_epoch(epoch, lr, loss_sum / batches.len() as f64, h)?;
        if let Some(reason) = sched.observe(epoch, acc) {
            return Ok((epoch, reason));
        }
    }
    unreachable!("epoch loop only exits through the scheduler")
}

/// Stage 2: noise levels frozen at their Stage-1 values, Adam on the mean.
pub fn stage2(state: &mut RunState, train: &Dataset, heldout: Option<&Dataset>, rule: StopRule) -> Result<StopReason> {
    let cfg = state.cfg.clone();
    let model = state.model.clone();
    let frozen_v = state.post.log_var.clone();
    let frozen_b = state.prior.log_var.clone();
    let std: Vec<f64> = frozen_v.iter().map(|v| (0.5 * v).exp()).collect();
    let mean_sigma = state.post.mean_variance();
    let mut opt = Optimizer::Adam(AdamState::new(model.dim(), cfg.stage2_lr));
    let mut h = state.post.mean.clone();
    state.stage = 2;
    let mut rows = Vec::new();
    let (_, reason) = noisy_descent(
        &model,
        &mut h,
        &std,
        &mut opt,
        train,
        cfg.label_smoothing,
        cfg.batch_size,
        rule,
        cfg.seed,
        2,
        |epoch, lr, loss, h| {
            if bits(&state.post.log_var) != bits(&frozen_v) || bits(&state.prior.log_var) != bits(&frozen_b) {
                return Err(Error::Numeric("noise levels changed during stage 2".into()));
            }
            let (_, train_acc) = deterministic_eval(&model, h, train, cfg.label_smoothing)?;
            let (heldout_loss, heldout_acc) = heldout_eval(&model, h, heldout, cfg.label_smoothing)?;
            rows.push(MetricsRow {
                stage: 2,
                epoch,
                train_loss: loss,
                train_acc,
                pac_total: None,
                kl: None,
                gamma: None,
                k_value: None,
                mean_sigma,
                lr,
                heldout_loss,
                heldout_acc,
                complexity: None,
                moment: None,
            });
            Ok(train_acc)
        },
    )?;
    state.epoch = rows.len();
    state.metrics.extend(rows);
    state.post.mean = h;
    Ok(reason)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// The default query set and grid of `cfg`.
pub fn estimate_curve(cfg: &PacBayesConfig, kind: PriorKind, model: &MlpModel, train: &Dataset) -> Result<KCurve> {
    let h0 = model.init_params(cfg.seed);
    let queries = log_uniform_queries(cfg.lambda_lo, cfg.lambda_hi, cfg.lambda_queries)?;
    let grid = GammaGrid::uniform(cfg.gamma_lo, cfg.gamma_hi, cfg.gamma_grid)?;
    build_curve(kind, &queries, &h0, model, train, cfg.prior_samples, &grid, cfg.label_smoothing, cfg.seed)
}

/// Whether a cached curve was produced by the settings in `cfg`.
pub fn curve_matches(curve: &KCurve, cfg: &PacBayesConfig, kind: PriorKind) -> bool {
    curve.kind == kind
        && curve.gamma_lo == cfg.gamma_lo
        && curve.gamma_hi == cfg.gamma_hi
        && curve.grid_size == cfg.gamma_grid
        && curve.samples == cfg.prior_samples
        && curve.seed == cfg.seed
        && curve.knots.len() == cfg.lambda_queries
}

/// Outcome of the full pipeline, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub state: RunState,
    pub stage1: Checkpoint,
    pub certificate: BoundCertificate,
    pub stop: Option<StopReason>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

/// Init, Stage 1, certificate at the Stage-1 point, Stage 2, final evaluation.
pub fn run_pipeline(cfg: &RunConfig, splits: &Splits, curve: KCurve) -> Result<TrainedRun> {
    let pb = cfg.pacbayes.clone();
    pb.validate()?;
    let model = cfg.model_for(&splits.train)?;
    let heldout = (!splits.heldout.is_empty()).then_some(&splits.heldout);
    let mut state = RunState::init(model, cfg.prior, curve, pb.clone())?;
    stage1(&mut state, &splits.train, heldout)?;
    let stage1_ckpt = state.checkpoint("stage1");
    let certificate =
        evaluate_bound(&state.model, &state.post, &state.prior, Some(&state.curve), &pb, &splits.train, heldout)?;
    let rule = StopRule { max_epochs: pb.stage2_max_epochs, ..StopRule::default() };
    let stop = if pb.stage2_max_epochs > 0 { Some(stage2(&mut state, &splits.train, heldout, rule)?) } else { None };
    let (_, train_accuracy) = deterministic_eval(&state.model, &state.post.mean, &splits.train, pb.label_smoothing)?;
    let (test_loss, test_accuracy) = if splits.test.is_empty() {
        (None, None)
    } else {
        let (l, a) = deterministic_eval(&state.model, &state.post.mean, &splits.test, pb.label_smoothing)?;
        (Some(l), Some(a))
    };
    Ok(TrainedRun { state, stage1: stage1_ckpt, certificate, stop, train_accuracy, test_accuracy, test_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub prior: PriorKind,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stop: Option<StopReason>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub bound: f64,
    pub kcurve_reused: bool,
}

pub struct RunPaths;

impl RunPaths {
    pub const CONFIG: &'static str = "config.toml";
    pub const KCURVE: &'static str = "kcurve.json";
    pub const STAGE1: &'static str = "checkpoint-stage1.json";
    pub const FINAL: &'static str = "checkpoint.json";
    pub const METRICS: &'static str = "metrics.csv";
    pub const CERTIFICATE: &'static str = "certificate.json";
    pub const SUMMARY: &'static str = "summary.json";
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads `explicit`, else a matching cached curve in `out`, else estimates
/// one and caches it. Returns the curve and whether it was reused.
pub fn obtain_curve(
    cfg: &RunConfig,
    model: &MlpModel,
    train: &Dataset,
    out: &Path,
    explicit: Option<&Path>,
) -> Result<(KCurve, bool)> {
    let cache = out.join(RunPaths::KCURVE);
    if let Some(p) = explicit {
        let c = KCurve::load(p)?;
        if c.kind != cfg.prior {
            return Err(Error::config("kcurve", format!("curve is for a {} prior, run uses {}", c.kind, cfg.prior)));
        }
        if p != cache {
            c.save(&cache)?;
        }
        return Ok((c, true));
    }
    if cache.exists() {
        if let Ok(c) = KCurve::load(&cache) {
            if curve_matches(&c, &cfg.pacbayes, cfg.prior) {
                return Ok((c, true));
            }
        }
    }
    let c = estimate_curve(&cfg.pacbayes, cfg.prior, model, train)?;
    c.save(&cache)?;
    Ok((c, false))
}

/// Full pipeline writing the run directory `out`.
pub fn train(cfg: &RunConfig, splits: &Splits, out: &Path, kcurve: Option<&Path>) -> Result<(TrainedRun, RunSummary)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RunPaths::CONFIG), &cfg.to_toml()?)?;
    let model = cfg.model_for(&splits.train)?;
    let (curve, reused) = obtain_curve(cfg, &model, &splits.train, out, kcurve)?;
    let run = run_pipeline(cfg, splits, curve)?;
    run.stage1.save(&out.join(RunPaths::STAGE1))?;
    run.certificate.save(&out.join(RunPaths::CERTIFICATE))?;
    run.state.checkpoint("final").save(&out.join(RunPaths::FINAL))?;
    write(&out.join(RunPaths::METRICS), &metrics_csv(&run.state.metrics))?;
    let summary = RunSummary {
        prior: cfg.prior,
        stage1_epochs: run.state.metrics.iter().filter(|r| r.stage == 1).count(),
        stage2_epochs: run.state.metrics.iter().filter(|r| r.stage == 2).count(),
        stop: run.stop,
        train_accuracy: run.train_accuracy,
        test_accuracy: run.test_accuracy,
        test_loss: run.test_loss,
        bound: run.certificate.bound,
        kcurve_reused: reused,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format("summary", e.to_string()))?;
    write(&out.join(RunPaths::SUMMARY), &text)?;
    Ok((run, summary))
}

/// Deterministic-mean and posterior-sampled performance on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub sampled_loss: f64,
    pub sampled_accuracy: f64,
    pub draws: usize,
}

pub fn evaluate(model: &MlpModel, post: &PosteriorSpec, data: &Dataset, draws: usize, smoothing: f64, seed: u64) -> Result<EvalReport> {
    let (mean_loss, mean_accuracy) = deterministic_eval(model, &post.mean, data, smoothing)?;
    let per_draw = (0..draws)
        .into_par_iter()
        .map(|l| {
            let mut r = rng::substream(seed, Stream::Eval, &[2, l as u64]);
            let h = post.sample(&mut r);
            deterministic_eval(model, &h, data, smoothing)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = draws.max(1) as f64;
    Ok(EvalReport {
        examples: data.len(),
        mean_loss,
        mean_accuracy,
        sampled_loss: per_draw.iter().map(|p| p.0).sum::<f64>() / n,
        sampled_accuracy: per_draw.iter().map(|p| p.1).sum::<f64>() / n,
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Hyper-parameter grid for the baseline. `momentum` only spans SGD cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineGrid {
    pub optimizer: Vec<OptimizerKind>,
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub momentum: Vec<f64>,
    pub noise: Vec<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
}

impl Default for BaselineGrid {
    fn default() -> Self {
        Self {
            optimizer: vec![OptimizerKind::Adam],
            lr: vec![1e-3, 1e-2, 1e-1],
            weight_decay: vec![0.0, 1e-4, 1e-2],
            momentum: vec![0.0],
            noise: vec![0.0, 1e-3, 1e-2],
            max_epochs: 300,
            batch_size: 100,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub noise: f64,
}

impl BaselineGrid {
    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        let g: BaselineGrid = toml::from_str(text).map_err(|e| Error::config(context, e.message().to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer.is_empty() || self.lr.is_empty() || self.weight_decay.is_empty() || self.noise.is_empty() {
            return Err(Error::config("grid", "optimizer, lr, weight_decay and noise need at least one value"));
        }
        if self.optimizer.contains(&OptimizerKind::Sgd) && self.momentum.is_empty() {
            return Err(Error::config("grid.momentum", "SGD cells need at least one momentum value"));
        }
        if self.lr.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::config("grid.lr", "learning rates must be positive"));
        }
        if self.weight_decay.iter().chain(&self.noise).chain(&self.momentum).any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::config("grid", "weight decay, momentum and noise must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("grid.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &optimizer in &self.optimizer {
            let momenta: &[f64] = match optimizer {
                OptimizerKind::Adam => &[0.0],
                OptimizerKind::Sgd => &self.momentum,
            };
            for &lr in &self.lr {
                for &weight_decay in &self.weight_decay {
                    for &momentum in momenta {
                        for &noise in &self.noise {
                            out.push(CellSpec { optimizer, lr, weight_decay, momentum, noise });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub spec: CellSpec,
    pub seed: u64,
    /// Mean test accuracy of the last five epochs.
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub epochs: usize,
    pub stop: Option<StopReason>,
    pub error: Option<String>,
}

/// One baseline training run from `init(seed)`.
pub fn train_cell(
    model: &MlpModel,
    spec: CellSpec,
    grid: &BaselineGrid,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(f64, f64, usize, StopReason)> {
    let mut h = model.init_params(seed);
    let d = model.dim();
    let mut opt = match spec.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(AdamState::new(d, spec.lr).with_weight_decay(spec.weight_decay)),
        OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(d, spec.lr, spec.momentum, spec.weight_decay)),
    };
    let std = vec![spec.noise; d];
    let rule = StopRule { max_epochs: grid.max_epochs, ..StopRule::default() };
    let mut test_acc = Vec::new();
    let mut train_acc = 0.0;
    let (epochs, stop) = noisy_descent(
        model,
        &mut h,
        &std,
        &mut opt,
        train,
        grid.label_smoothing,
        grid.batch_size,
        rule,
        seed,
        3,
        |_, _, _, h| {
            let (_, a) = deterministic_eval(model, h, train, grid.label_smoothing)?;
            let (_, t) = deterministic_eval(model, h, test, grid.label_smoothing)?;
            test_acc.push(t);
            train_acc = a;
            Ok(a)
        },
    )?;
    if test_acc.is_empty() {
        let (_, t) = deterministic_eval(model, &h, test, grid.label_smoothing)?;
        let (_, a) = deterministic_eval(model, &h, train, grid.label_smoothing)?;
        return Ok((t, a, 0, stop));
    }
    let tail = &test_acc[test_acc.len().saturating_sub(5)..];
    Ok((tail.iter().sum::<f64>() / tail.len() as f64, train_acc, epochs, stop))
}

/// Per-cell table sorted by test accuracy (best first; failed cells last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub rows: Vec<CellResult>,
}

impl BaselineTable {
    pub fn best(&self) -> Option<&CellResult> {
        self.rows.first().filter(|r| r.test_accuracy.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,cell,optimizer,lr,weight_decay,momentum,noise,test_acc,train_acc,epochs,stop,error\n");
        for (rank, r) in self.rows.iter().enumerate() {
            let opt = match r.spec.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            };
            let stop = r.stop.map(|s| format!("{s:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{:?},{},{},{},{},{}",
                rank + 1,
                r.index,
                opt,
                r.spec.lr,
                r.spec.weight_decay,
                r.spec.momentum,
                r.spec.noise,
                cell(r.test_accuracy),
                cell(r.train_accuracy),
                r.epochs,
                stop,
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            );
        }
        out
    }
}

fn cell_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("cells").join(format!("cell-{index:03}.json"))
}

/// Trains every grid cell, reusing finished cells found under `out`.
pub fn train_baseline(model: &MlpModel, grid: &BaselineGrid, splits: &Splits, seed: u64, out: Option<&Path>) -> Result<BaselineTable> {
    grid.validate()?;
    if splits.test.is_empty() {
        return Err(Error::Invalid("baseline grid needs a non-empty test split".into()));
    }
    if let Some(dir) = out {
        let cells = dir.join("cells");
        std::fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
    }
    let mut rows = grid
        .cells()
        .into_par_iter()
        .enumerate()
        .map(|(index, spec)| {
            if let Some(dir) = out {
                let p = cell_path(dir, index);
                if let Ok(text) = std::fs::read_to_string(&p) {
                    if let Ok(done) = serde_json::from_str::<CellResult>(&text) {
                        if done.spec == spec && done.seed == seed {
                            return Ok(done);
                        }
                    }
                }
            }
            let result = match train_cell(model, spec, grid, &splits.train, &splits.test, seed) {
                Ok((t, a, epochs, stop)) => CellResult {
                    index,
                    spec,
                    seed,
                    test_accuracy: Some(t),
                    train_accuracy: Some(a),
                    epochs,
                    stop: Some(stop),
                    error: None,
                },
                Err(e) => CellResult {
                    index,
                    spec,
                    seed,
                    test_accuracy: None,
                    train_accuracy: None,
                    epochs: 0,
                    stop: None,
                    error: Some(e.to_string()),
                },
            };
            if let Some(dir) = out {
                let p = cell_path(dir, index);
                let text = serde_json::to_string_pretty(&result).map_err(|e| Error::format("cell", e.to_string()))?;
                write(&p, &text)?;
            }
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        let key = |r: &CellResult| r.test_accuracy.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.index.cmp(&b.index))
    });
    Ok(BaselineTable { rows })
}
