//! Dense feed-forward networks, smoothed cross-entropy, and the Adam/SGD
//! update rules.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

/// Contiguous range of the flat parameter vector. Each weight matrix and
/// each bias vector is its own group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Multi-layer perceptron with ReLU between layers and raw logits out.
///
/// Flat layout, layer by layer: weight `[inputs, outputs]` row-major, then
/// bias `[outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    groups: Vec<ParamGroup>,
    group_of: Arc<Vec<usize>>,
}

impl MlpModel {
    /// `widths = [input, hidden.., classes]`.
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!("model widths must be >= 2 positive sizes, got {widths:?}")));
        }
        let layers: Vec<Dense> = widths.windows(2).map(|w| Dense { inputs: w[0], outputs: w[1] }).collect();
        let mut groups = Vec::with_capacity(2 * layers.len());
        let mut start = 0;
        for (i, l) in layers.iter().enumerate() {
            groups.push(ParamGroup { name: format!("dense{i}.weight"), start, len: l.inputs * l.outputs });
            start += l.inputs * l.outputs;
            groups.push(ParamGroup { name: format!("dense{i}.bias"), start, len: l.outputs });
            start += l.outputs;
        }
        let group_of = groups.iter().enumerate().flat_map(|(g, p)| std::iter::repeat_n(g, p.len)).collect();
        Ok(Self { layers, groups, group_of: Arc::new(group_of) })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Group id of every flat parameter.
    pub fn group_index(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.group_of)
    }

    pub fn dim(&self) -> usize {
        self.group_of.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization for weights and
    /// biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, Stream::Init);
        let mut out = Vec::with_capacity(self.dim());
        for l in &self.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for _ in 0..(l.inputs * l.outputs + l.outputs) {
                out.push(rng.random_range(-bound..=bound));
            }
        }
        out
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Invalid(format!("parameter vector has {len} entries, model needs {}", self.dim())));
        }
        Ok(())
    }

    /// Splits a flat vector into `(weight, bias)` tensors per layer.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_dim(flat.len())?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let w = &self.groups[2 * i];
            let b = &self.groups[2 * i + 1];
            out.push((
                Tensor::matrix(l.inputs, l.outputs, flat[w.range()].to_vec())?,
                Tensor::vector(flat[b.range()].to_vec()),
            ));
        }
        Ok(out)
    }

    pub fn flatten(&self, layers: &[(Tensor, Tensor)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for (w, b) in layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        self.check_dim(out.len())?;
        Ok(out)
    }

    fn check_batch(&self, x: &[usize]) -> Result<()> {
        match x {
            [_, p] if *p == self.input_dim() => Ok(()),
            other => Err(Error::Invalid(format!(
                "batch shape {other:?} does not match model input width {}",
                self.input_dim()
            ))),
        }
    }

    /// Recorded forward pass: `params` is the flat parameter vector.
    pub fn forward<'t>(&self, params: Var<'t>, batch: Var<'t>) -> Result<Var<'t>> {
        self.check_batch(&batch.shape())?;
        self.check_dim(params.value().len())?;
        let mut act = batch;
        for (i, l) in self.layers.iter().enumerate() {
            let wg = &self.groups[2 * i];
            let bg = &self.groups[2 * i + 1];
            let w = params.slice(wg.start, wg.len)?.reshape(vec![l.inputs, l.outputs])?;
            let b = params.slice(bg.start, bg.len)?;
            act = act.matmul(w)?.add_row(b)?;
            if i + 1 < self.layers.len() {
                act = act.relu()?;
            }
        }
        Ok(act)
    }

    /// Untracked forward pass, same arithmetic as [`MlpModel::forward`].
    pub fn logits(&self, params: &[f64], batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        let layers = self.unflatten(params)?;
        let n = layers.len();
        let mut act = batch.clone();
        for (i, (w, b)) in layers.iter().enumerate() {
            act = act.matmul(w)?.add_row(b)?;
            if i + 1 < n {
                act = act.map(|x| x.max(0.0));
            }
        }
        if !act.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(act)
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Invalid(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Tensor {
    let off = smoothing / classes as f64;
    let mut data = vec![off; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * classes + y] += 1.0 - smoothing;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("target shape")
}

fn check_smoothing(smoothing: f64) -> Result<()> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    Ok(())
}

/// Batch-mean cross-entropy against `(1 - s)·onehot + s/c`.
pub fn ce_loss<'t>(logits: Var<'t>, labels: &[usize], smoothing: f64) -> Result<Var<'t>> {
    check_smoothing(smoothing)?;
    let shape = logits.shape();
    let (rows, classes) = match shape.as_slice() {
        [r, c] => (*r, *c),
        other => return Err(Error::Invalid(format!("logits must be a matrix, got {other:?}"))),
    };
    check_labels(labels, rows, classes)?;
    let targets = logits.tape().constant(smoothed_targets(labels, classes, smoothing));
    let loss = logits.log_softmax_rows()?.mul(targets)?.sum()?.scale(-1.0 / rows as f64)?;
    Ok(loss)
}

/// Per-example smoothed cross-entropy, untracked.
pub fn ce_per_example(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Vec<f64>> {
    check_smoothing(smoothing)?;
    let (rows, classes) = (logits.rows(), logits.cols());
    check_labels(labels, rows, classes)?;
    let logp = logits.log_softmax_rows()?;
    let off = smoothing / classes as f64;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logp.data()[r * classes..(r + 1) * classes];
            let all: f64 = row.iter().sum();
            -(off * all + (1.0 - smoothing) * row[y])
        })
        .collect())
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn check_update(params: &[f64], grads: &[f64], state_len: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state_len {
        return Err(Error::Invalid(format!(
            "optimizer dimension mismatch: params {}, grads {}, state {state_len}",
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient, optimizer step aborted".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr, weight_decay: 0.0 }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_update(params, grads, self.m.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(dim: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { velocity: vec![0.0; dim], lr, momentum, weight_decay }
    }

    /// `buf ← μ·buf + (g + wd·p)`, `p ← p − lr·buf`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_update(params, grads, self.velocity.len())?;
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= self.lr * self.velocity[i];
        }
        Ok(())
    }
}

/// Either optimizer behind one interface, for the baseline trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(SgdState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Optimizer::Adam(s) => s.step(params, grads),
            Optimizer::Sgd(s) => s.step(params, grads),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(s) => s.lr,
            Optimizer::Sgd(s) => s.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(s) => s.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn model_232() -> MlpModel {
        MlpModel::new(&[2, 3, 2]).unwrap()
    }

    #[test]
    fn groups_partition_parameters() {
        let m = MlpModel::new(&[2, 32, 32, 2]).unwrap();
        assert_eq!(m.num_groups(), 6);
        assert_eq!(m.dim(), 2 * 32 + 32 + 32 * 32 + 32 + 32 * 2 + 2);
        let mut next = 0;
        for g in m.groups() {
            assert_eq!(g.start, next);
            next += g.len;
        }
        assert_eq!(next, m.dim());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = MlpModel::new(&[2, 2]).unwrap();
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let x = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        assert_eq!(m.logits(&params, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_broadcast_bias() {
        let m = MlpModel::new(&[3, 2]).unwrap();
        let mut params = vec![0.0; 6];
        params.extend([0.5, -2.0]);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.logits(&params, &x).unwrap().data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn forward_matches_hand_composition() {
        let m = model_232();
        let params = m.init_params(11);
        let x = Tensor::matrix(4, 2, vec![0.1, -0.4, 1.2, 0.7, -0.9, 0.3, 0.0, 2.0]).unwrap();
        // hand-composed relu(x W1 + b1) W2 + b2
        let (w1, b1) = (&params[0..6], &params[6..9]);
        let (w2, b2) = (&params[9..15], &params[15..17]);
        let mut expected = vec![];
        for r in 0..4 {
            let xr = &x.data()[r * 2..r * 2 + 2];
            let hidden: Vec<f64> =
                (0..3).map(|j| (xr[0] * w1[j] + xr[1] * w1[3 + j] + b1[j]).max(0.0)).collect();
            for k in 0..2 {
                expected.push(hidden[0] * w2[k] + hidden[1] * w2[2 + k] + hidden[2] * w2[4 + k] + b2[k]);
            }
        }
        let got = m.logits(&params, &x).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
        let tape = Tape::new();
        let taped = m.forward(tape.constant(Tensor::vector(params.clone())), tape.constant(x.clone())).unwrap();
        assert_eq!(*taped.value(), got);
    }

    #[test]
    fn flatten_round_trip() {
        let m = model_232();
        let p = m.init_params(3);
        assert_eq!(m.flatten(&m.unflatten(&p).unwrap()).unwrap(), p);
        assert!(m.unflatten(&p[1..]).is_err());
    }

    #[test]
    fn batch_width_checked() {
        let m = model_232();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(m.logits(&m.init_params(0), &x).is_err());
    }

    #[test]
    fn init_is_bounded_and_nonzero() {
        let m = MlpModel::new(&[2, 32, 2]).unwrap();
        let p = m.init_params(5);
        let l1: f64 = p.iter().map(|x| x.abs()).sum();
        assert!(l1 > 0.0);
        assert!(p[..64].iter().all(|x| x.abs() <= 1.0 / 2f64.sqrt()));
        assert!(p[96..].iter().all(|x| x.abs() <= 1.0 / 32f64.sqrt()));
    }

    fn taped_ce(logits: Tensor, labels: &[usize], s: f64) -> Result<f64> {
        let tape = Tape::new();
        let l = ce_loss(tape.constant(logits), labels, s)?;
        Ok(l.item()?)
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for &s in &[0.0, 0.1, 0.5] {
            let l = taped_ce(Tensor::zeros(&[3, 5]), &[0, 4, 2], s).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
        let l = taped_ce(Tensor::zeros(&[1, 2]), &[0], 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_give_vanishing_loss() {
        let l = taped_ce(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap(), &[0], 0.0).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        assert!(taped_ce(Tensor::zeros(&[1, 2]), &[2], 0.0).is_err());
        assert!(ce_per_example(&Tensor::zeros(&[1, 2]), &[5], 0.0).is_err());
    }

    #[test]
    fn per_example_agrees_with_taped_mean() {
        let logits = Tensor::matrix(3, 3, vec![0.2, -1.0, 3.0, 0.0, 0.5, 0.1, -2.0, 2.0, 1.0]).unwrap();
        let labels = [2, 0, 1];
        let per = ce_per_example(&logits, &labels, 0.1).unwrap();
        let mean = per.iter().sum::<f64>() / 3.0;
        assert!((mean - taped_ce(logits, &labels, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ce_is_at_least_target_entropy() {
        let s: f64 = 0.1;
        let c = 4.0;
        let hi = 1.0 - s + s / c;
        let lo = s / c;
        let entropy = -(hi * hi.ln() + 3.0 * lo * lo.ln());
        let logits = Tensor::matrix(1, 4, vec![5.0, -1.0, 0.3, 2.0]).unwrap();
        assert!(taped_ce(logits, &[0], s).unwrap() >= entropy - 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut st = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_reference_arithmetic() {
        let lr = 1e-2;
        let mut st = AdamState::new(2, lr);
        let mut p = vec![0.0, 1.0];
        let g = [0.3, -2.0];
        st.step(&mut p, &g).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let m_hat = (0.1 * gi) / 0.1;
            let v_hat = (0.001 * gi * gi) / (1.0 - 0.999);
            let expected = [0.0, 1.0][i] - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let lr = 1e-3;
        let mut st = AdamState::new(1, lr);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            st.step(&mut p, &[0.7]).unwrap();
            last = before - p[0];
        }
        assert!(last > 0.0);
        assert!((last - lr).abs() / lr < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_moving() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = vec![1.0, 2.0];
        assert!(st.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn sgd_rules() {
        let mut p = vec![1.0, -1.0];
        SgdState::new(2, 0.0, 0.9, 0.1).step(&mut p, &[5.0, 5.0]).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);

        let mut p = vec![1.0, -1.0];
        SgdState::new(2, 0.1, 0.0, 0.0).step(&mut p, &[0.5, 2.0]).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -1.0 - 0.1 * 2.0]);

        // two steps with momentum, unrolled by hand
        let (lr, mu) = (0.1, 0.9);
        let mut st = SgdState::new(1, lr, mu, 0.0);
        let mut p = vec![1.0];
        st.step(&mut p, &[0.5]).unwrap();
        st.step(&mut p, &[-0.2]).unwrap();
        let b1 = 0.5;
        let b2 = mu * b1 - 0.2;
        let expected = 1.0 - lr * b1 - lr * b2;
        assert!((p[0] - expected).abs() < 1e-12);
    }
}
