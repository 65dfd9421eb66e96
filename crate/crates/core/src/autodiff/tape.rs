use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::{AdError, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    LogSumExpRows(usize),
    LogSoftmaxRows(usize),
    Gather(usize, Arc<Vec<usize>>),
    Slice(usize, usize),
    Reshape(usize),
    /// Elementwise function whose local derivative was evaluated in the
    /// forward pass.
    Custom(usize, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation.
///
/// Nodes are appended in evaluation order, so each node's inputs always
/// precede it. Values stored on the tape are never mutated.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var<'_>, AdError> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let requires_grad = self.requires(inputs);
        Ok(self.push(value, op, requires_grad))
    }

    /// Gradient of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AdError> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(AdError::NotScalar { shape: out.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::filled(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads)?;
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(id, n)| {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, contribution: Tensor) -> Result<(), AdError> {
    grads[id] = Some(match grads[id].take() {
        None => contribution,
        Some(prev) => prev.zip_with(&contribution, "accumulate", |a, b| a + b)?,
    });
    Ok(())
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AdError> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone())?;
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.map(|x| -x))?;
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.zip_with(val(*b), "mul", |x, y| x * y)?)?;
            }
            if needs(*b) {
                accumulate(grads, *b, g.zip_with(val(*a), "mul", |x, y| x * y)?)?;
            }
        }
        Op::AddRow(a, row) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone())?;
            }
            if needs(*row) {
                accumulate(grads, *row, g.sum_rows()?.reshape(val(*row).shape().to_vec())?)?;
            }
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c))?,
        Op::AddScalar(a) => accumulate(grads, *a, g.clone())?,
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.matmul_nt(val(*b))?)?;
            }
            if needs(*b) {
                accumulate(grads, *b, val(*a).matmul_tn(g)?)?;
            }
        }
        Op::Exp(a) => accumulate(grads, *a, g.zip_with(&node.value, "exp", |x, y| x * y)?)?,
        Op::Log(a) => accumulate(grads, *a, g.zip_with(val(*a), "log", |x, y| x / y)?)?,
        Op::Relu(a) => {
            accumulate(grads, *a, g.zip_with(val(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?)?
        }
        Op::Square(a) => accumulate(grads, *a, g.zip_with(val(*a), "square", |x, y| 2.0 * x * y)?)?,
        Op::Abs(a) => accumulate(grads, *a, g.zip_with(val(*a), "abs", |x, y| x * sign(y))?)?,
        Op::Sum(a) => {
            let s = g.item()?;
            accumulate(grads, *a, Tensor::filled(val(*a).shape(), s))?
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            let s = g.item()? / n;
            accumulate(grads, *a, Tensor::filled(val(*a).shape(), s))?
        }
        Op::LogSumExp(a) => {
            let s = g.item()?;
            let lse = node.value.item()?;
            accumulate(grads, *a, val(*a).map(|x| s * (x - lse).exp()))?
        }
        Op::LogSumExpRows(a) => {
            let x = val(*a);
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let lse = node.value.data()[r];
                let gr = g.data()[r];
                for c in 0..n {
                    out[r * n + c] = gr * (x.data()[r * n + c] - lse).exp();
                }
            }
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?)?
        }
        Op::LogSoftmaxRows(a) => {
            // d/dx log_softmax: g - softmax * rowsum(g)
            let y = &node.value;
            let (m, n) = (y.rows(), y.cols());
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let gs: f64 = g.data()[r * n..(r + 1) * n].iter().sum();
                for c in 0..n {
                    let i = r * n + c;
                    out[i] = g.data()[i] - y.data()[i].exp() * gs;
                }
            }
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?)?
        }
        Op::Gather(a, idx) => {
            let mut out = vec![0.0; val(*a).len()];
            for (gi, &src) in g.data().iter().zip(idx.iter()) {
                out[src] += gi;
            }
            accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), out)?)?
        }
        Op::Slice(a, start) => {
            let mut out = vec![0.0; val(*a).len()];
            out[*start..*start + g.len()].copy_from_slice(g.data());
            accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), out)?)?
        }
        Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape().to_vec())?)?,
        Op::Custom(a, deriv) => accumulate(grads, *a, g.zip_with(deriv, "custom", |x, d| x * d)?)?,
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for `leaf`. Leaves that did not influence the output get
    /// zeros; asking for a non-leaf panics.
    pub fn wrt(&self, leaf: Var<'_>) -> &Tensor {
        self.leaves
            .iter()
            .find(|(id, _)| *id == leaf.id)
            .map(|(_, g)| g)
            .expect("gradient requested for a variable that is not a leaf")
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<f64, AdError> {
        self.value().item()
    }

    fn unary(&self, op: Op, name: &'static str, f: impl FnOnce(&Tensor) -> Result<Tensor, AdError>) -> Result<Var<'t>, AdError> {
        let v = f(&self.value())?;
        self.tape.record(v, op, &[self.id], name)
    }

    fn binary(
        &self,
        rhs: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, AdError>,
    ) -> Result<Var<'t>, AdError> {
        let v = {
            let a = self.value();
            let b = rhs.value();
            f(&a, &b)?
        };
        self.tape.record(v, op, &[self.id, rhs.id], name)
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a.zip_with(b, "add", |x, y| x + y))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a.zip_with(b, "sub", |x, y| x - y))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), "mul", |a, b| a.zip_with(b, "mul", |x, y| x * y))
    }

    /// `self[m, n] + row[n]`, broadcasting the row over the batch.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(row, Op::AddRow(self.id, row.id), "add_row", |a, b| a.add_row(b))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>, AdError> {
        self.unary(Op::Scale(self.id, c), "scale", |a| Ok(a.map(|x| x * c)))
    }

    pub fn neg(&self) -> Result<Var<'t>, AdError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>, AdError> {
        self.unary(Op::AddScalar(self.id), "add_scalar", |a| Ok(a.map(|x| x + c)))
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(rhs, Op::MatMul(self.id, rhs.id), "matmul", |a, b| a.matmul(b))
    }

    pub fn exp(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Exp(self.id), "exp", |a| Ok(a.map(f64::exp)))
    }

    pub fn ln(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Log(self.id), "log", |a| Ok(a.map(f64::ln)))
    }

    pub fn relu(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Relu(self.id), "relu", |a| Ok(a.map(|x| x.max(0.0))))
    }

    pub fn square(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Square(self.id), "square", |a| Ok(a.map(|x| x * x)))
    }

    pub fn abs(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Abs(self.id), "abs", |a| Ok(a.map(f64::abs)))
    }

    pub fn sum(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sum(self.id), "sum", |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Mean(self.id), "mean", |a| {
            if a.is_empty() {
                return Err(AdError::Shape { op: "mean", detail: "empty tensor".into() });
            }
            Ok(Tensor::scalar(a.sum() / a.len() as f64))
        })
    }

    /// `ln Σ exp(x)` over every element.
    pub fn logsumexp(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::LogSumExp(self.id), "logsumexp", |a| Ok(Tensor::scalar(super::logsumexp(a.data()))))
    }

    pub fn logsumexp_rows(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::LogSumExpRows(self.id), "logsumexp_rows", |a| a.logsumexp_rows())
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>, AdError> {
        self.unary(Op::LogSoftmaxRows(self.id), "log_softmax_rows", |a| a.log_softmax_rows())
    }

    /// `out[i] = self[index[i]]` on a flat view of `self`.
    pub fn gather(&self, index: Arc<Vec<usize>>) -> Result<Var<'t>, AdError> {
        let op = Op::Gather(self.id, Arc::clone(&index));
        self.unary(op, "gather", |a| {
            let data = a.data();
            if let Some(&bad) = index.iter().find(|&&i| i >= data.len()) {
                return Err(AdError::Shape { op: "gather", detail: format!("index {bad} out of {}", data.len()) });
            }
            Ok(Tensor::vector(index.iter().map(|&i| data[i]).collect()))
        })
    }

    /// Contiguous flat sub-range `[start, start + len)` as a vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>, AdError> {
        self.unary(Op::Slice(self.id, start), "slice", |a| {
            if start + len > a.len() {
                return Err(AdError::Shape {
                    op: "slice",
                    detail: format!("range {start}..{} out of {}", start + len, a.len()),
                });
            }
            Ok(Tensor::vector(a.data()[start..start + len].to_vec()))
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, AdError> {
        self.unary(Op::Reshape(self.id), "reshape", |a| a.reshape(shape))
    }

    /// Applies `f` elementwise, where `f(x)` returns `(value, derivative)`.
    pub fn map_with_grad(&self, f: impl Fn(f64) -> (f64, f64)) -> Result<Var<'t>, AdError> {
        let (value, deriv) = {
            let a = self.value();
            let (vals, ders): (Vec<f64>, Vec<f64>) = a.data().iter().map(|&x| f(x)).unzip();
            (Tensor::new(a.shape().to_vec(), vals)?, Tensor::new(a.shape().to_vec(), ders)?)
        };
        self.tape.record(value, Op::Custom(self.id, deriv), &[self.id], "custom")
    }
}
