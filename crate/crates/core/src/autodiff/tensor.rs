use super::AdError;

/// Dense row-major tensor of `f64` values.
///
/// Tensors are plain immutable values. Every kernel here returns a fresh
/// tensor, which is what lets the tape hold on to forward values without
/// worrying about later mutation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::Shape {
                op: "new",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, AdError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(AdError::NotScalar { shape: self.shape.clone() })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), AdError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(AdError::Shape { op, detail: format!("expected a matrix, got shape {other:?}") }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, AdError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AdError> {
        if self.shape != other.shape {
            return Err(AdError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self[m, n] + row[n]` broadcast over the leading dimension.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2("add_row")?;
        if row.len() != n {
            return Err(AdError::Shape {
                op: "add_row",
                detail: format!("matrix {:?} vs row {:?}", self.shape, row.shape),
            });
        }
        let mut data = self.data.clone();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Column sums of an `[m, n]` matrix.
    pub fn sum_rows(&self) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// `self[m, k] · rhs[k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, rhs.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `selfᵀ · rhs` for `self[k, m]`, `rhs[k, n]`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = rhs.dims2("matmul_tn")?;
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul_tn",
                detail: format!("{:?}ᵀ x {:?}", self.shape, rhs.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let rhs_row = &rhs.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self · rhsᵀ` for `self[m, k]`, `rhs[n, k]`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul_nt",
                detail: format!("{:?} x {:?}ᵀ", self.shape, rhs.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Row-wise `ln Σ_j exp(x_ij)` of an `[m, n]` matrix.
    pub fn logsumexp_rows(&self) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2("logsumexp_rows")?;
        let out = (0..m).map(|r| logsumexp(&self.data[r * n..(r + 1) * n])).collect();
        Ok(Tensor::vector(out))
    }

    /// Row-wise log-softmax of an `[m, n]` matrix.
    pub fn log_softmax_rows(&self) -> Result<Tensor, AdError> {
        let (m, n) = self.dims2("log_softmax_rows")?;
        let mut data = self.data.clone();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let at = Tensor::matrix(2, 3, vec![1.0, 0.5, -1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul_tn(&b).unwrap(), at.matmul(&b).unwrap());
        let bt_src = Tensor::matrix(4, 2, (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let bt = Tensor::matrix(2, 4, {
            let d = bt_src.data();
            (0..2).flat_map(|c| (0..4).map(move |r| d[r * 2 + c])).collect()
        })
        .unwrap();
        let lhs = a.matmul_nt(&bt_src).unwrap();
        let rhs = a.matmul(&bt).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}
