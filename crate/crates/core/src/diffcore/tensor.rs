use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `rows x cols` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::contract("ragged columns"));
        }
        let mut data = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Self::matrix(rows, cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_scalar_like(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `y = W x` for `W: [m x n]`, `x: [n]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if !w.is_matrix() || x.len() != w.cols() {
        return Err(Error::contract(format!(
            "matvec shapes {:?} x {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let n = w.cols();
    let out = w
        .data()
        .chunks_exact(n.max(1))
        .take(w.rows())
        .map(|row| dot(row, x.data()))
        .collect();
    Ok(Tensor::vector(out))
}

/// `C = A B` for `A: [m x n]`, `B: [n x p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::contract(format!(
            "matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a.data()[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data()[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::matrix(m, p, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() {
        return Err(Error::contract(format!("transpose of shape {:?}", a.shape())));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax. Entries equal to `-inf` map to exactly zero.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| if z == f64::NEG_INFINITY { 0.0 } else { (z - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log softmax`, with `-inf` preserved for masked entries.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let lse = max
        + logits
            .iter()
            .filter(|z| z.is_finite())
            .map(|&z| (z - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits
        .iter()
        .map(|&z| if z.is_finite() { z - lse } else { f64::NEG_INFINITY })
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_identity_and_hand_case() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(vec![2.0, 3.0]);
        assert_eq!(matvec(&eye, &x).unwrap().data(), &[2.0, 3.0]);

        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(matvec(&w, &ones).unwrap().data(), &[3.0, 7.0]);

        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(matvec(&zero, &x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(matvec(&w, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(4.0).item().unwrap(), 4.0);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);

        // direct formula e^i / sum e^j
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (i, v) in p.iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-15);
        }
        assert!((p[0] - 0.09003057317038046).abs() < 1e-12);
        assert!((p[1] - 0.24472847105479767).abs() < 1e-12);
        assert!((p[2] - 0.6652409557748219).abs() < 1e-12);

        assert!(matches!(
            softmax(&[f64::NEG_INFINITY; 3]),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(-10.0) - (-10f64).exp().ln_1p()).abs() < 1e-18);
    }
}
