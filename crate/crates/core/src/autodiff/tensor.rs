use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn uniformly from [-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(&[n, m], out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Self::new(&[m, n], out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.require_matrix("matmul_tn")?;
        let (k2, n) = other.require_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_tn of {:?} and {:?}: leading dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Self::new(&[m, n], out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul_nt")?;
        let (n, k2) = other.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt of {:?} and {:?}: trailing dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Self::new(&[m, n], out)
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {m}-row matrix",
                start + len
            )));
        }
        Self::new(&[len, n], self.data[start * n..(start + len) * n].to_vec())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, n) = self.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index(format!("row {i} of a {m}-row matrix")));
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Self::new(&[idx.len(), n], out)
    }
}

/// Mean over rows of `-log softmax(logits)[target]`, stabilized by subtracting
/// each row's maximum.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (loss, _) = softmax_cross_entropy_with_probs(logits, targets)?;
    Ok(Tensor::scalar(loss))
}

pub(crate) fn softmax_cross_entropy_with_probs(
    logits: &Tensor,
    targets: &[usize],
) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::dim(format!(
            "softmax_cross_entropy expects [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != batch {
        return Err(Error::dim(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let mut probs = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index(format!(
                "target {t} at row {i} with only {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut probs[i * classes..(i + 1) * classes];
        let mut z = 0.0;
        for (p, &l) in out.iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in out.iter_mut() {
            *p /= z;
        }
        total += z.ln() - (row[t] - max);
    }
    Ok((total / batch as f64, Tensor::new(&[batch, classes], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.5, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_checked_product() {
        let a = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        for ((x, y), z) in got.data().iter().zip(tn.data()).zip(nt.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = softmax_cross_entropy(&uniform, &[0, 1, 3]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(&[1, 4]);
        sat.data_mut()[2] = 1000.0;
        assert!(softmax_cross_entropy(&sat, &[2]).unwrap().item() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let err = softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    /// Compensated (Neumaier) summation gives a reference far more precise
    /// than the max-shifted evaluation under test.
    fn precise_log_sum_exp(row: &[f64]) -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &x in row {
            let v = (x - max).exp();
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        max + (sum + comp).ln()
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[8, 6], 3.0, &mut rng);
        let targets: Vec<usize> = (0..8).map(|i| (i * 5 + 1) % 6).collect();
        let expected: f64 = (0..8)
            .map(|i| precise_log_sum_exp(logits.row(i)) - logits.row(i)[targets[i]])
            .sum::<f64>()
            / 8.0;
        let got = softmax_cross_entropy(&logits, &targets).unwrap().item();
        assert!((got - expected).abs() < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn cross_entropy_is_nonnegative(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let logits = Tensor::new(&[3, 4], vals).unwrap();
            let l = softmax_cross_entropy(&logits, &[0, 2, 3]).unwrap().item();
            proptest::prop_assert!(l >= 0.0);
        }
    }
}
