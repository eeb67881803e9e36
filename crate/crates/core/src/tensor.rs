//! Dense f64 tensors and the numeric kernels shared by every module.
//!
//! Everything here is double precision with a fixed summation order, so any
//! computation is bit-reproducible given identical inputs.

use crate::error::{Error, Result};

/// Dense row-major f64 array with an explicit shape.
///
/// Most of the simulator uses rank 1 (vectors) and rank 2 (matrices).
/// Zero-sized dimensions are permitted so that e.g. decoding an empty target
/// yields an empty `[0, V]` logits tensor instead of an error.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dimension(
                "Tensor::new",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dimension("Tensor::from_rows", "ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self @ other` for rank-2 operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::dimension("matmul", "operands must be rank 2"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner dimensions {k} and {k2} disagree"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self^T @ other`; `self` is `[k, m]`, `other` is `[k, n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul_tn",
                format!("leading dimensions {k} and {k2} disagree"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self @ other^T`; `self` is `[m, k]`, `other` is `[n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul_nt",
                format!("trailing dimensions {k} and {k2} disagree"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dimension(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dimension(
                "add_scaled",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Adds a length-`cols` bias row to every row.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::dimension(
                "add_row_broadcast",
                format!("bias length {} vs {c} columns", bias.len()),
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a rank-1 tensor (fixed row-major order).
    pub fn sum_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        let n = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            softmax_in_place(row);
            debug_assert_eq!(row.len(), n);
        }
        out
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(
            "cosine_similarity",
            format!("lengths {} and {} differ", a.len(), b.len()),
        ));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine_similarity"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Index value marking unsupervised positions in cross-entropy targets.
pub const IGNORE_INDEX: i64 = -100;

/// Sum-form cross entropy pieces for batch assembly: total negative
/// log-likelihood over supervised rows, the unscaled gradient
/// `softmax - onehot` (zero at ignored rows), and the supervised row count.
pub fn cross_entropy_parts(logits: &Tensor, targets: &[i64]) -> Result<(f64, Tensor, usize)> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::dimension(
            "cross_entropy",
            format!("{n} logit rows vs {} targets", targets.len()),
        ));
    }
    let mut grad = Tensor::zeros(&[n, v]);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..n {
        let t = targets[r];
        if t == IGNORE_INDEX {
            continue;
        }
        if t < 0 || t as usize >= v {
            return Err(Error::Usage(format!(
                "target {t} out of range for {v} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += log_z - row[t as usize];
        let g = grad.row_mut(r);
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - log_z).exp();
        }
        g[t as usize] -= 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch(
            "all positions carry ignore_index".into(),
        ));
    }
    Ok((total, grad, count))
}

/// Mean cross entropy over non-ignored rows, with the gradient already
/// scaled by `1 / count`. Rows whose target equals `ignore_index` contribute
/// zero loss and zero gradient.
pub fn cross_entropy_logits(
    logits: &Tensor,
    targets: &[i64],
    ignore_index: i64,
) -> Result<(f64, Tensor)> {
    let canonical: Vec<i64> = targets
        .iter()
        .map(|&t| if t == ignore_index { IGNORE_INDEX } else { t })
        .collect();
    let (total, mut grad, count) = cross_entropy_parts(logits, &canonical)?;
    let inv = 1.0 / count as f64;
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = Tensor::identity(2).matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0], vec![4.0]]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 11.0);
    }

    #[test]
    fn matmul_zero_left_operand() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t2(&[vec![1.0, -2.0], vec![5.0, 0.5], vec![9.0, 3.0]]);
        let out = z.matmul(&b).unwrap();
        assert_eq!(out, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = t2(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]);
        let plain = a.matmul(&b).unwrap();
        let via_tn = a.transpose().matmul_tn(&b).unwrap();
        let via_nt = a.matmul_nt(&b.transpose()).unwrap();
        for (x, y) in plain.data().iter().zip(via_tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in plain.data().iter().zip(via_nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let out = t2(&[vec![0.0, 0.0]]).softmax_rows();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_computed_ratio() {
        let out = t2(&[vec![2.0_f64.ln(), 0.0]]).softmax_rows();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-3.0, 0.0, 41.5] {
            let out = t2(&[vec![c, c, c, c]]).softmax_rows();
            for &v in out.data() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_two_way_uniform() {
        let logits = t2(&[vec![0.0, 0.0]]);
        let (loss, grad) = cross_entropy_logits(&logits, &[0], IGNORE_INDEX).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] - (-0.5)).abs() < 1e-12);
        assert!((grad.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_four_way_uniform() {
        let logits = t2(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let (loss, _) = cross_entropy_logits(&logits, &[2], IGNORE_INDEX).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_degenerate() {
        let logits = t2(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        let err = cross_entropy_logits(&logits, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX);
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn cross_entropy_ignored_rows_have_zero_grad() {
        let logits = t2(&[vec![0.5, -0.5], vec![2.0, 3.0]]);
        let (_, grad) = cross_entropy_logits(&logits, &[1, IGNORE_INDEX], IGNORE_INDEX).unwrap();
        assert_eq!(grad.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_identity_orthogonal_and_hand_value() {
        assert!((cosine_similarity(&[2.0, 3.0], &[2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.707107).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_vector_errors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector(_))
        ));
    }
}
