//! Dense row-major `f64` arrays with shape bookkeeping and the handful of
//! elementwise/reduction kernels the rest of the crate needs.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return shape_err(format!("rank {} exceeds {MAX_RANK}", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if the rank exceeds [`MAX_RANK`].
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat offset.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return shape_err("ragged rows");
        }
        Self::new(vec![h, w], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Row-major flat offset of `index`; rejects out-of-range indices.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, s)| i >= s) {
            return Err(Error::OutOfBounds {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, s)| acc * s + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let o = self.offset(index)?;
        self.data[o] = value;
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| x * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Sums over the listed axes, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if let Some(&a) = axes.iter().find(|&&a| a >= rank) {
            return shape_err(format!("axis {a} out of range for rank {rank}"));
        }
        let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&a| self.shape[a]).collect();
        let mut out = Tensor::zeros(&out_shape);
        let strides = strides(&self.shape);
        let out_strides = strides_for(&out_shape);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut o = 0;
            for (k, &a) in keep.iter().enumerate() {
                o += ((flat / strides[a]) % self.shape[a]) * out_strides[k];
            }
            out.data[o] += v;
        }
        Ok(out)
    }

    /// Maximum along `axis` (removed from the shape) with the flat argmax
    /// position along that axis. Ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        let n = self.shape[axis];
        if n == 0 {
            return shape_err("max over empty axis");
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = self.data[base];
                let mut best_k = 0;
                for k in 1..n {
                    let v = self.data[base + k * inner];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out.push(best);
                arg.push(best_k);
            }
        }
        Ok((Tensor::new(out_shape, out)?, arg))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return shape_err(format!("matmul: {:?} x {:?}", self.shape, other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(b) {
                    *r += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return shape_err("transpose needs a 2-D tensor");
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(&[n, m], |f| self.data[(f % m) * n + f / m]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    strides_for(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
                }
                out.set(&[i, j], s).unwrap();
            }
        }
        out
    }

    #[test]
    fn new_rejects_bad_length_and_rank() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1; 6], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_ok());
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(matches!(t.get(&[2, 0]), Err(Error::OutOfBounds { .. })));
        assert!(t.get(&[0, 3]).is_err());
        assert!(t.get(&[0]).is_err());
        assert_eq!(t.offset(&[1, 2]).unwrap(), 5);
    }

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(&[4, 7], |i| ((i * 37 % 11) as f64 - 5.0) * 0.31);
        let b = Tensor::from_fn(&[7, 3], |i| ((i * 17 % 13) as f64 - 6.0) * 0.17);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn sum_over_axis() {
        let t = Tensor::ones(&[2, 3]);
        assert_eq!(t.sum_axes(&[1]).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(t.sum_axes(&[0]).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(t.sum_axes(&[0, 1]).unwrap().data(), &[6.0]);
        assert!(t.sum_axes(&[2]).is_err());
    }

    #[test]
    fn max_axis_ties_go_low() {
        let t = Tensor::from_rows(&[&[1.0, 5.0, 5.0], &[2.0, 2.0, 0.0]]).unwrap();
        let (m, arg) = t.max_axis(1).unwrap();
        assert_eq!(m.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 0]);
        let (m0, arg0) = t.max_axis(0).unwrap();
        assert_eq!(m0.data(), &[2.0, 5.0, 5.0]);
        assert_eq!(arg0, vec![1, 0, 0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
        assert_eq!(Tensor::ones(&[3]).scale(2.0).data(), &[2.0; 3]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_fn(&[3, 5], |i| i as f64);
        let t = a.transpose().unwrap();
        assert_eq!(t.get(&[4, 2]).unwrap(), a.get(&[2, 4]).unwrap());
        assert_eq!(t.transpose().unwrap(), a);
    }
}
