//! Pointwise, pooling and dense layers with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Zero where the forward input was `<= 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return shape_err("relu backward shape mismatch");
    }
    Ok(Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > 0.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    }))
}

/// Max over the orientation axis of `B x N x H x W x C`, with the winning
/// orientation per output element (lowest index on ties).
pub fn orientation_maxpool(features: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if features.rank() != 5 {
        return shape_err(format!("expected B x N x H x W x C, got {:?}", features.shape()));
    }
    features.max_axis(1)
}

pub fn orientation_maxpool_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 5 || grad_out.len() != argmax.len() {
        return shape_err("orientation maxpool backward shape mismatch");
    }
    let n = input_shape[1];
    let inner: usize = input_shape[2..].iter().product();
    let mut out = Tensor::zeros(input_shape);
    for (flat, (&g, &k)) in grad_out.data().iter().zip(argmax).enumerate() {
        let (b, i) = (flat / inner, flat % inner);
        out.data_mut()[(b * n + k) * inner + i] = g;
    }
    Ok(out)
}

/// Spatial mean of `B x H x W x C`, giving `B x C`.
pub fn global_avg_pool(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 4 {
        return shape_err(format!("expected B x H x W x C, got {:?}", features.shape()));
    }
    let hw = (features.shape()[1] * features.shape()[2]) as f64;
    Ok(features.sum_axes(&[1, 2])?.scale(1.0 / hw))
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[3]] {
        return shape_err("global average pool backward shape mismatch");
    }
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let scale = 1.0 / (h * w) as f64;
    Ok(Tensor::from_fn(input_shape, |i| {
        let b = i / (h * w * c);
        grad_out.data()[b * c + i % c] * scale
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[1] != bias.len() {
            return shape_err("dense weights must be in x out with out biases");
        }
        Ok(Self { weights, bias })
    }

    /// Glorot-normal weights, zero bias.
    pub fn random(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / (inputs + outputs) as f64).sqrt()).expect("valid std");
        let w = Tensor::from_fn(&[inputs, outputs], |_| normal.sample(rng));
        Self { weights: w, bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weights)?;
        let o = self.outputs();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias[i % o];
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
        if x.rank() != 2 || grad_out.shape() != [x.shape()[0], self.outputs()] {
            return shape_err("dense backward shape mismatch");
        }
        let input = grad_out.matmul(&self.weights.transpose()?)?;
        let weights = x.transpose()?.matmul(grad_out)?;
        let bias = grad_out.sum_axes(&[0])?.into_data();
        Ok(DenseGrads { input, weights, bias })
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return shape_err(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        ));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, num_classes: c });
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * c..(n + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[n * c..(n + 1) * c];
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = ((row[k] - log_z).exp() - if k == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest score per row, lowest index on ties.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Frozen per-feature affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardize {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    /// Column statistics of a `S x D` matrix; zero spread maps to 1.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] == 0 {
            return shape_err("standardize needs a nonempty S x D matrix");
        }
        let (s, d) = (x.shape()[0], x.shape()[1]);
        let mean = x.sum_axes(&[0])?.scale(1.0 / s as f64).into_data();
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for k in 0..d {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / s as f64).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() != 2 || x.shape()[1] != d {
            return shape_err("standardize shape mismatch");
        }
        Ok(Tensor::from_fn(x.shape(), |i| (x.data()[i] - self.mean[i % d]) / self.std[i % d]))
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if grad_out.rank() != 2 || grad_out.shape()[1] != d {
            return shape_err("standardize shape mismatch");
        }
        Ok(Tensor::from_fn(grad_out.shape(), |i| grad_out.data()[i] / self.std[i % d]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &Tensor::ones(&[3])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (loss, grad) = softmax_xent(&Tensor::zeros(&[2, 5]), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((grad.sum()).abs() < 1e-15);
        assert!(softmax_xent(&Tensor::zeros(&[1, 3]), &[3]).is_err());
        assert!(softmax_xent(&Tensor::zeros(&[2, 3]), &[0]).is_err());
    }

    #[test]
    fn maxpool_over_orientations() {
        let x = Tensor::new(vec![1, 3, 1, 1, 1], vec![1.0, 5.0, 3.0]).unwrap();
        let (m, arg) = orientation_maxpool(&x).unwrap();
        assert_eq!(m.data(), &[5.0]);
        assert_eq!(m.shape(), &[1, 1, 1, 1]);
        let g = orientation_maxpool_backward(&Tensor::ones(&[1, 1, 1, 1]), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
        let single = Tensor::from_fn(&[2, 1, 2, 2, 3], |i| i as f64);
        let (m, _) = orientation_maxpool(&single).unwrap();
        assert_eq!(m.data(), single.data());
    }

    #[test]
    fn dense_and_pool_shapes() {
        let layer = DenseLayer::new(Tensor::ones(&[3, 2]), vec![0.5, -0.5]).unwrap();
        let y = layer.forward(&Tensor::ones(&[4, 3])).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(y.data()[0], 3.5);
        assert!(layer.forward(&Tensor::ones(&[4, 2])).is_err());
        let p = global_avg_pool(&Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64)).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(argmax_rows(&Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap()), vec![0, 1]);
    }

    #[test]
    fn standardize_fit() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Standardize::fit(&x).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std[1], 1.0);
        let y = s.forward(&x).unwrap();
        assert!((y.data()[0] + 1.224744871391589).abs() < 1e-12);
    }
}
