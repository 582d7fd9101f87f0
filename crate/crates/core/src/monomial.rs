//! Monomials over feature samples, their analytic gradients, and the
//! per-channel input shift that keeps every monomial input strictly positive.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// One factor slot of a monomial: a planar offset from the anchor pixel
/// (`du` along columns, `dv` along rows) and a real exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub du: f64,
    pub dv: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub factors: Vec<Factor>,
}

impl Monomial {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Shape("monomial needs at least one factor".into()));
        }
        Ok(Self { factors })
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn exponents(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.b).collect()
    }

    /// Largest offset norm over the factors.
    pub fn radius(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| f.du.hypot(f.dv))
            .fold(0.0, f64::max)
    }
}

/// Parses a monomial set: either the bare list form
/// `[{"factors": [{"du", "dv", "b"}, ...]}, ...]` or any object carrying
/// that list under `"monomials"`.
pub fn monomials_from_json(text: &str) -> Result<Vec<Monomial>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let list = match value {
        serde_json::Value::Object(mut map) => map
            .remove("monomials")
            .ok_or_else(|| Error::Config("JSON object has no \"monomials\" key".into()))?,
        other => other,
    };
    Ok(serde_json::from_value(list)?)
}

pub fn monomials_to_json(monomials: &[Monomial]) -> Result<String> {
    Ok(serde_json::to_string_pretty(monomials)?)
}

fn check_inputs(values: &[f64], exponents: &[f64]) -> Result<()> {
    if values.len() != exponents.len() {
        return shape_err(format!(
            "{} values vs {} exponents",
            values.len(),
            exponents.len()
        ));
    }
    if let Some(&value) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Positivity { value });
    }
    Ok(())
}

fn product_except(values: &[f64], exponents: &[f64], skip: usize) -> f64 {
    values
        .iter()
        .zip(exponents)
        .enumerate()
        .filter(|(i, _)| *i != skip)
        .map(|(_, (x, b))| x.powf(*b))
        .product()
}

/// `prod_i values[i]^exponents[i]`.
pub fn eval_monomial(values: &[f64], exponents: &[f64]) -> Result<f64> {
    check_inputs(values, exponents)?;
    Ok(values.iter().zip(exponents).map(|(x, b)| x.powf(*b)).product())
}

/// Partial derivative with respect to `values[j]`:
/// `b_j x_j^(b_j - 1) prod_{i != j} x_i^b_i`.
pub fn grad_values(values: &[f64], exponents: &[f64], j: usize) -> Result<f64> {
    check_inputs(values, exponents)?;
    if j >= values.len() {
        return shape_err(format!("factor index {j} out of range"));
    }
    let b = exponents[j];
    Ok(b * values[j].powf(b - 1.0) * product_except(values, exponents, j))
}

/// Partial derivative with respect to `exponents[j]`:
/// `ln(x_j) x_j^b_j prod_{i != j} x_i^b_i`.
pub fn grad_exponents(values: &[f64], exponents: &[f64], j: usize) -> Result<f64> {
    check_inputs(values, exponents)?;
    if j >= values.len() {
        return shape_err(format!("factor index {j} out of range"));
    }
    let x = values[j];
    Ok(x.ln() * x.powf(exponents[j]) * product_except(values, exponents, j))
}

/// Frozen per-channel shift statistics for `x~ = max(eps, x - x_min + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub x_min: Vec<f64>,
    pub epsilon: f64,
}

impl ShiftStats {
    pub fn channels(&self) -> usize {
        self.x_min.len()
    }

    #[inline]
    pub fn shift_value(&self, x: f64, channel: usize) -> f64 {
        (x - self.x_min[channel] + 1.0).max(self.epsilon)
    }

    fn check(&self, features: &Tensor) -> Result<usize> {
        if features.rank() != 4 {
            return shape_err(format!("expected B x H x W x C, got {:?}", features.shape()));
        }
        let c = features.shape()[3];
        if c != self.x_min.len() {
            return shape_err(format!(
                "features have {c} channels, shift stats {}",
                self.x_min.len()
            ));
        }
        Ok(c)
    }
}

/// Per-channel minimum over batch and spatial positions.
pub fn fit_shift(training_features: &Tensor, epsilon: f64) -> Result<ShiftStats> {
    if training_features.rank() != 4 {
        return shape_err(format!(
            "expected B x H x W x C, got {:?}",
            training_features.shape()
        ));
    }
    if training_features.is_empty() {
        return shape_err("cannot fit shift on an empty feature set");
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let c = training_features.shape()[3];
    let mut x_min = vec![f64::INFINITY; c];
    for (i, &x) in training_features.data().iter().enumerate() {
        let ch = i % c;
        if x < x_min[ch] {
            x_min[ch] = x;
        }
    }
    Ok(ShiftStats { x_min, epsilon })
}

pub fn apply_shift(features: &Tensor, stats: &ShiftStats) -> Result<Tensor> {
    let c = stats.check(features)?;
    let mut out = features.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x = stats.shift_value(*x, i % c);
    }
    Ok(out)
}

/// Passes `upstream` through where the shift is unclamped and zeroes it
/// where the `epsilon` floor is active (including the kink itself).
pub fn apply_shift_grad(upstream: &Tensor, features: &Tensor, stats: &ShiftStats) -> Result<Tensor> {
    let c = stats.check(features)?;
    if upstream.shape() != features.shape() {
        return shape_err(format!(
            "upstream {:?} vs features {:?}",
            upstream.shape(),
            features.shape()
        ));
    }
    let mut out = upstream.clone();
    for (i, (g, &x)) in out.data_mut().iter_mut().zip(features.data()).enumerate() {
        if x - stats.x_min[i % c] + 1.0 <= stats.epsilon {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// All nonnegative integer exponent vectors of length `k` whose components
/// sum to at most `group_order`, in lexicographic order.
pub fn enumerate_monomial_exponents(k: usize, group_order: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, k: usize, budget: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=budget {
            prefix.push(e);
            rec(prefix, k, budget - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), k, group_order, &mut out);
    out
}
