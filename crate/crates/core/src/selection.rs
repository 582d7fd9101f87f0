//! Greedy monomial selection scored by a closed-form linear classifier.
//!
//! Candidates are drawn once into a fixed pool. Each iteration scores every
//! unused candidate by the validation accuracy of a ridge least-squares
//! classifier trained on the invariant features of `chosen + candidate`
//! (ties: lower training squared error, then lower candidate id). The best
//! candidate is appended only when it beats the best accuracy so far;
//! otherwise a stagnation counter is incremented. The loop ends when the set
//! reaches its cap, the counter reaches the patience limit, or the pool is
//! used up.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_rows, Standardize};
use crate::error::{shape_err, Error, Result};
use crate::iil::{ii_forward, IILayerState, RotationGroupSampling};
use crate::monomial::{enumerate_monomial_exponents, Factor, Monomial, ShiftStats};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_PATIENCE: usize = 10;

/// Linear least-squares classifier with a bias row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `(D + 1) x C`; the last row is the bias.
    pub weights: Tensor,
    pub lambda: f64,
    /// `|(X'X + lambda I) W - X'Y| / |X'Y|` of the solve.
    pub residual: f64,
}

impl LinearClassifier {
    pub fn dims(&self) -> usize {
        self.weights.shape()[0] - 1
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Class scores `X W + bias`, `S x C`.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.dims() {
            return shape_err(format!(
                "classifier expects S x {}, got {:?}",
                self.dims(),
                features.shape()
            ));
        }
        with_bias(features).matmul(&self.weights)
    }

    /// Argmax class per row, lowest id on ties.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(features)?))
    }
}

pub fn predict(classifier: &LinearClassifier, features: &Tensor) -> Result<Vec<usize>> {
    classifier.predict(features)
}

fn with_bias(x: &Tensor) -> Tensor {
    let (s, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[s, d + 1], |i| {
        let (r, c) = (i / (d + 1), i % (d + 1));
        if c == d {
            1.0
        } else {
            x.data()[r * d + c]
        }
    })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut y = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Label { label: l, num_classes });
        }
        y.data_mut()[i * num_classes + l] = 1.0;
    }
    Ok(y)
}

/// Cholesky factor `L` (lower, row-major) of a symmetric positive definite
/// matrix; pivots below `1e-12 * max diagonal` are reported as singular.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > tol) {
            return Err(Error::Singular);
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L' x = b` for every column of `b` (`n x m`, row-major) in place.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for col in 0..m {
        for i in 0..n {
            let mut s = b[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + col];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i];
        }
    }
}

/// Ridge least squares onto one-hot targets:
/// `W = (X'X + lambda I)^-1 X'Y` with a bias column appended to `X` and left
/// unpenalized.
pub fn fit_closed_form(features: &Tensor, labels: &[usize], num_classes: usize, lambda: f64) -> Result<LinearClassifier> {
    if features.rank() != 2 || features.shape()[0] != labels.len() || labels.is_empty() {
        return shape_err(format!(
            "features {:?} vs {} labels",
            features.shape(),
            labels.len()
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let x = with_bias(features);
    let y = one_hot(labels, num_classes)?;
    let xt = x.transpose()?;
    let mut a = xt.matmul(&x)?;
    let n = a.shape()[0];
    for i in 0..n - 1 {
        a.data_mut()[i * n + i] += lambda;
    }
    let rhs = xt.matmul(&y)?;
    let l = cholesky(a.data(), n)?;
    let mut w = rhs.data().to_vec();
    cholesky_solve(&l, n, &mut w, num_classes);
    let mut weights = Tensor::new(vec![n, num_classes], w)?;

    // one step of iterative refinement
    let r = rhs.sub(&a.matmul(&weights)?)?;
    let mut corr = r.into_data();
    cholesky_solve(&l, n, &mut corr, num_classes);
    weights.axpy(1.0, &Tensor::new(vec![n, num_classes], corr)?)?;

    let rnorm = rhs.norm();
    let residual = a.matmul(&weights)?.sub(&rhs)?.norm() / if rnorm > 0.0 { rnorm } else { 1.0 };
    if residual > 1e-8 {
        log::warn!("closed-form fit residual {residual:.3e} exceeds 1e-8");
    }
    Ok(LinearClassifier { weights, lambda, residual })
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Draws `pool_size` monomials: exponent vectors uniformly from the
/// enumeration (all-zero excluded), factor offsets uniformly in the disk of
/// radius `r_max`.
pub fn generate_candidates(pool_size: usize, k: usize, group_order: u32, r_max: f64, seed: u64) -> Result<Vec<Monomial>> {
    if k == 0 || group_order == 0 {
        return Err(Error::Config("monomial order and group order must be >= 1".into()));
    }
    let exps: Vec<Vec<u32>> = enumerate_monomial_exponents(k, group_order)
        .into_iter()
        .filter(|e| e.iter().any(|&v| v > 0))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pool_size)
        .map(|_| {
            let e = &exps[rng.random_range(0..exps.len())];
            let factors = e
                .iter()
                .map(|&b| {
                    let rad = r_max * rng.random::<f64>().sqrt();
                    let ang = 2.0 * PI * rng.random::<f64>();
                    Factor { du: rad * ang.cos(), dv: rad * ang.sin(), b: b as f64 }
                })
                .collect();
            Monomial::new(factors)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionConfig {
    pub max_monomials: usize,
    pub patience: usize,
    pub lambda: f64,
    pub num_angles: usize,
    pub pool_size: usize,
    pub order: usize,
    pub group_order: u32,
    pub r_max: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            max_monomials: crate::iil::DEFAULT_NUM_MONOMIALS,
            patience: DEFAULT_PATIENCE,
            lambda: DEFAULT_LAMBDA,
            num_angles: crate::iil::DEFAULT_NUM_ANGLES,
            pool_size: 40,
            order: 2,
            group_order: 4,
            r_max: crate::iil::DEFAULT_R_MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MonomialCap,
    Stagnation,
    PoolExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionIteration {
    pub iteration: usize,
    /// Candidate ids scored in this iteration.
    pub candidates: Vec<usize>,
    /// Highest-ranked candidate of the iteration.
    pub best_candidate: usize,
    pub val_accuracy: f64,
    pub train_lse: f64,
    pub accepted: bool,
    /// Running maximum of validation accuracy after this iteration.
    pub best_accuracy: f64,
    pub stagnation_counter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionTrace {
    pub pool: Vec<Monomial>,
    pub iterations: Vec<SelectionIteration>,
    /// Chosen candidate ids in order of acceptance.
    pub chosen: Vec<usize>,
    pub stagnation_counter: usize,
    pub best_accuracy: f64,
    pub stop_reason: StopReason,
}

impl SelectionTrace {
    pub fn selected(&self) -> Vec<Monomial> {
        self.chosen.iter().map(|&i| self.pool[i].clone()).collect()
    }
}

/// Invariant features of every candidate, computed once.
pub struct CandidateFeatures {
    /// `[candidate]` -> `S x C` row-major.
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    channels: usize,
    n_train: usize,
    n_val: usize,
}

impl CandidateFeatures {
    pub fn compute(pool: &[Monomial], train: &Tensor, val: &Tensor, num_angles: usize) -> Result<Self> {
        if train.rank() != 4 || val.rank() != 4 || train.shape()[3] != val.shape()[3] {
            return shape_err("train/val features must be B x H x W x C with equal channels");
        }
        let channels = train.shape()[3];
        let sampling = RotationGroupSampling::new(num_angles)?;
        let shift = ShiftStats { x_min: vec![0.0; channels], epsilon: crate::monomial::DEFAULT_EPSILON };
        let mut tr = Vec::with_capacity(pool.len());
        let mut va = Vec::with_capacity(pool.len());
        for m in pool {
            let state = IILayerState::new(vec![m.clone()], shift.clone(), sampling)?;
            tr.push(ii_forward(train, &state)?.into_data());
            va.push(ii_forward(val, &state)?.into_data());
        }
        Ok(Self { train: tr, val: va, channels, n_train: train.shape()[0], n_val: val.shape()[0] })
    }

    fn assemble(&self, ids: &[usize], train: bool) -> Tensor {
        let (src, n) = if train { (&self.train, self.n_train) } else { (&self.val, self.n_val) };
        let (c, m) = (self.channels, ids.len());
        Tensor::from_fn(&[n, c * m], |i| {
            let (s, col) = (i / (c * m), i % (c * m));
            let (ch, k) = (col / m, col % m);
            src[ids[k]][s * c + ch]
        })
    }
}

/// Validation accuracy and training mean squared error of the closed-form
/// classifier on the features of `ids`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScore {
    pub val_accuracy: f64,
    pub train_lse: f64,
}

pub fn score_set(
    feats: &CandidateFeatures,
    ids: &[usize],
    train_labels: &[usize],
    val_labels: &[usize],
    num_classes: usize,
    lambda: f64,
) -> Result<SetScore> {
    let xtr = feats.assemble(ids, true);
    let xva = feats.assemble(ids, false);
    // column standardization from training statistics keeps the normal
    // equations well conditioned; it is an invertible affine map per column
    let norm = Standardize::fit(&xtr)?;
    let xtr = norm.forward(&xtr)?;
    let xva = norm.forward(&xva)?;
    let clf = fit_closed_form(&xtr, train_labels, num_classes, lambda)?;
    let fit = clf.scores(&xtr)?.sub(&one_hot(train_labels, num_classes)?)?;
    let train_lse = fit.data().iter().map(|v| v * v).sum::<f64>() / train_labels.len() as f64;
    let val_accuracy = accuracy(&clf.predict(&xva)?, val_labels);
    Ok(SetScore { val_accuracy, train_lse })
}

fn check_labels(train_labels: &[usize], val_labels: &[usize]) -> Result<usize> {
    if train_labels.is_empty() || val_labels.is_empty() {
        return Err(Error::Selection("train and validation sets must be nonempty".into()));
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        return Err(Error::Selection("training labels contain a single class".into()));
    }
    Ok(train_labels.iter().chain(val_labels).max().unwrap() + 1)
}

/// Draws the candidate pool from `config` and runs [`select_from_pool`].
pub fn select_monomials(
    train_feats: &Tensor,
    train_labels: &[usize],
    val_feats: &Tensor,
    val_labels: &[usize],
    config: &SelectionConfig,
) -> Result<(Vec<Monomial>, SelectionTrace)> {
    let pool = generate_candidates(config.pool_size, config.order, config.group_order, config.r_max, config.seed)?;
    select_from_pool(pool, train_feats, train_labels, val_feats, val_labels, config)
}

pub fn select_from_pool(
    pool: Vec<Monomial>,
    train_feats: &Tensor,
    train_labels: &[usize],
    val_feats: &Tensor,
    val_labels: &[usize],
    config: &SelectionConfig,
) -> Result<(Vec<Monomial>, SelectionTrace)> {
    if pool.is_empty() {
        return Err(Error::Selection("empty candidate pool".into()));
    }
    if config.max_monomials == 0 {
        return Err(Error::Config("monomial cap must be >= 1".into()));
    }
    let num_classes = check_labels(train_labels, val_labels)?;
    if train_feats.shape().first() != Some(&train_labels.len()) || val_feats.shape().first() != Some(&val_labels.len()) {
        return shape_err("feature batch sizes must match label counts");
    }
    let feats = CandidateFeatures::compute(&pool, train_feats, val_feats, config.num_angles)?;

    let mut chosen: Vec<usize> = Vec::new();
    let mut best_accuracy: Option<f64> = None;
    let mut counter = 0;
    let mut iterations = Vec::new();
    let stop_reason = loop {
        if chosen.len() >= config.max_monomials {
            break StopReason::MonomialCap;
        }
        if counter >= config.patience {
            break StopReason::Stagnation;
        }
        let candidates: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
        if candidates.is_empty() {
            break StopReason::PoolExhausted;
        }
        let mut best: Option<(usize, SetScore)> = None;
        let mut ids = chosen.clone();
        ids.push(0);
        for &cand in &candidates {
            *ids.last_mut().unwrap() = cand;
            let score = score_set(&feats, &ids, train_labels, val_labels, num_classes, config.lambda)?;
            let better = match &best {
                None => true,
                Some((_, b)) => {
                    score.val_accuracy > b.val_accuracy
                        || (score.val_accuracy == b.val_accuracy && score.train_lse < b.train_lse)
                }
            };
            if better {
                best = Some((cand, score));
            }
        }
        let (cand, score) = best.expect("nonempty candidate list");
        let accepted = best_accuracy.is_none_or(|b| score.val_accuracy > b);
        if accepted {
            chosen.push(cand);
            best_accuracy = Some(score.val_accuracy);
            counter = 0;
        } else {
            counter += 1;
        }
        iterations.push(SelectionIteration {
            iteration: iterations.len(),
            candidates,
            best_candidate: cand,
            val_accuracy: score.val_accuracy,
            train_lse: score.train_lse,
            accepted,
            best_accuracy: best_accuracy.unwrap_or(score.val_accuracy),
            stagnation_counter: counter,
        });
    };
    let trace = SelectionTrace {
        pool,
        iterations,
        chosen,
        stagnation_counter: counter,
        best_accuracy: best_accuracy.unwrap_or(0.0),
        stop_reason,
    };
    Ok((trace.selected(), trace))
}
