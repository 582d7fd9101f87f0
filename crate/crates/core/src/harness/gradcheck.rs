//! Central finite-difference checks of every analytic gradient.
//!
//! Each suite draws `cases` random configurations and compares analytic
//! gradient entries against `(L(x + h) - L(x - h)) / 2h`. The relative error
//! of one entry is `|a - n| / max(|a|, |n|, 1e-4 * max(1, max|a|))`, where
//! `max|a|` runs over the whole analytic gradient of the case; the floor
//! keeps entries that are zero up to rounding from dividing by ~0.
//!
//! The composed-network suite uses a five-point stencil and skips entries
//! whose stencil changes a ReLU sign or an orientation winner (the loss is
//! not differentiable there); a suite fails if more than 5% are skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    global_avg_pool, global_avg_pool_backward, orientation_maxpool, orientation_maxpool_backward, relu, relu_backward,
    softmax_xent, Backbone, BackboneConfig, DenseLayer, GroupConvLayer, LiftingConvLayer, Standardize,
};
use crate::error::Result;
use crate::iil::{ii_backward, ii_forward, IILayerState, RotationGroupSampling};
use crate::monomial::{apply_shift, apply_shift_grad, eval_monomial, grad_exponents, grad_values, Factor, Monomial, ShiftStats};
use crate::network::{Head, Network};
use crate::sampling::{bilinear_sample, bilinear_sample_grad, BoundaryPolicy, SampleCoord};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_CASES: usize = 100;
/// Step for layer checks.
pub const STEP: f64 = 1e-5;
/// Step for the scalar monomial checks.
pub const FINE_STEP: f64 = 1e-6;
/// Step of the five-point stencil used for the composed network: its loss
/// is curved enough that the two-point rule leaves truncation error near
/// `1e-5` at `h = 1e-5` and rounding error of the same size at `1e-6`.
pub const NETWORK_STEP: f64 = 1e-5;
/// Entries probed per parameter block and case in the larger suites.
const MAX_ENTRIES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub entries: usize,
    /// Entries whose stencil crossed a non-differentiable point.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = 1e-4 * scale.max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Default)]
struct Acc {
    entries: usize,
    skipped: usize,
    max_err: f64,
}

impl Acc {
    /// Probes `entries` of `x` (all if `None`) against `analytic`.
    fn probe(
        &mut self,
        x: &mut [f64],
        analytic: &[f64],
        entries: Option<Vec<usize>>,
        h: f64,
        loss: impl FnMut(&[f64]) -> f64,
    ) {
        let mut loss = loss;
        self.probe_stencil(x, analytic, entries, h, false, |v| Some(loss(v)))
    }

    /// Two-point `(f(h) - f(-h)) / 2h`, or with `five_point` the fourth-order
    /// `(-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)) / 12h`. A `None` from `loss`
    /// marks a stencil point off the smooth piece; the entry is skipped.
    fn probe_stencil(
        &mut self,
        x: &mut [f64],
        analytic: &[f64],
        entries: Option<Vec<usize>>,
        h: f64,
        five_point: bool,
        mut loss: impl FnMut(&[f64]) -> Option<f64>,
    ) {
        let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let idx = entries.unwrap_or_else(|| (0..x.len()).collect());
        for i in idx {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                loss(x)
            };
            let numeric = if five_point {
                [at(2.0 * h), at(h), at(-h), at(-2.0 * h)]
                    .into_iter()
                    .collect::<Option<Vec<f64>>>()
                    .map(|f| (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h))
            } else {
                at(h).zip(at(-h)).map(|(u, d)| (u - d) / (2.0 * h))
            };
            x[i] = orig;
            let Some(numeric) = numeric else {
                self.skipped += 1;
                continue;
            };
            let err = rel_error(analytic[i], numeric, scale);
            self.max_err = self.max_err.max(if err.is_nan() { f64::INFINITY } else { err });
            self.entries += 1;
        }
    }
}

fn some_entries(rng: &mut impl Rng, len: usize) -> Option<Vec<usize>> {
    if len <= MAX_ENTRIES {
        None
    } else {
        Some(sample(rng, len, MAX_ENTRIES).into_vec())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted(out: &Tensor, w: &Tensor) -> f64 {
    out.dot(w).expect("matching shapes")
}

type Suite = fn(&mut ChaCha8Rng, usize) -> Result<Acc>;

fn monomial_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = rng.random_range(1..=4);
    let x = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
    let b = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
    (x, b)
}

fn suite_monomial_values(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (mut x, b) = monomial_case(rng);
        let g = (0..x.len()).map(|j| grad_values(&x, &b, j)).collect::<Result<Vec<_>>>()?;
        acc.probe(&mut x, &g, None, FINE_STEP, |x| eval_monomial(x, &b).unwrap());
    }
    Ok(acc)
}

fn suite_monomial_exponents(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (x, mut b) = monomial_case(rng);
        let g = (0..x.len()).map(|j| grad_exponents(&x, &b, j)).collect::<Result<Vec<_>>>()?;
        acc.probe(&mut b, &g, None, FINE_STEP, |b| eval_monomial(&x, b).unwrap());
    }
    Ok(acc)
}

fn suite_shift(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let c = rng.random_range(1..=3);
        let shape = [rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=4), c];
        let x_min: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let stats = ShiftStats { x_min: x_min.clone(), epsilon: rng.random_range(1e-3..0.5) };
        // values on both sides of the floor, kept away from the kink
        let mut x = Tensor::from_fn(&shape, |i| {
            let kink = x_min[i % c] - 1.0 + stats.epsilon;
            let off: f64 = rng.random_range(0.01..2.0);
            if rng.random_bool(0.8) { kink + off } else { kink - off }
        });
        let w = uniform(rng, &shape, -1.0, 1.0);
        let g = apply_shift_grad(&w, &x, &stats)?;
        acc.probe(x.data_mut(), g.data(), None, STEP, |v| {
            let t = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
            weighted(&apply_shift(&t, &stats).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_bilinear(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut map = uniform(rng, &[h, w], 0.1, 2.0);
        let at = SampleCoord::new(rng.random_range(-1.5..h as f64 + 0.5), rng.random_range(-1.5..w as f64 + 0.5));
        let up = rng.random_range(-2.0..2.0);
        let mut g = vec![0.0; h * w];
        for ((r, c), v) in bilinear_sample_grad(&map, at, up)? {
            g[r * w + c] += v;
        }
        acc.probe(map.data_mut(), &g, None, STEP, |v| {
            let t = Tensor::new(vec![h, w], v.to_vec()).unwrap();
            up * bilinear_sample(&t, at, BoundaryPolicy::Clamp).unwrap()
        });
    }
    Ok(acc)
}

fn suite_lift(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (cin, cout, n) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=4));
        let k = [1, 3][rng.random_range(0..2)];
        let mut layer = LiftingConvLayer::random(rng, cin, cout, k, n)?;
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let hw = rng.random_range(k..=k + 3);
        let b = rng.random_range(1..=2);
        let x = uniform(rng, &[b, hw, hw, cin], -1.0, 1.0);
        let out = layer.forward(&x)?;
        let w = uniform(rng, out.shape(), -1.0, 1.0);
        let g = layer.backward(&x, &w)?;
        let e = some_entries(rng, x.len());
        acc.probe(x.clone().data_mut(), g.input.data(), e, STEP, |v| {
            let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            weighted(&layer.forward(&t).unwrap(), &w)
        });
        let e = some_entries(rng, layer.kernels.len());
        let mut kern = layer.kernels.clone();
        acc.probe(kern.data_mut(), g.kernels.data(), e, STEP, |v| {
            let mut l = layer.clone();
            l.kernels.data_mut().copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
        let mut bias = layer.bias.clone();
        acc.probe(&mut bias, &g.bias, None, STEP, |v| {
            let mut l = layer.clone();
            l.bias.copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_gconv(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (cin, cout, n) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=4));
        let k = [1, 3][rng.random_range(0..2)];
        let mut layer = GroupConvLayer::random(rng, cin, cout, k, n)?;
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let hw = rng.random_range(k..=k + 2);
        let b = rng.random_range(1..=2);
        let x = uniform(rng, &[b, n, hw, hw, cin], -1.0, 1.0);
        let out = layer.forward(&x)?;
        let w = uniform(rng, out.shape(), -1.0, 1.0);
        let g = layer.backward(&x, &w)?;
        let e = some_entries(rng, x.len());
        acc.probe(x.clone().data_mut(), g.input.data(), e, STEP, |v| {
            let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            weighted(&layer.forward(&t).unwrap(), &w)
        });
        let e = some_entries(rng, layer.kernels.len());
        let mut kern = layer.kernels.clone();
        acc.probe(kern.data_mut(), g.kernels.data(), e, STEP, |v| {
            let mut l = layer.clone();
            l.kernels.data_mut().copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
        let mut bias = layer.bias.clone();
        acc.probe(&mut bias, &g.bias, None, STEP, |v| {
            let mut l = layer.clone();
            l.bias.copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_relu(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=5)];
        // magnitudes >= 0.01 keep every entry away from the kink
        let mut x = Tensor::from_fn(&shape, |_| {
            let m: f64 = rng.random_range(0.01..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        });
        let w = uniform(rng, &shape, -1.0, 1.0);
        let g = relu_backward(&x, &w)?;
        acc.probe(x.data_mut(), g.data(), None, STEP, |v| {
            weighted(&relu(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap()), &w)
        });
    }
    Ok(acc)
}

fn suite_orientation_maxpool(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let n = rng.random_range(1..=4);
        let shape = [rng.random_range(1..=2), n, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2)];
        let len: usize = shape.iter().product();
        // distinct levels 0.1 apart so no perturbation changes the winner
        let mut levels: Vec<f64> = (0..len).map(|i| i as f64 * 0.1).collect();
        use rand::seq::SliceRandom;
        levels.shuffle(rng);
        let mut x = Tensor::new(shape.to_vec(), levels)?;
        let (out, arg) = orientation_maxpool(&x)?;
        let w = uniform(rng, out.shape(), -1.0, 1.0);
        let g = orientation_maxpool_backward(&w, &arg, &shape)?;
        acc.probe(x.data_mut(), g.data(), None, STEP, |v| {
            weighted(&orientation_maxpool(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap()).unwrap().0, &w)
        });
    }
    Ok(acc)
}

fn suite_avg_pool(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3)];
        let mut x = uniform(rng, &shape, -1.0, 1.0);
        let w = uniform(rng, &[shape[0], shape[3]], -1.0, 1.0);
        let g = global_avg_pool_backward(&w, &shape)?;
        acc.probe(x.data_mut(), g.data(), None, STEP, |v| {
            weighted(&global_avg_pool(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap()).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_dense(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (b, i, o) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=4));
        let mut layer = DenseLayer::random(rng, i, o);
        layer.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let x = uniform(rng, &[b, i], -1.0, 1.0);
        let w = uniform(rng, &[b, o], -1.0, 1.0);
        let g = layer.backward(&x, &w)?;
        acc.probe(x.clone().data_mut(), g.input.data(), None, STEP, |v| {
            weighted(&layer.forward(&Tensor::new(vec![b, i], v.to_vec()).unwrap()).unwrap(), &w)
        });
        acc.probe(layer.weights.clone().data_mut(), g.weights.data(), None, STEP, |v| {
            let mut l = layer.clone();
            l.weights.data_mut().copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
        acc.probe(&mut layer.bias.clone(), &g.bias, None, STEP, |v| {
            let mut l = layer.clone();
            l.bias.copy_from_slice(v);
            weighted(&l.forward(&x).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_softmax_xent(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let mut logits = uniform(rng, &[b, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let (_, g) = softmax_xent(&logits, &labels)?;
        acc.probe(logits.data_mut(), g.data(), None, STEP, |v| {
            softmax_xent(&Tensor::new(vec![b, c], v.to_vec()).unwrap(), &labels).unwrap().0
        });
    }
    Ok(acc)
}

fn suite_standardize(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (b, d) = (rng.random_range(2..=4), rng.random_range(1..=4));
        let norm = Standardize::fit(&uniform(rng, &[b + 2, d], -2.0, 2.0))?;
        let mut x = uniform(rng, &[b, d], -1.0, 1.0);
        let w = uniform(rng, &[b, d], -1.0, 1.0);
        let g = norm.backward(&w)?;
        acc.probe(x.data_mut(), g.data(), None, STEP, |v| {
            weighted(&norm.forward(&Tensor::new(vec![b, d], v.to_vec()).unwrap()).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn random_monomial(rng: &mut impl Rng, r: f64) -> Monomial {
    let k = rng.random_range(1..=3);
    let factors = (0..k)
        .map(|_| Factor { du: rng.random_range(-r..r), dv: rng.random_range(-r..r), b: rng.random_range(0.5..3.0) })
        .collect();
    Monomial::new(factors).expect("k >= 1")
}

fn random_ii_case(rng: &mut ChaCha8Rng) -> Result<(Tensor, IILayerState)> {
    let c = rng.random_range(1..=2);
    let shape = [rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=5), c];
    let x = uniform(rng, &shape, 0.3, 2.0);
    let monomials = (0..rng.random_range(1..=3)).map(|_| random_monomial(rng, 2.0)).collect();
    let shift = ShiftStats { x_min: vec![0.0; c], epsilon: 1e-3 };
    let state = IILayerState::new(monomials, shift, RotationGroupSampling::new(rng.random_range(1..=8))?)?;
    Ok((x, state))
}

fn suite_ii_features(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (x, state) = random_ii_case(rng)?;
        let w = uniform(rng, ii_forward(&x, &state)?.shape(), -1.0, 1.0);
        let (gx, _) = ii_backward(&x, &state, &w)?;
        let e = some_entries(rng, x.len());
        acc.probe(x.clone().data_mut(), gx.data(), e, STEP, |v| {
            weighted(&ii_forward(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &state).unwrap(), &w)
        });
    }
    Ok(acc)
}

fn suite_ii_exponents(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let (x, state) = random_ii_case(rng)?;
        let w = uniform(rng, ii_forward(&x, &state)?.shape(), -1.0, 1.0);
        let (_, ge) = ii_backward(&x, &state, &w)?;
        acc.probe(&mut state.exponents(), &ge.concat(), None, STEP, |v| {
            let mut s = state.clone();
            s.set_exponents(v).unwrap();
            weighted(&ii_forward(&x, &s).unwrap(), &w)
        });
    }
    Ok(acc)
}

/// A small invariant-head network; the shift statistics come from its own
/// features so the input shift is unclamped.
pub fn random_invariant_network(rng: &mut ChaCha8Rng, images: &Tensor, orientations: usize) -> Result<Network> {
    let cfg = BackboneConfig { in_channels: images.shape()[3], channels: vec![2, 2], kernel_size: 3, orientations };
    let mut backbone = Backbone::random(rng, &cfg)?;
    backbone.lift.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    for g in &mut backbone.gconvs {
        g.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    let feats = backbone.features(images)?;
    let mut shift = crate::monomial::fit_shift(&feats, 1e-3)?;
    shift.x_min.iter_mut().for_each(|m| *m -= 0.2);
    let monomials = (0..2).map(|_| random_monomial(rng, 1.5)).collect();
    let iil = IILayerState::new(monomials, shift, RotationGroupSampling::new(rng.random_range(1..=8))?)?;
    let d = iil.channels() * iil.num_monomials();
    let ii = ii_forward(&apply_shift(&feats, &iil.shift)?, &iil)?;
    let norm = Standardize::fit(&ii.reshape(&[images.shape()[0], d])?)?;
    let dense = DenseLayer::random(rng, d, 3);
    Ok(Network { backbone, head: Head::Invariant { iil, norm, dense } })
}

fn suite_network(rng: &mut ChaCha8Rng, cases: usize) -> Result<Acc> {
    let mut acc = Acc::default();
    for _ in 0..cases {
        let hw = rng.random_range(5..=7);
        let images = uniform(rng, &[3, hw, hw, 1], 0.0, 1.0);
        let labels = vec![0, 1, 2];
        let n = rng.random_range(1..=4);
        let net = random_invariant_network(rng, &images, n)?;
        let (_, _, grads) = net.loss_and_grads(&images, &labels)?;
        let (_, cache) = net.backbone.forward(&images)?;
        for (block, g) in grads.iter().enumerate() {
            let mut values = net.params()[block].2.clone();
            let e = some_entries(rng, values.len());
            acc.probe_stencil(&mut values, g, e, NETWORK_STEP, true, |v| {
                let mut n = net.clone();
                n.visit_params_mut(|i, p| {
                    if i == block {
                        p.copy_from_slice(v);
                    }
                })
                .unwrap();
                let (feats, c) = n.backbone.forward(&images).unwrap();
                if !c.same_pattern(&cache) {
                    return None;
                }
                let logits = n.logits_from_features(feats).unwrap();
                Some(softmax_xent(&logits, &labels).unwrap().0)
            });
        }
    }
    Ok(acc)
}

const SUITES: &[(&str, Suite)] = &[
    ("monomial.values", suite_monomial_values),
    ("monomial.exponents", suite_monomial_exponents),
    ("shift", suite_shift),
    ("bilinear", suite_bilinear),
    ("lift", suite_lift),
    ("gconv", suite_gconv),
    ("relu", suite_relu),
    ("orientation_maxpool", suite_orientation_maxpool),
    ("global_avg_pool", suite_avg_pool),
    ("dense", suite_dense),
    ("softmax_xent", suite_softmax_xent),
    ("standardize", suite_standardize),
    ("ii.features", suite_ii_features),
    ("ii.exponents", suite_ii_exponents),
    ("network", suite_network),
];

/// Names of all suites, in execution order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.0).collect()
}

pub fn run_suite(name: &str, cases: usize, seed: u64) -> Result<Option<SuiteReport>> {
    let Some((name, suite)) = SUITES.iter().find(|s| s.0 == name) else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acc = suite(&mut rng, cases)?;
    Ok(Some(SuiteReport {
        name: name.to_string(),
        cases,
        entries: acc.entries,
        skipped: acc.skipped,
        max_rel_error: acc.max_err,
        tolerance: TOLERANCE,
        passed: acc.max_err < TOLERANCE && acc.skipped * 20 <= acc.entries + acc.skipped,
    }))
}

pub fn run_all(cases: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, (name, _))| run_suite(name, cases, seed.wrapping_add(i as u64)).map(|r| r.expect("known suite")))
        .collect()
}
