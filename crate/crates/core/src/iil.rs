//! The invariant integration layer: a per-channel group average of monomials
//! over pixel translations and a discretized set of rotations.
//!
//! For each sample `n`, channel `c` and monomial `m`
//!
//! ```text
//! out[n, c, m] = 1 / (N_phi H W) * sum_{v, u} sum_k prod_i x_c(p_i(v, u, phi_k)) ^ b_i
//! ```
//!
//! where `p_i` is the anchor `(v, u)` displaced by factor `i`'s offset
//! rotated by `phi_k = 2 pi k / N_phi`. Samples are bilinear with edge clamp.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::monomial::{Monomial, ShiftStats};
use crate::sampling::{exact_sin_cos, extract_plane, rotate_images, rotate_offset, BilinearTaps};
use crate::tensor::Tensor;

pub const DEFAULT_NUM_ANGLES: usize = 8;
pub const DEFAULT_NUM_MONOMIALS: usize = 5;
pub const DEFAULT_R_MAX: f64 = 3.0;

/// Uniform discretization of the rotation angle, `phi_k = 2 pi k / N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationGroupSampling {
    pub num_angles: usize,
}

impl RotationGroupSampling {
    pub fn new(num_angles: usize) -> Result<Self> {
        if num_angles == 0 {
            return Err(Error::Config("num_angles must be >= 1".into()));
        }
        Ok(Self { num_angles })
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.num_angles)
            .map(|k| 2.0 * PI * k as f64 / self.num_angles as f64)
            .collect()
    }
}

/// Everything the layer needs at inference: monomials, frozen shift
/// statistics, and the angle discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IILayerState {
    pub monomials: Vec<Monomial>,
    #[serde(flatten)]
    pub shift: ShiftStats,
    #[serde(flatten)]
    pub sampling: RotationGroupSampling,
}

impl IILayerState {
    pub fn new(monomials: Vec<Monomial>, shift: ShiftStats, sampling: RotationGroupSampling) -> Result<Self> {
        if monomials.is_empty() {
            return Err(Error::Config("invariant integration needs at least one monomial".into()));
        }
        if monomials.iter().any(|m| m.factors.is_empty()) {
            return Err(Error::Config("monomial without factors".into()));
        }
        Ok(Self { monomials, shift, sampling })
    }

    pub fn num_monomials(&self) -> usize {
        self.monomials.len()
    }

    pub fn channels(&self) -> usize {
        self.shift.channels()
    }

    /// Flat exponent vector, monomial-major.
    pub fn exponents(&self) -> Vec<f64> {
        self.monomials.iter().flat_map(|m| m.factors.iter().map(|f| f.b)).collect()
    }

    pub fn set_exponents(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.monomials.iter().map(|m| m.order()).sum();
        if flat.len() != n {
            return shape_err(format!("expected {n} exponents, got {}", flat.len()));
        }
        let mut it = flat.iter();
        for m in &mut self.monomials {
            for f in &mut m.factors {
                f.b = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(text)?;
        Self::new(state.monomials, state.shift, state.sampling)
    }
}

/// Precomputed bilinear taps of every (monomial, angle, factor, anchor)
/// for one map size.
struct Geometry {
    h: usize,
    w: usize,
    /// `taps[m][(k * hw + anchor) * K_m + i]`
    taps: Vec<Vec<BilinearTaps>>,
    exponents: Vec<Vec<f64>>,
    num_angles: usize,
}

impl Geometry {
    fn new(state: &IILayerState, h: usize, w: usize) -> Self {
        let angles = state.sampling.angles();
        let hw = h * w;
        let mut taps = Vec::with_capacity(state.monomials.len());
        for m in &state.monomials {
            let k_order = m.order();
            let mut t = Vec::with_capacity(angles.len() * hw * k_order);
            for &phi in &angles {
                let (s, c) = exact_sin_cos(phi);
                let offsets: Vec<(f64, f64)> = m
                    .factors
                    .iter()
                    .map(|f| rotate_offset(f.dv, f.du, s, c))
                    .collect();
                for v in 0..h {
                    for u in 0..w {
                        for &(dr, dc) in &offsets {
                            t.push(BilinearTaps::clamped(h, w, v as f64 + dr, u as f64 + dc));
                        }
                    }
                }
            }
            taps.push(t);
        }
        Self {
            h,
            w,
            taps,
            exponents: state.monomials.iter().map(|m| m.exponents()).collect(),
            num_angles: angles.len(),
        }
    }

    fn norm(&self) -> f64 {
        1.0 / (self.num_angles * self.h * self.w) as f64
    }

    fn forward_plane(&self, plane: &[f64], out: &mut [f64]) {
        let norm = self.norm();
        for (m, (taps, exps)) in self.taps.iter().zip(&self.exponents).enumerate() {
            let mut acc = 0.0;
            for term in taps.chunks_exact(exps.len()) {
                let mut log_t = 0.0;
                for (tap, b) in term.iter().zip(exps) {
                    log_t += b * tap.sample(plane).ln();
                }
                acc += log_t.exp();
            }
            out[m] = acc * norm;
        }
    }

    /// Accumulates into `grad_plane` and `grad_exps` for one plane.
    fn backward_plane(&self, plane: &[f64], upstream: &[f64], grad_plane: &mut [f64], grad_exps: &mut [Vec<f64>]) {
        let norm = self.norm();
        let kmax = self.exponents.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut samples = vec![0.0f64; kmax];
        let mut logs = vec![0.0f64; kmax];
        for (m, (taps, exps)) in self.taps.iter().zip(&self.exponents).enumerate() {
            let g = upstream[m] * norm;
            if g == 0.0 {
                continue;
            }
            let k = exps.len();
            let ge = &mut grad_exps[m];
            for term in taps.chunks_exact(k) {
                let mut log_t = 0.0;
                for i in 0..k {
                    let s = term[i].sample(plane);
                    samples[i] = s;
                    logs[i] = s.ln();
                    log_t += exps[i] * logs[i];
                }
                let t = log_t.exp() * g;
                for i in 0..k {
                    ge[i] += logs[i] * t;
                    term[i].scatter(grad_plane, exps[i] * t / samples[i]);
                }
            }
        }
    }
}

fn check_features(features: &Tensor, state: &IILayerState) -> Result<[usize; 4]> {
    if features.rank() != 4 {
        return shape_err(format!("expected B x H x W x C, got {:?}", features.shape()));
    }
    let s = features.shape();
    let dims = [s[0], s[1], s[2], s[3]];
    if dims[3] != state.channels() {
        return shape_err(format!(
            "features have {} channels, layer expects {}",
            dims[3],
            state.channels()
        ));
    }
    if dims[1] == 0 || dims[2] == 0 {
        return shape_err("empty feature map");
    }
    if let Some(&value) = features.data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Positivity { value });
    }
    Ok(dims)
}

/// Group average of every monomial over every channel; output is `B x C x M`.
/// `features` must already be shifted.
pub fn ii_forward(features: &Tensor, state: &IILayerState) -> Result<Tensor> {
    let [b, h, w, c] = check_features(features, state)?;
    let geo = Geometry::new(state, h, w);
    let m = state.num_monomials();
    let mut out = Tensor::zeros(&[b, c, m]);
    let mut plane = vec![0.0; h * w];
    for n in 0..b {
        for ch in 0..c {
            extract_plane(features.data(), n, ch, h, w, c, &mut plane);
            let o = (n * c + ch) * m;
            geo.forward_plane(&plane, &mut out.data_mut()[o..o + m]);
        }
    }
    Ok(out)
}

/// Gradients of `sum(upstream * ii_forward(features))` with respect to the
/// features (`B x H x W x C`) and to each monomial's exponents.
pub fn ii_backward(features: &Tensor, state: &IILayerState, upstream: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let [b, h, w, c] = check_features(features, state)?;
    let m = state.num_monomials();
    if upstream.shape() != [b, c, m] {
        return shape_err(format!("upstream {:?}, expected {:?}", upstream.shape(), [b, c, m]));
    }
    let geo = Geometry::new(state, h, w);
    let mut grad = Tensor::zeros(features.shape());
    let mut grad_exps: Vec<Vec<f64>> = state.monomials.iter().map(|mo| vec![0.0; mo.order()]).collect();
    let mut plane = vec![0.0; h * w];
    let mut gplane = vec![0.0; h * w];
    for n in 0..b {
        for ch in 0..c {
            extract_plane(features.data(), n, ch, h, w, c, &mut plane);
            gplane.iter_mut().for_each(|g| *g = 0.0);
            let o = (n * c + ch) * m;
            geo.backward_plane(&plane, &upstream.data()[o..o + m], &mut gplane, &mut grad_exps);
            crate::sampling::accumulate_plane(grad.data_mut(), n, ch, h, w, c, &gplane);
        }
    }
    Ok((grad, grad_exps))
}

fn relative_change(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?.norm();
    let base = a.norm();
    Ok(if base == 0.0 { diff } else { diff / base })
}

/// For each angle, rotates every feature plane about its center (bilinear,
/// clamp) and returns `|out(rot x) - out(x)| / |out(x)|`.
pub fn ii_invariance_error(features: &Tensor, state: &IILayerState, test_angles: &[f64]) -> Result<Vec<f64>> {
    let base = ii_forward(features, state)?;
    test_angles
        .iter()
        .map(|&theta| {
            let rotated = rotate_images(features, theta)?;
            relative_change(&base, &ii_forward(&rotated, state)?)
        })
        .collect()
}

/// Global spatial max over each `(sample, channel)`, shape `B x C`.
pub fn spatial_max_pool(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 4 {
        return shape_err(format!("expected B x H x W x C, got {:?}", features.shape()));
    }
    let s = features.shape();
    let flat = features.clone().reshape(&[s[0], s[1] * s[2], s[3]])?;
    Ok(flat.max_axis(1)?.0)
}

/// The same relative-change metric as [`ii_invariance_error`], computed on
/// spatially max-pooled features.
pub fn max_pool_invariance_error(features: &Tensor, test_angles: &[f64]) -> Result<Vec<f64>> {
    let base = spatial_max_pool(features)?;
    test_angles
        .iter()
        .map(|&theta| relative_change(&base, &spatial_max_pool(&rotate_images(features, theta)?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monomial::{grad_exponents, grad_values, Factor};
    use crate::sampling::rot90_images;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(monomials: Vec<Monomial>, channels: usize, angles: usize) -> IILayerState {
        IILayerState::new(
            monomials,
            ShiftStats { x_min: vec![0.0; channels], epsilon: 1e-3 },
            RotationGroupSampling::new(angles).unwrap(),
        )
        .unwrap()
    }

    fn mono(f: &[(f64, f64, f64)]) -> Monomial {
        Monomial::new(f.iter().map(|&(du, dv, b)| Factor { du, dv, b }).collect()).unwrap()
    }

    fn random_features(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        Tensor::from_fn(&shape, |_| rng.random_range(0.5..2.0))
    }

    #[test]
    fn angles_are_uniform() {
        let a = RotationGroupSampling::new(4).unwrap().angles();
        assert_eq!(a, vec![0.0, PI / 2.0, PI, 1.5 * PI]);
        assert!(RotationGroupSampling::new(0).is_err());
    }

    #[test]
    fn constant_map_gives_power_of_constant() {
        let st = state(vec![mono(&[(1.0, 0.5, 2.0), (-2.0, 1.3, 1.5)])], 1, 8);
        let x = Tensor::filled(&[1, 5, 5, 1], 1.7);
        let out = ii_forward(&x, &st).unwrap();
        let want = 1.7f64.powf(3.5);
        assert!((out.data()[0] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn radially_symmetric_single_factor() {
        // 1x1 map: every sample clamps to the single pixel regardless of angle.
        let st8 = state(vec![mono(&[(1.0, 2.0, 1.0)])], 1, 8);
        let st1 = state(vec![mono(&[(1.0, 2.0, 1.0)])], 1, 1);
        let x = Tensor::filled(&[1, 1, 1, 1], 2.5);
        assert_eq!(ii_forward(&x, &st8).unwrap().data()[0], ii_forward(&x, &st1).unwrap().data()[0]);
        // 5x5 radial map, factor at the anchor: angle independent.
        let x = Tensor::from_fn(&[1, 5, 5, 1], |p| {
            let (r, c) = ((p / 5) as f64 - 2.0, (p % 5) as f64 - 2.0);
            1.0 + (r * r + c * c).sqrt()
        });
        let st8 = state(vec![mono(&[(0.0, 0.0, 2.0)])], 1, 8);
        let st1 = state(vec![mono(&[(0.0, 0.0, 2.0)])], 1, 1);
        let a = ii_forward(&x, &st8).unwrap().data()[0];
        let b = ii_forward(&x, &st1).unwrap().data()[0];
        assert!((a - b).abs() < 1e-12 * b);
    }

    #[test]
    fn rejects_unshifted_and_mismatched_input() {
        let st = state(vec![mono(&[(0.0, 0.0, 1.0)])], 1, 4);
        let mut x = Tensor::ones(&[1, 3, 3, 1]);
        x.data_mut()[4] = 0.0;
        assert!(matches!(ii_forward(&x, &st), Err(Error::Positivity { .. })));
        assert!(ii_forward(&Tensor::ones(&[1, 3, 3, 2]), &st).is_err());
        assert!(ii_backward(&Tensor::ones(&[1, 3, 3, 1]), &st, &Tensor::ones(&[1, 2, 1])).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = state(vec![mono(&[(1.0, 0.0, 2.0), (0.0, 1.0, 1.0)])], 2, 4);
        let x = random_features(&mut rng, [2, 4, 4, 2]);
        let (g, ge) = ii_backward(&x, &st, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(ge.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_reduces_to_monomial_gradients() {
        let st = state(vec![mono(&[(0.0, 0.0, 2.5)])], 1, 4);
        let x = Tensor::filled(&[1, 1, 1, 1], 1.8);
        let (g, ge) = ii_backward(&x, &st, &Tensor::ones(&[1, 1, 1])).unwrap();
        let gv = grad_values(&[1.8], &[2.5], 0).unwrap();
        let gb = grad_exponents(&[1.8], &[2.5], 0).unwrap();
        assert!((g.data()[0] - gv).abs() < 1e-12 * gv);
        assert!((ge[0][0] - gb).abs() < 1e-12 * gb);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let st = state(
            vec![
                mono(&[(1.3, -0.4, 1.0), (-0.7, 1.9, 2.0)]),
                mono(&[(0.0, 2.2, 1.5), (0.6, 0.6, 0.5)]),
            ],
            1,
            4,
        );
        let x = random_features(&mut rng, [1, 5, 5, 1]);
        let up = Tensor::from_fn(&[1, 1, 2], |_| rng.random_range(-1.0..1.0));
        let loss = |x: &Tensor, st: &IILayerState| ii_forward(x, st).unwrap().dot(&up).unwrap();
        let (g, ge) = ii_backward(&x, &st, &up).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut q = x.clone();
            p.data_mut()[i] += h;
            q.data_mut()[i] -= h;
            let num = (loss(&p, &st) - loss(&q, &st)) / (2.0 * h);
            assert!((num - g.data()[i]).abs() <= 1e-5 * num.abs().max(1e-4), "{i}: {num} vs {}", g.data()[i]);
        }
        let flat: Vec<f64> = ge.concat();
        let base = st.exponents();
        for j in 0..base.len() {
            let mut sp = st.clone();
            let mut sq = st.clone();
            let mut e = base.clone();
            e[j] += h;
            sp.set_exponents(&e).unwrap();
            e[j] -= 2.0 * h;
            sq.set_exponents(&e).unwrap();
            let num = (loss(&x, &sp) - loss(&x, &sq)) / (2.0 * h);
            assert!((num - flat[j]).abs() <= 1e-5 * num.abs().max(1e-4));
        }
    }

    #[test]
    fn batch_permutation_and_channel_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = state(vec![mono(&[(1.0, 1.0, 1.0), (-1.5, 0.0, 2.0)])], 3, 8);
        let x = random_features(&mut rng, [2, 5, 5, 3]);
        let out = ii_forward(&x, &st).unwrap();
        // swap the two samples
        let half = x.len() / 2;
        let mut swapped = x.data()[half..].to_vec();
        swapped.extend_from_slice(&x.data()[..half]);
        let xs = Tensor::new(x.shape().to_vec(), swapped).unwrap();
        let outs = ii_forward(&xs, &st).unwrap();
        assert_eq!(&out.data()[..3], &outs.data()[3..]);
        assert_eq!(&out.data()[3..], &outs.data()[..3]);
        // replace channel 2 with a constant; channels 0 and 1 unchanged
        let mut xc = x.clone();
        for (i, v) in xc.data_mut().iter_mut().enumerate() {
            if i % 3 == 2 {
                *v = 1.0;
            }
        }
        let outc = ii_forward(&xc, &st).unwrap();
        for n in 0..2 {
            for ch in 0..2 {
                assert_eq!(out.get(&[n, ch, 0]).unwrap(), outc.get(&[n, ch, 0]).unwrap());
            }
        }
    }

    #[test]
    fn exact_quarter_turn_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let st = state(
                vec![
                    mono(&[(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 1.0), (0.3, -1.1, 2.0)]),
                    mono(&[(0.0, 0.0, 1.0), (2.5, 0.5, 1.0)]),
                ],
                2,
                8,
            );
            let x = random_features(&mut rng, [1, 7, 7, 2]);
            let base = ii_forward(&x, &st).unwrap();
            for t in 1..4 {
                let r = ii_forward(&rot90_images(&x, t).unwrap(), &st).unwrap();
                assert!(relative_change(&base, &r).unwrap() < 1e-9);
            }
            let errs = ii_invariance_error(&x, &st, &[0.0, PI / 2.0]).unwrap();
            assert_eq!(errs[0], 0.0);
            assert!(errs[1] < 1e-9);
        }
    }

    #[test]
    fn translation_of_interior_support() {
        // background 1 with a blob at least r_max away from every edge
        let st = state(vec![mono(&[(1.5, 0.0, 1.0), (0.0, -1.0, 2.0)])], 1, 8);
        let blob = |r0: usize, c0: usize| {
            Tensor::from_fn(&[1, 15, 15, 1], move |p| {
                let (r, c) = (p / 15, p % 15);
                if (r0..r0 + 3).contains(&r) && (c0..c0 + 2).contains(&c) {
                    2.0 + ((r * 3 + c) % 4) as f64
                } else {
                    1.0
                }
            })
        };
        let a = ii_forward(&blob(4, 5), &st).unwrap();
        let b = ii_forward(&blob(6, 7), &st).unwrap();
        assert!(relative_change(&a, &b).unwrap() < 1e-9);
    }

    #[test]
    fn state_json_roundtrip() {
        let st = state(vec![mono(&[(1.0, 2.0, 3.0)])], 2, 8);
        let s = st.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["num_angles"], 8);
        assert_eq!(v["epsilon"], 1e-3);
        assert_eq!(v["x_min"].as_array().unwrap().len(), 2);
        assert_eq!(v["monomials"][0]["factors"][0]["dv"], 2.0);
        assert_eq!(IILayerState::from_json(&s).unwrap(), st);
    }
}
