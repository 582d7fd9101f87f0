//! Bilinear sampling of planar maps, its gradient with respect to the map,
//! and the rotation helpers built on it.
//!
//! Coordinates are `(row, col)`; row is the `v` axis and col the `u` axis.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCoord {
    pub row: f64,
    pub col: f64,
}

impl SampleCoord {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

/// How samples outside the map rectangle are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoundaryPolicy {
    /// Replicate edge pixels.
    #[default]
    Clamp,
}

/// The four flat neighbor offsets and blend weights of one bilinear sample.
/// Weights are nonnegative and sum to one; neighbors may repeat at edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

impl BilinearTaps {
    /// Taps for a `height x width` row-major plane under the clamp policy.
    #[inline]
    pub fn clamped(height: usize, width: usize, row: f64, col: f64) -> Self {
        let (r0, r1, fr) = axis_taps(height, row);
        let (c0, c1, fc) = axis_taps(width, col);
        let (gr, gc) = (1.0 - fr, 1.0 - fc);
        Self {
            idx: [r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1],
            w: [gr * gc, gr * fc, fr * gc, fr * fc],
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        self.w[0] * plane[self.idx[0]]
            + self.w[1] * plane[self.idx[1]]
            + self.w[2] * plane[self.idx[2]]
            + self.w[3] * plane[self.idx[3]]
    }

    #[inline]
    pub fn scatter(&self, grad: &mut [f64], upstream: f64) {
        for k in 0..4 {
            grad[self.idx[k]] += self.w[k] * upstream;
        }
    }
}

#[inline]
fn axis_taps(extent: usize, x: f64) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let x = x.clamp(0.0, max);
    let lo = x.floor();
    let f = x - lo;
    let lo = lo as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, f)
}

/// Taps for sampling with zeros outside the rectangle (used for kernel
/// rotation, where the kernel support ends at its border).
pub(crate) fn zero_padded_taps(height: usize, width: usize, row: f64, col: f64) -> Vec<(usize, f64)> {
    let r0 = row.floor();
    let c0 = col.floor();
    let (fr, fc) = (row - r0, col - c0);
    let mut out = Vec::with_capacity(4);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let w = wr * wc;
            let (r, c) = (r0 + dr, c0 + dc);
            if w != 0.0 && r >= 0.0 && c >= 0.0 && r < height as f64 && c < width as f64 {
                out.push((r as usize * width + c as usize, w));
            }
        }
    }
    out
}

fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    if map.rank() != 2 {
        return shape_err(format!("expected a 2-D map, got shape {:?}", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if h == 0 || w == 0 {
        return shape_err("empty map");
    }
    Ok((h, w))
}

fn check_coord(at: SampleCoord) -> Result<()> {
    if !at.row.is_finite() || !at.col.is_finite() {
        return Err(Error::Shape(format!("non-finite sample coordinate {at:?}")));
    }
    Ok(())
}

/// Bilinear blend of the four grid neighbors of `at`.
pub fn bilinear_sample(map: &Tensor, at: SampleCoord, boundary: BoundaryPolicy) -> Result<f64> {
    let (h, w) = plane_dims(map)?;
    check_coord(at)?;
    match boundary {
        BoundaryPolicy::Clamp => Ok(BilinearTaps::clamped(h, w, at.row, at.col).sample(map.data())),
    }
}

/// Gradient of [`bilinear_sample`] with respect to the map, as merged
/// `((row, col), weight * upstream)` entries with zero entries dropped.
pub fn bilinear_sample_grad(
    map: &Tensor,
    at: SampleCoord,
    upstream: f64,
) -> Result<Vec<((usize, usize), f64)>> {
    let (h, w) = plane_dims(map)?;
    check_coord(at)?;
    let taps = BilinearTaps::clamped(h, w, at.row, at.col);
    let mut out: Vec<((usize, usize), f64)> = Vec::with_capacity(4);
    for k in 0..4 {
        if taps.w[k] == 0.0 {
            continue;
        }
        let pos = (taps.idx[k] / w, taps.idx[k] % w);
        match out.iter_mut().find(|(p, _)| *p == pos) {
            Some((_, g)) => *g += taps.w[k] * upstream,
            None => out.push((pos, taps.w[k] * upstream)),
        }
    }
    Ok(out)
}

/// `(sin, cos)` with values within 1e-12 of 0 or +-1 snapped, so that
/// multiples of 90 degrees rotate grid points onto grid points exactly.
pub fn exact_sin_cos(angle: f64) -> (f64, f64) {
    let snap = |x: f64| {
        for t in [-1.0, 0.0, 1.0] {
            if (x - t).abs() < 1e-12 {
                return t;
            }
        }
        x
    };
    let (s, c) = angle.sin_cos();
    (snap(s), snap(c))
}

/// Rotates a `(row, col)` displacement by `angle`. A quarter turn maps
/// `(dr, dc)` to `(-dc, dr)`.
#[inline]
pub fn rotate_offset(dr: f64, dc: f64, sin: f64, cos: f64) -> (f64, f64) {
    (dr * cos - dc * sin, dr * sin + dc * cos)
}

/// Rotates a `height x width` plane by `angle` about its center with
/// bilinear resampling under the clamp policy. A quarter turn on a square
/// plane agrees exactly with [`rot90_plane`].
pub fn rotate_plane(plane: &[f64], height: usize, width: usize, angle: f64) -> Vec<f64> {
    let (s, c) = exact_sin_cos(-angle);
    let cr = (height as f64 - 1.0) / 2.0;
    let cc = (width as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; height * width];
    for i in 0..height {
        for j in 0..width {
            let (dr, dc) = rotate_offset(i as f64 - cr, j as f64 - cc, s, c);
            out[i * width + j] = BilinearTaps::clamped(height, width, cr + dr, cc + dc).sample(plane);
        }
    }
    out
}

/// Exact quarter-turn rotation of a plane. Output has shape `width x height`
/// and `out[i][j] = in[j][width - 1 - i]`.
pub fn rot90_plane(plane: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for i in 0..width {
        for j in 0..height {
            out[i * height + j] = plane[j * width + (width - 1 - i)];
        }
    }
    out
}

/// Applies [`rot90_plane`] `times` times to every `(batch, channel)` plane
/// of a `B x H x W x C` tensor.
pub fn rot90_images(images: &Tensor, times: usize) -> Result<Tensor> {
    map_planes(images, |plane, h, w| {
        let mut p = plane.to_vec();
        let (mut h, mut w) = (h, w);
        for _ in 0..times % 4 {
            p = rot90_plane(&p, h, w);
            std::mem::swap(&mut h, &mut w);
        }
        (p, h, w)
    })
}

/// Rotates every `(batch, channel)` plane of a `B x H x W x C` tensor by `angle`.
pub fn rotate_images(images: &Tensor, angle: f64) -> Result<Tensor> {
    map_planes(images, |plane, h, w| (rotate_plane(plane, h, w, angle), h, w))
}

pub(crate) fn map_planes(
    images: &Tensor,
    f: impl Fn(&[f64], usize, usize) -> (Vec<f64>, usize, usize),
) -> Result<Tensor> {
    if images.rank() != 4 {
        return shape_err(format!("expected B x H x W x C, got {:?}", images.shape()));
    }
    let [b, h, w, c] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    let mut out: Option<(Vec<f64>, usize, usize)> = None;
    let mut plane = vec![0.0; h * w];
    for n in 0..b {
        for ch in 0..c {
            extract_plane(images.data(), n, ch, h, w, c, &mut plane);
            let (p, oh, ow) = f(&plane, h, w);
            let buf = out.get_or_insert_with(|| (vec![0.0; b * oh * ow * c], oh, ow));
            insert_plane(&mut buf.0, n, ch, oh, ow, c, &p);
        }
    }
    match out {
        Some((data, oh, ow)) => Tensor::new(vec![b, oh, ow, c], data),
        None => Ok(images.clone()),
    }
}

/// Copies plane `(n, ch)` of a channel-last `B x H x W x C` buffer.
#[inline]
pub(crate) fn extract_plane(data: &[f64], n: usize, ch: usize, h: usize, w: usize, c: usize, plane: &mut [f64]) {
    let base = n * h * w * c;
    for (p, v) in plane.iter_mut().enumerate() {
        *v = data[base + p * c + ch];
    }
}

#[inline]
pub(crate) fn insert_plane(data: &mut [f64], n: usize, ch: usize, h: usize, w: usize, c: usize, plane: &[f64]) {
    let base = n * h * w * c;
    for (p, v) in plane.iter().enumerate() {
        data[base + p * c + ch] = *v;
    }
}

#[inline]
pub(crate) fn accumulate_plane(data: &mut [f64], n: usize, ch: usize, h: usize, w: usize, c: usize, plane: &[f64]) {
    let base = n * h * w * c;
    for (p, v) in plane.iter().enumerate() {
        data[base + p * c + ch] += *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line 4-neighbor blend used as an independent oracle.
    fn blend_oracle(m: &[[f64; 2]; 2], r: f64, c: f64) -> f64 {
        let top = m[0][0] + (m[0][1] - m[0][0]) * c;
        let bottom = m[1][0] + (m[1][1] - m[1][0]) * c;
        top + (bottom - top) * r
    }

    fn map22() -> Tensor {
        Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap()
    }

    #[test]
    fn integer_and_midpoint_samples() {
        let m = map22();
        let s = |r, c| bilinear_sample(&m, SampleCoord::new(r, c), BoundaryPolicy::Clamp).unwrap();
        assert_eq!(s(0.0, 0.0), 1.0);
        assert_eq!(s(0.0, 0.5), 1.5);
        assert_eq!(s(1.0, 1.0), 4.0);
        let want = blend_oracle(&[[1.0, 2.0], [3.0, 4.0]], 0.25, 0.75);
        assert!((s(0.25, 0.75) - want).abs() < 1e-15);
    }

    #[test]
    fn outside_samples_clamp() {
        let m = map22();
        let s = |r, c| bilinear_sample(&m, SampleCoord::new(r, c), BoundaryPolicy::Clamp).unwrap();
        assert_eq!(s(-3.0, -1.0), 1.0);
        assert_eq!(s(7.0, 0.5), 3.5);
        assert_eq!(s(0.0, 9.0), 2.0);
    }

    #[test]
    fn empty_map_and_bad_coords_error() {
        let empty = Tensor::zeros(&[0, 3]);
        assert!(bilinear_sample(&empty, SampleCoord::new(0.0, 0.0), BoundaryPolicy::Clamp).is_err());
        assert!(bilinear_sample_grad(&empty, SampleCoord::new(0.0, 0.0), 1.0).is_err());
        let m = map22();
        assert!(bilinear_sample(&m, SampleCoord::new(f64::NAN, 0.0), BoundaryPolicy::Clamp).is_err());
        assert!(bilinear_sample(&Tensor::zeros(&[2]), SampleCoord::new(0.0, 0.0), BoundaryPolicy::Clamp).is_err());
    }

    #[test]
    fn grad_entries() {
        let m = map22();
        let g = bilinear_sample_grad(&m, SampleCoord::new(1.0, 0.0), 1.0).unwrap();
        assert_eq!(g, vec![((1, 0), 1.0)]);
        let g = bilinear_sample_grad(&m, SampleCoord::new(0.0, 0.5), 1.0).unwrap();
        assert_eq!(g, vec![((0, 0), 0.5), ((0, 1), 0.5)]);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let m = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.731).sin() + 1.5);
        let at = SampleCoord::new(1.37, 2.81);
        let g = bilinear_sample_grad(&m, at, 1.0).unwrap();
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..5 {
                let mut p = m.clone();
                let mut q = m.clone();
                p.set(&[r, c], m.get(&[r, c]).unwrap() + h).unwrap();
                q.set(&[r, c], m.get(&[r, c]).unwrap() - h).unwrap();
                let fd = (bilinear_sample(&p, at, BoundaryPolicy::Clamp).unwrap()
                    - bilinear_sample(&q, at, BoundaryPolicy::Clamp).unwrap())
                    / (2.0 * h);
                let an = g.iter().find(|(p, _)| *p == (r, c)).map_or(0.0, |e| e.1);
                assert!((fd - an).abs() <= 1e-8 * an.abs().max(1e-3), "({r},{c}) {fd} vs {an}");
            }
        }
    }

    #[test]
    fn quarter_turn_matches_rot90() {
        let plane: Vec<f64> = (0..25).map(|i| (i as f64 * 1.3).cos()).collect();
        let a = rotate_plane(&plane, 5, 5, std::f64::consts::FRAC_PI_2);
        let b = rot90_plane(&plane, 5, 5);
        assert_eq!(a, b);
        let mut p = plane.clone();
        for _ in 0..4 {
            p = rot90_plane(&p, 5, 5);
        }
        assert_eq!(p, plane);
    }

    #[test]
    fn rot90_rectangle_shape() {
        let t = Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64);
        let r = rot90_images(&t, 1).unwrap();
        assert_eq!(r.shape(), &[1, 3, 2, 1]);
        // out[i][j] = in[j][w-1-i]
        assert_eq!(r.get(&[0, 0, 0, 0]).unwrap(), t.get(&[0, 0, 2, 0]).unwrap());
        assert_eq!(rot90_images(&r, 3).unwrap(), t);
    }

    proptest! {
        #[test]
        fn exact_on_integer_coordinates(data in proptest::collection::vec(-10.0f64..10.0, 12), r in 0usize..3, c in 0usize..4) {
            let m = Tensor::new(vec![3, 4], data).unwrap();
            let v = bilinear_sample(&m, SampleCoord::new(r as f64, c as f64), BoundaryPolicy::Clamp).unwrap();
            prop_assert_eq!(v, m.get(&[r, c]).unwrap());
        }

        #[test]
        fn linear_in_map(
            a in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 12),
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
            r in -1.0f64..4.0, c in -1.0f64..5.0,
        ) {
            let ta = Tensor::new(vec![3, 4], a).unwrap();
            let tb = Tensor::new(vec![3, 4], b).unwrap();
            let mix = ta.scale(alpha).add(&tb.scale(beta)).unwrap();
            let at = SampleCoord::new(r, c);
            let s = |t: &Tensor| bilinear_sample(t, at, BoundaryPolicy::Clamp).unwrap();
            let lhs = s(&mix);
            let rhs = alpha * s(&ta) + beta * s(&tb);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn grad_weights_nonnegative_and_sum_to_upstream(r in -2.0f64..6.0, c in -2.0f64..6.0, up in -4.0f64..4.0) {
            let m = Tensor::zeros(&[4, 4]);
            let g = bilinear_sample_grad(&m, SampleCoord::new(r, c), up).unwrap();
            prop_assert!(g.len() <= 4);
            let total: f64 = g.iter().map(|e| e.1).sum();
            prop_assert!((total - up).abs() <= 1e-15 * (1.0 + up.abs()));
            prop_assert!(g.iter().all(|e| e.1 * up.signum() >= 0.0));
        }
    }
}
