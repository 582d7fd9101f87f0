//! Lifting and group convolutions over the cyclic rotation group `C_N`.
//!
//! Both layers are valid (unpadded) cross-correlations. Orientation slot `r`
//! of the output correlates with the kernel rotated by `2 pi r / N`; for the
//! group convolution the kernel's orientation axis is also cycled by `r`.
//! Rotating the input by a quarter turn (N = 4) then rotates every output
//! slot spatially and cycles the orientation axis by one.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rotation::{orientation_rotations, KernelRotation};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Gradients returned by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

/// Geometry of one correlation `B x S x H x W x Cin -> B x R x H' x W' x Cout`.
#[derive(Debug, Clone, Copy)]
struct CorrDims {
    batch: usize,
    s: usize,
    h: usize,
    w: usize,
    cin: usize,
    r: usize,
    k: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl CorrDims {
    fn bank_len(&self) -> usize {
        self.r * self.s * self.k * self.k * self.cin * self.cout
    }

    #[inline]
    fn bank_row(&self, r: usize, s: usize, dy: usize, dx: usize) -> usize {
        (((r * self.s + s) * self.k + dy) * self.k + dx) * self.cin * self.cout
    }

    #[inline]
    fn input_at(&self, b: usize, s: usize, y: usize, x: usize) -> usize {
        (((b * self.s + s) * self.h + y) * self.w + x) * self.cin
    }

    #[inline]
    fn output_at(&self, b: usize, r: usize, y: usize, x: usize) -> usize {
        (((b * self.r + r) * self.oh + y) * self.ow + x) * self.cout
    }
}

fn output_extent(n: usize, k: usize, stride: usize) -> Result<usize> {
    if n < k {
        return shape_err(format!("spatial extent {n} smaller than kernel {k}"));
    }
    Ok((n - k) / stride + 1)
}

/// Gathers the receptive field of output `(b, y, x)` into `patch`, ordered
/// like a bank row block: `(s, dy, dx, c)`.
#[inline]
fn gather_patch(input: &[f64], d: &CorrDims, b: usize, y: usize, x: usize, patch: &mut [f64]) {
    let run = d.k * d.cin;
    let mut p = 0;
    for s in 0..d.s {
        for dy in 0..d.k {
            let i0 = d.input_at(b, s, y * d.stride + dy, x * d.stride);
            patch[p..p + run].copy_from_slice(&input[i0..i0 + run]);
            p += run;
        }
    }
}

#[inline]
fn scatter_patch(gin: &mut [f64], d: &CorrDims, b: usize, y: usize, x: usize, patch: &[f64]) {
    let run = d.k * d.cin;
    let mut p = 0;
    for s in 0..d.s {
        for dy in 0..d.k {
            let i0 = d.input_at(b, s, y * d.stride + dy, x * d.stride);
            for (g, v) in gin[i0..i0 + run].iter_mut().zip(&patch[p..p + run]) {
                *g += v;
            }
            p += run;
        }
    }
}

fn correlate(input: &[f64], bank: &[f64], bias: &[f64], d: &CorrDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.r * d.oh * d.ow * d.cout];
    let plen = d.s * d.k * d.k * d.cin;
    let block = plen * d.cout;
    let mut patch = vec![0.0; plen];
    for b in 0..d.batch {
        for y in 0..d.oh {
            for x in 0..d.ow {
                gather_patch(input, d, b, y, x, &mut patch);
                for r in 0..d.r {
                    let o0 = d.output_at(b, r, y, x);
                    let acc = &mut out[o0..o0 + d.cout];
                    acc.copy_from_slice(bias);
                    let bank_r = &bank[r * block..(r + 1) * block];
                    for (a, wrow) in patch.iter().zip(bank_r.chunks_exact(d.cout)) {
                        for (o, wv) in acc.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_bank, grad_bias)`.
fn correlate_backward(input: &[f64], bank: &[f64], grad_out: &[f64], d: &CorrDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; input.len()];
    let mut gbank = vec![0.0; d.bank_len()];
    let mut gbias = vec![0.0; d.cout];
    let plen = d.s * d.k * d.k * d.cin;
    let block = plen * d.cout;
    let mut patch = vec![0.0; plen];
    let mut gpatch = vec![0.0; plen];
    // per-orientation transpose `cout x plen`, so the input gradient is a
    // sum of contiguous axpys
    let mut bank_t = vec![0.0; bank.len()];
    for r in 0..d.r {
        for p in 0..plen {
            for o in 0..d.cout {
                bank_t[r * block + o * plen + p] = bank[r * block + p * d.cout + o];
            }
        }
    }
    for b in 0..d.batch {
        for y in 0..d.oh {
            for x in 0..d.ow {
                gather_patch(input, d, b, y, x, &mut patch);
                gpatch.iter_mut().for_each(|g| *g = 0.0);
                for r in 0..d.r {
                    let o0 = d.output_at(b, r, y, x);
                    let g = &grad_out[o0..o0 + d.cout];
                    for (gb, gv) in gbias.iter_mut().zip(g) {
                        *gb += gv;
                    }
                    let bt_r = &bank_t[r * block..(r + 1) * block];
                    for (gv, col) in g.iter().zip(bt_r.chunks_exact(plen)) {
                        for (gp, w) in gpatch.iter_mut().zip(col) {
                            *gp += gv * w;
                        }
                    }
                    let gbank_r = &mut gbank[r * block..(r + 1) * block];
                    for (a, gwrow) in patch.iter().zip(gbank_r.chunks_exact_mut(d.cout)) {
                        for (gw, gv) in gwrow.iter_mut().zip(g) {
                            *gw += a * gv;
                        }
                    }
                }
                scatter_patch(&mut gin, d, b, y, x, &gpatch);
            }
        }
    }
    (gin, gbank, gbias)
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Planar image to `C_N` feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingConvLayer {
    /// `out_ch x in_ch x k x k`
    pub kernels: Tensor,
    pub bias: Vec<f64>,
    pub num_orientations: usize,
    pub stride: usize,
}

impl LiftingConvLayer {
    pub fn new(kernels: Tensor, bias: Vec<f64>, num_orientations: usize, stride: usize) -> Result<Self> {
        if kernels.rank() != 4 || kernels.shape()[2] != kernels.shape()[3] {
            return shape_err(format!("lifting kernels must be out x in x k x k, got {:?}", kernels.shape()));
        }
        if kernels.shape()[2] % 2 == 0 {
            return shape_err("kernel size must be odd");
        }
        if bias.len() != kernels.shape()[0] {
            return shape_err("bias length must equal out channels");
        }
        if num_orientations == 0 || stride == 0 {
            return shape_err("orientations and stride must be >= 1");
        }
        Ok(Self { kernels, bias, num_orientations, stride })
    }

    pub fn random(rng: &mut impl Rng, in_ch: usize, out_ch: usize, k: usize, n: usize) -> Result<Self> {
        let w = he_normal(rng, in_ch * k * k, out_ch * in_ch * k * k);
        Self::new(Tensor::new(vec![out_ch, in_ch, k, k], w)?, vec![0.0; out_ch], n, 1)
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    fn dims(&self, image: &Tensor) -> Result<CorrDims> {
        if image.rank() != 4 || image.shape()[3] != self.in_channels() {
            return shape_err(format!(
                "lifting input must be B x H x W x {}, got {:?}",
                self.in_channels(),
                image.shape()
            ));
        }
        let k = self.kernel_size();
        let s = image.shape();
        Ok(CorrDims {
            batch: s[0],
            s: 1,
            h: s[1],
            w: s[2],
            cin: s[3],
            r: self.num_orientations,
            k,
            cout: self.out_channels(),
            stride: self.stride,
            oh: output_extent(s[1], k, self.stride)?,
            ow: output_extent(s[2], k, self.stride)?,
        })
    }

    fn bank(&self, rots: &[KernelRotation], d: &CorrDims) -> Vec<f64> {
        let kk = d.k * d.k;
        let mut bank = vec![0.0; d.bank_len()];
        let mut rotated = vec![0.0; kk];
        for o in 0..d.cout {
            for c in 0..d.cin {
                let src = &self.kernels.data()[(o * d.cin + c) * kk..(o * d.cin + c + 1) * kk];
                for (r, rot) in rots.iter().enumerate() {
                    rot.apply(src, &mut rotated);
                    for (t, v) in rotated.iter().enumerate() {
                        bank[d.bank_row(r, 0, t / d.k, t % d.k) + c * d.cout + o] = *v;
                    }
                }
            }
        }
        bank
    }

    /// `B x H x W x Cin -> B x N x H' x W' x Cout`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let d = self.dims(image)?;
        let rots = orientation_rotations(d.k, d.r);
        let out = correlate(image.data(), &self.bank(&rots, &d), &self.bias, &d);
        Tensor::new(vec![d.batch, d.r, d.oh, d.ow, d.cout], out)
    }

    pub fn backward(&self, image: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let d = self.dims(image)?;
        if grad_out.shape() != [d.batch, d.r, d.oh, d.ow, d.cout] {
            return shape_err(format!("lifting grad_out has shape {:?}", grad_out.shape()));
        }
        let rots = orientation_rotations(d.k, d.r);
        let (gin, gbank, gbias) = correlate_backward(image.data(), &self.bank(&rots, &d), grad_out.data(), &d);
        let kk = d.k * d.k;
        let mut gk = vec![0.0; self.kernels.len()];
        let mut plane = vec![0.0; kk];
        for o in 0..d.cout {
            for c in 0..d.cin {
                let dst = &mut gk[(o * d.cin + c) * kk..(o * d.cin + c + 1) * kk];
                for (r, rot) in rots.iter().enumerate() {
                    for (t, p) in plane.iter_mut().enumerate() {
                        *p = gbank[d.bank_row(r, 0, t / d.k, t % d.k) + c * d.cout + o];
                    }
                    rot.apply_transpose_acc(&plane, dst);
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(image.shape().to_vec(), gin)?,
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            bias: gbias,
        })
    }
}

/// `C_N` feature maps to `C_N` feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConvLayer {
    /// `out_ch x in_ch x N x k x k`
    pub kernels: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
}

impl GroupConvLayer {
    pub fn new(kernels: Tensor, bias: Vec<f64>, stride: usize) -> Result<Self> {
        if kernels.rank() != 5 || kernels.shape()[3] != kernels.shape()[4] {
            return shape_err(format!("group kernels must be out x in x N x k x k, got {:?}", kernels.shape()));
        }
        if kernels.shape()[3] % 2 == 0 {
            return shape_err("kernel size must be odd");
        }
        if kernels.shape()[2] == 0 || stride == 0 {
            return shape_err("orientations and stride must be >= 1");
        }
        if bias.len() != kernels.shape()[0] {
            return shape_err("bias length must equal out channels");
        }
        Ok(Self { kernels, bias, stride })
    }

    pub fn random(rng: &mut impl Rng, in_ch: usize, out_ch: usize, k: usize, n: usize) -> Result<Self> {
        let w = he_normal(rng, in_ch * n * k * k, out_ch * in_ch * n * k * k);
        Self::new(Tensor::new(vec![out_ch, in_ch, n, k, k], w)?, vec![0.0; out_ch], 1)
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn num_orientations(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[3]
    }

    fn dims(&self, features: &Tensor) -> Result<CorrDims> {
        let n = self.num_orientations();
        if features.rank() != 5 || features.shape()[1] != n || features.shape()[4] != self.in_channels() {
            return shape_err(format!(
                "group conv input must be B x {n} x H x W x {}, got {:?}",
                self.in_channels(),
                features.shape()
            ));
        }
        let k = self.kernel_size();
        let s = features.shape();
        Ok(CorrDims {
            batch: s[0],
            s: n,
            h: s[2],
            w: s[3],
            cin: s[4],
            r: n,
            k,
            cout: self.out_channels(),
            stride: self.stride,
            oh: output_extent(s[2], k, self.stride)?,
            ow: output_extent(s[3], k, self.stride)?,
        })
    }

    #[inline]
    fn plane_offset(&self, o: usize, c: usize, s: usize, d: &CorrDims) -> usize {
        ((o * d.cin + c) * d.s + s) * d.k * d.k
    }

    fn bank(&self, rots: &[KernelRotation], d: &CorrDims) -> Vec<f64> {
        let kk = d.k * d.k;
        let n = d.s;
        let mut bank = vec![0.0; d.bank_len()];
        let mut rotated = vec![0.0; kk];
        for o in 0..d.cout {
            for c in 0..d.cin {
                for (r, rot) in rots.iter().enumerate() {
                    for s in 0..n {
                        let p0 = self.plane_offset(o, c, (s + n - r) % n, d);
                        rot.apply(&self.kernels.data()[p0..p0 + kk], &mut rotated);
                        for (t, v) in rotated.iter().enumerate() {
                            bank[d.bank_row(r, s, t / d.k, t % d.k) + c * d.cout + o] = *v;
                        }
                    }
                }
            }
        }
        bank
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.dims(features)?;
        let rots = orientation_rotations(d.k, d.r);
        let out = correlate(features.data(), &self.bank(&rots, &d), &self.bias, &d);
        Tensor::new(vec![d.batch, d.r, d.oh, d.ow, d.cout], out)
    }

    pub fn backward(&self, features: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let d = self.dims(features)?;
        if grad_out.shape() != [d.batch, d.r, d.oh, d.ow, d.cout] {
            return shape_err(format!("group conv grad_out has shape {:?}", grad_out.shape()));
        }
        let rots = orientation_rotations(d.k, d.r);
        let (gin, gbank, gbias) = correlate_backward(features.data(), &self.bank(&rots, &d), grad_out.data(), &d);
        let kk = d.k * d.k;
        let n = d.s;
        let mut gk = vec![0.0; self.kernels.len()];
        let mut plane = vec![0.0; kk];
        for o in 0..d.cout {
            for c in 0..d.cin {
                for (r, rot) in rots.iter().enumerate() {
                    for s in 0..n {
                        for (t, p) in plane.iter_mut().enumerate() {
                            *p = gbank[d.bank_row(r, s, t / d.k, t % d.k) + c * d.cout + o];
                        }
                        let p0 = self.plane_offset(o, c, (s + n - r) % n, &d);
                        rot.apply_transpose_acc(&plane, &mut gk[p0..p0 + kk]);
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(features.shape().to_vec(), gin)?,
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            bias: gbias,
        })
    }
}

/// Quarter-turn action on `B x N x H x W x C` feature maps: rotates every
/// plane by 90 degrees and cycles the orientation axis forward by one.
pub fn rot90_group_features(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 5 {
        return shape_err("expected B x N x H x W x C");
    }
    let s = features.shape().to_vec();
    let (b, n, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Tensor::zeros(&[b, n, w, h, c]);
    for bi in 0..b {
        for r in 0..n {
            let dst_r = (r + 1) % n;
            for i in 0..w {
                for j in 0..h {
                    for ch in 0..c {
                        let v = features.data()[(((bi * n + r) * h + j) * w + (w - 1 - i)) * c + ch];
                        out.data_mut()[(((bi * n + dst_r) * w + i) * h + j) * c + ch] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::rot90_images;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Direct 2-D valid correlation used as an oracle.
    fn plain_correlation(img: &Tensor, k: &[f64], ksize: usize) -> Vec<f64> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let (oh, ow) = (h - ksize + 1, w - ksize + 1);
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..ksize {
                    for dx in 0..ksize {
                        out[y * ow + x] += img.get(&[0, y + dy, x + dx, 0]).unwrap() * k[dy * ksize + dx];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_orientation_is_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_tensor(&mut rng, &[1, 6, 7, 1]);
        let k = random_tensor(&mut rng, &[1, 1, 3, 3]);
        let layer = LiftingConvLayer::new(k.clone(), vec![0.0], 1, 1).unwrap();
        let out = layer.forward(&img).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 5, 1]);
        let want = plain_correlation(&img, k.data(), 3);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_kernel_gives_identical_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_tensor(&mut rng, &[1, 6, 6, 1]);
        // rotationally symmetric 3x3 under quarter turns
        let k = Tensor::new(vec![1, 1, 3, 3], vec![0.1, 0.5, 0.1, 0.5, 2.0, 0.5, 0.1, 0.5, 0.1]).unwrap();
        let layer = LiftingConvLayer::new(k, vec![0.3], 4, 1).unwrap();
        let out = layer.forward(&img).unwrap();
        let slot = 4 * 4;
        for r in 1..4 {
            assert_eq!(&out.data()[..slot], &out.data()[r * slot..(r + 1) * slot]);
        }
    }

    #[test]
    fn lifting_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let layer = LiftingConvLayer::random(&mut rng, 2, 3, 3, 4).unwrap();
            let img = random_tensor(&mut rng, &[1, 7, 7, 2]);
            let lhs = layer.forward(&rot90_images(&img, 1).unwrap()).unwrap();
            let rhs = rot90_group_features(&layer.forward(&img).unwrap()).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn group_conv_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let lift = LiftingConvLayer::random(&mut rng, 1, 2, 3, 4).unwrap();
            let g = GroupConvLayer::random(&mut rng, 2, 3, 3, 4).unwrap();
            let img = random_tensor(&mut rng, &[1, 9, 9, 1]);
            let f = |x: &Tensor| g.forward(&lift.forward(x).unwrap()).unwrap();
            let lhs = f(&rot90_images(&img, 1).unwrap());
            let rhs = rot90_group_features(&f(&img)).unwrap();
            assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn group_conv_delta_kernel() {
        // delta at the center tap of orientation 0: output slot r copies input slot r
        let mut k = Tensor::zeros(&[1, 1, 4, 3, 3]);
        k.set(&[0, 0, 0, 1, 1], 2.0).unwrap();
        let layer = GroupConvLayer::new(k, vec![0.0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, &[1, 4, 5, 5, 1]);
        let out = layer.forward(&x).unwrap();
        for r in 0..4 {
            for y in 0..3 {
                for xx in 0..3 {
                    let a = out.get(&[0, r, y, xx, 0]).unwrap();
                    let b = x.get(&[0, r, y + 1, xx + 1, 0]).unwrap();
                    assert!((a - 2.0 * b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn constant_input_constant_output() {
        let k = Tensor::filled(&[2, 1, 4, 3, 3], 0.25);
        let layer = GroupConvLayer::new(k, vec![0.1, -0.2], 1).unwrap();
        let x = Tensor::filled(&[1, 4, 5, 5, 1], 1.5);
        let out = layer.forward(&x).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let want = if i % 2 == 0 { 0.1 } else { -0.2 } + 0.25 * 1.5 * 36.0;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lift = LiftingConvLayer::random(&mut rng, 1, 2, 3, 4).unwrap();
        assert!(lift.forward(&Tensor::zeros(&[1, 5, 5, 2])).is_err());
        assert!(lift.forward(&Tensor::zeros(&[1, 2, 5, 1])).is_err());
        let g = GroupConvLayer::random(&mut rng, 2, 2, 3, 4).unwrap();
        assert!(g.forward(&Tensor::zeros(&[1, 3, 5, 5, 2])).is_err());
        assert!(LiftingConvLayer::new(Tensor::zeros(&[1, 1, 2, 2]), vec![0.0], 4, 1).is_err());
    }
}
