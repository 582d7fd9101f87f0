use crate::sampling::{exact_sin_cos, rotate_offset, zero_padded_taps};

/// Linear operator rotating a `k x k` kernel about its center by a fixed
/// angle. Off-grid source positions are bilinearly resampled with zeros
/// outside the kernel support; quarter turns are exact permutations.
#[derive(Debug, Clone)]
pub struct KernelRotation {
    size: usize,
    /// For each destination tap, its `(source tap, weight)` pairs.
    entries: Vec<Vec<(usize, f64)>>,
}

impl KernelRotation {
    pub fn new(size: usize, angle: f64) -> Self {
        // destination d samples the source at center + R(-angle)(d - center)
        let (s, c) = exact_sin_cos(-angle);
        let center = (size as f64 - 1.0) / 2.0;
        let mut entries = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let (dr, dc) = rotate_offset(i as f64 - center, j as f64 - center, s, c);
                entries.push(zero_padded_taps(size, size, center + dr, center + dc));
            }
        }
        Self { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, taps) in dst.iter_mut().zip(&self.entries) {
            *d = taps.iter().map(|&(s, w)| w * src[s]).sum();
        }
    }

    /// `grad_src += R^T grad_dst`.
    pub fn apply_transpose_acc(&self, grad_dst: &[f64], grad_src: &mut [f64]) {
        for (g, taps) in grad_dst.iter().zip(&self.entries) {
            for &(s, w) in taps {
                grad_src[s] += w * g;
            }
        }
    }
}

/// One operator per orientation `r`, rotating by `2 pi r / n`.
pub fn orientation_rotations(size: usize, n: usize) -> Vec<KernelRotation> {
    (0..n)
        .map(|r| KernelRotation::new(size, 2.0 * std::f64::consts::PI * r as f64 / n as f64))
        .collect()
}
