//! Invariance audit: relative output change of the invariant layer under
//! input rotations, next to the same metric for spatial max pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::iil::{ii_invariance_error, max_pool_invariance_error, IILayerState, RotationGroupSampling};
use crate::monomial::{apply_shift, fit_shift, DEFAULT_EPSILON};
use crate::selection::generate_candidates;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub angle_deg: f64,
    /// Mean over maps of the invariant layer's relative change.
    pub ii_error: f64,
    /// Mean over maps of spatial max pooling's relative change.
    pub max_pool_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub maps: usize,
    pub rows: Vec<AngleRow>,
}

impl AuditReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle_deg,ii_error,max_pool_error\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.angle_deg, r.ii_error, r.max_pool_error));
        }
        out
    }
}

/// Audits each map (`B x H x W x C`, already shifted) separately and
/// averages per angle.
pub fn invariance_audit(maps: &[Tensor], state: &IILayerState, angles_deg: &[f64]) -> Result<AuditReport> {
    let rad: Vec<f64> = angles_deg.iter().map(|a| a.to_radians()).collect();
    let mut ii = vec![0.0; rad.len()];
    let mut mp = vec![0.0; rad.len()];
    for m in maps {
        for (acc, e) in ii.iter_mut().zip(ii_invariance_error(m, state, &rad)?) {
            *acc += e / maps.len() as f64;
        }
        for (acc, e) in mp.iter_mut().zip(max_pool_invariance_error(m, &rad)?) {
            *acc += e / maps.len() as f64;
        }
    }
    let rows = angles_deg
        .iter()
        .zip(ii.into_iter().zip(mp))
        .map(|(&angle_deg, (ii_error, max_pool_error))| AngleRow { angle_deg, ii_error, max_pool_error })
        .collect();
    Ok(AuditReport { maps: maps.len(), rows })
}

/// Shifted feature maps of a random `C_N` backbone applied to random
/// images: `count` single-sample maps of the backbone's output size.
pub fn random_equivariant_maps(
    rng: &mut ChaCha8Rng,
    count: usize,
    image_size: usize,
    config: &BackboneConfig,
) -> Result<Vec<Tensor>> {
    let mut maps = Vec::with_capacity(count);
    for _ in 0..count {
        let backbone = Backbone::random(rng, config)?;
        let img = Tensor::from_fn(&[1, image_size, image_size, config.in_channels], |_| rng.random_range(0.0..1.0));
        let feats = backbone.features(&img)?;
        let shift = fit_shift(&feats, DEFAULT_EPSILON)?;
        maps.push(apply_shift(&feats, &shift)?);
    }
    Ok(maps)
}

/// Random monomials over `channels` channels with an identity shift (the
/// maps passed to [`invariance_audit`] are shifted already).
pub fn random_state(
    channels: usize,
    num_monomials: usize,
    num_angles: usize,
    r_max: f64,
    seed: u64,
) -> Result<IILayerState> {
    let monomials = generate_candidates(num_monomials, 2, 4, r_max, seed)?;
    let shift = crate::monomial::ShiftStats { x_min: vec![1.0; channels], epsilon: DEFAULT_EPSILON };
    IILayerState::new(monomials, shift, RotationGroupSampling::new(num_angles)?)
}

/// The default audit: `maps` random backbones and random monomials.
pub fn random_audit(seed: u64, maps: usize, angles_deg: &[f64]) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = BackboneConfig { in_channels: 1, channels: vec![4, 4], kernel_size: 3, orientations: 8 };
    let feature_maps = random_equivariant_maps(&mut rng, maps, 21, &config)?;
    let state = random_state(4, 5, 8, crate::iil::DEFAULT_R_MAX, rng.random())?;
    invariance_audit(&feature_maps, &state, angles_deg)
}
