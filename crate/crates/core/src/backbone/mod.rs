//! Discrete `C_N` rotation-equivariant feature extractor: a lifting
//! convolution, a stack of group convolutions (ReLU after each), and
//! max-pooling over the orientation axis.

pub mod conv;
pub mod layers;
pub mod rotation;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::{rot90_group_features, ConvGrads, GroupConvLayer, LiftingConvLayer};
pub use layers::{
    argmax_rows, global_avg_pool, global_avg_pool_backward, orientation_maxpool, orientation_maxpool_backward, relu,
    relu_backward, softmax_xent, DenseGrads, DenseLayer, Standardize,
};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Layer widths and group size of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the lifting layer followed by each group conv.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub orientations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub lift: LiftingConvLayer,
    pub gconvs: Vec<GroupConvLayer>,
}

/// Intermediate values kept by [`Backbone::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input of every conv layer (the image, then post-ReLU activations).
    inputs: Vec<Tensor>,
    /// Pre-ReLU output of every conv layer.
    pre_acts: Vec<Tensor>,
    argmax: Vec<usize>,
}

impl BackboneCache {
    /// True when both passes have the same ReLU signs and orientation
    /// winners, i.e. they lie on the same smooth piece of the backbone.
    pub fn same_pattern(&self, other: &BackboneCache) -> bool {
        self.argmax == other.argmax
            && self.pre_acts.len() == other.pre_acts.len()
            && self
                .pre_acts
                .iter()
                .zip(&other.pre_acts)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| (*x > 0.0) == (*y > 0.0)))
    }
}

#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub lift: ConvGrads,
    pub gconvs: Vec<ConvGrads>,
}

impl BackboneGrads {
    pub fn input(&self) -> &Tensor {
        &self.lift.input
    }
}

impl Backbone {
    pub fn random(rng: &mut impl Rng, config: &BackboneConfig) -> Result<Self> {
        let Some((&first, rest)) = config.channels.split_first() else {
            return shape_err("backbone needs at least the lifting layer");
        };
        let (k, n) = (config.kernel_size, config.orientations);
        let lift = LiftingConvLayer::random(rng, config.in_channels, first, k, n)?;
        let mut gconvs = Vec::with_capacity(rest.len());
        let mut prev = first;
        for &c in rest {
            gconvs.push(GroupConvLayer::random(rng, prev, c, k, n)?);
            prev = c;
        }
        Ok(Self { lift, gconvs })
    }

    pub fn config(&self) -> BackboneConfig {
        let mut channels = vec![self.lift.out_channels()];
        channels.extend(self.gconvs.iter().map(|g| g.out_channels()));
        BackboneConfig {
            in_channels: self.lift.in_channels(),
            channels,
            kernel_size: self.lift.kernel_size(),
            orientations: self.lift.num_orientations,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.gconvs.last().map_or(self.lift.out_channels(), |g| g.out_channels())
    }

    /// Spatial extent of the output for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.lift.kernel_size();
        let layers = 1 + self.gconvs.len();
        (h.saturating_sub(layers * (k - 1)), w.saturating_sub(layers * (k - 1)))
    }

    /// Equivariant planar features `B x H' x W' x C` (before any shift).
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let mut inputs = vec![images.clone()];
        let mut pre_acts = Vec::with_capacity(1 + self.gconvs.len());
        let z = self.lift.forward(images)?;
        let mut a = relu(&z);
        pre_acts.push(z);
        for g in &self.gconvs {
            inputs.push(a);
            let z = g.forward(inputs.last().unwrap())?;
            a = relu(&z);
            pre_acts.push(z);
        }
        let (pooled, argmax) = orientation_maxpool(&a)?;
        Ok((pooled, BackboneCache { inputs, pre_acts, argmax }))
    }

    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.0)
    }

    pub fn backward(&self, cache: &BackboneCache, grad_features: &Tensor) -> Result<BackboneGrads> {
        let last = cache.pre_acts.last().expect("at least one layer");
        let mut g = orientation_maxpool_backward(grad_features, &cache.argmax, last.shape())?;
        let mut gconv_grads = Vec::with_capacity(self.gconvs.len());
        for (i, layer) in self.gconvs.iter().enumerate().rev() {
            let gz = relu_backward(&cache.pre_acts[i + 1], &g)?;
            let grads = layer.backward(&cache.inputs[i + 1], &gz)?;
            g = grads.input.clone();
            gconv_grads.push(grads);
        }
        gconv_grads.reverse();
        let gz = relu_backward(&cache.pre_acts[0], &g)?;
        let lift = self.lift.backward(&cache.inputs[0], &gz)?;
        Ok(BackboneGrads { lift, gconvs: gconv_grads })
    }
}
