//! Classification networks: the equivariant backbone followed by either a
//! pooled head (baseline) or the invariant integration head.

use crate::backbone::{
    argmax_rows, global_avg_pool, global_avg_pool_backward, softmax_xent, Backbone, BackboneCache, DenseLayer,
    Standardize,
};
use crate::error::{shape_err, Result};
use crate::iil::{ii_backward, ii_forward, IILayerState};
use crate::monomial::{apply_shift, apply_shift_grad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// Spatial global average pool and a dense layer.
    Pooled { dense: DenseLayer },
    /// Input shift, invariant integration, channel-major flatten, frozen
    /// standardization, and a dense layer.
    Invariant {
        iil: IILayerState,
        norm: Standardize,
        dense: DenseLayer,
    },
}

impl Head {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Pooled { .. } => "pooled",
            Head::Invariant { .. } => "invariant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub backbone: Backbone,
    pub head: Head,
}

/// Gradients aligned with [`Network::param_names`].
pub type ParamGrads = Vec<Vec<f64>>;

struct HeadCache {
    features: Tensor,
    shifted: Option<Tensor>,
    head_in: Tensor,
}

impl Network {
    pub fn num_classes(&self) -> usize {
        match &self.head {
            Head::Pooled { dense } | Head::Invariant { dense, .. } => dense.outputs(),
        }
    }

    pub fn iil(&self) -> Option<&IILayerState> {
        match &self.head {
            Head::Invariant { iil, .. } => Some(iil),
            Head::Pooled { .. } => None,
        }
    }

    /// Head input before the dense layer (pooled features or standardized
    /// invariant features), `B x D`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let features = self.backbone.features(images)?;
        Ok(self.head_forward(features)?.head_in)
    }

    fn head_forward(&self, features: Tensor) -> Result<HeadCache> {
        match &self.head {
            Head::Pooled { .. } => {
                let head_in = global_avg_pool(&features)?;
                Ok(HeadCache { features, shifted: None, head_in })
            }
            Head::Invariant { iil, norm, .. } => {
                let shifted = apply_shift(&features, &iil.shift)?;
                let ii = ii_forward(&shifted, iil)?;
                let b = ii.shape()[0];
                let d = ii.len() / b.max(1);
                let flat = ii.reshape(&[b, d])?;
                let head_in = norm.forward(&flat)?;
                Ok(HeadCache { features, shifted: Some(shifted), head_in })
            }
        }
    }

    fn dense(&self) -> &DenseLayer {
        match &self.head {
            Head::Pooled { dense } | Head::Invariant { dense, .. } => dense,
        }
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let features = self.backbone.features(images)?;
        self.dense().forward(&self.head_forward(features)?.head_in)
    }

    /// Logits from backbone features computed elsewhere.
    pub fn logits_from_features(&self, features: Tensor) -> Result<Tensor> {
        self.dense().forward(&self.head_forward(features)?.head_in)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }

    /// Mean cross-entropy, logits, and the gradient of the loss with respect
    /// to every parameter.
    pub fn loss_and_grads(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, ParamGrads)> {
        let (features, bb_cache): (Tensor, BackboneCache) = self.backbone.forward(images)?;
        let hc = self.head_forward(features)?;
        let dense = self.dense();
        let logits = dense.forward(&hc.head_in)?;
        let (loss, g_logits) = softmax_xent(&logits, labels)?;
        let dg = dense.backward(&hc.head_in, &g_logits)?;

        let mut head_grads: ParamGrads = Vec::new();
        let g_features = match &self.head {
            Head::Pooled { .. } => global_avg_pool_backward(&dg.input, hc.features.shape())?,
            Head::Invariant { iil, norm, .. } => {
                let shifted = hc.shifted.as_ref().expect("invariant head caches shifted features");
                let g_flat = norm.backward(&dg.input)?;
                let g_ii = g_flat.reshape(&[shifted.shape()[0], iil.channels(), iil.num_monomials()])?;
                let (g_shifted, g_exps) = ii_backward(shifted, iil, &g_ii)?;
                head_grads.push(g_exps.concat());
                apply_shift_grad(&g_shifted, &hc.features, &iil.shift)?
            }
        };
        head_grads.push(dg.weights.into_data());
        head_grads.push(dg.bias);

        let bg = self.backbone.backward(&bb_cache, &g_features)?;
        let mut grads: ParamGrads = vec![bg.lift.kernels.into_data(), bg.lift.bias];
        for g in bg.gconvs {
            grads.push(g.kernels.into_data());
            grads.push(g.bias);
        }
        grads.extend(head_grads);
        Ok((loss, logits, grads))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["lift.kernels".to_string(), "lift.bias".to_string()];
        for i in 0..self.backbone.gconvs.len() {
            names.push(format!("gconv{i}.kernels"));
            names.push(format!("gconv{i}.bias"));
        }
        if matches!(self.head, Head::Invariant { .. }) {
            names.push("iil.exponents".into());
        }
        names.push("head.weights".into());
        names.push("head.bias".into());
        names
    }

    /// Calls `f(index, values)` on every parameter block in
    /// [`Network::param_names`] order, writing back any modification.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) -> Result<()> {
        let mut i = 0;
        let mut next = |v: &mut [f64]| {
            f(i, v);
            i += 1;
        };
        next(self.backbone.lift.kernels.data_mut());
        next(&mut self.backbone.lift.bias);
        for g in &mut self.backbone.gconvs {
            next(g.kernels.data_mut());
            next(&mut g.bias);
        }
        match &mut self.head {
            Head::Pooled { dense } => {
                next(dense.weights.data_mut());
                next(&mut dense.bias);
            }
            Head::Invariant { iil, dense, .. } => {
                let mut e = iil.exponents();
                next(&mut e);
                iil.set_exponents(&e)?;
                next(dense.weights.data_mut());
                next(&mut dense.bias);
            }
        }
        Ok(())
    }

    /// Snapshot of every parameter block with its shape.
    pub fn params(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![
            ("lift.kernels".to_string(), self.backbone.lift.kernels.shape().to_vec(), self.backbone.lift.kernels.data().to_vec()),
            ("lift.bias".to_string(), vec![self.backbone.lift.bias.len()], self.backbone.lift.bias.clone()),
        ];
        for (i, g) in self.backbone.gconvs.iter().enumerate() {
            out.push((format!("gconv{i}.kernels"), g.kernels.shape().to_vec(), g.kernels.data().to_vec()));
            out.push((format!("gconv{i}.bias"), vec![g.bias.len()], g.bias.clone()));
        }
        let dense = match &self.head {
            Head::Pooled { dense } => dense,
            Head::Invariant { iil, dense, .. } => {
                let e = iil.exponents();
                out.push(("iil.exponents".into(), vec![e.len()], e));
                dense
            }
        };
        out.push(("head.weights".into(), dense.weights.shape().to_vec(), dense.weights.data().to_vec()));
        out.push(("head.bias".into(), vec![dense.bias.len()], dense.bias.clone()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.2.len()).sum()
    }

    pub fn check_input(&self, images: &Tensor) -> Result<()> {
        if images.rank() != 4 || images.shape()[3] != self.backbone.lift.in_channels() {
            return shape_err(format!("network input must be B x H x W x {}", self.backbone.lift.in_channels()));
        }
        Ok(())
    }
}

/// SGD with classical momentum: `v <- mu v - lr g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Per-block learning-rate multipliers, indexed like the parameters.
    pub lr_scale: Vec<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        let params = net.params();
        Self {
            lr,
            momentum,
            lr_scale: vec![1.0; params.len()],
            velocity: params.iter().map(|p| vec![0.0; p.2.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return shape_err("gradient blocks do not match optimizer state");
        }
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        let scale = &self.lr_scale;
        net.visit_params_mut(|i, p| {
            let v = &mut velocity[i];
            for ((pv, vv), g) in p.iter_mut().zip(v.iter_mut()).zip(&grads[i]) {
                *vv = mu * *vv - lr * scale[i] * g;
                *pv += *vv;
            }
        })
    }
}
