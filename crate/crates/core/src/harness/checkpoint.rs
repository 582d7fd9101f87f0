//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! | field | size |
//! |---|---|
//! | magic `b"INVINTCK"` | 8 bytes |
//! | format version (currently 1) | u32 |
//! | metadata length `L` | u64 |
//! | metadata, UTF-8 JSON | `L` bytes |
//! | tensor count `T` | u32 |
//! | `T` tensor records | |
//!
//! A tensor record is a name length (u32), the UTF-8 name, the rank (u32),
//! one u64 per dimension, then the row-major values as f64.
//!
//! The metadata object holds `topology` (layer kinds, orientations, strides),
//! `head` (kind, and for the invariant head the monomials, shift statistics
//! and angle count), and `config`, the run configuration if one is known.
//! Tensor names match [`Network::param_names`] plus `head.norm.mean` and
//! `head.norm.std` for the invariant head.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DenseLayer, GroupConvLayer, LiftingConvLayer, Standardize};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::iil::IILayerState;
use crate::network::{Head, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"INVINTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Topology {
    pub num_orientations: usize,
    pub lift_stride: usize,
    pub gconv_strides: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadMeta {
    Pooled,
    Invariant { iil: IILayerState },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metadata {
    pub topology: Topology,
    pub head: HeadMeta,
    pub config: Option<TrainConfig>,
}

fn tensors_of(net: &Network) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = net.params();
    if let Head::Invariant { norm, .. } = &net.head {
        out.push(("head.norm.mean".into(), vec![norm.mean.len()], norm.mean.clone()));
        out.push(("head.norm.std".into(), vec![norm.std.len()], norm.std.clone()));
    }
    out
}

pub fn to_bytes(net: &Network, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let meta = Metadata {
        topology: Topology {
            num_orientations: net.backbone.lift.num_orientations,
            lift_stride: net.backbone.lift.stride,
            gconv_strides: net.backbone.gconvs.iter().map(|g| g.stride).collect(),
        },
        head: match &net.head {
            Head::Pooled { .. } => HeadMeta::Pooled,
            Head::Invariant { iil, .. } => HeadMeta::Invariant { iil: iil.clone() },
        },
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = tensors_of(net);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(path: &Path, net: &Network, config: Option<&TrainConfig>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(net, config)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, message: format!("truncated {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format { offset: at, message: format!("{what} overflows") })
    }
}

/// Parses a container into its metadata and named tensors.
pub fn parse(bytes: &[u8]) -> Result<(Metadata, BTreeMap<String, Tensor>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "not a model checkpoint (bad magic)".into() });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 8, message: format!("unsupported checkpoint version {version}") });
    }
    let meta_len = c.len("metadata length")?;
    let meta_at = c.pos as u64;
    let meta: Metadata = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format { offset: meta_at, message: format!("metadata: {e}") })?;
    let count = c.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let name_len = c.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format { offset: at, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = c.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| c.len("tensor dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or(Error::Format { offset: at, message: "tensor too large".into() })?, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format { offset: at, message: format!("duplicate tensor {name}") });
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format { offset: c.pos as u64, message: "trailing bytes".into() });
    }
    Ok((meta, tensors))
}

fn take_tensor(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Format { offset: 0, message: format!("missing tensor {name}") })
}

/// Rebuilds a network (and the embedded config, if any) from container bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Network, Option<TrainConfig>)> {
    let (meta, mut t) = parse(bytes)?;
    let topo = &meta.topology;
    let lift = LiftingConvLayer::new(
        take_tensor(&mut t, "lift.kernels")?,
        take_tensor(&mut t, "lift.bias")?.into_data(),
        topo.num_orientations,
        topo.lift_stride,
    )?;
    let mut gconvs = Vec::new();
    for (i, &stride) in topo.gconv_strides.iter().enumerate() {
        gconvs.push(GroupConvLayer::new(
            take_tensor(&mut t, &format!("gconv{i}.kernels"))?,
            take_tensor(&mut t, &format!("gconv{i}.bias"))?.into_data(),
            stride,
        )?);
    }
    let dense = DenseLayer::new(take_tensor(&mut t, "head.weights")?, take_tensor(&mut t, "head.bias")?.into_data())?;
    let head = match meta.head {
        HeadMeta::Pooled => Head::Pooled { dense },
        HeadMeta::Invariant { mut iil } => {
            iil.set_exponents(take_tensor(&mut t, "iil.exponents")?.data())?;
            let norm = Standardize {
                mean: take_tensor(&mut t, "head.norm.mean")?.into_data(),
                std: take_tensor(&mut t, "head.norm.std")?.into_data(),
            };
            Head::Invariant { iil, norm, dense }
        }
    };
    if let Some(name) = t.keys().next() {
        return Err(Error::Format { offset: 0, message: format!("unexpected tensor {name}") });
    }
    Ok((Network { backbone: Backbone { lift, gconvs }, head }, meta.config))
}

pub fn load(path: &Path) -> Result<(Network, Option<TrainConfig>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
