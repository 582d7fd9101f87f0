//! Datasets: IDX reading/writing, synthetic rotated glyphs, a planted-pair
//! fixture for selection, stratified subsets, and rotation augmentation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::sampling::rotate_plane;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `B x H x W x C` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return shape_err(format!(
                "images {:?} vs {} labels",
                images.shape(),
                labels.len()
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (h, w, c) = self.image_dims();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new(vec![indices.len(), h, w, c], data).expect("consistent gather");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset { images, labels, num_classes: self.num_classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Train, validation and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: self.offset,
            message: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

fn open_idx(path: &Path, magic: u32) -> Result<(ByteReader<BufReader<File>>, Vec<usize>)> {
    let mut r = ByteReader { inner: BufReader::new(File::open(path)?), offset: 0 };
    let got = r.u32_be("magic number")?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{got:08x} in {}, expected 0x{magic:08x}", path.display()),
        });
    }
    let dims = (magic & 0xff) as usize;
    let shape = (0..dims)
        .map(|i| r.u32_be(&format!("dimension {i}")).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((r, shape))
}

fn read_images(path: &Path) -> Result<Tensor> {
    let (mut r, shape) = open_idx(path, IDX_IMAGES_MAGIC)?;
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut bytes = vec![0u8; n * h * w];
    r.exact(&mut bytes, "pixel data")?;
    Tensor::new(vec![n, h, w, 1], bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let (mut r, shape) = open_idx(path, IDX_LABELS_MAGIC)?;
    let mut bytes = vec![0u8; shape[0]];
    r.exact(&mut bytes, "label data")?;
    Ok(bytes.into_iter().map(usize::from).collect())
}

/// Reads an IDX image file (`0x00000803`, u8 pixels scaled to `[0, 1]`) and
/// its label file (`0x00000801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.shape()[0], labels.len()),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, num_classes)
}

/// Writes single-channel images (values clamped to `[0, 1]`, quantized to
/// u8) and labels as IDX files.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w, c) = ds.image_dims();
    if c != 1 {
        return shape_err("IDX export supports single-channel images");
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::Config("IDX labels must fit in one byte".into()));
    }
    let mut f = BufWriter::new(File::create(images_path)?);
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [ds.len(), h, w] {
        f.write_all(&(d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(labels_path)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(ds.len() as u32).to_be_bytes())?;
    f.write_all(&ds.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    f.flush()?;
    Ok(())
}

/// Glyph classes of the synthetic task, each a set of stroke arms leaving
/// the glyph center at the given angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Glyph {
    Bar,
    Corner,
    Cross,
    Tee,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Bar, Glyph::Corner, Glyph::Cross, Glyph::Tee];

    fn arms(self) -> &'static [f64] {
        match self {
            Glyph::Bar => &[0.0, 1.0],
            Glyph::Corner => &[0.0, 0.5],
            Glyph::Cross => &[0.0, 0.5, 1.0, 1.5],
            Glyph::Tee => &[0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one glyph with random orientation, arm length and center jitter
/// into a `size x size` plane.
pub fn render_glyph(glyph: Glyph, size: usize, rng: &mut impl Rng, noise: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let center = (half + rng.random_range(-1.0..1.0), half + rng.random_range(-1.0..1.0));
    let theta = rng.random_range(0.0..2.0 * PI);
    let arm = size as f64 * rng.random_range(0.28..0.38);
    let width = 0.7;
    let ends: Vec<(f64, f64)> = glyph
        .arms()
        .iter()
        .map(|a| {
            let phi = theta + a * PI;
            (center.0 + arm * phi.sin(), center.1 + arm * phi.cos())
        })
        .collect();
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("valid noise");
    let mut plane = vec![0.0; size * size];
    for (i, v) in plane.iter_mut().enumerate() {
        let p = ((i / size) as f64, (i % size) as f64);
        let d = ends.iter().map(|&e| segment_distance(p, center, e)).fold(f64::INFINITY, f64::min);
        let ink = (1.0 - (d - width)).clamp(0.0, 1.0);
        *v = ink + if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
    }
    plane
}

fn glyph_split(n: usize, spec: &SyntheticSpec, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream));
    let s = spec.image_size;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % Glyph::ALL.len();
        data.extend(render_glyph(Glyph::ALL[class], s, &mut rng, spec.noise));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, s, s, 1], data).expect("sized"), labels, Glyph::ALL.len()).expect("valid labels")
}

/// Deterministic glyph dataset; classes are assigned round-robin, so every
/// split is balanced within one sample per class.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.train == 0 || spec.val == 0 || spec.test == 0 || spec.image_size < 3 {
        return Err(Error::Config("synthetic splits need >= 1 sample and image_size >= 3".into()));
    }
    Ok(Splits {
        train: glyph_split(spec.train, spec, 1),
        val: glyph_split(spec.val, spec, 2),
        test: glyph_split(spec.test, spec, 3),
    })
}

/// Shifted-feature fixture for monomial selection: a constant background of
/// 1 with two bright dots, 2 pixels apart along an axis for class 0 and 4
/// apart for class 1, placed at least `margin` pixels from every edge.
pub fn planted_pairs(n: usize, size: usize, margin: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if size < 2 * margin + 5 {
        return Err(Error::Config("planted map too small for the margin".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![1.0; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = s % 2;
        let sep = if class == 0 { 2 } else { 4 };
        let (dr, dc) = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)][rng.random_range(0..4)];
        let lo = margin as i64 + 4;
        let hi = (size - margin) as i64 - 4;
        let (r0, c0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let (r1, c1) = (r0 + dr * sep, c0 + dc * sep);
        let base = s * size * size;
        data[base + r0 as usize * size + c0 as usize] = 3.0;
        data[base + r1 as usize * size + c1 as usize] = 3.0;
        labels.push(class);
    }
    Ok((Tensor::new(vec![n, size, size, 1], data)?, labels))
}

/// Stratified subset of `ceil(fraction * len)` items: each class keeps
/// within one item of `fraction` of its size. Order is preserved.
pub fn stratified_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let target = (fraction * ds.len() as f64).ceil() as usize;
    let counts = ds.class_counts();
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(alloc.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(target);
    for (class, &k) in alloc.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Rotates every image of a batch by its own uniform angle in `[0, 2 pi)`.
pub fn augment_random_rotation(images: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if images.rank() != 4 {
        return shape_err("expected B x H x W x C");
    }
    let s = images.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = images.clone();
    let mut plane = vec![0.0; h * w];
    for n in 0..b {
        let angle = rng.random_range(0.0..2.0 * PI);
        for ch in 0..c {
            crate::sampling::extract_plane(images.data(), n, ch, h, w, c, &mut plane);
            let rotated = rotate_plane(&plane, h, w, angle);
            crate::sampling::insert_plane(out.data_mut(), n, ch, h, w, c, &rotated);
        }
    }
    Ok(out)
}
