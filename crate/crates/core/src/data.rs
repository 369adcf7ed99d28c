//! Dataset generation, IDX ingestion and image-grid export.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiecError, Result};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticShapes,
    SyntheticGaussianDigits,
    IdxPair,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Pixels mapped affinely to `[-1, 1]`.
    #[default]
    SymmetricUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub image_size: usize,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise for synthetic kinds.
    pub noise: f64,
    /// Maximum placement offset in pixels for synthetic kinds.
    pub jitter: usize,
    /// Relative half-range of the per-sample shape scale.
    #[serde(default)]
    pub scale_jitter: f64,
    pub normalization: Normalization,
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::SyntheticShapes,
            image_size: 16,
            classes: 4,
            per_class: 64,
            seed: 7,
            noise: 0.6,
            jitter: 1,
            scale_jitter: 0.0,
            normalization: Normalization::SymmetricUnit,
            idx_images: None,
            idx_labels: None,
        }
    }
}

pub const MAX_SHAPE_CLASSES: usize = 6;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(DiecError::param("image size must be at least 8"));
        }
        if !(0.0..0.9).contains(&self.scale_jitter) {
            return Err(DiecError::param("scale jitter must lie in [0, 0.9)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DiecError::param("noise amplitude must be finite and non-negative"));
        }
        match self.kind {
            DatasetKind::SyntheticShapes if !(1..=MAX_SHAPE_CLASSES).contains(&self.classes) => {
                Err(DiecError::param(format!("synthetic shapes support 1..={MAX_SHAPE_CLASSES} classes")))
            }
            DatasetKind::SyntheticGaussianDigits if self.classes == 0 => Err(DiecError::param("class count must be positive")),
            DatasetKind::IdxPair if self.idx_images.is_none() || self.idx_labels.is_none() => {
                Err(DiecError::param("idx-pair datasets need image and label paths"))
            }
            _ if 2 * self.jitter >= self.image_size => Err(DiecError::param("placement jitter too large for image size")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 1, S, S]` in `[-1, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn images_of(&self, class: usize) -> impl Iterator<Item = &[f32]> {
        (0..self.labels.len()).filter(move |&i| self.labels[i] == class).map(|i| self.images.row(i))
    }
}

/// Shape intensity in `[0, 1]` at pixel `(y, x)` for class `c` centred at
/// `(cy, cx)` with scale `r`.
fn shape_value(c: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> f64 {
    let (dy, dx) = (y - cy, x - cx);
    let soft = |d: f64| (1.0 - d).clamp(0.0, 1.0);
    match c {
        // horizontal bar
        0 => soft(dy.abs() / (0.5 * r)) * soft((dx.abs() - r).max(0.0)),
        // vertical bar
        1 => soft(dx.abs() / (0.5 * r)) * soft((dy.abs() - r).max(0.0)),
        // ring
        2 => soft(((dy * dy + dx * dx).sqrt() - r).abs() / (0.3 * r)),
        // filled disc
        3 => soft(((dy * dy + dx * dx).sqrt() - 0.9 * r).max(0.0)),
        // cross
        4 => soft(dy.abs().min(dx.abs()) / (0.25 * r)) * soft((dy.abs().max(dx.abs()) - r).max(0.0)),
        // diagonal stroke
        _ => soft((dy - dx).abs() / (0.35 * r)) * soft(((dy + dx).abs() / 2.0 - 0.8 * r).max(0.0)),
    }
}

fn render_shape(spec: &DatasetSpec, class: usize, rng: &mut Rng) -> Vec<f32> {
    let s = spec.image_size;
    let mid = (s as f64 - 1.0) / 2.0;
    let j = spec.jitter as i64;
    let off = |rng: &mut Rng| if j == 0 { 0.0 } else { (rng.below((2 * j + 1) as usize) as i64 - j) as f64 };
    let (cy, cx) = (mid + off(rng), mid + off(rng));
    let r = s as f64 * 0.25 * (1.0 + spec.scale_jitter * (2.0 * rng.uniform() - 1.0));
    let mut img = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let v = -1.0 + 2.0 * shape_value(class, y as f64, x as f64, cy, cx, r);
            let noisy = if spec.noise > 0.0 { v + spec.noise * rng.normal() } else { v };
            img.push(noisy.clamp(-1.0, 1.0) as f32);
        }
    }
    img
}

fn class_prototypes(spec: &DatasetSpec) -> Vec<Vec<(f64, f64, f64)>> {
    let mut rng = Rng::new(spec.seed).substream(1);
    let s = spec.image_size as f64;
    (0..spec.classes)
        .map(|_| (0..3).map(|_| (s * (0.25 + 0.5 * rng.uniform()), s * (0.25 + 0.5 * rng.uniform()), s * (0.08 + 0.06 * rng.uniform()))).collect())
        .collect()
}

fn render_bumps(spec: &DatasetSpec, bumps: &[(f64, f64, f64)], rng: &mut Rng) -> Vec<f32> {
    let s = spec.image_size;
    let j = spec.jitter.min(1) as i64;
    let dy = if j == 0 { 0.0 } else { (rng.below(3) as i64 - 1) as f64 };
    let dx = if j == 0 { 0.0 } else { (rng.below(3) as i64 - 1) as f64 };
    let mut img = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let v: f64 = bumps
                .iter()
                .map(|&(by, bx, w)| {
                    let d2 = (y as f64 - by - dy).powi(2) + (x as f64 - bx - dx).powi(2);
                    (-d2 / (2.0 * w * w)).exp()
                })
                .sum::<f64>()
                .min(1.0);
            let v = -1.0 + 2.0 * v;
            let noisy = if spec.noise > 0.0 { v + spec.noise * rng.normal() } else { v };
            img.push(noisy.clamp(-1.0, 1.0) as f32);
        }
    }
    img
}

/// Deterministic synthetic dataset; sample `i` has class `i % classes`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let root = Rng::new(spec.seed);
    let protos = match spec.kind {
        DatasetKind::SyntheticGaussianDigits => class_prototypes(spec),
        DatasetKind::SyntheticShapes => vec![],
        DatasetKind::IdxPair => return Err(DiecError::param("idx-pair datasets are loaded, not generated")),
    };
    for i in 0..n {
        let class = i % spec.classes;
        let mut rng = root.substream_path(&[0, i as u64]);
        let img = match spec.kind {
            DatasetKind::SyntheticShapes => render_shape(spec, class, &mut rng),
            _ => render_bumps(spec, &protos[class], &mut rng),
        };
        data.extend(img);
        labels.push(class);
    }
    Ok(Dataset { images: Tensor::new(vec![n, 1, s, s], data)?, labels, classes: spec.classes })
}

/// Loads the dataset described by `spec`, padding IDX images to `image_size`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::IdxPair => {
            spec.validate()?;
            let (img, labels) = load_idx(
                Path::new(spec.idx_images.as_deref().unwrap_or_default()),
                Path::new(spec.idx_labels.as_deref().unwrap_or_default()),
            )?;
            let images = center_pad(&img, spec.image_size)?;
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            if classes != spec.classes {
                return Err(DiecError::Format(format!("labels contain {classes} classes, config says {}", spec.classes)));
            }
            Ok(Dataset { images, labels, classes })
        }
        _ => generate_synthetic(spec),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DiecError::Format("truncated IDX header".into()))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decodes IDX image bytes into `[N, 1, rows, cols]` in `[-1, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor> {
    if be_u32(bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(DiecError::Format("bad IDX image magic".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = n * rows * cols;
    let payload = bytes.get(16..16 + len).ok_or_else(|| DiecError::Format("truncated IDX image payload".into()))?;
    if bytes.len() != 16 + len {
        return Err(DiecError::Format("trailing bytes after IDX image payload".into()));
    }
    let data = payload.iter().map(|&b| (b as f64 / 127.5 - 1.0) as f32).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if be_u32(bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(DiecError::Format("bad IDX label magic".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or_else(|| DiecError::Format("truncated IDX label payload".into()))?;
    if bytes.len() != 8 + n {
        return Err(DiecError::Format("trailing bytes after IDX label payload".into()));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| DiecError::Format(format!("{}: {e}", path.display())))?;
    Ok(buf)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let img = decode_idx_images(&read_file(images)?)?;
    let lab = decode_idx_labels(&read_file(labels)?)?;
    if img.rows() != lab.len() {
        return Err(DiecError::Format(format!("{} images but {} labels", img.rows(), lab.len())));
    }
    Ok((img, lab))
}

/// Centers `[N, C, h, w]` images on a `size x size` canvas filled with -1.
pub fn center_pad(images: &Tensor, size: usize) -> Result<Tensor> {
    let [n, c, h, w] = images.shape() else {
        return Err(DiecError::shape("expected NCHW images"));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if h > size || w > size {
        return Err(DiecError::Format(format!("{h}x{w} images exceed model input {size}x{size}")));
    }
    if h == size && w == size {
        return Ok(images.clone());
    }
    let (oy, ox) = ((size - h) / 2, (size - w) / 2);
    let mut out = vec![-1.0f32; n * c * size * size];
    for p in 0..n * c {
        for y in 0..h {
            let src = &images.data()[p * h * w + y * w..p * h * w + (y + 1) * w];
            let dst = p * size * size + (oy + y) * size + ox;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, c, size, size], out)
}

/// Tiles `[N, C, S, S]` images (C = 1 or 3) into a binary PGM (P5) or PPM (P6)
/// grid with `cols` columns and a one-pixel border.
pub fn image_grid(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.shape() else {
        return Err(DiecError::shape("expected NCHW images"));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if c != 1 && c != 3 {
        return Err(DiecError::shape(format!("grids need 1 or 3 channels, got {c}")));
    }
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh * c];
    let to_byte = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    for i in 0..n {
        let (gy, gx) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = images.data()[((i * c + ch) * h + y) * w + x];
                    px[((gy + y) * gw + gx + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    let mut out = format!("{}\n{gw} {gh}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    out.extend(px);
    Ok(out)
}
