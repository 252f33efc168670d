//! Synthetic multi-domain datasets, IDX file ingestion and Gaussian
//! corruption for the out-of-distribution evaluation.
//!
//! Every domain shares the exact same label counts; the domain transform
//! (rotation, per-channel scale, brightness, noise) shifts only the input
//! distribution.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::Tensor;
use crate::specfun::{RngStream, StreamPurpose};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic: first two bytes must be zero, got {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("unsupported IDX type code {0:#04x} (supported: 0x08 unsigned byte, 0x0D float)")]
    UnsupportedType(u8),
    #[error("IDX payload length mismatch: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX header truncated")]
    HeaderTruncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Input-distribution shift applied to one client's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub rotation_deg: f64,
    pub channel_scale: Vec<f64>,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn identity(channels: usize) -> Self {
        DomainSpec {
            rotation_deg: 0.0,
            channel_scale: vec![1.0; channels],
            brightness: 0.0,
            noise_sigma: 0.0,
        }
    }

    /// Default domain ladder: each client gets a progressively rotated,
    /// re-scaled, brightness-shifted and noisier view of the same classes.
    pub fn default_for(domain: usize, channels: usize) -> Self {
        const SCALES: [f64; 4] = [1.0, 0.7, 1.3, 0.55];
        const BRIGHTNESS: [f64; 4] = [0.0, 0.2, -0.15, 0.3];
        const NOISE: [f64; 4] = [0.2, 0.45, 0.3, 0.55];
        DomainSpec {
            rotation_deg: 90.0 * (domain % 4) as f64,
            channel_scale: vec![SCALES[domain % 4]; channels],
            brightness: BRIGHTNESS[domain % 4],
            noise_sigma: NOISE[domain % 4],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.channel_scale.iter().any(|s| *s <= 0.0) {
            return Err(DataError::Invalid("channel scales must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Invalid("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One client's samples with a train/test split boundary.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, H, W] or [N, D]
    pub inputs: Tensor<f32>,
    pub labels: Vec<u32>,
    pub n_train: usize,
}

/// Borrowed view of one split of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct DataSplit<'a> {
    ds: &'a Dataset,
    start: usize,
    len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample flat width.
    pub fn sample_dim(&self) -> usize {
        self.inputs.shape[1..].iter().product()
    }

    /// Per-sample shape (without the leading N).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape[1..]
    }

    pub fn train(&self) -> DataSplit<'_> {
        DataSplit {
            ds: self,
            start: 0,
            len: self.n_train,
        }
    }

    pub fn test(&self) -> DataSplit<'_> {
        DataSplit {
            ds: self,
            start: self.n_train,
            len: self.len() - self.n_train,
        }
    }
}

impl<'a> DataSplit<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Copy the samples at split-relative `indices` into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        let dim = self.ds.sample_dim();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.ds.sample_shape());
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let j = self.start + i;
            data.extend_from_slice(&self.ds.inputs.data[j * dim..(j + 1) * dim]);
            labels.push(self.ds.labels[j]);
        }
        (Tensor { shape, data }, labels)
    }
}

/// Epoch batch iterator. In train mode the epoch is shuffled from the
/// client's stream and a trailing short batch is dropped (batch-norm needs
/// full batches); in eval mode order is preserved and the tail is kept.
pub struct BatchIter<'a> {
    split: DataSplit<'a>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_last: bool,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = (Tensor<f32>, Vec<u32>);

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let idx = &self.order[self.pos..self.pos + take];
        self.pos += take;
        Some(self.split.gather(idx))
    }
}

/// Mini-batches over a split. `shuffle` draws the epoch permutation from
/// the provided stream; short-batch policy follows `drop_last`.
pub fn batches<'a>(
    split: DataSplit<'a>,
    batch_size: usize,
    shuffle: Option<&mut RngStream>,
    drop_last: bool,
) -> BatchIter<'a> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..split.len()).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    BatchIter {
        split,
        order,
        batch_size,
        pos: 0,
        drop_last,
    }
}

/// Train-mode batches: shuffled, trailing short batch dropped.
pub fn train_batches<'a>(
    split: DataSplit<'a>,
    batch_size: usize,
    rng: &mut RngStream,
) -> BatchIter<'a> {
    batches(split, batch_size, Some(rng), true)
}

/// Eval-mode batches: storage order, tail kept.
pub fn eval_batches(split: DataSplit<'_>, batch_size: usize) -> BatchIter<'_> {
    batches(split, batch_size, None, false)
}

// ---- synthetic generation ----

fn rotate_bilinear(src: &[f32], h: usize, w: usize, deg: f64, dst: &mut [f32]) {
    if deg == 0.0 {
        dst.copy_from_slice(src);
        return;
    }
    let rad = deg.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for i in 0..h {
        for j in 0..w {
            // inverse map: rotate the destination coordinate back
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = cy + dy * cos + dx * sin;
            let sx = cx - dy * sin + dx * cos;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let mut acc = 0.0f64;
            for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let yi = y0 as isize + oy;
                    let xi = x0 as isize + ox;
                    if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                        acc += wy * wx * src[yi as usize * w + xi as usize] as f64;
                    }
                }
            }
            dst[i * w + j] = acc as f32;
        }
    }
}

/// Positional cue: class k's Gaussian blob sits at angle 2*pi*k/K on a
/// circle around the image center. Domain rotation moves it, so this cue
/// is domain-specific.
fn template_value(k: usize, num_classes: usize, size: usize, i: usize, j: usize) -> f64 {
    let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
    let r = 0.3 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    let cy = c + r * angle.sin();
    let cx = c + r * angle.cos();
    let sigma = 0.10 * size as f64;
    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Invariant cue: a center-symmetric pair of blobs whose separation radius
/// encodes the class. The pair angle is drawn per sample, so the cue's
/// distribution is exactly rotation-invariant, and every class carries the
/// same total energy.
fn blob_pair_value(
    k: usize,
    num_classes: usize,
    size: usize,
    theta: f64,
    i: usize,
    j: usize,
) -> f64 {
    let c = (size as f64 - 1.0) / 2.0;
    let rho = (0.10 + 0.26 * k as f64 / (num_classes - 1) as f64) * size as f64;
    let sigma = 0.10 * size as f64;
    let (sy, sx) = (rho * theta.sin(), rho * theta.cos());
    let d1 = (i as f64 - (c + sy)).powi(2) + (j as f64 - (c + sx)).powi(2);
    let d2 = (i as f64 - (c - sy)).powi(2) + (j as f64 - (c - sx)).powi(2);
    (-d1 / (2.0 * sigma * sigma)).exp() + (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Balanced label sequence for one split: equal class counts, order
/// shuffled from the domain stream.
fn balanced_labels(n: usize, k: usize, rng: &mut RngStream) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Apply a domain transform to a single [C, H, W] sample in place.
fn apply_domain(
    spec: &DomainSpec,
    sample: &mut [f32],
    channels: usize,
    h: usize,
    w: usize,
    rng: &mut RngStream,
    scratch: &mut Vec<f32>,
) {
    scratch.resize(h * w, 0.0);
    for c in 0..channels {
        let plane = &mut sample[c * h * w..(c + 1) * h * w];
        if spec.rotation_deg != 0.0 {
            scratch.copy_from_slice(plane);
            rotate_bilinear(scratch, h, w, spec.rotation_deg, plane);
        }
        let scale = spec.channel_scale[c.min(spec.channel_scale.len() - 1)] as f32;
        for v in plane.iter_mut() {
            *v = *v * scale + spec.brightness as f32;
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in sample.iter_mut() {
            *v += (spec.noise_sigma * rng.standard_normal()) as f32;
        }
    }
}

/// Generate one dataset per domain. Every domain draws the same blob
/// classes with identical label counts, then applies its own
/// [`DomainSpec`]; everything is keyed off `base_seed`.
pub fn make_synthetic(
    base_seed: u64,
    specs: &[DomainSpec],
    per_domain_train: usize,
    per_domain_test: usize,
    num_classes: usize,
    image_size: usize,
) -> Result<Vec<Dataset>, DataError> {
    if specs.len() < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 domains, got {}",
            specs.len()
        )));
    }
    if num_classes < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if image_size < 4 {
        return Err(DataError::Invalid(format!(
            "image_size must be >= 4, got {image_size}"
        )));
    }
    if per_domain_train == 0 || per_domain_test == 0 {
        return Err(DataError::Invalid(
            "per-domain sample counts must be positive".into(),
        ));
    }
    for spec in specs {
        spec.validate()?;
    }

    let (h, w) = (image_size, image_size);
    let mut datasets = Vec::with_capacity(specs.len());
    for (d, spec) in specs.iter().enumerate() {
        let mut rng = RngStream::derive(base_seed, StreamPurpose::DataGen, d as u64);
        let n = per_domain_train + per_domain_test;
        let mut labels = balanced_labels(per_domain_train, num_classes, &mut rng);
        labels.extend(balanced_labels(per_domain_test, num_classes, &mut rng));
        let mut data = vec![0.0f32; n * h * w];
        let mut scratch = Vec::new();
        for (s, &label) in labels.iter().enumerate() {
            // independent per-sample cue dropout: some samples carry only
            // the positional cue, some only the invariant one
            let amp_pos = if rng.uniform() < 0.35 {
                rng.uniform_range(0.0, 0.12)
            } else {
                rng.uniform_range(0.85, 1.2)
            };
            let amp_pair = if rng.uniform() < 0.25 {
                rng.uniform_range(0.0, 0.12)
            } else {
                rng.uniform_range(0.85, 1.2)
            };
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
            let jy = 0.8 * rng.standard_normal();
            let jx = 0.8 * rng.standard_normal();
            let sample = &mut data[s * h * w..(s + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    // jitter both cues by sampling the templates off-center
                    let ii = (i as f64 - jy).round().clamp(0.0, (h - 1) as f64) as usize;
                    let jj = (j as f64 - jx).round().clamp(0.0, (w - 1) as f64) as usize;
                    let base = amp_pos
                        * template_value(label as usize, num_classes, image_size, ii, jj)
                        + amp_pair
                            * blob_pair_value(
                                label as usize,
                                num_classes,
                                image_size,
                                theta,
                                ii,
                                jj,
                            );
                    sample[i * w + j] = (base + 0.05 * rng.standard_normal()) as f32;
                }
            }
            apply_domain(spec, sample, 1, h, w, &mut rng, &mut scratch);
        }
        datasets.push(Dataset {
            inputs: Tensor {
                shape: vec![n, 1, h, w],
                data,
            },
            labels,
            n_train: per_domain_train,
        });
    }
    Ok(datasets)
}

/// [`make_synthetic`] with the default domain ladder.
pub fn make_synthetic_default(
    base_seed: u64,
    num_domains: usize,
    per_domain_train: usize,
    per_domain_test: usize,
    num_classes: usize,
    image_size: usize,
) -> Result<Vec<Dataset>, DataError> {
    let specs: Vec<DomainSpec> = (0..num_domains)
        .map(|d| DomainSpec::default_for(d, 1))
        .collect();
    make_synthetic(
        base_seed,
        &specs,
        per_domain_train,
        per_domain_test,
        num_classes,
        image_size,
    )
}

// ---- IDX format ----

const IDX_TYPE_U8: u8 = 0x08;
const IDX_TYPE_F32: u8 = 0x0D;

/// Parse a big-endian IDX file. Byte data is scaled to [0, 1]; float data
/// is returned as stored.
pub fn read_idx(path: &Path) -> Result<Tensor<f32>, IdxError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_idx_bytes(&bytes)
}

pub fn read_idx_bytes(bytes: &[u8]) -> Result<Tensor<f32>, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::HeaderTruncated);
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    let type_code = bytes[2];
    if type_code != IDX_TYPE_U8 && type_code != IDX_TYPE_F32 {
        return Err(IdxError::UnsupportedType(type_code));
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(IdxError::HeaderTruncated);
    }
    let mut shape = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        shape.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let elem = if type_code == IDX_TYPE_U8 { 1 } else { 4 };
    let expected = header_len + numel * elem;
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            expected: expected - header_len,
            actual: bytes.len() - header_len,
        });
    }
    let payload = &bytes[header_len..];
    let data: Vec<f32> = if type_code == IDX_TYPE_U8 {
        payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
            .collect()
    };
    Ok(Tensor { shape, data })
}

/// Write a tensor as an IDX float (0x0D) file.
pub fn write_idx_f32(path: &Path, t: &Tensor<f32>) -> Result<(), IdxError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&[0, 0, IDX_TYPE_F32, t.shape.len() as u8])?;
    for d in &t.shape {
        f.write_all(&(*d as u32).to_be_bytes())?;
    }
    for v in &t.data {
        f.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Write a tensor as an IDX unsigned-byte (0x08) file; values are clamped
/// to [0, 1] and scaled to 0..=255.
pub fn write_idx_u8(path: &Path, t: &Tensor<f32>) -> Result<(), IdxError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&[0, 0, IDX_TYPE_U8, t.shape.len() as u8])?;
    for d in &t.shape {
        f.write_all(&(*d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = t
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Labels stored as a rank-1 IDX byte file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>, IdxError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(IdxError::HeaderTruncated);
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    if bytes[2] != IDX_TYPE_U8 {
        return Err(IdxError::UnsupportedType(bytes[2]));
    }
    if bytes[3] != 1 {
        return Err(IdxError::UnsupportedType(bytes[3]));
    }
    if bytes.len() < 8 {
        return Err(IdxError::HeaderTruncated);
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n {
        return Err(IdxError::Truncated {
            expected: n,
            actual: bytes.len() - 8,
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as u32).collect())
}

/// x + sigma * N(0, 1) drawn i.i.d. per element; the input is left
/// untouched and no clipping is applied (clipping would truncate the noise
/// distribution the OOD check relies on).
pub fn corrupt_gaussian(x: &Tensor<f32>, sigma: f64, rng: &mut RngStream) -> Tensor<f32> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return x.clone();
    }
    let data = x
        .data
        .iter()
        .map(|v| v + (sigma * rng.standard_normal()) as f32)
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}
