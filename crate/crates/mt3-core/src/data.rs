//! Dataset ingestion and generation: CIFAR-10 binary batches, NPY u8 arrays
//! (with a companion writer for fixtures), a procedurally generated
//! desk-scale dataset, and parametric corruption kernels.
//!
//! Readers validate headers and sizes before building anything, so a
//! malformed file never yields a partial dataset.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// One H x W x 3 image, values in [0, 1], row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageHwc {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageHwc {
    pub fn zeros(h: usize, w: usize) -> Self {
        ImageHwc {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }
}

/// N images with labels; images stored as one flat [N, H, W, 3] buffer.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    /// Source file hashes or generator description, for report traceability.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ImageHwc {
        let px = self.h * self.w * 3;
        ImageHwc {
            h: self.h,
            w: self.w,
            data: self.images[i * px..(i + 1) * px].to_vec(),
        }
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// Image range [start, end), e.g. one severity level of a stacked file.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument {
                op: "dataset-slice",
                msg: format!("range {start}..{end} invalid for {} images", self.len()),
            });
        }
        let px = self.h * self.w * 3;
        Ok(Dataset {
            name: format!("{}[{start}..{end}]", self.name),
            h: self.h,
            w: self.w,
            images: self.images[start * px..end * px].to_vec(),
            labels: self.labels[start..end].to_vec(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn replace_images(&self, name: String, images: Vec<f32>) -> Dataset {
        assert_eq!(images.len(), self.images.len());
        Dataset {
            name,
            h: self.h,
            w: self.w,
            images,
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- CIFAR-10 binary ----------------------------------------------------

const CIFAR_RECORD: usize = 3073; // label byte + 3 * 1024 plane bytes

/// CIFAR-10 binary batch: records of one label byte followed by 3072 pixel
/// bytes in plane-major R,G,B row-major order. Pixels scale by 1/255.
pub fn read_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(
            path.display().to_string(),
            format!(
                "size {} is not a positive multiple of the {CIFAR_RECORD}-byte record (truncated or not a CIFAR-10 batch)",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::data(
                path.display().to_string(),
                format!("record {i} has label byte {} > 9", rec[0]),
            ));
        }
    }
    let mut images = vec![0f32; n * 32 * 32 * 3];
    let mut labels = vec![0u8; n];
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        labels[i] = rec[0];
        let base = i * 32 * 32 * 3;
        for c in 0..3 {
            for p in 0..1024 {
                images[base + p * 3 + c] = rec[1 + c * 1024 + p] as f32 / 255.0;
            }
        }
    }
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cifar10".into()),
        h: 32,
        w: 32,
        images,
        labels,
        provenance: format!("sha256:{}", sha256_hex(&bytes)),
    })
}

// ---- NPY ------------------------------------------------------------------

/// Dense u8 NPY array (dtype `|u1`, C order, version 1.0 or 2.0).
#[derive(Clone, Debug, PartialEq)]
pub struct NpyU8 {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

fn npy_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::data(path.display().to_string(), msg.into())
}

pub fn read_npy_u8(path: &Path) -> Result<NpyU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_npy_u8(&bytes).map_err(|msg| npy_err(path, msg))
}

fn parse_npy_u8(bytes: &[u8]) -> std::result::Result<NpyU8, String> {
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err("magic string \\x93NUMPY missing".into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err("truncated version 2.0 header length".into());
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => return Err(format!("unsupported format version {major}.{minor}")),
    };
    if bytes.len() < header_start + header_len {
        return Err("header extends past end of file".into());
    }
    let header = std::str::from_utf8(&bytes[header_start..header_start + header_len])
        .map_err(|_| "header is not valid utf-8".to_string())?;

    let descr = dict_field(header, "descr")?;
    if descr != "'|u1'" && descr != "\"|u1\"" {
        return Err(format!("unsupported descr {descr}, expected '|u1'"));
    }
    let order = dict_field(header, "fortran_order")?;
    if order != "False" {
        return Err(format!("fortran_order {order} unsupported, expected False"));
    }
    let shape_src = dict_field(header, "shape")?;
    let shape = parse_shape(&shape_src)?;

    let expected: usize = shape.iter().product();
    let body = &bytes[header_start + header_len..];
    if body.len() != expected {
        return Err(format!(
            "shape {shape:?} implies {expected} bytes, file body has {}",
            body.len()
        ));
    }
    Ok(NpyU8 {
        shape,
        data: body.to_vec(),
    })
}

/// Extract the value of `'key':` from the header dict literal.
fn dict_field(header: &str, key: &str) -> std::result::Result<String, String> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| format!("header field '{key}' missing"))?;
    let rest = header[at + pat.len()..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| format!("header field '{key}' unterminated"))?;
    Ok(rest[..end].trim().to_string())
}

fn parse_shape(src: &str) -> std::result::Result<Vec<usize>, String> {
    let inner = src
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format!("shape {src} is not a tuple"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| format!("shape element `{s}` is not an integer"))
        })
        .collect()
}

/// Companion writer (version 1.0, header padded to a 64-byte boundary).
pub fn write_npy_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::InvalidArgument {
            op: "write-npy",
            msg: format!("shape {shape:?} implies {expected} bytes, got {}", data.len()),
        });
    }
    let shape_txt = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '|u1', 'fortran_order': False, 'shape': {shape_txt}, }}");
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Images dataset from a [N,32,32,3] u8 NPY plus a [N] u8 label NPY.
/// `severity_slice` selects an image range of a stacked file (levels are
/// packed ascending, 10,000 images per level in the published packaging).
pub fn dataset_from_npy(
    images_path: &Path,
    labels_path: &Path,
    name: &str,
    severity_slice: Option<(usize, usize)>,
) -> Result<Dataset> {
    let imgs = read_npy_u8(images_path)?;
    if imgs.shape.len() != 4 || imgs.shape[3] != 3 {
        return Err(npy_err(
            images_path,
            format!("expected image shape [N,H,W,3], got {:?}", imgs.shape),
        ));
    }
    let labels = read_npy_u8(labels_path)?;
    if labels.shape.len() != 1 {
        return Err(npy_err(
            labels_path,
            format!("expected label shape [N], got {:?}", labels.shape),
        ));
    }
    let (n_img, h, w) = (imgs.shape[0], imgs.shape[1], imgs.shape[2]);
    let (start, end) = severity_slice.unwrap_or((0, n_img));
    if start >= end || end > n_img {
        return Err(npy_err(
            images_path,
            format!("slice {start}..{end} invalid for {n_img} images"),
        ));
    }
    let n = end - start;
    let n_lab = labels.shape[0];
    let provenance = format!(
        "images sha256:{}; labels sha256:{}",
        sha256_hex(&imgs.data),
        sha256_hex(&labels.data)
    );
    // labels either cover the full stack or exactly the requested slice
    let labels = if n_lab == n_img {
        labels.data[start..end].to_vec()
    } else if n_lab == n {
        labels.data
    } else {
        return Err(npy_err(
            labels_path,
            format!("{n_lab} labels for slice {start}..{end} of {n_img} images"),
        ));
    };
    let px = h * w * 3;
    Ok(Dataset {
        name: name.to_string(),
        h,
        w,
        images: imgs.data[start * px..end * px]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect(),
        labels,
        provenance,
    })
}

// ---- synthetic dataset ------------------------------------------------------

/// Class-conditional textures: three flip-invariant pattern families (axis
/// plaid, rings, diagonal plaid) crossed with frequency tiers, plus per-image
/// nuisance variation in phase, amplitude, channel gain and noise.
pub fn synth_dataset(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if resolution < 8 {
        return Err(Error::InvalidArgument {
            op: "synth-dataset",
            msg: format!("resolution {resolution} below minimum 8"),
        });
    }
    if classes == 0 || classes > 12 || per_class == 0 {
        return Err(Error::InvalidArgument {
            op: "synth-dataset",
            msg: format!("unsupported classes={classes} per_class={per_class}"),
        });
    }
    let freqs = [2.0f32, 3.5, 5.5, 8.0];
    let n = classes * per_class;
    let px = resolution * resolution * 3;
    let mut images = vec![0f32; n * px];
    let mut labels = vec![0u8; n];
    for idx in 0..n {
        let class = idx % classes;
        labels[idx] = class as u8;
        let kind = class % 3;
        let freq = freqs[class / 3];
        let mut r = rng::stream(seed, &[0x73796e7468, idx as u64]);
        let amp: f32 = r.random_range(0.55..0.95);
        let gains = [
            r.random_range(0.65..1.0f32),
            r.random_range(0.65..1.0f32),
            r.random_range(0.65..1.0f32),
        ];
        let p1: f32 = r.random_range(0.0..1.0);
        let p2: f32 = r.random_range(0.0..1.0);
        let (cu, cv) = (
            0.5 + r.random_range(-0.2..0.2f32),
            0.5 + r.random_range(-0.2..0.2f32),
        );
        let noise = Normal::new(0.0f32, 0.02).expect("positive sigma");
        let tau = std::f32::consts::TAU;
        for y in 0..resolution {
            for x in 0..resolution {
                let u = x as f32 / resolution as f32;
                let v = y as f32 / resolution as f32;
                let pat = match kind {
                    0 => 0.5 * ((tau * freq * (u + p1)).sin() + (tau * freq * (v + p2)).sin()),
                    1 => {
                        let rad = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt();
                        (tau * freq * rad + tau * p1).sin()
                    }
                    _ => {
                        let s = std::f32::consts::FRAC_1_SQRT_2;
                        0.5 * ((tau * freq * ((u + v) * s + p1)).sin()
                            + (tau * freq * ((u - v) * s + p2)).sin())
                    }
                };
                for c in 0..3 {
                    let val = 0.5 + 0.45 * amp * gains[c] * pat + noise.sample(&mut r);
                    images[idx * px + (y * resolution + x) * 3 + c] = val.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Dataset {
        name: format!("synth-{classes}x{per_class}"),
        h: resolution,
        w: resolution,
        images,
        labels,
        provenance: format!("synth:classes={classes},per_class={per_class},res={resolution},seed={seed}"),
    })
}

// ---- corruptions -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::GaussianBlur => "gaussian-blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

/// Parametric corruption: a kind, the 1-5 severity label, and the resolved
/// per-kind scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub param: f32,
}

impl CorruptionSpec {
    /// Severity tables; each kind documents its parameter meaning.
    pub fn from_severity(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument {
                op: "corruption-spec",
                msg: format!("severity {severity} outside 1..=5"),
            });
        }
        let i = severity as usize - 1;
        let param = match kind {
            // additive noise sigma
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.10, 0.14][i],
            // photon count scale: x' = Poisson(x * lambda) / lambda
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0][i],
            // per-channel salt/pepper rate
            CorruptionKind::ImpulseNoise => [0.02, 0.04, 0.07, 0.10, 0.15][i],
            // blur sigma
            CorruptionKind::GaussianBlur => [0.6, 0.9, 1.2, 1.6, 2.0][i],
            // additive brightness delta
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5][i],
            // contrast factor about the per-image mean
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2][i],
            // downsample factor
            CorruptionKind::Pixelate => [2.0, 2.0, 4.0, 4.0, 8.0][i],
        };
        Ok(CorruptionSpec {
            kind,
            severity,
            param,
        })
    }
}

/// Apply `spec` to every image. Pure in (images, spec, seed); outputs clamped
/// to [0, 1].
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec, seed: u64) -> Dataset {
    let px = ds.h * ds.w * 3;
    let mut out = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        let img = corrupt_image(&ds.image(i), spec, rng::derive(seed, &[0xc0, i as u64]));
        debug_assert_eq!(img.data.len(), px);
        out.extend_from_slice(&img.data);
    }
    ds.replace_images(
        format!("{}+{}{}", ds.name, spec.kind.name(), spec.severity),
        out,
    )
}

pub fn corrupt_image(img: &ImageHwc, spec: &CorruptionSpec, seed: u64) -> ImageHwc {
    let mut r = rng::stream(seed, &[]);
    let mut out = img.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0f32, spec.param).expect("positive sigma");
            for v in &mut out.data {
                *v += noise.sample(&mut r);
            }
        }
        CorruptionKind::ShotNoise => {
            let lambda = spec.param as f64;
            for v in &mut out.data {
                let rate = (*v as f64 * lambda).max(1e-9);
                let pois = Poisson::new(rate).expect("positive rate");
                *v = (pois.sample(&mut r) / lambda) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in &mut out.data {
                if r.random_range(0.0..1.0f32) < spec.param {
                    *v = if r.random_range(0.0..1.0f32) < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => {
            out = gaussian_blur(img, spec.param);
        }
        CorruptionKind::Brightness => {
            for v in &mut out.data {
                *v += spec.param;
            }
        }
        CorruptionKind::Contrast => {
            let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
            for v in &mut out.data {
                *v = mean + spec.param * (*v - mean);
            }
        }
        CorruptionKind::Pixelate => {
            let f = spec.param as usize;
            out = pixelate(img, f.max(1));
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// 2-D Gaussian blur with radius ceil(2.5 sigma), clamp-to-edge padding.
pub fn gaussian_blur(img: &ImageHwc, sigma: f32) -> ImageHwc {
    let radius = (2.5 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius as usize + 1).pow(2));
    let mut sum = 0f32;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let w = (-((dx * dx + dy * dy) as f32) / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            sum += w;
        }
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let mut out = ImageHwc::zeros(img.h, img.w);
    let side = 2 * radius + 1;
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            for c in 0..3 {
                let mut acc = 0f32;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sy = (y + dy).clamp(0, img.h as isize - 1) as usize;
                        let sx = (x + dx).clamp(0, img.w as isize - 1) as usize;
                        let k = kernel[((dy + radius) * side + (dx + radius)) as usize];
                        acc += k * img.get(sy, sx, c);
                    }
                }
                out.set(y as usize, x as usize, c, acc);
            }
        }
    }
    out
}

/// Box-average downsample by `factor`, then nearest-neighbor upsample.
fn pixelate(img: &ImageHwc, factor: usize) -> ImageHwc {
    let mut out = ImageHwc::zeros(img.h, img.w);
    let by = img.h.div_ceil(factor);
    let bx = img.w.div_ceil(factor);
    for cy in 0..by {
        for cx in 0..bx {
            for c in 0..3 {
                let mut acc = 0f32;
                let mut count = 0f32;
                for y in cy * factor..((cy + 1) * factor).min(img.h) {
                    for x in cx * factor..((cx + 1) * factor).min(img.w) {
                        acc += img.get(y, x, c);
                        count += 1.0;
                    }
                }
                let avg = acc / count;
                for y in cy * factor..((cy + 1) * factor).min(img.h) {
                    for x in cx * factor..((cx + 1) * factor).min(img.w) {
                        out.set(y, x, c, avg);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmpfile(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mt3-data-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    #[test]
    fn cifar_single_record_decodes() {
        let mut rec = vec![7u8];
        rec.extend(vec![255u8; 3072]);
        let path = tmpfile("one_record.bin", &rec);
        let ds = read_cifar10_binary(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 7);
        assert!(ds.images.iter().all(|&v| v == 1.0));
        assert!(ds.provenance.starts_with("sha256:"));
    }

    #[test]
    fn cifar_truncated_and_bad_label_rejected() {
        let path = tmpfile("truncated.bin", &vec![0u8; 3072]);
        let err = read_cifar10_binary(&path).unwrap_err();
        assert!(err.to_string().contains("3073"));

        let mut rec = vec![11u8];
        rec.extend(vec![0u8; 3072]);
        let path = tmpfile("bad_label.bin", &rec);
        let err = read_cifar10_binary(&path).unwrap_err();
        assert!(err.to_string().contains("label byte 11"));
    }

    #[test]
    fn npy_round_trip_is_bit_exact() {
        let shape = vec![2usize, 32, 32, 3];
        let data: Vec<u8> = (0..shape.iter().product::<usize>())
            .map(|i| (i * 31 % 256) as u8)
            .collect();
        let path = tmpfile("roundtrip.npy", b"");
        write_npy_u8(&path, &shape, &data).unwrap();
        let back = read_npy_u8(&path).unwrap();
        assert_eq!(back.shape, shape);
        assert_eq!(back.data, data);
    }

    #[test]
    fn npy_rejects_fortran_order_and_wrong_dtype() {
        let good = {
            let path = tmpfile("tmp_good.npy", b"");
            write_npy_u8(&path, &[4], &[1, 2, 3, 4]).unwrap();
            fs::read(&path).unwrap()
        };
        // patch header bytes in place, keeping lengths identical
        let patch = |src: &[u8], from: &[u8], to: &[u8]| -> Vec<u8> {
            let at = src
                .windows(from.len())
                .position(|w| w == from)
                .expect("pattern present");
            let mut out = src.to_vec();
            out[at..at + to.len()].copy_from_slice(to);
            out
        };
        let fortran = patch(&good, b"False", b"True ");
        let path = tmpfile("fortran.npy", &fortran);
        let err = read_npy_u8(&path).unwrap_err();
        assert!(err.to_string().contains("fortran_order"), "{err}");

        let dtype = patch(&good, b"|u1", b"<f4");
        let path2 = tmpfile("dtype.npy", &dtype);
        let err2 = read_npy_u8(&path2).unwrap_err();
        assert!(err2.to_string().contains("descr"), "{err2}");
    }

    #[test]
    fn npy_zeros_make_black_images() {
        let path = tmpfile("black.npy", b"");
        write_npy_u8(&path, &[2, 32, 32, 3], &vec![0u8; 2 * 32 * 32 * 3]).unwrap();
        let lpath = tmpfile("black_labels.npy", b"");
        write_npy_u8(&lpath, &[2], &[0, 1]).unwrap();
        let ds = dataset_from_npy(&path, &lpath, "black", None).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.images.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn severity_slice_selects_level() {
        // 10 images stacked as 5 levels x 2; level 5 is the (8..10) slice
        let px = 8 * 8 * 3;
        let mut data = vec![0u8; 10 * px];
        for (i, chunk) in data.chunks_mut(px).enumerate() {
            chunk.fill(i as u8 * 20);
        }
        let path = tmpfile("levels.npy", b"");
        write_npy_u8(&path, &[10, 8, 8, 3], &data).unwrap();
        let lpath = tmpfile("levels_labels.npy", b"");
        write_npy_u8(&lpath, &[2], &[3, 4]).unwrap();
        let ds = dataset_from_npy(&path, &lpath, "lv5", Some((8, 10))).unwrap();
        assert_eq!(ds.len(), 2);
        assert!((ds.images[0] - 160.0 / 255.0).abs() < 1e-6);
        assert_eq!(ds.labels, vec![3, 4]);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(4, 25, 32, 9).unwrap();
        let b = synth_dataset(4, 25, 32, 9).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.class_histogram(4), vec![25; 4]);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = synth_dataset(4, 25, 32, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn corruption_identity_and_limits() {
        let ds = synth_dataset(2, 4, 16, 3).unwrap();
        let zero_noise = CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity: 1,
            param: 0.0,
        };
        let same = corrupt(&ds, &zero_noise, 0);
        assert_eq!(same.images, ds.images);

        let flat = CorruptionSpec {
            kind: CorruptionKind::Contrast,
            severity: 5,
            param: 0.0,
        };
        let flattened = corrupt(&ds, &flat, 0);
        let px = 16 * 16 * 3;
        for i in 0..ds.len() {
            let img = &ds.images[i * px..(i + 1) * px];
            let mean = img.iter().sum::<f32>() / px as f32;
            for v in &flattened.images[i * px..(i + 1) * px] {
                assert!((v - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn corruption_is_pure_in_seed() {
        let ds = synth_dataset(2, 3, 16, 3).unwrap();
        let spec = CorruptionSpec::from_severity(CorruptionKind::GaussianNoise, 3).unwrap();
        let a = corrupt(&ds, &spec, 42);
        let b = corrupt(&ds, &spec, 42);
        let c = corrupt(&ds, &spec, 43);
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn impulse_rate_within_binomial_bounds() {
        let ds = synth_dataset(1, 14, 32, 5).unwrap(); // > 10,000 channel values
        let spec = CorruptionSpec::from_severity(CorruptionKind::ImpulseNoise, 4).unwrap();
        let p = spec.param as f64;
        let out = corrupt(&ds, &spec, 7);
        let changed = ds
            .images
            .iter()
            .zip(&out.images)
            .filter(|(a, b)| a != b)
            .count() as f64;
        let n = ds.images.len() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        // a salted pixel can coincide with its original value, so allow the
        // changed count to undershoot by that (tiny) probability margin
        assert!(
            (changed - n * p).abs() < 3.0 * sigma + 0.01 * n * p,
            "changed {changed} of {n}, rate {p}"
        );
    }
}
