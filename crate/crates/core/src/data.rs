//! Datasets: IDX and CSV readers, synthetic generators, batching.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples used for Hessian estimation.
pub const CALIBRATION_SAMPLES: usize = 128;

/// Per-feature affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major samples, `len() × feature_len()`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Per-sample shape, e.g. `[1, 28, 28]` or `[D]`.
    pub shape: Vec<usize>,
    pub class_count: usize,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, shape: Vec<usize>, class_count: usize) -> Result<Self> {
        let flen: usize = shape.iter().product();
        if flen == 0 || features.len() != labels.len() * flen {
            return Err(Error::Shape(format!(
                "{} features for {} samples of shape {shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {y} outside {class_count} classes")));
        }
        Ok(Self {
            features,
            labels,
            shape,
            class_count,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let f = self.feature_len();
        (&self.features[i * f..(i + 1) * f], self.labels[i])
    }

    /// Input tensor (`n × shape`) and labels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let f = self.feature_len();
        let mut x = Vec::with_capacity(idx.len() * f);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let (s, l) = self.sample(i);
            x.extend_from_slice(s);
            y.push(l);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        Ok((Tensor::new(shape, x)?, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let f = self.feature_len();
        let mut features = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            features.extend_from_slice(self.sample(i).0);
        }
        Self {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape.clone(),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        }
    }

    /// Fits per-feature mean/std on this set (std floored at 1e-8).
    pub fn fit_normalization(&self) -> Normalization {
        let f = self.feature_len();
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; f];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.sample(i).0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.sample(i).0).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
        Normalization { mean, std }
    }

    pub fn apply_normalization(&mut self, norm: Normalization) -> Result<()> {
        let f = self.feature_len();
        if norm.mean.len() != f || norm.std.len() != f {
            return Err(Error::Shape(format!(
                "normalization has {} features, dataset has {f}",
                norm.mean.len()
            )));
        }
        for row in self.features.chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&norm.mean).zip(&norm.std) {
                *v = (*v - m) / s;
            }
        }
        self.normalization = Some(norm);
        Ok(())
    }

    /// Fixed calibration subset: the first 128 entries of a seeded
    /// permutation, or the whole set when smaller.
    pub fn calibration_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[0xca11b]));
        idx.truncate(CALIBRATION_SAMPLES);
        idx
    }
}

/// Shuffled mini-batches for one epoch; the permutation depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0xba7c4, epoch as u64]));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Raw IDX image file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "image file",
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "image file: {need} pixel bytes declared, {} present",
            body.len()
        )));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "label file",
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!(
            "label file: {n} labels declared, {} present",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(images_path: &Path, labels_path: &Path, images: &IdxImages, labels: &[u8]) -> Result<()> {
    fs::write(images_path, encode_idx_images(images))?;
    fs::write(labels_path, encode_idx_labels(labels))?;
    Ok(())
}

/// Builds a dataset from parsed IDX contents, scaling pixels to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(
        images.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        vec![1, images.rows, images.cols],
        classes,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    dataset_from_idx(&images, &labels)
}

/// Reads `label,f0,f1,...` rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: header must be `label,f0,f1,...`",
            path.display()
        )));
    }
    let dims = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| {
            Error::InvalidArgument(format!("{}: record {}: invalid {what}", path.display(), line + 1))
        };
        labels.push(rec[0].trim().parse::<usize>().map_err(|_| bad("label"))?);
        for f in rec.iter().skip(1) {
            features.push(f.trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
    }
    let classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(2);
    Dataset::new(features, labels, vec![dims], classes)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.feature_len()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        let mut rec = vec![y.to_string()];
        rec.extend(x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Isotropic unit-variance Gaussian blobs. Class `k` has mean `4` on every
/// coordinate `i` with `i mod classes == k` and `0` elsewhere, so any two
/// means are at least 4σ apart. Needs `dims ≥ classes − 1`.
pub fn synth_gaussians(classes: usize, dims: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    // With fewer dimensions two classes would share the all-zero mean.
    if dims + 1 < classes {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes need at least {} dimensions, got {dims}",
            classes - 1
        )));
    }
    const SPACING: f64 = 4.0;
    let mut r = rng::stream(seed, &[0x6a055]);
    let mut features = Vec::with_capacity(classes * n_per_class * dims);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        for _ in 0..n_per_class {
            for i in 0..dims {
                let mean = if i % classes == k { SPACING } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut r);
                features.push(mean + z);
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        features,
        labels,
        shape: vec![dims],
        class_count: classes,
        normalization: None,
    })
}

// Seven-segment strokes in a unit box, y pointing down.
const SEGMENTS: [[(f64, f64); 2]; 7] = [
    [(0.0, 0.0), (1.0, 0.0)],
    [(1.0, 0.0), (1.0, 0.5)],
    [(1.0, 0.5), (1.0, 1.0)],
    [(0.0, 1.0), (1.0, 1.0)],
    [(0.0, 0.5), (0.0, 1.0)],
    [(0.0, 0.0), (0.0, 0.5)],
    [(0.0, 0.5), (1.0, 0.5)],
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Difficulty knobs for [`synth_digits_styled`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitStyle {
    /// Std of additive pixel noise (pixels in [0, 1]).
    pub noise: f64,
    /// Endpoint jitter as a fraction of the glyph box.
    pub jitter: f64,
    /// Probability that each of the seven segments is toggled.
    pub flip: f64,
}

impl Default for DigitStyle {
    fn default() -> Self {
        Self {
            noise: 0.12,
            jitter: 0.07,
            flip: 0.0,
        }
    }
}

/// Handwriting-like digits in MNIST layout: jittered seven-segment strokes
/// with random position, size, slant, stroke width and pixel noise.
/// Labels cycle through 0–9 before shuffling.
pub fn synth_digits(count: usize, size: usize, seed: u64) -> Result<(IdxImages, Vec<u8>)> {
    synth_digits_styled(count, size, DigitStyle::default(), seed)
}

pub fn synth_digits_styled(count: usize, size: usize, style: DigitStyle, seed: u64) -> Result<(IdxImages, Vec<u8>)> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("digit images must be at least 8×8, got {size}")));
    }
    let valid = |v: f64| v.is_finite() && v >= 0.0;
    if !(valid(style.noise) && valid(style.jitter) && valid(style.flip) && style.flip <= 1.0) {
        return Err(Error::InvalidArgument(format!("bad digit style {style:?}")));
    }
    let mut r = rng::stream(seed, &[0xd161]);
    let noise = Normal::new(0.0, style.noise).expect("checked std");
    let s = size as f64;
    let mut labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
    labels.shuffle(&mut r);
    let mut pixels = Vec::with_capacity(count * size * size);
    for &digit in &labels {
        let h = s * r.random_range(0.55..0.75);
        let w = h * r.random_range(0.45..0.65);
        let cx = s / 2.0 + r.random_range(-0.08..0.08) * s;
        let cy = s / 2.0 + r.random_range(-0.08..0.08) * s;
        let slant = r.random_range(-0.25..0.25);
        let thick = s * r.random_range(0.045..0.085);
        let jitter = style.jitter;
        let mut on = [false; 7];
        for &seg in DIGIT_SEGMENTS[digit as usize] {
            on[seg] = true;
        }
        if style.flip > 0.0 {
            for seg in on.iter_mut() {
                if r.random_bool(style.flip) {
                    *seg = !*seg;
                }
            }
        }
        let strokes: Vec<((f64, f64), (f64, f64))> = (0..7)
            .filter(|&seg| on[seg])
            .map(|seg| {
                let mut pt = |(ux, uy): (f64, f64)| {
                    let ux = ux + r.random_range(-jitter..jitter);
                    let uy = uy + r.random_range(-jitter..jitter);
                    let y = cy + (uy - 0.5) * h;
                    let x = cx + (ux - 0.5) * w - slant * (uy - 0.5) * h;
                    (x, y)
                };
                let a = pt(SEGMENTS[seg][0]);
                let b = pt(SEGMENTS[seg][1]);
                (a, b)
            })
            .collect();
        for py in 0..size {
            for px in 0..size {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let d = strokes
                    .iter()
                    .map(|&(a, b)| segment_distance(p, a, b))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (d - thick).max(0.0) / 1.0).clamp(0.0, 1.0);
                let v = (ink + noise.sample(&mut r)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((IdxImages { rows: size, cols: size, pixels }, labels))
}

/// Writes `synth_digits` output as an MNIST-style directory with
/// `train-*` and `t10k-*` IDX files.
pub fn write_digit_set(dir: &Path, train: usize, test: usize, size: usize, style: DigitStyle, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (ti, tl) = synth_digits_styled(train, size, style, rng::derive_seed(seed, &[1]))?;
    write_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        &ti,
        &tl,
    )?;
    let (vi, vl) = synth_digits_styled(test, size, style, rng::derive_seed(seed, &[2]))?;
    write_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        &vi,
        &vl,
    )?;
    let mut f = fs::File::create(dir.join("README.txt"))?;
    writeln!(
        f,
        "synthetic digits: {train} train / {test} test, {size}x{size}, seed {seed}, \
         noise {}, jitter {}, flip {}",
        style.noise, style.jitter, style.flip
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_hand_built_pair() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1];
        img.extend_from_slice(&[0, 255, 51, 102]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
        let ds = dataset_from_idx(&parse_idx_images(&img).unwrap(), &parse_idx_labels(&lab).unwrap()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape, vec![1, 2, 1]);
        assert_eq!(ds.sample(0), (&[0.0, 1.0][..], 3));
        assert_eq!(ds.sample(1), (&[0.2, 0.4][..], 7));
        assert_eq!(ds.class_count, 8);
    }

    #[test]
    fn idx_errors() {
        let e = parse_idx_images(&[]).unwrap_err();
        assert!(e.to_string().contains("truncated"));
        let e = parse_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }));
        let images = IdxImages { rows: 1, cols: 1, pixels: vec![1, 2] };
        let e = dataset_from_idx(&images, &[0]).unwrap_err();
        assert!(e.to_string().contains("count mismatch"));
        let mut short = encode_idx_images(&images);
        short.pop();
        assert!(matches!(parse_idx_images(&short), Err(Error::Truncated(_))));
    }

    #[test]
    fn gaussians_deterministic_and_empty() {
        let a = synth_gaussians(3, 4, 5, 11).unwrap();
        assert_eq!(a, synth_gaussians(3, 4, 5, 11).unwrap());
        assert_ne!(a, synth_gaussians(3, 4, 5, 12).unwrap());
        let e = synth_gaussians(2, 2, 0, 1).unwrap();
        assert!(e.is_empty());
        assert!(synth_gaussians(1, 2, 3, 0).is_err());
        assert!(synth_gaussians(4, 2, 3, 0).is_err());
        assert!(synth_gaussians(3, 2, 3, 0).is_ok());
    }

    #[test]
    fn batches_are_a_permutation() {
        let b = epoch_batches(10, 3, 5, 0);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        assert_eq!(b, epoch_batches(10, 3, 5, 0));
        assert_ne!(b, epoch_batches(10, 3, 5, 1));
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn digits_are_deterministic() {
        let (a, la) = synth_digits(20, 12, 3).unwrap();
        let (b, lb) = synth_digits(20, 12, 3).unwrap();
        assert_eq!((a.clone(), la.clone()), (b, lb));
        assert_eq!(a.count(), 20);
        assert!(la.iter().all(|&l| l < 10));
    }

    #[test]
    fn normalization_centers_features() {
        let mut ds = synth_gaussians(2, 3, 50, 0).unwrap();
        let n = ds.fit_normalization();
        ds.apply_normalization(n).unwrap();
        let m = ds.fit_normalization();
        assert!(m.mean.iter().all(|v| v.abs() < 1e-12));
        assert!(m.std.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}
