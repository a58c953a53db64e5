//! Checkpoints and packed integer export.
//!
//! A checkpoint at `<path>` is two files: `<path>.manifest` (TOML) and
//! `<path>.tensors` (concatenated little-endian f64 tensors). The manifest
//! records each tensor's byte offset, length and CRC32.
//!
//! The export layout (all integers little-endian):
//!
//! ```text
//! "RQEX"  u32 version  u32 layers
//! per layer: u32 rows  u32 cols  f32 activation_clip
//!   per row: u8 spec (0 PoT-W4A4, 1 Fixed-W4A4, 2 Fixed-W8A4)
//!            f32 scale  f32 bias
//!            codes: 4-bit rows nibble-packed, low nibble first, ceil(cols/2) bytes;
//!                   8-bit rows one i8 per weight
//! ```
//!
//! Fixed-W4A4 nibbles hold the code in two's complement. PoT-W4A4 nibbles
//! hold a sign bit (bit 3) and the magnitude `e + 7` (bits 0–2); `0` is the
//! zero level.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::{LayerAssignment, RatioConfig, RowAssignment};
use crate::error::{Error, Result};
use crate::model::{Arch, LayerKind, Model, Stage};
use crate::qat::QuantizedModel;
use crate::quant::{QuantSpec, Scheme};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1.0";
const FORMAT_MAJOR: u32 = 1;
pub const EXPORT_MAGIC: &[u8; 4] = b"RQEX";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    arch: Arch,
    input_shape: Vec<usize>,
    classes: usize,
    epoch: usize,
    /// Decimal string: TOML integers cannot hold every u64.
    seed: String,
    quantized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratio: Option<String>,
    act_clips: Vec<f64>,
    layers: Vec<LayerKind>,
    stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<LayerAssignment>>,
    tensors: Vec<TensorEntry>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest")
}

pub fn tensors_path(path: &Path) -> PathBuf {
    with_suffix(path, ".tensors")
}

pub fn save(qm: &QuantizedModel, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (i, l) in qm.model.layers.iter().enumerate() {
        for (name, t) in [("weight", &l.weight), ("bias", &l.bias)] {
            let start = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("layer{i}.{name}"),
                shape: t.shape().to_vec(),
                offset: start as u64,
                len: (blob.len() - start) as u64,
                crc32: crc32fast::hash(&blob[start..]),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        arch: qm.model.arch,
        input_shape: qm.model.input_shape.clone(),
        classes: qm.model.classes,
        epoch: qm.epoch,
        seed: qm.seed.to_string(),
        quantized: qm.assignment.is_some(),
        ratio: qm.ratio.map(|r| r.to_string()),
        act_clips: qm.act_clips.clone(),
        layers: qm.model.layers.iter().map(|l| l.kind).collect(),
        stages: qm.model.stages.clone(),
        assignment: qm.assignment.as_ref().map(|a| a.layers.clone()),
        tensors,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(tensors_path(path), &blob)?;
    fs::write(manifest_path(path), text)?;
    Ok(())
}

fn check_version(text: &str) -> Result<()> {
    let value: toml::Table = text
        .parse()
        .map_err(|e| Error::Checkpoint(format!("manifest is not valid TOML: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint("manifest has no format_version".into()))?;
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::Version(version.to_string()));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<QuantizedModel> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", mpath.display()))
    })?;
    check_version(&text)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let tpath = tensors_path(path);
    let blob = fs::read(&tpath).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", tpath.display())))?;

    let mut model = Model::new(m.arch, &m.input_shape, m.classes, 0)?;
    let kinds: Vec<LayerKind> = model.layers.iter().map(|l| l.kind).collect();
    if kinds != m.layers || model.stages != m.stages {
        return Err(Error::Checkpoint(format!(
            "layer list does not match the {} preset for input {:?}",
            m.arch, m.input_shape
        )));
    }
    for entry in &m.tensors {
        let bytes = blob
            .get(entry.offset as usize..(entry.offset + entry.len) as usize)
            .ok_or_else(|| Error::Truncated(format!("tensor blob (needs `{}`)", entry.name)))?;
        if crc32fast::hash(bytes) != entry.crc32 {
            return Err(Error::Checksum(entry.name.clone()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        let (layer, field) = entry
            .name
            .strip_prefix("layer")
            .and_then(|s| s.split_once('.'))
            .and_then(|(i, f)| Some((i.parse::<usize>().ok()?, f)))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
        let l = model
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` has no layer", entry.name)))?;
        let slot = match field {
            "weight" => &mut l.weight,
            "bias" => &mut l.bias,
            _ => return Err(Error::Checkpoint(format!("unknown tensor `{}`", entry.name))),
        };
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if m.tensors.len() != 2 * model.layers.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors listed, expected {}",
            m.tensors.len(),
            2 * model.layers.len()
        )));
    }
    let seed = m
        .seed
        .parse::<u64>()
        .map_err(|_| Error::Checkpoint(format!("invalid seed `{}`", m.seed)))?;
    let ratio = m.ratio.as_deref().map(str::parse::<RatioConfig>).transpose()?;
    let assignment = match (m.quantized, m.assignment) {
        (false, _) => None,
        (true, None) => return Err(Error::Checkpoint("quantized checkpoint without assignment".into())),
        (true, Some(layers)) => {
            let a = RowAssignment { layers };
            let ratio = ratio.ok_or_else(|| Error::Checkpoint("quantized checkpoint without ratio".into()))?;
            a.validate(&model, &ratio)?;
            if m.act_clips.len() != model.layers.len() || m.act_clips.iter().any(|c| !(*c > 0.0)) {
                return Err(Error::Checkpoint("invalid activation clips".into()));
            }
            Some(a)
        }
    };
    Ok(QuantizedModel {
        model,
        assignment,
        act_clips: m.act_clips,
        ratio,
        epoch: m.epoch,
        seed,
    })
}

fn spec_byte(s: QuantSpec) -> u8 {
    match s {
        QuantSpec::PotW4A4 => 0,
        QuantSpec::FixedW4A4 => 1,
        QuantSpec::FixedW8A4 => 2,
    }
}

fn spec_from_byte(b: u8) -> Result<QuantSpec> {
    match b {
        0 => Ok(QuantSpec::PotW4A4),
        1 => Ok(QuantSpec::FixedW4A4),
        2 => Ok(QuantSpec::FixedW8A4),
        _ => Err(Error::Checkpoint(format!("unknown spec byte {b}"))),
    }
}

/// 4-bit nibble for a signed level code of a 4-bit spec.
pub fn nibble(spec: QuantSpec, code: i32) -> u8 {
    match spec.scheme() {
        Scheme::Fixed => (code as i8 as u8) & 0x0f,
        Scheme::PoT => {
            let sign = if code < 0 { 0x08 } else { 0 };
            sign | (code.unsigned_abs() as u8 & 0x07)
        }
    }
}

pub fn code_from_nibble(spec: QuantSpec, n: u8) -> i32 {
    match spec.scheme() {
        Scheme::Fixed => (((n & 0x0f) << 4) as i8 >> 4) as i32,
        Scheme::PoT => {
            let mag = (n & 0x07) as i32;
            if n & 0x08 != 0 {
                -mag
            } else {
                mag
            }
        }
    }
}

/// One exported layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedLayer {
    pub rows: usize,
    pub cols: usize,
    pub act_clip: f32,
    pub specs: Vec<QuantSpec>,
    pub scales: Vec<f32>,
    pub biases: Vec<f32>,
    /// Signed level codes per row (PoT as `sign · (e + 7)`).
    pub codes: Vec<Vec<i32>>,
}

pub fn export_bytes(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let a = qm
        .assignment
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("only quantized checkpoints can be exported".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(EXPORT_MAGIC);
    out.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
    out.extend_from_slice(&(qm.model.layers.len() as u32).to_le_bytes());
    for (i, l) in qm.model.layers.iter().enumerate() {
        let la = a.layers.get(i).ok_or(Error::MissingAssignment(i))?;
        let (rows, cols) = l.weight.rows();
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&(qm.act_clips[i] as f32).to_le_bytes());
        for r in 0..rows {
            let (spec, alpha) = (la.specs[r], la.alphas[r]);
            out.push(spec_byte(spec));
            out.extend_from_slice(&(alpha as f32).to_le_bytes());
            out.extend_from_slice(&(l.bias.data()[r] as f32).to_le_bytes());
            let codes: Vec<i32> = l.weight.row(r).iter().map(|&w| spec.code(w, alpha)).collect();
            if spec.weight_bits() == 8 {
                out.extend(codes.iter().map(|&c| c as i8 as u8));
            } else {
                for pair in codes.chunks(2) {
                    let lo = nibble(spec, pair[0]);
                    let hi = pair.get(1).map_or(0, |&c| nibble(spec, c));
                    out.push(lo | (hi << 4));
                }
            }
        }
    }
    Ok(out)
}

pub fn export(qm: &QuantizedModel, path: &Path) -> Result<()> {
    fs::write(path, export_bytes(qm)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Truncated(format!("export file at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_export(bytes: &[u8]) -> Result<Vec<ExportedLayer>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != EXPORT_MAGIC {
        return Err(Error::Checkpoint("not an export file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != EXPORT_VERSION {
        return Err(Error::Version(version.to_string()));
    }
    let n = c.u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let act_clip = c.f32()?;
        let mut l = ExportedLayer {
            rows,
            cols,
            act_clip,
            specs: Vec::with_capacity(rows),
            scales: Vec::with_capacity(rows),
            biases: Vec::with_capacity(rows),
            codes: Vec::with_capacity(rows),
        };
        for _ in 0..rows {
            let spec = spec_from_byte(c.take(1)?[0])?;
            l.specs.push(spec);
            l.scales.push(c.f32()?);
            l.biases.push(c.f32()?);
            let codes = if spec.weight_bits() == 8 {
                c.take(cols)?.iter().map(|&b| b as i8 as i32).collect()
            } else {
                let packed = c.take(cols.div_ceil(2))?;
                (0..cols)
                    .map(|j| {
                        let b = packed[j / 2];
                        code_from_nibble(spec, if j % 2 == 0 { b & 0x0f } else { b >> 4 })
                    })
                    .collect()
            };
            l.codes.push(codes);
        }
        layers.push(l);
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(layers)
}
