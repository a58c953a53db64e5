//! Integer inference kernels.
//!
//! Activations are unsigned 4-bit codes. Fixed rows hold signed integer
//! codes and use multiply-accumulate; PoT rows hold `(sign, exponent)` pairs
//! and accumulate `act << (e + 6)` with shifts and adds only. The `2^−6` of
//! the re-based exponent is folded into the row's output scale.

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model, Stage};
use crate::qat::QuantizedModel;
use crate::quant::{self, activation_code, QuantSpec, Scheme, ACT_BITS};
use crate::tensor::kernels::{im2col, max_pool2_indices, ConvGeom};
use crate::tensor::Tensor;

/// Exponent offset making every PoT shift non-negative (4-bit PoT).
pub const POT_SHIFT_BASE: i32 = 6;

/// Unsigned activation codes sharing one step size.
#[derive(Debug, Clone, PartialEq)]
pub struct IntActivationTile {
    pub codes: Vec<u8>,
    /// Value of one code step, `clip / 15`.
    pub scale: f64,
}

impl IntActivationTile {
    pub fn quantize(x: &[f64], clip: f64) -> Self {
        Self {
            codes: x.iter().map(|&v| activation_code(v, ACT_BITS, clip) as u8).collect(),
            scale: clip / ((1u32 << ACT_BITS) - 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PotCode {
    /// −1, 0 (zero level) or +1.
    pub sign: i8,
    /// In `[−6, 0]`; ignored when `sign == 0`.
    pub exp: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowCodes {
    Fixed(Vec<i8>),
    Pot(Vec<PotCode>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowKernel {
    pub spec: QuantSpec,
    pub codes: RowCodes,
    /// Real value of one accumulator unit per activation step.
    pub weight_scale: f64,
}

impl RowKernel {
    /// Quantizes a float row with scale `alpha`.
    pub fn from_row(row: &[f64], spec: QuantSpec, alpha: f64) -> Self {
        let m = spec.weight_bits();
        match spec.scheme() {
            Scheme::Fixed => Self {
                spec,
                codes: RowCodes::Fixed(row.iter().map(|&w| quant::fixed_code(w, m, alpha) as i8).collect()),
                weight_scale: alpha / quant::fixed_max_code(m) as f64,
            },
            Scheme::PoT => Self {
                spec,
                codes: RowCodes::Pot(
                    row.iter()
                        .map(|&w| {
                            let c = quant::pot_code(w, m, alpha);
                            PotCode {
                                sign: c.signum() as i8,
                                exp: if c == 0 { 0 } else { quant::pot_exponent(c, m) as i8 },
                            }
                        })
                        .collect(),
                ),
                weight_scale: alpha * 2f64.powi(-POT_SHIFT_BASE),
            },
        }
    }

    pub fn len(&self) -> usize {
        match &self.codes {
            RowCodes::Fixed(c) => c.len(),
            RowCodes::Pot(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The Fixed-style integer codes `sign · 2^{e+6}` of a PoT row.
    pub fn pot_as_fixed(&self) -> Option<RowKernel> {
        let RowCodes::Pot(codes) = &self.codes else {
            return None;
        };
        Some(RowKernel {
            spec: QuantSpec::FixedW8A4,
            codes: RowCodes::Fixed(
                codes
                    .iter()
                    .map(|c| c.sign * (1i8 << (c.exp as i32 + POT_SHIFT_BASE)))
                    .collect(),
            ),
            weight_scale: self.weight_scale,
        })
    }

    /// Accumulator for this row, dispatched on its scheme.
    pub fn dot(&self, acts: &[u8]) -> Result<i64> {
        match self.codes {
            RowCodes::Fixed(_) => row_dot_fixed(self, acts),
            RowCodes::Pot(_) => row_dot_pot(self, acts),
        }
    }
}

fn check_len(row: usize, acts: usize) -> Result<()> {
    if row != acts {
        return Err(Error::Shape(format!("row has {row} weights, tile has {acts} activations")));
    }
    Ok(())
}

/// `Σ q_w · q_a` over a Fixed row.
pub fn row_dot_fixed(row: &RowKernel, acts: &[u8]) -> Result<i64> {
    let RowCodes::Fixed(codes) = &row.codes else {
        return Err(Error::InvalidArgument(format!("{} row passed to the Fixed kernel", row.spec)));
    };
    check_len(codes.len(), acts.len())?;
    Ok(codes.iter().zip(acts).map(|(&w, &a)| w as i64 * a as i64).sum())
}

/// `Σ sign · (q_a << (e + 6))` over a PoT row: shifts and adds only.
pub fn row_dot_pot(row: &RowKernel, acts: &[u8]) -> Result<i64> {
    let RowCodes::Pot(codes) = &row.codes else {
        return Err(Error::InvalidArgument(format!("{} row passed to the PoT kernel", row.spec)));
    };
    check_len(codes.len(), acts.len())?;
    let mut acc: i64 = 0;
    for (c, &a) in codes.iter().zip(acts) {
        let term = (a as i64) << (c.exp as i32 + POT_SHIFT_BASE);
        match c.sign {
            1 => acc += term,
            -1 => acc -= term,
            _ => {}
        }
    }
    Ok(acc)
}

/// Dequantized `tiles × rows` output: each row's accumulator times its
/// weight scale and the tile's activation scale.
pub fn mixed_gemm(rows: &[RowKernel], tiles: &[IntActivationTile]) -> Result<Tensor> {
    if rows.is_empty() || tiles.is_empty() {
        return Err(Error::InvalidArgument("mixed_gemm needs at least one row and one tile".into()));
    }
    let mut out = Vec::with_capacity(rows.len() * tiles.len());
    for t in tiles {
        for r in rows {
            out.push(r.dot(&t.codes)? as f64 * r.weight_scale * t.scale);
        }
    }
    Tensor::new(vec![tiles.len(), rows.len()], out)
}

#[derive(Debug, Clone)]
struct IntLayer {
    kind: LayerKind,
    rows: Vec<RowKernel>,
    bias: Vec<f64>,
    clip: f64,
}

/// A quantized model compiled to integer row kernels.
#[derive(Debug, Clone)]
pub struct IntegerModel {
    input_shape: Vec<usize>,
    classes: usize,
    stages: Vec<Stage>,
    layers: Vec<IntLayer>,
}

impl IntegerModel {
    pub fn compile(qm: &QuantizedModel) -> Result<Self> {
        let a = qm
            .assignment
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("integer engine needs a quantized checkpoint".into()))?;
        let m: &Model = &qm.model;
        let layers = m
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let la = a.layers.get(i).ok_or(Error::MissingAssignment(i))?;
                let (n, _) = l.weight.rows();
                if la.specs.len() != n {
                    return Err(Error::MissingAssignment(i));
                }
                Ok(IntLayer {
                    kind: l.kind,
                    rows: (0..n)
                        .map(|r| RowKernel::from_row(l.weight.row(r), la.specs[r], la.alphas[r]))
                        .collect(),
                    bias: l.bias.data().to_vec(),
                    clip: *qm.act_clips.get(i).ok_or(Error::MissingAssignment(i))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_shape: m.input_shape.clone(),
            classes: m.classes,
            stages: m.stages.clone(),
            layers,
        })
    }

    pub fn row_kernels(&self, layer: usize) -> &[RowKernel] {
        &self.layers[layer].rows
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::Shape(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = match *stage {
                Stage::Relu => {
                    let d = cur.data().iter().map(|v| v.max(0.0)).collect();
                    Tensor::new(cur.shape().to_vec(), d)?
                }
                Stage::MaxPool => {
                    let (idx, shape) = max_pool2_indices(cur.data(), cur.shape())?;
                    Tensor::new(shape, idx.iter().map(|&i| cur.data()[i]).collect())?
                }
                Stage::Flatten => {
                    let (r, len) = cur.rows();
                    cur.reshape(&[r, len])?
                }
                Stage::Layer(i) => self.apply(&self.layers[i], &cur)?,
            };
        }
        debug_assert_eq!(cur.shape()[1], self.classes);
        Ok(cur)
    }

    fn apply(&self, l: &IntLayer, x: &Tensor) -> Result<Tensor> {
        let batch = x.shape()[0];
        match l.kind {
            LayerKind::Linear { .. } => {
                let tiles: Vec<IntActivationTile> =
                    (0..batch).map(|b| IntActivationTile::quantize(x.row(b), l.clip)).collect();
                let mut y = mixed_gemm(&l.rows, &tiles)?;
                for b in 0..batch {
                    for (v, bias) in y.row_mut(b).iter_mut().zip(&l.bias) {
                        *v += bias;
                    }
                }
                Ok(y)
            }
            LayerKind::Conv { out_c, k, stride, pad, in_c } => {
                let geom = ConvGeom::new(x.shape(), &[out_c, in_c, k, k], stride, pad)?;
                let (p, patch) = (geom.positions(), geom.patch_len());
                let step = l.clip / ((1u32 << ACT_BITS) - 1) as f64;
                let mut out = vec![0.0; batch * out_c * p];
                for b in 0..batch {
                    let codes = IntActivationTile::quantize(x.row(b), l.clip).codes;
                    let cols = im2col(&codes, &geom);
                    // One contiguous tile per output position.
                    let mut tile = vec![0u8; patch];
                    for pos in 0..p {
                        for (r, t) in tile.iter_mut().enumerate() {
                            *t = cols[r * p + pos];
                        }
                        for (f, row) in l.rows.iter().enumerate() {
                            let acc = row.dot(&tile)?;
                            out[(b * out_c + f) * p + pos] = acc as f64 * row.weight_scale * step + l.bias[f];
                        }
                    }
                }
                Tensor::new(geom.output_shape(), out)
            }
        }
    }
}
