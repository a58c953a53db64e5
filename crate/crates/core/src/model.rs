//! Network presets and their forward pass on a [`Graph`].

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assign::{LayerAssignment, RowAssignment};
use crate::error::{Error, Result};
use crate::quant::ACT_BITS;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpSmall,
    CnnSmall,
    CnnTiny,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::MlpSmall, Arch::CnnSmall, Arch::CnnTiny];

    pub fn name(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp-small",
            Arch::CnnSmall => "cnn-small",
            Arch::CnnTiny => "cnn-tiny",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown architecture `{s}` (expected mlp-small, cnn-small or cnn-tiny)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        in_f: usize,
        out_f: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv { in_c, out_c, k, .. } => vec![out_c, in_c, k, k],
            LayerKind::Linear { in_f, out_f } => vec![out_f, in_f],
        }
    }

    /// Output rows (filters or matrix rows).
    pub fn rows(&self) -> usize {
        match *self {
            LayerKind::Conv { out_c, .. } => out_c,
            LayerKind::Linear { out_f, .. } => out_f,
        }
    }

    /// Weights per row.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { in_c, k, .. } => in_c * k * k,
            LayerKind::Linear { in_f, .. } => in_f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Layer(usize),
    Relu,
    MaxPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer work summary used by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub rows: usize,
    pub fan_in: usize,
    /// Output positions per sample (1 for linear layers).
    pub positions: usize,
}

impl LayerDims {
    pub fn macs(&self) -> u64 {
        (self.rows * self.fan_in * self.positions) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub stages: Vec<Stage>,
}

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub weight: Var,
    pub bias: Var,
}

/// Quantized forward: row projections plus per-layer activation clips.
#[derive(Debug, Clone, Copy)]
pub struct QuantForward<'a> {
    pub assignment: &'a RowAssignment,
    pub clips: &'a [Var],
}

fn image_shape(input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        [d] => Ok((1, 1, d)),
        _ => Err(Error::Shape(format!("unsupported input shape {input:?}"))),
    }
}

impl Model {
    /// Builds a preset with He-normal weights and zero biases.
    pub fn new(arch: Arch, input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        let (c, h, w) = image_shape(input_shape)?;
        let conv = |in_c, out_c| LayerKind::Conv {
            in_c,
            out_c,
            k: 3,
            stride: 1,
            pad: 1,
        };
        let (kinds, stages) = match arch {
            Arch::MlpSmall => (
                vec![
                    LayerKind::Linear { in_f: c * h * w, out_f: 128 },
                    LayerKind::Linear { in_f: 128, out_f: classes },
                ],
                vec![Stage::Flatten, Stage::Layer(0), Stage::Relu, Stage::Layer(1)],
            ),
            Arch::CnnSmall => {
                if input_shape.len() != 3 || h < 4 || w < 4 {
                    return Err(Error::Shape(format!(
                        "cnn-small needs C×H×W inputs of at least 4×4, got {input_shape:?}"
                    )));
                }
                let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
                (
                    vec![
                        conv(c, 8),
                        conv(8, 16),
                        LayerKind::Linear { in_f: flat, out_f: 32 },
                        LayerKind::Linear { in_f: 32, out_f: classes },
                    ],
                    vec![
                        Stage::Layer(0),
                        Stage::Relu,
                        Stage::MaxPool,
                        Stage::Layer(1),
                        Stage::Relu,
                        Stage::MaxPool,
                        Stage::Flatten,
                        Stage::Layer(2),
                        Stage::Relu,
                        Stage::Layer(3),
                    ],
                )
            }
            Arch::CnnTiny => {
                if input_shape.len() != 3 || h < 2 || w < 2 {
                    return Err(Error::Shape(format!(
                        "cnn-tiny needs C×H×W inputs of at least 2×2, got {input_shape:?}"
                    )));
                }
                (
                    vec![
                        conv(c, 4),
                        LayerKind::Linear { in_f: 4 * (h / 2) * (w / 2), out_f: classes },
                    ],
                    vec![
                        Stage::Layer(0),
                        Stage::Relu,
                        Stage::MaxPool,
                        Stage::Flatten,
                        Stage::Layer(1),
                    ],
                )
            }
        };
        let layers = kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let mut r = rng::stream(seed, &[0x1a7e, i as u64]);
                let std = (2.0 / kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let shape = kind.weight_shape();
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut r)).collect();
                Layer {
                    kind,
                    weight: Tensor::new(shape, data).expect("consistent shape"),
                    bias: Tensor::zeros(&[kind.rows()]),
                }
            })
            .collect();
        Ok(Self {
            arch,
            input_shape: input_shape.to_vec(),
            classes,
            layers,
            stages,
        })
    }

    pub fn stage_of_layer(&self, layer: usize) -> usize {
        self.stages
            .iter()
            .position(|s| *s == Stage::Layer(layer))
            .expect("every layer appears in the stage list")
    }

    /// Adds every layer's weight and bias to `g`.
    pub fn params(&self, g: &mut Graph, trainable: bool) -> Result<Vec<LayerParams>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    weight: g.leaf(l.weight.clone(), trainable)?,
                    bias: g.leaf(l.bias.clone(), trainable)?,
                })
            })
            .collect()
    }

    /// Runs `stages[range]` starting from `x`. Layers outside the range may
    /// have `None` parameters.
    pub fn forward_stages(
        &self,
        g: &mut Graph,
        range: std::ops::Range<usize>,
        mut x: Var,
        params: &[Option<LayerParams>],
        quant: Option<QuantForward<'_>>,
    ) -> Result<Var> {
        for stage in &self.stages[range] {
            x = match *stage {
                Stage::Relu => g.relu(x)?,
                Stage::MaxPool => g.max_pool2(x)?,
                Stage::Flatten => g.flatten(x)?,
                Stage::Layer(i) => {
                    let p = params
                        .get(i)
                        .copied()
                        .flatten()
                        .ok_or_else(|| Error::InvalidArgument(format!("no parameters for layer {i}")))?;
                    let (input, weight) = match quant {
                        Some(q) => {
                            let la = q
                                .assignment
                                .layers
                                .get(i)
                                .ok_or(Error::MissingAssignment(i))?;
                            let clip = *q.clips.get(i).ok_or(Error::MissingAssignment(i))?;
                            (g.act_quant(x, clip, ACT_BITS)?, project_weight(g, p.weight, la)?)
                        }
                        None => (x, p.weight),
                    };
                    self.apply_layer(g, i, input, weight, p.bias)?
                }
            };
        }
        Ok(x)
    }

    fn apply_layer(&self, g: &mut Graph, i: usize, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = match self.layers[i].kind {
            LayerKind::Conv { stride, pad, .. } => g.conv2d(x, w, stride, pad)?,
            LayerKind::Linear { .. } => g.matmul_t(x, w, false, true)?,
        };
        g.add_bias(y, b)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        params: &[LayerParams],
        quant: Option<QuantForward<'_>>,
    ) -> Result<Var> {
        let p: Vec<Option<LayerParams>> = params.iter().copied().map(Some).collect();
        self.forward_stages(g, 0..self.stages.len(), x, &p, quant)
    }

    /// Batched input tensor for `rows` flattened samples.
    pub fn batch_tensor(&self, features: Vec<f64>, rows: usize) -> Result<Tensor> {
        let mut shape = vec![rows];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, features)
    }

    /// Logits for a batch, without gradients. `quant` supplies the row
    /// assignment and per-layer activation clips.
    pub fn logits(&self, x: &Tensor, quant: Option<(&RowAssignment, &[f64])>) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.params(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let clips: Vec<Var> = match quant {
            Some((_, c)) => c
                .iter()
                .map(|&v| g.constant(Tensor::scalar(v)))
                .collect::<Result<_>>()?,
            None => vec![],
        };
        let qf = quant.map(|(a, _)| QuantForward {
            assignment: a,
            clips: &clips,
        });
        let out = self.forward(&mut g, xv, &params, qf)?;
        Ok(g.value(out).clone())
    }

    /// Input activations of every layer for a batch (float forward).
    pub fn layer_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let params = self.params(&mut g, false)?;
        let mut cur = g.constant(x.clone())?;
        let mut out = vec![None; self.layers.len()];
        let p: Vec<Option<LayerParams>> = params.into_iter().map(Some).collect();
        for (s, stage) in self.stages.iter().enumerate() {
            if let Stage::Layer(i) = *stage {
                out[i] = Some(g.value(cur).clone());
            }
            cur = self.forward_stages(&mut g, s..s + 1, cur, &p, None)?;
        }
        Ok(out.into_iter().map(|t| t.expect("every layer visited")).collect())
    }

    /// Rows, fan-in and output positions of every layer for one sample.
    pub fn layer_dims(&self) -> Vec<LayerDims> {
        let (_, mut hh, mut ww) = image_shape(&self.input_shape).expect("validated at construction");
        let mut dims = vec![None; self.layers.len()];
        for stage in &self.stages {
            match *stage {
                Stage::Layer(i) => {
                    let kind = self.layers[i].kind;
                    let positions = match kind {
                        LayerKind::Conv { k, stride, pad, .. } => {
                            hh = (hh + 2 * pad - k) / stride + 1;
                            ww = (ww + 2 * pad - k) / stride + 1;
                            hh * ww
                        }
                        LayerKind::Linear { .. } => {
                            (hh, ww) = (1, 1);
                            1
                        }
                    };
                    dims[i] = Some(LayerDims {
                        rows: kind.rows(),
                        fan_in: kind.fan_in(),
                        positions,
                    });
                }
                Stage::MaxPool => {
                    hh /= 2;
                    ww /= 2;
                }
                Stage::Relu | Stage::Flatten => {}
            }
        }
        dims.into_iter().map(|d| d.expect("every layer visited")).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Per-row projection of a weight tensor with a straight-through backward:
/// identity inside `[−α, α]`, zero outside.
pub fn project_weight(g: &mut Graph, w: Var, la: &LayerAssignment) -> Result<Var> {
    let wt = g.value(w);
    let (rows, len) = wt.rows();
    if la.specs.len() != rows || la.alphas.len() != rows {
        return Err(Error::Shape(format!(
            "assignment covers {} rows, weight has {rows}",
            la.specs.len()
        )));
    }
    let mut projected = Vec::with_capacity(wt.len());
    let mut pass = Vec::with_capacity(wt.len());
    for r in 0..rows {
        let (spec, alpha) = (la.specs[r], la.alphas[r]);
        for &v in &wt.data()[r * len..(r + 1) * len] {
            projected.push(spec.quantize(v, alpha));
            pass.push(v.abs() <= alpha);
        }
    }
    let t = Tensor::new(wt.shape().to_vec(), projected)?;
    g.straight_through(w, t, &pass)
}
