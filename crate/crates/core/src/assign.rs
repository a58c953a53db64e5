//! Row-wise scheme/precision assignment.
//!
//! Per layer, the rows with the largest-magnitude Hessian eigenvalue get
//! Fixed-W8A4; the remaining rows are sorted by weight variance and the
//! low-variance share becomes PoT-W4A4, the rest Fixed-W4A4.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerParams, Model};
use crate::quant::{calibrate_alpha, QuantSpec};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

pub const MAX_POWER_ITERS: usize = 20;
pub const CONVERGENCE_TOL: f64 = 1e-4;
/// Relative change below which iteration stops before the cap.
pub const EXIT_TOL: f64 = 1e-12;
pub const DEFAULT_REASSIGN_INTERVAL: usize = 10;

/// Percent split `pot4 : fixed4 : fixed8`, summing to 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RatioConfig {
    pub pot4: u32,
    pub fixed4: u32,
    pub fixed8: u32,
}

impl RatioConfig {
    pub fn new(pot4: u32, fixed4: u32, fixed8: u32) -> Result<Self> {
        if pot4 + fixed4 + fixed8 != 100 {
            return Err(Error::Ratio(format!(
                "ratio must sum to 100, got {pot4}:{fixed4}:{fixed8}"
            )));
        }
        Ok(Self { pot4, fixed4, fixed8 })
    }

    /// Default split with the 5% Fixed-W8A4 share.
    pub fn with_pot(pot4: u32) -> Result<Self> {
        if pot4 > 95 {
            return Err(Error::Ratio(format!("PoT share {pot4} leaves no room for 5% Fixed-W8A4")));
        }
        Self::new(pot4, 95 - pot4, 5)
    }

    /// Rows per spec for a layer with `rows` rows.
    pub fn counts(&self, rows: usize) -> SpecCounts {
        let (a, b, c) = (self.pot4 as usize, self.fixed4 as usize, self.fixed8 as usize);
        let mut fixed8 = (rows * c + 50) / 100;
        if c > 0 && rows > 0 {
            fixed8 = fixed8.max(1);
        }
        let rest = rows - fixed8;
        let pot4 = if a + b == 0 {
            0
        } else {
            (2 * rest * a + (a + b)) / (2 * (a + b))
        };
        SpecCounts {
            pot4,
            fixed4: rest - pot4,
            fixed8,
        }
    }
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self { pot4: 65, fixed4: 30, fixed8: 5 }
    }
}

impl fmt::Display for RatioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.pot4, self.fixed4, self.fixed8)
    }
}

impl FromStr for RatioConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Ratio(format!("expected A:B:C, got `{s}`")));
        }
        let mut v = [0u32; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Ratio(format!("`{p}` is not a non-negative integer")))?;
        }
        Self::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpecCounts {
    pub pot4: usize,
    pub fixed4: usize,
    pub fixed8: usize,
}

impl SpecCounts {
    pub fn of(specs: &[QuantSpec]) -> Self {
        let mut c = Self::default();
        for s in specs {
            match s {
                QuantSpec::PotW4A4 => c.pot4 += 1,
                QuantSpec::FixedW4A4 => c.fixed4 += 1,
                QuantSpec::FixedW8A4 => c.fixed8 += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.pot4 + self.fixed4 + self.fixed8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianEstimate {
    pub layer: usize,
    pub row: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub specs: Vec<QuantSpec>,
    pub alphas: Vec<f64>,
}

impl LayerAssignment {
    pub fn counts(&self) -> SpecCounts {
        SpecCounts::of(&self.specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAssignment {
    pub layers: Vec<LayerAssignment>,
}

impl RowAssignment {
    /// Checks row coverage against the model and spec counts against
    /// `ratio`.
    pub fn validate(&self, model: &Model, ratio: &RatioConfig) -> Result<()> {
        if self.layers.len() != model.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "assignment has {} layers, model has {}",
                self.layers.len(),
                model.layers.len()
            )));
        }
        for (i, (la, layer)) in self.layers.iter().zip(&model.layers).enumerate() {
            let rows = layer.kind.rows();
            if la.specs.len() != rows || la.alphas.len() != rows {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: assignment covers {} rows, layer has {rows}",
                    la.specs.len()
                )));
            }
            if let Some(a) = la.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                return Err(Error::InvalidArgument(format!("layer {i}: invalid scale {a}")));
            }
            let want = ratio.counts(rows);
            if la.counts() != want {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: counts {:?} violate ratio {ratio} (expected {want:?})",
                    la.counts()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentReport {
    pub assignment: RowAssignment,
    /// Per layer, one estimate per row; empty when no Fixed-W8A4 share was
    /// requested.
    pub hessians: Vec<Vec<HessianEstimate>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerResult {
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power iteration on an implicit symmetric operator. Returns the Rayleigh
/// quotient at the final iterate. `converged` reports a relative change
/// below [`CONVERGENCE_TOL`] over the last two iterations; iteration itself
/// continues until the change drops below [`EXIT_TOL`] or the cap is hit.
pub fn power_iteration(
    dim: usize,
    max_iter: usize,
    seed: u64,
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<PowerResult> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("power iteration needs max_iter ≥ 1".into()));
    }
    if dim == 0 {
        return Ok(PowerResult { lambda: 0.0, iterations: 1, converged: true });
    }
    let mut r = rng::rng(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut prev: Option<f64> = None;
    for k in 1..=max_iter {
        let hv = hvp(&v)?;
        let nh = norm(&hv);
        if nh == 0.0 {
            return Ok(PowerResult { lambda: 0.0, iterations: k, converged: true });
        }
        let lambda: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let change = prev.map(|p| (lambda - p).abs());
        let converged = change.is_some_and(|c| c < CONVERGENCE_TOL * lambda.abs());
        if change.is_some_and(|c| c <= EXIT_TOL * lambda.abs()) || k == max_iter {
            return Ok(PowerResult { lambda, iterations: k, converged });
        }
        prev = Some(lambda);
        v = hv.into_iter().map(|x| x / nh).collect();
    }
    unreachable!("loop returns on its last iteration")
}

/// Dominant Hessian eigenvalue of `loss_fn` with respect to `w`.
pub fn top_eigenvalue(
    loss_fn: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    w: &Tensor,
    max_iter: usize,
    seed: u64,
) -> Result<HessianEstimate> {
    let mut g = Graph::new();
    let wv = g.param(w.clone())?;
    let loss = loss_fn(&mut g, wv)?;
    let gw = g.grad_graph(loss, &[wv])?[0];
    let res = match gw {
        None => PowerResult { lambda: 0.0, iterations: 1, converged: true },
        Some(gv) => power_iteration(w.len(), max_iter, seed, |v| {
            let t = Tensor::new(w.shape().to_vec(), v.to_vec())?;
            let mut grads = g.vjp(&[(gv, &t)])?;
            Ok(grads
                .take(wv)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; v.len()]))
        })?,
    };
    Ok(HessianEstimate {
        layer: 0,
        row: 0,
        lambda: res.lambda,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Per-row (block-diagonal) Hessian eigenvalues of one layer's weights,
/// given that layer's input activations for the calibration batch.
pub fn layer_hessians(
    model: &Model,
    layer: usize,
    layer_input: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<HessianEstimate>> {
    let mut g = Graph::new();
    let x = g.constant(layer_input.clone())?;
    let mut params: Vec<Option<LayerParams>> = vec![None; model.layers.len()];
    for (i, l) in model.layers.iter().enumerate().skip(layer) {
        params[i] = Some(LayerParams {
            weight: g.leaf(l.weight.clone(), i == layer)?,
            bias: g.constant(l.bias.clone())?,
        });
    }
    let start = model.stage_of_layer(layer);
    let logits = model.forward_stages(&mut g, start..model.stages.len(), x, &params, None)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let w = params[layer].expect("set above").weight;
    let gw = g.grad_graph(loss, &[w])?[0];
    let wshape = model.layers[layer].weight.shape().to_vec();
    let (rows, len) = model.layers[layer].weight.rows();
    let g = &g;
    (0..rows)
        .into_par_iter()
        .map(|row| {
            let res = match gw {
                None => PowerResult { lambda: 0.0, iterations: 1, converged: true },
                Some(gv) => power_iteration(
                    len,
                    MAX_POWER_ITERS,
                    rng::derive_seed(seed, &[layer as u64, row as u64]),
                    |v| {
                        let mut full = vec![0.0; rows * len];
                        full[row * len..(row + 1) * len].copy_from_slice(v);
                        let t = Tensor::new(wshape.clone(), full)?;
                        let mut grads = g.vjp(&[(gv, &t)])?;
                        Ok(match grads.take(w) {
                            Some(h) => h.row(row).to_vec(),
                            None => vec![0.0; len],
                        })
                    },
                )?,
            };
            Ok(HessianEstimate {
                layer,
                row,
                lambda: res.lambda,
                iterations: res.iterations,
                converged: res.converged,
            })
        })
        .collect()
}

/// Population variance of a row.
pub fn variance(row: &[f64]) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    row.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n
}

/// Assigns specs to the rows of one weight tensor. `lambdas` are required
/// when the ratio has a Fixed-W8A4 share. Returns a warning when a spec
/// with a positive share received no rows.
pub fn assign_layer(
    weight: &Tensor,
    lambdas: Option<&[f64]>,
    ratio: &RatioConfig,
) -> Result<(LayerAssignment, Option<String>)> {
    let (rows, _) = weight.rows();
    let counts = ratio.counts(rows);
    let mut specs = vec![QuantSpec::FixedW4A4; rows];
    let mut remaining: Vec<usize> = (0..rows).collect();
    if counts.fixed8 > 0 {
        let lambdas = lambdas.ok_or_else(|| {
            Error::InvalidArgument("Hessian eigenvalues required for the Fixed-W8A4 share".into())
        })?;
        if lambdas.len() != rows {
            return Err(Error::Shape(format!("{} eigenvalues for {rows} rows", lambdas.len())));
        }
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| lambdas[b].abs().total_cmp(&lambdas[a].abs()).then(a.cmp(&b)));
        for &r in &order[..counts.fixed8] {
            specs[r] = QuantSpec::FixedW8A4;
        }
        remaining = order[counts.fixed8..].to_vec();
    }
    let vars: Vec<f64> = (0..rows).map(|r| variance(weight.row(r))).collect();
    remaining.sort_by(|&a, &b| vars[a].total_cmp(&vars[b]).then(a.cmp(&b)));
    for &r in &remaining[..counts.pot4] {
        specs[r] = QuantSpec::PotW4A4;
    }
    let alphas = specs
        .iter()
        .enumerate()
        .map(|(r, &s)| calibrate_alpha(weight.row(r), s))
        .collect();
    let starved: Vec<&str> = [
        (ratio.pot4, counts.pot4, "PoT-W4A4"),
        (ratio.fixed4, counts.fixed4, "Fixed-W4A4"),
        (ratio.fixed8, counts.fixed8, "Fixed-W8A4"),
    ]
    .iter()
    .filter(|(share, n, _)| *share > 0 && *n == 0)
    .map(|t| t.2)
    .collect();
    let warning = (!starved.is_empty()).then(|| {
        format!(
            "{rows} rows cannot honor ratio {ratio}: no rows for {}",
            starved.join(", ")
        )
    });
    Ok((LayerAssignment { specs, alphas }, warning))
}

/// Full assignment of a model on a calibration batch.
pub fn assign_rows(
    model: &Model,
    ratio: &RatioConfig,
    calib_x: &Tensor,
    calib_labels: &[usize],
    seed: u64,
) -> Result<AssignmentReport> {
    let needs_hessian = model
        .layers
        .iter()
        .any(|l| ratio.counts(l.kind.rows()).fixed8 > 0);
    let inputs = if needs_hessian {
        Some(model.layer_inputs(calib_x)?)
    } else {
        None
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut hessians = Vec::with_capacity(model.layers.len());
    let mut warnings = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let est = match &inputs {
            Some(inp) if ratio.counts(layer.kind.rows()).fixed8 > 0 => {
                layer_hessians(model, i, &inp[i], calib_labels, seed)?
            }
            _ => vec![],
        };
        let lambdas: Vec<f64> = est.iter().map(|e| e.lambda).collect();
        let (la, warn) = assign_layer(&layer.weight, (!est.is_empty()).then_some(&lambdas[..]), ratio)?;
        if let Some(w) = warn {
            warnings.push(format!("layer {i}: {w}"));
        }
        layers.push(la);
        hessians.push(est);
    }
    Ok(AssignmentReport {
        assignment: RowAssignment { layers },
        hessians,
        warnings,
    })
}

/// Fresh assignment at positive multiples of `interval`, `None` (keep the
/// current one) otherwise.
pub fn reassign(
    model: &Model,
    ratio: &RatioConfig,
    calib_x: &Tensor,
    calib_labels: &[usize],
    epoch: usize,
    interval: usize,
    seed: u64,
) -> Result<Option<AssignmentReport>> {
    if epoch == 0 || interval == 0 || epoch % interval != 0 {
        return Ok(None);
    }
    assign_rows(model, ratio, calib_x, calib_labels, seed).map(Some)
}
