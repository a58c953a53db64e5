//! Offline fit of per-PE cost coefficients against published
//! utilization and latency measurements of ResNet-18 accelerators.
//!
//! The search is a seeded random scan over integer coefficients followed
//! by coordinate descent. It minimizes, over every point of one device,
//!
//! ```text
//! ln(latency_model / latency_measured)^2
//!   + ((lut_model - lut_measured) / 100)^2
//!   + ((dsp_model - dsp_measured) / 100)^2
//! ```
//!
//! with utilizations in percent. Budgets and clock are held fixed.

use rand::Rng;
use rowquant::assign::RatioConfig;

use crate::{report, DeviceProfile, ModelShape, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredPoint {
    pub device: &'static str,
    pub label: &'static str,
    pub ratio: (u32, u32, u32),
    pub lut_percent: f64,
    pub dsp_percent: f64,
    pub latency_ms: f64,
}

impl MeasuredPoint {
    pub fn ratio(&self) -> RatioConfig {
        let (a, b, c) = self.ratio;
        RatioConfig::new(a, b, c).expect("measured ratios sum to 100")
    }
}

const fn point(
    device: &'static str,
    label: &'static str,
    ratio: (u32, u32, u32),
    lut_percent: f64,
    dsp_percent: f64,
    latency_ms: f64,
) -> MeasuredPoint {
    MeasuredPoint {
        device,
        label,
        ratio,
        lut_percent,
        dsp_percent,
        latency_ms,
    }
}

/// ResNet-18 measurements at 100 MHz whose configuration the model can
/// express (4-bit first and last layers, no 8-bit-only variants).
pub const MEASURED: [MeasuredPoint; 8] = [
    point("XC7Z020", "Fixed", (0, 100, 0), 23.0, 100.0, 99.3),
    point("XC7Z020", "PoT", (100, 0, 0), 43.0, 12.0, 50.2),
    point("XC7Z020", "PoT+Fixed", (50, 50, 0), 46.0, 100.0, 47.8),
    point("XC7Z020", "Mixed-1", (60, 35, 5), 57.0, 100.0, 40.7),
    point("XC7Z045", "Fixed", (0, 100, 0), 19.0, 100.0, 25.4),
    point("XC7Z045", "PoT", (100, 0, 0), 43.0, 3.0, 10.3),
    point("XC7Z045", "PoT+Fixed", (50, 50, 0), 45.0, 100.0, 12.2),
    point("XC7Z045", "Mixed-2", (65, 30, 5), 67.0, 100.0, 8.6),
];

pub fn points_for(device: &str) -> Vec<MeasuredPoint> {
    MEASURED
        .iter()
        .filter(|p| p.device.eq_ignore_ascii_case(device))
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResidual {
    pub point: MeasuredPoint,
    pub latency_ms: f64,
    pub lut_percent: f64,
    pub dsp_percent: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub profile: DeviceProfile,
    pub loss: f64,
    pub residuals: Vec<PointResidual>,
}

pub fn residuals(
    profile: &DeviceProfile,
    points: &[MeasuredPoint],
    shape: &ModelShape,
) -> Result<Vec<PointResidual>> {
    points
        .iter()
        .map(|pt| {
            let r = report(shape, &pt.ratio(), profile)?;
            Ok(PointResidual {
                point: *pt,
                latency_ms: r.latency_ms,
                lut_percent: r.lut_util,
                dsp_percent: r.dsp_util,
            })
        })
        .collect()
}

/// Fit objective; infeasible profiles score infinity.
pub fn loss(profile: &DeviceProfile, points: &[MeasuredPoint], shape: &ModelShape) -> f64 {
    let Ok(rs) = residuals(profile, points, shape) else {
        return f64::INFINITY;
    };
    rs.iter()
        .map(|r| {
            let lat = (r.latency_ms / r.point.latency_ms).ln();
            let lut = (r.lut_percent - r.point.lut_percent) / 100.0;
            let dsp = (r.dsp_percent - r.point.dsp_percent) / 100.0;
            lat * lat + lut * lut + dsp * dsp
        })
        .sum()
}

const PARAMS: usize = 8;

fn get(p: &DeviceProfile) -> [u64; PARAMS] {
    [
        p.lut_cost_per_pot_pe,
        p.lut_cost_per_fixed_pe_overhead,
        p.dsp_cost_per_fixed4_pe,
        p.dsp_cost_per_fixed8_pe,
        p.control_luts,
        p.control_dsps,
        p.max_pes_per_core,
        p.pe_efficiency_percent,
    ]
}

fn set(p: &mut DeviceProfile, v: [u64; PARAMS]) {
    p.lut_cost_per_pot_pe = v[0];
    p.lut_cost_per_fixed_pe_overhead = v[1];
    p.dsp_cost_per_fixed4_pe = v[2];
    p.dsp_cost_per_fixed8_pe = v[3];
    p.control_luts = v[4];
    p.control_dsps = v[5];
    p.max_pes_per_core = v[6];
    p.pe_efficiency_percent = v[7];
}

fn bounds(p: &DeviceProfile) -> [(u64, u64); PARAMS] {
    [
        (4, 400),
        (0, 400),
        (1, 4),
        (1, 8),
        (0, p.luts / 2),
        (0, p.dsps / 4),
        (16, 16_384),
        (30, 100),
    ]
}

/// Fits the free coefficients of `base` to `points`.
pub fn fit_profile(
    base: &DeviceProfile,
    points: &[MeasuredPoint],
    shape: &ModelShape,
    seed: u64,
    samples: usize,
) -> Result<FitResult> {
    let bounds = bounds(base);
    let mut rng = rowquant::rng::rng(seed);
    let mut cand = base.clone();
    // Best few random draws, each refined separately.
    let mut starts: Vec<(f64, [u64; PARAMS])> = vec![(loss(base, points, shape), get(base))];
    for _ in 0..samples {
        let mut v = [0; PARAMS];
        for (slot, &(lo, hi)) in v.iter_mut().zip(&bounds) {
            *slot = rng.random_range(lo..=hi);
        }
        set(&mut cand, v);
        let l = loss(&cand, points, shape);
        if l.is_finite() {
            starts.push((l, v));
            if starts.len() > 4 * RESTARTS {
                starts.sort_by(|a, b| a.0.total_cmp(&b.0));
                starts.truncate(RESTARTS);
            }
        }
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    starts.truncate(RESTARTS);

    let (mut best_loss, mut best) = (f64::INFINITY, get(base));
    for (l, v) in starts {
        let (l, v) = descend(&mut cand, l, v, &bounds, points, shape);
        if l < best_loss {
            (best_loss, best) = (l, v);
        }
    }
    set(&mut cand, best);
    let residuals = residuals(&cand, points, shape)?;
    Ok(FitResult {
        profile: cand,
        loss: best_loss,
        residuals,
    })
}

fn descend(
    cand: &mut DeviceProfile,
    mut best_loss: f64,
    mut best: [u64; PARAMS],
    bounds: &[(u64, u64); PARAMS],
    points: &[MeasuredPoint],
    shape: &ModelShape,
) -> (f64, [u64; PARAMS]) {
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..PARAMS {
            let (lo, hi) = bounds[i];
            let mut step = ((hi - lo) / 4).max(1);
            loop {
                let mut moved = false;
                for up in [false, true] {
                    let mut v = best;
                    v[i] = if up {
                        (v[i] + step).min(hi)
                    } else {
                        v[i].saturating_sub(step).max(lo)
                    };
                    if v[i] == best[i] {
                        continue;
                    }
                    set(cand, v);
                    let l = loss(cand, points, shape);
                    if l < best_loss {
                        best_loss = l;
                        best = v;
                        moved = true;
                        improved = true;
                    }
                }
                if !moved {
                    if step == 1 {
                        break;
                    }
                    step /= 2;
                }
            }
        }
    }
    (best_loss, best)
}

const RESTARTS: usize = 16;

/// Default search size used for the shipped profiles.
pub const DEFAULT_SAMPLES: usize = 20_000;
pub const DEFAULT_SEED: u64 = 2021;

/// Comment block written above a fitted profile.
pub fn header(r: &FitResult, seed: u64, samples: usize) -> String {
    let mut h = format!(
        "Fitted with `rowquant fit-profiles` (seed {seed}, {samples} samples) on resnet18.\nloss {:.6}\n",
        r.loss
    );
    for x in &r.residuals {
        h.push_str(&format!(
            "{} {}: latency {:.1} ms (measured {:.1}), LUT {:.0}% ({:.0}%), DSP {:.0}% ({:.0}%)\n",
            x.point.label,
            x.point.ratio(),
            x.latency_ms,
            x.point.latency_ms,
            x.lut_percent,
            x.point.lut_percent,
            x.dsp_percent,
            x.point.dsp_percent
        ));
    }
    h
}
