use std::fmt;

use rowquant::assign::{RatioConfig, SpecCounts};
use rowquant::model::LayerDims;

use crate::{DeviceProfile, HwError, ModelShape, Result};

/// PE counts per core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoreAllocation {
    pub pot4_pes: u64,
    pub fixed4_pes: u64,
    pub fixed8_pes: u64,
}

impl CoreAllocation {
    pub fn lut_usage(&self, p: &DeviceProfile) -> u64 {
        p.control_luts
            + self.pot4_pes * p.lut_cost_per_pot_pe
            + (self.fixed4_pes + self.fixed8_pes) * p.lut_cost_per_fixed_pe_overhead
    }

    pub fn dsp_usage(&self, p: &DeviceProfile) -> u64 {
        p.control_dsps
            + self.fixed4_pes * p.dsp_cost_per_fixed4_pe
            + self.fixed8_pes * p.dsp_cost_per_fixed8_pe
    }
}

/// `a/pa > b/pb` with `x/0` treated as infinite.
fn busier(a: u64, pa: u64, b: u64, pb: u64) -> bool {
    match (pa, pb) {
        (0, 0) => a > b,
        (0, _) => true,
        (_, 0) => false,
        _ => (a as u128) * (pb as u128) > (b as u128) * (pa as u128),
    }
}

/// Sizes the three PE arrays for `ratio`.
///
/// Fixed cores are grown one PE at a time, always on the core with the
/// most work per PE, until no further PE fits the DSP budget. The PoT
/// core is then sized to finish its share no later than the slower Fixed
/// core, limited by the LUTs left over. With no Fixed work it takes every
/// LUT it can.
pub fn allocate_cores(profile: &DeviceProfile, ratio: &RatioConfig) -> Result<CoreAllocation> {
    profile.validate().map_err(|e| HwError::Infeasible(e.to_string()))?;
    let p = profile;
    let cap = p.max_pes_per_core;
    let mut dsp_free = p.dsps - p.control_dsps;
    let mut lut_free = p.luts - p.control_luts;
    let shares = [ratio.fixed4 as u64, ratio.fixed8 as u64];
    let dsp_cost = [p.dsp_cost_per_fixed4_pe, p.dsp_cost_per_fixed8_pe];
    let mut pes = [0u64; 2];
    loop {
        let mut pick: Option<usize> = None;
        for i in 0..2 {
            let fits = shares[i] > 0
                && pes[i] < cap
                && dsp_cost[i] <= dsp_free
                && p.lut_cost_per_fixed_pe_overhead <= lut_free;
            if fits && pick.is_none_or(|j| busier(shares[i], pes[i], shares[j], pes[j])) {
                pick = Some(i);
            }
        }
        let Some(i) = pick else { break };
        pes[i] += 1;
        dsp_free -= dsp_cost[i];
        lut_free -= p.lut_cost_per_fixed_pe_overhead;
    }
    for (i, name) in ["Fixed-W4A4", "Fixed-W8A4"].iter().enumerate() {
        if shares[i] > 0 && pes[i] == 0 {
            return Err(HwError::Infeasible(format!(
                "{name} core needs {} DSPs per PE but only {} of {} DSPs are free",
                dsp_cost[i],
                p.dsps - p.control_dsps,
                p.dsps
            )));
        }
    }

    let pot_share = ratio.pot4 as u64;
    let mut pot = 0;
    if pot_share > 0 {
        // Slowest fixed core decides how many PoT PEs are worth having.
        let slowest = (0..2)
            .filter(|&i| shares[i] > 0)
            .reduce(|a, b| if busier(shares[b], pes[b], shares[a], pes[a]) { b } else { a });
        let target = match slowest {
            Some(k) => (pot_share * pes[k]).div_ceil(shares[k]),
            None => u64::MAX,
        };
        pot = target.min(cap).min(lut_free / p.lut_cost_per_pot_pe);
        if pot == 0 {
            return Err(HwError::Infeasible(format!(
                "PoT-W4A4 core needs {} LUTs per PE but only {lut_free} LUTs are left",
                p.lut_cost_per_pot_pe
            )));
        }
    }
    Ok(CoreAllocation {
        pot4_pes: pot,
        fixed4_pes: pes[0],
        fixed8_pes: pes[1],
    })
}

/// Cycles for one layer: each core handles its own rows, all cores run
/// concurrently.
pub fn estimate_layer(dims: &LayerDims, counts: &SpecCounts, alloc: &CoreAllocation) -> Result<u64> {
    if counts.total() != dims.rows {
        return Err(HwError::Infeasible(format!(
            "row counts {} do not cover {} rows",
            counts.total(),
            dims.rows
        )));
    }
    let per_row = (dims.fan_in * dims.positions) as u64;
    let cores = [
        ("PoT-W4A4", counts.pot4, alloc.pot4_pes),
        ("Fixed-W4A4", counts.fixed4, alloc.fixed4_pes),
        ("Fixed-W8A4", counts.fixed8, alloc.fixed8_pes),
    ];
    let mut cycles = 0;
    for (name, rows, pes) in cores {
        let ops = rows as u64 * per_row;
        if ops == 0 {
            continue;
        }
        if pes == 0 {
            return Err(HwError::Infeasible(format!("{ops} {name} ops but no {name} PEs")));
        }
        cycles = cycles.max(ops.div_ceil(pes));
    }
    Ok(cycles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub dims: LayerDims,
    pub counts: SpecCounts,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub device: String,
    pub model: String,
    pub ratio: RatioConfig,
    pub allocation: CoreAllocation,
    pub layers: Vec<LayerCost>,
    pub total_cycles: u64,
    pub macs: u64,
    pub latency_ms: f64,
    pub gops: f64,
    pub lut_util: f64,
    pub dsp_util: f64,
}

/// Runs every layer of `shape` through the allocation for `ratio`.
pub fn report(shape: &ModelShape, ratio: &RatioConfig, profile: &DeviceProfile) -> Result<CostReport> {
    if shape.layers.is_empty() {
        return Err(HwError::EmptyModel);
    }
    let alloc = allocate_cores(profile, ratio)?;
    let mut layers = Vec::with_capacity(shape.layers.len());
    let (mut total_cycles, mut macs) = (0u64, 0u64);
    for l in &shape.layers {
        let counts = ratio.counts(l.dims.rows);
        let cycles = estimate_layer(&l.dims, &counts, &alloc)?;
        total_cycles += cycles;
        macs += l.dims.macs();
        layers.push(LayerCost {
            name: l.name.clone(),
            dims: l.dims,
            counts,
            cycles,
        });
    }
    if total_cycles == 0 {
        return Err(HwError::EmptyModel);
    }
    let busy_hz = profile.freq_mhz as f64 * 1e6 * profile.pe_efficiency_percent as f64 / 100.0;
    let seconds = total_cycles as f64 / busy_hz;
    Ok(CostReport {
        device: profile.name.clone(),
        model: shape.name.clone(),
        ratio: *ratio,
        allocation: alloc,
        layers,
        total_cycles,
        macs,
        latency_ms: seconds * 1e3,
        gops: 2.0 * macs as f64 / seconds / 1e9,
        lut_util: 100.0 * alloc.lut_usage(profile) as f64 / profile.luts as f64,
        dsp_util: if profile.dsps == 0 {
            0.0
        } else {
            100.0 * alloc.dsp_usage(profile) as f64 / profile.dsps as f64
        },
    })
}

impl CostReport {
    pub const LAYER_HEADER: &'static str =
        "layer,rows,fan_in,positions,macs,pot4_rows,fixed4_rows,fixed8_rows,cycles";
    pub const SUMMARY_HEADER: &'static str =
        "device,model,ratio,pot4_pes,fixed4_pes,fixed8_pes,lut_util,dsp_util,gops,latency_ms";

    /// One CSV line per layer.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from(Self::LAYER_HEADER);
        out.push('\n');
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                l.name,
                l.dims.rows,
                l.dims.fan_in,
                l.dims.positions,
                l.dims.macs(),
                l.counts.pot4,
                l.counts.fixed4,
                l.counts.fixed8,
                l.cycles
            ));
        }
        out
    }

    /// Data line matching [`Self::SUMMARY_HEADER`].
    pub fn summary_csv_row(&self) -> String {
        let a = &self.allocation;
        format!(
            "{},{},{},{},{},{},{:.2},{:.2},{:.2},{:.4}",
            self.device,
            self.model,
            self.ratio,
            a.pot4_pes,
            a.fixed4_pes,
            a.fixed8_pes,
            self.lut_util,
            self.dsp_util,
            self.gops,
            self.latency_ms
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.allocation;
        writeln!(f, "device {}  model {}  ratio {}", self.device, self.model, self.ratio)?;
        writeln!(
            f,
            "PEs: PoT-W4A4 {}  Fixed-W4A4 {}  Fixed-W8A4 {}",
            a.pot4_pes, a.fixed4_pes, a.fixed8_pes
        )?;
        writeln!(f, "{:>8} {:>8} {:>20} {:>14}", "LUT", "DSP", "Throughput (GOP/s)", "Latency (ms)")?;
        writeln!(
            f,
            "{:>7.0}% {:>7.0}% {:>20.1} {:>14.1}",
            self.lut_util, self.dsp_util, self.gops, self.latency_ms
        )
    }
}
