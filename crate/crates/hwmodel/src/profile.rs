use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::{HwError, Result};

/// Budgets and per-PE costs of one device.
///
/// `control_*` is logic outside the PE arrays (buffers, sequencing).
/// `max_pes_per_core` bounds any single array, standing in for the
/// routing and buffer limits that stop a core from growing without bound.
/// `pe_efficiency_percent` is the fraction of cycles spent computing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub name: String,
    pub luts: u64,
    pub dsps: u64,
    pub lut_cost_per_pot_pe: u64,
    pub lut_cost_per_fixed_pe_overhead: u64,
    pub dsp_cost_per_fixed4_pe: u64,
    pub dsp_cost_per_fixed8_pe: u64,
    pub freq_mhz: u64,
    pub control_luts: u64,
    pub control_dsps: u64,
    pub max_pes_per_core: u64,
    pub pe_efficiency_percent: u64,
}

const XC7Z020_TEXT: &str = include_str!("../profiles/xc7z020.profile");
const XC7Z045_TEXT: &str = include_str!("../profiles/xc7z045.profile");

impl DeviceProfile {
    /// A profile with the given budgets, unit costs and no control logic.
    pub fn with_budget(name: &str, luts: u64, dsps: u64) -> Self {
        Self {
            name: name.to_string(),
            luts,
            dsps,
            lut_cost_per_pot_pe: 40,
            lut_cost_per_fixed_pe_overhead: 20,
            dsp_cost_per_fixed4_pe: 1,
            dsp_cost_per_fixed8_pe: 2,
            freq_mhz: 100,
            control_luts: 0,
            control_dsps: 0,
            max_pes_per_core: u64::MAX,
            pe_efficiency_percent: 100,
        }
    }

    /// Shipped fitted profile for the XC7Z020.
    pub fn xc7z020() -> Self {
        XC7Z020_TEXT.parse().expect("shipped profile parses")
    }

    /// Shipped fitted profile for the XC7Z045.
    pub fn xc7z045() -> Self {
        XC7Z045_TEXT.parse().expect("shipped profile parses")
    }

    /// Looks up a shipped profile by device name, case-insensitively.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "xc7z020" => Some(Self::xc7z020()),
            "xc7z045" => Some(Self::xc7z045()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        let mut text = String::new();
        for line in header.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
        text.push_str(&self.to_string());
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("luts", self.luts),
            ("lut_cost_per_pot_pe", self.lut_cost_per_pot_pe),
            ("dsp_cost_per_fixed4_pe", self.dsp_cost_per_fixed4_pe),
            ("dsp_cost_per_fixed8_pe", self.dsp_cost_per_fixed8_pe),
            ("freq_mhz", self.freq_mhz),
            ("max_pes_per_core", self.max_pes_per_core),
            ("pe_efficiency_percent", self.pe_efficiency_percent),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(HwError::Profile(format!("{key} must be positive")));
            }
        }
        if self.pe_efficiency_percent > 100 {
            return Err(HwError::Profile("pe_efficiency_percent exceeds 100".into()));
        }
        if self.control_luts > self.luts || self.control_dsps > self.dsps {
            return Err(HwError::Profile("control logic exceeds device budget".into()));
        }
        Ok(())
    }
}

impl FromStr for DeviceProfile {
    type Err = HwError;

    fn from_str(text: &str) -> Result<Self> {
        let mut p = DeviceProfile::with_budget("", 0, 0);
        p.lut_cost_per_pot_pe = 0;
        p.lut_cost_per_fixed_pe_overhead = 0;
        p.dsp_cost_per_fixed4_pe = 0;
        p.dsp_cost_per_fixed8_pe = 0;
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| HwError::ProfileSyntax { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "name" {
                p.name = value.trim_matches('"').to_string();
                seen.push("name".to_string());
                continue;
            }
            let n: u64 = value
                .replace('_', "")
                .parse()
                .map_err(|_| syntax(format!("`{key}` needs a non-negative integer, got `{value}`")))?;
            let slot = match key {
                "luts" => &mut p.luts,
                "dsps" => &mut p.dsps,
                "lut_cost_per_pot_pe" => &mut p.lut_cost_per_pot_pe,
                "lut_cost_per_fixed_pe_overhead" => &mut p.lut_cost_per_fixed_pe_overhead,
                "dsp_cost_per_fixed4_pe" => &mut p.dsp_cost_per_fixed4_pe,
                "dsp_cost_per_fixed8_pe" => &mut p.dsp_cost_per_fixed8_pe,
                "freq_mhz" => &mut p.freq_mhz,
                "control_luts" => &mut p.control_luts,
                "control_dsps" => &mut p.control_dsps,
                "max_pes_per_core" => &mut p.max_pes_per_core,
                "pe_efficiency_percent" => &mut p.pe_efficiency_percent,
                other => return Err(syntax(format!("unknown key `{other}`"))),
            };
            *slot = n;
            seen.push(key.to_string());
        }
        for required in [
            "name",
            "luts",
            "dsps",
            "lut_cost_per_pot_pe",
            "dsp_cost_per_fixed4_pe",
            "dsp_cost_per_fixed8_pe",
        ] {
            if !seen.iter().any(|k| k == required) {
                return Err(HwError::Profile(format!("missing key `{required}`")));
            }
        }
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for DeviceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {}", self.name)?;
        writeln!(f, "luts = {}", self.luts)?;
        writeln!(f, "dsps = {}", self.dsps)?;
        writeln!(f, "lut_cost_per_pot_pe = {}", self.lut_cost_per_pot_pe)?;
        writeln!(f, "lut_cost_per_fixed_pe_overhead = {}", self.lut_cost_per_fixed_pe_overhead)?;
        writeln!(f, "dsp_cost_per_fixed4_pe = {}", self.dsp_cost_per_fixed4_pe)?;
        writeln!(f, "dsp_cost_per_fixed8_pe = {}", self.dsp_cost_per_fixed8_pe)?;
        writeln!(f, "freq_mhz = {}", self.freq_mhz)?;
        writeln!(f, "control_luts = {}", self.control_luts)?;
        writeln!(f, "control_dsps = {}", self.control_dsps)?;
        writeln!(f, "max_pes_per_core = {}", self.max_pes_per_core)?;
        writeln!(f, "pe_efficiency_percent = {}", self.pe_efficiency_percent)
    }
}
