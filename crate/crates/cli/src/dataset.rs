//! Resolves `--data` arguments.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rowquant::data::{self, Dataset, DigitStyle};
use rowquant::rng;

use crate::usage;

pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    /// The held-out split if there is one, else the training data.
    pub fn eval(self) -> Dataset {
        self.test.unwrap_or(self.train)
    }
}

fn numbers(spec: &str, fields: &str, min: usize, max: usize) -> anyhow::Result<Vec<u64>> {
    let parts: Vec<&str> = spec.split(':').skip(1).collect();
    if parts.len() < min || parts.len() > max {
        return Err(usage(format!("data spec `{spec}` must look like {fields}")));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<u64>()
                .map_err(|_| usage(format!("data spec `{spec}`: `{p}` is not a non-negative integer")))
        })
        .collect()
}

fn find_prefixed(dir: &Path, prefix: &str) -> anyhow::Result<Option<PathBuf>> {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && !n.ends_with(".gz"))
        })
        .collect();
    hits.sort();
    Ok(hits.into_iter().next())
}

fn idx_pair(dir: &Path, split: &str) -> anyhow::Result<Option<Dataset>> {
    let images = find_prefixed(dir, &format!("{split}-images"))?;
    let labels = find_prefixed(dir, &format!("{split}-labels"))?;
    match (images, labels) {
        (Some(i), Some(l)) => Ok(Some(
            data::load_idx(&i, &l).with_context(|| format!("reading {}", i.display()))?,
        )),
        (None, None) => Ok(None),
        _ => Err(usage(format!(
            "{}: {split}-images and {split}-labels must both be present",
            dir.display()
        ))),
    }
}

pub fn resolve(spec: &str) -> anyhow::Result<Splits> {
    if spec.starts_with("gaussians:") {
        let n = numbers(spec, "gaussians:CLASSES:DIMS:N[:SEED]", 3, 4)?;
        let seed = n.get(3).copied().unwrap_or(0);
        let (c, d, per) = (n[0] as usize, n[1] as usize, n[2] as usize);
        let train = data::synth_gaussians(c, d, per, rng::derive_seed(seed, &[1]))?;
        let test = data::synth_gaussians(c, d, per, rng::derive_seed(seed, &[2]))?;
        return Ok(Splits { train, test: Some(test) });
    }
    if spec.starts_with("digits:") {
        let n = numbers(spec, "digits:TRAIN:TEST:SIZE[:SEED[:NOISE%[:FLIP%]]]", 3, 6)?;
        let seed = n.get(3).copied().unwrap_or(0);
        let (tr, te, size) = (n[0] as usize, n[1] as usize, n[2] as usize);
        let mut style = DigitStyle::default();
        if let Some(&v) = n.get(4) {
            style.noise = v as f64 / 100.0;
        }
        if let Some(&v) = n.get(5) {
            style.flip = v as f64 / 100.0;
        }
        let (ti, tl) = data::synth_digits_styled(tr, size, style, rng::derive_seed(seed, &[1]))?;
        let (vi, vl) = data::synth_digits_styled(te, size, style, rng::derive_seed(seed, &[2]))?;
        return Ok(Splits {
            train: data::dataset_from_idx(&ti, &tl)?,
            test: Some(data::dataset_from_idx(&vi, &vl)?),
        });
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(usage(format!("data path not found: {}", path.display())));
    }
    if path.is_dir() {
        let train = idx_pair(path, "train")?
            .ok_or_else(|| usage(format!("{}: no train-images/train-labels IDX files", path.display())))?;
        let test = idx_pair(path, "t10k")?;
        return Ok(Splits { train, test });
    }
    let train = data::load_csv(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Splits { train, test: None })
}

/// Training data plus the evaluation set: `--val-data` if given,
/// otherwise the held-out split of `--data`.
pub fn train_and_val(data: &str, val: Option<&str>) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    let splits = resolve(data)?;
    let val = match val {
        Some(v) => Some(resolve(v)?.eval()),
        None => splits.test,
    };
    Ok((splits.train, val))
}
