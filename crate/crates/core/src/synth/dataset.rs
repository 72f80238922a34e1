//! Deterministic train/val/test splits written to disk with JSON-lines
//! manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

use super::forge::{generate, ForgeConfig};
use super::{Label, Operation, Provenance, Sample};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Fraction of forged samples in every split.
    pub forged_fraction: f64,
    /// Relative weights of splice, copy-move and inpaint among forgeries.
    pub mix: [f64; 3],
    pub forge: ForgeConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
            height: 64,
            width: 64,
            seed: 0,
            forged_fraction: 0.5,
            mix: [0.5, 0.25, 0.25],
            forge: ForgeConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn count(&self, split: usize) -> usize {
        [self.train, self.val, self.test][split]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("images must be at least 8×8".into()));
        }
        if !(0.0..=1.0).contains(&self.forged_fraction) {
            return Err(Error::Config("forged_fraction must lie in [0, 1]".into()));
        }
        if self.mix.iter().any(|&m| m < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mix weights must be ≥ 0 and not all zero".into()));
        }
        if self.train.max(self.val).max(self.test) >= 1 << 24 {
            return Err(Error::Config("at most 2^24 samples per split".into()));
        }
        Ok(())
    }
}

/// Per-sample seed. Distinct splits and indices never collide.
pub fn sample_seed(master: u64, split: usize, index: usize) -> u64 {
    (master << 32) ^ ((split as u64 + 1) << 24) ^ index as u64
}

/// Splits `n` into integer counts proportional to `weights`, largest
/// remainders first.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// The ordered operation list for one split.
pub fn plan_split(spec: &DatasetSpec, split: usize) -> Vec<Operation> {
    let n = spec.count(split);
    let forged = (n as f64 * spec.forged_fraction).round() as usize;
    let kinds = apportion(forged, &spec.mix);
    let mut ops = vec![Operation::Authentic; n - forged];
    for (op, k) in [Operation::Splice, Operation::CopyMove, Operation::Inpaint].iter().zip(kinds) {
        ops.extend(std::iter::repeat_n(*op, k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, 1 << 23));
    ops.shuffle(&mut rng);
    ops
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub label: Label,
    pub provenance: Provenance,
}

/// Generates every split in memory.
pub fn generate_split(spec: &DatasetSpec, split: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    plan_split(spec, split)
        .into_par_iter()
        .enumerate()
        .map(|(i, op)| generate(op, sample_seed(spec.seed, split, i), spec.height, spec.width, &spec.forge))
        .collect()
}

/// Writes `<out>/<split>/{images,masks}` and `<out>/<split>/manifest.jsonl`
/// for every split, plus `<out>/dataset.json` with the spec. Returns the
/// manifest paths.
pub fn dataset_build(spec: &DatasetSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut manifests = Vec::new();
    for (split, name) in SPLITS.iter().enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(&dir, e))?;
        fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(&dir, e))?;
        let samples = generate_split(spec, split)?;
        let entries: Vec<ManifestEntry> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let id = format!("{name}_{i:05}");
                let image = format!("images/{id}.png");
                let mask = format!("masks/{id}.pgm");
                imageio::write_rgb_png(&dir.join(&image), &s.image)?;
                imageio::write_gray(&dir.join(&mask), &s.mask)?;
                Ok(ManifestEntry {
                    id,
                    image,
                    mask,
                    label: s.label,
                    provenance: s.provenance.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let path = dir.join("manifest.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for e in &entries {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(&path, e))?;
        }
        manifests.push(path);
    }
    let spec_path = out.join("dataset.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n").map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifests)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads every sample listed in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::invalid(format!("manifest {} lists no samples", path.display())));
    }
    entries
        .par_iter()
        .map(|e| {
            let image = imageio::read_rgb(&base.join(&e.image))?;
            let mask = imageio::read_mask(&base.join(&e.mask))?;
            if mask.shape()[1..] != image.shape()[1..] {
                return Err(Error::invalid(format!("mask and image sizes differ for {}", e.id)));
            }
            Ok(Sample {
                image,
                mask,
                label: e.label,
                provenance: e.provenance.clone(),
            })
        })
        .collect()
}
