//! One-axis experiment sweeps.
//!
//! Each (axis value, seed) cell trains and evaluates in its own directory
//! named after the cell's config hash. A finished cell leaves `result.json`
//! behind and is skipped on rerun. Results are appended to `sweep.csv`, and
//! latent-generator cells also append convergence rows to `convergence.csv`.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig};
use crate::data::{generate_procedural_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nets::FeatureExtractor;
use crate::training::checkpoint::{file_hash, load_checkpoint, write_atomic};
use crate::training::latent_gen::{LatentGenReport, LatentGenerator, CONVERGENCE_HEADER};
use crate::training::log::{append_rows, read_rows};
use crate::training::trainer::{evaluate_reconstruction, LAST_CHECKPOINT};
use crate::training::{load_or_train_features, write_hashes, Trainer};

pub const SWEEP_HEADER: &str = "axis,axis_value,model,seed,status,psnr,ssim,frechet,tv,config_hash";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Latent channels at the base downsampling factor.
    LatentSize,
    /// Latent presets such as `f8c4` and `f16c16`.
    SpatialF,
    /// Decoder presets B, M, L.
    DecoderScale,
    /// Encoder base width.
    EncoderScale,
    /// Discriminator presets S, M, L; baseline only.
    DiscriminatorScale,
    /// Latent presets, each followed by a latent-generator run.
    LatentGen,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::LatentSize,
        SweepAxis::SpatialF,
        SweepAxis::DecoderScale,
        SweepAxis::EncoderScale,
        SweepAxis::DiscriminatorScale,
        SweepAxis::LatentGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LatentSize => "latent-size",
            SweepAxis::SpatialF => "spatial-f",
            SweepAxis::DecoderScale => "decoder-scale",
            SweepAxis::EncoderScale => "encoder-scale",
            SweepAxis::DiscriminatorScale => "discriminator-scale",
            SweepAxis::LatentGen => "latent-gen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::LatentSize => &["1", "2", "4"],
            SweepAxis::SpatialF => &["f8c4", "f16c16"],
            SweepAxis::DecoderScale => &["B", "M", "L"],
            SweepAxis::EncoderScale => &["8", "16", "32"],
            SweepAxis::DiscriminatorScale => &["S", "M", "L"],
            SweepAxis::LatentGen => &["f8c4", "f8c16"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value` and the global seed set to `seed`.
    pub fn apply(self, base: &RunConfig, value: &str, seed: u64) -> Result<RunConfig> {
        let (strip, over): (&[&str], String) = match self {
            SweepAxis::LatentSize => (&["latent", "encoder.latent_channels"], format!("encoder.latent_channels={value}")),
            SweepAxis::SpatialF | SweepAxis::LatentGen => (&["latent", "encoder."], format!("latent={value}")),
            SweepAxis::DecoderScale => (&["decoder."], format!("decoder.preset={value}")),
            SweepAxis::EncoderScale => (&["encoder.base_channels"], format!("encoder.base_channels={value}")),
            SweepAxis::DiscriminatorScale => {
                if base.model != ModelKind::Baseline {
                    return Err(Error::config("model", "the discriminator-scale axis needs a baseline base config"));
                }
                (&["disc.scale"], format!("disc.scale={value}"))
            }
        };
        let text: String = base
            .to_config_text()
            .lines()
            .filter(|l| {
                let key = l.split('=').next().unwrap_or("").trim();
                !strip.iter().any(|s| if s.ends_with('.') { key.starts_with(s) } else { key == *s })
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let cfg = RunConfig::parse(&text, &[over, format!("seed.global={seed}")]).map_err(|e| match e {
            Error::Config { field, message } => Error::config(
                format!("{}={value}", self.name()),
                format!("{field}: {message}"),
            ),
            other => other,
        })?;
        if self == SweepAxis::LatentSize && cfg.encoder.latent_channels.to_string() != value {
            return Err(Error::config(self.name(), format!("`{value}` is not a channel count")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub report: EvalReport,
    pub convergence: Option<Vec<(u64, f64)>>,
    pub latent_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Done(CellResult),
    Skipped(CellResult),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub axis_value: String,
    pub seed: u64,
    pub config_hash: String,
    pub dir: PathBuf,
    pub status: CellStatus,
}

impl CellOutcome {
    pub fn result(&self) -> Option<&CellResult> {
        match &self.status {
            CellStatus::Done(r) | CellStatus::Skipped(r) => Some(r),
            CellStatus::Failed(_) => None,
        }
    }

    fn csv_row(&self, axis: SweepAxis, model: &str) -> String {
        let head = format!("{},{},{model},{}", axis.name(), self.axis_value, self.seed);
        match &self.status {
            CellStatus::Done(r) | CellStatus::Skipped(r) => format!(
                "{head},ok,{},{},{},{},{}",
                r.report.psnr_mean, r.report.ssim_mean, r.report.frechet_distance, r.report.latent_tv, self.config_hash
            ),
            CellStatus::Failed(m) => {
                let m: String = m.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
                format!("{head},failed: {m},,,,,{}", self.config_hash)
            }
        }
    }
}

fn cell_dir(root: &Path, axis: SweepAxis, value: &str, cfg: &RunConfig) -> PathBuf {
    root.join("cells")
        .join(format!("{}-{value}-s{}-{}", axis.name(), cfg.seeds.global, &cfg.hash()[..12]))
}

/// Train, evaluate and (for the latent-gen axis) fit a latent generator in `dir`.
pub fn run_cell(
    axis: SweepAxis,
    cfg: &RunConfig,
    dataset: &Dataset,
    eval_set: &Dataset,
    fx: &FeatureExtractor,
    dir: &Path,
) -> Result<CellResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.txt"), cfg.to_config_text().as_bytes())?;
    let last = dir.join(LAST_CHECKPOINT);
    let resumed = load_checkpoint(&last).ok().and_then(|c| Trainer::resume(cfg, &c).ok());
    let mut trainer = match resumed {
        Some(t) => {
            info!("resuming cell from step {}", t.step);
            t
        }
        None => Trainer::new(cfg, fx.clone())?,
    }
    .with_output(dir)?;
    trainer.run(dataset)?;
    let ckpt_hash = file_hash(&dir.join(LAST_CHECKPOINT))?;
    let report = evaluate_reconstruction(&trainer.model, cfg, eval_set, fx, &cfg.sampler, &ckpt_hash, trainer.step)?;
    write_atomic(&dir.join("eval.txt"), report.to_kv().as_bytes())?;
    let latent_size = cfg.encoder.latent_size(cfg.crop_size);
    let convergence = if axis == SweepAxis::LatentGen {
        let mut gen = LatentGenerator::new(cfg, &trainer.model, dataset)?;
        let r: LatentGenReport = gen.run(&trainer.model, fx, eval_set, Some(&dir.join(CONVERGENCE_FILE)))?;
        Some(r.points)
    } else {
        None
    };
    write_hashes(dir)?;
    Ok(CellResult {
        report,
        convergence,
        latent_size,
    })
}

fn load_result(dir: &Path, hash: &str) -> Option<CellResult> {
    let text = std::fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
    let r: CellResult = serde_json::from_str(&text).ok()?;
    (r.report.config_hash == hash).then_some(r)
}

/// Run every (value, seed) cell of `spec` under `root`, skipping finished cells.
///
/// Axis values are all validated before any training starts. A failing cell is
/// recorded with its error and the sweep continues.
pub fn run_sweep(base: &RunConfig, spec: &SweepSpec, root: &Path) -> Result<Vec<CellOutcome>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::config("sweep", "need at least one axis value and one seed"));
    }
    let mut cells = Vec::new();
    for v in &spec.values {
        for &s in &spec.seeds {
            cells.push((v.clone(), s, spec.axis.apply(base, v, s)?));
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let dataset = generate_procedural_dataset(&base.dataset)?;
    let eval_set = generate_procedural_dataset(&base.eval_dataset_spec())?;
    let fx = load_or_train_features(base, &dataset, root)?;
    let mut out = Vec::new();
    for (value, seed, cfg) in cells {
        let hash = cfg.hash();
        let dir = cell_dir(root, spec.axis, &value, &cfg);
        let status = if let Some(r) = load_result(&dir, &hash) {
            info!("skipping finished cell {}", dir.display());
            CellStatus::Skipped(r)
        } else {
            info!("running cell {}", dir.display());
            match run_cell(spec.axis, &cfg, &dataset, &eval_set, &fx, &dir) {
                Ok(r) => {
                    let json = serde_json::to_string_pretty(&r).map_err(|e| Error::Corrupt(e.to_string()))?;
                    write_atomic(&dir.join(RESULT_FILE), json.as_bytes())?;
                    CellStatus::Done(r)
                }
                Err(e) => {
                    warn!("cell {} failed: {e}", dir.display());
                    CellStatus::Failed(e.to_string())
                }
            }
        };
        let cell = CellOutcome {
            axis_value: value,
            seed,
            config_hash: hash,
            dir,
            status,
        };
        if !matches!(cell.status, CellStatus::Skipped(_)) {
            append_rows(&root.join(SWEEP_FILE), SWEEP_HEADER, &[cell.csv_row(spec.axis, cfg.model.name())])?;
            if let CellStatus::Done(r) = &cell.status {
                if let Some(points) = &r.convergence {
                    let rows: Vec<String> = points
                        .iter()
                        .map(|(st, f)| format!("{},{},{st},{f}", cell.axis_value, cell.seed))
                        .collect();
                    append_rows(&root.join(CONVERGENCE_FILE), "axis_value,seed,step,frechet", &rows)?;
                }
            }
        }
        out.push(cell);
    }
    Ok(out)
}

/// Rows of every finished cell under `root`, read from the cells' own files.
pub fn aggregate(root: &Path) -> Result<Vec<CellResult>> {
    let cells = root.join("cells");
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&cells) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => return Ok(out),
    };
    dirs.sort();
    for d in dirs {
        let p = d.join(RESULT_FILE);
        if let Ok(text) = std::fs::read_to_string(&p) {
            out.push(serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", p.display())))?);
        }
    }
    Ok(out)
}

/// Per-cell convergence rows of a finished latent-gen cell.
pub fn read_convergence(dir: &Path) -> Result<Vec<(u64, f64)>> {
    let (cols, rows) = read_rows(&dir.join(CONVERGENCE_FILE))?;
    if cols != CONVERGENCE_HEADER.split(',').collect::<Vec<_>>() {
        return Err(Error::Corrupt(format!("{}: unexpected columns", dir.display())));
    }
    rows.iter()
        .map(|r| {
            let s = r[2].parse().map_err(|_| Error::Corrupt(format!("bad step `{}`", r[2])))?;
            let f = r[3].parse().map_err(|_| Error::Corrupt(format!("bad value `{}`", r[3])))?;
            Ok((s, f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_round_trip_names() {
        for a in SweepAxis::ALL {
            assert_eq!(SweepAxis::parse(a.name()), Some(a));
        }
        assert_eq!(SweepAxis::parse("latent"), None);
    }

    #[test]
    fn apply_sets_axis_and_seed() {
        let base = RunConfig::parse("model = dgae\n", &[]).unwrap();
        let c = SweepAxis::LatentSize.apply(&base, "2", 7).unwrap();
        assert_eq!(c.encoder.latent_channels, 2);
        assert_eq!(c.decoder.cond_channels, 2);
        assert_eq!(c.seeds.global, 7);
        let c = SweepAxis::SpatialF.apply(&base, "f16c16", 1).unwrap();
        assert_eq!((c.encoder.downsample, c.encoder.latent_channels), (16, 16));
        assert_eq!(c.encoder.channel_multipliers.len(), 5);
        let c = SweepAxis::DecoderScale.apply(&base, "L", 1).unwrap();
        assert_eq!(c.decoder.base_channels, 48);
        assert!(SweepAxis::DiscriminatorScale.apply(&base, "M", 1).is_err());
        assert!(SweepAxis::DecoderScale.apply(&base, "XL", 1).is_err());
        let b = RunConfig::parse("model = baseline\n", &[]).unwrap();
        let c = SweepAxis::DiscriminatorScale.apply(&b, "L", 1).unwrap();
        assert_eq!(c.disc.scale.name(), "L");
    }
}
