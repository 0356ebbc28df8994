//! Experiment configuration.
//!
//! One TOML file describes an experiment. Every key is optional; command-line
//! flags take precedence over the file, which takes precedence over the
//! built-in defaults. Relative paths are resolved against the working
//! directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use splitcomp_core::bottleneck::{SplitConfig, SplitPoint};
use splitcomp_core::distill::{DataSource, Dataset, LossKind, LrDecay, OptimizerKind, ScheduleOptions, StageSpec};
use splitcomp_core::model::ArchId;
use splitcomp_core::sim::{ChannelModel, ProfileTable, Strategy, SweepModel, RESPONSE_FRAME_BYTES};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub recipe: Option<String>,
    pub codec: Option<String>,
    pub teacher: TeacherConfig,
    pub data: DataConfig,
    pub split: SplitSection,
    pub schedule: ScheduleOptions,
    pub teacher_training: TeacherTraining,
    pub runtime: RuntimeConfig,
    pub simulate: SimulateConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: ArchId,
    /// Teacher checkpoint directory: read by `inject`, `train` and `eval`, written by `train --recipe pretrain_teacher`.
    pub checkpoint: Option<PathBuf>,
    pub width: Option<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { arch: ArchId::SmallResnet, checkpoint: None, width: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Held-out source; when absent the last `val_samples` samples of `source` are used.
    pub val_source: Option<DataSource>,
    pub val_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic { samples: 5000, side: 32, seed: 7 }, val_source: None, val_samples: 1000 }
    }
}

impl DataConfig {
    fn check(source: &DataSource) -> CliResult<()> {
        match source {
            DataSource::Cifar10 { path } if !path.exists() => {
                Err(CliError::Config(format!("dataset path {} does not exist", path.display())))
            }
            _ => Ok(()),
        }
    }

    /// Training and validation sets.
    pub fn load(&self) -> CliResult<(Dataset, Dataset)> {
        Self::check(&self.source)?;
        let data = self.source.load()?;
        match &self.val_source {
            Some(v) => {
                Self::check(v)?;
                Ok((data, v.load()?))
            }
            None => {
                if self.val_samples == 0 || self.val_samples >= data.len() {
                    return Err(CliError::Config(format!(
                        "val_samples must be in 1..{} for a dataset of {} samples",
                        data.len(),
                        data.len()
                    )));
                }
                Ok(data.split_at(data.len() - self.val_samples))
            }
        }
    }

    pub fn load_val(&self) -> CliResult<Dataset> {
        Ok(self.load()?.1)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub split_point: SplitPoint,
    pub bottleneck_channels: usize,
    pub l_ed: Option<usize>,
    pub k_star: Option<usize>,
    pub spatial_factor: Option<usize>,
    pub pooling: Option<bool>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { split_point: SplitPoint::Sp1, bottleneck_channels: 3, l_ed: None, k_star: None, spatial_factor: None, pooling: None }
    }
}

impl SplitSection {
    pub fn resolve(&self) -> SplitConfig {
        let mut c = SplitConfig::for_point(self.split_point, self.bottleneck_channels);
        c.l_ed = self.l_ed.unwrap_or(c.l_ed);
        c.k_star = self.k_star.unwrap_or(c.k_star);
        c.spatial_factor = self.spatial_factor.unwrap_or(c.spatial_factor);
        c.pooling = self.pooling.unwrap_or(c.pooling);
        c
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self { epochs: 15, lr: 2e-3, decay_factor: 0.1, decay_every: 10, batch_size: 64 }
    }
}

impl TeacherTraining {
    pub fn stage(&self) -> StageSpec {
        StageSpec {
            loss: LossKind::Ce,
            optimizer: OptimizerKind::Adam,
            epochs: self.epochs,
            initial_lr: self.lr,
            lr_decay: LrDecay { factor: self.decay_factor, every_epochs: self.decay_every.max(1) },
            frozen: Default::default(),
            kd_alpha: 0.5,
            kd_tau: 1.0,
            lambdas: Default::default(),
            batch_size: self.batch_size,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub endpoint: Option<String>,
    pub images: Option<usize>,
    pub report: Option<PathBuf>,
    pub timeout_s: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub rtt_s: f64,
}

/// Log-spaced fixed-rate channels from `from_bps` to `to_bps`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSweep {
    pub from_bps: f64,
    pub to_bps: f64,
    pub points: usize,
    #[serde(default)]
    pub rtt_s: f64,
}

impl RateSweep {
    pub fn channels(&self) -> CliResult<Vec<ChannelModel>> {
        if self.points < 2 || !(self.from_bps > 0.0 && self.to_bps > self.from_bps) {
            return Err(CliError::Config("rate_sweep needs 0 < from_bps < to_bps and at least 2 points".into()));
        }
        let (lo, hi) = (self.from_bps.ln(), self.to_bps.ln());
        (0..self.points)
            .map(|i| {
                let rate = (lo + (hi - lo) * i as f64 / (self.points - 1) as f64).exp();
                Ok(ChannelModel::fixed(rate, self.rtt_s)?.named(format!("{rate:.0} bps")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub channels: Vec<ChannelModel>,
    pub traces: Vec<TraceFile>,
    pub rate_sweep: Option<RateSweep>,
    /// Profiles by strategy (`local`, `edge`, `split`) or `"{model}:{strategy}"`.
    pub profiles: ProfileTable,
    /// TOML file with the same layout as `profiles`; inline entries win.
    pub profiles_file: Option<PathBuf>,
    pub models: Vec<SweepModel>,
    /// Trained run directories to take models from (bottleneck payload and accuracy).
    pub runs: Vec<PathBuf>,
    /// Bytes uploaded by edge offloading for run-derived models; raw 8-bit pixels when absent.
    pub jpeg_bytes: Option<u64>,
    pub strategies: Vec<Strategy>,
    pub response_bytes: u64,
    pub t0: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            channels: Vec::new(),
            traces: Vec::new(),
            rate_sweep: None,
            profiles: ProfileTable::new(),
            profiles_file: None,
            models: Vec::new(),
            runs: Vec::new(),
            jpeg_bytes: None,
            strategies: Strategy::ALL.to_vec(),
            response_bytes: RESPONSE_FRAME_BYTES,
            t0: 0.0,
        }
    }
}

impl SimulateConfig {
    pub fn all_channels(&self) -> CliResult<Vec<ChannelModel>> {
        let mut out = Vec::new();
        for ch in &self.channels {
            ch.validate()?;
            out.push(ch.clone());
        }
        for t in &self.traces {
            if !t.path.exists() {
                return Err(CliError::Config(format!("trace file {} does not exist", t.path.display())));
            }
            out.push(ChannelModel::from_trace_csv(&t.path, t.rtt_s)?.named(t.name.clone()));
        }
        if let Some(s) = &self.rate_sweep {
            out.extend(s.channels()?);
        }
        if out.is_empty() {
            return Err(CliError::Config("no channels configured (simulate.channels, traces or rate_sweep)".into()));
        }
        Ok(out)
    }

    pub fn all_profiles(&self) -> CliResult<ProfileTable> {
        let mut table = ProfileTable::new();
        if let Some(path) = &self.profiles_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("profile file {}: {e}", path.display())))?;
            let file: ProfileTable =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("profile file {}: {e}", path.display())))?;
            table.extend(file);
        }
        table.extend(self.profiles.clone());
        for (name, p) in &table {
            p.validate().map_err(|e| CliError::Config(format!("profile `{name}`: {e}")))?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub runs: Vec<PathBuf>,
    /// A `sweep.csv` written by `simulate`, plotted as delay against rate.
    pub sweep: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
