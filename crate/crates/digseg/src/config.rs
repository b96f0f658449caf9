//! Layered run configuration: defaults < config file < dotted-path
//! overrides < dedicated CLI flags. Unknown keys are rejected, and the
//! resolved document is hashed and persisted into checkpoints and output
//! manifests.

use serde::{Deserialize, Serialize};

use crate::codec::CodecTrainConfig;
use crate::conditioning::ProposalConfig;
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::noise::{NoiseMode, NoisePyramidConfig};
use crate::pipeline::AggregationConfig;
use crate::schedule::Spacing;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Number of scenes to generate.
    pub n: usize,
    /// Training-set fraction used by `train` (data-ratio ablations).
    pub fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n: 2000, fraction: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { t: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub levels: usize,
    pub decay: f64,
    pub mode: NoiseMode,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoisePyramidConfig::default();
        Self { levels: d.levels, decay: d.decay, mode: d.mode }
    }
}

impl NoiseSection {
    pub fn to_pyramid(&self) -> NoisePyramidConfig {
        NoisePyramidConfig { levels: self.levels, decay: self.decay, mode: self.mode }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    /// "identity" or "toy_autoencoder".
    pub mode: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let d = CodecTrainConfig::default();
        Self {
            mode: "toy_autoencoder".into(),
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
        }
    }
}

impl CodecSection {
    pub fn train_config(&self, seed: u64) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub log_every: usize,
}

impl Default for DenoiserTrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            augment: d.augment,
            log_every: d.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub depth: usize,
    pub d_text: usize,
    pub t_embed_dim: usize,
    pub attn_scales: Vec<usize>,
    pub train: DenoiserTrainSection,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            base_width: d.base_width,
            depth: d.depth,
            d_text: d.d_text,
            t_embed_dim: d.t_embed_dim,
            attn_scales: d.attn_scales,
            train: DenoiserTrainSection::default(),
        }
    }
}

impl DenoiserSection {
    pub fn model_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_width: self.base_width,
            depth: self.depth,
            d_text: self.d_text,
            t_embed_dim: self.t_embed_dim,
            attn_scales: self.attn_scales.clone(),
        }
    }

    pub fn train_config(&self, seed: u64, noise: NoisePyramidConfig) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            seed,
            noise,
            augment: self.train.augment,
            log_every: self.train.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: String,
    pub steps: usize,
    pub spacing: Spacing,
    pub eta: f64,
    pub ensemble: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { kind: "ddim".into(), steps: 2, spacing: Spacing::Trailing, eta: 0.0, ensemble: 8 }
    }
}

impl SamplerSection {
    pub fn to_config(
        &self,
        schedule: &crate::schedule::NoiseSchedule,
        seed: u64,
    ) -> Result<crate::sampler::SamplerConfig> {
        let kind: crate::sampler::SamplerKind = self.kind.parse()?;
        let steps = if kind == crate::sampler::SamplerKind::Ddpm {
            schedule.t_max()
        } else {
            self.steps
        };
        let plan = crate::schedule::plan_timesteps(schedule, steps, self.spacing)?;
        Ok(crate::sampler::SamplerConfig {
            kind,
            eta: self.eta,
            plan,
            ensemble: self.ensemble,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub tau: f64,
    pub tau_bg: f64,
    pub binarize_before_aggregate: bool,
    pub tau_sim: f64,
    pub tau_patch: f64,
    pub patch_grid: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let a = AggregationConfig::default();
        let p = ProposalConfig::default();
        Self {
            tau: a.tau,
            tau_bg: a.tau_bg,
            binarize_before_aggregate: a.binarize_before_aggregate,
            tau_sim: p.tau_sim,
            tau_patch: p.tau_patch,
            patch_grid: p.patch_grid,
        }
    }
}

impl PipelineSection {
    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig {
            tau: self.tau,
            tau_bg: self.tau_bg,
            binarize_before_aggregate: self.binarize_before_aggregate,
        }
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            tau_sim: self.tau_sim,
            tau_patch: self.tau_patch,
            patch_grid: self.patch_grid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Cap on validation images per evaluation; 0 means the full split.
    pub val_limit: usize,
    /// Throughput measurement warmup inferences.
    pub fps_warmup: usize,
    /// Throughput measurement sample count.
    pub fps_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { val_limit: 0, fps_warmup: 5, fps_samples: 50 }
    }
}

/// The resolved run configuration; every tunable default lives here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub noise: NoiseSection,
    pub codec: CodecSection,
    pub denoiser: DenoiserSection,
    pub sampler: SamplerSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Apply `key.path=value` overrides on the TOML representation, then
    /// re-deserialize (so unknown keys are still rejected).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()?).map_err(|e| Error::Serde(e.to_string()))?;
        for item in overrides {
            let (path, raw_value) = item
                .split_once('=')
                .ok_or_else(|| Error::parameter(format!("override `{item}` is not key=value")))?;
            let value: toml::Value = raw_value.parse().unwrap_or_else(|_| {
                // Bare strings are accepted without quoting.
                toml::Value::String(raw_value.to_string())
            });
            let mut cursor = &mut table;
            let parts: Vec<&str> = path.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                cursor = cursor
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| {
                        Error::parameter(format!("override path `{path}` crosses a non-table"))
                    })?;
            }
            cursor.insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    /// Hash of the canonical JSON form; stable across runs and platforms.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = sha2::Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}
