//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdpo::{ControllerConfig, PlateauDetector};
use crate::dataset::SamplerParams;
use crate::dpo::DpoConfig;
use crate::foundry::BalanceConfig;
use crate::world::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Batch size, learning rate and epoch count for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePreset {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: u32,
    /// Min and max image resolution in pixels. Recorded only; nothing in this
    /// crate processes images.
    #[serde(default = "default_resolution")]
    pub resolution: [u64; 2],
}

fn default_resolution() -> [u64; 2] {
    [3136, 12_845_056]
}

impl StagePreset {
    fn new(batch_size: usize, learning_rate: f64, epochs: u32) -> Self {
        StagePreset { batch_size, learning_rate, epochs, resolution: default_resolution() }
    }

    fn validate(&self, name: &str) -> Result<(), ConfigError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid(format!("presets.{name}: batch_size and epochs must be >= 1")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ConfigError::Invalid(format!("presets.{name}: learning_rate must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePresets {
    pub sft: StagePreset,
    pub dpo: StagePreset,
    pub cdpo: StagePreset,
}

impl Default for StagePresets {
    fn default() -> Self {
        StagePresets {
            sft: StagePreset::new(128, 1e-5, 10),
            dpo: StagePreset::new(64, 5e-6, 1),
            cdpo: StagePreset::new(64, 5e-6, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub window: usize,
    /// Use `inf` to disable plateau detection.
    pub delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { window: 3, delta: 0.01 }
    }
}

/// An OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, never the key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_ceiling")]
    pub backoff_ceiling_ms: u64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    4
}
fn default_in_flight() -> usize {
    8
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_ceiling() -> u64 {
    30_000
}

impl ChatEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ChatEndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            backoff_base_ms: default_backoff_base(),
            backoff_ceiling_ms: default_backoff_ceiling(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(ConfigError::Invalid("endpoint needs base_url and model".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(ConfigError::Invalid("endpoint timeout_secs must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("endpoint max_in_flight must be >= 1".into()));
        }
        if self.backoff_ceiling_ms < self.backoff_base_ms {
            return Err(ConfigError::Invalid("endpoint backoff_ceiling_ms is below backoff_base_ms".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    ToyPolicy,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEndpoint {
    pub kind: GeneratorKind,
    /// Policy checkpoint, for `toy_policy`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Connection settings, for `http_chat`.
    #[serde(default)]
    pub endpoint: Option<ChatEndpointConfig>,
}

impl Default for GeneratorEndpoint {
    fn default() -> Self {
        GeneratorEndpoint { kind: GeneratorKind::ToyPolicy, checkpoint: None, endpoint: None }
    }
}

impl GeneratorEndpoint {
    /// Checks the fields the kind needs. A toy checkpoint may also come from
    /// the command line, so it is only required when `need_checkpoint`.
    pub fn validate(&self, need_checkpoint: bool) -> Result<(), ConfigError> {
        match self.kind {
            GeneratorKind::ToyPolicy if need_checkpoint && self.checkpoint.is_none() => {
                Err(ConfigError::Invalid("generator kind toy_policy needs a checkpoint".into()))
            }
            GeneratorKind::ToyPolicy => Ok(()),
            GeneratorKind::HttpChat => self
                .endpoint
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("generator kind http_chat needs [generator.endpoint]".into()))?
                .validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Oracle,
    Mock,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    /// Canned verdicts for the mock judge.
    #[serde(default)]
    pub mock_file: Option<PathBuf>,
    /// Hallucination rate the mock judge assigns to details it has no canned
    /// verdict for.
    #[serde(default = "default_fallback_rate")]
    pub fallback_halluc_rate: f64,
    #[serde(default)]
    pub endpoint: Option<ChatEndpointConfig>,
    #[serde(default = "default_judge_prompt")]
    pub prompt: PathBuf,
    /// Penalty per hallucinated detail when the judge acts as a critic.
    #[serde(default = "default_lambda")]
    pub lambda_halluc: f64,
}

fn default_fallback_rate() -> f64 {
    0.1
}
fn default_judge_prompt() -> PathBuf {
    PathBuf::from("prompts/judge/v1.txt")
}
fn default_lambda() -> f64 {
    1.0
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            kind: JudgeKind::Oracle,
            mock_file: None,
            fallback_halluc_rate: default_fallback_rate(),
            endpoint: None,
            prompt: default_judge_prompt(),
            lambda_halluc: default_lambda(),
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.fallback_halluc_rate) {
            return Err(ConfigError::Invalid("judge.fallback_halluc_rate must be in [0, 1]".into()));
        }
        if !(self.lambda_halluc.is_finite() && self.lambda_halluc >= 0.0) {
            return Err(ConfigError::Invalid("judge.lambda_halluc must be finite and >= 0".into()));
        }
        if self.kind == JudgeKind::HttpChat {
            self.endpoint
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("judge kind http_chat needs [judge.endpoint]".into()))?
                .validate()?;
        }
        Ok(())
    }
}

/// Hyperparameters of the synthetic-world run. The stage presets are sized
/// for large models; the toy policy uses these instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub world: WorldConfig,
    /// Base-model samples screened by the oracle review to form the SFT set.
    pub sft_records: usize,
    pub sft_batch_size: usize,
    pub sft_learning_rate: f64,
    pub sft_epochs: u32,
    /// Prompts sampled for each round's preference set.
    pub records_per_round: usize,
    pub dpo: DpoConfig,
    pub first_round_max_epochs: u32,
    pub round_max_epochs: u32,
    /// Total rounds including the plain DPO round.
    pub max_rounds: u32,
    /// Keep earlier rounds' pairs alongside the resampled ones.
    pub reuse_previous_pairs: bool,
    /// Held-out captions sampled per scene at each evaluation.
    pub eval_samples_per_scene: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            world: WorldConfig::default(),
            sft_records: 2000,
            sft_batch_size: 128,
            sft_learning_rate: 1.0,
            sft_epochs: 3,
            records_per_round: 2000,
            dpo: DpoConfig { beta: 0.1, learning_rate: 1.0, batch_size: 64 },
            first_round_max_epochs: 60,
            round_max_epochs: 10,
            max_rounds: 2,
            reuse_previous_pairs: false,
            eval_samples_per_scene: 500,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dpo.validate().map_err(|e| ConfigError::Invalid(format!("toy.dpo: {e}")))?;
        if self.sft_records == 0 || self.records_per_round == 0 || self.eval_samples_per_scene == 0 {
            return Err(ConfigError::Invalid("toy record and sample counts must be >= 1".into()));
        }
        if self.sft_batch_size == 0 || self.first_round_max_epochs == 0 || self.round_max_epochs == 0 {
            return Err(ConfigError::Invalid("toy batch sizes and epoch caps must be >= 1".into()));
        }
        if !(self.sft_learning_rate.is_finite() && self.sft_learning_rate >= 0.0) {
            return Err(ConfigError::Invalid("toy.sft_learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub presets: StagePresets,
    pub sampler: SamplerParams,
    pub balance: BalanceConfig,
    pub plateau: PlateauConfig,
    pub generator: GeneratorEndpoint,
    pub judge: JudgeConfig,
    pub toy: ToyConfig,
}

impl PipelineConfig {
    /// Parses TOML; every section is optional and falls back to defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let partial: PartialPipelineConfig = toml::from_str(text)?;
        let cfg = partial.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.presets.sft.validate("sft")?;
        self.presets.dpo.validate("dpo")?;
        self.presets.cdpo.validate("cdpo")?;
        self.sampler.validate().map_err(|e| ConfigError::Invalid(format!("sampler: {e}")))?;
        self.balance.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        PlateauDetector::new(self.plateau.window, self.plateau.delta)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator.validate(false)?;
        self.judge.validate()?;
        self.toy.validate()
    }

    /// Canonical serialized form, hashed into dataset manifests.
    pub fn hash(&self) -> String {
        crate::dataset::config_hash(&self.to_toml())
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            dpo: self.toy.dpo.clone(),
            plateau_window: self.plateau.window,
            plateau_delta: self.plateau.delta,
            first_round_max_epochs: self.toy.first_round_max_epochs,
            round_max_epochs: self.toy.round_max_epochs,
            max_rounds: self.toy.max_rounds,
            seed: self.seed,
        }
    }
}

// Top-level sections may be omitted; keys inside a given section are merged
// over that section's defaults through a JSON value round-trip.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialPipelineConfig {
    seed: Option<u64>,
    presets: Option<toml::Table>,
    sampler: Option<toml::Table>,
    balance: Option<toml::Table>,
    plateau: Option<toml::Table>,
    generator: Option<toml::Table>,
    judge: Option<toml::Table>,
    toy: Option<toml::Table>,
}

fn merge<T: Serialize + serde::de::DeserializeOwned>(
    defaults: T,
    overrides: Option<toml::Table>,
    section: &str,
) -> Result<T, ConfigError> {
    let Some(overrides) = overrides else {
        return Ok(defaults);
    };
    let mut base = toml::Table::try_from(&defaults).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    merge_tables(&mut base, overrides);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("[{section}]: {e}")))
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl PartialPipelineConfig {
    fn resolve(self) -> Result<PipelineConfig, ConfigError> {
        let d = PipelineConfig::default();
        Ok(PipelineConfig {
            seed: self.seed.unwrap_or(d.seed),
            presets: merge(d.presets, self.presets, "presets")?,
            sampler: merge(d.sampler, self.sampler, "sampler")?,
            balance: merge(d.balance, self.balance, "balance")?,
            plateau: merge(d.plateau, self.plateau, "plateau")?,
            generator: merge(d.generator, self.generator, "generator")?,
            judge: merge(d.judge, self.judge, "judge")?,
            toy: merge(d.toy, self.toy, "toy")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let p = &cfg.presets;
        assert_eq!((p.sft.batch_size, p.sft.learning_rate, p.sft.epochs), (128, 1e-5, 10));
        assert_eq!((p.dpo.batch_size, p.dpo.learning_rate, p.dpo.epochs), (64, 5e-6, 1));
        assert_eq!((p.cdpo.batch_size, p.cdpo.learning_rate, p.cdpo.epochs), (64, 5e-6, 1));
        assert_eq!(p.sft.resolution, [3136, 12_845_056]);
        assert_eq!((cfg.sampler.top_p, cfg.sampler.top_k, cfg.sampler.temperature), (1.0, 20, 1.0));
        assert_eq!(cfg.sampler.k_samples, 8);
        assert_eq!(cfg.balance.epsilon, 0.5);
        assert_eq!(cfg.toy.max_rounds, 2);
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let cfg = PipelineConfig::from_toml(
            "seed = 9\n[sampler]\ntop_k = 5\n[toy.world]\nnum_contexts = 4\n[plateau]\ndelta = inf\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sampler.top_k, 5);
        assert_eq!(cfg.sampler.top_p, 1.0);
        assert_eq!(cfg.toy.world.num_contexts, 4);
        assert_eq!(cfg.toy.world.vocab_size, 64);
        assert!(cfg.plateau.delta.is_infinite());
        assert!(cfg.controller().plateau_delta.is_infinite());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[sampler]\ntopk = 3", "[toy.world]\ncolour = 1", "[presets.sft]\nwarmup = 1"] {
            assert!(PipelineConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[balance]\nepsilon = 0.0",
            "[sampler]\ntop_p = 0.0",
            "[plateau]\nwindow = 0",
            "[generator]\nkind = \"http_chat\"",
            "[judge]\nkind = \"http_chat\"",
            "[presets.dpo]\nbatch_size = 0",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn endpoint_config_round_trips() {
        let cfg = PipelineConfig::from_toml(
            "[judge]\nkind = \"http_chat\"\n[judge.endpoint]\nbase_url = \"http://127.0.0.1:9\"\nmodel = \"m\"\napi_key_env = \"RECAP_KEY\"\n",
        )
        .unwrap();
        let ep = cfg.judge.endpoint.as_ref().unwrap();
        assert_eq!(ep.api_key_env.as_deref(), Some("RECAP_KEY"));
        assert_eq!(ep.max_retries, 4);
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
