//! Experiment configuration: a TOML file with strict key validation,
//! documented defaults, and deterministic re-serialization.
//!
//! Every section is optional; a minimal config may set only
//! `master_seed`. Unknown keys are hard errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use illusion_core::attack::{AttackConfig, DmGradientMode};
use illusion_core::encoder::MlpHyperParams;
use illusion_core::img::GridDims;
use illusion_core::reconstruct::TransformKind;
use illusion_core::synthdata::DataConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Grid,
    Baselines,
    Sweep,
    AttackCost,
    Transfer,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Grid => "grid",
            ExperimentKind::Baselines => "baselines",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::AttackCost => "attack-cost",
            ExperimentKind::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub pixel_noise_std: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub prototype_smoothing_std: f64,
    /// Prototype pixel band. The attack budget fixed by the protocol
    /// (epsilon 0.1) reaches the success threshold only when class
    /// structure sits at a comparable scale, hence the narrow default.
    pub prototype_low: f64,
    pub prototype_high: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_classes: 20,
            height: 16,
            width: 16,
            embed_dim: 64,
            pixel_noise_std: 0.05,
            train_per_class: 50,
            eval_per_class: 5,
            prototype_smoothing_std: 2.0,
            prototype_low: 0.3,
            prototype_high: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// Encoder the experiments attack and defend. The other kind is
    /// fitted too and serves as the transfer counterpart.
    pub kind: EncoderKind,
    /// Ridge is `ridge_scale * trace(P P^T) / n`.
    pub ridge_scale: f64,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_scale: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            ridge_scale: 1e-6,
            hidden_dim: 128,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 64,
            init_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaSection {
    pub rank: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self { rank: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SanitizerSection {
    /// Fixed latent noise std; omit to calibrate over `sigma_grid`.
    pub sigma: Option<f64>,
    pub sigma_grid: Vec<f64>,
    /// Eval samples, iteration budget, and single-draw trials used by the
    /// seeded calibration routine.
    pub calibration_samples: usize,
    pub calibration_budget: usize,
    pub calibration_trials: usize,
}

impl Default for SanitizerSection {
    fn default() -> Self {
        Self {
            sigma: None,
            sigma_grid: vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.4],
            calibration_samples: 16,
            calibration_budget: 400,
            calibration_trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmSection {
    pub noise_level: f64,
    pub reverse_steps: usize,
}

impl Default for DmSection {
    fn default() -> Self {
        Self {
            noise_level: 0.3,
            reverse_steps: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub eot_samples: usize,
    pub cos_threshold: f64,
    pub loop_budget: usize,
    /// "straight-through" (default) or "exact-jacobian".
    pub dm_gradient_mode: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.01,
            max_iters: 3000,
            eot_samples: 8,
            cos_threshold: 0.8,
            loop_budget: 3000,
            dm_gradient_mode: "straight-through".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusSection {
    pub num_draws: usize,
    /// Dump per-draw vote records (votes.csv) for audit.
    pub dump_votes: bool,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            num_draws: 10,
            dump_votes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub methods: Vec<String>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            methods: vec![
                "none".into(),
                "ae".into(),
                "dm".into(),
                "vae".into(),
                "dm_sampling".into(),
                "vae_sampling".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesSection {
    pub methods: Vec<String>,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self {
            methods: vec![
                "none".into(),
                "dct_quantize".into(),
                "gaussian_blur".into(),
                "translate".into(),
                "hflip".into(),
                "jitter".into(),
                "vae_sampling".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformsSection {
    pub dct_levels: u32,
    pub dct_keep_fraction: f64,
    pub blur_sigma: f64,
    pub translate_max_shift: usize,
    pub jitter_contrast: [f64; 2],
    pub jitter_brightness: [f64; 2],
}

impl Default for TransformsSection {
    fn default() -> Self {
        Self {
            dct_levels: 64,
            dct_keep_fraction: 0.25,
            blur_sigma: 1.0,
            translate_max_shift: 2,
            jitter_contrast: [0.8, 1.2],
            jitter_brightness: [-0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub num_draws_values: Vec<usize>,
    pub sanitizers: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            num_draws_values: (1..=20).collect(),
            sanitizers: vec!["vae".into(), "dm".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for batch work; 0 keeps the library default.
    pub threads: usize,
    pub experiment: ExperimentKind,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub pca: PcaSection,
    pub sanitizer: SanitizerSection,
    pub dm: DmSection,
    pub attack: AttackSection,
    pub consensus: ConsensusSection,
    pub grid: GridSection,
    pub baselines: BaselinesSection,
    pub transforms: TransformsSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 30,
            out_dir: PathBuf::from("runs/latest"),
            threads: 0,
            experiment: ExperimentKind::Grid,
            data: DataSection::default(),
            encoder: EncoderSection::default(),
            pca: PcaSection::default(),
            sanitizer: SanitizerSection::default(),
            dm: DmSection::default(),
            attack: AttackSection::default(),
            consensus: ConsensusSection::default(),
            grid: GridSection::default(),
            baselines: BaselinesSection::default(),
            transforms: TransformsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Known method names for grid/baseline rosters.
pub const KNOWN_METHODS: &[&str] = &[
    "none",
    "ae",
    "vae",
    "dm",
    "vae_sampling",
    "dm_sampling",
    "dct_quantize",
    "gaussian_blur",
    "translate",
    "hflip",
    "jitter",
];

impl ExperimentConfig {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            num_classes: self.data.num_classes,
            height: self.data.height,
            width: self.data.width,
            embed_dim: self.data.embed_dim,
            pixel_noise_std: self.data.pixel_noise_std,
            train_per_class: self.data.train_per_class,
            eval_per_class: self.data.eval_per_class,
            prototype_smoothing_std: self.data.prototype_smoothing_std,
            prototype_low: self.data.prototype_low,
            prototype_high: self.data.prototype_high,
            master_seed: self.master_seed,
        }
    }

    pub fn mlp_params(&self) -> MlpHyperParams {
        MlpHyperParams {
            hidden_dim: self.encoder.hidden_dim,
            learning_rate: self.encoder.learning_rate,
            epochs: self.encoder.epochs,
            batch_size: self.encoder.batch_size,
            init_scale: self.encoder.init_scale,
            seed: self.master_seed,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            linf_budget: self.attack.epsilon,
            step_size: self.attack.step_size,
            max_iters: self.attack.max_iters,
            eot_samples: self.attack.eot_samples,
            dm_gradient_mode: if self.attack.dm_gradient_mode == "exact-jacobian" {
                DmGradientMode::ExactJacobian
            } else {
                DmGradientMode::StraightThrough
            },
            cos_threshold: self.attack.cos_threshold,
            loop_budget: self.attack.loop_budget,
            seed: self.master_seed,
        }
    }

    pub fn grid_dims(&self) -> GridDims {
        GridDims::new(self.data.height, self.data.width)
    }

    pub fn transform_kind(&self, name: &str) -> Option<TransformKind> {
        match name {
            "dct_quantize" => Some(TransformKind::DctQuantize {
                levels: self.transforms.dct_levels,
                keep_fraction: self.transforms.dct_keep_fraction,
            }),
            "gaussian_blur" => Some(TransformKind::GaussianBlur {
                sigma: self.transforms.blur_sigma,
            }),
            "translate" => Some(TransformKind::Translate {
                max_shift: self.transforms.translate_max_shift,
            }),
            "hflip" => Some(TransformKind::HFlip),
            "jitter" => Some(TransformKind::Jitter {
                contrast: (self.transforms.jitter_contrast[0], self.transforms.jitter_contrast[1]),
                brightness: (
                    self.transforms.jitter_brightness[0],
                    self.transforms.jitter_brightness[1],
                ),
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("data section: {e}"))?;
        self.attack_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("attack section: {e}"))?;
        if self.consensus.num_draws == 0 {
            bail!("consensus.num_draws must be >= 1");
        }
        if self.pca.rank == 0
            || self.pca.rank > self.data.height * self.data.width
        {
            bail!(
                "pca.rank must lie in [1, {}], got {}",
                self.data.height * self.data.width,
                self.pca.rank
            );
        }
        if self.encoder.hidden_dim == 0 || self.encoder.batch_size == 0 {
            bail!("encoder.hidden_dim and encoder.batch_size must be >= 1");
        }
        if let Some(s) = self.sanitizer.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("sanitizer.sigma must be finite and >= 0, got {s}");
            }
        } else {
            if self.sanitizer.sigma_grid.is_empty() {
                bail!("sanitizer.sigma_grid must be non-empty when sigma is omitted");
            }
            if self.sanitizer.calibration_samples == 0
                || self.sanitizer.calibration_budget == 0
                || self.sanitizer.calibration_trials == 0
            {
                bail!("sanitizer calibration parameters must be >= 1");
            }
        }
        if !(self.dm.noise_level > 0.0 && self.dm.noise_level <= 1.0) {
            bail!("dm.noise_level must lie in (0, 1], got {}", self.dm.noise_level);
        }
        if self.dm.reverse_steps == 0 {
            bail!("dm.reverse_steps must be >= 1");
        }
        match self.attack.dm_gradient_mode.as_str() {
            "straight-through" | "exact-jacobian" => {}
            other => bail!(
                "attack.dm_gradient_mode must be \"straight-through\" or \"exact-jacobian\", got \"{other}\""
            ),
        }
        for m in self.grid.methods.iter().chain(&self.baselines.methods) {
            if !KNOWN_METHODS.contains(&m.as_str()) {
                bail!("unknown method \"{m}\"; known: {KNOWN_METHODS:?}");
            }
        }
        if self.grid.methods.is_empty() || self.baselines.methods.is_empty() {
            bail!("method rosters must be non-empty");
        }
        if self.sweep.num_draws_values.is_empty() {
            bail!("sweep.num_draws_values must be non-empty");
        }
        if self.sweep.num_draws_values.contains(&0) {
            bail!("sweep.num_draws_values entries must be >= 1");
        }
        for s in &self.sweep.sanitizers {
            if s != "vae" && s != "dm" {
                bail!("sweep.sanitizers entries must be \"vae\" or \"dm\", got \"{s}\"");
            }
        }
        if self.transforms.dct_keep_fraction <= 0.0 || self.transforms.dct_keep_fraction > 1.0 {
            bail!(
                "transforms.dct_keep_fraction must lie in (0, 1], got {}",
                self.transforms.dct_keep_fraction
            );
        }
        Ok(())
    }

    /// Canonical re-serialization of the effective (defaults-filled)
    /// config.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing effective config")
    }

    /// The config with execution placement (output directory, thread
    /// count) reset to defaults; results do not depend on those fields,
    /// so the hash and the emitted echo must not either.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.out_dir = Self::default().out_dir;
        c.threads = 0;
        c
    }

    /// Canonical serialization used for the config echo and the hash.
    pub fn canonical_toml(&self) -> Result<String> {
        self.canonical().effective_toml()
    }

    /// Hex SHA-256 of the canonical config.
    pub fn hash(&self) -> Result<String> {
        let text = self.canonical_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Short hash for report rows.
    pub fn short_hash(&self) -> Result<String> {
        Ok(self.hash()?[..16].to_string())
    }
}

/// Parse and validate a config file; unknown keys are hard errors.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Parse and validate config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}
