//! Run configuration, read from TOML. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DEFAULT_LAMBDA};
use crate::encoder::EncoderConfig;
use crate::error::{AstraError, Result};
use crate::grid::ModelRegistry;
use crate::synth::{CohortPlan, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CohortKind {
    /// Malignant slides only, cycling over the first `num_cancer_types` types.
    #[default]
    Malignant,
    /// Equal counts of the four classification categories.
    Categories,
    /// Cancer types, benign lesions and normal sites interleaved.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_slides: usize,
    pub cohort: CohortKind,
    pub num_cancer_types: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_slides: 32, cohort: CohortKind::Malignant, num_cancer_types: 8, synth: SynthConfig::default() }
    }
}

impl DataConfig {
    pub fn plan(&self) -> Result<CohortPlan> {
        if self.num_slides == 0 || self.num_cancer_types == 0 {
            return Err(AstraError::Config("num_slides and num_cancer_types must be positive".into()));
        }
        Ok(match self.cohort {
            CohortKind::Malignant => {
                let mut plan = CohortPlan::malignant(self.num_cancer_types, self.num_slides.div_ceil(self.num_cancer_types));
                plan.kinds.truncate(self.num_slides);
                plan
            }
            CohortKind::Categories => {
                let mut plan = CohortPlan::categories(self.num_slides.div_ceil(4), self.num_cancer_types);
                plan.kinds.truncate(self.num_slides);
                plan
            }
            CohortKind::Mixed => CohortPlan::mixed(self.num_slides, self.num_cancer_types),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub crops_per_slide_per_epoch: usize,
    pub grad_clip: f64,
    pub lambda: f64,
    pub max_tries: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 2e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 2000,
            epochs: 500,
            steps: None,
            batch_size: 16,
            crops_per_slide_per_epoch: 20,
            grad_clip: 1.0,
            lambda: DEFAULT_LAMBDA,
            max_tries: 10,
        }
    }
}

impl PretrainConfig {
    pub fn steps_per_epoch(&self, num_slides: usize) -> usize {
        (num_slides * self.crops_per_slide_per_epoch).div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, num_slides: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(num_slides))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub dropout: f64,
    pub grad_clip: f64,
    pub freeze_encoder: bool,
    pub text_encoder: String,
    pub text_seed: u64,
    /// Model whose embeddings feed the encoder at slide level; the anchor when unset.
    pub input_model: Option<usize>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 50,
            batch_size: 32,
            tau: 0.1,
            dropout: 0.25,
            grad_clip: 1.0,
            freeze_encoder: true,
            text_encoder: "mock".into(),
            text_seed: 0,
            input_model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 30,
            batch_size: 8,
            val_fraction: 0.1,
            test_fraction: 0.3,
            patience: 7,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub tau_loc: f64,
    pub exclusion_floor: f64,
    pub heatmaps: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig { tau_loc: 0.15, exclusion_floor: 0.20, heatmaps: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub margin_floor: f64,
    pub exemplars_per_expert: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { margin_floor: 0.2, exemplars_per_expert: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AstraConfig {
    pub precision: Precision,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub downstream: DownstreamConfig,
    pub localize: LocalizeConfig,
    pub routing: RoutingConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(AstraError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(AstraError::Config(format!("{name} must lie in [0, 1), got {v}")))
    }
}

impl AstraConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: AstraConfig = toml::from_str(s).map_err(|e| AstraError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AstraError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn registry(&self) -> ModelRegistry {
        ModelRegistry::default()
    }

    pub fn input_model(&self) -> usize {
        self.align.input_model.unwrap_or(ModelRegistry::DEFAULT_ANCHOR)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.data.plan()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        let p = &self.pretrain;
        positive("pretrain.lr", p.lr)?;
        positive("pretrain.grad_clip", p.grad_clip)?;
        fraction("pretrain.beta1", p.beta1)?;
        fraction("pretrain.beta2", p.beta2)?;
        if p.batch_size == 0 || p.crops_per_slide_per_epoch == 0 || p.max_tries == 0 {
            return Err(AstraError::Config("pretrain batch_size, crops_per_slide_per_epoch and max_tries must be positive".into()));
        }
        if p.weight_decay < 0.0 || p.lambda < 0.0 {
            return Err(AstraError::Config("pretrain weight_decay and lambda must be non-negative".into()));
        }
        let total = p.total_steps(self.data.num_slides);
        if total == 0 || p.warmup_steps > total {
            return Err(AstraError::Config(format!("pretrain warmup_steps {} exceeds total steps {total}", p.warmup_steps)));
        }
        let a = &self.align;
        positive("align.lr", a.lr)?;
        positive("align.tau", a.tau)?;
        positive("align.grad_clip", a.grad_clip)?;
        fraction("align.dropout", a.dropout)?;
        if a.batch_size < 2 || a.epochs == 0 {
            return Err(AstraError::Config("align batch_size must be >= 2 and epochs positive".into()));
        }
        if self.input_model() >= self.registry().len() {
            return Err(AstraError::Config(format!("align.input_model {} is not a registered model", self.input_model())));
        }
        crate::text::text_encoder_from_name(&a.text_encoder, a.text_seed)?;
        let d = &self.downstream;
        positive("downstream.lr", d.lr)?;
        fraction("downstream.val_fraction", d.val_fraction)?;
        fraction("downstream.test_fraction", d.test_fraction)?;
        if d.seeds.is_empty() || d.max_epochs == 0 || d.batch_size == 0 || d.patience == 0 {
            return Err(AstraError::Config("downstream seeds, max_epochs, batch_size and patience must be non-empty/positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.localize.tau_loc) {
            return Err(AstraError::Config("localize.tau_loc must lie in [-1, 1]".into()));
        }
        fraction("localize.exclusion_floor", self.localize.exclusion_floor)?;
        if self.routing.margin_floor < 0.0 || self.routing.exemplars_per_expert == 0 {
            return Err(AstraError::Config("routing margin_floor must be >= 0 and exemplars_per_expert positive".into()));
        }
        Ok(())
    }
}
