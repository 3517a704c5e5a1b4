//! Typed configuration for every module plus the flat key-value view used by
//! config files and command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MalmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub channels: usize,
    pub title_cap: usize,
    pub ingredients_cap: usize,
    pub instructions_cap: usize,
    pub synth_classes: usize,
    pub synth_noise_std: f64,
    pub synth_pairs: usize,
    pub synth_test_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            title_cap: 16,
            ingredients_cap: 64,
            instructions_cap: 128,
            synth_classes: 16,
            synth_noise_std: 0.1,
            synth_pairs: 200,
            synth_test_pairs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            depth: 2,
            heads: 2,
            hidden_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeEncoderConfig {
    pub component_depth: usize,
    pub component_heads: usize,
    pub component_hidden: usize,
    pub fusion_depth: usize,
    pub fusion_heads: usize,
    /// Learned positional embeddings inside each component encoder.
    pub positional: bool,
}

impl Default for RecipeEncoderConfig {
    fn default() -> Self {
        Self {
            component_depth: 2,
            component_heads: 4,
            component_hidden: 64,
            fusion_depth: 1,
            fusion_heads: 4,
            positional: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Also mask recipe tokens and reconstruct them.
    pub mask_recipe: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            mask_recipe: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchReduction {
    Mean,
    Sum,
}

impl FromStr for BatchReduction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            _ => Err("expected `mean` or `sum`".into()),
        }
    }
}

impl fmt::Display for BatchReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub temperature_init: f64,
    pub learnable_temperature: bool,
    pub normalize: bool,
    /// Exclude the positive pair from the denominator of Z.
    pub literal_denominator: bool,
    /// Sum the raw Z ratios instead of minimizing their negative log.
    pub literal_sum_loss: bool,
    pub include_cls_in_local: bool,
    pub reduction: BatchReduction,
    pub depth: usize,
    pub heads: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            temperature_init: 0.07,
            learnable_temperature: true,
            normalize: true,
            literal_denominator: true,
            literal_sum_loss: false,
            include_cls_in_local: true,
            reduction: BatchReduction::Mean,
            depth: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub beta: f64,
    pub ema_momentum: f64,
    pub recon_depth: usize,
    pub recon_heads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            ema_momentum: 0.999,
            recon_depth: 2,
            recon_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_itm: f64,
    pub lambda_dist: f64,
    pub triplet_margin: f64,
    pub global_loss: bool,
    pub local_loss: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_itm: 1.0,
            lambda_dist: 1.0,
            triplet_margin: 0.3,
            global_loss: true,
            local_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub freeze_image_encoder_epochs: usize,
    pub lr_main: f64,
    pub lr_image_encoder: f64,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub grad_clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 25,
            freeze_image_encoder_epochs: 0,
            lr_main: 1e-3,
            lr_image_encoder: 1e-3,
            batch_size: 16,
            max_steps: 0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bag_size: usize,
    pub n_bags: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bag_size: 100,
            n_bags: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MalmConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub data: DataConfig,
    pub image: ImageEncoderConfig,
    pub recipe: RecipeEncoderConfig,
    pub mask: MaskConfig,
    pub matching: MatchingConfig,
    pub distill: DistillConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainSchedule,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| MalmError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        impl MalmConfig {
            /// Every recognized flat key, in documentation order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.to_string()),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse::<$ty>(key, value)?,)*
                    _ => return Err(MalmError::UnknownKey(key.to_string())),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "seed" => seed: u64,
    "embed_dim" => embed_dim: usize,
    "mlp_ratio" => mlp_ratio: usize,
    "image_size" => data.image_size: usize,
    "channels" => data.channels: usize,
    "title_cap" => data.title_cap: usize,
    "ingredients_cap" => data.ingredients_cap: usize,
    "instructions_cap" => data.instructions_cap: usize,
    "synth_classes" => data.synth_classes: usize,
    "synth_noise_std" => data.synth_noise_std: f64,
    "synth_pairs" => data.synth_pairs: usize,
    "synth_test_pairs" => data.synth_test_pairs: usize,
    "patch_size" => image.patch_size: usize,
    "image_depth" => image.depth: usize,
    "image_heads" => image.heads: usize,
    "image_hidden" => image.hidden_dim: usize,
    "recipe_depth" => recipe.component_depth: usize,
    "recipe_heads" => recipe.component_heads: usize,
    "recipe_hidden" => recipe.component_hidden: usize,
    "fusion_depth" => recipe.fusion_depth: usize,
    "fusion_heads" => recipe.fusion_heads: usize,
    "recipe_positional" => recipe.positional: bool,
    "mask_ratio" => mask.ratio: f64,
    "mask_recipe" => mask.mask_recipe: bool,
    "temperature_init" => matching.temperature_init: f64,
    "learnable_temperature" => matching.learnable_temperature: bool,
    "normalize_features" => matching.normalize: bool,
    "literal_eq7_denominator" => matching.literal_denominator: bool,
    "literal_sum_loss" => matching.literal_sum_loss: bool,
    "include_cls_in_local" => matching.include_cls_in_local: bool,
    "batch_reduction" => matching.reduction: BatchReduction,
    "matching_depth" => matching.depth: usize,
    "matching_heads" => matching.heads: usize,
    "beta" => distill.beta: f64,
    "ema_momentum" => distill.ema_momentum: f64,
    "recon_depth" => distill.recon_depth: usize,
    "recon_heads" => distill.recon_heads: usize,
    "lambda_itm" => objective.lambda_itm: f64,
    "lambda_dist" => objective.lambda_dist: f64,
    "triplet_margin" => objective.triplet_margin: f64,
    "global_loss" => objective.global_loss: bool,
    "local_loss" => objective.local_loss: bool,
    "epochs" => train.epochs: usize,
    "freeze_image_encoder_epochs" => train.freeze_image_encoder_epochs: usize,
    "lr_main" => train.lr_main: f64,
    "lr_image_encoder" => train.lr_image_encoder: f64,
    "batch_size" => train.batch_size: usize,
    "max_steps" => train.max_steps: usize,
    "grad_clip" => train.grad_clip: f64,
    "eval_bag_size" => eval.bag_size: usize,
    "eval_n_bags" => eval.n_bags: usize,
}

impl MalmConfig {
    /// Small model for the synthetic benchmark: every network is one or two
    /// layers of width 64 with short recipe sequences.
    pub fn desk_synthetic() -> Self {
        let mut c = Self {
            embed_dim: 64,
            mlp_ratio: 2,
            ..Self::default()
        };
        c.data.title_cap = 6;
        c.data.ingredients_cap = 10;
        c.data.instructions_cap = 18;
        c.image.depth = 1;
        c.image.hidden_dim = 64;
        c.recipe.component_depth = 1;
        c.recipe.component_hidden = 64;
        c.recipe.component_heads = 2;
        c.recipe.fusion_heads = 2;
        c.matching.heads = 2;
        c.matching.depth = 1;
        c.matching.temperature_init = 1.0;
        c.distill.recon_depth = 1;
        c.train.epochs = 25;
        c.train.batch_size = 16;
        c.train.max_steps = 300;
        c.train.freeze_image_encoder_epochs = 4;
        c.train.lr_image_encoder = 1e-4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(MalmError::BadValue {
                key: key.into(),
                value: self.get(key).unwrap_or_default(),
                reason: reason.into(),
            })
        };
        if !self.image.hidden_dim.is_multiple_of(self.image.heads) {
            return bad("image_hidden", "must be divisible by image_heads");
        }
        if !self.recipe.component_hidden.is_multiple_of(self.recipe.component_heads)
            || !self.recipe.component_hidden.is_multiple_of(self.recipe.fusion_heads)
        {
            return bad(
                "recipe_hidden",
                "must be divisible by recipe_heads and fusion_heads",
            );
        }
        if !self.embed_dim.is_multiple_of(self.matching.heads)
            || !self.embed_dim.is_multiple_of(self.distill.recon_heads)
        {
            return bad(
                "embed_dim",
                "must be divisible by matching_heads and recon_heads",
            );
        }
        if !self.data.image_size.is_multiple_of(self.image.patch_size) {
            return bad("image_size", "must be a multiple of patch_size");
        }
        if !(0.0..1.0).contains(&self.mask.ratio) {
            return bad("mask_ratio", "must lie in [0, 1)");
        }
        if self.distill.beta <= 0.0 {
            return bad("beta", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.distill.ema_momentum) {
            return bad("ema_momentum", "must lie in [0, 1]");
        }
        if self.objective.lambda_itm < 0.0 || self.objective.lambda_dist < 0.0 {
            return bad("lambda_itm", "loss weights must be non-negative");
        }
        if self.train.batch_size < 2 {
            return bad("batch_size", "contrastive losses need at least 2 pairs");
        }
        if self.train.freeze_image_encoder_epochs > self.train.epochs {
            return bad("freeze_image_encoder_epochs", "cannot exceed epochs");
        }
        if !(0.01..=1.0).contains(&self.matching.temperature_init) {
            return bad("temperature_init", "must lie in [0.01, 1]");
        }
        if self.data.title_cap == 0
            || self.data.ingredients_cap == 0
            || self.data.instructions_cap == 0
        {
            return bad("title_cap", "sequence caps must be positive");
        }
        if self.eval.bag_size < 2 {
            return bad("eval_bag_size", "bags need at least 2 items");
        }
        Ok(())
    }

    /// Number of image patches.
    pub fn patches(&self) -> usize {
        let g = self.data.image_size / self.image.patch_size;
        g * g
    }

    /// Recipe sequence length after padding every component to its cap.
    pub fn recipe_len(&self) -> usize {
        self.data.title_cap + self.data.ingredients_cap + self.data.instructions_cap
    }
}

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::File => "file",
            Self::Flag => "flag",
        })
    }
}

/// A fully resolved configuration with per-key provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub config: MalmConfig,
    provenance: BTreeMap<String, Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(MalmConfig::default())
    }
}

impl RunConfig {
    pub fn new(config: MalmConfig) -> Self {
        let provenance = MalmConfig::KEYS
            .iter()
            .map(|k| (k.to_string(), Provenance::Default))
            .collect();
        Self { config, provenance }
    }

    pub fn set(&mut self, key: &str, value: &str, from: Provenance) -> Result<()> {
        self.config.set(key, value)?;
        self.provenance.insert(key.to_string(), from);
        Ok(())
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.provenance.get(key).copied()
    }

    /// Applies a flat `key = value` document. Every key must be recognized.
    pub fn apply_file_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| MalmError::Schema {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        for (key, value) in table {
            let v = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(MalmError::BadValue {
                        key,
                        value: other.to_string(),
                        reason: "config values must be scalars".into(),
                    })
                }
            };
            self.set(&key, &v, Provenance::File)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_file_str(&std::fs::read_to_string(path)?)
    }

    /// The resolved document: one `key = value` line per key, annotated with
    /// its provenance. Parses back with [`RunConfig::apply_file_str`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in MalmConfig::KEYS {
            let v = self.config.get(key).expect("registered key");
            let lit = match v.parse::<f64>() {
                Ok(_) if v != "inf" && v != "NaN" => v,
                _ if v == "true" || v == "false" => v,
                _ => format!("{v:?}"),
            };
            let from = self.provenance(key).unwrap_or(Provenance::Default);
            out.push_str(&format!("{key} = {lit}  # {from}\n"));
        }
        out
    }
}
