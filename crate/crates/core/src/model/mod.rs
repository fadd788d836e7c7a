//! Latent-bottleneck multimodal transformer.
//!
//! Text tokens and tabular vital-sign tokens are concatenated into a single
//! input array. A small learned latent array reads from that array through a
//! cross-attention block at every depth, then refines itself with a latent
//! self-attention transformer block. Logits come from the mean-pooled latents.

mod blocks;
mod check;
mod encode;
mod forward;
mod weights;

pub use blocks::{cross_attention_block, latent_transformer_block};
pub use check::{check_model_gradients, random_inputs};
pub use encode::{embed_text, encode_tabular, fourier_position_encoding};
pub(crate) use forward::build_forward;
pub use forward::{forward, forward_batch, BatchOutput, ModelInput, TabularToken};
pub use weights::{BoundParams, ModelWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Names of the eight tabular features, in canonical column order.
pub const FEATURE_NAMES: [&str; 8] = [
    "temperature",
    "heartrate",
    "resprate",
    "o2sat",
    "sbp",
    "dbp",
    "pain",
    "acuity",
];

/// Reserved vocabulary id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TabularMode {
    /// Value times one frozen direction shared by every feature.
    ValueOnly,
    /// Value times a per-feature direction plus a learned feature-identity embedding.
    #[default]
    FeatureId,
    /// Value times a shared direction plus a Fourier encoding of the column position.
    FourierPe,
}

impl TabularMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TabularMode::ValueOnly => "value_only",
            TabularMode::FeatureId => "feature_id",
            TabularMode::FourierPe => "fourier_pe",
        }
    }

    /// True when feature identity travels with the token instead of its position.
    pub fn is_permutation_invariant(self) -> bool {
        !matches!(self, TabularMode::FourierPe)
    }
}

impl std::str::FromStr for TabularMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value_only" => Ok(TabularMode::ValueOnly),
            "feature_id" => Ok(TabularMode::FeatureId),
            "fourier_pe" => Ok(TabularMode::FourierPe),
            other => Err(Error::Config(format!("unknown tabular mode `{other}`"))),
        }
    }
}

/// Which input modalities reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Modality {
    #[default]
    #[serde(rename = "text+vitals")]
    TextVitals,
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "vitals")]
    Vitals,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::TextVitals, Modality::Text, Modality::Vitals];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::TextVitals => "text+vitals",
            Modality::Text => "text",
            Modality::Vitals => "vitals",
        }
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Modality::Vitals)
    }

    pub fn uses_vitals(self) -> bool {
        !matches!(self, Modality::Text)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text+vitals" => Ok(Modality::TextVitals),
            "text" => Ok(Modality::Text),
            "vitals" => Ok(Modality::Vitals),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_latents: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub cross_heads: usize,
    pub latent_heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    pub num_tabular_features: usize,
    pub tabular_mode: TabularMode,
    pub text_pe: bool,
    pub text_pe_bands: usize,
    pub num_classes: usize,
    pub weight_sharing: bool,
    pub vocab_size: usize,
    pub modality: Modality,
    /// Adds a learned per-feature embedding for imputed vitals.
    pub missing_indicator: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            num_latents: 16,
            latent_dim: 16,
            depth: 4,
            cross_heads: 1,
            latent_heads: 2,
            mlp_ratio: 2,
            max_text_len: 8,
            num_tabular_features: 8,
            tabular_mode: TabularMode::FeatureId,
            text_pe: true,
            text_pe_bands: 4,
            num_classes: 50,
            weight_sharing: false,
            vocab_size: 2,
            modality: Modality::TextVitals,
            missing_indicator: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 4,
            num_latents: 2,
            latent_dim: 4,
            depth: 2,
            max_text_len: 4,
            num_tabular_features: 8,
            text_pe_bands: 1,
            num_classes: 3,
            vocab_size: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let dims = [
            ("embed_dim", self.embed_dim),
            ("num_latents", self.num_latents),
            ("latent_dim", self.latent_dim),
            ("depth", self.depth),
            ("cross_heads", self.cross_heads),
            ("latent_heads", self.latent_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_text_len", self.max_text_len),
            ("num_tabular_features", self.num_tabular_features),
            ("text_pe_bands", self.text_pe_bands),
        ];
        for (name, v) in dims {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !self.latent_dim.is_multiple_of(self.latent_heads) {
            return fail("latent_dim must be divisible by latent_heads".into());
        }
        if !self.embed_dim.is_multiple_of(self.cross_heads) {
            return fail("embed_dim must be divisible by cross_heads".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.pe_channels() > self.embed_dim {
            return fail(format!(
                "positional channels ({}) exceed embed_dim ({})",
                self.pe_channels(),
                self.embed_dim
            ));
        }
        if self.vocab_size <= UNK_ID {
            return fail("vocab_size must include the PAD and UNK ids".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Width of a Fourier position encoding: sin/cos per band plus the raw coordinate.
    pub fn pe_channels(&self) -> usize {
        2 * self.text_pe_bands + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.latent_dim
    }

    /// Number of distinct parameter sets for the depth repeats.
    pub fn distinct_blocks(&self) -> usize {
        if self.weight_sharing {
            self.depth.min(2)
        } else {
            self.depth
        }
    }

    /// Parameter set used by repeat `r`; with sharing, repeats 1.. reuse set 1.
    pub fn block_for_repeat(&self, r: usize) -> usize {
        if self.weight_sharing {
            r.min(1)
        } else {
            r
        }
    }

    /// Width of the input array under the configured modality.
    pub fn input_len(&self) -> usize {
        let text = if self.modality.uses_text() {
            self.max_text_len
        } else {
            0
        };
        let tab = if self.modality.uses_vitals() {
            self.num_tabular_features
        } else {
            0
        };
        text + tab
    }

    pub fn feature_name(&self, j: usize) -> String {
        if self.num_tabular_features == FEATURE_NAMES.len() {
            FEATURE_NAMES[j].to_string()
        } else {
            format!("F{j}")
        }
    }

    /// Column labels of the input array: `T0..T{L-1}` then feature names.
    pub fn column_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.input_len());
        if self.modality.uses_text() {
            labels.extend((0..self.max_text_len).map(|p| format!("T{p}")));
        }
        if self.modality.uses_vitals() {
            labels.extend((0..self.num_tabular_features).map(|j| self.feature_name(j)));
        }
        labels
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, n, l, h, k) = (
            self.embed_dim,
            self.num_latents,
            self.latent_dim,
            self.mlp_hidden(),
            self.num_classes,
        );
        let f = self.num_tabular_features;
        let embed = self.vocab_size * d + 2 * f * d + if self.missing_indicator { f * d } else { 0 };
        let cross = 2 * l + 2 * d + l * d + 2 * d * d + d * l + l;
        let latent = 2 * l + 4 * l * l + l;
        let mlp = 2 * l + l * h + h + h * l + l;
        embed + n * l + self.distinct_blocks() * (cross + latent + mlp) + l * k + k
    }
}

/// Head-averaged cross-attention weights of one block for one visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block_index: usize,
    /// `[num_latents x input_len]`, rows summing to one.
    pub matrix: Tensor,
    pub column_labels: Vec<String>,
}

#[cfg(test)]
mod tests;
