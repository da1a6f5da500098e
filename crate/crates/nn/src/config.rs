use serde::{Deserialize, Serialize};

use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Residual network of basic blocks with squeeze-excitation.
    Senet,
    SeRes2net,
    /// Res2Net with a self-gated connection between feature groups.
    ScgRes2net,
    /// Res2Net whose group gates see both neighbouring groups.
    MlcgRes2net,
    /// SE-Res2Net with asymmetric time/frequency downsampling.
    GeminiRes2net,
    /// Frame encoder followed by an LSTM.
    SslRecurrent,
}

impl Variant {
    pub fn is_res2net(self) -> bool {
        matches!(
            self,
            Variant::SeRes2net | Variant::ScgRes2net | Variant::MlcgRes2net | Variant::GeminiRes2net
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown model variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Filterbank bins of the input features.
    pub input_bins: usize,
    /// Channels per stage.
    pub width: Vec<usize>,
    /// Blocks per stage.
    pub depth: usize,
    pub res2net_scale: usize,
    pub se_reduction: usize,
    /// `[time, frequency]` pooling strides between stages of the Gemini
    /// variant. The other CNN variants pool `[2, 2]`.
    pub gemini_time_freq_ratio: [usize; 2],
    pub recurrent_hidden: usize,
    /// Frame-embedding size of the encoder in the recurrent variant.
    pub ssl_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SeRes2net,
            input_bins: 60,
            width: vec![16, 32, 64, 128],
            depth: 2,
            res2net_scale: 4,
            se_reduction: 8,
            gemini_time_freq_ratio: [1, 2],
            recurrent_hidden: 192,
            ssl_dim: 1024,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            width: vec![16],
            depth: 1,
            res2net_scale: 4,
            se_reduction: 4,
            ssl_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.input_bins == 0 {
            return bad("input_bins must be positive".into());
        }
        if self.variant == Variant::SslRecurrent {
            if self.recurrent_hidden == 0 || self.ssl_dim == 0 {
                return bad("recurrent_hidden and ssl_dim must be positive".into());
            }
            return Ok(());
        }
        if self.width.is_empty() || self.width.contains(&0) {
            return bad(format!("width must be non-empty and positive, got {:?}", self.width));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be at least 1".into());
        }
        if self.gemini_time_freq_ratio.contains(&0) {
            return bad("gemini_time_freq_ratio entries must be positive".into());
        }
        if self.variant.is_res2net() {
            if self.res2net_scale < 2 {
                return bad(format!("res2net_scale must be at least 2, got {}", self.res2net_scale));
            }
            if let Some(w) = self.width.iter().find(|w| *w % self.res2net_scale != 0) {
                return bad(format!("res2net_scale {} does not divide width {w}", self.res2net_scale));
            }
        }
        Ok(())
    }

    /// `(freq, time)` pooling at the first block of every stage after the first.
    pub fn stage_pool(&self) -> (usize, usize) {
        match self.variant {
            Variant::GeminiRes2net => (self.gemini_time_freq_ratio[1], self.gemini_time_freq_ratio[0]),
            _ => (2, 2),
        }
    }
}
