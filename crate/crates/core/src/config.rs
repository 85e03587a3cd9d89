//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Full per-head keys and values.
    Mha,
    /// Shared low-rank compression, head-specific reconstruction.
    Mla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeWidth {
    Single,
    Double,
}

/// Numeric width used for compute, and the element size used when accounting
/// cache memory (which may differ, e.g. 2 bytes for half-precision deployment).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Precision {
    pub compute: ComputeWidth,
    pub accounting_bytes: usize,
}

impl Default for Precision {
    fn default() -> Self {
        Self {
            compute: ComputeWidth::Single,
            accounting_bytes: 2,
        }
    }
}

/// Expert layout of a mixture-of-experts layer.
///
/// The first `n_shared` experts see every token; the remaining
/// `n_experts - n_shared` are routed, `top_k` of them per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub n_experts: usize,
    pub n_shared: usize,
    pub top_k: usize,
    /// Inner width of each expert; defaults to `d_model`, a quarter of the
    /// standard `4·d_model` feed-forward.
    pub expert_hidden: Option<usize>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_experts: 64,
            n_shared: 2,
            top_k: 6,
            expert_hidden: None,
        }
    }
}

impl ExpertConfig {
    pub fn n_routed(&self) -> usize {
        self.n_experts.saturating_sub(self.n_shared)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shared > self.n_experts {
            return Err(config_err(format!(
                "n_shared ({}) exceeds n_experts ({})",
                self.n_shared, self.n_experts
            )));
        }
        let routed = self.n_routed();
        if self.top_k < 1 || self.top_k > routed {
            return Err(config_err(format!(
                "top_k must lie in 1..={routed} (routed experts), got {}",
                self.top_k
            )));
        }
        if self.expert_hidden == Some(0) {
            return Err(config_err("expert_hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width `r` of the shared key/value latent. Ignored for `mha`.
    pub latent_dim: usize,
    pub attention: AttentionKind,
    pub ffn: FfnKind,
    pub experts: ExpertConfig,
    /// Width of the dense feed-forward; defaults to `4·d_model`.
    pub ffn_hidden: Option<usize>,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub layer_norm_eps: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            latent_dim: 32,
            attention: AttentionKind::Mla,
            ffn: FfnKind::Moe,
            experts: ExpertConfig::default(),
            ffn_hidden: None,
            dropout: 0.1,
            max_seq_len: 256,
            rope_base: crate::rope::DEFAULT_BASE,
            layer_norm_eps: 1e-5,
            precision: Precision::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small model used throughout the tests: 16 experts, 2 shared, top-4.
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            latent_dim: 16,
            experts: ExpertConfig {
                n_experts: 16,
                n_shared: 2,
                top_k: 4,
                expert_hidden: None,
            },
            dropout: 0.0,
            max_seq_len: 128,
            ..Self::default()
        }
    }

    /// The XS–XL ladder (layers, width, heads) with 50,257-token vocabulary,
    /// 512 positions, and latent width `d/2`.
    pub fn preset(name: &str) -> Option<Self> {
        let (n_layers, d_model, n_heads) = match name.to_ascii_lowercase().as_str() {
            "xs" => (6, 256, 8),
            "s" => (6, 512, 8),
            "m" => (9, 512, 8),
            "l" => (12, 768, 12),
            "xl" => (12, 1024, 16),
            _ => return None,
        };
        Some(Self {
            vocab_size: 50_257,
            d_model,
            n_layers,
            n_heads,
            latent_dim: d_model / 2,
            max_seq_len: 512,
            ..Self::default()
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn expert_hidden(&self) -> usize {
        self.experts.expert_hidden.unwrap_or(self.d_model)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_model)
    }

    /// `r / d`; 1 for full attention.
    pub fn compression_ratio(&self) -> f64 {
        match self.attention {
            AttentionKind::Mha => 1.0,
            AttentionKind::Mla => self.latent_dim as f64 / self.d_model as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(config_err("vocab_size, d_model, n_layers and n_heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(config_err(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.attention == AttentionKind::Mla && (self.latent_dim == 0 || self.latent_dim > self.d_model) {
            return Err(config_err(format!(
                "latent_dim must lie in 1..={}, got {}",
                self.d_model, self.latent_dim
            )));
        }
        if self.ffn == FfnKind::Moe {
            self.experts.validate()?;
        }
        if self.ffn_hidden == Some(0) {
            return Err(config_err("ffn_hidden must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.max_seq_len == 0 {
            return Err(config_err("max_seq_len must be positive"));
        }
        if ![1, 2, 4, 8].contains(&self.precision.accounting_bytes) {
            return Err(config_err(format!(
                "accounting_bytes must be 1, 2, 4 or 8, got {}",
                self.precision.accounting_bytes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        for name in ["xs", "s", "m", "l", "XL"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("xxl").is_none());
    }

    #[test]
    fn reference_expert_layout() {
        let e = ExpertConfig::default();
        assert_eq!((e.n_experts, e.n_shared, e.n_routed(), e.top_k), (64, 2, 62, 6));
        // (N_s + k) experts of width d against a 4d dense FFN: 2x capacity
        let c = ModelConfig::default();
        assert_eq!((e.n_shared + e.top_k) * c.expert_hidden(), 2 * c.ffn_hidden());
    }

    #[test]
    fn ablation_ratios_are_representable() {
        for r in [512, 256, 128, 64] {
            let c = ModelConfig {
                d_model: 512,
                n_heads: 8,
                latent_dim: r,
                ..ModelConfig::default()
            };
            c.validate().unwrap();
            assert_eq!(c.compression_ratio(), r as f64 / 512.0);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = [
            ModelConfig { n_heads: 3, ..ModelConfig::toy() },
            ModelConfig { latent_dim: 33, ..ModelConfig::toy() },
            ModelConfig { latent_dim: 0, ..ModelConfig::toy() },
            ModelConfig {
                experts: ExpertConfig { top_k: 15, ..ModelConfig::toy().experts },
                ..ModelConfig::toy()
            },
            ModelConfig { dropout: 1.0, ..ModelConfig::toy() },
            ModelConfig {
                precision: Precision { accounting_bytes: 3, ..Precision::default() },
                ..ModelConfig::toy()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"d_model": 64, "dmodel": 3}"#).unwrap_err();
        assert!(err.to_string().contains("dmodel"));
        let ok: ModelConfig = serde_json::from_str(r#"{"d_model": 128}"#).unwrap();
        assert_eq!(ok.d_model, 128);
        assert_eq!(ok.n_layers, ModelConfig::default().n_layers);
    }
}
