use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::GateVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnVariant {
    Dense,
    Smoe,
    Adapters,
}

impl FfnVariant {
    pub fn name(self) -> &'static str {
        match self {
            FfnVariant::Dense => "dense",
            FfnVariant::Smoe => "smoe",
            FfnVariant::Adapters => "adapters",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    None,
    /// Domain tag prepended to the source.
    Tags,
    DomainAwareGate,
    DomainSpecializedGate,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Tags => "tags",
            Conditioning::DomainAwareGate => "domain-aware-gate",
            Conditioning::DomainSpecializedGate => "domain-specialized-gate",
        }
    }

    pub fn gate_variant(self) -> GateVariant {
        match self {
            Conditioning::DomainAwareGate => GateVariant::DomainAware,
            Conditioning::DomainSpecializedGate => GateVariant::DomainSpecialized,
            _ => GateVariant::Standard,
        }
    }

    /// Whether the supplied domain label can influence the output.
    pub fn uses_label(self) -> bool {
        self != Conditioning::None
    }
}

/// Encoder-decoder architecture. Sparse and adapter sites sit at even
/// 1-based layer indices of both stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// 0 takes the vocabulary size of the domain schema.
    pub vocab_size: usize,
    pub ffn_variant: FfnVariant,
    /// Scales `d_ff` of every dense feed-forward layer.
    pub width_multiplier: f64,
    pub experts: usize,
    pub top_k: usize,
    pub adapter_dim: usize,
    pub conditioning: Conditioning,
    pub dr_probability: f64,
    /// Weight of the optional importance-balancing penalty.
    pub balance_coef: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Transformer Base.
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            vocab_size: 0,
            ffn_variant: FfnVariant::Dense,
            width_multiplier: 1.0,
            experts: 10,
            top_k: 2,
            adapter_dim: 2048,
            conditioning: Conditioning::None,
            dr_probability: 0.0,
            balance_coef: 0.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// `d_ff` after width scaling.
    pub fn dense_d_ff(&self) -> usize {
        (self.d_ff as f64 * self.width_multiplier).round() as usize
    }

    /// 1-based layer index hosts a sparse or adapter site.
    pub fn is_site(layer: usize) -> bool {
        layer % 2 == 0
    }

    pub fn sites(layers: usize) -> usize {
        layers / 2
    }

    pub fn smoe_layers(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Smoe => Self::sites(self.encoder_layers) + Self::sites(self.decoder_layers),
            _ => 0,
        }
    }

    pub fn adapter_sites(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Adapters => Self::sites(self.encoder_layers) + Self::sites(self.decoder_layers),
            _ => 0,
        }
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.d_ff == 0 {
            errs.push("d_model and d_ff must be positive".to_string());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            errs.push("encoder_layers and decoder_layers must be at least 1".to_string());
        }
        if !(self.width_multiplier > 0.0) {
            errs.push(format!("width_multiplier {} must be positive", self.width_multiplier));
        } else if self.dense_d_ff() == 0 {
            errs.push("scaled d_ff rounds to zero".to_string());
        }
        if self.width_multiplier != 1.0 && self.ffn_variant != FfnVariant::Dense {
            errs.push("width_multiplier applies to the dense variant only".to_string());
        }
        if matches!(self.conditioning, Conditioning::DomainAwareGate | Conditioning::DomainSpecializedGate)
            && self.ffn_variant != FfnVariant::Smoe
        {
            errs.push(format!("conditioning {} requires ffn_variant smoe", self.conditioning.name()));
        }
        if self.ffn_variant == FfnVariant::Smoe {
            if self.experts == 0 {
                errs.push("experts must be at least 1".to_string());
            }
            if self.top_k == 0 || self.top_k > self.experts {
                errs.push(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
            }
            if self.smoe_layers() == 0 {
                errs.push("smoe needs at least 2 layers in some stack".to_string());
            }
        }
        if self.ffn_variant == FfnVariant::Adapters && self.adapter_dim == 0 {
            errs.push("adapter_dim must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.dr_probability) {
            errs.push(format!("dr_probability {} outside [0, 1]", self.dr_probability));
        }
        if !(self.balance_coef >= 0.0) {
            errs.push(format!("balance_coef {} must be non-negative", self.balance_coef));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }
}
