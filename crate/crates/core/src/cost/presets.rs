use crate::domain::DomainSchema;
use crate::error::Result;
use crate::model::{Conditioning, FfnVariant, ModelConfig};

/// Source vocabulary size of the reference configurations.
pub const REFERENCE_VOCAB: usize = 24_000;

/// Generic domain first, then the five seen domains.
pub const REFERENCE_DOMAINS: [&str; 6] = ["generic", "law", "medical", "ted", "subtitles", "patents"];

pub fn reference_schema() -> Result<DomainSchema> {
    DomainSchema::labels_only(&REFERENCE_DOMAINS, REFERENCE_VOCAB)
}

/// A named configuration with the published size and cost figures.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
    /// Published parameter count, millions.
    pub published_params_m: f64,
    /// Published forward cost, billions.
    pub published_flops_b: f64,
}

/// Reference architectures at full scale.
pub fn reference_presets() -> Vec<Preset> {
    let base = ModelConfig::default();
    let with = |name, published_params_m, published_flops_b, config: ModelConfig| Preset {
        name,
        config,
        published_params_m,
        published_flops_b,
    };
    let smoe = |conditioning| ModelConfig {
        ffn_variant: FfnVariant::Smoe,
        conditioning,
        ..base.clone()
    };
    let wide = |m: f64, conditioning| ModelConfig {
        width_multiplier: m,
        conditioning,
        ..base.clone()
    };
    vec![
        with("transformer-base", 56.0, 0.44, base.clone()),
        with("transformer-width-1.5", 69.0, 0.57, wide(1.5, Conditioning::None)),
        with("transformer-width-5", 160.0, 1.44, wide(5.0, Conditioning::None)),
        with("smoe", 170.0, 0.57, smoe(Conditioning::None)),
        with(
            "transformer-base-tags",
            56.0,
            0.44,
            ModelConfig {
                conditioning: Conditioning::Tags,
                ..base.clone()
            },
        ),
        with("transformer-width-1.5-tags", 69.0, 0.57, wide(1.5, Conditioning::Tags)),
        with("transformer-width-5-tags", 160.0, 1.44, wide(5.0, Conditioning::Tags)),
        with(
            "transformer-base-adapters",
            170.0,
            0.57,
            ModelConfig {
                ffn_variant: FfnVariant::Adapters,
                conditioning: Conditioning::Tags,
                ..base.clone()
            },
        ),
        with("smoe-tags", 170.0, 0.57, smoe(Conditioning::Tags)),
        with("smoe-domain-aware-gate", 170.0, 0.57, smoe(Conditioning::DomainAwareGate)),
        with("smoe-domain-specialized-gate", 170.0, 0.57, smoe(Conditioning::DomainSpecializedGate)),
    ]
}
