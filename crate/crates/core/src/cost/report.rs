use serde::{Deserialize, Serialize};

use crate::domain::{DomainId, DomainSchema, Token, EOS};
use crate::error::Result;
use crate::model::{Batch, Conditioning, FfnVariant, Mode, Model, ModelConfig};
use crate::moe::GateParams;
use crate::nn::{AdapterBank, AttentionLayer, FfnLayer, LayerNorm};
use crate::numerics::{MacCounter, Tape};

/// Parameter counts by group; the groups partition the model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub embeddings: usize,
    pub output_projection: usize,
    pub attention: usize,
    /// Dense feed-forward layers and experts.
    pub ffn: usize,
    /// Gate weights and the gate's domain embedding.
    pub gates: usize,
    pub adapters: usize,
    pub norms: usize,
}

impl ParamGroups {
    pub fn total(&self) -> usize {
        self.embeddings + self.output_projection + self.attention + self.ffn + self.gates + self.adapters + self.norms
    }
}

/// Multiply-accumulates of one teacher-forced forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub src_len: usize,
    pub tgt_len: usize,
    /// Query, key, value and output projections of every attention block.
    pub attention_projections: u64,
    /// Score and value products inside attention.
    pub attention_products: u64,
    /// Dense feed-forward layers plus the `k` active experts per token.
    pub ffn: u64,
    pub gates: u64,
    pub adapters: u64,
    pub output_projection: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.attention_projections + self.attention_products + self.ffn + self.gates + self.adapters + self.output_projection
    }

    /// Matrix products of the layer stacks: everything except the output
    /// vocabulary projection and the gate projections.
    pub fn table_figure(&self) -> u64 {
        self.total() - self.output_projection - self.gates
    }
}

/// Size and cost of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub params: ParamGroups,
    /// Parameters as built: input embedding and output projection separate.
    pub total_params: usize,
    /// Parameters if the output projection shared the embedding table.
    pub tied_params: usize,
    pub macs: MacBreakdown,
    pub total_macs: u64,
    /// `2 × total_macs`.
    pub flops: u64,
    /// Stack products only, the convention of the published cost column.
    pub table_macs: u64,
    /// For tag-conditioned models: the total with the tag's extra source position.
    pub tagged_total_macs: Option<u64>,
}

/// Closed-form parameter count of what [`Model::build`] allocates.
pub fn count_params(cfg: &ModelConfig, schema: &DomainSchema) -> Result<ParamGroups> {
    cfg.validate()?;
    let v = Model::vocab_for(cfg, schema)?;
    let d = cfg.d_model;
    let labeled = schema.num_labeled();
    let mut g = ParamGroups {
        embeddings: v * d,
        output_projection: d * v,
        norms: 2 * LayerNorm::num_params(d),
        ..ParamGroups::default()
    };
    if cfg.conditioning == Conditioning::DomainAwareGate {
        g.gates += labeled * d;
    }
    let ffn_site = |g: &mut ParamGroups, layer: usize| {
        let site = ModelConfig::is_site(layer);
        match cfg.ffn_variant {
            FfnVariant::Smoe if site => {
                g.ffn += cfg.experts * FfnLayer::num_params(d, cfg.d_ff);
                g.gates += GateParams::num_params(cfg.conditioning.gate_variant(), d, d, cfg.experts, labeled);
            }
            FfnVariant::Adapters if site => {
                g.ffn += FfnLayer::num_params(d, cfg.d_ff);
                g.adapters += labeled * AdapterBank::params_per_domain(d, cfg.adapter_dim);
            }
            _ => g.ffn += FfnLayer::num_params(d, cfg.dense_d_ff()),
        }
    };
    for l in 1..=cfg.encoder_layers {
        g.attention += AttentionLayer::num_params(d);
        g.norms += 2 * LayerNorm::num_params(d);
        ffn_site(&mut g, l);
    }
    for l in 1..=cfg.decoder_layers {
        g.attention += 2 * AttentionLayer::num_params(d);
        g.norms += 3 * LayerNorm::num_params(d);
        ffn_site(&mut g, l);
    }
    Ok(g)
}

/// Analytic multiply-accumulates for one example with `src_len` encoder
/// positions and `tgt_len` decoder positions, all non-pad.
pub fn estimate_macs(cfg: &ModelConfig, schema: &DomainSchema, src_len: usize, tgt_len: usize) -> Result<MacBreakdown> {
    cfg.validate()?;
    let v = Model::vocab_for(cfg, schema)? as u64;
    let (d, s, t) = (cfg.d_model as u64, src_len as u64, tgt_len as u64);
    let mut m = MacBreakdown {
        src_len,
        tgt_len,
        output_projection: t * d * v,
        ..MacBreakdown::default()
    };
    let gate_width = match cfg.conditioning {
        Conditioning::DomainAwareGate => 2 * d,
        _ => d,
    };
    let ffn = |m: &mut MacBreakdown, layer: usize, tokens: u64| {
        let site = ModelConfig::is_site(layer);
        match cfg.ffn_variant {
            FfnVariant::Smoe if site => {
                m.ffn += tokens * cfg.top_k as u64 * 2 * d * cfg.d_ff as u64;
                m.gates += tokens * gate_width * cfg.experts as u64;
            }
            FfnVariant::Adapters if site => {
                m.ffn += tokens * 2 * d * cfg.d_ff as u64;
                m.adapters += tokens * 2 * d * cfg.adapter_dim as u64;
            }
            _ => m.ffn += tokens * 2 * d * cfg.dense_d_ff() as u64,
        }
    };
    for l in 1..=cfg.encoder_layers {
        m.attention_projections += 4 * s * d * d;
        m.attention_products += 2 * s * s * d;
        ffn(&mut m, l, s);
    }
    for l in 1..=cfg.decoder_layers {
        // self-attention, then cross-attention: queries and output over the
        // target, keys and values over the encoder output
        m.attention_projections += 4 * t * d * d + 2 * t * d * d + 2 * s * d * d;
        m.attention_products += 2 * t * t * d + 2 * t * s * d;
        ffn(&mut m, l, t);
    }
    Ok(m)
}

/// Full cost report at the given lengths. Tag-conditioned models also get
/// the total with the extra tag position.
pub fn estimate_flops(name: &str, cfg: &ModelConfig, schema: &DomainSchema, src_len: usize, tgt_len: usize) -> Result<CostReport> {
    let params = count_params(cfg, schema)?;
    let macs = estimate_macs(cfg, schema, src_len, tgt_len)?;
    let tagged_total_macs = if cfg.conditioning == Conditioning::Tags {
        Some(estimate_macs(cfg, schema, src_len + 1, tgt_len)?.total())
    } else {
        None
    };
    let total = params.total();
    Ok(CostReport {
        model: name.to_string(),
        total_params: total,
        tied_params: total - params.output_projection,
        params,
        total_macs: macs.total(),
        flops: 2 * macs.total(),
        table_macs: macs.table_figure(),
        tagged_total_macs,
        macs,
    })
}

/// Runs one teacher-forced forward pass of a zero-initialized model under
/// the runtime multiply-accumulate counter. The source holds `src_len`
/// tokens before tagging; tag-conditioned models see one more.
///
/// With `compute` false the counter runs in count-only mode, which skips
/// the products; the zero weights make the pass identical either way.
pub fn instrumented_macs(cfg: &ModelConfig, schema: &DomainSchema, src_len: usize, tgt_len: usize, compute: bool) -> Result<u64> {
    let model = Model::build_zeroed(cfg, schema)?;
    let first = schema.first_content();
    let seq = |len: usize| -> Vec<Token> {
        let mut s = vec![first; len.saturating_sub(1)];
        if len > 0 {
            s.push(EOS);
        }
        s
    };
    let label = DomainId(schema.num_labeled().min(2) - 1);
    let source = model.prepare_source(&seq(src_len), label, schema)?;
    let batch = Batch::new(&[source], &[seq(tgt_len)], &[label])?;
    let mut tape = Tape::inference(&model.store);
    let counter = if compute {
        MacCounter::start()
    } else {
        MacCounter::start_count_only()
    };
    model.forward(&mut tape, &batch, Mode::Infer)?;
    Ok(counter.total())
}

pub const TABLE_CSV_HEADER: &str = "model,params,params_untied,flops,macs_total";

/// One row per report: tied parameter count (the published convention),
/// the as-built count, the published-convention cost figure and the full
/// multiply-accumulate total.
pub fn table_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{TABLE_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model, r.tied_params, r.total_params, r.table_macs, r.total_macs
        ));
    }
    s
}
