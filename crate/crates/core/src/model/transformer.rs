use crate::domain::{DomainId, DomainSchema, Token, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Conditioning, FfnVariant, ModelConfig};
use crate::moe::{balance_penalty, GateParams, GateTrace, SmoeLayer, Stack, TraceEntry};
use crate::nn::{AdapterBank, AttentionLayer, Embedding, FfnLayer, Init, LayerNorm};
use crate::numerics::{AttnMask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Records gradients and adds the balancing penalty when enabled.
    Train,
    Infer,
}

/// Feed-forward sublayer of one transformer layer.
#[derive(Clone, Debug)]
pub enum FfnBlock {
    Dense(FfnLayer),
    Sparse(SmoeLayer),
    /// Dense feed-forward followed by a per-domain adapter on the residual stream.
    Adapted(FfnLayer, AdapterBank),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub self_attn: AttentionLayer,
    pub norm_ffn: LayerNorm,
    pub ffn: FfnBlock,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: AttentionLayer,
    pub norm_cross: LayerNorm,
    pub cross_attn: AttentionLayer,
    pub norm_ffn: LayerNorm,
    pub ffn: FfnBlock,
}

/// Padded token matrices for a teacher-forced pass. Targets are shifted
/// right: `tgt_in` starts with `BOS`, `tgt_out` is the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<Token>,
    pub tgt_in: Vec<Token>,
    pub tgt_out: Vec<Token>,
    pub domains: Vec<DomainId>,
}

impl Batch {
    /// Pads `sources` and `targets` (full references ending in `EOS`).
    pub fn new(sources: &[Vec<Token>], targets: &[Vec<Token>], domains: &[DomainId]) -> Result<Self> {
        if sources.len() != targets.len() || sources.len() != domains.len() {
            return Err(Error::dim(format!(
                "batch of {} sources, {} targets, {} domains",
                sources.len(),
                targets.len(),
                domains.len()
            )));
        }
        let size = sources.len();
        let src_len = sources.iter().map(Vec::len).max().unwrap_or(0);
        let tgt_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            domains: domains.to_vec(),
        };
        for (i, (s, t)) in sources.iter().zip(targets).enumerate() {
            b.src[i * src_len..i * src_len + s.len()].copy_from_slice(s);
            b.tgt_out[i * tgt_len..i * tgt_len + t.len()].copy_from_slice(t);
            if !t.is_empty() {
                b.tgt_in[i * tgt_len] = BOS;
                b.tgt_in[i * tgt_len + 1..i * tgt_len + t.len()].copy_from_slice(&t[..t.len() - 1]);
            }
        }
        Ok(b)
    }

    /// Number of non-pad reference tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Output of [`Model::forward`].
pub struct ForwardOutput {
    /// `[B·T × V]`, row `b·T + t` for target position `t` of example `b`.
    pub logits: Var,
    pub trace: Option<GateTrace>,
    /// Weighted balancing penalty, present in train mode when enabled.
    pub penalty: Option<Var>,
    /// Expert evaluations summed over sparse layers.
    pub expert_evaluations: usize,
}

/// Inserts the domain's tag in front of `source`.
pub fn prepend_domain_tag(source: &[Token], d: DomainId, schema: &DomainSchema) -> Result<Vec<Token>> {
    let tag = schema.tag(d)?;
    if source.last() != Some(&EOS) {
        return Err(Error::contract("source must end with the end-of-sequence token"));
    }
    if source.first().is_some_and(|&t| schema.is_tag(t)) {
        return Err(Error::contract("source already starts with a domain tag"));
    }
    let mut out = Vec::with_capacity(source.len() + 1);
    out.push(tag);
    out.extend_from_slice(source);
    Ok(out)
}

struct Routed<'a> {
    trace: Option<&'a mut GateTrace>,
    penalty: bool,
    penalties: Vec<Var>,
    evaluations: usize,
    next_layer: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub schema_hash: String,
    /// Labeled domains (generic and seen); valid routing labels are `0..labeled`.
    pub labeled: usize,
    pub vocab: usize,
    pub embedding: Embedding,
    pub domain_embedding: Option<ParamId>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder_norm: LayerNorm,
    /// Output projection `[d_model × V]`, untied, bias-free.
    pub output: ParamId,
}

impl Model {
    /// Randomly initialized model, deterministic in `cfg.seed`.
    pub fn build(cfg: &ModelConfig, schema: &DomainSchema) -> Result<Self> {
        let mut store = ParamStore::new();
        let parts = Self::layout(cfg, schema, &mut Init::seeded(&mut store, cfg.seed))?;
        Ok(Self::assemble(cfg, schema, store, parts))
    }

    /// All-zero model with the same tensors; enough for counting.
    pub fn build_zeroed(cfg: &ModelConfig, schema: &DomainSchema) -> Result<Self> {
        let mut store = ParamStore::new();
        let parts = Self::layout(cfg, schema, &mut Init::zeros(&mut store))?;
        Ok(Self::assemble(cfg, schema, store, parts))
    }

    pub fn vocab_for(cfg: &ModelConfig, schema: &DomainSchema) -> Result<usize> {
        match cfg.vocab_size {
            0 => Ok(schema.vocab_size()),
            v if v == schema.vocab_size() => Ok(v),
            v => Err(Error::config(format!(
                "vocab_size {v} disagrees with the domain schema's {}",
                schema.vocab_size()
            ))),
        }
    }

    #[allow(clippy::type_complexity)]
    fn layout(
        cfg: &ModelConfig,
        schema: &DomainSchema,
        init: &mut Init<'_>,
    ) -> Result<(Embedding, Option<ParamId>, Vec<EncoderLayer>, Vec<DecoderLayer>, LayerNorm, LayerNorm, ParamId)> {
        cfg.validate()?;
        let vocab = Self::vocab_for(cfg, schema)?;
        let d = cfg.d_model;
        let labeled = schema.num_labeled();
        let embedding = Embedding::new(init, "embed", vocab, d);
        let domain_embedding = (cfg.conditioning == Conditioning::DomainAwareGate)
            .then(|| init.normal("domain_embed", &[labeled, d], (d as f64).powf(-0.5)));
        let ffn_block = |init: &mut Init<'_>, prefix: &str, layer: usize| -> Result<FfnBlock> {
            let site = ModelConfig::is_site(layer);
            Ok(match cfg.ffn_variant {
                FfnVariant::Smoe if site => {
                    let gate = GateParams::new(
                        init,
                        &format!("{prefix}.gate"),
                        cfg.conditioning.gate_variant(),
                        d,
                        cfg.experts,
                        cfg.top_k,
                        labeled,
                        domain_embedding.map(|t| (t, d)),
                    )?;
                    let experts = (0..cfg.experts)
                        .map(|e| FfnLayer::new(init, &format!("{prefix}.expert{e}"), d, cfg.d_ff))
                        .collect();
                    FfnBlock::Sparse(SmoeLayer::new(gate, experts)?)
                }
                FfnVariant::Adapters if site => FfnBlock::Adapted(
                    FfnLayer::new(init, &format!("{prefix}.ffn"), d, cfg.d_ff),
                    AdapterBank::new(init, &format!("{prefix}.adapter"), labeled, d, cfg.adapter_dim),
                ),
                _ => FfnBlock::Dense(FfnLayer::new(init, &format!("{prefix}.ffn"), d, cfg.dense_d_ff())),
            })
        };
        let mut encoder = Vec::new();
        for l in 1..=cfg.encoder_layers {
            let p = format!("enc{l}");
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(init, &format!("{p}.norm_attn"), d),
                self_attn: AttentionLayer::new(init, &format!("{p}.self_attn"), d, cfg.heads)?,
                norm_ffn: LayerNorm::new(init, &format!("{p}.norm_ffn"), d),
                ffn: ffn_block(init, &p, l)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 1..=cfg.decoder_layers {
            let p = format!("dec{l}");
            decoder.push(DecoderLayer {
                norm_self: LayerNorm::new(init, &format!("{p}.norm_self"), d),
                self_attn: AttentionLayer::new(init, &format!("{p}.self_attn"), d, cfg.heads)?,
                norm_cross: LayerNorm::new(init, &format!("{p}.norm_cross"), d),
                cross_attn: AttentionLayer::new(init, &format!("{p}.cross_attn"), d, cfg.heads)?,
                norm_ffn: LayerNorm::new(init, &format!("{p}.norm_ffn"), d),
                ffn: ffn_block(init, &p, l)?,
            });
        }
        let encoder_norm = LayerNorm::new(init, "enc.norm", d);
        let decoder_norm = LayerNorm::new(init, "dec.norm", d);
        let output = init.xavier("output", d, vocab);
        Ok((embedding, domain_embedding, encoder, decoder, encoder_norm, decoder_norm, output))
    }

    #[allow(clippy::type_complexity)]
    fn assemble(
        cfg: &ModelConfig,
        schema: &DomainSchema,
        store: ParamStore,
        parts: (Embedding, Option<ParamId>, Vec<EncoderLayer>, Vec<DecoderLayer>, LayerNorm, LayerNorm, ParamId),
    ) -> Self {
        let (embedding, domain_embedding, encoder, decoder, encoder_norm, decoder_norm, output) = parts;
        Model {
            config: cfg.clone(),
            store,
            schema_hash: schema.hash(),
            labeled: schema.num_labeled(),
            vocab: embedding.vocab,
            embedding,
            domain_embedding,
            encoder,
            decoder,
            encoder_norm,
            decoder_norm,
            output,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Stack of each sparse layer in trace numbering.
    pub fn smoe_stacks(&self) -> Vec<Stack> {
        let enc = self.encoder.iter().filter(|l| matches!(l.ffn, FfnBlock::Sparse(_))).map(|_| Stack::Encoder);
        let dec = self.decoder.iter().filter(|l| matches!(l.ffn, FfnBlock::Sparse(_))).map(|_| Stack::Decoder);
        enc.chain(dec).collect()
    }

    /// Source as the model consumes it: tagged when conditioning on tags.
    pub fn prepare_source(&self, source: &[Token], d: DomainId, schema: &DomainSchema) -> Result<Vec<Token>> {
        if self.config.conditioning == Conditioning::Tags {
            prepend_domain_tag(source, d, schema)
        } else {
            Ok(source.to_vec())
        }
    }

    fn check_tokens(&self, tokens: &[Token], len: usize, what: &str) -> Result<()> {
        if let Some(i) = tokens.iter().position(|&t| t as usize >= self.vocab) {
            let (b, p) = if len == 0 { (0, 0) } else { (i / len, i % len) };
            return Err(Error::data(format!(
                "{what} token {} at batch row {b}, position {p} is outside the vocabulary of {}",
                tokens[i], self.vocab
            )));
        }
        Ok(())
    }

    fn check_domains(&self, domains: &[DomainId]) -> Result<()> {
        match domains.iter().find(|d| d.0 >= self.labeled) {
            Some(d) => Err(Error::lookup("domain label", d)),
            None => Ok(()),
        }
    }

    /// Teacher-forced pass over a padded batch.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        self.check_tokens(&batch.src, batch.src_len, "source")?;
        self.check_tokens(&batch.tgt_in, batch.tgt_len, "target")?;
        self.check_domains(&batch.domains)?;
        let mut trace = (self.config.ffn_variant == FfnVariant::Smoe)
            .then(|| GateTrace::new(self.config.experts, self.config.top_k, self.smoe_stacks()));
        let mut routed = Routed {
            trace: trace.as_mut(),
            penalty: mode == Mode::Train && self.config.balance_coef > 0.0,
            penalties: Vec::new(),
            evaluations: 0,
            next_layer: 0,
        };
        let enc = self.encode_inner(tape, batch, &mut routed)?;
        let logits = self.decode_inner(tape, enc, batch, &batch.tgt_in, batch.tgt_len, &mut routed)?;
        let Routed { penalties, evaluations, .. } = routed;
        let penalty = match penalties.split_first() {
            Some((&first, rest)) => {
                let mut total = first;
                for &p in rest {
                    total = tape.add(total, p)?;
                }
                Some(tape.scale(total, self.config.balance_coef)?)
            }
            None => None,
        };
        if let Some(t) = trace.as_mut() {
            t.sort();
        }
        Ok(ForwardOutput {
            logits,
            trace,
            penalty,
            expert_evaluations: evaluations,
        })
    }

    /// Encoder output `[B·S × d]` for the batch's sources.
    pub fn encode(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<Var> {
        self.check_tokens(&batch.src, batch.src_len, "source")?;
        self.check_domains(&batch.domains)?;
        let mut routed = Routed {
            trace: None,
            penalty: false,
            penalties: Vec::new(),
            evaluations: 0,
            next_layer: 0,
        };
        self.encode_inner(tape, batch, &mut routed)
    }

    /// Logits `[B·T × V]` for decoder inputs `tgt_in` (`B × tgt_len`) given an
    /// encoder output from [`Model::encode`] on the same batch.
    pub fn decode(&self, tape: &mut Tape<'_>, enc: Var, batch: &Batch, tgt_in: &[Token], tgt_len: usize) -> Result<Var> {
        self.check_tokens(tgt_in, tgt_len, "target")?;
        let mut routed = Routed {
            trace: None,
            penalty: false,
            penalties: Vec::new(),
            evaluations: 0,
            next_layer: self.encoder.iter().filter(|l| matches!(l.ffn, FfnBlock::Sparse(_))).count(),
        };
        self.decode_inner(tape, enc, batch, tgt_in, tgt_len, &mut routed)
    }

    fn embed(&self, tape: &mut Tape<'_>, tokens: &[Token], len: usize) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).map(|i| if len == 0 { 0 } else { i % len }).collect();
        self.embedding.forward(tape, &ids, &positions)
    }

    fn encode_inner(&self, tape: &mut Tape<'_>, batch: &Batch, routed: &mut Routed<'_>) -> Result<Var> {
        let (b, s) = (batch.size, batch.src_len);
        let valid: Vec<bool> = batch.src.iter().map(|&t| t != PAD).collect();
        let mask = AttnMask {
            batch: b,
            q_len: s,
            k_len: s,
            key_valid: valid.clone(),
            causal: false,
        };
        let rows = Rows::new(&batch.domains, &valid, s);
        let mut x = self.embed(tape, &batch.src, s)?;
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(tape, x)?;
            let a = layer.self_attn.forward(tape, h, h, h, &mask)?;
            x = tape.add(x, a)?;
            x = self.ffn_sublayer(tape, x, &layer.norm_ffn, &layer.ffn, &rows, routed)?;
        }
        self.encoder_norm.forward(tape, x)
    }

    fn decode_inner(
        &self,
        tape: &mut Tape<'_>,
        enc: Var,
        batch: &Batch,
        tgt_in: &[Token],
        tgt_len: usize,
        routed: &mut Routed<'_>,
    ) -> Result<Var> {
        let (b, s, t) = (batch.size, batch.src_len, tgt_len);
        if tgt_in.len() != b * t {
            return Err(Error::dim(format!("{} target tokens for {b} rows of length {t}", tgt_in.len())));
        }
        let tgt_valid: Vec<bool> = tgt_in.iter().map(|&x| x != PAD).collect();
        let self_mask = AttnMask {
            batch: b,
            q_len: t,
            k_len: t,
            key_valid: tgt_valid.clone(),
            causal: true,
        };
        let cross_mask = AttnMask {
            batch: b,
            q_len: t,
            k_len: s,
            key_valid: batch.src.iter().map(|&x| x != PAD).collect(),
            causal: false,
        };
        let rows = Rows::new(&batch.domains, &tgt_valid, t);
        let mut x = self.embed(tape, tgt_in, t)?;
        for layer in &self.decoder {
            let h = layer.norm_self.forward(tape, x)?;
            let a = layer.self_attn.forward(tape, h, h, h, &self_mask)?;
            x = tape.add(x, a)?;
            let h = layer.norm_cross.forward(tape, x)?;
            let a = layer.cross_attn.forward(tape, h, enc, enc, &cross_mask)?;
            x = tape.add(x, a)?;
            x = self.ffn_sublayer(tape, x, &layer.norm_ffn, &layer.ffn, &rows, routed)?;
        }
        let x = self.decoder_norm.forward(tape, x)?;
        let w = tape.param(self.output);
        tape.matmul(x, w)
    }

    fn ffn_sublayer(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        norm: &LayerNorm,
        block: &FfnBlock,
        rows: &Rows,
        routed: &mut Routed<'_>,
    ) -> Result<Var> {
        let h = norm.forward(tape, x)?;
        match block {
            FfnBlock::Dense(f) => {
                let y = f.forward(tape, h)?;
                tape.add(x, y)
            }
            FfnBlock::Adapted(f, bank) => {
                let y = f.forward(tape, h)?;
                let x = tape.add(x, y)?;
                bank.forward(tape, x, &rows.domains)
            }
            FfnBlock::Sparse(layer) => {
                let layer_idx = routed.next_layer;
                routed.next_layer += 1;
                let all_valid = rows.valid.len() == rows.domains.len();
                let hv = if all_valid { h } else { tape.gather_rows(h, &rows.valid)? };
                let domains: Vec<DomainId> = rows.valid.iter().map(|&r| rows.domains[r]).collect();
                let (y, probs, routing) = layer.forward(tape, hv, &domains)?;
                routed.evaluations += routing.evaluations;
                if routed.penalty {
                    routed.penalties.push(balance_penalty(tape, probs)?);
                }
                if let Some(trace) = routed.trace.as_deref_mut() {
                    let (n, k) = (routing.experts, routing.k);
                    for (i, &r) in rows.valid.iter().enumerate() {
                        trace.entries.push(TraceEntry {
                            layer: layer_idx,
                            example: r / rows.len.max(1),
                            position: r % rows.len.max(1),
                            domain: rows.domains[r],
                            probs: routing.probs[i * n..(i + 1) * n].to_vec(),
                            experts: routing.selected[i * k..(i + 1) * k].to_vec(),
                            weights: routing.weights[i * k..(i + 1) * k].to_vec(),
                        });
                    }
                }
                let y = if all_valid {
                    y
                } else {
                    tape.scatter_rows(vec![(y, rows.valid.clone())], rows.domains.len(), self.config.d_model)?
                };
                tape.add(x, y)
            }
        }
    }

    /// Raw parameter tensor by name, for inspection and tests.
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.store.get(self.store.id(name)?).value)
    }
}

/// Per-row domain labels and the indices of non-pad rows of a stack.
struct Rows {
    domains: Vec<DomainId>,
    valid: Vec<usize>,
    len: usize,
}

impl Rows {
    fn new(batch_domains: &[DomainId], valid: &[bool], len: usize) -> Self {
        let domains = (0..valid.len()).map(|i| batch_domains[i / len.max(1)]).collect();
        let valid = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        Rows { domains, valid, len }
    }
}
