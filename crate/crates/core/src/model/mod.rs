//! Encoder-decoder assembly: dense, width-scaled, sparse and adapter
//! variants with domain-tag and gate conditioning, plus checkpoints.

mod checkpoint;
mod config;
mod transformer;

pub use checkpoint::{Blob, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Conditioning, FfnVariant, ModelConfig};
pub use transformer::{
    prepend_domain_tag, Batch, DecoderLayer, EncoderLayer, FfnBlock, ForwardOutput, Mode, Model,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StreamState;
    use crate::domain::{DomainId, DomainSchema, Token, BOS, EOS, FIRST_TAG, PAD};
    use crate::numerics::{Tape, Tensor};

    fn schema(labeled: usize, vocab: usize) -> DomainSchema {
        let names: Vec<String> = (0..labeled).map(|i| if i == 0 { "generic".into() } else { format!("d{i}") }).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        DomainSchema::labels_only(&refs, vocab).unwrap()
    }

    fn tiny(variant: FfnVariant, conditioning: Conditioning) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 12,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            vocab_size: 0,
            ffn_variant: variant,
            experts: 3,
            top_k: 2,
            adapter_dim: 4,
            conditioning,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn logits(model: &Model, batch: &Batch) -> Tensor {
        let mut tape = Tape::inference(&model.store);
        let out = model.forward(&mut tape, batch, Mode::Infer).unwrap();
        tape.value(out.logits).clone()
    }

    fn count_blocks(model: &Model) -> (usize, usize, usize) {
        let blocks = model.encoder.iter().map(|l| &l.ffn).chain(model.decoder.iter().map(|l| &l.ffn));
        let mut c = (0, 0, 0);
        for b in blocks {
            match b {
                FfnBlock::Dense(_) => c.0 += 1,
                FfnBlock::Sparse(_) => c.1 += 1,
                FfnBlock::Adapted(..) => c.2 += 1,
            }
        }
        c
    }

    #[test]
    fn placement_of_sparse_and_adapter_sites() {
        let s = schema(6, 40);
        let deep = |v| ModelConfig {
            encoder_layers: 6,
            decoder_layers: 6,
            experts: 10,
            ..tiny(v, Conditioning::None)
        };
        let dense = Model::build_zeroed(&deep(FfnVariant::Dense), &s).unwrap();
        assert_eq!(count_blocks(&dense), (12, 0, 0));
        let smoe = Model::build_zeroed(&deep(FfnVariant::Smoe), &s).unwrap();
        assert_eq!(count_blocks(&smoe), (6, 6, 0));
        assert_eq!(smoe.smoe_stacks().iter().filter(|s| **s == crate::moe::Stack::Encoder).count(), 3);
        for (i, l) in smoe.encoder.iter().enumerate() {
            assert_eq!(matches!(l.ffn, FfnBlock::Sparse(_)), (i + 1) % 2 == 0);
        }
        let adapters = Model::build_zeroed(&deep(FfnVariant::Adapters), &s).unwrap();
        assert_eq!(count_blocks(&adapters), (6, 0, 6));
        for l in &adapters.decoder {
            if let FfnBlock::Adapted(_, bank) = &l.ffn {
                assert_eq!(bank.len(), 6);
            }
        }
    }

    #[test]
    fn inconsistent_config_lists_every_violation() {
        let cfg = ModelConfig {
            heads: 3,
            top_k: 5,
            experts: 4,
            ffn_variant: FfnVariant::Smoe,
            width_multiplier: 2.0,
            ..tiny(FfnVariant::Smoe, Conditioning::None)
        };
        let msg = match Model::build(&cfg, &schema(2, 30)) {
            Err(crate::Error::Config(m)) => m,
            _ => panic!("expected config error"),
        };
        assert!(msg.contains("heads") && msg.contains("top_k") && msg.contains("width_multiplier"), "{msg}");
        let cfg = tiny(FfnVariant::Dense, Conditioning::DomainAwareGate);
        assert!(matches!(Model::build(&cfg, &schema(2, 30)), Err(crate::Error::Config(_))));
    }

    #[test]
    fn domain_tag_insertion() {
        let s = schema(3, 30);
        let t = FIRST_TAG + 3 + 5;
        assert_eq!(prepend_domain_tag(&[t, t + 1, EOS], DomainId(2), &s).unwrap(), vec![FIRST_TAG + 2, t, t + 1, EOS]);
        assert_eq!(prepend_domain_tag(&[EOS], DomainId::GENERIC, &s).unwrap(), vec![FIRST_TAG, EOS]);
        let once = prepend_domain_tag(&[t, EOS], DomainId(1), &s).unwrap();
        assert!(matches!(prepend_domain_tag(&once, DomainId(1), &s), Err(crate::Error::Contract(_))));
        assert!(matches!(prepend_domain_tag(&[t, EOS], DomainId(9), &s), Err(crate::Error::Lookup { .. })));
    }

    #[test]
    fn batch_shifts_targets_right() {
        let b = Batch::new(&[vec![10, 11, EOS], vec![12, EOS]], &[vec![20, EOS], vec![21, 22, EOS]], &[DomainId(0); 2]).unwrap();
        assert_eq!(b.src, vec![10, 11, EOS, 12, EOS, PAD]);
        assert_eq!(b.tgt_in, vec![BOS, 20, PAD, BOS, 21, 22]);
        assert_eq!(b.tgt_out, vec![20, EOS, PAD, 21, 22, EOS]);
        assert_eq!(b.target_tokens(), 5);
    }

    #[test]
    fn empty_batch_gives_empty_outputs() {
        let s = schema(2, 30);
        let model = Model::build(&tiny(FfnVariant::Smoe, Conditioning::None), &s).unwrap();
        let b = Batch::new(&[], &[], &[]).unwrap();
        let mut tape = Tape::inference(&model.store);
        let out = model.forward(&mut tape, &b, Mode::Infer).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[0, 30]);
        assert!(out.trace.unwrap().is_empty());
    }

    #[test]
    fn rows_do_not_leak_across_the_batch() {
        let s = schema(2, 30);
        for v in [FfnVariant::Dense, FfnVariant::Smoe, FfnVariant::Adapters] {
            let model = Model::build(&tiny(v, Conditioning::None), &s).unwrap();
            let src = vec![9, 10, 11, EOS];
            let tgt = vec![12, 13, EOS];
            let b = Batch::new(&[src.clone(), src], &[tgt.clone(), tgt], &[DomainId(1); 2]).unwrap();
            let l = logits(&model, &b);
            assert_eq!(&l.data()[..90], &l.data()[90..], "{v:?}");
        }
    }

    #[test]
    fn out_of_range_token_names_coordinates() {
        let s = schema(2, 30);
        let model = Model::build(&tiny(FfnVariant::Dense, Conditioning::None), &s).unwrap();
        let b = Batch::new(&[vec![9, EOS], vec![9, 31, EOS]], &[vec![EOS], vec![EOS]], &[DomainId(0); 2]).unwrap();
        let mut tape = Tape::inference(&model.store);
        match model.forward(&mut tape, &b, Mode::Infer) {
            Err(crate::Error::Data(m)) => assert!(m.contains("batch row 1, position 1"), "{m}"),
            _ => panic!("expected data error"),
        }
    }

    #[test]
    fn later_target_tokens_never_change_earlier_logits() {
        let s = schema(3, 30);
        for v in [FfnVariant::Dense, FfnVariant::Smoe] {
            let model = Model::build(&tiny(v, Conditioning::None), &s).unwrap();
            let src = vec![vec![9, 10, 11, EOS]];
            let a = Batch::new(&src, &[vec![12, 13, 14, 15, EOS]], &[DomainId(1)]).unwrap();
            let b = Batch::new(&src, &[vec![12, 13, 20, 21, EOS]], &[DomainId(1)]).unwrap();
            let (la, lb) = (logits(&model, &a), logits(&model, &b));
            // target position 2 changed: logits at positions 0..=2 are identical
            assert_eq!(&la.data()[..3 * 30], &lb.data()[..3 * 30], "{v:?}");
            assert_ne!(&la.data()[3 * 30..], &lb.data()[3 * 30..]);
        }
    }

    #[test]
    fn padding_is_neutral() {
        let s = schema(3, 30);
        for v in [FfnVariant::Dense, FfnVariant::Smoe, FfnVariant::Adapters] {
            let model = Model::build(&tiny(v, Conditioning::Tags), &s).unwrap();
            let short = Batch::new(&[vec![9, 10, EOS]], &[vec![12, EOS]], &[DomainId(2)]).unwrap();
            let padded = Batch::new(
                &[vec![9, 10, EOS], vec![9, 10, 11, 12, 13, EOS]],
                &[vec![12, EOS], vec![12, 13, 14, 15, EOS]],
                &[DomainId(2), DomainId(1)],
            )
            .unwrap();
            let (a, b) = (logits(&model, &short), logits(&model, &padded));
            for t in 0..2 {
                for j in 0..30 {
                    assert!((a.get2(t, j) - b.get2(t, j)).abs() < 1e-9, "{v:?}");
                }
            }
        }
    }

    #[test]
    fn unconditioned_model_ignores_domain_ids() {
        let s = schema(3, 30);
        let model = Model::build(&tiny(FfnVariant::Smoe, Conditioning::None), &s).unwrap();
        let mk = |d| Batch::new(&[vec![9, 10, EOS]], &[vec![12, EOS]], &[DomainId(d)]).unwrap();
        assert_eq!(logits(&model, &mk(0)), logits(&model, &mk(2)));
        let aware = Model::build(&tiny(FfnVariant::Smoe, Conditioning::DomainAwareGate), &s).unwrap();
        assert_ne!(logits(&aware, &mk(0)), logits(&aware, &mk(2)));
    }

    #[test]
    fn mixture_of_identical_experts_equals_dense_model() {
        let s = schema(2, 30);
        let dense = Model::build(&tiny(FfnVariant::Dense, Conditioning::None), &s).unwrap();
        let cfg = ModelConfig {
            top_k: 3,
            ..tiny(FfnVariant::Smoe, Conditioning::None)
        };
        let mut smoe = Model::build(&cfg, &s).unwrap();
        let dense_params: Vec<(String, Tensor)> = dense.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (name, value) in dense_params {
            let targets: Vec<String> = if smoe.store.id(&name).is_ok() {
                vec![name.clone()]
            } else {
                (0..3).map(|e| name.replace(".ffn.", &format!(".expert{e}."))).collect()
            };
            for t in targets {
                let id = smoe.store.id(&t).unwrap();
                smoe.store.get_mut(id).value = value.clone();
            }
        }
        let b = Batch::new(&[vec![9, 10, 11, EOS], vec![12, EOS]], &[vec![13, 14, EOS], vec![EOS]], &[DomainId(0); 2]).unwrap();
        let (a, c) = (logits(&dense, &b), logits(&smoe, &b));
        // padded target rows bypass the sparse layer, so only real positions compare
        for (r, &tok) in b.tgt_out.iter().enumerate() {
            if tok == PAD {
                continue;
            }
            for j in 0..30 {
                assert!((a.get2(r, j) - c.get2(r, j)).abs() < 1e-12);
            }
        }
    }

    // Plain-arithmetic reference for a 1+1-layer dense model on a single
    // source token and a single target step.
    #[test]
    fn single_token_matches_hand_composition() {
        let s = schema(2, 12);
        let cfg = ModelConfig {
            d_model: 4,
            d_ff: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ..tiny(FfnVariant::Dense, Conditioning::None)
        };
        let model = Model::build(&cfg, &s).unwrap();
        let p = |n: &str| model.param(n).unwrap().clone();
        let d = 4;
        let vecmat = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get2(i, j)).sum()).collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let ln = |x: &[f64], pre: &str| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            let (g, b) = (p(&format!("{pre}.gamma")), p(&format!("{pre}.beta")));
            (0..d).map(|i| (x[i] - m) / (v + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect()
        };
        // attention over a single key returns the projected value
        let attend_one = |kv: &[f64], pre: &str| -> Vec<f64> {
            let v = add(&vecmat(kv, &p(&format!("{pre}.wv"))), p(&format!("{pre}.bv")).data());
            add(&vecmat(&v, &p(&format!("{pre}.wo"))), p(&format!("{pre}.bo")).data())
        };
        let ffn = |x: &[f64], pre: &str| -> Vec<f64> {
            let h: Vec<f64> = add(&vecmat(x, &p(&format!("{pre}.w1"))), p(&format!("{pre}.b1")).data()).into_iter().map(|v| v.max(0.0)).collect();
            add(&vecmat(&h, &p(&format!("{pre}.w2"))), p(&format!("{pre}.b2")).data())
        };
        let embed = |tok: usize| -> Vec<f64> {
            // position 0: sin(0) = 0 on even columns, cos(0) = 1 on odd ones
            (0..d).map(|i| p("embed").get2(tok, i) * 2.0 + (i % 2) as f64).collect()
        };
        let src: Token = 8;
        let mut x = embed(src as usize);
        x = add(&x, &attend_one(&ln(&x, "enc1.norm_attn"), "enc1.self_attn"));
        x = add(&x, &ffn(&ln(&x, "enc1.norm_ffn"), "enc1.ffn"));
        let enc = ln(&x, "enc.norm");
        let mut y = embed(BOS as usize);
        y = add(&y, &attend_one(&ln(&y, "dec1.norm_self"), "dec1.self_attn"));
        let _ = ln(&y, "dec1.norm_cross");
        y = add(&y, &attend_one(&enc, "dec1.cross_attn"));
        y = add(&y, &ffn(&ln(&y, "dec1.norm_ffn"), "dec1.ffn"));
        let expect = vecmat(&ln(&y, "dec.norm"), &p("output"));

        let b = Batch::new(&[vec![src]], &[vec![EOS]], &[DomainId(0)]).unwrap();
        let got = logits(&model, &b);
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn trace_records_non_pad_tokens_in_order() {
        let s = schema(3, 30);
        let model = Model::build(&tiny(FfnVariant::Smoe, Conditioning::DomainSpecializedGate), &s).unwrap();
        let b = Batch::new(&[vec![9, 10, EOS], vec![9, EOS]], &[vec![12, EOS], vec![13, 14, EOS]], &[DomainId(1), DomainId(2)]).unwrap();
        let mut tape = Tape::inference(&model.store);
        let out = model.forward(&mut tape, &b, Mode::Infer).unwrap();
        let trace = out.trace.unwrap();
        // encoder layer: 3 + 2 source tokens; decoder layer: 2 + 3 target tokens
        assert_eq!(trace.len(), 10);
        assert_eq!(out.expert_evaluations, 10 * 2);
        assert!(trace.entries.windows(2).all(|w| (w[0].layer, w[0].example, w[0].position) < (w[1].layer, w[1].example, w[1].position)));
        assert!(trace.entries.iter().all(|e| e.domain == DomainId(e.example + 1)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = schema(3, 30);
        let cfg = tiny(FfnVariant::Smoe, Conditioning::DomainAwareGate);
        let model = Model::build(&cfg, &s).unwrap();
        let ck = Checkpoint {
            config: vec![("d_model".into(), "8".into())],
            schema_hash: model.schema_hash.clone(),
            step: 42,
            stream: StreamState { seed: 5, word_pos: 1 << 70 },
            blobs: model.param_blobs(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = Model::build(&ModelConfig { seed: 99, ..cfg.clone() }, &s).unwrap();
        fresh.load_params(&back).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(fresh.store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        let other = Model::build(&cfg, &schema(4, 30)).unwrap();
        let mut other = other;
        assert!(matches!(other.load_params(&back), Err(crate::Error::Compat(_))));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
