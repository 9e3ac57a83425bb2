//! Optimizer, schedule and the training loop.

mod adam;
mod schedule;
mod trainer;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use schedule::lr_schedule;
pub use trainer::{
    argmax, example_batch, metric_header, routing_label, teacher_forced_accuracy, MetricRow, TrainConfig, TrainReport,
    Trainer,
};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::{generate_corpus, generate_splits, DomainTask, Example, SyntheticConfig, TokenRange, TrainingStream};
    use crate::domain::{DomainId, DomainInfo, DomainKind, DomainSchema, FIRST_TAG};
    use crate::model::{Checkpoint, Conditioning, FfnVariant, Model, ModelConfig};
    use crate::numerics::{ParamStore, Tape, Tensor};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(4000, 1e-3, 4000), 1e-3);
        assert_eq!(lr_schedule(0, 1e-3, 4000), 0.0);
        assert!((lr_schedule(16000, 1e-3, 4000) - 5e-4).abs() < 1e-15);
        assert!((lr_schedule(1000, 1e-3, 4000) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut x = vec![1.0, -2.0];
        let mut st = Moments::zeros(2);
        adam_step(&mut x, &[0.0, 0.0], &mut st, 1, 0.1, &cfg).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
        let mut st = Moments {
            m: vec![0.5, 0.0],
            v: vec![0.25, 0.0],
        };
        let mut y = vec![0.0, 0.0];
        adam_step(&mut y, &[], &mut st, 3, 0.0, &cfg).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!((st.m[0] - 0.45).abs() < 1e-15 && (st.v[0] - 0.245).abs() < 1e-15);
    }

    #[test]
    fn adam_scalar_hand_update() {
        // m = 0.05, v = 0.005; bias-corrected 0.5 and 0.25
        let mut x = vec![1.0];
        let mut st = Moments::zeros(1);
        adam_step(&mut x, &[0.5], &mut st, 1, 0.1, &AdamConfig::default()).unwrap();
        assert!((st.m[0] - 0.05).abs() < 1e-15 && (st.v[0] - 0.005).abs() < 1e-15);
        assert!((x[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-9))).abs() < 1e-15);
        assert!(matches!(
            adam_step(&mut x, &[1.0, 2.0], &mut st, 2, 0.1, &AdamConfig::default()),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn adam_updates_groups_independently() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::vector(vec![3.0]));
        store.accumulate(vec![(a, vec![1.0, -1.0])]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.01).unwrap();
        assert_eq!(store.get(b).value.data(), &[3.0]);
        assert_eq!(adam.moments[1], Moments::zeros(1));
        let va = store.get(a).value.data();
        assert!((va[0] - 0.99).abs() < 1e-8 && (va[1] - 2.01).abs() < 1e-8);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![100.0, 0.0, 0.0], vec![0.0, 0.0, 100.0]]).unwrap(), false);
        let ce = tape.cross_entropy(logits, &[0, 2], &[0.5, 0.5], 0.0).unwrap();
        assert!(tape.value(ce).item() < 1e-9);
    }

    fn tiny_setup(variant: FfnVariant) -> (SyntheticConfig, DomainSchema, ModelConfig) {
        let data = SyntheticConfig {
            seen_domains: 2,
            range_size: 4,
            shared_size: 4,
            generic_coverage: 1,
            train_size: 60,
            generic_train_size: 60,
            test_size: 10,
            valid_size: 10,
            min_len: 2,
            max_len: 5,
            ..SyntheticConfig::default()
        };
        let schema = data.build_schema().unwrap();
        let model = ModelConfig {
            d_model: 8,
            d_ff: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_variant: variant,
            experts: 3,
            top_k: 2,
            conditioning: if variant == FfnVariant::Smoe {
                Conditioning::DomainAwareGate
            } else {
                Conditioning::None
            },
            balance_coef: 0.01,
            seed: 3,
            ..ModelConfig::default()
        };
        (data, schema, model)
    }

    fn trainer<'a>(data: &SyntheticConfig, schema: &'a DomainSchema, mc: &ModelConfig, tc: TrainConfig) -> Trainer<'a> {
        let splits = generate_splits(data, schema).unwrap();
        let probs = schema.sampling_probs();
        let stream = TrainingStream::new(splits.train, &probs, 0.3, tc.seed).unwrap();
        let model = Model::build(mc, schema).unwrap();
        Trainer::new(model, schema, stream, tc).unwrap().with_validation(splits.valid)
    }

    fn small_tc() -> TrainConfig {
        TrainConfig {
            max_steps: 6,
            batch_tokens: 40,
            warmup_steps: 3,
            lr_max: 3e-3,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    fn bits(ts: &[Tensor]) -> Vec<u64> {
        ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn zero_steps_checkpoint_is_initialization() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Smoe);
        let mut t = trainer(&data, &schema, &mc, TrainConfig { max_steps: 0, ..small_tc() });
        let report = t.run().unwrap();
        assert!(report.losses.is_empty() && report.metrics.is_empty());
        assert_eq!(report.checkpoint.step, 0);
        let init = Model::build(&mc, &schema).unwrap();
        for b in init.param_blobs() {
            assert_eq!(report.checkpoint.blob(&b.name), Some(&b));
        }
    }

    #[test]
    fn same_seed_gives_identical_metric_logs() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Smoe);
        let a = trainer(&data, &schema, &mc, small_tc()).run().unwrap();
        let b = trainer(&data, &schema, &mc, small_tc()).run().unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.metrics[0].accuracy.len(), schema.len());
        let header = metric_header(&schema);
        assert_eq!(header, "step,lr,loss,acc_generic,acc_d1,acc_d2,acc_d2-related");
        assert_eq!(a.metrics[0].to_csv().split(',').count(), header.split(',').count());
    }

    #[test]
    fn resume_is_bit_exact() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Smoe);
        let mut straight = trainer(&data, &schema, &mc, small_tc());
        straight.run().unwrap();

        let mut first = trainer(&data, &schema, &mc, TrainConfig { max_steps: 3, ..small_tc() });
        let ck = first.run().unwrap().checkpoint;
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut second = trainer(&data, &schema, &mc, small_tc());
        second.resume(&ck).unwrap();
        assert_eq!(second.step(), 3);
        second.run().unwrap();
        assert_eq!(bits(&straight.param_values()), bits(&second.param_values()));
        assert_eq!(straight.checkpoint(), second.checkpoint());
    }

    #[test]
    fn resume_rejects_missing_optimizer_state() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Dense);
        let mut t = trainer(&data, &schema, &mc, small_tc());
        let mut ck = t.checkpoint();
        ck.blobs.retain(|b| !b.name.starts_with("adam.v."));
        assert!(matches!(t.resume(&ck), Err(crate::Error::Compat(_))));
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Adapters);
        let mc = ModelConfig {
            conditioning: Conditioning::Tags,
            ..mc
        };
        let mut t = trainer(&data, &schema, &mc, small_tc());
        let micro = {
            let mut d = t.draw_batch();
            d.extend(t.draw_batch());
            d.extend(t.draw_batch());
            d
        };
        let whole = vec![micro.iter().flatten().cloned().collect::<Vec<Example>>()];
        let la = t.accumulate(&micro).unwrap();
        let ga: Vec<Vec<f64>> = t.model.store.iter().map(|(_, p)| p.grad.clone()).collect();
        let lb = t.accumulate(&whole).unwrap();
        assert!((la - lb).abs() <= 1e-10 * lb.abs());
        // key biases have an exactly-zero true gradient, so compare against
        // the largest gradient entry rather than per tensor
        let scale = ga.iter().flatten().map(|g| g.abs()).fold(0.0, f64::max);
        for ((_, p), a) in t.model.store.iter().zip(&ga) {
            for (x, y) in p.grad.iter().zip(a) {
                assert!((x - y).abs() <= 1e-10 * scale, "{}", p.name);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (data, schema, mc) = tiny_setup(FfnVariant::Dense);
        let mut t = trainer(&data, &schema, &mc, small_tc());
        let id = t.model.store.id("output").unwrap();
        t.model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        match t.train_step() {
            Err(crate::Error::Numeric(m)) => assert!(m.contains("step 1") && m.contains("digest"), "{m}"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn copy_task_loss_decreases() {
        let range = TokenRange { start: 4, end: 12 };
        let shared = TokenRange { start: 12, end: 14 };
        let map: BTreeMap<_, _> = range.tokens().chain(shared.tokens()).map(|t| (t, t)).collect();
        let task = DomainTask::new(vec![range], shared, map, 2, 6).unwrap();
        let schema = DomainSchema::new(
            vec![DomainInfo {
                name: "copy".into(),
                kind: DomainKind::Generic,
                tag: Some(FIRST_TAG),
                sampling_prob: 1.0,
                task: Some(task.clone()),
            }],
            14,
        )
        .unwrap();
        let corpus = generate_corpus(&task, DomainId(0), 200, 5).unwrap();
        let stream = TrainingStream::new(vec![corpus], &[1.0], 0.0, 9).unwrap();
        let mc = ModelConfig {
            d_model: 16,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            seed: 4,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            max_steps: 200,
            batch_tokens: 64,
            warmup_steps: 20,
            lr_max: 3e-3,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let model = Model::build(&mc, &schema).unwrap();
        let report = Trainer::new(model, &schema, stream, tc).unwrap().run().unwrap();
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.75 * head, "{head} -> {tail}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let tc = TrainConfig {
            warmup_steps: 0,
            lr_max: 0.0,
            ..TrainConfig::default()
        };
        match tc.validate() {
            Err(crate::Error::Config(m)) => assert!(m.contains("warmup") && m.contains("lr_max")),
            _ => panic!(),
        }
    }
}
