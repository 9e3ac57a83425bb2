//! Decoding, scoring, wrong-label robustness and gate statistics.

mod activity;
mod decode;
mod matrix;
mod report;
mod robustness;
mod score;

pub use activity::{
    expert_similarity, label_sweep_similarity, mean_off_diagonal, similarity_matrix, top1_activity, ActivityProfile,
};
pub use decode::{decode_examples, greedy_decode, greedy_search, greedy_search_limits, Decoded, ModelScorer, StepLogits};
pub use matrix::LabeledMatrix;
pub use report::{evaluate_all, evaluate_domain, score_hypotheses, scores_to_csv, DomainScores, SCORES_CSV_HEADER};
pub use robustness::{wrong_label_matrix, Metric, RobustnessMatrix};
pub use score::{
    bleu_stats, content, corpus_bleu, example_bleu, masked_accuracy, sequence_accuracy, token_accuracy, BleuStats,
    Tally,
};

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::data::{generate_splits, Example, SyntheticConfig};
    use crate::domain::{DomainId, DomainSchema, Token, EOS};
    use crate::model::{Conditioning, FfnVariant, Model, ModelConfig};
    use crate::moe::{GateTrace, Stack, TraceEntry};

    struct Table(HashMap<Vec<Token>, Vec<f64>>);

    impl StepLogits for Table {
        fn next_logits(&mut self, prefixes: &[Vec<Token>]) -> crate::Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| self.0[p].clone()).collect())
        }
    }

    struct AlwaysEos;

    impl StepLogits for AlwaysEos {
        fn next_logits(&mut self, prefixes: &[Vec<Token>]) -> crate::Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|_| vec![0.0, 0.0, 9.0, 1.0]).collect())
        }
    }

    #[test]
    fn greedy_search_walks_a_logit_table() {
        let table = Table(HashMap::from([
            (vec![], vec![0.0, 0.0, 0.1, 0.0, 2.0, 1.0]),
            // tie between 4 and 5 goes to 4
            (vec![4], vec![0.0, 0.0, 0.5, 0.0, 3.0, 3.0]),
            (vec![4, 4], vec![0.0, 0.0, 7.0, 0.0, 3.0, 6.9]),
        ]));
        let mut t = table;
        assert_eq!(greedy_search(&mut t, 1, 10).unwrap(), vec![vec![4, 4, EOS]]);
        assert_eq!(greedy_search(&mut t, 1, 1).unwrap(), vec![vec![4]]);
        assert!(matches!(greedy_search(&mut t, 1, 0), Err(crate::Error::Contract(_))));
        let out = greedy_search(&mut AlwaysEos, 3, 5).unwrap();
        assert!(out.iter().all(|o| o == &vec![EOS] && content(o).is_empty()));
    }

    fn small_data() -> (SyntheticConfig, DomainSchema) {
        let data = SyntheticConfig {
            seen_domains: 2,
            range_size: 4,
            shared_size: 4,
            generic_coverage: 1,
            train_size: 30,
            generic_train_size: 30,
            test_size: 12,
            valid_size: 5,
            min_len: 2,
            max_len: 6,
            ..SyntheticConfig::default()
        };
        let schema = data.build_schema().unwrap();
        (data, schema)
    }

    fn small_model(schema: &DomainSchema, conditioning: Conditioning, experts: usize, k: usize) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_variant: FfnVariant::Smoe,
            experts,
            top_k: k,
            conditioning,
            seed: 11,
            ..ModelConfig::default()
        };
        Model::build(&cfg, schema).unwrap()
    }

    #[test]
    fn batched_decoding_matches_single_decoding() {
        let (data, schema) = small_data();
        let splits = generate_splits(&data, &schema).unwrap();
        let model = small_model(&schema, Conditioning::Tags, 3, 2);
        let set = &splits.test[1];
        let batched = decode_examples(&model, &schema, set, None).unwrap();
        for (e, h) in set.iter().zip(&batched.hypotheses) {
            let single = greedy_decode(&model, &schema, &e.source, DomainId(1), e.source.len() + 2).unwrap();
            assert_eq!(&single, h);
            assert_eq!(&greedy_decode(&model, &schema, &e.source, DomainId(1), e.source.len() + 2).unwrap(), h);
        }
        let trace = batched.trace.unwrap();
        assert_eq!(trace.layers, vec![Stack::Encoder, Stack::Decoder]);
        let one = greedy_decode(&model, &schema, &set[0].source, DomainId(1), 1).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn bleu_examples() {
        let s = |x: &str| x.split_whitespace().map(String::from).collect::<Vec<_>>();
        let refs = vec![s("a b c d e"), s("x y z w")];
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
        let zero = corpus_bleu(&[s("p q r s t")], &[s("a b c d e")]).unwrap();
        assert!(zero < 1e-6);
        let hand = corpus_bleu(&[s("a b c")], &[s("a b c d")]).unwrap();
        assert!((hand - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12, "{hand}");
        assert!(matches!(corpus_bleu(&[s("a")], &[]), Err(crate::Error::Contract(_))));
        assert!(matches!(corpus_bleu::<String>(&[], &[]), Err(crate::Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn bleu_ignores_pair_order(
            pairs in prop::collection::vec(
                (prop::collection::vec(0u8..5, 0..8), prop::collection::vec(0u8..5, 1..8)),
                1..8,
            ),
            rot in 0usize..8,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut p = pairs.clone();
            let n = p.len();
            p.rotate_left(rot % n);
            p.reverse();
            let (h2, r2): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            prop_assert_eq!(corpus_bleu(&h, &r).unwrap(), corpus_bleu(&h2, &r2).unwrap());
        }
    }

    fn ex(source: Vec<Token>, target: Vec<Token>) -> Example {
        Example {
            source,
            target,
            true_domain: DomainId(1),
            assigned_domain: DomainId(1),
        }
    }

    #[test]
    fn token_accuracy_counts_reference_positions() {
        let examples = vec![ex(vec![5, 6, EOS], vec![7, 8, EOS]), ex(vec![5, EOS], vec![9, EOS])];
        let hyps = vec![vec![7, 3, EOS], vec![9]];
        assert_eq!(token_accuracy(&hyps, &examples).unwrap(), Tally { hits: 3, total: 5 });
        assert_eq!(sequence_accuracy(&hyps, &examples).unwrap().rate(), Some(0.0));
        let shared = masked_accuracy(&hyps, &examples, |e, p| e.source[p] == 6).unwrap();
        assert_eq!(shared, Tally { hits: 0, total: 1 });
    }

    fn entry(layer: usize, example: usize, first: usize) -> TraceEntry {
        TraceEntry {
            layer,
            example,
            position: 0,
            domain: DomainId(0),
            probs: vec![0.25; 4],
            experts: vec![first, (first + 1) % 4],
            weights: vec![0.5, 0.5],
        }
    }

    #[test]
    fn activity_counts_first_choices() {
        let mut trace = GateTrace::new(4, 2, vec![Stack::Encoder]);
        trace.entries = [0, 0, 1, 2].iter().enumerate().map(|(i, &f)| entry(0, i, f)).collect();
        assert_eq!(top1_activity(&trace).unwrap().values, vec![0.5, 0.25, 0.25, 0.0]);

        let mut two = GateTrace::new(4, 2, vec![Stack::Encoder, Stack::Decoder]);
        two.entries = (0..6).map(|i| entry(i % 2, i, 0)).collect();
        let p = top1_activity(&two).unwrap();
        assert_eq!(p.values, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.stack(Stack::Decoder).values, vec![1.0, 0.0, 0.0, 0.0]);

        let empty = GateTrace::new(4, 2, vec![Stack::Encoder]);
        assert!(matches!(top1_activity(&empty), Err(crate::Error::Contract(_))));
        let mut partial = GateTrace::new(4, 2, vec![Stack::Encoder, Stack::Decoder]);
        partial.entries = vec![entry(0, 0, 1)];
        assert!(matches!(top1_activity(&partial), Err(crate::Error::Contract(_))));
    }

    fn profile(values: Vec<f64>) -> ActivityProfile {
        ActivityProfile {
            experts: values.len(),
            layers: vec![Stack::Encoder],
            values,
        }
    }

    #[test]
    fn similarity_examples() {
        let a = profile(vec![1.0, 1.0, 0.0]);
        let b = profile(vec![1.0, 0.0, 1.0]);
        assert_eq!(expert_similarity(&a, &b).unwrap(), 0.5);
        assert_eq!(expert_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(expert_similarity(&profile(vec![1.0, 0.0]), &profile(vec![0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            expert_similarity(&a, &profile(vec![0.0; 3])),
            Err(crate::Error::Contract(_))
        ));
        let m = similarity_matrix(vec!["a".into(), "b".into(), "c".into()], &[a.clone(), b, a]).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert_eq!(m.to_csv().lines().next(), Some("row,a,b,c"));
        assert_eq!(m.to_long_csv().lines().nth(2), Some("a,b,0.5"));
    }

    #[test]
    fn label_sweep_of_unconditioned_model_is_all_ones() {
        let (data, schema) = small_data();
        let splits = generate_splits(&data, &schema).unwrap();
        let model = small_model(&schema, Conditioning::None, 3, 2);
        let labels: Vec<DomainId> = schema.labeled().collect();
        let m = label_sweep_similarity(&model, &schema, &splits.test[1], &labels).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert!(m.values.iter().flatten().all(|&v| v == 1.0));

        let aware = small_model(&schema, Conditioning::DomainAwareGate, 3, 2);
        let m = label_sweep_similarity(&aware, &schema, &splits.test[1], &labels).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn single_expert_activity_is_one_per_block() {
        let (data, schema) = small_data();
        let splits = generate_splits(&data, &schema).unwrap();
        let model = small_model(&schema, Conditioning::None, 1, 1);
        let trace = decode_examples(&model, &schema, &splits.test[0], None).unwrap().trace.unwrap();
        assert_eq!(top1_activity(&trace).unwrap().values, vec![1.0, 1.0]);
    }

    #[test]
    fn wrong_label_matrix_shape_and_contracts() {
        let (data, schema) = small_data();
        let splits = generate_splits(&data, &schema).unwrap();
        let labels: Vec<DomainId> = schema.labeled().collect();
        let sets: Vec<&[Example]> = labels.iter().map(|d| splits.test[d.0].as_slice()).collect();

        let none = small_model(&schema, Conditioning::None, 3, 2);
        assert!(matches!(
            wrong_label_matrix(&none, &schema, &sets, &labels, Metric::TokenAccuracy),
            Err(crate::Error::Contract(_))
        ));

        // tags whose embeddings are all zero cannot influence anything
        let mut oracle = small_model(&schema, Conditioning::Tags, 3, 2);
        let id = oracle.store.id("embed").unwrap();
        let d = oracle.config.d_model;
        for l in &labels {
            let tag = schema.tag(*l).unwrap() as usize;
            oracle.store.get_mut(id).value.data_mut()[tag * d..(tag + 1) * d].fill(0.0);
        }
        for metric in [Metric::TokenAccuracy, Metric::Bleu] {
            let r = wrong_label_matrix(&oracle, &schema, &sets, &labels, metric).unwrap();
            assert_eq!((r.matrix.rows.len(), r.matrix.cols.len()), (3, 3));
            for row in &r.matrix.values {
                assert!(row.iter().all(|&v| v == row[0]));
            }
            assert!(r.degradation().abs() < 1e-12);
        }
    }

    #[test]
    fn degradation_is_diagonal_minus_off_diagonal_mean() {
        let m = RobustnessMatrix {
            matrix: LabeledMatrix::new(
                vec!["a".into(), "b".into()],
                vec!["a".into(), "b".into()],
                vec![vec![1.0, 0.5], vec![0.25, 0.75]],
            )
            .unwrap(),
            metric: Metric::TokenAccuracy,
            model_id: "x".into(),
            seed: 0,
        };
        assert!((m.degradation() - 0.5).abs() < 1e-15);
        assert_eq!(Metric::parse("bleu").unwrap(), Metric::Bleu);
    }
}
