//! Synthetic multi-domain corpora, proportional sampling, deduplication and
//! domain randomization.

mod corpus;
mod stream;
mod synthetic;
mod task;

pub use corpus::{dedup_splits, format_corpus, parse_corpus, read_corpus, write_atomic, write_corpus, CORPUS_HEADER};
pub use stream::{domain_randomize, Mixture, StreamState, TrainingStream};
pub use synthetic::{generate_splits, SyntheticConfig, SyntheticData};
pub use task::{generate_corpus, shifted_map, shuffled_map, DomainTask, Example, TokenRange};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::domain::{DomainId, DomainKind, EOS};

    fn identity_task() -> DomainTask {
        let r = TokenRange::new(10, 14);
        let s = TokenRange::new(14, 16);
        let map: BTreeMap<_, _> = (10..16).map(|t| (t, t)).collect();
        DomainTask::new(vec![r], s, map, 2, 5).unwrap()
    }

    #[test]
    fn empty_corpus_and_identity_task() {
        let task = identity_task();
        assert!(generate_corpus(&task, DomainId(1), 0, 1).unwrap().is_empty());
        for e in generate_corpus(&task, DomainId(1), 50, 1).unwrap() {
            assert_eq!(e.source, e.target);
            assert_eq!(*e.source.last().unwrap(), EOS);
            assert!((3..=6).contains(&e.source.len()));
        }
    }

    #[test]
    fn corpus_is_deterministic_in_seed() {
        let task = identity_task();
        let a = generate_corpus(&task, DomainId(1), 5, 9).unwrap();
        assert_eq!(a, generate_corpus(&task, DomainId(1), 5, 9).unwrap());
        assert_ne!(a, generate_corpus(&task, DomainId(1), 5, 10).unwrap());
    }

    #[test]
    fn empty_range_is_config_error() {
        let err = DomainTask::new(vec![TokenRange::new(5, 5)], TokenRange::new(5, 6), BTreeMap::new(), 1, 2).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn non_bijective_map_rejected() {
        let map: BTreeMap<_, _> = [(10, 11), (11, 11)].into_iter().collect();
        assert!(DomainTask::new(vec![TokenRange::new(10, 12)], TokenRange::new(12, 12), map, 1, 2).is_err());
    }

    #[test]
    fn synthetic_schema_layout() {
        let cfg = SyntheticConfig::default();
        let schema = cfg.build_schema().unwrap();
        assert_eq!(schema.len(), 6);
        assert_eq!(schema.num_labeled(), 5);
        assert_eq!(schema.info(DomainId(5)).unwrap().kind, DomainKind::Unseen);
        let shared = cfg.shared_range();
        // every seen domain disagrees with every other, and with identity, on every shared token
        for t in shared.tokens() {
            let mut images: Vec<_> = (0..5).map(|d| schema.task(DomainId(d)).unwrap().apply(t).unwrap()).collect();
            images.sort_unstable();
            images.dedup();
            assert_eq!(images.len(), 5);
        }
        // seen ranges are pairwise disjoint and disjoint from the shared range
        let mut all: Vec<_> = shared.tokens().collect();
        for i in 1..=4 {
            all.extend(cfg.domain_range(i).tokens());
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(cfg.vocab_size(), schema.vocab_size());
        // the unseen-related domain shares the last seen domain's substitution on its range
        let rel = schema.task(DomainId(5)).unwrap();
        let d4 = schema.task(DomainId(4)).unwrap();
        for t in cfg.unseen_range().tokens() {
            assert_eq!(rel.apply(t), d4.apply(t));
        }
        assert!(!schema.task(DomainId::GENERIC).unwrap().in_ranges(cfg.unseen_range().start));
    }

    #[test]
    fn targets_invert_to_sources() {
        let cfg = SyntheticConfig::default();
        let schema = cfg.build_schema().unwrap();
        for d in schema.ids() {
            let task = schema.task(d).unwrap();
            let inv = task.inverse();
            for e in generate_corpus(task, d, 100, 3).unwrap() {
                let back: Vec<_> = e.target.iter().map(|t| if *t == EOS { EOS } else { inv[t] }).collect();
                assert_eq!(back, e.source);
            }
        }
    }

    #[test]
    fn generic_examples_use_one_covered_range() {
        let cfg = SyntheticConfig::default();
        let schema = cfg.build_schema().unwrap();
        let task = schema.task(DomainId::GENERIC).unwrap();
        for e in generate_corpus(task, DomainId::GENERIC, 200, 4).unwrap() {
            let hits: Vec<bool> = (1..=2).map(|i| e.source.iter().any(|&t| cfg.domain_range(i).contains(t))).collect();
            assert!(!(hits[0] && hits[1]));
            for &t in &e.source {
                if cfg.shared_range().contains(t) {
                    assert_eq!(task.apply(t), Some(t));
                }
            }
        }
    }

    fn labeled(domain: usize, n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                source: vec![10 + i as u32, EOS],
                target: vec![10 + i as u32, EOS],
                true_domain: DomainId(domain),
                assigned_domain: DomainId(domain),
            })
            .collect()
    }

    #[test]
    fn stream_generic_share_matches_scheme() {
        let sizes = [4000, 1000, 3000, 2000];
        let kinds = [DomainKind::Generic, DomainKind::Seen, DomainKind::Seen, DomainKind::Seen];
        let probs = Mixture::Balanced.probabilities(&kinds, &sizes).unwrap();
        assert_eq!(probs, vec![0.5, 1.0 / 12.0, 0.25, 1.0 / 6.0]);
        let corpora = sizes.iter().enumerate().map(|(d, &n)| labeled(d, n / 100)).collect();
        let mut stream = TrainingStream::new(corpora, &probs, 0.0, 11).unwrap();
        let n = 100_000;
        let generic = (0..n).filter(|_| stream.next_example().true_domain.is_generic()).count();
        let share = generic as f64 / n as f64;
        assert!((0.49..=0.51).contains(&share), "{share}");
    }

    #[test]
    fn stream_multinomial_shares_within_three_sigma() {
        let probs = [0.5, 0.3, 0.2];
        let corpora = (0..3).map(|d| labeled(d, 7)).collect();
        let mut stream = TrainingStream::new(corpora, &probs, 0.0, 5).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[stream.next_example().true_domain.0] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn stream_single_domain_and_errors() {
        let mut stream = TrainingStream::new(vec![labeled(0, 3)], &[1.0], 0.5, 1).unwrap();
        assert!((0..100).all(|_| stream.next_example().true_domain == DomainId(0)));
        assert!(matches!(TrainingStream::new(vec![vec![], labeled(1, 2)], &[0.5, 0.5], 0.0, 1), Err(crate::Error::Config(_))));
        assert!(matches!(TrainingStream::new(vec![labeled(0, 2)], &[0.7], 0.0, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn stream_resumes_from_state() {
        let corpora: Vec<_> = (0..3).map(|d| labeled(d, 9)).collect();
        let mut a = TrainingStream::new(corpora.clone(), &[0.5, 0.25, 0.25], 0.5, 2).unwrap();
        for _ in 0..37 {
            a.next_example();
        }
        let state = a.state();
        let expected: Vec<_> = (0..20).map(|_| a.next_example()).collect();
        let mut b = TrainingStream::new(corpora, &[0.5, 0.25, 0.25], 0.5, 2).unwrap();
        b.restore(state);
        let got: Vec<_> = (0..20).map(|_| b.next_example()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn randomization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = labeled(2, 1).remove(0);
        assert!((0..1000).all(|_| domain_randomize(e.clone(), 0.0, &mut rng).assigned_domain == DomainId(2)));
        assert!((0..1000).all(|_| domain_randomize(e.clone(), 1.0, &mut rng).assigned_domain.is_generic()));
        let n = 10_000;
        let relabeled = (0..n)
            .filter(|_| {
                let out = domain_randomize(e.clone(), 0.5, &mut rng);
                assert_eq!((&out.source, &out.target), (&e.source, &e.target));
                out.assigned_domain.is_generic()
            })
            .count();
        let frac = relabeled as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        let g = labeled(0, 1).remove(0);
        assert!((0..1000).all(|_| domain_randomize(g.clone(), 1.0, &mut rng) == g));
    }

    #[test]
    fn dedup_cases() {
        let train = labeled(1, 1000);
        let other = labeled(2, 0);
        assert_eq!(dedup_splits(&train, &other), train);
        assert!(dedup_splits(&train, &train).is_empty());
        let planted = vec![train[417].clone()];
        let kept = dedup_splits(&train, &planted);
        assert_eq!(kept.len(), 999);
        assert!(!kept.contains(&train[417]));
        assert_eq!(kept[417], train[418]);
    }

    #[test]
    fn corpus_text_round_trip() {
        let cfg = SyntheticConfig::default();
        let schema = cfg.build_schema().unwrap();
        let mut ex = generate_corpus(schema.task(DomainId(3)).unwrap(), DomainId(3), 20, 1).unwrap();
        ex[4].assigned_domain = DomainId::GENERIC;
        let text = format_corpus(&schema, &ex);
        assert!(text.starts_with(CORPUS_HEADER));
        assert_eq!(parse_corpus(&schema, &text).unwrap(), ex);
        let err = parse_corpus(&schema, "generic\tgeneric\t1 99999\t2\n").unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }

    #[test]
    fn mixtures() {
        let kinds = [DomainKind::Generic, DomainKind::Seen, DomainKind::Seen, DomainKind::Unseen];
        let sizes = [600, 300, 100, 0];
        assert_eq!(Mixture::Natural.probabilities(&kinds, &sizes).unwrap(), vec![0.6, 0.3, 0.1, 0.0]);
        assert_eq!(Mixture::SeenOnly.probabilities(&kinds, &sizes).unwrap(), vec![0.0, 0.75, 0.25, 0.0]);
        assert_eq!(Mixture::GenericOnly.probabilities(&kinds, &sizes).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(Mixture::parse("seen-only").unwrap(), Mixture::SeenOnly);
    }
}
