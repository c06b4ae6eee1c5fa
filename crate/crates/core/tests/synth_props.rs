use drift_lens::synth::{
    generate_corpus, mask_labels, prototypes, span_density, split_ab, ClassKind, Corpus,
    CorpusConfig, LabeledSequence, SplitConfig, Token,
};
use drift_lens::Error;
use proptest::prelude::*;

fn labels_of(corpus: &Corpus, class: &str) -> Vec<Vec<f32>> {
    corpus
        .sequences
        .iter()
        .flat_map(|s| &s.tokens)
        .filter(|t| t.label == class)
        .map(|t| t.vec.clone())
        .collect()
}

fn channel_means(rows: &[Vec<f32>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut sum = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            sum[k] += r[k] as f64;
        }
    }
    sum.iter().map(|s| s / rows.len() as f64).collect()
}

#[test]
fn class_shares_track_base_rates() {
    let config = CorpusConfig {
        sequences: 2000,
        seed: 17,
        ..Default::default()
    };
    let corpus = generate_corpus(&config).unwrap();
    let total = corpus.token_count() as f64;
    for (name, count) in corpus.label_counts() {
        let rate = config.class(&name).unwrap().base_rate;
        let share = count as f64 / total;
        assert!(
            (share - rate).abs() <= 0.15 * rate,
            "{name}: {share:.4} vs {rate}"
        );
    }
}

#[test]
fn channel_groups_carry_only_their_own_signal() {
    let mut config = CorpusConfig {
        sequences: 30_000,
        seed: 3,
        ..Default::default()
    };
    config.set_alpha("LOC", 0.0).unwrap();
    let corpus = generate_corpus(&config).unwrap();
    let ds = config.dim_semantic;

    let check = |class: &str, channels: std::ops::Range<usize>| {
        let rows = labels_of(&corpus, class);
        assert!(rows.len() >= 10_000, "{class}: only {} tokens", rows.len());
        // 4 sigma per channel keeps the family-wise false alarm rate over
        // all 64 checks near that of a single 3 sigma test
        let tol = 4.0 * config.noise_sigma / (rows.len() as f64).sqrt();
        let means = channel_means(&rows);
        for k in channels {
            assert!(
                means[k].abs() <= tol,
                "{class} channel {k}: {} > {tol}",
                means[k]
            );
        }
    };
    check("LOC", ds..config.dim());
    check("PER", ds..config.dim());
    check("PHONE", 0..ds);
    check("O", 0..config.dim());
}

#[test]
fn overlap_grows_with_alpha() {
    let mut last = f64::NEG_INFINITY;
    for alpha in [0.0, 0.4, 0.8] {
        let mut config = CorpusConfig::default();
        config.set_alpha("LOC", alpha).unwrap();
        let protos = prototypes(&config).unwrap();
        let table = config.class_table();
        let loc = &protos.means[table.iter().position(|c| c == "LOC").unwrap()];
        let phone = &protos.means[table.iter().position(|c| c == "PHONE").unwrap()];
        let dot: f64 = loc.iter().zip(phone).map(|(a, b)| a * b).sum();
        assert!(dot >= last, "alpha {alpha}: {dot} < {last}");
        last = dot;
    }
    assert!(last > 0.0);
}

#[test]
fn same_seed_same_bytes() {
    let config = CorpusConfig {
        sequences: 300,
        seed: 5,
        ..Default::default()
    };
    let write = || {
        let mut buf = Vec::new();
        generate_corpus(&config)
            .unwrap()
            .write_jsonl(&mut buf)
            .unwrap();
        buf
    };
    let bytes = write();
    assert_eq!(bytes, write());
    let back = Corpus::read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back, generate_corpus(&config).unwrap());
}

#[test]
fn default_split_is_enriched_and_keeps_old_entities() {
    let config = CorpusConfig {
        seed: 8,
        ..Default::default()
    };
    let corpus = generate_corpus(&config).unwrap();
    let split = SplitConfig::default();
    let (a, b) = split_ab(&corpus, &split).unwrap();
    let n = corpus.sequences.len() as f64;
    assert!((b.sequences.len() as f64 / n - 0.15).abs() < 0.01);
    assert_eq!(
        a.sequences.len() + b.sequences.len(),
        corpus.sequences.len()
    );

    let new = config.classes_of(ClassKind::Pattern);
    assert!(span_density(&b, &new) >= 3.0 * span_density(&a, &new));
    let old: Vec<String> = ["LOC", "PER", "ORG"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert!(b.span_count(&old) >= 1);
    // labels in B are untouched
    assert!(b
        .sequences
        .iter()
        .all(|s| corpus.sequences.iter().any(|c| c == s)));
}

#[test]
fn split_without_old_entities_in_b_is_infeasible() {
    let config = CorpusConfig {
        sequences: 1,
        ..Default::default()
    };
    let seq = |id: u64, label: &str| LabeledSequence {
        id,
        tokens: vec![
            Token {
                vec: vec![0.0; 32],
                label: label.into(),
                span: Some(0),
            },
            Token {
                vec: vec![0.0; 32],
                label: "O".into(),
                span: None,
            },
            Token {
                vec: vec![0.0; 32],
                label: "O".into(),
                span: None,
            },
        ],
    };
    let sequences = (0..10)
        .map(|i| seq(i, if i < 2 { "PHONE" } else { "LOC" }))
        .collect();
    let corpus = Corpus { config, sequences };
    let split = SplitConfig {
        b_share: 0.2,
        ..Default::default()
    };
    assert!(matches!(
        split_ab(&corpus, &split),
        Err(Error::SplitInfeasible(_))
    ));
    let wider = SplitConfig {
        b_share: 0.3,
        ..Default::default()
    };
    let (_, b) = split_ab(&corpus, &wider).unwrap();
    assert_eq!(b.sequences.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masking_is_idempotent(keep_bits in prop::collection::vec(any::<bool>(), 7), seed in 0u64..100) {
        let config = CorpusConfig { sequences: 40, seed, ..Default::default() };
        let corpus = generate_corpus(&config).unwrap();
        let keep: Vec<String> = config.class_table()[1..]
            .iter()
            .zip(&keep_bits)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c.clone())
            .collect();
        let once = mask_labels(&corpus, &keep).unwrap();
        prop_assert_eq!(&mask_labels(&once, &keep).unwrap(), &once);
        for (s, m) in corpus.sequences.iter().zip(&once.sequences) {
            for (t, u) in s.tokens.iter().zip(&m.tokens) {
                prop_assert_eq!(&t.vec, &u.vec);
                if keep.contains(&t.label) || t.label == "O" {
                    prop_assert_eq!(&t.label, &u.label);
                } else {
                    prop_assert_eq!(u.label.as_str(), "O");
                    prop_assert!(u.span.is_none());
                }
            }
        }
    }

    #[test]
    fn spans_are_well_formed(seed in 0u64..1000) {
        let config = CorpusConfig { sequences: 30, seed, ..Default::default() };
        for s in generate_corpus(&config).unwrap().sequences {
            let (lo, hi) = config.seq_len_range;
            prop_assert!(s.tokens.len() >= lo && s.tokens.len() <= hi);
            let mut seen = std::collections::HashSet::new();
            for (class, start, end) in s.spans() {
                prop_assert!(end - start >= 1 && end - start <= 4);
                prop_assert!(s.tokens[start..end].iter().all(|t| t.label == class));
                prop_assert!(seen.insert(s.tokens[start].span));
            }
            for t in &s.tokens {
                prop_assert_eq!(t.span.is_none(), t.label == "O");
            }
        }
    }
}
