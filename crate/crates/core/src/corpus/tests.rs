use std::io::Write;

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::*;

fn ex(label: usize, period: i64) -> TemporalExample {
    TemporalExample {
        tokens: vec![1, 2, 3],
        label,
        period,
    }
}

fn two_class(n0: usize, n1: usize) -> Vec<TemporalExample> {
    let mut v: Vec<_> = (0..n0).map(|_| ex(0, 0)).collect();
    v.extend((0..n1).map(|_| ex(1, 0)));
    for (i, e) in v.iter_mut().enumerate() {
        e.tokens = vec![i as u32 % 50, (i / 50) as u32];
    }
    v
}

#[test]
fn generation_is_deterministic() {
    let spec = DriftSpec::drift_bench(7);
    let a = generate(&spec, 50, SplitFractions::default()).unwrap();
    let b = generate(&spec, 50, SplitFractions::default()).unwrap();
    assert_eq!(a, b);
    let c = generate(&spec.with_seed(8), 50, SplitFractions::default()).unwrap();
    assert_ne!(a.examples, c.examples);
}

#[test]
fn drift_bench_shape_and_splits() {
    let spec = DriftSpec::drift_bench(1);
    let c = generate(&spec, 100, SplitFractions::default()).unwrap();
    c.validate().unwrap();
    assert_eq!(c.periods(), vec![0, 1, 2, 3, 4]);
    assert_eq!(c.examples.len(), 500);
    for s in c.splits.values() {
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }
    for e in &c.examples {
        assert!((8..=16).contains(&e.tokens.len()));
        assert!(e.tokens.iter().all(|t| *t < 200));
    }
}

#[test]
fn generate_preconditions() {
    let spec = DriftSpec::drift_bench(1);
    assert!(generate(&spec, 9, SplitFractions::default()).is_err());
    let bad = SplitFractions {
        train: 0.5,
        val: 0.2,
        test: 0.2,
    };
    assert!(generate(&spec, 100, bad).is_err());
    let mut broken = spec.clone();
    broken.label_priors[2] = vec![0.5, 0.5, 0.5];
    assert!(matches!(generate(&broken, 100, SplitFractions::default()), Err(Error::Argument(_))));
    let mut broken = spec;
    broken.vocab_drift_intensity = 1.5;
    assert!(broken.validate().is_err());
}

#[test]
fn mixture_weights_follow_schedule() {
    let spec = DriftSpec::drift_bench(0);
    assert_eq!(spec.drift_weight(0), 0.0);
    assert!((spec.drift_weight(2) - 0.4).abs() < 1e-15);
    assert!((spec.drift_weight(4) - 0.8).abs() < 1e-15);
    let mut p = spec.clone();
    p.schedule = DriftSchedule::Power { exponent: 2.0 };
    assert!((p.drift_weight(2) - 0.2).abs() < 1e-15);
    for c in 0..3 {
        for t in 0..5 {
            let d = spec.token_distribution(c, t);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// Chi-square homogeneity test on token counts of two periods.
fn homogeneity_p_value(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let n = (na + nb) as f64;
    let mut stat = 0.0;
    let mut cells = 0;
    for (x, y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cells += 1;
        let ea = col * na as f64 / n;
        let eb = col * nb as f64 / n;
        stat += (*x as f64 - ea).powi(2) / ea + (*y as f64 - eb).powi(2) / eb;
    }
    ChiSquared::new((cells - 1) as f64).unwrap().sf(stat)
}

#[test]
fn no_drift_means_matching_token_distributions() {
    let spec = DriftSpec::drift_bench(3)
        .with_uniform_priors()
        .with_intensity(0.0);
    let c = generate(&spec, 2000, SplitFractions::default()).unwrap();
    let count = |period: i64| {
        let mut v = vec![0u64; 200];
        for e in c.examples.iter().filter(|e| e.period == period) {
            for t in &e.tokens {
                v[*t as usize] += 1;
            }
        }
        v
    };
    let p = homogeneity_p_value(&count(0), &count(4));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn drift_moves_token_distributions() {
    let spec = DriftSpec::drift_bench(3).with_uniform_priors();
    let c = generate(&spec, 2000, SplitFractions::default()).unwrap();
    let count = |period: i64| {
        let mut v = vec![0u64; 200];
        for e in c.examples.iter().filter(|e| e.period == period) {
            for t in &e.tokens {
                v[*t as usize] += 1;
            }
        }
        v
    };
    assert!(homogeneity_p_value(&count(0), &count(4)) < 1e-6);
}

#[test]
fn skewed_prior_within_binomial_bound() {
    let layout_spec = DriftSpec::banded(
        5,
        2,
        200,
        16,
        vec![vec![0.9, 0.1]; 5],
        0.8,
        &BandProfile::DRIFT_BENCH,
        11,
    )
    .unwrap();
    let n = 2000;
    let c = generate(&layout_spec, n, SplitFractions::default()).unwrap();
    // 99.9% two-sided normal bound on a binomial proportion.
    let sigma = (0.9f64 * 0.1 / n as f64).sqrt();
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.9995);
    let bound = z * sigma;
    assert!(bound < 0.03, "tolerance 0.03 must cover the bound {bound}");
    for t in 0..5 {
        let frac = c
            .examples
            .iter()
            .filter(|e| e.period == t && e.label == 0)
            .count() as f64
            / n as f64;
        assert!((frac - 0.9).abs() <= 0.03, "period {t}: {frac}");
    }
}

#[test]
fn resample_floor_on_minority_matches_exhaustive_count() {
    // Oracle: the largest minority count whose rounded majority still fits.
    let (c0, c1) = (500usize, 500usize);
    let ratio = 0.75 / 0.25;
    let oracle = (1..=c1)
        .rev()
        .map(|n1| ((n1 as f64 * ratio).round() as usize, n1))
        .find(|(n0, _)| *n0 <= c0)
        .unwrap();
    let out = resample_label_distribution(&two_class(c0, c1), &[0.75, 0.25], 4).unwrap();
    let counts = label_counts(&out, 2);
    assert_eq!((counts[0], counts[1]), oracle);
    assert_eq!(oracle, (498, 166));
}

#[test]
fn resample_degenerate_and_identity_targets() {
    let slice = two_class(500, 500);
    let out = resample_label_distribution(&slice, &[1.0, 0.0], 0).unwrap();
    assert_eq!(label_counts(&out, 2), vec![500, 0]);

    let slice = two_class(300, 200);
    let out = resample_label_distribution(&slice, &[0.6, 0.4], 0).unwrap();
    let counts = label_counts(&out, 2);
    assert!(300 - counts[0] <= 1 && 200 - counts[1] <= 1, "{counts:?}");
}

#[test]
fn resample_unachievable_reports_max_skew() {
    let slice = two_class(10, 1);
    let err = resample_label_distribution(&slice, &[0.01, 0.99], 0).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
    assert!(err.to_string().contains("maximum achievable"), "{err}");
    let only_zero = two_class(10, 0);
    let err = resample_label_distribution(&only_zero, &[0.5, 0.5], 0).unwrap_err();
    assert!(err.to_string().contains("maximum achievable"), "{err}");
}

proptest! {
    #[test]
    fn resample_is_subset_near_target(
        n0 in 20usize..300,
        n1 in 20usize..300,
        t0 in 0.05f64..0.95,
        seed in 0u64..1000,
    ) {
        let slice = two_class(n0, n1);
        let target = [t0, 1.0 - t0];
        let out = resample_label_distribution(&slice, &target, seed).unwrap();
        let mut cursor = 0;
        for e in &out {
            let pos = slice[cursor..].iter().position(|x| x == e);
            prop_assert!(pos.is_some());
            cursor += pos.unwrap() + 1;
        }
        let p = empirical_priors(&out, 2);
        let tol = 1.0 / (out.len() as f64).sqrt();
        prop_assert!((p[0] - t0).abs() <= tol, "{p:?} vs {t0} (n = {})", out.len());
    }
}

#[test]
fn label_series_properties() {
    let spec = DriftSpec::drift_bench(5).with_uniform_priors().with_intensity(0.0);
    let c = generate(&spec, 1500, SplitFractions::default()).unwrap();
    let test = c.slice(0, Split::Test).unwrap();
    let single = label_shift_series(&test, 3, 0, 1, 0.8, 1).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].examples, test);

    let series = label_shift_series(&test, 3, 0, 5, 0.8, 1).unwrap();
    assert_eq!(series.len(), 5);
    let base = empirical_priors(&test, 3);
    let tv: Vec<f64> = series
        .iter()
        .map(|s| total_variation(&empirical_priors(&s.examples, 3), &base))
        .collect();
    assert_eq!(tv[0], 0.0);
    for w in tv.windows(2) {
        assert!(w[1] > w[0], "{tv:?}");
    }
}

#[test]
fn vocab_series_keeps_base_priors() {
    let c = generate(&DriftSpec::drift_bench(2), 1500, SplitFractions::default()).unwrap();
    let series = vocab_shift_series(&c, 0, Split::Test, 3).unwrap();
    assert_eq!(series.len(), 5);
    let base = empirical_priors(&series[0].examples, 3);
    for s in &series {
        let p = empirical_priors(&s.examples, 3);
        for (a, b) in p.iter().zip(&base) {
            assert!((a - b).abs() <= 0.02, "period {}: {p:?} vs {base:?}", s.period);
        }
        assert!(s.examples.iter().all(|e| e.period == s.period));
    }
}

fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn jsonl_single_line() {
    let f = write_lines(&[r#"{"tokens":[1,2,3],"label":0,"period":2015}"#]);
    let c = load_jsonl(f.path(), &JsonlOptions::new(200)).unwrap();
    assert_eq!(c.examples.len(), 1);
    assert_eq!(c.examples[0].period, 2015);
    assert_eq!(c.examples[0].tokens, vec![1, 2, 3]);
}

#[test]
fn jsonl_missing_label_cites_line() {
    let f = write_lines(&[
        r#"{"tokens":[1],"label":0,"period":1}"#,
        r#"{"tokens":[1],"period":1}"#,
    ]);
    let err = load_jsonl(f.path(), &JsonlOptions::new(200)).unwrap_err();
    match err {
        Error::Data { location, message } => {
            assert!(location.ends_with(":2"), "{location}");
            assert!(message.contains("label"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn jsonl_errors() {
    let empty = write_lines(&[]);
    assert!(matches!(load_jsonl(empty.path(), &JsonlOptions::new(10)), Err(Error::Data { .. })));
    let f = write_lines(&[r#"{"tokens":[1],"label":4,"period":1}"#]);
    let mut o = JsonlOptions::new(10);
    o.n_classes = Some(3);
    assert!(load_jsonl(f.path(), &o).is_err());
    let f = write_lines(&[r#"{"tokens":[12],"label":0,"period":1}"#]);
    assert!(load_jsonl(f.path(), &JsonlOptions::new(10)).is_err());
}

#[test]
fn jsonl_two_periods_and_text() {
    let f = write_lines(&[
        r#"{"text":"the cat sat","label":0,"period":2015}"#,
        r#"{"text":"a dog ran","label":1,"period":2016}"#,
        r#"{"tokens":[5],"label":1,"period":2016}"#,
    ]);
    let c = load_jsonl(f.path(), &JsonlOptions::new(100)).unwrap();
    assert_eq!(c.periods(), vec![2015, 2016]);
    assert_eq!(c.n_classes, 2);
    assert_eq!(
        c.examples[0].tokens,
        vec![hash_word("the", 100), hash_word("cat", 100), hash_word("sat", 100)]
    );
    // FNV-1a 64 of "a" is 0xaf63_dc4c_8601_ec8c.
    assert_eq!(hash_word("a", 1 << 20), (0xaf63_dc4c_8601_ec8c_u64 % (1 << 20)) as u32);
}

#[test]
fn jsonl_round_trip() {
    let c = generate(&DriftSpec::drift_bench(9), 40, SplitFractions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_jsonl(&c, &path).unwrap();
    let mut o = JsonlOptions::new(200);
    o.n_classes = Some(3);
    let back = load_jsonl(&path, &o).unwrap();
    assert_eq!(back.examples, c.examples);
    assert_eq!(back.splits, c.splits);
}

#[test]
fn json_round_trip() {
    let c = generate(&DriftSpec::drift_bench(9), 20, SplitFractions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    c.save(&path).unwrap();
    assert_eq!(TemporalCorpus::load(&path).unwrap(), c);
}
