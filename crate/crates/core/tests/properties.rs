use daltest::experiments::{write_artifacts, Study, TrialRecord};
use daltest::pwl::{affine_abs, affine_relu, threshold_interval};
use daltest::{selective_p, AffineVector, FixedInterval, IntervalSet, TruncatedGaussian};
use proptest::prelude::*;

fn line(len: usize) -> impl Strategy<Value = AffineVector> {
    (
        prop::collection::vec(-5.0..5.0f64, len),
        prop::collection::vec(-5.0..5.0f64, len),
    )
        .prop_map(|(c, d)| AffineVector::new(c, d).unwrap())
}

/// A point of `iv` at fraction `t`, clamped to a finite window around `anchor`.
fn inside(iv: FixedInterval, anchor: f64, t: f64) -> f64 {
    let lo = iv.lo.max(anchor - 10.0);
    let hi = iv.hi.min(anchor + 10.0);
    lo + t * (hi - lo)
}

proptest! {
    #[test]
    fn relu_piece_is_exact(input in line(12), anchor in -3.0..3.0f64, t in 0.0..1.0f64) {
        let (out, iv) = affine_relu(&input, anchor, FixedInterval::REAL_LINE).unwrap();
        prop_assert!(iv.contains(anchor));
        let z = inside(iv, anchor, t);
        for (o, x) in out.eval(z).iter().zip(input.eval(z)) {
            prop_assert!((o - x.max(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn abs_piece_is_exact(input in line(12), anchor in -3.0..3.0f64, t in 0.0..1.0f64) {
        let (out, iv) = affine_abs(&input, anchor, FixedInterval::REAL_LINE).unwrap();
        let z = inside(iv, anchor, t);
        for (o, x) in out.eval(z).iter().zip(input.eval(z)) {
            prop_assert!((o - x.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_region_is_constant_on_its_piece(
        input in line(16),
        lambda in 0.1..3.0f64,
        anchor in -3.0..3.0f64,
        t in 0.0..1.0f64,
    ) {
        let (region, iv) = threshold_interval(&input, lambda, anchor, FixedInterval::REAL_LINE).unwrap();
        let z = inside(iv, anchor, t);
        let direct: Vec<usize> = input.eval(z).iter().enumerate().filter(|(_, v)| **v >= lambda).map(|(i, _)| i).collect();
        // Exactly at an endpoint the comparison may go either way.
        if iv.lo < z && z < iv.hi {
            prop_assert_eq!(region.pixels(), &direct[..]);
        }
    }

    #[test]
    fn interval_set_membership_is_any_of(
        parts in prop::collection::vec((-10.0..10.0f64, 0.0..3.0f64), 1..8),
        probes in prop::collection::vec(-12.0..12.0f64, 50),
    ) {
        let ivs: Vec<FixedInterval> = parts.iter().map(|&(a, w)| FixedInterval::new(a, a + w)).collect();
        let set = IntervalSet::from_parts(ivs.clone(), 0.0);
        for z in probes {
            prop_assert_eq!(set.contains(z), ivs.iter().any(|iv| iv.contains(z)));
        }
    }

    #[test]
    fn selective_p_is_a_probability_decreasing_in_the_statistic(
        parts in prop::collection::vec((-6.0..6.0f64, 0.05..2.0f64), 1..6),
        sigma in 0.2..2.0f64,
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let set = IntervalSet::from_parts(parts.iter().map(|&(c, w)| FixedInterval::new(c, c + w)), 1e-9);
        let tg = TruncatedGaussian::new(sigma * sigma, set).unwrap();
        let (small, large) = (6.0 * a.min(b), 6.0 * a.max(b));
        let p_small = selective_p(small, &tg).unwrap();
        let p_large = selective_p(large, &tg).unwrap();
        prop_assert!((0.0..=1.0).contains(&p_small) && (0.0..=1.0).contains(&p_large));
        prop_assert!(p_large <= p_small + 1e-12);
        prop_assert!((selective_p(-large, &tg).unwrap() - p_large).abs() < 1e-15);
    }
}

fn record(trial: usize, p: f64) -> TrialRecord {
    TrialRecord {
        group: "iid".into(),
        setting: 64.0,
        trial,
        plan_seed: trial as u64,
        region_size: 3,
        z_obs: 0.5,
        sigma2: 0.6,
        p_selective: p,
        p_oc: p,
        p_naive: p / 2.0,
        p_bonferroni: 1.0,
        p_permutation: Some(0.5),
        intervals: 2,
        pieces: 40,
        degenerate: 0,
        overlap: None,
    }
}

#[test]
fn artifacts_have_the_plotting_schema() {
    let study = Study {
        group: "iid".into(),
        setting: 64.0,
        requested: 5,
        records: vec![record(0, 0.01), record(2, 0.3), record(3, 0.07)],
        excluded_empty: 1,
        failures: vec![daltest::experiments::TrialFailure {
            trial: 4,
            message: "boom".into(),
        }],
    };
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(dir.path(), &serde_json::json!({ "seed": 3 }), &[study], &[0.05, 0.1]).unwrap();

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,setting,rejection_rate,ci_lo,ci_hi,alpha,group,trials,rejections"
    );
    let rows: Vec<&str> = lines.clone().filter(|l| !l.starts_with('#')).collect();
    // Five methods at two levels.
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("selective,64.0,0.3333333333333333,"));
    assert_eq!(
        summary.lines().last().unwrap(),
        "# group=iid setting=64 requested=5 valid=3 excluded_empty=1 excluded_error=1"
    );

    let trials = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 3);
    assert!(trials
        .lines()
        .next()
        .unwrap()
        .starts_with("group,setting,trial,plan_seed,"));

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 3);
}
