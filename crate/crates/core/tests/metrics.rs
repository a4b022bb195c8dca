//! Property tests for the evaluation metrics, DET output and fusion.

use proptest::prelude::*;

use veriforge::data::{ScoreSet, Trial, TrialList};
use veriforge::eval::{
    det_csv, det_from, det_svg, eer_from, eer_with_threshold, min_dcf_from, parse_det_csv, DcfParams, DetCurve,
};
use veriforge::fusion::{fuse_scores, search_weights, FusionWeights, Objective};

/// Target and nontarget scores with at least one of each; a small grid makes
/// ties common.
fn score_lists(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let score = prop_oneof![(-20i32..20).prop_map(|v| v as f64 / 10.0), -3.0f64..3.0];
    (
        prop::collection::vec(score.clone(), 1..max),
        prop::collection::vec(score, 1..max),
    )
}

fn recount(tar: &[f64], non: &[f64], t: f64) -> (f64, f64) {
    let miss = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
    let fa = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
    (miss, fa)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_rank_statistics((tar, non) in score_lists(60)) {
        let f = |v: &[f64]| v.iter().map(|s| 2.0 * s + 1.0).collect::<Vec<_>>();
        let p = DcfParams::default();
        prop_assert_eq!(eer_from(&tar, &non).unwrap(), eer_from(&f(&tar), &f(&non)).unwrap());
        prop_assert_eq!(min_dcf_from(&tar, &non, &p).unwrap(), min_dcf_from(&f(&tar), &f(&non), &p).unwrap());
    }

    #[test]
    fn eer_is_symmetric_under_negation((tar, non) in score_lists(60)) {
        // Negated scores with swapped roles. Ties at a threshold flip from
        // accept to reject, so this holds up to the tie convention; without
        // ties it is exact.
        let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
        let mut all: Vec<f64> = tar.iter().chain(&non).copied().collect();
        all.sort_by(f64::total_cmp);
        let untied = all.windows(2).all(|w| w[0] != w[1]);
        let a = eer_from(&tar, &non).unwrap();
        let b = eer_from(&neg(&non), &neg(&tar)).unwrap();
        if untied {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn min_dcf_is_bounded_by_the_eer_operating_point((tar, non) in score_lists(60)) {
        let p = DcfParams::default();
        let curve = det_from(&tar, &non).unwrap();
        let (_, t) = eer_with_threshold(&curve);
        let (miss, fa) = recount(&tar, &non, t);
        let m = min_dcf_from(&tar, &non, &p).unwrap();
        prop_assert!(m <= p.normalized_dcf(miss, fa) + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn det_matches_per_threshold_recount((tar, non) in score_lists(120)) {
        let curve = det_from(&tar, &non).unwrap();
        let mut distinct: Vec<f64> = tar.iter().chain(&non).copied().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert_eq!(curve.points.len(), distinct.len() + 1);
        for (p, t) in curve.points.iter().zip(distinct.iter().chain([f64::INFINITY].iter())) {
            prop_assert_eq!(p.threshold, *t);
            let (miss, fa) = recount(&tar, &non, *t);
            prop_assert_eq!((p.p_miss, p.p_fa), (miss, fa));
        }
        for w in curve.points.windows(2) {
            prop_assert!(w[1].p_miss >= w[0].p_miss && w[1].p_fa <= w[0].p_fa);
        }
        let first = curve.points[0];
        let last = curve.points[curve.points.len() - 1];
        prop_assert_eq!((first.p_miss, first.p_fa), (0.0, 1.0));
        prop_assert_eq!((last.p_miss, last.p_fa), (1.0, 0.0));
    }

    #[test]
    fn eer_lies_between_bracketing_rates((tar, non) in score_lists(60)) {
        let curve = det_from(&tar, &non).unwrap();
        let e = eer_from(&tar, &non).unwrap();
        let i = curve.points.iter().position(|p| p.p_miss >= p.p_fa).unwrap();
        let hi = curve.points[i].p_miss.max(curve.points[i].p_fa);
        let lo = if i == 0 { 0.0 } else { curve.points[i - 1].p_miss.min(curve.points[i - 1].p_fa) };
        prop_assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
    }

    #[test]
    fn det_csv_round_trips((tar, non) in score_lists(60)) {
        let curve = det_from(&tar, &non).unwrap();
        let text = det_csv(&curve);
        prop_assert_eq!(text.lines().count(), curve.points.len() + 1);
        let back = parse_det_csv(&text).unwrap();
        let orig: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.p_fa, p.p_miss)).collect();
        prop_assert_eq!(back, orig);
    }

    #[test]
    fn fusion_identity_and_scale_free(
        (s0, s1) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
        )),
        k in 1u8..=3,
    ) {
        let trials = TrialList::new(
            (0..s0.len()).map(|i| Trial::new(i % 2 == 0, format!("e{i}"), format!("t{i}"))).collect(),
        );
        let sets = [ScoreSet::from_scores(&trials, &s0).unwrap(), ScoreSet::from_scores(&trials, &s1).unwrap()];
        prop_assert_eq!(&fuse_scores(&sets, &FusionWeights(vec![k, 0])).unwrap(), &sets[0]);
        let a = fuse_scores(&sets, &FusionWeights(vec![1, 1])).unwrap();
        let b = fuse_scores(&sets, &FusionWeights(vec![k, k])).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn svg_of(curves: &[(String, &DetCurve)]) -> String {
    det_svg(curves)
}

#[test]
fn svg_is_well_formed_with_one_polyline_per_curve() {
    let a = det_from(&[0.9, 0.8, 0.3, 0.7], &[0.1, 0.75, 0.2]).unwrap();
    let b = det_from(&[0.5, 0.6], &[0.4, 0.55, 0.1]).unwrap();
    let svg = svg_of(&[("sys <A> & co".into(), &a), ("B".into(), &b)]);
    let doc = roxmltree::Document::parse(&svg).expect("SVG parses as XML");
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    let polylines = root.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(polylines, 2);
    let texts: Vec<&str> = root.descendants().filter_map(|n| n.text()).collect();
    assert!(texts.iter().any(|t| t.contains("sys <A> & co")));
}

#[test]
fn search_breaks_ties_lexicographically() {
    // Two identical systems: every nonzero weighting gives the same scores
    // up to gcd reduction, so the smallest vector in lexicographic order wins.
    let trials = TrialList::new(
        (0..8)
            .map(|i| Trial::new(i < 4, format!("e{i}"), format!("t{i}")))
            .collect(),
    );
    let s = [0.9, 0.2, 0.7, 0.4, 0.3, 0.8, 0.1, 0.5];
    let set = ScoreSet::from_scores(&trials, &s).unwrap();
    let (w, _) = search_weights(&[set.clone(), set], &trials, Objective::Eer).unwrap();
    assert_eq!(w, FusionWeights(vec![0, 1]));
}
