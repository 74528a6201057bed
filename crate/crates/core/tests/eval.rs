use ecg_wvd::eval::{confusion_matrix, evaluate_probabilities, per_class_metrics, EvalOptions};
use ecg_wvd::ingest::{reference_counts, ClassLabel, SplitTag};
use proptest::prelude::*;

/// Recounts TP, FP and FN for one class straight from the label lists.
fn brute_force(truth: &[ClassLabel], pred: &[ClassLabel], c: ClassLabel) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == c, p == c) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let div = |a: u32, b: u32| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn label() -> impl Strategy<Value = ClassLabel> {
    (0usize..5).prop_map(|i| ClassLabel::from_ordinal(i).unwrap())
}

fn label_pairs(max: usize) -> impl Strategy<Value = (Vec<ClassLabel>, Vec<ClassLabel>)> {
    (1..max).prop_flat_map(|n| (prop::collection::vec(label(), n), prop::collection::vec(label(), n)))
}

#[test]
fn f_row_fixture_recall() {
    // F row: 137 correct, 13 called N, 12 called V; 26 other beats called F.
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut push = |t, p, n| {
        for _ in 0..n {
            truth.push(t);
            pred.push(p);
        }
    };
    push(ClassLabel::F, ClassLabel::F, 137);
    push(ClassLabel::F, ClassLabel::N, 13);
    push(ClassLabel::F, ClassLabel::V, 12);
    push(ClassLabel::N, ClassLabel::F, 26);
    push(ClassLabel::N, ClassLabel::N, 500);
    let cm = confusion_matrix(&truth, &pred).unwrap();
    assert_eq!(cm.counts[0], vec![137, 13, 0, 0, 12]);
    let f = per_class_metrics(&cm).per_class[0].clone();
    assert_eq!(f.support, 162);
    assert_eq!(format!("{:.4}", f.recall), "0.8457");
    assert_eq!(format!("{:.4}", f.precision), "0.8405");
    assert_eq!(format!("{:.4}", f.f1), "0.8431");
}

#[test]
fn constant_normal_predictor_on_test_counts() {
    let counts = reference_counts(SplitTag::Test);
    let truth: Vec<ClassLabel> = counts.iter().flat_map(|(&c, &n)| std::iter::repeat_n(c, n)).collect();
    assert_eq!(truth.len(), 21892);
    let pred = vec![ClassLabel::N; truth.len()];
    let r = per_class_metrics(&confusion_matrix(&truth, &pred).unwrap());
    assert_eq!(r.accuracy, 18118.0 / 21892.0);
    assert_eq!(format!("{:.4}", r.accuracy), "0.8276");
    assert_eq!(r.total_support(), 21892);

    // the same probabilities with Q removed: 4 classes, 20284 beats
    let mut one_hot_n = vec![0.0; 5];
    one_hot_n[ClassLabel::N.ordinal()] = 1.0;
    let probs = vec![one_hot_n; truth.len()];
    let dropped = evaluate_probabilities(
        &truth,
        &probs,
        EvalOptions {
            drop_q: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(dropped.per_class.len(), 4);
    assert_eq!(dropped.total_support(), 20284);
    assert!(dropped.class(ClassLabel::Q).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_brute_force((truth, pred) in label_pairs(60)) {
        let r = per_class_metrics(&confusion_matrix(&truth, &pred).unwrap());
        for m in &r.per_class {
            let (p, rc, f1) = brute_force(&truth, &pred, m.class);
            prop_assert!((m.precision - p).abs() <= 1e-12);
            prop_assert!((m.recall - rc).abs() <= 1e-12);
            prop_assert!((m.f1 - f1).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn accuracy_equals_weighted_recall((truth, pred) in label_pairs(80)) {
        let r = per_class_metrics(&confusion_matrix(&truth, &pred).unwrap());
        prop_assert!((r.accuracy - r.weighted_avg.recall).abs() <= 1e-12);
        let supports: u64 = r.per_class.iter().map(|m| m.support).sum();
        prop_assert_eq!(supports, truth.len() as u64);
    }

    #[test]
    fn f1_lies_between_precision_and_recall((truth, pred) in label_pairs(80)) {
        let r = per_class_metrics(&confusion_matrix(&truth, &pred).unwrap());
        for m in r.per_class.iter().filter(|m| m.precision + m.recall > 0.0) {
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-15);
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
        }
        for v in [r.accuracy, r.macro_avg.f1, r.weighted_avg.f1, r.macro_avg.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn merging_matches_concatenation((a_t, a_p) in label_pairs(40), (b_t, b_p) in label_pairs(40)) {
        let merged = confusion_matrix(&a_t, &a_p).unwrap().merge(&confusion_matrix(&b_t, &b_p).unwrap()).unwrap();
        let all_t: Vec<_> = a_t.iter().chain(&b_t).copied().collect();
        let all_p: Vec<_> = a_p.iter().chain(&b_p).copied().collect();
        let joined = confusion_matrix(&all_t, &all_p).unwrap();
        prop_assert_eq!(&merged, &joined);
        prop_assert_eq!(per_class_metrics(&merged), per_class_metrics(&joined));
    }

    #[test]
    fn metrics_ignore_sample_order((truth, pred) in label_pairs(50), seed: u64) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut pairs: Vec<_> = truth.iter().copied().zip(pred.iter().copied()).collect();
        pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (t2, p2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        prop_assert_eq!(
            per_class_metrics(&confusion_matrix(&truth, &pred).unwrap()),
            per_class_metrics(&confusion_matrix(&t2, &p2).unwrap())
        );
    }
}
