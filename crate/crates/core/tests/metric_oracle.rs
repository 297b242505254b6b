mod support;

use r2t_core::corpus::Tagset;
use r2t_core::eval::macro_f1;

#[test]
fn metrics_match_brute_force_exactly() {
    for seed in [17, 23] {
        support::cases::metric_sweep(500, seed).unwrap();
    }
}

#[test]
fn hand_case_is_two_thirds() {
    let t = Tagset::new(&["A", "B"]).unwrap();
    let r = macro_f1(&["A", "A", "B"], &["A", "B", "B"], &t).unwrap();
    assert_eq!(r.macro_f1, 2.0 / 3.0);
}

#[test]
fn brute_chunker_agrees_on_conventions() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(support::chunks(&s(&["B-PER", "I-PER", "O", "I-LOC", "I-LOC"])).len(), 2);
    assert_eq!(support::chunks(&s(&["B-PER", "I-LOC"])), vec![(0, 0, "PER".into()), (1, 1, "LOC".into())]);
    assert_eq!(support::chunks(&s(&["B-PER", "B-PER", "I-PER"])), vec![(0, 0, "PER".into()), (1, 2, "PER".into())]);
}
