//! Randomized sweeps comparing the crate against the brute-force references.

use r2t_core::corpus::Tagset;
use r2t_core::eval::{macro_f1, span_f1, word_accuracy};
use r2t_core::loss::{dist_loss, lex_loss, oov_loss, syn_loss, total_loss, LossMode, LossWeights};
use r2t_core::neural::TagDistribution;
use r2t_core::rules::{RuleMatch, TransitionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    probs: Vec<Vec<Vec<f64>>>,
    matches: Vec<Vec<RuleMatch>>,
    m: Vec<Vec<f64>>,
}

fn random_match(rng: &mut ChaCha8Rng, n: usize) -> RuleMatch {
    match rng.random_range(0..4) {
        0 => RuleMatch::Unambiguous(rng.random_range(0..n)),
        1 => RuleMatch::Morphological(rng.random_range(0..n)),
        2 => {
            let mut ys: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
            while ys.len() < 2 {
                let y = rng.random_range(0..n);
                if !ys.contains(&y) {
                    ys.push(y);
                }
            }
            ys.sort_unstable();
            RuleMatch::Ambiguous(ys)
        }
        _ => RuleMatch::NoMatch,
    }
}

/// One to three sentences of one to six tokens over |T| ∈ 2..=12 tags.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=12);
    let sentences = rng.random_range(1..=3);
    let mut probs = Vec::new();
    let mut matches = Vec::new();
    for _ in 0..sentences {
        let len = rng.random_range(1..=6);
        probs.push((0..len).map(|_| super::random_dist(rng, n)).collect());
        matches.push((0..len).map(|_| random_match(rng, n)).collect());
    }
    let m = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f64>(),
                })
                .collect()
        })
        .collect();
    Instance { probs, matches, m }
}

fn dists(ps: &[Vec<f64>]) -> Vec<TagDistribution> {
    ps.iter().map(|p| TagDistribution::new(p.clone()).unwrap()).collect()
}

/// Pooled batch reference: (lex, syn, dist, oov).
fn brute_batch(inst: &Instance) -> (f64, f64, f64, f64) {
    let (mut lex, mut n_lex, mut oov, mut n_oov) = (0.0, 0, 0.0, 0);
    let (mut syn, mut pairs) = (0.0, 0);
    let mut all = Vec::new();
    for (ps, ms) in inst.probs.iter().zip(&inst.matches) {
        for (p, m) in ps.iter().zip(ms) {
            all.push(p);
            match m.targets() {
                Some(ys) => {
                    lex += super::lex(p, ys);
                    n_lex += 1;
                }
                None => {
                    oov += super::kl_uniform(p);
                    n_oov += 1;
                }
            }
        }
        if ps.len() > 1 {
            syn += super::syn(ps, &inst.m) * (ps.len() - 1) as f64;
            pairs += ps.len() - 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (avg(lex, n_lex), avg(syn, pairs), super::kl_uniform(&super::mean_dist(&all)), avg(oov, n_oov))
}

/// Largest deviation seen and where, over `count` random instances; every
/// component is compared token-, sentence- and batch-wise.
pub fn loss_sweep(count: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::from("none"));
    let mut note = |dev: f64, what: &str, case: usize| {
        if dev.is_nan() || dev > worst.0 {
            worst = (if dev.is_nan() { f64::INFINITY } else { dev }, format!("{what} in case {case}"));
        }
    };
    for case in 0..count {
        let inst = random_instance(&mut rng);
        let m = TransitionMatrix::from_invalidity(inst.m.len(), inst.m.concat()).unwrap();
        for (ps, ms) in inst.probs.iter().zip(&inst.matches) {
            let ds = dists(ps);
            for ((d, p), mt) in ds.iter().zip(ps).zip(ms) {
                match mt.targets() {
                    Some(ys) => note((lex_loss(d, mt).unwrap() - super::lex(p, ys)).abs(), "lex", case),
                    None => {
                        if lex_loss(d, mt).is_some() {
                            note(f64::INFINITY, "lex on an OOV token", case);
                        }
                        note((oov_loss(d) - super::kl_uniform(p)).abs(), "oov", case);
                    }
                }
            }
            note((syn_loss(&ds, &m).unwrap() - super::syn(ps, &inst.m)).abs(), "syn", case);
            let mean = TagDistribution::mean(ds.iter()).unwrap();
            let refs: Vec<&Vec<f64>> = ps.iter().collect();
            note((dist_loss(&mean) - super::kl_uniform(&super::mean_dist(&refs))).abs(), "dist", case);
        }
        let all: Vec<Vec<TagDistribution>> = inst.probs.iter().map(|ps| dists(ps)).collect();
        let b = total_loss(&all, Some(&inst.matches), &m, &LossWeights::default(), LossMode::Unsupervised, None).unwrap();
        let (lex, syn, dist, oov) = brute_batch(&inst);
        note((b.lex - lex).abs(), "batch lex", case);
        note((b.syn - syn).abs(), "batch syn", case);
        note((b.dist - dist).abs(), "batch dist", case);
        note((b.oov - oov).abs(), "batch oov", case);
        note((b.total - (0.85 * lex + 0.08 * syn + 0.02 * dist + 0.05 * oov)).abs(), "total", case);
    }
    worst
}

const POS: [&str; 5] = ["ADJ", "DET", "NOUN", "PRON", "VERB"];
const BIO: [&str; 7] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];

fn draw(rng: &mut ChaCha8Rng, pool: &[&str], n: usize) -> Vec<String> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect()
}

/// Prediction that keeps each gold tag with probability `keep`.
fn perturb(rng: &mut ChaCha8Rng, gold: &[String], pool: &[&str], keep: f64) -> Vec<String> {
    gold.iter()
        .map(|g| if rng.random_bool(keep) { g.clone() } else { pool[rng.random_range(0..pool.len())].to_string() })
        .collect()
}

/// Exact comparison of macro F1, word accuracy and span F1 on `count`
/// random pairs each; returns the first disagreement.
pub fn metric_sweep(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tagset = Tagset::new(&POS).unwrap();
    let tags: Vec<String> = POS.iter().map(|s| s.to_string()).collect();
    let mut pred_pool = POS.to_vec();
    pred_pool.push("OTHER");
    for case in 0..count {
        let n = rng.random_range(1..40);
        // A random sub-inventory leaves some tags absent from gold.
        let k = rng.random_range(1..=POS.len());
        let gold = draw(&mut rng, &POS[..k], n);
        let keep = rng.random::<f64>();
        let pred = perturb(&mut rng, &gold, &pred_pool, keep);
        let report = macro_f1(&gold, &pred, &tagset).unwrap();
        let (mf, acc) = (super::macro_f1(&gold, &pred, &tags), super::word_accuracy(&gold, &pred));
        if report.macro_f1 != mf || report.accuracy != acc || word_accuracy(&gold, &pred).unwrap() != acc {
            return Err(format!("token metrics differ in case {case}: macro F1 {} vs {mf}, accuracy {} vs {acc}", report.macro_f1, report.accuracy));
        }

        let sentences = rng.random_range(1..5);
        let (mut g_bio, mut p_bio) = (Vec::new(), Vec::new());
        for _ in 0..sentences {
            let n = rng.random_range(1..15);
            let g = draw(&mut rng, &BIO, n);
            let keep = rng.random::<f64>();
            p_bio.push(perturb(&mut rng, &g, &BIO, keep));
            g_bio.push(g);
        }
        let got = span_f1(&g_bio, &p_bio, None).unwrap().micro.f1;
        let want = super::span_micro_f1(&g_bio, &p_bio);
        if got != want {
            return Err(format!("span F1 differs in case {case}: {got} vs {want}"));
        }
    }
    Ok(())
}
