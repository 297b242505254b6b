//! Brute-force reference implementations, written directly from the
//! textbook definitions with plain loops and no shared code with the crate.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-12;

/// Random probability vector of length `n`; sometimes sparse, sometimes peaked.
pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => rng.random::<f64>() * 50.0,
            _ => rng.random::<f64>(),
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// −log of the summed probability of the allowed tags.
pub fn lex(p: &[f64], allowed: &[usize]) -> f64 {
    let mut mass = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        if allowed.contains(&j) {
            mass += pj;
        }
    }
    if mass < EPS {
        mass = EPS;
    }
    -mass.ln()
}

/// (1/(N−1)) Σ_i Σ_j Σ_k p_i[j] · M[j][k] · p_{i+1}[k]; zero for N < 2.
pub fn syn(ps: &[Vec<f64>], m: &[Vec<f64>]) -> f64 {
    if ps.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..ps.len() - 1 {
        for j in 0..m.len() {
            for k in 0..m.len() {
                acc += ps[i][j] * m[j][k] * ps[i + 1][k];
            }
        }
    }
    acc / (ps.len() - 1) as f64
}

/// D_KL(p ‖ uniform) with 0·log 0 = 0.
pub fn kl_uniform(p: &[f64]) -> f64 {
    let u = 1.0 / p.len() as f64;
    let mut acc = 0.0;
    for &pj in p {
        if pj > 0.0 {
            acc += pj * (pj / u).ln();
        }
    }
    acc
}

pub fn mean_dist(ps: &[&Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; ps[0].len()];
    for p in ps {
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += x;
        }
    }
    out.iter().map(|x| x / ps.len() as f64).collect()
}

pub fn word_accuracy(gold: &[String], pred: &[String]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 0..gold.len() {
        if gold[i] == pred[i] {
            hits += 1;
        }
    }
    hits as f64 / gold.len() as f64
}

fn safe_div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = safe_div(tp, tp + fp);
    let r = safe_div(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-tag F1 over tags seen in gold or prediction.
pub fn macro_f1(gold: &[String], pred: &[String], tags: &[String]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in tags {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..gold.len() {
            match (gold[i] == *t, pred[i] == *t) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            sum += f_score(tp, fp, fn_);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn kind_of<'a>(tag: &'a str, prefix: &str) -> Option<&'a str> {
    tag.strip_prefix(prefix)
}

/// Every `(start, end, kind)` that forms a chunk: it begins at `B-k` or at
/// an `I-k` not continuing a `k` chunk, continues with `I-k` only, and is
/// not followed by `I-k`.
pub fn chunks(tags: &[String]) -> Vec<(usize, usize, String)> {
    let n = tags.len();
    let mut out = Vec::new();
    for s in 0..n {
        let kind = match kind_of(&tags[s], "B-").or_else(|| kind_of(&tags[s], "I-")) {
            Some(k) => k,
            None => continue,
        };
        if tags[s].starts_with("I-") && s > 0 {
            let prev = &tags[s - 1];
            if kind_of(prev, "B-") == Some(kind) || kind_of(prev, "I-") == Some(kind) {
                continue;
            }
        }
        for e in s..n {
            if e > s && kind_of(&tags[e], "I-") != Some(kind) {
                break;
            }
            let closed = e + 1 == n || kind_of(&tags[e + 1], "I-") != Some(kind);
            if closed {
                out.push((s, e, kind.to_string()));
            }
        }
    }
    out
}

/// Micro-averaged exact-match span F1.
pub fn span_micro_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> f64 {
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs = chunks(g);
        let ps = chunks(p);
        n_gold += gs.len();
        n_pred += ps.len();
        tp += ps.iter().filter(|c| gs.contains(c)).count();
    }
    f_score(tp, n_pred - tp, n_gold - tp)
}

pub mod cases;
pub mod gradcheck;
