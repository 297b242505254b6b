//! Rule-informed loss terms and their weighted combination.
//!
//! Every term exists twice: as a plain function over [`TagDistribution`]s
//! (evaluation, telemetry) and as a graph builder ([`r2t_objective`],
//! [`sft_objective`]) whose value is differentiated during training. Both
//! routes share the scalar kernels in [`crate::neural::tape`].
//!
//! Batch aggregation: the lexical term is a mean over rule-covered tokens,
//! the OOV term a mean over uncovered tokens, the syntactic term a mean
//! over all adjacent pairs (never across sentence boundaries) and the
//! distributional term is computed on the batch-mean distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tape::{adjacent_bilinear, kl_to_uniform, set_nll};
use crate::neural::{Graph, NodeId, TagDistribution, Tensor};
use crate::rules::{RuleMatch, TransitionMatrix};

/// Mixture coefficients of the four rule losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.85, beta: 0.08, gamma: 0.02, delta: 0.05 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0, delta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 && self.delta == 0.0
    }

    pub fn combine(&self, lex: f64, syn: f64, dist: f64, oov: f64) -> f64 {
        self.alpha * lex + self.beta * syn + self.gamma * dist + self.delta * oov
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Unsupervised,
    Sft,
}

/// Component values of one loss evaluation plus the token counts behind them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub lex: f64,
    pub syn: f64,
    pub dist: f64,
    pub oov: f64,
    /// Mean gold-tag negative log-likelihood (supervised mode only).
    pub ce: f64,
    pub total: f64,
    pub n_lex: usize,
    pub n_pairs: usize,
    pub n_tokens: usize,
    pub n_oov: usize,
}

/// `-ln p_t` for single-tag matches, `-ln Σ_{y∈Y} p_y` for ambiguous ones,
/// `None` for OOV tokens.
pub fn lex_loss(dist: &TagDistribution, m: &RuleMatch) -> Option<f64> {
    m.targets().map(|ts| set_nll(dist.probs(), ts))
}

/// Mean of `p_i · M · p_{i+1}` over adjacent positions; 0 for one token.
pub fn syn_loss(dists: &[TagDistribution], m: &TransitionMatrix) -> Result<f64> {
    check_width(dists, m)?;
    if dists.len() < 2 {
        return Ok(0.0);
    }
    Ok(bilinear_sum(dists, m) / (dists.len() - 1) as f64)
}

fn check_width(dists: &[TagDistribution], m: &TransitionMatrix) -> Result<()> {
    match dists.iter().find(|d| d.len() != m.size()) {
        Some(d) => Err(Error::Shape(format!("distribution over {} tags, matrix is {}x{}", d.len(), m.size(), m.size()))),
        None => Ok(()),
    }
}

fn bilinear_sum(dists: &[TagDistribution], m: &TransitionMatrix) -> f64 {
    let t = m.size();
    let probs = Tensor::from_vec(dists.len(), t, dists.iter().flat_map(|d| d.probs().iter().copied()).collect());
    adjacent_bilinear(&probs, &Tensor::from_vec(t, t, m.as_slice().to_vec()))
}

/// `KL(mean ‖ uniform)` of the batch-average distribution.
pub fn dist_loss(mean_dist: &TagDistribution) -> f64 {
    kl_to_uniform(mean_dist.probs())
}

/// `KL(p ‖ uniform)` for one uncovered token.
pub fn oov_loss(dist: &TagDistribution) -> f64 {
    kl_to_uniform(dist.probs())
}

/// Evaluates the objective on a batch of sentences without recording
/// gradients. `matches` is required in unsupervised mode, `gold` (tag
/// indices) in supervised mode.
pub fn total_loss(
    dists: &[Vec<TagDistribution>],
    matches: Option<&[Vec<RuleMatch>]>,
    m: &TransitionMatrix,
    weights: &LossWeights,
    mode: LossMode,
    gold: Option<&[Vec<usize>]>,
) -> Result<LossBreakdown> {
    let mut b = LossBreakdown { n_tokens: dists.iter().map(Vec::len).sum(), ..Default::default() };
    match mode {
        LossMode::Sft => {
            let gold = gold.ok_or_else(|| Error::Config("supervised loss needs gold tags".into()))?;
            check_aligned(dists, gold.iter().map(Vec::len))?;
            let nll: f64 = dists
                .iter()
                .zip(gold)
                .flat_map(|(ds, gs)| ds.iter().zip(gs))
                .map(|(d, &g)| set_nll(d.probs(), &[g]))
                .sum();
            b.ce = if b.n_tokens > 0 { nll / b.n_tokens as f64 } else { 0.0 };
            b.total = b.ce;
        }
        LossMode::Unsupervised => {
            let matches = matches.ok_or_else(|| Error::Config("unsupervised loss needs rule matches".into()))?;
            check_aligned(dists, matches.iter().map(Vec::len))?;
            let (mut lex, mut oov, mut syn) = (0.0, 0.0, 0.0);
            for (ds, ms) in dists.iter().zip(matches) {
                check_width(ds, m)?;
                for (d, rm) in ds.iter().zip(ms) {
                    match lex_loss(d, rm) {
                        Some(v) => {
                            lex += v;
                            b.n_lex += 1;
                        }
                        None => {
                            oov += oov_loss(d);
                            b.n_oov += 1;
                        }
                    }
                }
                if ds.len() >= 2 {
                    syn += bilinear_sum(ds, m);
                    b.n_pairs += ds.len() - 1;
                }
            }
            b.lex = mean(lex, b.n_lex);
            b.oov = mean(oov, b.n_oov);
            b.syn = mean(syn, b.n_pairs);
            b.dist = TagDistribution::mean(dists.iter().flatten()).map_or(0.0, |d| dist_loss(&d));
            b.total = weights.combine(b.lex, b.syn, b.dist, b.oov);
        }
    }
    Ok(b)
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn check_aligned(dists: &[Vec<TagDistribution>], lens: impl ExactSizeIterator<Item = usize>) -> Result<()> {
    if lens.len() != dists.len() {
        return Err(Error::Shape(format!("{} sentences but {} label rows", dists.len(), lens.len())));
    }
    for (ds, n) in dists.iter().zip(lens) {
        if ds.len() != n {
            return Err(Error::Shape(format!("{} distributions but {} labels", ds.len(), n)));
        }
    }
    Ok(())
}

/// Records the weighted rule objective for a batch of `N × |T|` probability
/// nodes and returns the scalar loss node with its breakdown.
pub fn r2t_objective(
    g: &mut Graph,
    probs: &[NodeId],
    matches: &[Vec<RuleMatch>],
    m: &TransitionMatrix,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    if probs.len() != matches.len() {
        return Err(Error::Shape(format!("{} sentences but {} match rows", probs.len(), matches.len())));
    }
    let mut b = LossBreakdown::default();
    let t = m.size();
    let matrix = g.constant(Tensor::from_vec(t, t, m.as_slice().to_vec()));
    let (mut lex_terms, mut oov_terms, mut syn_terms) = (Vec::new(), Vec::new(), Vec::new());
    for (&p, ms) in probs.iter().zip(matches) {
        let (n, cols) = g.value(p).shape();
        if n != ms.len() {
            return Err(Error::Shape(format!("{n} distributions but {} matches", ms.len())));
        }
        if cols != t {
            return Err(Error::Shape(format!("distribution over {cols} tags, matrix is {t}x{t}")));
        }
        b.n_tokens += n;
        let mut targets = Vec::new();
        let mut oov_rows = Vec::new();
        for (i, rm) in ms.iter().enumerate() {
            match rm.targets() {
                Some(ts) => targets.push((i, ts.to_vec())),
                None => oov_rows.push(i),
            }
        }
        b.n_lex += targets.len();
        b.n_oov += oov_rows.len();
        if !targets.is_empty() {
            lex_terms.push((g.set_nll(p, targets), 1.0));
        }
        if !oov_rows.is_empty() {
            oov_terms.push((g.kl_uniform(p, oov_rows), 1.0));
        }
        if n >= 2 {
            b.n_pairs += n - 1;
            syn_terms.push((g.adjacent_bilinear(p, matrix), 1.0));
        }
    }
    let component = |g: &mut Graph, terms: Vec<(NodeId, f64)>, count: usize| -> Option<NodeId> {
        if count == 0 {
            return None;
        }
        let s = g.weighted_sum(&terms);
        Some(g.scale(s, 1.0 / count as f64))
    };
    let lex = component(g, lex_terms, b.n_lex);
    let oov = component(g, oov_terms, b.n_oov);
    let syn = component(g, syn_terms, b.n_pairs);
    let dist = if b.n_tokens > 0 {
        let all = g.concat_rows(probs);
        let avg = g.mean_rows(all);
        Some(g.kl_uniform(avg, vec![0]))
    } else {
        None
    };
    let mut total_terms = Vec::new();
    for (node, w, slot) in [
        (lex, weights.alpha, &mut b.lex),
        (syn, weights.beta, &mut b.syn),
        (dist, weights.gamma, &mut b.dist),
        (oov, weights.delta, &mut b.oov),
    ] {
        if let Some(n) = node {
            *slot = g.value(n).item();
            total_terms.push((n, w));
        }
    }
    let total = g.weighted_sum(&total_terms);
    b.total = g.value(total).item();
    Ok((total, b))
}

/// Mean gold-tag negative log-likelihood over all tokens of the batch.
pub fn sft_objective(g: &mut Graph, probs: &[NodeId], gold: &[Vec<usize>]) -> Result<(NodeId, LossBreakdown)> {
    if probs.len() != gold.len() {
        return Err(Error::Shape(format!("{} sentences but {} gold rows", probs.len(), gold.len())));
    }
    let mut b = LossBreakdown::default();
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, tags) in probs.iter().zip(gold) {
        let (n, cols) = g.value(p).shape();
        if n != tags.len() {
            return Err(Error::Shape(format!("{n} distributions but {} gold tags", tags.len())));
        }
        if let Some(bad) = tags.iter().find(|&&t| t >= cols) {
            return Err(Error::Schema(format!("gold tag index {bad} outside {cols} classes")));
        }
        b.n_tokens += n;
        terms.push((g.set_nll(p, tags.iter().enumerate().map(|(i, &t)| (i, vec![t])).collect()), 1.0));
    }
    let s = g.weighted_sum(&terms);
    let total = g.scale(s, 1.0 / b.n_tokens.max(1) as f64);
    b.ce = g.value(total).item();
    b.total = b.ce;
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ParamSet;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> TagDistribution {
        TagDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lexical_values() {
        assert_eq!(lex_loss(&d(&[1.0, 0.0]), &RuleMatch::Unambiguous(0)), Some(0.0));
        let half = lex_loss(&d(&[0.5, 0.5]), &RuleMatch::Unambiguous(1)).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let amb = lex_loss(&d(&[0.1, 0.3, 0.6]), &RuleMatch::Ambiguous(vec![1, 2])).unwrap();
        assert!((amb - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert_eq!(lex_loss(&d(&[0.5, 0.5]), &RuleMatch::NoMatch), None);
        // zero probability is clamped rather than infinite
        let clamped = lex_loss(&d(&[1.0, 0.0]), &RuleMatch::Morphological(1)).unwrap();
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn syntactic_values() {
        // tags: DET=0 NOUN=1 VERB=2
        let m = TransitionMatrix::from_validity(3, &[0.5, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let det = TagDistribution::one_hot(3, 0);
        assert_eq!(syn_loss(&[det.clone(), TagDistribution::one_hot(3, 1)], &m).unwrap(), 0.0);
        assert_eq!(syn_loss(&[det.clone(), TagDistribution::one_hot(3, 2)], &m).unwrap(), 1.0);
        assert_eq!(syn_loss(&[det], &m).unwrap(), 0.0);
        let u = TagDistribution::uniform(3);
        let mean_m: f64 = m.as_slice().iter().sum::<f64>() / 9.0;
        assert!((syn_loss(&[u.clone(), u.clone(), u], &m).unwrap() - mean_m).abs() < 1e-15);
        assert!(matches!(syn_loss(&[TagDistribution::uniform(2)], &m), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_values() {
        assert_eq!(dist_loss(&TagDistribution::uniform(9)).abs() < 1e-15, true);
        assert!((dist_loss(&TagDistribution::one_hot(9, 4)) - 9f64.ln()).abs() < 1e-12);
        let v = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
        assert!((dist_loss(&d(&[0.5, 0.25, 0.25])) - v).abs() < 1e-15);
        assert!((v - 0.058_891_517_828_191_74).abs() < 1e-12);
        let w = 0.4 * 1.2f64.ln() + 0.6 * 0.9f64.ln();
        assert!((oov_loss(&d(&[0.4, 0.3, 0.3])) - w).abs() < 1e-15);
        // 0.0729290 - 0.0632163
        assert!((w - 0.009_712_313_322_886_08).abs() < 1e-12);
    }

    #[test]
    fn weighted_combination() {
        let w = LossWeights::default();
        assert_eq!(w.combine(0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((w.combine(1.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn covered_sentence_leaves_only_distributional_term() {
        let m = TransitionMatrix::from_validity(3, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let dists = vec![vec![TagDistribution::one_hot(3, 0), TagDistribution::one_hot(3, 1), TagDistribution::one_hot(3, 1)]];
        let matches = vec![vec![RuleMatch::Unambiguous(0), RuleMatch::Unambiguous(1), RuleMatch::Unambiguous(1)]];
        let w = LossWeights::default();
        let b = total_loss(&dists, Some(&matches), &m, &w, LossMode::Unsupervised, None).unwrap();
        assert_eq!((b.lex, b.syn, b.oov), (0.0, 0.0, 0.0));
        // mean distribution is (1/3, 2/3, 0)
        let expect = (1.0 / 3.0) * 1f64.ln() + (2.0 / 3.0) * 2f64.ln();
        assert!((b.dist - expect).abs() < 1e-12);
        assert!((b.total - w.gamma * expect).abs() < 1e-12);
    }

    #[test]
    fn sft_needs_gold() {
        let m = TransitionMatrix::uniform(2, 0.5).unwrap();
        let dists = vec![vec![d(&[0.25, 0.75])]];
        let w = LossWeights::default();
        assert!(matches!(total_loss(&dists, None, &m, &w, LossMode::Sft, None), Err(Error::Config(_))));
        let b = total_loss(&dists, None, &m, &w, LossMode::Sft, Some(&[vec![1]])).unwrap();
        assert!((b.total + 0.75f64.ln()).abs() < 1e-15);
    }

    fn arb_dist(t: usize) -> impl Strategy<Value = TagDistribution> {
        proptest::collection::vec(0.0f64..1.0, t).prop_map(|v| {
            let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
            let s: f64 = v.iter().sum();
            TagDistribution::new(v.into_iter().map(|x| x / s).collect()).unwrap()
        })
    }

    fn arb_batch() -> impl Strategy<Value = (usize, Vec<Vec<TagDistribution>>, Vec<Vec<RuleMatch>>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|t| {
            let sent = proptest::collection::vec((arb_dist(t), 0usize..4, 0..t, 0..t), 1..5);
            (
                Just(t),
                proptest::collection::vec(sent, 1..4),
                proptest::collection::vec(0.0f64..=1.0, t * t),
            )
                .prop_map(|(t, sents, m)| {
                    let mut dists = Vec::new();
                    let mut matches = Vec::new();
                    for s in sents {
                        let mut ds = Vec::new();
                        let mut ms = Vec::new();
                        for (dist, kind, a, b) in s {
                            ds.push(dist);
                            ms.push(match kind {
                                0 => RuleMatch::Unambiguous(a),
                                1 if a != b => RuleMatch::Ambiguous(vec![a.min(b), a.max(b)]),
                                2 => RuleMatch::Morphological(b),
                                _ => RuleMatch::NoMatch,
                            });
                        }
                        dists.push(ds);
                        matches.push(ms);
                    }
                    (t, dists, matches, m)
                })
        })
    }

    proptest! {
        #[test]
        fn graph_objective_matches_plain_route((t, dists, matches, mv) in arb_batch()) {
            let m = TransitionMatrix::from_invalidity(t, mv).unwrap();
            let w = LossWeights::default();
            let plain = total_loss(&dists, Some(&matches), &m, &w, LossMode::Unsupervised, None).unwrap();
            let params = ParamSet::new();
            let mut g = Graph::new(&params);
            let nodes: Vec<NodeId> = dists
                .iter()
                .map(|ds| g.constant(Tensor::from_vec(ds.len(), t, ds.iter().flat_map(|d| d.probs().to_vec()).collect())))
                .collect();
            let (_, b) = r2t_objective(&mut g, &nodes, &matches, &m, &w).unwrap();
            for (x, y) in [(b.lex, plain.lex), (b.syn, plain.syn), (b.dist, plain.dist), (b.oov, plain.oov), (b.total, plain.total)] {
                prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
            prop_assert_eq!((b.n_lex, b.n_oov, b.n_pairs, b.n_tokens), (plain.n_lex, plain.n_oov, plain.n_pairs, plain.n_tokens));
            prop_assert!(plain.lex >= 0.0 && plain.syn >= 0.0 && plain.dist >= -1e-15 && plain.oov >= -1e-15);
            prop_assert!((plain.total - w.combine(plain.lex, plain.syn, plain.dist, plain.oov)).abs() < 1e-12);
        }

        #[test]
        fn summing_mass_never_increases_nll(p in arb_dist(5), a in 0usize..5, b in 0usize..5) {
            prop_assume!(a != b);
            let amb = lex_loss(&p, &RuleMatch::Ambiguous(vec![a.min(b), a.max(b)])).unwrap();
            prop_assert!(amb <= lex_loss(&p, &RuleMatch::Unambiguous(a)).unwrap());
            prop_assert!(amb <= lex_loss(&p, &RuleMatch::Unambiguous(b)).unwrap());
        }

        #[test]
        fn dist_loss_ignores_token_order(mut ds in proptest::collection::vec(arb_dist(4), 1..8), k in 0usize..8) {
            let a = dist_loss(&TagDistribution::mean(&ds).unwrap());
            let n = ds.len();
            ds.rotate_left(k % n);
            ds.reverse();
            let b = dist_loss(&TagDistribution::mean(&ds).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn oov_loss_zero_only_at_uniform(p in arb_dist(4)) {
            let v = oov_loss(&p);
            prop_assert!(v >= -1e-15);
            let uniform = p.probs().iter().all(|&x| x == 0.25);
            prop_assert_eq!(v.abs() < 1e-15, uniform || v.abs() < 1e-15 && p.probs().iter().all(|&x| (x - 0.25).abs() < 1e-7));
        }

        #[test]
        fn valid_one_hot_chain_has_no_syntactic_penalty(tags in proptest::collection::vec(0usize..4, 2..8)) {
            let mut validity = vec![0.0; 16];
            for w in tags.windows(2) {
                validity[w[0] * 4 + w[1]] = 1.0;
            }
            let m = TransitionMatrix::from_validity(4, &validity).unwrap();
            let ds: Vec<TagDistribution> = tags.iter().map(|&t| TagDistribution::one_hot(4, t)).collect();
            prop_assert_eq!(syn_loss(&ds, &m).unwrap(), 0.0);
        }
    }
}
