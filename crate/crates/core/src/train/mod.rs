//! Training loops: unsupervised rule-guided training and supervised
//! fine-tuning, both driven by Adam with global-norm clipping.

mod adam;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_gradients, OptimizerState, BETA1, BETA2, EPSILON};

use crate::corpus::{Sentence, TaggedSentence};
use crate::error::{Error, Result};
use crate::loss::{r2t_objective, sft_objective, LossBreakdown, LossMode, LossWeights};
use crate::neural::{Architecture, Graph, Tagger};
use crate::rules::{RuleMatch, RuleSet, TransitionMatrix};

/// Optimization hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    /// Scale of the rule objective added to cross-entropy during
    /// fine-tuning; 0 gives plain cross-entropy.
    #[serde(default)]
    pub sft_rule_weight: f64,
}

impl TrainConfig {
    /// Rule-guided BiLSTM regime: lr 1e-3, batch 256, 30 epochs.
    pub fn unsupervised() -> Self {
        Self {
            mode: LossMode::Unsupervised,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_grad_norm: 1.0,
            seed: 42,
            weights: LossWeights::default(),
            sft_rule_weight: 0.0,
        }
    }

    /// Fine-tuning regime: as above but 20 epochs of cross-entropy.
    pub fn sft() -> Self {
        Self { mode: LossMode::Sft, epochs: 20, ..Self::unsupervised() }
    }

    /// Transformer regime: lr 5e-5, batch 64.
    pub fn for_architecture(mode: LossMode, architecture: Architecture) -> Self {
        let base = match mode {
            LossMode::Unsupervised => Self::unsupervised(),
            LossMode::Sft => Self::sft(),
        };
        match architecture {
            Architecture::Recurrent => base,
            Architecture::Transformer => Self { learning_rate: 5e-5, batch_size: 64, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.max_grad_norm > 0.0) {
            return fail(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.sft_rule_weight >= 0.0 && self.sft_rule_weight.is_finite()) {
            return fail(format!("sft_rule_weight must be non-negative, got {}", self.sft_rule_weight));
        }
        self.weights.validate()
    }
}

/// Mean of the per-batch loss breakdowns of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub tagger: Tagger,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Called after every epoch with the epoch's log and the current model,
/// e.g. to write a checkpoint.
pub trait EpochHook: FnMut(&EpochLog, &Tagger) -> Result<()> {}
impl<F: FnMut(&EpochLog, &Tagger) -> Result<()>> EpochHook for F {}

/// A hook that does nothing.
pub fn no_hook(_: &EpochLog, _: &Tagger) -> Result<()> {
    Ok(())
}

enum Targets<'a> {
    Rules(&'a [Vec<RuleMatch>], &'a TransitionMatrix),
    Gold { gold: &'a [Vec<usize>], rules: Option<(&'a [Vec<RuleMatch>], &'a TransitionMatrix, f64)> },
}

/// Trains `tagger` on unlabeled sentences with the rule objective only.
pub fn train_unsupervised(
    tagger: Tagger,
    rules: &RuleSet,
    corpus: &[Sentence],
    config: &TrainConfig,
    on_epoch: impl EpochHook,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_tagset(&tagger, rules)?;
    let tokens: Vec<&[String]> = corpus.iter().map(|s| s.tokens.as_slice()).collect();
    let matches: Vec<Vec<RuleMatch>> = tokens.iter().map(|t| rules.match_sentence(t)).collect();
    let mut warnings = Vec::new();
    if matches.iter().flatten().all(RuleMatch::is_oov) {
        let msg = "degenerate rules: no token of the corpus is covered by tiers 1-3; the lexical term contributes nothing".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let skip_updates = config.weights.is_zero();
    run(tagger, &tokens, Targets::Rules(&matches, rules.matrix()), config, skip_updates, on_epoch, warnings)
}

/// Fine-tunes `tagger` on gold sentences with cross-entropy. When
/// `config.sft_rule_weight > 0` the rule objective (which then needs
/// `rules`) is added at that scale.
pub fn train_sft(
    tagger: Tagger,
    gold: &[TaggedSentence],
    rules: Option<&RuleSet>,
    config: &TrainConfig,
    on_epoch: impl EpochHook,
) -> Result<TrainOutcome> {
    config.validate()?;
    if gold.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tagset = tagger.tagset().clone();
    let mut indices = Vec::with_capacity(gold.len());
    for s in gold {
        s.check_tags(&tagset, false)?;
        indices.push(s.tags.iter().map(|t| tagset.index_of(t).expect("checked")).collect::<Vec<_>>());
    }
    let tokens: Vec<&[String]> = gold.iter().map(|s| s.tokens.as_slice()).collect();
    let rule_part = match (rules, config.sft_rule_weight > 0.0) {
        (Some(r), true) => {
            check_tagset(&tagger, r)?;
            Some((tokens.iter().map(|t| r.match_sentence(t)).collect::<Vec<_>>(), r.matrix()))
        }
        (None, true) => return Err(Error::Config("sft_rule_weight > 0 needs a rule set".into())),
        (_, false) => None,
    };
    let targets = Targets::Gold {
        gold: &indices,
        rules: rule_part.as_ref().map(|(m, matrix)| (m.as_slice(), *matrix, config.sft_rule_weight)),
    };
    run(tagger, &tokens, targets, config, false, on_epoch, Vec::new())
}

fn check_tagset(tagger: &Tagger, rules: &RuleSet) -> Result<()> {
    if tagger.tagset() != rules.tagset() {
        return Err(Error::Config("model and rule set use different tagsets".into()));
    }
    Ok(())
}

fn run(
    mut tagger: Tagger,
    tokens: &[&[String]],
    targets: Targets,
    config: &TrainConfig,
    skip_updates: bool,
    mut on_epoch: impl EpochHook,
    warnings: Vec<String>,
) -> Result<TrainOutcome> {
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut state = OptimizerState::new(tagger.params());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[String]> = chunk.iter().map(|&i| tokens[i]).collect();
            let (b, grads) = {
                let mut g = Graph::new(tagger.params());
                let probs = tagger.forward_batch(&mut g, &batch, Some(&mut dropout_rng))?;
                let (loss, b) = match &targets {
                    Targets::Rules(matches, matrix) => {
                        let bm: Vec<Vec<RuleMatch>> = chunk.iter().map(|&i| matches[i].clone()).collect();
                        r2t_objective(&mut g, &probs, &bm, matrix, &config.weights)?
                    }
                    Targets::Gold { gold, rules: extra } => {
                        let bg: Vec<Vec<usize>> = chunk.iter().map(|&i| gold[i].clone()).collect();
                        let (ce, mut b) = sft_objective(&mut g, &probs, &bg)?;
                        match extra {
                            Some((matches, matrix, w)) => {
                                let bm: Vec<Vec<RuleMatch>> = chunk.iter().map(|&i| matches[i].clone()).collect();
                                let (r, rb) = r2t_objective(&mut g, &probs, &bm, matrix, &config.weights)?;
                                let total = g.weighted_sum(&[(ce, 1.0), (r, *w)]);
                                b = LossBreakdown { ce: b.ce, total: g.value(total).item(), ..rb };
                                (total, b)
                            }
                            None => (ce, b),
                        }
                    }
                };
                if !b.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}")));
                }
                let grads = if skip_updates { None } else { Some(g.backward(loss)?) };
                (b, grads)
            };
            if let Some(mut grads) = grads {
                clip_gradients(&mut grads, config.max_grad_norm);
                adam_step(tagger.params_mut(), &grads, &mut state, config.learning_rate, config.weight_decay)?;
            }
            accumulate(&mut sum, &b);
            batches += 1;
        }
        let entry = EpochLog { epoch, loss: scale(sum, batches) };
        log::info!(
            "epoch {epoch}: total {:.6} lex {:.6} syn {:.6} dist {:.6} oov {:.6}",
            entry.loss.total,
            entry.loss.lex,
            entry.loss.syn,
            entry.loss.dist,
            entry.loss.oov
        );
        on_epoch(&entry, &tagger)?;
        log.push(entry);
    }
    Ok(TrainOutcome { tagger, log, warnings })
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.lex += b.lex;
    sum.syn += b.syn;
    sum.dist += b.dist;
    sum.oov += b.oov;
    sum.ce += b.ce;
    sum.total += b.total;
    sum.n_lex += b.n_lex;
    sum.n_pairs += b.n_pairs;
    sum.n_tokens += b.n_tokens;
    sum.n_oov += b.n_oov;
}

fn scale(mut b: LossBreakdown, batches: usize) -> LossBreakdown {
    let k = 1.0 / batches.max(1) as f64;
    b.lex *= k;
    b.syn *= k;
    b.dist *= k;
    b.oov *= k;
    b.ce *= k;
    b.total *= k;
    b
}

/// Training log as CSV with columns `epoch,lex,syn,dist,oov,total`.
/// Values use the shortest round-trip representation, so identical runs
/// give identical files.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lex,syn,dist,oov,total\n");
    for e in log {
        let l = &e.loss;
        writeln!(out, "{},{},{},{},{},{}", e.epoch, l.lex, l.syn, l.dist, l.oov, l.total).expect("write to string");
    }
    out
}

pub fn write_loss_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}
