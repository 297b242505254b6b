//! Central finite differences against reverse-mode gradients of the full
//! rule objective on a miniature tagger.

use r2t_core::corpus::Tagset;
use r2t_core::loss::{r2t_objective, LossWeights};
use r2t_core::neural::{Architecture, CharVocab, EmbeddingTable, Graph, ModelConfig, NormPlacement, Tagger};
use r2t_core::rules::{RuleMatch, TransitionMatrix};

pub const H: f64 = 1e-4;
/// Gradients smaller than this in magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub struct Report {
    pub max_rel_error: f64,
    pub worst: String,
    pub scalars: usize,
}

pub fn mini_tagger(architecture: Architecture, seed: u64) -> Tagger {
    let config = ModelConfig {
        architecture,
        char_input_dim: 4,
        char_emb_dim: 4,
        word_emb_dim: 3,
        token_hidden: 8,
        model_dim: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        dropout: 0.0,
        num_tags: 3,
        max_len: 16,
        norm: NormPlacement::Pre,
    };
    let emb = EmbeddingTable::new(3, vec![("ka".into(), vec![0.3, -0.2, 0.5]), ("tu".into(), vec![-0.4, 0.1, 0.2])]).unwrap();
    Tagger::new(config, Tagset::new(&["A", "B", "C"]).unwrap(), CharVocab::from_chars("katuri".chars()), emb, seed).unwrap()
}

const SENTENCE: [&str; 4] = ["ka", "tu", "rik", "zz"];

fn matches() -> Vec<Vec<RuleMatch>> {
    vec![vec![RuleMatch::Unambiguous(0), RuleMatch::Ambiguous(vec![1, 2]), RuleMatch::Morphological(2), RuleMatch::NoMatch]]
}

fn matrix() -> TransitionMatrix {
    TransitionMatrix::from_invalidity(3, vec![0.0, 1.0, 0.3, 0.7, 0.0, 1.0, 0.2, 0.9, 0.5]).unwrap()
}

fn objective(tagger: &Tagger) -> f64 {
    let mut g = Graph::new(tagger.params());
    let probs = tagger.forward_batch(&mut g, &[&SENTENCE[..]], None).unwrap();
    let (loss, _) = r2t_objective(&mut g, &probs, &matches(), &matrix(), &LossWeights::default()).unwrap();
    g.value(loss).item()
}

pub fn check(mut tagger: Tagger) -> Report {
    let analytic = {
        let mut g = Graph::new(tagger.params());
        let probs = tagger.forward_batch(&mut g, &[&SENTENCE[..]], None).unwrap();
        let (loss, _) = r2t_objective(&mut g, &probs, &matches(), &matrix(), &LossWeights::default()).unwrap();
        g.backward(loss).unwrap()
    };
    let mut report = Report { max_rel_error: 0.0, worst: String::new(), scalars: 0 };
    let ids: Vec<_> = tagger.params().ids().collect();
    for id in ids {
        let len = tagger.params().get(id).len();
        for k in 0..len {
            let orig = tagger.params().get(id).data()[k];
            tagger.params_mut().get_mut(id).data_mut()[k] = orig + H;
            let up = objective(&tagger);
            tagger.params_mut().get_mut(id).data_mut()[k] = orig - H;
            let down = objective(&tagger);
            tagger.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.scalars += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{k}]: analytic {a:e}, numeric {numeric:e}", tagger.params().name(id));
            }
        }
    }
    report
}
