//! The tagger network: character BiLSTM + frozen word vectors, a token
//! encoder (BiLSTM or Transformer) and a softmax output layer.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig};
use super::embeddings::EmbeddingTable;
use super::params::{ParamId, ParamSet};
use super::tape::{Graph, NodeId};
use super::tensor::Tensor;
use crate::corpus::{Sentence, Tagset};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A probability vector over the tagset.
#[derive(Debug, Clone, PartialEq)]
pub struct TagDistribution(Vec<f64>);

impl TagDistribution {
    /// Accepts non-negative entries summing to 1 within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("probabilities sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index and probability of the most likely tag; ties go to the lower index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }

    /// Element-wise mean of a non-empty set of distributions.
    pub fn mean<'a>(dists: impl IntoIterator<Item = &'a TagDistribution>) -> Option<Self> {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for d in dists {
            let a = acc.get_or_insert_with(|| vec![0.0; d.len()]);
            for (x, p) in a.iter_mut().zip(&d.0) {
                *x += p;
            }
            n += 1;
        }
        acc.map(|mut a| {
            a.iter_mut().for_each(|x| *x /= n as f64);
            Self(a)
        })
    }
}

/// Character inventory; index 0 is the unknown character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, index }
    }

    pub fn from_sentences(sentences: &[Sentence]) -> Self {
        Self::from_chars(sentences.iter().flat_map(|s| s.tokens.iter()).flat_map(|t| t.chars()))
    }

    /// Number of embedding rows, including the unknown slot.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, token: &str) -> Vec<usize> {
        token.chars().map(|c| self.index.get(&c).copied().unwrap_or(0)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Debug, Clone)]
enum Encoder {
    Recurrent { fw: LstmIds, bw: LstmIds },
    Transformer { proj_w: ParamId, proj_b: ParamId, layers: Vec<LayerIds>, lnf_g: ParamId, lnf_b: ParamId },
}

#[derive(Debug, Clone)]
struct Layout {
    char_emb: ParamId,
    char_fw: LstmIds,
    char_bw: LstmIds,
    encoder: Encoder,
    out_w: ParamId,
    out_b: ParamId,
}

fn add_lstm<R: Rng>(p: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> LstmIds {
    LstmIds {
        w_ih: p.add_uniform(format!("{prefix}.w_ih"), 4 * hidden, input, rng),
        w_hh: p.add_uniform(format!("{prefix}.w_hh"), 4 * hidden, hidden, rng),
        b: p.add_zeros(format!("{prefix}.b"), 1, 4 * hidden),
    }
}

fn init_params(config: &ModelConfig, char_vocab: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let ch = config.char_hidden();
    p.add_uniform("char.emb", char_vocab, config.char_input_dim, &mut rng);
    add_lstm(&mut p, "char.fw", config.char_input_dim, ch, &mut rng);
    add_lstm(&mut p, "char.bw", config.char_input_dim, ch, &mut rng);
    match config.architecture {
        Architecture::Recurrent => {
            add_lstm(&mut p, "tok.fw", config.input_dim(), config.token_hidden, &mut rng);
            add_lstm(&mut p, "tok.bw", config.input_dim(), config.token_hidden, &mut rng);
        }
        Architecture::Transformer => {
            let d = config.model_dim;
            p.add_uniform("proj.w", d, config.input_dim(), &mut rng);
            p.add_zeros("proj.b", 1, d);
            for l in 0..config.layers {
                let n = |s: &str| format!("layer{l}.{s}");
                p.add_ones(n("ln1.g"), 1, d);
                p.add_zeros(n("ln1.b"), 1, d);
                for w in ["q", "k", "v", "o"] {
                    p.add_uniform(n(&format!("w{w}")), d, d, &mut rng);
                    p.add_zeros(n(&format!("b{w}")), 1, d);
                }
                p.add_ones(n("ln2.g"), 1, d);
                p.add_zeros(n("ln2.b"), 1, d);
                p.add_uniform(n("ff1.w"), config.ff_dim, d, &mut rng);
                p.add_zeros(n("ff1.b"), 1, config.ff_dim);
                p.add_uniform(n("ff2.w"), d, config.ff_dim, &mut rng);
                p.add_zeros(n("ff2.b"), 1, d);
            }
            p.add_ones("final_ln.g", 1, d);
            p.add_zeros("final_ln.b", 1, d);
        }
    }
    p.add_uniform("out.w", config.num_tags, config.encoder_dim(), &mut rng);
    p.add_zeros("out.b", 1, config.num_tags);
    p
}

fn expected_shapes(config: &ModelConfig, char_vocab: usize) -> Vec<(String, (usize, usize))> {
    // shapes do not depend on the seed
    init_params(config, char_vocab, 0)
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape()))
        .collect()
}

fn layout(config: &ModelConfig, params: &ParamSet) -> Result<Layout> {
    let id = |name: String| params.id(&name).ok_or_else(|| Error::Key(format!("missing parameter {name}")));
    let lstm = |prefix: &str| -> Result<LstmIds> {
        Ok(LstmIds {
            w_ih: id(format!("{prefix}.w_ih"))?,
            w_hh: id(format!("{prefix}.w_hh"))?,
            b: id(format!("{prefix}.b"))?,
        })
    };
    let encoder = match config.architecture {
        Architecture::Recurrent => Encoder::Recurrent { fw: lstm("tok.fw")?, bw: lstm("tok.bw")? },
        Architecture::Transformer => {
            let mut layers = Vec::with_capacity(config.layers);
            for l in 0..config.layers {
                let n = |s: &str| id(format!("layer{l}.{s}"));
                layers.push(LayerIds {
                    ln1_g: n("ln1.g")?,
                    ln1_b: n("ln1.b")?,
                    wq: n("wq")?,
                    bq: n("bq")?,
                    wk: n("wk")?,
                    bk: n("bk")?,
                    wv: n("wv")?,
                    bv: n("bv")?,
                    wo: n("wo")?,
                    bo: n("bo")?,
                    ln2_g: n("ln2.g")?,
                    ln2_b: n("ln2.b")?,
                    ff1_w: n("ff1.w")?,
                    ff1_b: n("ff1.b")?,
                    ff2_w: n("ff2.w")?,
                    ff2_b: n("ff2.b")?,
                });
            }
            Encoder::Transformer {
                proj_w: id("proj.w".into())?,
                proj_b: id("proj.b".into())?,
                layers,
                lnf_g: id("final_ln.g".into())?,
                lnf_b: id("final_ln.b".into())?,
            }
        }
    };
    Ok(Layout {
        char_emb: id("char.emb".into())?,
        char_fw: lstm("char.fw")?,
        char_bw: lstm("char.bw")?,
        encoder,
        out_w: id("out.w".into())?,
        out_b: id("out.b".into())?,
    })
}

/// Sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            row[i] = angle.sin();
            if i + 1 < dim {
                row[i + 1] = angle.cos();
            }
        }
    }
    t
}

fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// A complete tagger: configuration, vocabularies and parameters.
#[derive(Debug, Clone)]
pub struct Tagger {
    config: ModelConfig,
    tagset: Tagset,
    chars: CharVocab,
    embeddings: EmbeddingTable,
    params: ParamSet,
    layout: Layout,
}

impl Tagger {
    /// Freshly initialized tagger. `embeddings` stay frozen.
    pub fn new(config: ModelConfig, tagset: Tagset, chars: CharVocab, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let params = init_params(&config, chars.size(), seed);
        Self::from_parts(config, tagset, chars, embeddings, params)
    }

    pub fn from_parts(
        config: ModelConfig,
        tagset: Tagset,
        chars: CharVocab,
        embeddings: EmbeddingTable,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        if config.num_tags != tagset.len() {
            return Err(Error::Config(format!(
                "model has {} output classes but the tagset has {} tags",
                config.num_tags,
                tagset.len()
            )));
        }
        if embeddings.dim() != config.word_emb_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match word_emb_dim {}",
                embeddings.dim(),
                config.word_emb_dim
            )));
        }
        let expected = expected_shapes(&config, chars.size());
        let actual: Vec<(String, (usize, usize))> = params.iter().map(|(n, t)| (n.to_string(), t.shape())).collect();
        if expected != actual {
            return Err(Error::Shape("parameter set does not match the model configuration".into()));
        }
        if !params.is_finite() {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        let layout = layout(&config, &params)?;
        Ok(Self { config, tagset, chars, embeddings, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }

    pub fn chars(&self) -> &CharVocab {
        &self.chars
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn run_lstm(g: &mut Graph, proj: NodeId, steps: usize, w_hh: NodeId, reverse: bool) -> Vec<NodeId> {
        let mut states = vec![None; steps];
        let mut prev = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let gates = g.row(proj, t);
            let s = g.lstm_step(gates, prev, w_hh);
            states[t] = Some(s);
            prev = Some(s);
        }
        states.into_iter().map(|s| s.expect("every step visited")).collect()
    }

    /// Final forward and backward states of the character BiLSTM, `1 × char_emb_dim`.
    pub fn encode_chars(&self, g: &mut Graph, token: &str) -> NodeId {
        let mut ids = self.chars.encode(token);
        if ids.is_empty() {
            ids.push(0);
        }
        let l = &self.layout;
        let h = self.config.char_hidden();
        let emb = g.param(l.char_emb);
        let x = g.gather_rows(emb, &ids);
        let mut finals = Vec::with_capacity(2);
        for (dir, reverse) in [(l.char_fw, false), (l.char_bw, true)] {
            let (wih, whh, b) = (g.param(dir.w_ih), g.param(dir.w_hh), g.param(dir.b));
            let proj = g.linear(x, wih, b);
            let states = Self::run_lstm(g, proj, ids.len(), whh, reverse);
            let last = if reverse { states[0] } else { states[ids.len() - 1] };
            finals.push(g.slice_cols(last, 0, h));
        }
        g.concat_cols(&finals)
    }

    /// Forward pass for a batch of sentences. Returns one `N × |T|`
    /// probability node per sentence. Dropout is active iff `dropout_rng`
    /// is given.
    pub fn forward_batch<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        batch: &[&[S]],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<NodeId>> {
        let mut char_cache: HashMap<&str, NodeId> = HashMap::new();
        let mut outputs = Vec::with_capacity(batch.len());
        for tokens in batch {
            if tokens.is_empty() {
                return Err(Error::EmptyInput);
            }
            if self.config.architecture == Architecture::Transformer && tokens.len() > self.config.max_len {
                return Err(Error::Length { len: tokens.len(), max: self.config.max_len });
            }
            let mut rows = Vec::with_capacity(tokens.len());
            for tok in tokens.iter() {
                let tok = tok.as_ref();
                let chars = match char_cache.get(tok) {
                    Some(&n) => n,
                    None => {
                        let n = self.encode_chars(g, tok);
                        char_cache.insert(tok, n);
                        n
                    }
                };
                let word = g.constant(Tensor::row_vector(self.embeddings.lookup(tok).to_vec()));
                rows.push(g.concat_cols(&[word, chars]));
            }
            let mut x = g.concat_rows(&rows);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = self.apply_dropout(g, x, rng);
            }
            let mut enc = self.encode_tokens(g, x, tokens.len());
            if let Some(rng) = dropout_rng.as_deref_mut() {
                enc = self.apply_dropout(g, enc, rng);
            }
            let (w, b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
            let logits = g.linear(enc, w, b);
            outputs.push(g.softmax_rows(logits));
        }
        Ok(outputs)
    }

    fn apply_dropout(&self, g: &mut Graph, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        if self.config.dropout == 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let mask = g.constant(dropout_mask(r, c, self.config.dropout, rng));
        g.mul(x, mask)
    }

    fn encode_tokens(&self, g: &mut Graph, x: NodeId, n: usize) -> NodeId {
        match &self.layout.encoder {
            Encoder::Recurrent { fw, bw } => {
                let h = self.config.token_hidden;
                let mut halves = Vec::with_capacity(2);
                for (dir, reverse) in [(fw, false), (bw, true)] {
                    let (wih, whh, b) = (g.param(dir.w_ih), g.param(dir.w_hh), g.param(dir.b));
                    let proj = g.linear(x, wih, b);
                    let states = Self::run_lstm(g, proj, n, whh, reverse);
                    let all = g.concat_rows(&states);
                    halves.push(g.slice_cols(all, 0, h));
                }
                g.concat_cols(&halves)
            }
            Encoder::Transformer { proj_w, proj_b, layers, lnf_g, lnf_b } => {
                let d = self.config.model_dim;
                let heads = self.config.heads;
                let dh = d / heads;
                let (pw, pb) = (g.param(*proj_w), g.param(*proj_b));
                let projected = g.linear(x, pw, pb);
                let pos = g.constant(sinusoidal_positions(n, d));
                let mut hcur = g.add(projected, pos);
                for l in layers {
                    let (g1, b1) = (g.param(l.ln1_g), g.param(l.ln1_b));
                    let a = g.layer_norm(hcur, g1, b1, LN_EPS);
                    let (wq, bq, wk, bk, wv, bv) =
                        (g.param(l.wq), g.param(l.bq), g.param(l.wk), g.param(l.bk), g.param(l.wv), g.param(l.bv));
                    let q = g.linear(a, wq, bq);
                    let k = g.linear(a, wk, bk);
                    let v = g.linear(a, wv, bv);
                    let mut head_out = Vec::with_capacity(heads);
                    for hd in 0..heads {
                        let qh = g.slice_cols(q, hd * dh, dh);
                        let kh = g.slice_cols(k, hd * dh, dh);
                        let vh = g.slice_cols(v, hd * dh, dh);
                        let scores = g.matmul_bt(qh, kh);
                        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                        let attn = g.softmax_rows(scores);
                        head_out.push(g.matmul(attn, vh));
                    }
                    let cat = g.concat_cols(&head_out);
                    let (wo, bo) = (g.param(l.wo), g.param(l.bo));
                    let attn_out = g.linear(cat, wo, bo);
                    hcur = g.add(hcur, attn_out);
                    let (g2, b2) = (g.param(l.ln2_g), g.param(l.ln2_b));
                    let bnorm = g.layer_norm(hcur, g2, b2, LN_EPS);
                    let (f1w, f1b, f2w, f2b) = (g.param(l.ff1_w), g.param(l.ff1_b), g.param(l.ff2_w), g.param(l.ff2_b));
                    let ff = g.linear(bnorm, f1w, f1b);
                    let ff = g.gelu(ff);
                    let ff = g.linear(ff, f2w, f2b);
                    hcur = g.add(hcur, ff);
                }
                let (fg, fb) = (g.param(*lnf_g), g.param(*lnf_b));
                g.layer_norm(hcur, fg, fb, LN_EPS)
            }
        }
    }

    /// Inference: per-token distributions with dropout disabled.
    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TagDistribution>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_batch(&mut g, &[tokens], None)?;
        let probs = g.value(out[0]);
        Ok((0..probs.rows()).map(|r| TagDistribution(probs.row(r).to_vec())).collect())
    }

    /// The forward contract: `train_mode` enables dropout drawn from `seed`.
    pub fn forward(&self, sentence: &Sentence, train_mode: bool, seed: u64) -> Result<Vec<TagDistribution>> {
        if !train_mode {
            return self.predict(&sentence.tokens);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(&self.params);
        let out = self.forward_batch(&mut g, &[&sentence.tokens], Some(&mut rng))?;
        let probs = g.value(out[0]);
        Ok((0..probs.rows()).map(|r| TagDistribution(probs.row(r).to_vec())).collect())
    }
}
