//! A toy language with known ground truth: lexicons with tag-marking
//! suffixes, a first-order tag Markov chain, corpora sampled from it and
//! rule sets derived from it at a chosen coverage.
//!
//! Word forms are built from two disjoint alphabets: stems use common
//! consonants and vowels, suffixes use letters that never occur in stems,
//! so a suffix identifies its tag exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TaggedSentence, Tagset};
use crate::error::{Error, Result};
use crate::neural::EmbeddingTable;
use crate::rules::{AffixKind, RawMorphRule, RawTier4, RawTransition, RuleSet, RulesFile};

const CONSONANTS: &[u8] = b"bdfgklmnprst";
const VOWELS: &[u8] = b"aeiou";

/// Parameters of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub tags: Vec<String>,
    pub words_per_tag: usize,
    /// Fraction of word types that carry a second tag.
    pub ambiguity_fraction: f64,
    /// Characteristic suffixes, one list per tag.
    pub suffixes: Vec<Vec<String>>,
    /// Fraction of a tag's words that end in one of its suffixes.
    pub suffix_rate: f64,
    /// Sentence-initial tag probabilities.
    pub initial: Vec<f64>,
    /// `transitions[i][j] = P(tag j | tag i)`.
    pub transitions: Vec<Vec<f64>>,
    /// Stem length in syllables, inclusive.
    pub stem_syllables: (usize, usize),
    pub seed: u64,
}

impl GrammarSpec {
    /// Six tags with a plausible word-order chain.
    pub fn pos_default() -> Self {
        let tags = ["DET", "NOUN", "VERB", "ADJ", "PRON", "ADP"];
        let suffixes = [&["zy"][..], &["xc", "qh"], &["vy", "wx"], &["hz"], &["jy"], &["yq"]];
        #[rustfmt::skip]
        let transitions = vec![
            //     DET   NOUN  VERB  ADJ   PRON  ADP
            vec![0.00, 0.70, 0.00, 0.30, 0.00, 0.00], // DET
            vec![0.05, 0.10, 0.50, 0.00, 0.05, 0.30], // NOUN
            vec![0.40, 0.20, 0.00, 0.05, 0.15, 0.20], // VERB
            vec![0.00, 0.85, 0.00, 0.15, 0.00, 0.00], // ADJ
            vec![0.00, 0.00, 0.90, 0.00, 0.00, 0.10], // PRON
            vec![0.60, 0.30, 0.00, 0.00, 0.10, 0.00], // ADP
        ];
        Self {
            tags: tags.iter().map(|t| t.to_string()).collect(),
            words_per_tag: 40,
            ambiguity_fraction: 0.1,
            suffixes: suffixes.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect(),
            suffix_rate: 0.5,
            initial: vec![0.40, 0.20, 0.00, 0.10, 0.30, 0.00],
            transitions,
            stem_syllables: (1, 3),
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tags.len();
        let fail = |m: String| Err(Error::Config(m));
        Tagset::new(&self.tags)?;
        if !(0.0..1.0).contains(&self.ambiguity_fraction) {
            return fail(format!("ambiguity_fraction must lie in [0, 1), got {}", self.ambiguity_fraction));
        }
        if !(0.0..=1.0).contains(&self.suffix_rate) {
            return fail(format!("suffix_rate must lie in [0, 1], got {}", self.suffix_rate));
        }
        if self.words_per_tag == 0 {
            return fail("words_per_tag must be positive".into());
        }
        if self.stem_syllables.0 == 0 || self.stem_syllables.0 > self.stem_syllables.1 {
            return fail("stem_syllables must be a non-empty range of positive lengths".into());
        }
        if self.suffixes.len() != n || self.initial.len() != n || self.transitions.len() != n {
            return fail(format!("suffixes, initial and transitions need one entry per tag ({n})"));
        }
        let stem_letters: BTreeSet<char> = CONSONANTS.iter().chain(VOWELS).map(|&b| b as char).collect();
        for s in self.suffixes.iter().flatten() {
            if s.is_empty() || s.chars().any(|c| stem_letters.contains(&c)) {
                return fail(format!("suffix {s:?} must be non-empty and avoid stem letters"));
            }
        }
        for (i, row) in std::iter::once(&self.initial).chain(&self.transitions).enumerate() {
            if row.len() != n || row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("probability row {i} must have {n} non-negative entries summing to 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthWord {
    pub form: String,
    /// One tag, or two for ambiguous words.
    pub tags: Vec<usize>,
}

/// A generated language: its parameters plus the concrete lexicon.
#[derive(Debug, Clone)]
pub struct Grammar {
    spec: GrammarSpec,
    tagset: Tagset,
    words: Vec<SynthWord>,
    by_tag: Vec<Vec<usize>>,
}

fn stem<R: Rng>(rng: &mut R, syllables: (usize, usize)) -> String {
    let k = rng.random_range(syllables.0..=syllables.1);
    let mut s = String::with_capacity(2 * k);
    for _ in 0..k {
        s.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        s.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    s
}

impl Grammar {
    pub fn generate(spec: GrammarSpec) -> Result<Self> {
        spec.validate()?;
        let tagset = Tagset::new(&spec.tags)?;
        let n = tagset.len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(n * spec.words_per_tag);
        for t in 0..n {
            let mut made = 0;
            while made < spec.words_per_tag {
                let mut form = stem(&mut rng, spec.stem_syllables);
                if !spec.suffixes[t].is_empty() && rng.random::<f64>() < spec.suffix_rate {
                    form.push_str(spec.suffixes[t].choose(&mut rng).expect("non-empty"));
                }
                if seen.insert(form.clone()) {
                    words.push(SynthWord { form, tags: vec![t] });
                    made += 1;
                }
            }
        }
        let n_amb = (spec.ambiguity_fraction * words.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..words.len()).collect();
        order.shuffle(&mut rng);
        for &w in &order[..n_amb] {
            let first = words[w].tags[0];
            let mut second = rng.random_range(0..n - 1);
            if second >= first {
                second += 1;
            }
            words[w].tags.push(second);
            words[w].tags.sort_unstable();
        }
        let mut by_tag = vec![Vec::new(); n];
        for (i, w) in words.iter().enumerate() {
            for &t in &w.tags {
                by_tag[t].push(i);
            }
        }
        Ok(Self { spec, tagset, words, by_tag })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }

    pub fn words(&self) -> &[SynthWord] {
        &self.words
    }

    /// Samples sentences: tags from the Markov chain, then a uniformly
    /// chosen word that the tag may emit. Lengths are uniform in
    /// `len_range` (inclusive).
    pub fn sample_corpus(&self, n_sentences: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<TaggedSentence>> {
        if n_sentences == 0 {
            return Err(Error::EmptyInput);
        }
        if len_range.0 == 0 || len_range.0 > len_range.1 {
            return Err(Error::Config(format!("invalid sentence length range {len_range:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = WeightedIndex::new(&self.spec.initial).map_err(|e| Error::Config(e.to_string()))?;
        let rows = self
            .spec
            .transitions
            .iter()
            .map(WeightedIndex::new)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(n_sentences);
        for _ in 0..n_sentences {
            let len = rng.random_range(len_range.0..=len_range.1);
            let mut tags = Vec::with_capacity(len);
            let mut tokens = Vec::with_capacity(len);
            let mut t = initial.sample(&mut rng);
            for i in 0..len {
                if i > 0 {
                    t = rows[t].sample(&mut rng);
                }
                let w = *self.by_tag[t].choose(&mut rng).expect("every tag has words");
                tokens.push(self.words[w].form.clone());
                tags.push(self.tagset.name(t).to_string());
            }
            out.push(TaggedSentence::new(Sentence::from_tokens(&tokens)?, tags)?);
        }
        Ok(out)
    }

    /// Tier 1 holds `coverage` of the unambiguous words (chosen with
    /// `seed`), Tier 2 every ambiguous word, Tier 3 the suffix rules and
    /// Tier 4 the validity `P(next | prev) / max_row`.
    pub fn derive_rules(&self, coverage: f64, seed: u64) -> Result<RuleSet> {
        RuleSet::from_file(self.rules_file(coverage, seed)?)
    }

    pub fn rules_file(&self, coverage: f64, seed: u64) -> Result<RulesFile> {
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(Error::Config(format!("coverage must lie in (0, 1], got {coverage}")));
        }
        let name = |t: usize| self.tagset.name(t).to_string();
        let mut unambiguous: Vec<&SynthWord> = self.words.iter().filter(|w| w.tags.len() == 1).collect();
        unambiguous.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = (coverage * unambiguous.len() as f64).round() as usize;
        let tier1: BTreeMap<String, String> = unambiguous[..keep].iter().map(|w| (w.form.clone(), name(w.tags[0]))).collect();
        let tier2 = self
            .words
            .iter()
            .filter(|w| w.tags.len() > 1)
            .map(|w| (w.form.clone(), w.tags.iter().map(|&t| name(t)).collect()))
            .collect();
        let tier3 = self
            .spec
            .suffixes
            .iter()
            .enumerate()
            .flat_map(|(t, ss)| {
                ss.iter().map(move |s| RawMorphRule { kind: AffixKind::Suffix, pattern: s.clone(), tag: name(t), priority: 0 })
            })
            .collect();
        let n = self.tagset.len();
        let validity = self.validity();
        let overrides = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| RawTransition { from: name(i), to: name(j), validity: validity[i * n + j] })
            .collect();
        Ok(RulesFile {
            tagset: self.spec.tags.clone(),
            tier1,
            tier2,
            tier3,
            tier4: RawTier4 { default_validity: 0.5, overrides },
        })
    }

    /// Row-normalized transition validity `P(j | i) / max_k P(k | i)`.
    pub fn validity(&self) -> Vec<f64> {
        self.spec
            .transitions
            .iter()
            .flat_map(|row| {
                let max = row.iter().cloned().fold(0.0, f64::max);
                row.iter().map(move |&p| if max > 0.0 { p / max } else { 0.0 })
            })
            .collect()
    }

    /// Word vectors that cluster by tag: `signal · centroid(tags) + noise`,
    /// with unit-variance Gaussian centroids and noise. Ambiguous words sit
    /// between the centroids of their tags.
    pub fn embeddings(&self, dim: usize, signal: f64, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let centroids: Vec<Vec<f64>> = (0..self.tagset.len()).map(|_| gauss(dim)).collect();
        let entries = self
            .words
            .iter()
            .map(|w| {
                let noise = gauss(dim);
                let k = w.tags.len() as f64;
                let v = (0..dim)
                    .map(|d| signal * w.tags.iter().map(|&t| centroids[t][d]).sum::<f64>() / k + noise[d])
                    .collect();
                (w.form.clone(), v)
            })
            .collect();
        EmbeddingTable::new(dim, entries).expect("generated vectors are well-formed")
    }
}

/// Entity types and name lexicons for a BIO tagging task built on top of
/// a [`Grammar`]: sentences are sampled from the grammar (all tokens `O`)
/// and entity mentions are inserted at uniform positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NerSpec {
    pub types: Vec<String>,
    pub names_per_type: usize,
    /// Mention lengths in tokens, inclusive.
    pub span_len: (usize, usize),
    /// Mentions inserted per sentence, inclusive.
    pub spans_per_sentence: (usize, usize),
    pub seed: u64,
}

impl Default for NerSpec {
    fn default() -> Self {
        Self { types: vec!["PER".into(), "LOC".into()], names_per_type: 30, span_len: (1, 3), spans_per_sentence: (0, 2), seed: 11 }
    }
}

/// A BIO task: base-language words are `O`, entity names come from
/// per-type capitalized lexicons.
#[derive(Debug, Clone)]
pub struct NerTask {
    pub spec: NerSpec,
    grammar: Grammar,
    tagset: Tagset,
    names: Vec<Vec<String>>,
}

impl NerTask {
    pub fn new(grammar: Grammar, spec: NerSpec) -> Result<Self> {
        if spec.types.is_empty() || spec.names_per_type == 0 {
            return Err(Error::Config("NER task needs at least one type with names".into()));
        }
        if spec.span_len.0 == 0 || spec.span_len.0 > spec.span_len.1 || spec.spans_per_sentence.0 > spec.spans_per_sentence.1 {
            return Err(Error::Config("invalid NER span ranges".into()));
        }
        let mut tags = vec!["O".to_string()];
        for t in &spec.types {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        let tagset = Tagset::new(&tags)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut seen: BTreeSet<String> = grammar.words.iter().map(|w| w.form.clone()).collect();
        let mut names = Vec::new();
        for _ in &spec.types {
            let mut list = Vec::with_capacity(spec.names_per_type);
            while list.len() < spec.names_per_type {
                let s = stem(&mut rng, (2, 3));
                let mut c = s.chars();
                let form: String = c.next().expect("non-empty").to_uppercase().chain(c).collect();
                if seen.insert(form.to_lowercase()) {
                    list.push(form);
                }
            }
            names.push(list);
        }
        Ok(Self { spec, grammar, tagset, names })
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn sample_corpus(&self, n_sentences: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<TaggedSentence>> {
        let base = self.grammar.sample_corpus(n_sentences, len_range, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a4e);
        base.into_iter()
            .map(|s| {
                let mut tokens = s.tokens;
                let mut tags = vec!["O".to_string(); tokens.len()];
                let k = rng.random_range(self.spec.spans_per_sentence.0..=self.spec.spans_per_sentence.1);
                for _ in 0..k {
                    let ty = rng.random_range(0..self.spec.types.len());
                    let len = rng.random_range(self.spec.span_len.0..=self.spec.span_len.1);
                    // insert at a boundary outside existing mentions
                    let slots: Vec<usize> = (0..=tokens.len())
                        .filter(|&i| i == tokens.len() || !tags[i].starts_with("I-"))
                        .collect();
                    let at = *slots.choose(&mut rng).expect("end slot always exists");
                    for j in 0..len {
                        let name = self.names[ty].choose(&mut rng).expect("non-empty").clone();
                        let prefix = if j == 0 { "B" } else { "I" };
                        tokens.insert(at + j, name);
                        tags.insert(at + j, format!("{prefix}-{}", self.spec.types[ty]));
                    }
                }
                TaggedSentence::new(Sentence::from_tokens(&tokens)?, tags)
            })
            .collect()
    }

    /// Tier 1: every base word is `O`. Tier 2: every name is `{B-x, I-x}`.
    /// Tier 4 forbids `I-x` after anything but `B-x`/`I-x`.
    pub fn rules_file(&self) -> RulesFile {
        let tier1 = self.grammar.words.iter().map(|w| (w.form.clone(), "O".to_string())).collect();
        let tier2 = self
            .spec
            .types
            .iter()
            .zip(&self.names)
            .flat_map(|(t, ns)| ns.iter().map(move |n| (n.to_lowercase(), vec![format!("B-{t}"), format!("I-{t}")])))
            .collect();
        let tags = self.tagset.tags();
        let mut overrides = Vec::new();
        for from in tags {
            for to in tags {
                let valid = match to.strip_prefix("I-") {
                    Some(ty) => from == &format!("B-{ty}") || from == &format!("I-{ty}"),
                    None => true,
                };
                overrides.push(RawTransition { from: from.clone(), to: to.clone(), validity: if valid { 1.0 } else { 0.0 } });
            }
        }
        RulesFile {
            tagset: tags.to_vec(),
            tier1,
            tier2,
            tier3: Vec::new(),
            tier4: RawTier4 { default_validity: 1.0, overrides },
        }
    }

    pub fn rules(&self) -> Result<RuleSet> {
        RuleSet::from_file(self.rules_file())
    }

    /// Base-language vectors plus one cluster per entity type.
    pub fn embeddings(&self, dim: usize, signal: f64, seed: u64) -> EmbeddingTable {
        let base = self.grammar.embeddings(dim, signal, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe171);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let mut entries: Vec<(String, Vec<f64>)> =
            base.words().iter().map(|w| (w.clone(), base.lookup(w).to_vec())).collect();
        for ns in &self.names {
            let c = gauss(dim);
            for n in ns {
                let noise = gauss(dim);
                entries.push((n.clone(), (0..dim).map(|d| signal * c[d] + noise[d]).collect()));
            }
        }
        EmbeddingTable::new(dim, entries).expect("generated vectors are well-formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleMatch;

    fn grammar() -> Grammar {
        Grammar::generate(GrammarSpec::pos_default()).unwrap()
    }

    #[test]
    fn single_sentence() {
        let c = grammar().sample_corpus(1, (3, 3), 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 3);
    }

    #[test]
    fn deterministic() {
        let a = grammar().sample_corpus(20, (2, 9), 4).unwrap();
        let b = grammar().sample_corpus(20, (2, 9), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, grammar().sample_corpus(20, (2, 9), 5).unwrap());
    }

    #[test]
    fn bigram_frequencies_match_chain() {
        let g = grammar();
        let corpus = g.sample_corpus(10_000, (2, 12), 99).unwrap();
        let n = g.tagset().len();
        let mut counts = vec![vec![0usize; n]; n];
        for s in &corpus {
            for w in s.tags.windows(2) {
                counts[g.tagset().index_of(&w[0]).unwrap()][g.tagset().index_of(&w[1]).unwrap()] += 1;
            }
        }
        for (i, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let p = g.spec().transitions[i][j];
                assert!((c as f64 / total as f64 - p).abs() < 0.02, "{i}->{j}");
            }
        }
    }

    #[test]
    fn ambiguity_fraction_is_exact() {
        let g = grammar();
        let amb = g.words().iter().filter(|w| w.tags.len() == 2).count();
        assert_eq!(amb, (0.1 * g.words().len() as f64).round() as usize);
    }

    #[test]
    fn rules_agree_with_gold() {
        let g = grammar();
        let rules = g.derive_rules(0.85, 3).unwrap();
        for s in g.sample_corpus(300, (2, 10), 8).unwrap() {
            for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                let gold = g.tagset().index_of(tag).unwrap();
                match rules.match_token(tok) {
                    RuleMatch::Unambiguous(t) | RuleMatch::Morphological(t) => assert_eq!(t, gold, "{tok}"),
                    RuleMatch::Ambiguous(ts) => assert!(ts.contains(&gold)),
                    RuleMatch::NoMatch => {}
                }
            }
        }
    }

    #[test]
    fn coverage_controls_tier1() {
        let g = grammar();
        let unamb = g.words().iter().filter(|w| w.tags.len() == 1).count();
        assert_eq!(g.derive_rules(1.0, 0).unwrap().tier1_len(), unamb);
        assert!(g.derive_rules(1e-9, 0).unwrap().tier1_len() == 0);
        assert!(g.derive_rules(0.0, 0).is_err());
    }

    #[test]
    fn tier4_is_normalized_transition_probability() {
        let g = grammar();
        let rules = g.derive_rules(0.5, 0).unwrap();
        let m = rules.matrix();
        for (i, row) in g.spec().transitions.iter().enumerate() {
            let max = row.iter().cloned().fold(0.0, f64::max);
            for (j, p) in row.iter().enumerate() {
                assert!((m.get(i, j) - (1.0 - p / max)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embeddings_cover_lexicon() {
        let g = grammar();
        let e = g.embeddings(16, 1.0, 0);
        assert_eq!(e.len(), g.words().len());
        assert_eq!(e.dim(), 16);
    }

    #[test]
    fn ner_task_is_well_formed() {
        let task = NerTask::new(grammar(), NerSpec::default()).unwrap();
        let rules = task.rules().unwrap();
        let corpus = task.sample_corpus(200, (3, 8), 1).unwrap();
        let mut spans = 0;
        for s in &corpus {
            s.check_tags(task.tagset(), false).unwrap();
            let spans_here = crate::eval::extract_spans(&s.tags).unwrap();
            spans += spans_here.len();
            for w in s.tags.windows(2) {
                let (a, b) = (task.tagset().index_of(&w[0]).unwrap(), task.tagset().index_of(&w[1]).unwrap());
                assert_eq!(rules.matrix().get(a, b), 0.0, "{} -> {}", w[0], w[1]);
            }
        }
        assert!(spans > 100);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = GrammarSpec::pos_default();
        s.transitions[0][0] = 0.5;
        assert!(s.validate().is_err());
        let mut s = GrammarSpec::pos_default();
        s.suffixes[0] = vec!["ka".into()];
        assert!(s.validate().is_err());
        let mut s = GrammarSpec::pos_default();
        s.ambiguity_fraction = 1.0;
        assert!(s.validate().is_err());
    }
}
