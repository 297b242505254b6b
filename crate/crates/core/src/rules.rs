//! The four-tier rule system.
//!
//! Tier 1 maps words to a single tag, Tier 2 maps words to a set of valid
//! tags, Tier 3 holds affix heuristics and Tier 4 scores tag bigrams. The
//! JSON layout mirrors the tiers one-to-one:
//!
//! ```json
//! {
//!   "tagset": ["PRON", "NOUN", "VERB", "AUX"],
//!   "tier1": {"ni": "PRON"},
//!   "tier2": {"no": ["AUX", "VERB"]},
//!   "tier3": [{"kind": "suffix", "pattern": "a", "tag": "NOUN", "priority": 0}],
//!   "tier4": {"default_validity": 0.5,
//!             "overrides": [{"from": "PRON", "to": "AUX", "validity": 1.0}]}
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Tagset};
use crate::error::{Error, Result};

pub const DEFAULT_VALIDITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffixKind {
    Suffix,
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MorphRule {
    pub kind: AffixKind,
    pub pattern: String,
    pub tag: usize,
    pub priority: i64,
}

impl MorphRule {
    fn matches(&self, token: &str) -> bool {
        match self.kind {
            AffixKind::Suffix => token.ends_with(&self.pattern),
            AffixKind::Prefix => token.starts_with(&self.pattern),
        }
    }
}

/// Invalidity scores `M[j][k] = 1 - validity(j -> k)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    invalidity: Vec<f64>,
}

impl TransitionMatrix {
    /// Builds a matrix from validity scores, all of which must lie in [0, 1].
    pub fn from_validity(size: usize, validity: &[f64]) -> Result<Self> {
        if validity.len() != size * size {
            return Err(Error::Shape(format!(
                "expected {} validity entries, got {}",
                size * size,
                validity.len()
            )));
        }
        if let Some(v) = validity.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("validity {v} outside [0, 1]")));
        }
        Ok(Self {
            size,
            invalidity: validity.iter().map(|v| 1.0 - v).collect(),
        })
    }

    pub fn from_invalidity(size: usize, invalidity: Vec<f64>) -> Result<Self> {
        if invalidity.len() != size * size {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                size * size,
                invalidity.len()
            )));
        }
        if let Some(v) = invalidity.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("invalidity {v} outside [0, 1]")));
        }
        Ok(Self { size, invalidity })
    }

    pub fn uniform(size: usize, validity: f64) -> Result<Self> {
        Self::from_validity(size, &vec![validity; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.invalidity[from * self.size + to]
    }

    pub fn validity(&self, from: usize, to: usize) -> f64 {
        1.0 - self.get(from, to)
    }

    /// Row-major invalidity entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.invalidity
    }
}

/// How a token is covered by Tiers 1–3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleMatch {
    Unambiguous(usize),
    /// Sorted, distinct tag indices (at least two).
    Ambiguous(Vec<usize>),
    Morphological(usize),
    /// Not covered by any lexical or morphological rule: the token is OOV.
    NoMatch,
}

impl RuleMatch {
    /// Tag indices the lexical loss rewards, or `None` for OOV tokens.
    pub fn targets(&self) -> Option<&[usize]> {
        match self {
            RuleMatch::Unambiguous(t) | RuleMatch::Morphological(t) => Some(std::slice::from_ref(t)),
            RuleMatch::Ambiguous(ts) => Some(ts),
            RuleMatch::NoMatch => None,
        }
    }

    pub fn is_oov(&self) -> bool {
        matches!(self, RuleMatch::NoMatch)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMorphRule {
    pub kind: AffixKind,
    pub pattern: String,
    pub tag: String,
    #[serde(default)]
    pub priority: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTransition {
    pub from: String,
    pub to: String,
    pub validity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTier4 {
    #[serde(default = "default_validity")]
    pub default_validity: f64,
    #[serde(default)]
    pub overrides: Vec<RawTransition>,
}

fn default_validity() -> f64 {
    DEFAULT_VALIDITY
}

impl Default for RawTier4 {
    fn default() -> Self {
        Self {
            default_validity: DEFAULT_VALIDITY,
            overrides: Vec::new(),
        }
    }
}

/// The on-disk rule file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesFile {
    pub tagset: Vec<String>,
    #[serde(default)]
    pub tier1: BTreeMap<String, String>,
    #[serde(default)]
    pub tier2: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub tier3: Vec<RawMorphRule>,
    #[serde(default)]
    pub tier4: RawTier4,
}

#[derive(Debug, Clone)]
pub struct RuleSet {
    tagset: Tagset,
    tier1: HashMap<String, usize>,
    tier2: HashMap<String, Vec<usize>>,
    /// Sorted by match precedence: longest pattern, then highest priority.
    tier3: Vec<MorphRule>,
    tier4: TransitionMatrix,
}

fn fold(word: &str) -> String {
    word.to_lowercase()
}

fn resolve(tagset: &Tagset, problems: &mut Vec<String>, name: &str, ctx: &str) -> Option<usize> {
    let idx = tagset.index_of(name);
    if idx.is_none() {
        problems.push(format!("{ctx}: unknown tag {name:?}"));
    }
    idx
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<RuleSet> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: RulesFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    RuleSet::from_file(file)
}

impl RuleSet {
    /// Validates a parsed rule file. Every unknown tag and out-of-range score
    /// is reported together as one `Validation` error; words claimed by more
    /// than one lexicon entry are reported as a `Conflict`.
    pub fn from_file(file: RulesFile) -> Result<Self> {
        let tagset = Tagset::new(&file.tagset)?;
        let mut problems = Vec::new();

        let mut conflicts = BTreeSet::new();
        let mut tier1 = HashMap::new();
        for (word, t) in &file.tier1 {
            let Some(t) = resolve(&tagset, &mut problems, t, &format!("tier1 {word:?}")) else { continue };
            if let Some(prev) = tier1.insert(fold(word), t) {
                if prev != t {
                    conflicts.insert(fold(word));
                }
            }
        }

        let mut tier2: HashMap<String, Vec<usize>> = HashMap::new();
        for (word, tags) in &file.tier2 {
            let mut set: Vec<usize> = tags
                .iter()
                .filter_map(|t| resolve(&tagset, &mut problems, t, &format!("tier2 {word:?}")))
                .collect();
            set.sort_unstable();
            set.dedup();
            if set.len() < 2 {
                problems.push(format!("tier2 {word:?}: needs at least 2 distinct tags"));
                continue;
            }
            let key = fold(word);
            if tier1.contains_key(&key) {
                conflicts.insert(key.clone());
            }
            if let Some(prev) = tier2.insert(key.clone(), set.clone()) {
                if prev != set {
                    conflicts.insert(key);
                }
            }
        }

        let mut tier3 = Vec::with_capacity(file.tier3.len());
        for (i, r) in file.tier3.iter().enumerate() {
            if r.pattern.is_empty() {
                problems.push(format!("tier3 rule {i}: empty pattern"));
                continue;
            }
            if let Some(t) = resolve(&tagset, &mut problems, &r.tag, &format!("tier3 rule {i}")) {
                tier3.push(MorphRule {
                    kind: r.kind,
                    pattern: r.pattern.clone(),
                    tag: t,
                    priority: r.priority,
                });
            }
        }
        // stable: declaration order breaks remaining ties
        tier3.sort_by(|a, b| {
            b.pattern
                .chars()
                .count()
                .cmp(&a.pattern.chars().count())
                .then(b.priority.cmp(&a.priority))
        });

        let n = tagset.len();
        let d = file.tier4.default_validity;
        if !(0.0..=1.0).contains(&d) {
            problems.push(format!("tier4 default_validity {d} outside [0, 1]"));
        }
        let mut validity = vec![d.clamp(0.0, 1.0); n * n];
        for o in &file.tier4.overrides {
            let ctx = format!("tier4 {}->{}", o.from, o.to);
            let from = resolve(&tagset, &mut problems, &o.from, &ctx);
            let to = resolve(&tagset, &mut problems, &o.to, &ctx);
            if !(0.0..=1.0).contains(&o.validity) {
                problems.push(format!("{ctx}: validity {} outside [0, 1]", o.validity));
                continue;
            }
            if let (Some(f), Some(t)) = (from, to) {
                validity[f * n + t] = o.validity;
            }
        }

        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        if !conflicts.is_empty() {
            return Err(Error::Conflict(conflicts.into_iter().collect()));
        }
        Ok(Self {
            tier4: TransitionMatrix::from_validity(n, &validity)?,
            tagset,
            tier1,
            tier2,
            tier3,
        })
    }

    /// Serializable form. Tier 4 is written out in full.
    pub fn to_file(&self) -> RulesFile {
        let name = |i: usize| self.tagset.name(i).to_string();
        let n = self.tagset.len();
        let mut overrides = Vec::new();
        for j in 0..n {
            for k in 0..n {
                overrides.push(RawTransition {
                    from: name(j),
                    to: name(k),
                    validity: self.tier4.validity(j, k),
                });
            }
        }
        RulesFile {
            tagset: self.tagset.tags().to_vec(),
            tier1: self.tier1.iter().map(|(w, &t)| (w.clone(), name(t))).collect(),
            tier2: self
                .tier2
                .iter()
                .map(|(w, ts)| (w.clone(), ts.iter().map(|&t| name(t)).collect()))
                .collect(),
            tier3: self
                .tier3
                .iter()
                .map(|r| RawMorphRule {
                    kind: r.kind,
                    pattern: r.pattern.clone(),
                    tag: name(r.tag),
                    priority: r.priority,
                })
                .collect(),
            tier4: RawTier4 {
                default_validity: DEFAULT_VALIDITY,
                overrides,
            },
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_file()).expect("rules serialize");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.tier4
    }

    pub fn tier1_len(&self) -> usize {
        self.tier1.len()
    }

    pub fn tier2_len(&self) -> usize {
        self.tier2.len()
    }

    pub fn morph_rules(&self) -> &[MorphRule] {
        &self.tier3
    }

    /// Precedence is Tier 1 > Tier 2 > Tier 3. Lexicon lookups fold case;
    /// affix patterns are matched against the token as written.
    pub fn match_token(&self, token: &str) -> RuleMatch {
        let key = fold(token);
        if let Some(&t) = self.tier1.get(&key) {
            return RuleMatch::Unambiguous(t);
        }
        if let Some(ts) = self.tier2.get(&key) {
            return RuleMatch::Ambiguous(ts.clone());
        }
        self.tier3
            .iter()
            .find(|r| r.matches(token))
            .map_or(RuleMatch::NoMatch, |r| RuleMatch::Morphological(r.tag))
    }

    pub fn match_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<RuleMatch> {
        tokens.iter().map(|t| self.match_token(t.as_ref())).collect()
    }

    pub fn transition_penalty(&self, from: &str, to: &str) -> Result<f64> {
        let f = self.tagset.index_of(from).ok_or_else(|| Error::Key(from.to_string()))?;
        let t = self.tagset.index_of(to).ok_or_else(|| Error::Key(to.to_string()))?;
        Ok(self.tier4.get(f, t))
    }

    pub fn coverage_report(&self, corpus: &[Sentence]) -> CoverageReport {
        let mut report = CoverageReport::default();
        for tok in corpus.iter().flat_map(|s| &s.tokens) {
            report.total += 1;
            match self.match_token(tok) {
                RuleMatch::Unambiguous(_) => report.tier1 += 1,
                RuleMatch::Ambiguous(_) => report.tier2 += 1,
                RuleMatch::Morphological(_) => report.tier3 += 1,
                RuleMatch::NoMatch => report.oov += 1,
            }
        }
        report
    }
}

/// Token counts per matching tier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub total: usize,
    pub tier1: usize,
    pub tier2: usize,
    pub tier3: usize,
    pub oov: usize,
}

impl CoverageReport {
    fn frac(&self, n: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            n as f64 / self.total as f64
        }
    }

    /// `(tier1, tier2, tier3, oov)` fractions of all tokens.
    pub fn fractions(&self) -> (f64, f64, f64, f64) {
        (
            self.frac(self.tier1),
            self.frac(self.tier2),
            self.frac(self.tier3),
            self.frac(self.oov),
        )
    }
}
