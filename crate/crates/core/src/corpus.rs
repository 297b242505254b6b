//! Tokenization, tagsets and corpus file formats.
//!
//! Two on-disk formats are supported:
//!
//! * JSONL, one compact `{"text": .., "tokens": [..], "tags": [..]}` object
//!   per line (UTF-8, LF line endings);
//! * plain text, one pre-segmented sentence per line, for unlabeled data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Marker emitted by silver generation for low-confidence tokens.
///
/// Never a model class and never part of a [`Tagset`].
pub const OTHER_TAG: &str = "OTHER";

/// The default POS inventory.
pub const DEFAULT_POS_TAGS: [&str; 8] = ["PRON", "NOUN", "VERB", "ADJ", "AUX", "PART", "DET", "PUNCT"];

fn is_word_char(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        UppercaseLetter
            | LowercaseLetter
            | TitlecaseLetter
            | ModifierLetter
            | OtherLetter
            | NonspacingMark
            | SpacingMark
            | EnclosingMark
            | DecimalNumber
            | LetterNumber
            | OtherNumber
    )
}

/// Splits `text` into maximal runs of word characters (letters, marks,
/// digits) and maximal runs of other non-whitespace characters.
pub fn tokenize_wordpunct(text: &str) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_is_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        let word = is_word_char(c);
        if !current.is_empty() && word != current_is_word {
            tokens.push(std::mem::take(&mut current));
        }
        current_is_word = word;
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Ok(tokens)
}

/// An ordered inventory of tag names. Position defines the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagset {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tagset {
    pub fn new<S: AsRef<str>>(tags: &[S]) -> Result<Self> {
        if tags.len() < 2 {
            return Err(Error::Validation(format!(
                "a tagset needs at least 2 tags, got {}",
                tags.len()
            )));
        }
        let mut index = HashMap::with_capacity(tags.len());
        let mut owned = Vec::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::Validation("empty tag name".into()));
            }
            if t == OTHER_TAG {
                return Err(Error::Validation(format!("{OTHER_TAG} is reserved")));
            }
            if index.insert(t.to_string(), i).is_some() {
                return Err(Error::Validation(format!("duplicate tag {t}")));
            }
            owned.push(t.to_string());
        }
        Ok(Self { tags: owned, index })
    }

    pub fn default_pos() -> Self {
        Self::new(&DEFAULT_POS_TAGS).expect("default tagset is valid")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.tags[index]
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.index.contains_key(tag)
    }
}

impl Serialize for Tagset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tags.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tagset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tags = Vec::<String>::deserialize(d)?;
        Tagset::new(&tags).map_err(serde::de::Error::custom)
    }
}

/// A raw sentence and its tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Self {
            tokens: tokenize_wordpunct(text)?,
            text: text.to_string(),
        })
    }

    /// Builds a sentence from pre-split tokens; the text is the tokens
    /// joined by single spaces.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        Ok(Self {
            text: tokens.join(" "),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sentence with one tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub text: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(sentence: Sentence, tags: Vec<String>) -> Result<Self> {
        if sentence.tokens.len() != tags.len() {
            return Err(Error::Schema(format!(
                "{} tokens but {} tags",
                sentence.tokens.len(),
                tags.len()
            )));
        }
        Ok(Self {
            text: sentence.text,
            tokens: sentence.tokens,
            tags,
        })
    }

    pub fn sentence(&self) -> Sentence {
        Sentence {
            text: self.text.clone(),
            tokens: self.tokens.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every tag against `tagset`, optionally admitting `OTHER`.
    pub fn check_tags(&self, tagset: &Tagset, allow_other: bool) -> Result<()> {
        for tag in &self.tags {
            if !(tagset.contains(tag) || (allow_other && tag == OTHER_TAG)) {
                return Err(Error::Schema(format!("tag {tag:?} is not in the tagset")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    UnlabeledTrain,
    RuleDev,
    GoldTrain,
    GoldTest,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub sentences: Vec<TaggedSentence>,
}

/// Verifies that no sentence text appears in more than one split.
pub fn check_disjoint(splits: &[CorpusSplit]) -> Result<()> {
    let mut seen: HashMap<&str, SplitName> = HashMap::new();
    for split in splits {
        let mut local = HashSet::new();
        for s in &split.sentences {
            if !local.insert(s.text.as_str()) {
                continue;
            }
            if let Some(other) = seen.insert(s.text.as_str(), split.name) {
                return Err(Error::Validation(format!(
                    "sentence {:?} appears in both {:?} and {:?}",
                    s.text, other, split.name
                )));
            }
        }
    }
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaggedSentence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.tokens.len() != record.tags.len() {
            return Err(Error::Schema(format!(
                "line {}: {} tokens but {} tags",
                i + 1,
                record.tokens.len(),
                record.tags.len()
            )));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(sentences: &[TaggedSentence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        if s.tokens.len() != s.tags.len() {
            return Err(Error::Schema(format!(
                "{} tokens but {} tags",
                s.tokens.len(),
                s.tags.len()
            )));
        }
        let line = serde_json::to_string(s).expect("string fields always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one sentence per non-blank line and tokenizes it.
pub fn read_plain_text(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Sentence::from_text(&line)?);
    }
    Ok(out)
}

pub fn write_plain_text(sentences: &[Sentence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        writeln!(w, "{}", s.text).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads unlabeled sentences from either format, chosen by extension
/// (`.jsonl` keeps the stored tokens and drops the tags).
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(read_jsonl(path)?.iter().map(TaggedSentence::sentence).collect())
    } else {
        read_plain_text(path)
    }
}

/// Counts tags over a corpus. Every tagset tag is present in the result,
/// with zero when unseen.
pub fn tag_histogram(corpus: &[TaggedSentence], tagset: &Tagset) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = tagset.tags().iter().map(|t| (t.clone(), 0)).collect();
    for s in corpus {
        for t in &s.tags {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    counts
}
