//! Silver-standard annotation: tag raw text with a trained model and mark
//! low-confidence tokens as `OTHER`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{read_sentences, tag_histogram, write_jsonl, Sentence, TaggedSentence, Tagset, OTHER_TAG};
use crate::error::{Error, Result};
use crate::neural::{TagDistribution, Tagger};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilverConfig {
    /// Tokens whose top probability falls below this become `OTHER`.
    pub confidence_threshold: f64,
}

impl Default for SilverConfig {
    fn default() -> Self {
        Self { confidence_threshold: 0.5 }
    }
}

impl SilverConfig {
    pub fn new(confidence_threshold: f64) -> Result<Self> {
        let c = Self { confidence_threshold };
        c.validate()?;
        Ok(c)
    }

    /// The threshold must lie in `[0, 1]`; 0 disables `OTHER` entirely.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Greedy decoding: argmax (lowest index on ties), or `OTHER` below the
/// threshold.
pub fn decode(dists: &[TagDistribution], tagset: &Tagset, threshold: f64) -> Vec<String> {
    dists
        .iter()
        .map(|d| {
            let (k, p) = d.argmax();
            if p < threshold {
                OTHER_TAG.to_string()
            } else {
                tagset.name(k).to_string()
            }
        })
        .collect()
}

pub fn tag_sentence(tagger: &Tagger, config: &SilverConfig, sentence: &Sentence) -> Result<TaggedSentence> {
    if sentence.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dists = tagger.predict(&sentence.tokens)?;
    TaggedSentence::new(sentence.clone(), decode(&dists, tagger.tagset(), config.confidence_threshold))
}

/// Counts written next to a silver corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverSummary {
    pub sentences: usize,
    pub tokens: usize,
    pub confidence_threshold: f64,
    /// Per-tag counts, `OTHER` included.
    pub histogram: BTreeMap<String, usize>,
    pub other_fraction: f64,
}

pub fn tag_corpus(tagger: &Tagger, config: &SilverConfig, sentences: &[Sentence]) -> Result<(Vec<TaggedSentence>, SilverSummary)> {
    config.validate()?;
    let tagged = sentences
        .iter()
        .map(|s| tag_sentence(tagger, config, s))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = tag_histogram(&tagged, tagger.tagset());
    histogram.entry(OTHER_TAG.to_string()).or_insert(0);
    let tokens: usize = tagged.iter().map(TaggedSentence::len).sum();
    let other = histogram[OTHER_TAG];
    let summary = SilverSummary {
        sentences: tagged.len(),
        tokens,
        confidence_threshold: config.confidence_threshold,
        histogram,
        other_fraction: if tokens == 0 { 0.0 } else { other as f64 / tokens as f64 },
    };
    Ok((tagged, summary))
}

/// Sidecar location for a silver file: `out.jsonl` → `out.summary.json`.
pub fn summary_path(output: &Path) -> PathBuf {
    output.with_extension("summary.json")
}

/// Tags every sentence of `input` (plain text or JSONL), writes the JSONL
/// corpus to `output` and the summary to [`summary_path`].
pub fn generate_silver(tagger: &Tagger, config: &SilverConfig, input: &Path, output: &Path) -> Result<SilverSummary> {
    let sentences = read_sentences(input)?;
    let (tagged, summary) = tag_corpus(tagger, config, &sentences)?;
    write_jsonl(&tagged, output)?;
    let sidecar = summary_path(output);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::read_jsonl;
    use crate::neural::{Architecture, CharVocab, EmbeddingTable, ModelConfig, NormPlacement};

    fn d(v: &[f64]) -> TagDistribution {
        TagDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn decoding_rules() {
        let t = Tagset::new(&["NOUN", "VERB", "DET"]).unwrap();
        let dists = [d(&[0.97, 0.02, 0.01]), d(&[0.3, 0.25, 0.45]), d(&[0.4, 0.4, 0.2])];
        assert_eq!(decode(&dists, &t, 0.5), vec!["NOUN", "OTHER", "OTHER"]);
        assert_eq!(decode(&dists, &t, 0.0), vec!["NOUN", "DET", "NOUN"]);
    }

    #[test]
    fn threshold_bounds() {
        assert!(SilverConfig::new(1.01).is_err());
        assert!(SilverConfig::new(-0.1).is_err());
        assert!(SilverConfig::new(0.0).is_ok() && SilverConfig::new(1.0).is_ok());
        assert_eq!(SilverConfig::default().confidence_threshold, 0.5);
    }

    #[test]
    fn end_to_end_file() {
        let cfg = ModelConfig {
            architecture: Architecture::Recurrent,
            char_input_dim: 3,
            char_emb_dim: 4,
            word_emb_dim: 2,
            token_hidden: 4,
            model_dim: 4,
            layers: 1,
            heads: 1,
            ff_dim: 4,
            dropout: 0.0,
            num_tags: 3,
            max_len: 8,
            norm: NormPlacement::Pre,
        };
        let tagger = Tagger::new(
            cfg,
            Tagset::new(&["A", "B", "C"]).unwrap(),
            CharVocab::from_chars("abc".chars()),
            EmbeddingTable::empty(2),
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("raw.txt");
        std::fs::write(&input, "a bc, cab.\n").unwrap();
        let out = dir.path().join("silver.jsonl");
        let summary = generate_silver(&tagger, &SilverConfig::new(0.0).unwrap(), &input, &out).unwrap();
        let back = read_jsonl(&out).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].text, "a bc, cab.");
        assert_eq!(summary.histogram.values().sum::<usize>(), summary.tokens);
        assert_eq!(summary.histogram[OTHER_TAG], 0);
        assert!(summary_path(&out).exists());
        assert!(matches!(tag_sentence(&tagger, &SilverConfig::default(), &Sentence { text: String::new(), tokens: vec![] }), Err(Error::EmptyInput)));
    }
}
