//! Tagging metrics: word accuracy, per-tag and macro F1, confusion
//! matrices and exact-match BIO span F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{TaggedSentence, Tagset, OTHER_TAG};
use crate::error::{Error, Result};

/// Fraction of positions where `pred` equals `gold`; 0 for empty input.
pub fn word_accuracy<S: AsRef<str>, P: AsRef<str>>(gold: &[S], pred: &[P]) -> Result<f64> {
    check_len(gold.len(), pred.len())?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

fn check_len(g: usize, p: usize) -> Result<()> {
    if g != p {
        return Err(Error::Shape(format!("{g} gold tags but {p} predicted tags")));
    }
    Ok(())
}

/// Checks that two corpora hold the same sentences and flattens their tags.
pub fn align_corpora<'a>(gold: &'a [TaggedSentence], pred: &'a [TaggedSentence]) -> Result<(Vec<&'a str>, Vec<&'a str>)> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold sentences but {} predicted", gold.len(), pred.len())));
    }
    let mut g = Vec::new();
    let mut p = Vec::new();
    for (i, (a, b)) in gold.iter().zip(pred).enumerate() {
        if a.tokens != b.tokens {
            return Err(Error::Shape(format!("sentence {} differs between gold and prediction", i + 1)));
        }
        g.extend(a.tags.iter().map(String::as_str));
        p.extend(b.tags.iter().map(String::as_str));
    }
    Ok((g, p))
}

/// Counts of (gold, predicted) tag pairs. Predictions of `OTHER` land in a
/// separate column since `OTHER` is not a model class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tags: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub other: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.other.iter().sum::<usize>()
    }

    pub fn trace(&self) -> usize {
        (0..self.tags.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for t in &self.tags {
            write!(out, ",{t}").unwrap();
        }
        writeln!(out, ",{OTHER_TAG}").unwrap();
        for (i, t) in self.tags.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for c in &self.counts[i] {
                write!(out, ",{c}").unwrap();
            }
            writeln!(out, ",{}", self.other[i]).unwrap();
        }
        out
    }

    /// Row-normalized shading, one character per cell.
    pub fn render_heatmap(&self) -> String {
        const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];
        let width = self.tags.iter().map(|t| t.chars().count()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        write!(out, "{:>width$} ", "").unwrap();
        for t in self.tags.iter().map(String::as_str).chain([OTHER_TAG]) {
            write!(out, " {}", t.chars().next().unwrap_or(' ')).unwrap();
        }
        out.push('\n');
        for (i, t) in self.tags.iter().enumerate() {
            let row_total: usize = self.counts[i].iter().sum::<usize>() + self.other[i];
            write!(out, "{t:>width$} ").unwrap();
            for &c in self.counts[i].iter().chain([&self.other[i]]) {
                let shade = if row_total == 0 || c == 0 {
                    SHADES[0]
                } else {
                    let level = (c as f64 / row_total as f64 * 4.0).ceil() as usize;
                    SHADES[level.clamp(1, 4)]
                };
                write!(out, " {shade}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix<S: AsRef<str>, P: AsRef<str>>(gold: &[S], pred: &[P], tagset: &Tagset) -> Result<ConfusionMatrix> {
    check_len(gold.len(), pred.len())?;
    let n = tagset.len();
    let mut m = ConfusionMatrix { tags: tagset.tags().to_vec(), counts: vec![vec![0; n]; n], other: vec![0; n] };
    for (g, p) in gold.iter().zip(pred) {
        let gi = tag_index(tagset, g.as_ref(), false)?;
        match tag_index(tagset, p.as_ref(), true)? {
            Some(pi) => m.counts[gi.expect("gold is never OTHER")][pi] += 1,
            None => m.other[gi.expect("gold is never OTHER")] += 1,
        }
    }
    Ok(m)
}

fn tag_index(tagset: &Tagset, tag: &str, allow_other: bool) -> Result<Option<usize>> {
    match tagset.index_of(tag) {
        Some(i) => Ok(Some(i)),
        None if allow_other && tag == OTHER_TAG => Ok(None),
        None => Err(Error::Schema(format!("tag {tag:?} is not in the tagset"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagScore {
    pub tag: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagReport {
    pub per_tag: Vec<TagScore>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(correct, predicted);
    let r = ratio(correct, gold);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Per-tag precision/recall/F1 and their unweighted mean. Tags that occur
/// in neither gold nor prediction are left out of the mean; a predicted
/// `OTHER` counts as an error for the gold tag.
pub fn macro_f1<S: AsRef<str>, P: AsRef<str>>(gold: &[S], pred: &[P], tagset: &Tagset) -> Result<TagReport> {
    let confusion = confusion_matrix(gold, pred, tagset)?;
    let n = tagset.len();
    let mut per_tag = Vec::with_capacity(n);
    let mut f1s = Vec::new();
    for i in 0..n {
        let support: usize = confusion.counts[i].iter().sum::<usize>() + confusion.other[i];
        let predicted: usize = (0..n).map(|g| confusion.counts[g][i]).sum();
        let (precision, recall, f1) = prf(confusion.counts[i][i], predicted, support);
        if support + predicted > 0 {
            f1s.push(f1);
        }
        per_tag.push(TagScore { tag: tagset.name(i).to_string(), precision, recall, f1, support, predicted });
    }
    let macro_f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    let accuracy = word_accuracy(gold, pred)?;
    Ok(TagReport { per_tag, macro_f1, accuracy, confusion })
}

impl TagReport {
    /// Aligned-column table for terminals.
    pub fn render(&self) -> String {
        let w = self.per_tag.iter().map(|t| t.tag.len()).max().unwrap_or(3).max(9);
        let mut out = format!("{:<w$} {:>9} {:>9} {:>9} {:>8}\n", "tag", "precision", "recall", "f1", "support");
        for t in &self.per_tag {
            writeln!(out, "{:<w$} {:>9.4} {:>9.4} {:>9.4} {:>8}", t.tag, t.precision, t.recall, t.f1, t.support).unwrap();
        }
        writeln!(out, "{:<w$} {:>9.4}", "accuracy", self.accuracy).unwrap();
        writeln!(out, "{:<w$} {:>9.4}", "macro-f1", self.macro_f1).unwrap();
        out
    }
}

/// An entity mention covering tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_bio(tag: &str) -> Result<Bio<'_>> {
    if tag == "O" || tag == OTHER_TAG {
        return Ok(Bio::Outside);
    }
    match tag.split_once('-') {
        Some(("B", kind)) if !kind.is_empty() => Ok(Bio::Begin(kind)),
        Some(("I", kind)) if !kind.is_empty() => Ok(Bio::Inside(kind)),
        _ => Err(Error::Schema(format!("malformed BIO tag {tag:?}"))),
    }
}

/// Lenient BIO decoding: an `I-x` that does not continue an `x` span
/// opens a new one.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_bio(tag.as_ref())? {
            Bio::Outside => spans.extend(open.take()),
            Bio::Begin(kind) => {
                spans.extend(open.take());
                open = Some(Span { start: i, end: i, kind: kind.to_string() });
            }
            Bio::Inside(kind) => match open.as_mut() {
                Some(s) if s.kind == kind => s.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(Span { start: i, end: i, kind: kind.to_string() });
                }
            },
        }
    }
    spans.extend(open);
    Ok(spans)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl SpanScore {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let (precision, recall, f1) = prf(correct, predicted, gold);
        Self { precision, recall, f1, gold, predicted, correct }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanReport {
    pub per_type: BTreeMap<String, SpanScore>,
    pub micro: SpanScore,
}

impl SpanReport {
    pub fn render(&self) -> String {
        let w = self.per_type.keys().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{:<w$} {:>9} {:>9} {:>9} {:>6} {:>6} {:>7}\n", "type", "precision", "recall", "f1", "gold", "pred", "correct");
        let rows = self.per_type.iter().map(|(k, v)| (k.as_str(), v)).chain([("micro", &self.micro)]);
        for (k, s) in rows {
            writeln!(
                out,
                "{:<w$} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>7}",
                k, s.precision, s.recall, s.f1, s.gold, s.predicted, s.correct
            )
            .unwrap();
        }
        out
    }
}

/// Exact-match span scores over aligned sentences. `types`, when given,
/// restricts the admissible entity types.
pub fn span_f1<S: AsRef<str>, P: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<P>], types: Option<&[String]>) -> Result<SpanReport> {
    check_len(gold.len(), pred.len())?;
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    if let Some(ts) = types {
        for t in ts {
            counts.entry(t.clone()).or_default();
        }
    }
    for (g, p) in gold.iter().zip(pred) {
        check_len(g.len(), p.len())?;
        let gs: BTreeSet<Span> = extract_spans(g)?.into_iter().collect();
        let ps: BTreeSet<Span> = extract_spans(p)?.into_iter().collect();
        for s in gs.iter().chain(&ps) {
            if types.is_some_and(|ts| !ts.contains(&s.kind)) {
                return Err(Error::Schema(format!("unknown entity type {:?}", s.kind)));
            }
        }
        for s in &gs {
            counts.entry(s.kind.clone()).or_default().2 += 1;
        }
        for s in &ps {
            let e = counts.entry(s.kind.clone()).or_default();
            e.1 += 1;
            if gs.contains(s) {
                e.0 += 1;
            }
        }
    }
    let (mut c, mut p, mut g) = (0, 0, 0);
    let per_type = counts
        .into_iter()
        .map(|(k, (ci, pi, gi))| {
            c += ci;
            p += pi;
            g += gi;
            (k, SpanScore::from_counts(ci, pi, gi))
        })
        .collect();
    Ok(SpanReport { per_type, micro: SpanScore::from_counts(c, p, g) })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Per-tag F1, accuracy and macro F1 aggregated over several runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub per_tag: Vec<(String, MeanStd)>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
}

pub fn summarize_seeds(reports: &[TagReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    if reports.iter().any(|r| r.confusion.tags != first.confusion.tags) {
        return Err(Error::Shape("reports use different tagsets".into()));
    }
    let per_tag = first
        .per_tag
        .iter()
        .enumerate()
        .map(|(i, t)| (t.tag.clone(), MeanStd::of(&reports.iter().map(|r| r.per_tag[i].f1).collect::<Vec<_>>())))
        .collect();
    Ok(SeedSummary {
        runs: reports.len(),
        per_tag,
        accuracy: MeanStd::of(&reports.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
        macro_f1: MeanStd::of(&reports.iter().map(|r| r.macro_f1).collect::<Vec<_>>()),
    })
}

impl SeedSummary {
    /// One row: a column per tag, then accuracy and macro F1.
    pub fn render(&self) -> String {
        let mut head = String::from("runs");
        let mut row = format!("{:<4}", self.runs);
        for (tag, ms) in self.per_tag.iter().map(|(t, m)| (t.as_str(), m)).chain([("accuracy", &self.accuracy), ("macro-f1", &self.macro_f1)]) {
            let cell = ms.to_string();
            let w = cell.chars().count().max(tag.len());
            write!(head, " | {tag:>w$}").unwrap();
            write!(row, " | {cell:>w$}").unwrap();
        }
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(tags: &[&str]) -> Tagset {
        Tagset::new(tags).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(word_accuracy(&["A", "B"], &["A", "B"]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&["A", "A"], &["B", "B"]).unwrap(), 0.0);
        assert_eq!(word_accuracy(&["A", "B", "A", "B"], &["A", "B", "A", "A"]).unwrap(), 0.75);
        assert!(matches!(word_accuracy(&["A"], &["A", "B"]), Err(Error::Shape(_))));
    }

    #[test]
    fn macro_examples() {
        let t = ts(&["A", "B"]);
        assert_eq!(macro_f1(&["A", "B"], &["A", "B"], &t).unwrap().macro_f1, 1.0);
        assert_eq!(macro_f1(&["A", "A"], &["B", "B"], &t).unwrap().macro_f1, 0.0);
        let r = macro_f1(&["A", "A", "B"], &["A", "B", "B"], &t).unwrap();
        assert_eq!(r.per_tag[0].f1, 2.0 / 3.0);
        assert_eq!(r.per_tag[1].f1, 2.0 / 3.0);
        assert_eq!(r.macro_f1, 2.0 / 3.0);
        assert!(matches!(macro_f1(&["A"], &["Z"], &t), Err(Error::Schema(_))));
    }

    #[test]
    fn absent_tags_do_not_dilute_macro() {
        let t = ts(&["A", "B", "C"]);
        assert_eq!(macro_f1(&["A", "B"], &["A", "B"], &t).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn other_predictions_are_errors() {
        let t = ts(&["A", "B"]);
        let r = macro_f1(&["A", "B"], &["A", OTHER_TAG], &t).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion.other, vec![0, 1]);
        assert_eq!(r.per_tag[1].recall, 0.0);
        assert!(macro_f1(&[OTHER_TAG], &["A"], &t).is_err());
    }

    #[test]
    fn confusion_examples() {
        let t = ts(&["A", "B"]);
        let empty: [&str; 0] = [];
        let m = confusion_matrix(&empty, &empty, &t).unwrap();
        assert_eq!(m.counts, vec![vec![0, 0], vec![0, 0]]);
        let m = confusion_matrix(&["A", "A", "B", "B"], &["A", "B", "B", "A"], &t).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![1, 1]]);
        let m = confusion_matrix(&["A", "B", "B"], &["A", "B", "B"], &t).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0], vec![0, 2]]);
        assert_eq!(m.to_csv(), "gold\\pred,A,B,OTHER\nA,1,0,0\nB,0,2,0\n");
        assert_eq!(m.render_heatmap().lines().count(), 3);
    }

    #[test]
    fn span_examples() {
        let perfect = span_f1(&[vec!["B-PER", "I-PER", "O"]], &[vec!["B-PER", "I-PER", "O"]], None).unwrap();
        assert_eq!(perfect.micro.f1, 1.0);
        let shifted = span_f1(&[vec!["B-PER", "O", "O"]], &[vec!["O", "B-PER", "O"]], None).unwrap();
        assert_eq!(shifted.micro.f1, 0.0);
        let short = span_f1(&[vec!["B-PER", "I-PER", "O"]], &[vec!["B-PER", "O", "O"]], None).unwrap();
        let per = short.per_type["PER"];
        assert_eq!((per.precision, per.recall, per.f1), (0.0, 0.0, 0.0));
        assert!(matches!(span_f1(&[vec!["X-PER"]], &[vec!["O"]], None), Err(Error::Schema(_))));
        assert!(matches!(span_f1(&[vec!["B-ORG"]], &[vec!["O"]], Some(&["PER".to_string()])), Err(Error::Schema(_))));
    }

    #[test]
    fn lenient_decoding() {
        let spans = extract_spans(&["I-LOC", "I-LOC", "I-PER", "O", "B-PER", "B-PER"]).unwrap();
        let got: Vec<(usize, usize, &str)> = spans.iter().map(|s| (s.start, s.end, s.kind.as_str())).collect();
        assert_eq!(got, vec![(0, 1, "LOC"), (2, 2, "PER"), (4, 4, "PER"), (5, 5, "PER")]);
    }

    #[test]
    fn seed_aggregation() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        let t = ts(&["A", "B"]);
        let reports: Vec<TagReport> = [["A", "B"], ["A", "A"]]
            .iter()
            .map(|p| macro_f1(&["A", "B"], p, &t).unwrap())
            .collect();
        let s = summarize_seeds(&reports).unwrap();
        assert_eq!(s.accuracy.mean, 0.75);
        assert!(s.render().contains("macro-f1"));
    }
}
