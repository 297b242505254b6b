//! Pretrained word vectors in the word2vec/FastText text format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Frozen word vectors. Unknown words map to the mean of all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    oov: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut words = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (w, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!("vector for {w:?} has {} values, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite value in vector for {w:?}")));
            }
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), words.len());
            words.push(w);
            vectors.extend(v);
        }
        let mut oov = vec![0.0; dim];
        if !words.is_empty() {
            for row in vectors.chunks(dim) {
                for (o, x) in oov.iter_mut().zip(row) {
                    *o += x;
                }
            }
            let n = words.len() as f64;
            oov.iter_mut().for_each(|o| *o /= n);
        }
        Ok(Self { dim, words, index, vectors, oov })
    }

    /// A table with no vocabulary: every lookup yields the zero vector.
    pub fn empty(dim: usize) -> Self {
        Self::new(dim, Vec::new()).expect("empty table is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_vector(&self) -> &[f64] {
        &self.oov
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Exact match first, then the lowercased form, then the OOV vector.
    pub fn lookup(&self, word: &str) -> &[f64] {
        let idx = self
            .index
            .get(word)
            .or_else(|| self.index.get(&word.to_lowercase()));
        match idx {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.oov,
        }
    }

    pub(crate) fn raw_vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub(crate) fn from_raw(dim: usize, words: Vec<String>, vectors: Vec<f64>, oov: Vec<f64>) -> Result<Self> {
        if vectors.len() != words.len() * dim || oov.len() != dim {
            return Err(Error::Shape("embedding payload does not match vocabulary".into()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { dim, words, index, vectors, oov })
    }

    /// Writes the table in text format with a `V D` header line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.words.len(), self.dim).map_err(io)?;
        for (i, word) in self.words.iter().enumerate() {
            write!(w, "{word}").map_err(io)?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a text-format vector file: an optional `V D` header, then one
/// `word v1 … vD` line per entry. `expected_dim` is the configured word
/// embedding width.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim: Option<usize> = None;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            dim = Some(fields[1].parse().expect("checked above"));
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {d} values, found {}", values.len()),
            });
        }
        entries.push((fields[0].to_string(), values));
    }
    let dim = dim.unwrap_or(expected_dim);
    if dim != expected_dim {
        return Err(Error::Config(format!(
            "embedding file has dimension {dim}, model expects {expected_dim}"
        )));
    }
    EmbeddingTable::new(dim, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn line(word: &str, v: f64, d: usize) -> String {
        let vals: Vec<String> = (0..d).map(|k| format!("{}", v + k as f64)).collect();
        format!("{word} {}\n", vals.join(" "))
    }

    #[test]
    fn loads_300d_file_and_falls_back_to_mean() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("2 300\n{}{}", line("ni", 0.0, 300), line("no", 1.0, 300));
        let t = load_embeddings(write(&dir, "e.vec", &body), 300).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("ni")[5], 5.0);
        assert_eq!(t.lookup("absent"), t.oov_vector());
        assert_eq!(t.lookup("NI")[0], 0.0);
    }

    #[test]
    fn oov_vector_is_column_mean() {
        // columns: (1+4+7)/3 = 4, (2+(-5)+0.5)/3 = -0.8333.., (0+0+3)/3 = 1
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.vec", "a 1 2 0\nb 4 -5 0\nc 7 0.5 3\n");
        let t = load_embeddings(p, 3).unwrap();
        let oov = t.oov_vector();
        assert!((oov[0] - 4.0).abs() < 1e-15);
        assert!((oov[1] - (-2.5 / 3.0)).abs() < 1e-15);
        assert!((oov[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = write(&dir, "r.vec", "a 1 2 3\nb 1 2\n");
        assert!(matches!(load_embeddings(ragged, 3), Err(Error::Parse { line: 2, .. })));
        let header_mismatch = write(&dir, "h.vec", "1 3\na 1 2\n");
        assert!(matches!(load_embeddings(header_mismatch, 3), Err(Error::Parse { line: 2, .. })));
        let wrong = write(&dir, "w.vec", "a 1 2\n");
        assert!(matches!(load_embeddings(wrong, 300), Err(Error::Config(_))));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::new(2, vec![("x".into(), vec![0.1, 1e-300]), ("y".into(), vec![-3.5, 2.0])]).unwrap();
        let p = dir.path().join("t.vec");
        t.save(&p).unwrap();
        assert_eq!(load_embeddings(&p, 2).unwrap(), t);
    }
}
