//! Loading, validation, normalization and caching of embedding spaces and
//! bilingual dictionaries.
//!
//! The interchange format is the word2vec/fastText text layout: a header line
//! `count dim`, then one line per word with the token followed by `dim`
//! space-separated decimals, most frequent word first. A binary cache holds
//! the same content as raw little-endian `f32` values for fast reload.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::util::matrix_fingerprint;

const CACHE_MAGIC: &[u8; 4] = b"EMBC";
const CACHE_VERSION: u8 = 1;

/// How to renormalize the rows of a space after loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Scale every row to Euclidean norm 1.
    Unit,
    /// Subtract the columnwise mean, then scale rows to norm 1.
    CenterThenUnit,
    /// Leave the vectors untouched.
    None,
}

impl std::str::FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(NormalizeMode::Unit),
            "center_then_unit" => Ok(NormalizeMode::CenterThenUnit),
            "none" => Ok(NormalizeMode::None),
            other => Err(Error::InvalidInput(format!(
                "unknown normalization mode {other:?} (expected unit, center_then_unit or none)"
            ))),
        }
    }
}

/// A frequency-ordered vocabulary with one dense vector per word.
///
/// Row index equals frequency rank (0 = most frequent). Immutable once
/// constructed; all operations that change vectors return a new space.
#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    lang: String,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl EmbeddingSpace {
    /// Build a space from parts, validating the invariants: unique words,
    /// one row per word, finite components.
    pub fn new(lang: impl Into<String>, words: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if words.len() != vectors.nrows() {
            return Err(Error::Dimension {
                context: "embedding space rows",
                expected: words.len(),
                actual: vectors.nrows(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate word {w:?}")));
            }
        }
        if let Some(bad) = vectors.iter().position(|v| !v.is_finite()) {
            let row = bad / vectors.ncols().max(1);
            return Err(Error::Numerical(format!(
                "non-finite component in vector of word {:?}",
                words[row]
            )));
        }
        Ok(EmbeddingSpace {
            lang: lang.into(),
            words,
            index,
            vectors,
        })
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    /// Number of words.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Vector dimensionality d.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    /// Row index of `word`, if present.
    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(idx)
    }

    pub fn fingerprint(&self) -> u64 {
        matrix_fingerprint(
            self.vectors.nrows(),
            self.vectors.ncols(),
            self.vectors.as_slice().expect("contiguous"),
        )
    }

    /// Return a renormalized copy of the space.
    ///
    /// `Unit` scales every row to norm 1, `CenterThenUnit` first removes the
    /// columnwise mean, `None` returns the space unchanged. A row with zero
    /// norm is reported as an error naming the word.
    pub fn normalized(&self, mode: NormalizeMode) -> Result<EmbeddingSpace> {
        let mut vectors = self.vectors.clone();
        match mode {
            NormalizeMode::None => {}
            NormalizeMode::Unit => {
                unit_rows(&mut vectors, &self.words)?;
            }
            NormalizeMode::CenterThenUnit => {
                let mean = vectors.mean_axis(ndarray::Axis(0)).expect("non-empty");
                vectors -= &mean;
                unit_rows(&mut vectors, &self.words)?;
            }
        }
        Ok(EmbeddingSpace {
            lang: self.lang.clone(),
            words: self.words.clone(),
            index: self.index.clone(),
            vectors,
        })
    }
}

fn unit_rows(vectors: &mut Array2<f64>, words: &[String]) -> Result<()> {
    for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                word: words[i].clone(),
            });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Load a text-format embedding file, keeping at most `max_vocab` words.
///
/// The file must start with a `count dim` header. Values are parsed at `f32`
/// precision (the storage precision of both the text and cache formats) and
/// widened to `f64` for computation. With `lowercase` set, tokens are
/// lowercased and only the first occurrence of a resulting duplicate is kept;
/// plain duplicates are likewise resolved in favor of the first (most
/// frequent) occurrence.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    max_vocab: usize,
    lowercase: bool,
    lang: impl Into<String>,
) -> Result<EmbeddingSpace> {
    let path = path.as_ref();
    if max_vocab == 0 {
        return Err(Error::InvalidInput("max_vocab must be positive".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace();
    let (count, dim) = match (
        parts.next().and_then(|t| t.parse::<usize>().ok()),
        parts.next().and_then(|t| t.parse::<usize>().ok()),
        parts.next(),
    ) {
        (Some(c), Some(d), None) if d > 0 => (c, d),
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("malformed header {:?} (expected \"count dim\")", header.trim_end()),
            ))
        }
    };

    let mut words = Vec::new();
    let mut data = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut rows_read = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        if rows_read == count || words.len() == max_vocab {
            break;
        }
        let lineno = lineno + 2; // 1-based, after the header
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace();
        let token = tokens
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "empty line"))?;
        let token = if lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        };
        let mut components = 0usize;
        let keep = !seen.contains(&token);
        for t in tokens {
            let value: f32 = t.parse().map_err(|_| {
                Error::parse(path, lineno, format!("cannot parse component {t:?}"))
            })?;
            if !value.is_finite() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("non-finite component {t:?}"),
                ));
            }
            if keep {
                data.push(f64::from(value));
            }
            components += 1;
        }
        if components != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {dim} components, found {components}"),
            ));
        }
        rows_read += 1;
        if keep {
            seen.insert(token.clone());
            words.push(token);
        }
    }
    if rows_read < count && words.len() < max_vocab {
        return Err(Error::parse(
            path,
            rows_read + 1,
            format!("file ended after {rows_read} of {count} rows"),
        ));
    }
    if words.is_empty() {
        return Err(Error::parse(path, 1, "no rows loaded"));
    }
    let vectors = Array2::from_shape_vec((words.len(), dim), data).expect("shape");
    EmbeddingSpace::new(lang, words, vectors)
}

/// Write a space in the text format read by [`load_embeddings`].
///
/// Components are printed as shortest round-trip `f32` decimals, so a
/// load/save cycle reproduces tokens and values exactly.
pub fn save_embeddings(space: &EmbeddingSpace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    };
    write(&mut w, format!("{} {}\n", space.len(), space.dim()))?;
    let mut line = String::new();
    for (i, word) in space.words.iter().enumerate() {
        line.clear();
        line.push_str(word);
        for v in space.vectors.row(i) {
            line.push(' ');
            line.push_str(&format!("{}", *v as f32));
        }
        line.push('\n');
        write(&mut w, std::mem::take(&mut line))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the binary cache: magic, version byte, language tag, shape, raw
/// little-endian `f32` vectors, then length-prefixed tokens.
pub fn write_cache(space: &EmbeddingSpace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&[CACHE_VERSION]).map_err(io)?;
    let lang = space.lang.as_bytes();
    w.write_all(&(lang.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(lang).map_err(io)?;
    w.write_all(&(space.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(space.dim() as u64).to_le_bytes()).map_err(io)?;
    for v in space.vectors.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    for word in &space.words {
        let bytes = word.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Load a binary cache written by [`write_cache`].
pub fn read_cache(path: impl AsRef<Path>) -> Result<EmbeddingSpace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::parse(path, 0, msg);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated cache (magic)"))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("not an embedding cache (bad magic bytes)"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)
        .map_err(|_| bad("truncated cache (version)"))?;
    if version[0] != CACHE_VERSION {
        return Err(Error::parse(
            path,
            0,
            format!("unsupported cache version {}", version[0]),
        ));
    }
    let lang_len = read_u32(&mut r).ok_or_else(|| bad("truncated cache (lang)"))? as usize;
    let mut lang = vec![0u8; lang_len];
    r.read_exact(&mut lang).map_err(|_| bad("truncated cache (lang)"))?;
    let lang = String::from_utf8(lang).map_err(|_| bad("language tag is not UTF-8"))?;
    let count = read_u64(&mut r).ok_or_else(|| bad("truncated cache (count)"))? as usize;
    let dim = read_u64(&mut r).ok_or_else(|| bad("truncated cache (dim)"))? as usize;

    let mut data = Vec::with_capacity(count * dim);
    let mut buf = [0u8; 4];
    for _ in 0..count * dim {
        r.read_exact(&mut buf).map_err(|_| bad("truncated cache (vectors)"))?;
        data.push(f64::from(f32::from_le_bytes(buf)));
    }
    let mut words = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r).ok_or_else(|| bad("truncated cache (token)"))? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated cache (token)"))?;
        words.push(String::from_utf8(bytes).map_err(|_| bad("token is not UTF-8"))?);
    }
    let vectors = Array2::from_shape_vec((count, dim), data).expect("shape");
    EmbeddingSpace::new(lang, words, vectors)
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).ok()?;
    Some(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Option<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).ok()?;
    Some(u64::from_le_bytes(buf))
}

/// An ordered list of (source index, target index) pairs.
///
/// A source index may repeat: polysemous words keep every valid target.
/// Exact duplicate pairs are removed at construction.
#[derive(Clone, Debug)]
pub struct Dictionary {
    pairs: Vec<(usize, usize)>,
    src_lang: String,
    tgt_lang: String,
    /// Pairs dropped because either word was out of vocabulary.
    oov_dropped: usize,
    /// Source words from the input that retained no pair at all, in order of
    /// first appearance. Evaluation may count these as failed queries.
    unresolved_sources: Vec<String>,
}

impl Dictionary {
    /// Build a dictionary from index pairs, checking ranges against the two
    /// spaces and removing exact duplicates.
    pub fn from_pairs(
        pairs: Vec<(usize, usize)>,
        src: &EmbeddingSpace,
        tgt: &EmbeddingSpace,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(pairs.len());
        for (s, t) in pairs {
            if s >= src.len() {
                return Err(Error::InvalidInput(format!(
                    "source index {s} out of range for vocabulary of {}",
                    src.len()
                )));
            }
            if t >= tgt.len() {
                return Err(Error::InvalidInput(format!(
                    "target index {t} out of range for vocabulary of {}",
                    tgt.len()
                )));
            }
            if seen.insert((s, t)) {
                out.push((s, t));
            }
        }
        Ok(Dictionary {
            pairs: out,
            src_lang: src.lang.clone(),
            tgt_lang: tgt.lang.clone(),
            oov_dropped: 0,
            unresolved_sources: Vec::new(),
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }

    pub fn oov_dropped(&self) -> usize {
        self.oov_dropped
    }

    pub fn unresolved_sources(&self) -> &[String] {
        &self.unresolved_sources
    }
}

/// Load a dictionary file: one `source_word target_word` pair per line.
///
/// Pairs with an out-of-vocabulary word on either side are dropped and
/// counted, preserving the order of the surviving pairs. Exact duplicate
/// pairs are removed.
pub fn load_dictionary(
    path: impl AsRef<Path>,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
) -> Result<Dictionary> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut oov_dropped = 0usize;
    let mut source_state: HashMap<String, bool> = HashMap::new(); // word -> any pair retained
    let mut source_order = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace();
        let (sw, tw) = match (tokens.next(), tokens.next()) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::parse(
                    path,
                    lineno,
                    "expected two whitespace-separated words",
                ))
            }
        };
        if tokens.next().is_some() {
            return Err(Error::parse(
                path,
                lineno,
                "expected exactly two whitespace-separated words",
            ));
        }
        if !source_state.contains_key(sw) {
            source_state.insert(sw.to_string(), false);
            source_order.push(sw.to_string());
        }
        match (src.lookup(sw), tgt.lookup(tw)) {
            (Some(s), Some(t)) => {
                if seen.insert((s, t)) {
                    pairs.push((s, t));
                }
                source_state.insert(sw.to_string(), true);
            }
            _ => oov_dropped += 1,
        }
    }
    let unresolved_sources = source_order
        .into_iter()
        .filter(|w| !source_state[w])
        .collect();
    Ok(Dictionary {
        pairs,
        src_lang: src.lang.clone(),
        tgt_lang: tgt.lang.clone(),
        oov_dropped,
        unresolved_sources,
    })
}

/// Write a dictionary in the two-column text format.
pub fn save_dictionary(
    dict: &Dictionary,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(s, t) in &dict.pairs {
        writeln!(w, "{} {}", src.word(s), tgt.word(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
