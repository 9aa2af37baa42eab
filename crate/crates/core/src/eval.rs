//! Evaluation of a bilingual mapping: word translation precision,
//! cross-lingual word similarity, sentence translation retrieval, and
//! word-by-word translation scored with corpus BLEU.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::embed::{Dictionary, EmbeddingSpace};
use crate::error::{Error, Result};
use crate::linmap::MappingMatrix;
use crate::metric::{self, Method, MetricConfig, Translator};

/// Precision@k figures for one retrieval configuration.
#[derive(Clone, Debug, Serialize)]
pub struct PrecisionReport {
    /// k -> fraction of queries with a gold target in the top k.
    pub p_at: BTreeMap<usize, f64>,
    /// Unique in-vocabulary query words.
    pub queries: usize,
    /// Query words that lost every gold pair to vocabulary truncation.
    pub oov_queries: usize,
    /// Whether the OOV queries were counted as failures in the denominator.
    pub oov_counted_as_wrong: bool,
}

/// Word translation precision@k.
///
/// Queries are the unique source words of the dictionary; a query counts as
/// correct at k when ANY of its gold targets appears in the top-k retrieved
/// targets. Source words whose every pair was dropped at load time are
/// counted as failures by default (`count_oov_as_wrong`), and reported
/// separately either way.
pub fn word_translation_precision(
    dict: &Dictionary,
    w: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    method: Method,
    ks: &[usize],
    cfg: MetricConfig,
    count_oov_as_wrong: bool,
) -> Result<PrecisionReport> {
    if ks.is_empty() {
        return Err(Error::InvalidInput("no precision cutoffs requested".into()));
    }
    let oov = dict.unresolved_sources().len();
    if dict.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no usable queries: dictionary is empty ({oov} queries out of vocabulary)"
        )));
    }
    let mut gold: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, t) in dict.pairs() {
        gold.entry(s).or_default().push(t);
    }
    let queries: Vec<usize> = gold.keys().copied().collect();
    let k_max = *ks.iter().max().expect("non-empty");

    let mut translator = Translator::new(w, src, tgt, cfg)?;
    let result = translator.translate(&queries, method, k_max.min(tgt.len()))?;

    let mut correct_at: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (q, ranked) in queries.iter().zip(&result.ranked) {
        let targets = &gold[q];
        for (&k, correct) in correct_at.iter_mut() {
            let hit = ranked
                .iter()
                .take(k)
                .any(|(t, _)| targets.contains(t));
            if hit {
                *correct += 1;
            }
        }
    }
    let denom = queries.len() + if count_oov_as_wrong { oov } else { 0 };
    let p_at = correct_at
        .into_iter()
        .map(|(k, c)| (k, c as f64 / denom as f64))
        .collect();
    Ok(PrecisionReport {
        p_at,
        queries: queries.len(),
        oov_queries: oov,
        oov_counted_as_wrong: count_oov_as_wrong,
    })
}

/// Pearson correlation coefficient of two equal-length series.
///
/// Fails on fewer than two points or zero variance in either series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            context: "pearson series",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs at least two points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical(
            "zero variance: correlation is undefined".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A word-similarity dataset: word pairs with human-assigned scores.
#[derive(Clone, Debug)]
pub struct WordSimDataset {
    pub entries: Vec<(String, String, f64)>,
}

impl WordSimDataset {
    /// Load `word1 word2 score` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<WordSimDataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut t = line.split_whitespace();
            match (t.next(), t.next(), t.next().map(str::parse::<f64>)) {
                (Some(a), Some(b), Some(Ok(score))) if score.is_finite() => {
                    entries.push((a.to_string(), b.to_string(), score));
                }
                _ => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        "expected \"word1 word2 score\"",
                    ))
                }
            }
        }
        Ok(WordSimDataset { entries })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WordSimReport {
    pub pearson_r: f64,
    pub pairs_used: usize,
    pub oov_pairs: usize,
}

/// Pearson correlation between mapped cosine similarities and human scores.
/// Pairs with an out-of-vocabulary word are excluded and counted.
pub fn wordsim_pearson(
    ds: &WordSimDataset,
    w: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
) -> Result<WordSimReport> {
    let mut model = Vec::new();
    let mut human = Vec::new();
    let mut oov = 0usize;
    for (a, b, score) in &ds.entries {
        match (src.lookup(a), tgt.lookup(b)) {
            (Some(s), Some(t)) => {
                let mapped = w.apply_vec(&src.vector(s).to_owned())?;
                let y = tgt.vector(t);
                let mn = mapped.iter().map(|v| v * v).sum::<f64>().sqrt();
                let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot = mapped.iter().zip(y.iter()).map(|(p, q)| p * q).sum::<f64>();
                model.push(dot / (mn * yn));
                human.push(*score);
            }
            _ => oov += 1,
        }
    }
    if model.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "only {} in-vocabulary pairs (need at least 2)",
            model.len()
        )));
    }
    Ok(WordSimReport {
        pearson_r: pearson(&model, &human)?,
        pairs_used: model.len(),
        oov_pairs: oov,
    })
}

/// Inverse-document-frequency weights estimated on a held-out corpus.
#[derive(Clone, Debug)]
pub struct IdfWeights {
    n_sentences: usize,
    df: HashMap<String, usize>,
}

impl IdfWeights {
    /// Count document frequencies over the given sentences.
    pub fn from_corpus<S: AsRef<str>>(sentences: &[Vec<S>]) -> Result<IdfWeights> {
        if sentences.is_empty() {
            return Err(Error::InvalidInput("empty idf corpus".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        for sent in sentences {
            let mut seen = std::collections::HashSet::new();
            for tok in sent {
                if seen.insert(tok.as_ref()) {
                    *df.entry(tok.as_ref().to_string()).or_insert(0) += 1;
                }
            }
        }
        Ok(IdfWeights {
            n_sentences: sentences.len(),
            df,
        })
    }

    /// `log(N / df)`. Words unseen in the idf corpus get `log(N)` and the
    /// flag is set.
    pub fn weight(&self, word: &str) -> (f64, bool) {
        match self.df.get(word) {
            Some(&df) => ((self.n_sentences as f64 / df as f64).ln(), false),
            None => ((self.n_sentences as f64).ln(), true),
        }
    }
}

/// An idf-weighted bag-of-words sentence vector.
#[derive(Clone, Debug)]
pub struct SentenceEmbedding {
    pub vector: Array1<f64>,
    pub used_tokens: usize,
    pub oov_tokens: usize,
    /// No token qualified: the vector is all zeros.
    pub empty: bool,
}

/// `(Σ idf(w)·v_w) / (Σ idf(w))` over in-vocabulary tokens.
pub fn sentence_embedding<S: AsRef<str>>(
    tokens: &[S],
    space: &EmbeddingSpace,
    idf: &IdfWeights,
) -> SentenceEmbedding {
    let mut vector = Array1::zeros(space.dim());
    let mut weight_sum = 0.0;
    let mut used = 0usize;
    let mut oov = 0usize;
    for tok in tokens {
        match space.lookup(tok.as_ref()) {
            Some(i) => {
                let (w, _) = idf.weight(tok.as_ref());
                vector = vector + space.vector(i).to_owned() * w;
                weight_sum += w;
                used += 1;
            }
            None => oov += 1,
        }
    }
    if used == 0 || weight_sum == 0.0 {
        return SentenceEmbedding {
            vector: Array1::zeros(space.dim()),
            used_tokens: used,
            oov_tokens: oov,
            empty: true,
        };
    }
    SentenceEmbedding {
        vector: vector / weight_sum,
        used_tokens: used,
        oov_tokens: oov,
        empty: false,
    }
}

/// Sentence translation retrieval over index-aligned parallel lists.
///
/// Both sides are embedded with their own idf weights, the source side is
/// mapped, and pair `i` counts as correct at k when index `i` is among the
/// top-k retrieved target sentences.
#[allow(clippy::too_many_arguments)]
pub fn sentence_retrieval_precision<S: AsRef<str>>(
    src_sents: &[Vec<S>],
    tgt_sents: &[Vec<S>],
    w: &MappingMatrix,
    src_space: &EmbeddingSpace,
    tgt_space: &EmbeddingSpace,
    src_idf: &IdfWeights,
    tgt_idf: &IdfWeights,
    method: Method,
    ks: &[usize],
    cfg: &MetricConfig,
) -> Result<BTreeMap<usize, f64>> {
    if src_sents.is_empty() || tgt_sents.is_empty() {
        return Err(Error::InvalidInput("empty sentence set".into()));
    }
    if src_sents.len() != tgt_sents.len() {
        return Err(Error::Dimension {
            context: "parallel sentence lists",
            expected: src_sents.len(),
            actual: tgt_sents.len(),
        });
    }
    let embed_all = |sents: &[Vec<S>], space: &EmbeddingSpace, idf: &IdfWeights| {
        let mut m = Array2::zeros((sents.len(), space.dim()));
        for (i, sent) in sents.iter().enumerate() {
            let e = sentence_embedding(sent, space, idf);
            m.row_mut(i).assign(&e.vector);
        }
        m
    };
    let src_vecs = embed_all(src_sents, src_space, src_idf);
    let tgt_vecs = embed_all(tgt_sents, tgt_space, tgt_idf);
    let mapped = w.apply(src_vecs.view())?;

    let k_max = ks.iter().copied().max().unwrap_or(1).min(tgt_sents.len());
    let ranked = match method {
        Method::Nn => metric::knn(mapped.view(), tgt_vecs.view(), k_max)?,
        Method::Csls => {
            let stats = metric::neighborhood_stats(
                mapped.view(),
                tgt_vecs.view(),
                cfg.csls_k.min(tgt_sents.len()),
            )?;
            metric::csls_topk(mapped.view(), tgt_vecs.view(), &stats, k_max)?
        }
        Method::Isf => {
            let scores =
                metric::isf_scores(mapped.view(), tgt_vecs.view(), cfg.isf_temperature, mapped.view())?;
            let mut out = Vec::with_capacity(scores.nrows());
            for row in scores.rows() {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                out.push(idx.into_iter().take(k_max).map(|j| (j, row[j])).collect());
            }
            out
        }
    };

    let mut result = BTreeMap::new();
    for &k in ks {
        let correct = ranked
            .iter()
            .enumerate()
            .filter(|(i, r)| r.iter().take(k).any(|(j, _)| j == i))
            .count();
        result.insert(k, correct as f64 / src_sents.len() as f64);
    }
    Ok(result)
}

/// Replace every in-map token with its translation; unknown tokens pass
/// through unchanged and are counted.
pub fn word_by_word_translate<S: AsRef<str>>(
    sentence: &[S],
    translation_map: &HashMap<String, String>,
) -> (Vec<String>, usize) {
    let mut out = Vec::with_capacity(sentence.len());
    let mut passed_through = 0usize;
    for tok in sentence {
        match translation_map.get(tok.as_ref()) {
            Some(t) => out.push(t.clone()),
            None => {
                out.push(tok.as_ref().to_string());
                passed_through += 1;
            }
        }
    }
    (out, passed_through)
}

/// Rank-1 translation map for the given source indices.
pub fn word_translation_map(
    w: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    indices: &[usize],
    method: Method,
    cfg: MetricConfig,
) -> Result<HashMap<String, String>> {
    let mut translator = Translator::new(w, src, tgt, cfg)?;
    let result = translator.translate(indices, method, 1)?;
    let mut map = HashMap::with_capacity(indices.len());
    for (q, ranked) in result.queries.iter().zip(&result.ranked) {
        map.insert(src.word(*q).to_string(), tgt.word(ranked[0].0).to_string());
    }
    Ok(map)
}

/// Corpus-level BLEU-4 with a single reference per hypothesis: geometric
/// mean of clipped modified n-gram precisions (n = 1..4) times the brevity
/// penalty `exp(min(0, 1 − ref_len/hyp_len))`, no smoothing. In [0, 100].
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension {
            context: "bleu corpus",
            expected: hypotheses.len(),
            actual: references.len(),
        });
    }
    const MAX_N: usize = 4;
    let mut matches = [0u64; MAX_N];
    let mut totals = [0u64; MAX_N];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=MAX_N {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<Vec<&str>, u64> = HashMap::new();
            if reference.len() >= n {
                for window in reference.windows(n) {
                    let key: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
                    *ref_counts.entry(key).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<Vec<&str>, u64> = HashMap::new();
            for window in hyp.windows(n) {
                let key: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
                *hyp_counts.entry(key).or_insert(0) += 1;
            }
            totals[n - 1] += (hyp.len() - n + 1) as u64;
            for (key, count) in hyp_counts {
                let clip = ref_counts.get(&key).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / MAX_N as f64).exp())
}

/// One row of the word-translation section of a report.
#[derive(Clone, Debug, Serialize)]
pub struct WordTranslationEntry {
    pub direction: String,
    pub method: Method,
    #[serde(flatten)]
    pub precision: PrecisionReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct WordSimEntry {
    pub dataset: String,
    #[serde(flatten)]
    pub report: WordSimReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SentenceRetrievalEntry {
    pub direction: String,
    pub method: Method,
    pub p_at: BTreeMap<usize, f64>,
    pub queries: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BleuEntry {
    pub direction: String,
    pub method: Method,
    pub score: f64,
    pub sentences: usize,
    pub tokens_passed_through: usize,
}

/// Structured evaluation results, serialized as versioned JSON.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub mapping_fingerprint: String,
    pub word_translation: Vec<WordTranslationEntry>,
    pub wordsim: Vec<WordSimEntry>,
    pub sentence_retrieval: Vec<SentenceRetrievalEntry>,
    pub bleu: Vec<BleuEntry>,
}

impl EvalReport {
    pub fn new(config_hash: String, seed: u64, mapping: &MappingMatrix) -> Self {
        EvalReport {
            schema_version: 1,
            config_hash,
            seed,
            mapping_fingerprint: format!("{:016x}", mapping.fingerprint()),
            word_translation: Vec::new(),
            wordsim: Vec::new(),
            sentence_retrieval: Vec::new(),
            bleu: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// CSV of the word-translation table: one row per method, one column
    /// block per direction and cutoff.
    pub fn word_translation_csv(&self) -> String {
        let mut directions: Vec<&str> = Vec::new();
        let mut ks: Vec<usize> = Vec::new();
        for e in &self.word_translation {
            if !directions.contains(&e.direction.as_str()) {
                directions.push(&e.direction);
            }
            for &k in e.precision.p_at.keys() {
                if !ks.contains(&k) {
                    ks.push(k);
                }
            }
        }
        ks.sort_unstable();
        let mut out = String::from("method");
        for d in &directions {
            for k in &ks {
                out.push_str(&format!(",{d} P@{k}"));
            }
        }
        out.push('\n');
        let mut methods: Vec<Method> = Vec::new();
        for e in &self.word_translation {
            if !methods.contains(&e.method) {
                methods.push(e.method);
            }
        }
        for m in methods {
            out.push_str(&m.to_string());
            for d in &directions {
                for k in &ks {
                    let cell = self
                        .word_translation
                        .iter()
                        .find(|e| e.method == m && e.direction == *d)
                        .and_then(|e| e.precision.p_at.get(k))
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_default();
                    out.push(',');
                    out.push_str(&cell);
                }
            }
            out.push('\n');
        }
        out
    }
}
