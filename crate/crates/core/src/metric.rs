//! Exact cosine k-NN over paired spaces and the three retrieval criteria:
//! plain nearest neighbor, inverted softmax, and cross-domain similarity
//! local scaling (CSLS).
//!
//! CSLS rescales the cosine between a mapped source word and a target word
//! by the mean similarity of each endpoint to its own K-nearest neighborhood
//! on the bi-partite graph, `2·cos − r_T(Wx_s) − r_S(y_t)`, which demotes
//! hub vectors that would otherwise be retrieved for many queries.
//!
//! All scoring is exact brute force, blocked over query chunks, with 64-bit
//! accumulation and a fixed evaluation order. Ties are broken by ascending
//! target index everywhere.

use ndarray::{Array2, ArrayView2, Axis};

use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::linmap::MappingMatrix;
use crate::util::Fnv1a;

/// Retrieval criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nn,
    Isf,
    Csls,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Method::Nn),
            "isf" => Ok(Method::Isf),
            "csls" => Ok(Method::Csls),
            other => Err(Error::InvalidInput(format!(
                "unknown retrieval method {other:?} (expected nn, isf or csls)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Nn => "nn",
            Method::Isf => "isf",
            Method::Csls => "csls",
        })
    }
}

/// Tuning knobs for retrieval.
#[derive(Clone, Debug)]
pub struct MetricConfig {
    /// Neighborhood size K for CSLS.
    pub csls_k: usize,
    /// Rank cap on the mapped source vocabulary used for the target-side
    /// neighborhood statistic and the inverted-softmax sample.
    pub source_pool_cap: usize,
    /// Inverted-softmax temperature.
    pub isf_temperature: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            csls_k: 10,
            source_pool_cap: 200_000,
            isf_temperature: 30.0,
        }
    }
}

/// Largest number of similarity-matrix entries held per query block.
const BLOCK_ENTRIES: usize = 1 << 24;

fn block_rows(keys: usize) -> usize {
    (BLOCK_ENTRIES / keys.max(1)).clamp(1, 1024)
}

fn row_norms(m: ArrayView2<'_, f64>) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                1.0 // zero vectors score 0 against everything
            } else {
                n
            }
        })
        .collect()
}

/// Insert into a top-k buffer ordered by (score desc, index asc).
fn push_topk(best: &mut Vec<(usize, f64)>, k: usize, idx: usize, score: f64) {
    if best.len() == k {
        let worst = best[k - 1];
        // Equal scores keep the incumbent: it has the lower index.
        if score <= worst.1 {
            return;
        }
    }
    let pos = best.partition_point(|&(bj, bs)| bs > score || (bs == score && bj < idx));
    best.insert(pos, (idx, score));
    best.truncate(k);
}

/// Exact top-k cosine neighbors of every query row among the key rows.
///
/// Returns, per query, `k` pairs of (key index, cosine) with non-increasing
/// scores and ties broken by ascending index.
pub fn knn(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::Dimension {
            context: "knn (query vs key dimension)",
            expected: keys.ncols(),
            actual: queries.ncols(),
        });
    }
    if k == 0 || k > keys.nrows() {
        return Err(Error::InvalidInput(format!(
            "k = {k} out of range for {} keys",
            keys.nrows()
        )));
    }
    let qnorms = row_norms(queries);
    let knorms = row_norms(keys);
    let mut out = Vec::with_capacity(queries.nrows());
    let block = block_rows(keys.nrows());
    for (bi, chunk) in queries.axis_chunks_iter(Axis(0), block).enumerate() {
        let sims = chunk.dot(&keys.t());
        for (li, row) in sims.rows().into_iter().enumerate() {
            let qi = bi * block + li;
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, &dot) in row.iter().enumerate() {
                push_topk(&mut best, k, j, dot / (qnorms[qi] * knorms[j]));
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Mean cosine of each query row to its k nearest key rows.
pub fn mean_topk_cosine(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    k: usize,
) -> Result<Vec<f64>> {
    let hits = knn(queries, keys, k)?;
    Ok(hits
        .iter()
        .map(|ranked| ranked.iter().map(|&(_, s)| s).sum::<f64>() / k as f64)
        .collect())
}

/// Bi-partite neighborhood statistics for CSLS.
///
/// `r_tgt[i]` is the mean cosine of mapped source `i` to its K nearest
/// targets; `r_src[j]` is the mean cosine of target `j` to its K nearest
/// mapped sources. Both must be computed with the same mapping and
/// normalization as the retrieval that consumes them; a fingerprint of the
/// two matrices guards against stale reuse.
#[derive(Clone, Debug)]
pub struct NeighborhoodStats {
    r_src: Vec<f64>,
    r_tgt: Vec<f64>,
    k: usize,
    fingerprint: u64,
}

fn stats_fingerprint(mapped_src: ArrayView2<'_, f64>, tgt: ArrayView2<'_, f64>, k: usize) -> u64 {
    let mut h = Fnv1a::new();
    h.update_u64(k as u64);
    h.update_u64(crate::util::matrix_fingerprint(
        mapped_src.nrows(),
        mapped_src.ncols(),
        mapped_src.to_owned().as_slice().expect("contiguous"),
    ));
    h.update_u64(crate::util::matrix_fingerprint(
        tgt.nrows(),
        tgt.ncols(),
        tgt.to_owned().as_slice().expect("contiguous"),
    ));
    h.finish()
}

/// Compute [`NeighborhoodStats`] over a full (mapped source, target) pair.
pub fn neighborhood_stats(
    mapped_src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    k: usize,
) -> Result<NeighborhoodStats> {
    if k == 0 || k > tgt.nrows() || k > mapped_src.nrows() {
        return Err(Error::InvalidInput(format!(
            "neighborhood size {k} out of range for {} sources / {} targets",
            mapped_src.nrows(),
            tgt.nrows()
        )));
    }
    let r_tgt = mean_topk_cosine(mapped_src, tgt, k)?;
    let r_src = mean_topk_cosine(tgt, mapped_src, k)?;
    Ok(NeighborhoodStats {
        r_src,
        r_tgt,
        k,
        fingerprint: stats_fingerprint(mapped_src, tgt, k),
    })
}

impl NeighborhoodStats {
    /// Mean similarity of each target word to its K nearest mapped sources.
    pub fn r_src(&self) -> &[f64] {
        &self.r_src
    }

    /// Mean similarity of each mapped source word to its K nearest targets.
    pub fn r_tgt(&self) -> &[f64] {
        &self.r_tgt
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Full CSLS score matrix `2·cos(Wx_s, y_t) − r_T(Wx_s) − r_S(y_t)` for the
/// same (mapped source, target) pair the statistics were computed on.
pub fn csls_scores(
    mapped_src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    stats: &NeighborhoodStats,
) -> Result<Array2<f64>> {
    if stats.fingerprint != stats_fingerprint(mapped_src, tgt, stats.k) {
        return Err(Error::StaleStats);
    }
    let qnorms = row_norms(mapped_src);
    let knorms = row_norms(tgt);
    let mut scores = mapped_src.dot(&tgt.t());
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 2.0 * (*v / (qnorms[i] * knorms[j])) - stats.r_tgt[i] - stats.r_src[j];
        }
    }
    Ok(scores)
}

/// Inverted-softmax scores: `exp(β·cos(q, y_t))` normalized over a sample of
/// mapped source words for each fixed target.
///
/// The sample is the query set itself plus `pool` (typically the most
/// frequent mapped sources). Computed with max-subtraction so large
/// temperatures cannot overflow.
pub fn isf_scores(
    queries: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    temperature: f64,
    pool: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "inverted-softmax temperature must be finite and positive, got {temperature}"
        )));
    }
    if queries.ncols() != tgt.ncols() || (pool.nrows() > 0 && pool.ncols() != tgt.ncols()) {
        return Err(Error::Dimension {
            context: "isf_scores",
            expected: tgt.ncols(),
            actual: queries.ncols(),
        });
    }
    let m = tgt.nrows();
    let qnorms = row_norms(queries);
    let knorms = row_norms(tgt);

    // Pass 1: per-target max of beta*cos over the sample, then the
    // stabilized denominator.
    let mut maxes = vec![f64::NEG_INFINITY; m];
    let scaled_cos = |rows: ArrayView2<'_, f64>, norms: &[f64], f: &mut dyn FnMut(usize, usize, f64)| {
        let block = block_rows(m);
        for (bi, chunk) in rows.axis_chunks_iter(Axis(0), block).enumerate() {
            let sims = chunk.dot(&tgt.t());
            for (li, row) in sims.rows().into_iter().enumerate() {
                let i = bi * block + li;
                for (j, &dot) in row.iter().enumerate() {
                    f(i, j, temperature * dot / (norms[i] * knorms[j]));
                }
            }
        }
    };
    let pnorms = row_norms(pool);
    scaled_cos(queries, &qnorms, &mut |_, j, v| {
        if v > maxes[j] {
            maxes[j] = v;
        }
    });
    scaled_cos(pool, &pnorms, &mut |_, j, v| {
        if v > maxes[j] {
            maxes[j] = v;
        }
    });
    let mut denom = vec![0.0f64; m];
    scaled_cos(queries, &qnorms, &mut |_, j, v| denom[j] += (v - maxes[j]).exp());
    scaled_cos(pool, &pnorms, &mut |_, j, v| denom[j] += (v - maxes[j]).exp());

    // Pass 2: the normalized query scores.
    let mut out = Array2::zeros((queries.nrows(), m));
    scaled_cos(queries, &qnorms, &mut |i, j, v| {
        out[[i, j]] = (v - maxes[j]).exp() / denom[j];
    });
    Ok(out)
}

/// Ranked retrieval output for a set of queries.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub method: Method,
    pub queries: Vec<usize>,
    /// Per query: up to `k_out` (target index, score) pairs, scores
    /// non-increasing, ties broken by ascending index.
    pub ranked: Vec<Vec<(usize, f64)>>,
    /// Rank cap that defined the source pool for CSLS/ISF normalization.
    pub source_pool: usize,
}

impl RetrievalResult {
    /// TSV export: `query_word  rank  target_word  score  method`.
    pub fn to_tsv(&self, src: &EmbeddingSpace, tgt: &EmbeddingSpace) -> String {
        let mut out = String::new();
        for (qi, ranked) in self.queries.iter().zip(&self.ranked) {
            for (rank, (ti, score)) in ranked.iter().enumerate() {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    src.word(*qi),
                    rank + 1,
                    tgt.word(*ti),
                    score,
                    self.method
                ));
            }
        }
        out
    }
}

/// Retrieval engine binding a mapping and two spaces.
///
/// The mapped source pool and the CSLS neighborhood statistics are computed
/// lazily on first use and cached; the borrow on the mapping and spaces
/// guarantees they cannot change underneath the cache.
pub struct Translator<'a> {
    w: &'a MappingMatrix,
    src: &'a EmbeddingSpace,
    tgt: &'a EmbeddingSpace,
    cfg: MetricConfig,
    mapped_pool: Option<Array2<f64>>,
    stats: Option<NeighborhoodStats>,
}

impl<'a> Translator<'a> {
    pub fn new(
        w: &'a MappingMatrix,
        src: &'a EmbeddingSpace,
        tgt: &'a EmbeddingSpace,
        cfg: MetricConfig,
    ) -> Result<Self> {
        if src.dim() != w.dim() || tgt.dim() != w.dim() {
            return Err(Error::Dimension {
                context: "translator (mapping vs spaces)",
                expected: w.dim(),
                actual: src.dim().min(tgt.dim()),
            });
        }
        Ok(Translator {
            w,
            src,
            tgt,
            cfg,
            mapped_pool: None,
            stats: None,
        })
    }

    pub fn config(&self) -> &MetricConfig {
        &self.cfg
    }

    /// Number of mapped source words forming the CSLS/ISF source pool.
    pub fn pool_size(&self) -> usize {
        self.cfg.source_pool_cap.min(self.src.len())
    }

    fn mapped_pool(&mut self) -> Result<&Array2<f64>> {
        if self.mapped_pool.is_none() {
            let pool = self
                .w
                .apply(self.src.vectors().slice(ndarray::s![..self.pool_size(), ..]))?;
            self.mapped_pool = Some(pool);
        }
        Ok(self.mapped_pool.as_ref().expect("just set"))
    }

    fn stats(&mut self) -> Result<&NeighborhoodStats> {
        if self.stats.is_none() {
            let k = self.cfg.csls_k;
            let tgt = self.tgt;
            let pool = self.mapped_pool()?.view();
            let stats = neighborhood_stats(pool, tgt.vectors(), k)?;
            self.stats = Some(stats);
        }
        Ok(self.stats.as_ref().expect("just set"))
    }

    /// Top-`k_out` targets for each query source index under `method`.
    pub fn translate(
        &mut self,
        query_indices: &[usize],
        method: Method,
        k_out: usize,
    ) -> Result<RetrievalResult> {
        if query_indices.is_empty() {
            return Err(Error::InvalidInput("empty query set".into()));
        }
        if k_out == 0 || k_out > self.tgt.len() {
            return Err(Error::InvalidInput(format!(
                "k_out = {k_out} out of range for {} targets",
                self.tgt.len()
            )));
        }
        if let Some(&bad) = query_indices.iter().find(|&&q| q >= self.src.len()) {
            return Err(Error::InvalidInput(format!(
                "query index {bad} out of range for vocabulary of {}",
                self.src.len()
            )));
        }
        let mapped_queries = {
            let mut rows = Array2::zeros((query_indices.len(), self.src.dim()));
            for (r, &q) in query_indices.iter().enumerate() {
                rows.row_mut(r).assign(&self.src.vector(q));
            }
            self.w.apply(rows.view())?
        };

        let ranked = match method {
            Method::Nn => knn(mapped_queries.view(), self.tgt.vectors(), k_out)?,
            Method::Csls => {
                let k = self.cfg.csls_k;
                let r_query = mean_topk_cosine(mapped_queries.view(), self.tgt.vectors(), k)?;
                // Split borrows: stats first (immutable copy of r_src), then score.
                let r_src = self.stats()?.r_src.clone();
                topk_transformed(
                    mapped_queries.view(),
                    self.tgt.vectors(),
                    k_out,
                    |i, j, cos| 2.0 * cos - r_query[i] - r_src[j],
                )?
            }
            Method::Isf => {
                let temperature = self.cfg.isf_temperature;
                let tgt = self.tgt;
                let pool = self.mapped_pool()?;
                let scores =
                    isf_scores(mapped_queries.view(), tgt.vectors(), temperature, pool.view())?;
                scores
                    .rows()
                    .into_iter()
                    .map(|row| {
                        let mut best = Vec::with_capacity(k_out + 1);
                        for (j, &s) in row.iter().enumerate() {
                            push_topk(&mut best, k_out, j, s);
                        }
                        best
                    })
                    .collect()
            }
        };
        Ok(RetrievalResult {
            method,
            queries: query_indices.to_vec(),
            ranked,
            source_pool: self.pool_size(),
        })
    }
}

/// Row and column argmaxes of the CSLS score matrix, computed in one
/// blocked streaming pass so the full matrix is never materialized.
///
/// Returns `(row_best, col_best)`: the best target per mapped source and the
/// best mapped source per target. Ties break to the lower index on both
/// sides.
pub fn csls_argmaxes(
    mapped_src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    stats: &NeighborhoodStats,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if stats.fingerprint != stats_fingerprint(mapped_src, tgt, stats.k) {
        return Err(Error::StaleStats);
    }
    let qnorms = row_norms(mapped_src);
    let knorms = row_norms(tgt);
    let (n, m) = (mapped_src.nrows(), tgt.nrows());
    let mut row_best = vec![0usize; n];
    let mut row_score = vec![f64::NEG_INFINITY; n];
    let mut col_best = vec![0usize; m];
    let mut col_score = vec![f64::NEG_INFINITY; m];
    let block = block_rows(m);
    for (bi, chunk) in mapped_src.axis_chunks_iter(Axis(0), block).enumerate() {
        let sims = chunk.dot(&tgt.t());
        for (li, row) in sims.rows().into_iter().enumerate() {
            let i = bi * block + li;
            for (j, &dot) in row.iter().enumerate() {
                let score = 2.0 * (dot / (qnorms[i] * knorms[j])) - stats.r_tgt[i] - stats.r_src[j];
                if score > row_score[i] {
                    row_score[i] = score;
                    row_best[i] = j;
                }
                if score > col_score[j] {
                    col_score[j] = score;
                    col_best[j] = i;
                }
            }
        }
    }
    Ok((row_best, col_best))
}

/// Top-`k_out` targets per mapped source under CSLS, for the same pair of
/// matrices the statistics were computed on.
pub fn csls_topk(
    mapped_src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    stats: &NeighborhoodStats,
    k_out: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if stats.fingerprint != stats_fingerprint(mapped_src, tgt, stats.k) {
        return Err(Error::StaleStats);
    }
    if k_out == 0 || k_out > tgt.nrows() {
        return Err(Error::InvalidInput(format!(
            "k_out = {k_out} out of range for {} targets",
            tgt.nrows()
        )));
    }
    topk_transformed(mapped_src, tgt, k_out, |i, j, cos| {
        2.0 * cos - stats.r_tgt[i] - stats.r_src[j]
    })
}

/// Row and column argmaxes of the plain cosine matrix, streaming as in
/// [`csls_argmaxes`].
pub fn cosine_argmaxes(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::Dimension {
            context: "cosine_argmaxes",
            expected: keys.ncols(),
            actual: queries.ncols(),
        });
    }
    if queries.nrows() == 0 || keys.nrows() == 0 {
        return Err(Error::InvalidInput("empty matrix in cosine_argmaxes".into()));
    }
    let qnorms = row_norms(queries);
    let knorms = row_norms(keys);
    let (n, m) = (queries.nrows(), keys.nrows());
    let mut row_best = vec![0usize; n];
    let mut row_score = vec![f64::NEG_INFINITY; n];
    let mut col_best = vec![0usize; m];
    let mut col_score = vec![f64::NEG_INFINITY; m];
    let block = block_rows(m);
    for (bi, chunk) in queries.axis_chunks_iter(Axis(0), block).enumerate() {
        let sims = chunk.dot(&keys.t());
        for (li, row) in sims.rows().into_iter().enumerate() {
            let i = bi * block + li;
            for (j, &dot) in row.iter().enumerate() {
                let score = dot / (qnorms[i] * knorms[j]);
                if score > row_score[i] {
                    row_score[i] = score;
                    row_best[i] = j;
                }
                if score > col_score[j] {
                    col_score[j] = score;
                    col_best[j] = i;
                }
            }
        }
    }
    Ok((row_best, col_best))
}

/// Blocked top-k under a transformed cosine score.
fn topk_transformed(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    k_out: usize,
    score: impl Fn(usize, usize, f64) -> f64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let qnorms = row_norms(queries);
    let knorms = row_norms(keys);
    let block = block_rows(keys.nrows());
    let mut out = Vec::with_capacity(queries.nrows());
    for (bi, chunk) in queries.axis_chunks_iter(Axis(0), block).enumerate() {
        let sims = chunk.dot(&keys.t());
        for (li, row) in sims.rows().into_iter().enumerate() {
            let i = bi * block + li;
            let mut best = Vec::with_capacity(k_out + 1);
            for (j, &dot) in row.iter().enumerate() {
                let cos = dot / (qnorms[i] * knorms[j]);
                push_topk(&mut best, k_out, j, score(i, j, cos));
            }
            out.push(best);
        }
    }
    Ok(out)
}
