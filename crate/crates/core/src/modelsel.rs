//! Unsupervised model selection.
//!
//! The validation criterion pairs the most frequent source words with their
//! CSLS-best targets and averages the cosine similarity of those deemed
//! translations. It needs no parallel data, rises with mapping quality, and
//! is used for epoch snapshots, the learning-rate schedule and
//! hyper-parameter choice.

use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::linmap::MappingMatrix;
use crate::metric::{self, Method};

#[derive(Clone, Debug)]
pub struct CriterionConfig {
    /// Number of most-frequent source words paired up (clamped to the
    /// vocabulary size).
    pub n_queries: usize,
    /// Pairing method; CSLS unless overridden.
    pub metric: Method,
    /// Neighborhood size for the CSLS statistics.
    pub csls_k: usize,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig {
            n_queries: 10_000,
            metric: Method::Csls,
            csls_k: 10,
        }
    }
}

/// Mean cosine between the mapped top-`n_queries` source words and their
/// best targets under the configured pairing method. Lies in [-1, 1];
/// identical spaces under the identity map give 1.
///
/// The source pool for the target-side CSLS statistic is the query set
/// itself; candidates span the full target vocabulary.
pub fn validation_criterion(
    w: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    cfg: &CriterionConfig,
) -> Result<f64> {
    if cfg.n_queries == 0 {
        return Err(Error::InvalidInput("criterion needs at least one query".into()));
    }
    let nq = cfg.n_queries.min(src.len());
    let mapped = w.apply(src.vectors().slice(ndarray::s![..nq, ..]))?;
    let best: Vec<usize> = match cfg.metric {
        Method::Csls => {
            let stats = metric::neighborhood_stats(mapped.view(), tgt.vectors(), cfg.csls_k)?;
            metric::csls_argmaxes(mapped.view(), tgt.vectors(), &stats)?.0
        }
        Method::Nn => metric::cosine_argmaxes(mapped.view(), tgt.vectors())?.0,
        Method::Isf => {
            return Err(Error::InvalidInput(
                "inverted softmax is not supported as a criterion pairing".into(),
            ))
        }
    };
    let mut total = 0.0;
    for (i, &t) in best.iter().enumerate() {
        let q = mapped.row(i);
        let y = tgt.vector(t);
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot = q.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
        total += dot / (qn * yn);
    }
    Ok(total / nq as f64)
}

/// Spearman rank correlation between the criterion and a ground-truth
/// accuracy across training epochs.
///
/// Fails on fewer than two epochs or when either series is constant
/// (correlation undefined).
pub fn criterion_accuracy_correlation(history: &[(f64, f64)]) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 history points, got {}",
            history.len()
        )));
    }
    let criterion: Vec<f64> = history.iter().map(|&(c, _)| c).collect();
    let accuracy: Vec<f64> = history.iter().map(|&(_, a)| a).collect();
    let rc = ranks(&criterion);
    let ra = ranks(&accuracy);
    pearson(&rc, &ra).map_err(|e| match e {
        Error::Numerical(_) => Error::Numerical(
            "constant series: rank correlation is undefined".into(),
        ),
        other => other,
    })
}

/// Average ranks (1-based), ties shared.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
