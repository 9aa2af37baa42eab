//! Iterative refinement: build a synthetic dictionary from the current
//! mapping, re-solve Procrustes on it, repeat.
//!
//! Anchors come from the most frequent words only, and by default a pair is
//! kept only when the two words are mutual nearest neighbors under CSLS,
//! which trades dictionary size for precision.

use ndarray::{s, Array2};

use crate::embed::{Dictionary, EmbeddingSpace};
use crate::error::{Error, Result};
use crate::linmap::{procrustes, MappingMatrix};
use crate::metric::{self, Method};

#[derive(Clone, Debug)]
pub struct RefineParams {
    /// Only the top `dict_rank_cap` most frequent source and target words are
    /// anchor candidates (clamped to the vocabulary sizes).
    pub dict_rank_cap: usize,
    pub n_iterations: usize,
    /// Pairing score: CSLS by default, plain cosine as the ablation.
    pub metric: Method,
    /// Keep only pairs that survive the symmetric argmax check.
    pub mutual_nn_only: bool,
    /// Neighborhood size for the CSLS statistics.
    pub csls_k: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            dict_rank_cap: 10_000,
            n_iterations: 5,
            metric: Method::Csls,
            mutual_nn_only: true,
            csls_k: 10,
        }
    }
}

/// Outcome of a refinement run.
#[derive(Clone, Debug)]
pub struct RefineReport {
    pub mapping: MappingMatrix,
    /// Synthetic dictionary size at each completed iteration.
    pub dict_sizes: Vec<usize>,
    /// Set when refinement stopped early on an empty dictionary; the mapping
    /// is then the last valid one.
    pub aborted: Option<String>,
}

/// Build a synthetic dictionary from the current mapping.
///
/// Pair `(s, t)` is included iff `t` is the best target for `s` and, when
/// `mutual_nn_only` is set, `s` is also the best source for `t`, both under
/// the configured score restricted to the top-capped vocabularies. At most
/// one pair per source; deterministic, ties to the lower index.
pub fn build_dictionary(
    w: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    params: &RefineParams,
) -> Result<Dictionary> {
    if params.dict_rank_cap == 0 {
        return Err(Error::InvalidInput("dict_rank_cap must be positive".into()));
    }
    let s_cap = params.dict_rank_cap.min(src.len());
    let t_cap = params.dict_rank_cap.min(tgt.len());
    let mapped = w.apply(src.vectors().slice(s![..s_cap, ..]))?;
    let tgt_vectors = tgt.vectors();
    let capped_tgt = tgt_vectors.slice(s![..t_cap, ..]);

    let (row_best, col_best) = match params.metric {
        Method::Csls => {
            let stats = metric::neighborhood_stats(mapped.view(), capped_tgt, params.csls_k)?;
            metric::csls_argmaxes(mapped.view(), capped_tgt, &stats)?
        }
        Method::Nn => metric::cosine_argmaxes(mapped.view(), capped_tgt)?,
        Method::Isf => {
            return Err(Error::InvalidInput(
                "inverted softmax is not supported for dictionary generation".into(),
            ))
        }
    };

    let mut pairs = Vec::new();
    for (s, &t) in row_best.iter().enumerate() {
        if !params.mutual_nn_only || col_best[t] == s {
            pairs.push((s, t));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDictionary(
            "no mutual nearest neighbors under the current mapping".into(),
        ));
    }
    Dictionary::from_pairs(pairs, src, tgt)
}

/// Iterate dictionary generation and Procrustes `n_iterations` times.
///
/// An empty dictionary aborts the loop; the report then carries the last
/// valid mapping and a diagnostic instead of an error.
pub fn refine(
    w0: &MappingMatrix,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    params: &RefineParams,
) -> Result<RefineReport> {
    let mut mapping = w0.clone();
    let mut dict_sizes = Vec::with_capacity(params.n_iterations);
    for iteration in 0..params.n_iterations {
        let dict = match build_dictionary(&mapping, src, tgt, params) {
            Ok(d) => d,
            Err(Error::EmptyDictionary(msg)) => {
                return Ok(RefineReport {
                    mapping,
                    dict_sizes,
                    aborted: Some(format!("iteration {iteration}: {msg}")),
                });
            }
            Err(e) => return Err(e),
        };
        dict_sizes.push(dict.len());
        let (x, y) = gather_pairs(&dict, src, tgt);
        mapping = procrustes(x.view(), y.view())?.with_beta(w0.beta());
    }
    Ok(RefineReport {
        mapping,
        dict_sizes,
        aborted: None,
    })
}

/// Stack the paired vectors of a dictionary into aligned row matrices.
pub fn gather_pairs(
    dict: &Dictionary,
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
) -> (Array2<f64>, Array2<f64>) {
    let d = src.dim();
    let mut x = Array2::zeros((dict.len(), d));
    let mut y = Array2::zeros((dict.len(), d));
    for (row, &(s, t)) in dict.pairs().iter().enumerate() {
        x.row_mut(row).assign(&src.vector(s));
        y.row_mut(row).assign(&tgt.vector(t));
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{csls_scores, neighborhood_stats};
    use crate::synth::{generate_pair, Rotation, SynthConfig};
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn gold_p1(w: &MappingMatrix, pair: &crate::synth::SynthPair) -> f64 {
        let mapped = w.apply(pair.src.vectors()).unwrap();
        let stats = neighborhood_stats(mapped.view(), pair.tgt.vectors(), 10).unwrap();
        let (best, _) = metric::csls_argmaxes(mapped.view(), pair.tgt.vectors(), &stats).unwrap();
        let hit = best.iter().enumerate().filter(|(i, b)| *i == **b).count();
        hit as f64 / pair.src.len() as f64
    }

    #[test]
    fn identical_spaces_yield_self_pair_dictionary() {
        let pair = generate_pair(&SynthConfig {
            n_words: 150,
            dim: 10,
            rotation: Rotation::Identity,
            rng_seed: 1,
            ..Default::default()
        })
        .unwrap();
        let w = MappingMatrix::identity(10);
        let params = RefineParams {
            dict_rank_cap: 100,
            ..Default::default()
        };
        let dict = build_dictionary(&w, &pair.src, &pair.tgt, &params).unwrap();
        assert_eq!(dict.len(), 100);
        for (i, &(s, t)) in dict.pairs().iter().enumerate() {
            assert_eq!((s, t), (i, i));
        }
    }

    #[test]
    fn planted_rotation_gives_full_identity_dictionary() {
        let pair = generate_pair(&SynthConfig {
            n_words: 200,
            dim: 14,
            rng_seed: 2,
            ..Default::default()
        })
        .unwrap();
        let dict =
            build_dictionary(&pair.planted_w, &pair.src, &pair.tgt, &RefineParams::default())
                .unwrap();
        assert_eq!(dict.len(), 200);
        assert!(dict.pairs().iter().enumerate().all(|(i, &(s, t))| s == i && t == i));
    }

    /// Brute-force mutual-argmax oracle over the full CSLS matrix.
    #[test]
    fn dictionary_matches_brute_force_mutual_oracle() {
        let pair = generate_pair(&SynthConfig {
            n_words: 120,
            dim: 10,
            rng_seed: 3,
            noise_sigma: 0.4,
            ..Default::default()
        })
        .unwrap();
        let w = &pair.planted_w;
        let params = RefineParams::default();
        let dict = build_dictionary(w, &pair.src, &pair.tgt, &params).unwrap();

        let mapped = w.apply(pair.src.vectors()).unwrap();
        let stats = neighborhood_stats(mapped.view(), pair.tgt.vectors(), params.csls_k).unwrap();
        let scores = csls_scores(mapped.view(), pair.tgt.vectors(), &stats).unwrap();
        let mut expected = Vec::new();
        for s in 0..120 {
            let row = scores.index_axis(Axis(0), s);
            let t = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            let col = scores.index_axis(Axis(1), t);
            let back = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if back == s {
                expected.push((s, t));
            }
        }
        assert_eq!(dict.pairs(), expected.as_slice());
    }

    /// Sources replaced by fresh noise fail mutuality; clean rows survive.
    #[test]
    fn noise_rows_are_excluded_clean_rows_kept() {
        let pair = generate_pair(&SynthConfig {
            n_words: 500,
            dim: 24,
            rng_seed: 4,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut vectors = pair.src.vectors().to_owned();
        let noisy: Vec<usize> = (0..500).filter(|i| i % 5 == 0).collect(); // 20%
        for &i in &noisy {
            let mut row: Vec<f64> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut row {
                *v /= n;
            }
            for (j, v) in row.into_iter().enumerate() {
                vectors[[i, j]] = v;
            }
        }
        let noised_src =
            EmbeddingSpace::new("syn-src", pair.src.words().to_vec(), vectors).unwrap();
        let dict =
            build_dictionary(&pair.planted_w, &noised_src, &pair.tgt, &RefineParams::default())
                .unwrap();
        let kept: std::collections::HashSet<usize> =
            dict.pairs().iter().map(|&(s, _)| s).collect();
        let clean_kept = (0..500)
            .filter(|i| i % 5 != 0)
            .filter(|i| kept.contains(i) && dict.pairs().iter().any(|&(s, t)| s == *i && t == *i))
            .count();
        let noisy_correct = noisy
            .iter()
            .filter(|&&i| dict.pairs().iter().any(|&(s, t)| s == i && t == i))
            .count();
        assert!(
            clean_kept as f64 >= 0.95 * 400.0,
            "only {clean_kept}/400 clean rows kept"
        );
        assert!(
            noisy_correct as f64 <= 0.05 * noisy.len() as f64,
            "{noisy_correct} noise rows paired with their old gold target"
        );
    }

    #[test]
    fn refine_zero_iterations_is_identity() {
        let pair = generate_pair(&SynthConfig {
            n_words: 60,
            dim: 8,
            rng_seed: 5,
            ..Default::default()
        })
        .unwrap();
        let w0 = MappingMatrix::identity(8).with_beta(0.02);
        let report = refine(
            &w0,
            &pair.src,
            &pair.tgt,
            &RefineParams {
                n_iterations: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.mapping, w0);
        assert!(report.dict_sizes.is_empty());
        assert!(report.aborted.is_none());
    }

    #[test]
    fn refine_improves_perturbed_planted_mapping() {
        let pair = generate_pair(&SynthConfig {
            n_words: 400,
            dim: 20,
            rng_seed: 6,
            noise_sigma: 0.1,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let noise =
            Array2::from_shape_fn((20, 20), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let mut perturbed =
            MappingMatrix::from_matrix(&pair.planted_w.matrix() + &noise).unwrap();
        for _ in 0..200 {
            perturbed = perturbed.orthogonalize_step();
        }
        let before = gold_p1(&perturbed, &pair);
        let report = refine(&perturbed, &pair.src, &pair.tgt, &RefineParams::default()).unwrap();
        let after = gold_p1(&report.mapping, &pair);
        assert!(after >= before, "P@1 {before} -> {after}");
        assert!(after > 0.95, "refinement reached only {after}");
        assert!(report.mapping.orthogonality_error() <= 1e-8);
    }

    #[test]
    fn refine_keeps_perfect_mapping_fixed() {
        let pair = generate_pair(&SynthConfig {
            n_words: 150,
            dim: 12,
            rotation: Rotation::Identity,
            rng_seed: 7,
            ..Default::default()
        })
        .unwrap();
        let w0 = MappingMatrix::identity(12);
        let report = refine(&w0, &pair.src, &pair.tgt, &RefineParams::default()).unwrap();
        let drift = (&report.mapping.matrix() - &w0.matrix())
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(drift < 1e-6, "mapping drifted by {drift}");
        assert!((gold_p1(&report.mapping, &pair) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refine_noiseless_planted_rotation_stays_perfect() {
        let pair = generate_pair(&SynthConfig {
            n_words: 200,
            dim: 16,
            rng_seed: 8,
            ..Default::default()
        })
        .unwrap();
        let report =
            refine(&pair.planted_w, &pair.src, &pair.tgt, &RefineParams::default()).unwrap();
        assert!((gold_p1(&report.mapping, &pair) - 1.0).abs() < 1e-12);
        for &size in &report.dict_sizes {
            assert_eq!(size, 200);
        }
    }

    #[test]
    fn mutual_only_never_exceeds_one_pair_per_source() {
        let pair = generate_pair(&SynthConfig {
            n_words: 90,
            dim: 9,
            rng_seed: 9,
            noise_sigma: 0.6,
            ..Default::default()
        })
        .unwrap();
        let dict =
            build_dictionary(&pair.planted_w, &pair.src, &pair.tgt, &RefineParams::default())
                .unwrap();
        let mut seen = std::collections::HashSet::new();
        for &(s, _) in dict.pairs() {
            assert!(seen.insert(s), "duplicate source {s}");
        }
        assert!(dict.len() <= 90);
    }

    use crate::embed::EmbeddingSpace;
}
