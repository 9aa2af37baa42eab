//! Synthetic embedding-space pairs with planted ground truth.
//!
//! The generator draws unit-normalized Gaussian source vectors, rotates them
//! by a random (or identity) orthogonal matrix, adds componentwise noise and
//! renormalizes. The identity pairing is the gold dictionary, the rotation is
//! the gold mapping, so retrieval precision and mapping recovery can be
//! measured exactly at any noise level. Hub planting replaces vectors with
//! near-centroid copies to reproduce the nearest-neighbor hub pathology on
//! demand.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::embed::{Dictionary, EmbeddingSpace};
use crate::error::{Error, Result};
use crate::linmap::MappingMatrix;

/// Which mapping is planted between the two generated spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    /// A random orthogonal matrix, deterministic under the seed.
    PlantedOrthogonal,
    /// The identity: the target is a (possibly noisy) copy of the source.
    Identity,
}

impl std::str::FromStr for Rotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" | "planted_orthogonal" => Ok(Rotation::PlantedOrthogonal),
            "identity" => Ok(Rotation::Identity),
            other => Err(Error::InvalidInput(format!(
                "unknown rotation kind {other:?} (expected planted or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_words: usize,
    pub dim: usize,
    pub rng_seed: u64,
    /// Componentwise Gaussian noise added to the rotated copy before
    /// renormalization.
    pub noise_sigma: f64,
    pub rotation: Rotation,
    /// Number of target rows replaced by near-centroid vectors.
    pub hub_count: usize,
    /// Shapes the synthetic frequency metadata only; vectors stay isotropic.
    /// Words are emitted in rank order regardless.
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_words: 2000,
            dim: 50,
            rng_seed: 0,
            noise_sigma: 0.0,
            rotation: Rotation::PlantedOrthogonal,
            hub_count: 0,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_words == 0 || self.dim == 0 {
            return Err(Error::InvalidInput("n_words and dim must be positive".into()));
        }
        if self.n_words < self.dim {
            return Err(Error::InvalidInput(format!(
                "n_words ({}) must be at least dim ({}) for a well-posed fit",
                self.n_words, self.dim
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidInput("noise_sigma must be finite and >= 0".into()));
        }
        if self.hub_count >= self.n_words {
            return Err(Error::InvalidInput("hub_count must be smaller than n_words".into()));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::InvalidInput("zipf_exponent must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated instance: two spaces, the gold identity dictionary and the
/// planted mapping.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub src: EmbeddingSpace,
    pub tgt: EmbeddingSpace,
    pub gold: Dictionary,
    pub planted_w: MappingMatrix,
}

/// Draw a random orthogonal matrix: the Q factor of a Gaussian matrix with
/// the sign convention that the triangular factor has a positive diagonal,
/// which makes the draw deterministic across platforms.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let a = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)])
}

fn unit_normalized(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    m
}

fn synthetic_words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("word_{i}")).collect()
}

/// A bare isotropic space: unit-normalized Gaussian rows, no planted pair.
/// Useful as a base for hub-planting experiments where `dim` may exceed the
/// vocabulary size.
pub fn isotropic_space(n_words: usize, dim: usize, rng_seed: u64) -> Result<EmbeddingSpace> {
    if n_words == 0 || dim == 0 {
        return Err(Error::InvalidInput("n_words and dim must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    rng.set_stream(1);
    let vectors = unit_normalized(Array2::from_shape_fn((n_words, dim), |_| {
        rng.sample::<f64, _>(StandardNormal)
    }));
    EmbeddingSpace::new("syn", synthetic_words(n_words), vectors)
}


/// Generate a planted-rotation pair. Sub-streams of the seed drive the
/// source draw, the rotation and the noise separately, so e.g. the same
/// source cloud is reused across noise levels of the same seed.
pub fn generate_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let mut src_rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    src_rng.set_stream(1);
    let mut rot_rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    rot_rng.set_stream(2);
    let mut noise_rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    noise_rng.set_stream(3);

    let (n, d) = (cfg.n_words, cfg.dim);
    let src_vectors = unit_normalized(Array2::from_shape_fn((n, d), |_| {
        src_rng.sample::<f64, _>(StandardNormal)
    }));

    let rotation = match cfg.rotation {
        Rotation::PlantedOrthogonal => random_orthogonal(d, &mut rot_rng),
        Rotation::Identity => Array2::eye(d),
    };

    // A noiseless identity copy stays bit-identical to the source.
    let tgt_vectors = if cfg.noise_sigma == 0.0 && cfg.rotation == Rotation::Identity {
        src_vectors.clone()
    } else {
        let mut tgt_vectors = src_vectors.dot(&rotation.t());
        if cfg.noise_sigma > 0.0 {
            let noise = Array2::from_shape_fn((n, d), |_| {
                cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal)
            });
            tgt_vectors += &noise;
        }
        unit_normalized(tgt_vectors)
    };

    let src = EmbeddingSpace::new("syn-src", synthetic_words(n), src_vectors)?;
    let mut tgt = EmbeddingSpace::new("syn-tgt", synthetic_words(n), tgt_vectors)?;
    if cfg.hub_count > 0 {
        let mut hub_rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
        hub_rng.set_stream(4);
        tgt = plant_hubs(&tgt, cfg.hub_count, &mut hub_rng)?;
    }

    let gold = Dictionary::from_pairs((0..n).map(|i| (i, i)).collect(), &src, &tgt)?;
    let planted_w = MappingMatrix::from_matrix(rotation)?;
    Ok(SynthPair {
        src,
        tgt,
        gold,
        planted_w,
    })
}

/// Replace the last `hub_count` rows by unit-normalized copies of the space
/// centroid plus small noise. Such rows sit near the mean of the cloud and
/// become nearest neighbors of disproportionately many queries.
pub fn plant_hubs(
    space: &EmbeddingSpace,
    hub_count: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EmbeddingSpace> {
    if hub_count == 0 {
        return Ok(space.clone());
    }
    if hub_count >= space.len() {
        return Err(Error::InvalidInput(
            "hub_count must be smaller than the vocabulary".into(),
        ));
    }
    let centroid = space.vectors().mean_axis(Axis(0)).expect("non-empty");
    let centroid_norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if centroid_norm == 0.0 {
        return Err(Error::Numerical("degenerate centroid for hub planting".into()));
    }
    let mut vectors = space.vectors().to_owned();
    let n = space.len();
    let dim = space.dim() as f64;
    // Perturbation at a tenth of the centroid length, spread over all
    // components, so the hub direction stays within a few degrees.
    let sigma = 0.1 * centroid_norm / dim.sqrt();
    for i in n - hub_count..n {
        let mut row: Vec<f64> = centroid
            .iter()
            .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical("degenerate centroid for hub planting".into()));
        }
        for v in &mut row {
            *v /= norm;
        }
        for (j, v) in row.into_iter().enumerate() {
            vectors[[i, j]] = v;
        }
    }
    EmbeddingSpace::new(space.lang(), space.words().to_vec(), vectors)
}
