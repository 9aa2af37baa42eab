//! Linear mappings between embedding spaces: unconstrained least squares,
//! the closed-form orthogonal Procrustes solution, and the iterative update
//! that keeps a trained mapping near the orthogonal manifold.
//!
//! Vectors are rows throughout, so a mapping `W` sends a matrix `X` of row
//! vectors to `X Wᵀ`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::util::matrix_fingerprint;

const MAP_MAGIC: &[u8; 4] = b"WMAP";
const MAP_VERSION: u8 = 1;

/// Default strength of the orthogonality-restoring update.
pub const DEFAULT_BETA: f64 = 0.01;

/// Relative condition-number threshold above which the least-squares normal
/// equations are treated as rank-deficient.
const COND_LIMIT: f64 = 1e12;

/// A square linear map `W` from the source to the target space, together
/// with the orthogonalization strength used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingMatrix {
    w: Array2<f64>,
    beta: f64,
}

impl MappingMatrix {
    pub fn identity(dim: usize) -> Self {
        MappingMatrix {
            w: Array2::eye(dim),
            beta: DEFAULT_BETA,
        }
    }

    pub fn from_matrix(w: Array2<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Dimension {
                context: "mapping matrix (must be square)",
                expected: w.nrows(),
                actual: w.ncols(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in mapping matrix".into()));
        }
        Ok(MappingMatrix {
            w,
            beta: DEFAULT_BETA,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    /// The transposed map. For an orthogonal `W` this is the inverse, i.e.
    /// the map for the reverse translation direction.
    pub fn transposed(&self) -> MappingMatrix {
        MappingMatrix {
            w: self.w.t().to_owned(),
            beta: self.beta,
        }
    }

    /// Map a matrix of row vectors: returns `X Wᵀ`.
    pub fn apply(&self, vectors: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if vectors.ncols() != self.dim() {
            return Err(Error::Dimension {
                context: "apply mapping",
                expected: self.dim(),
                actual: vectors.ncols(),
            });
        }
        Ok(vectors.dot(&self.w.t()))
    }

    /// Map a single vector.
    pub fn apply_vec(&self, vector: &Array1<f64>) -> Result<Array1<f64>> {
        if vector.len() != self.dim() {
            return Err(Error::Dimension {
                context: "apply mapping",
                expected: self.dim(),
                actual: vector.len(),
            });
        }
        Ok(self.w.dot(vector))
    }

    /// One step of the orthogonality-restoring update
    /// `W ← (1+β)W − β(WWᵀ)W`. Exactly orthogonal matrices are fixed points.
    pub fn orthogonalize_step(&self) -> MappingMatrix {
        let wwt = self.w.dot(&self.w.t());
        let w = &self.w * (1.0 + self.beta) - wwt.dot(&self.w) * self.beta;
        MappingMatrix { w, beta: self.beta }
    }

    /// Frobenius norm of `WWᵀ − I`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut wwt = self.w.dot(&self.w.t());
        for i in 0..self.dim() {
            wwt[[i, i]] -= 1.0;
        }
        wwt.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Singular values of `W`, in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let m = to_na(&self.w.view());
        let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        sv
    }

    pub fn fingerprint(&self) -> u64 {
        matrix_fingerprint(
            self.w.nrows(),
            self.w.ncols(),
            self.w.as_slice().expect("contiguous"),
        )
    }

    /// Write the text format: a `d beta` header line, then `d` rows of `d`
    /// decimal values. Values round-trip exactly.
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "{} {}", self.dim(), self.beta).map_err(io)?;
        for row in self.w.rows() {
            let line = row
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<MappingMatrix> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty mapping file"))?
            .map_err(|e| Error::io(path, e))?;
        let mut parts = header.split_whitespace();
        let dim: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "malformed header (expected \"d beta\")"))?;
        let beta: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "malformed header (expected \"d beta\")"))?;
        let mut data = Vec::with_capacity(dim * dim);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut n = 0usize;
            for t in line.split_whitespace() {
                let v: f64 = t.parse().map_err(|_| {
                    Error::parse(path, lineno, format!("cannot parse value {t:?}"))
                })?;
                data.push(v);
                n += 1;
            }
            if n != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values, found {n}"),
                ));
            }
            if data.len() == dim * dim {
                break;
            }
        }
        if data.len() != dim * dim {
            return Err(Error::parse(path, 0, "mapping file ended early"));
        }
        let w = Array2::from_shape_vec((dim, dim), data).expect("shape");
        Ok(MappingMatrix::from_matrix(w)?.with_beta(beta))
    }

    /// Binary variant: magic, version byte, dimension, beta, row-major
    /// little-endian `f64` values.
    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(MAP_MAGIC).map_err(io)?;
        out.write_all(&[MAP_VERSION]).map_err(io)?;
        out.write_all(&(self.dim() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&self.beta.to_le_bytes()).map_err(io)?;
        for v in self.w.iter() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<MappingMatrix> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::parse(path, 0, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated mapping (magic)"))?;
        if &magic != MAP_MAGIC {
            return Err(bad("not a mapping file (bad magic bytes)"));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(|_| bad("truncated mapping (version)"))?;
        if version[0] != MAP_VERSION {
            return Err(Error::parse(
                path,
                0,
                format!("unsupported mapping version {}", version[0]),
            ));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated mapping (dim)"))?;
        let dim = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(|_| bad("truncated mapping (beta)"))?;
        let beta = f64::from_le_bytes(b8);
        let mut data = Vec::with_capacity(dim * dim);
        for _ in 0..dim * dim {
            r.read_exact(&mut b8).map_err(|_| bad("truncated mapping (values)"))?;
            data.push(f64::from_le_bytes(b8));
        }
        let w = Array2::from_shape_vec((dim, dim), data).expect("shape");
        Ok(MappingMatrix::from_matrix(w)?.with_beta(beta))
    }
}

/// Result of a closed-form fit, with the Frobenius residual `‖XWᵀ − Y‖_F`
/// and a flag for degenerate inputs.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub mapping: MappingMatrix,
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Unconstrained least-squares mapping: the minimizer of `‖XWᵀ − Y‖_F` over
/// all square matrices, where the rows of `src_rows` and `tgt_rows` are the
/// paired dictionary vectors.
///
/// Fails when the normal-equation matrix is rank deficient (condition number
/// above `1e12`).
pub fn least_squares_map(
    src_rows: ArrayView2<'_, f64>,
    tgt_rows: ArrayView2<'_, f64>,
) -> Result<FitReport> {
    check_paired(src_rows, tgt_rows)?;
    let d = src_rows.ncols();
    if src_rows.nrows() < d {
        return Err(Error::InvalidInput(format!(
            "least squares needs at least d={d} pairs, got {}",
            src_rows.nrows()
        )));
    }
    // Normal equations: W (XᵀX) = YᵀX, solved as (XᵀX) Wᵀ = XᵀY.
    let gram = src_rows.t().dot(&src_rows);
    let cross = src_rows.t().dot(&tgt_rows);
    let gram_na = to_na(&gram.view());
    let svd = gram_na
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD of normal equations did not converge".into()))?;
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > COND_LIMIT {
        return Err(Error::Numerical(format!(
            "rank-deficient normal equations (condition number {:.3e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    let wt = svd
        .solve(&to_na(&cross.view()), 0.0)
        .map_err(|msg| Error::Numerical(msg.into()))?;
    let w = from_na(&wt.transpose());
    let mapping = MappingMatrix::from_matrix(w)?;
    let residual = frobenius_residual(&mapping, src_rows, tgt_rows);
    Ok(FitReport {
        mapping,
        residual,
        rank_deficient: false,
    })
}

/// Closed-form orthogonal Procrustes solution: `W = UVᵀ` from the singular
/// value decomposition `UΣVᵀ` of the cross-covariance of the paired rows.
/// The result minimizes `‖XWᵀ − Y‖_F` over orthogonal matrices.
pub fn procrustes(
    src_rows: ArrayView2<'_, f64>,
    tgt_rows: ArrayView2<'_, f64>,
) -> Result<MappingMatrix> {
    Ok(procrustes_full(src_rows, tgt_rows)?.mapping)
}

/// [`procrustes`] plus the residual and a degeneracy flag (rank-deficient
/// cross-covariance, where the solution is no longer unique).
pub fn procrustes_full(
    src_rows: ArrayView2<'_, f64>,
    tgt_rows: ArrayView2<'_, f64>,
) -> Result<FitReport> {
    check_paired(src_rows, tgt_rows)?;
    if src_rows.nrows() == 0 {
        return Err(Error::InvalidInput("procrustes needs at least one pair".into()));
    }
    // Row convention: the paper's YXᵀ over column pairs is Yᵀ·X here.
    let cross = tgt_rows.t().dot(&src_rows);
    let svd = to_na(&cross.view())
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let w = from_na(&(u * v_t));
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank_deficient = smin <= smax * 1e-12;
    let mapping = MappingMatrix::from_matrix(w)?;
    let residual = frobenius_residual(&mapping, src_rows, tgt_rows);
    Ok(FitReport {
        mapping,
        residual,
        rank_deficient,
    })
}

fn check_paired(src: ArrayView2<'_, f64>, tgt: ArrayView2<'_, f64>) -> Result<()> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Dimension {
            context: "paired vectors (dimension)",
            expected: src.ncols(),
            actual: tgt.ncols(),
        });
    }
    if src.nrows() != tgt.nrows() {
        return Err(Error::Dimension {
            context: "paired vectors (pair count)",
            expected: src.nrows(),
            actual: tgt.nrows(),
        });
    }
    Ok(())
}

fn frobenius_residual(
    m: &MappingMatrix,
    src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
) -> f64 {
    let mapped = src.dot(&m.w.t());
    (&mapped - &tgt).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn to_na(a: &ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
