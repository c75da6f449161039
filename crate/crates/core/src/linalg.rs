// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense symmetric/PSD matrix primitives.
//!
//! Everything downstream (whitening, the closed-form solvers, guardedness
//! probes) goes through the handful of functions here, so the numerical-rank
//! convention lives in exactly one place: [`RankPolicy`].
//!
//! All spectral work uses a full symmetric eigendecomposition or a full SVD.
//! Nothing is randomized, so results are a deterministic function of the
//! input bits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by functions that require a symmetric input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Numerical-rank convention for every pseudo-inverse in the crate.
///
/// A singular value (or PSD eigenvalue) `σ` counts as nonzero when
/// `σ > max(relative · σ_max, absolute_floor)`. When `relative` is `None` the
/// usual `max(rows, cols) · ε` factor is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPolicy {
    pub relative: Option<f64>,
    pub absolute_floor: f64,
    /// Relative residual allowed by [`column_space_contains`].
    pub containment: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            relative: None,
            absolute_floor: 0.0,
            containment: 1e-8,
        }
    }
}

impl RankPolicy {
    pub fn with_relative(relative: f64) -> Self {
        Self {
            relative: Some(relative),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rel_ok = self.relative.is_none_or(|r| r.is_finite() && r >= 0.0);
        if !rel_ok
            || !(self.absolute_floor.is_finite() && self.absolute_floor >= 0.0)
            || !(self.containment.is_finite() && self.containment >= 0.0)
        {
            return Err(Error::InvalidSpec(format!(
                "rank policy tolerances must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Relative factor for a `rows × cols` problem.
    pub fn relative_factor(&self, rows: usize, cols: usize) -> f64 {
        self.relative
            .unwrap_or_else(|| rows.max(cols) as f64 * f64::EPSILON)
    }

    /// Cut-off below which a value is treated as zero.
    pub fn threshold(&self, largest: f64, rows: usize, cols: usize) -> f64 {
        (self.relative_factor(rows, cols) * largest).max(self.absolute_floor)
    }
}

/// Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigenSpectrum {
    pub values: Vector,
    /// Orthonormal eigenvectors, one per column, in the order of `values`.
    pub vectors: Matrix,
    /// Number of slightly negative eigenvalues that were clamped to zero.
    pub clamped: usize,
    /// Values at or below this are numerically zero.
    pub threshold: f64,
}

impl EigenSpectrum {
    /// Number of eigenvalues above the rank threshold.
    pub fn rank(&self) -> usize {
        self.values.iter().filter(|&&v| v > self.threshold).count()
    }

    /// `V · diag(g(λ)) · Vᵀ` over the numerically nonzero part of the spectrum.
    pub fn map_range(&self, g: impl Fn(f64) -> f64) -> Matrix {
        let d = self.vectors.nrows();
        let r = self.rank();
        let basis = self.vectors.columns(0, r);
        let mut scaled = basis.clone_owned();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= g(self.values[j]);
        }
        let mut out = Matrix::zeros(d, d);
        out.gemm(1.0, &scaled, &basis.transpose(), 0.0);
        out
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFiniteValue(format!(
            "{what}[{}, {}]",
            pos % m.nrows().max(1),
            pos / m.nrows().max(1)
        ))),
        None => Ok(()),
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn ensure_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Ok(());
    }
    let asymmetry = (m - m.transpose()).norm() / norm;
    if asymmetry > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric PSD matrix.
///
/// The input is symmetrized first. Eigenvalues in `[-threshold, 0)` are
/// clamped to zero; anything more negative is [`Error::IndefiniteMatrix`].
pub fn eig_decompose_psd(m: &Matrix, policy: &RankPolicy) -> Result<EigenSpectrum> {
    ensure_finite(m, "matrix")?;
    ensure_symmetric(m)?;
    let d = m.nrows();
    if d == 0 {
        return Ok(EigenSpectrum {
            values: Vector::zeros(0),
            vectors: Matrix::zeros(0, 0),
            clamped: 0,
            threshold: policy.absolute_floor,
        });
    }

    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let largest = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let threshold = policy.threshold(largest, d, d);

    let mut values = Vector::zeros(d);
    let mut vectors = Matrix::zeros(d, d);
    let mut clamped = 0;
    for (dst, &src) in order.iter().enumerate() {
        let mut value = eig.eigenvalues[src];
        if value < 0.0 {
            if value < -threshold {
                return Err(Error::IndefiniteMatrix {
                    eigenvalue: value,
                    tolerance: threshold,
                });
            }
            value = 0.0;
            clamped += 1;
        }
        values[dst] = value;
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }

    Ok(EigenSpectrum {
        values,
        vectors,
        clamped,
        threshold,
    })
}

/// Symmetric PSD square root `V S^{1/2} Vᵀ`.
pub fn sqrt_psd(m: &Matrix, policy: &RankPolicy) -> Result<Matrix> {
    let spectrum = eig_decompose_psd(m, policy)?;
    Ok(spectrum.map_range(f64::sqrt))
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv_psd(m: &Matrix, policy: &RankPolicy) -> Result<Matrix> {
    let spectrum = eig_decompose_psd(m, policy)?;
    Ok(spectrum.map_range(f64::recip))
}

/// Thin SVD with the rank cut-off of `policy` applied.
struct ThinSvd {
    u: Matrix,
    singular: Vec<f64>,
    v_t: Matrix,
    threshold: f64,
}

impl ThinSvd {
    fn new(m: &Matrix, policy: &RankPolicy, floor_scale: f64) -> Self {
        let (rows, cols) = m.shape();
        if rows == 0 || cols == 0 {
            return Self {
                u: Matrix::zeros(rows, 0),
                singular: Vec::new(),
                v_t: Matrix::zeros(0, cols),
                threshold: 0.0,
            };
        }
        let svd = m.clone().svd(true, true);
        let singular: Vec<f64> = svd.singular_values.iter().copied().collect();
        let largest = singular.iter().fold(0.0_f64, |acc, &s| acc.max(s));
        let threshold = policy.threshold(largest.max(floor_scale), rows, cols);
        Self {
            u: svd.u.expect("u requested"),
            singular,
            v_t: svd.v_t.expect("v_t requested"),
            threshold,
        }
    }

    fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.singular
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s > self.threshold)
            .map(|(i, _)| i)
    }

    fn rank(&self) -> usize {
        self.kept().count()
    }

    fn pinv(&self, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(cols, rows);
        for i in self.kept() {
            let v = self.v_t.row(i).transpose();
            let u = self.u.column(i).clone_owned();
            out.ger(1.0 / self.singular[i], &v, &u, 1.0);
        }
        out
    }

    /// Orthonormal basis of the numerical column space.
    fn range_basis(&self) -> Matrix {
        let kept: Vec<usize> = self.kept().collect();
        self.u.select_columns(kept.iter())
    }
}

/// Moore–Penrose pseudo-inverse of an arbitrary matrix via SVD.
pub fn pinv_rect(m: &Matrix, policy: &RankPolicy) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let (rows, cols) = m.shape();
    Ok(ThinSvd::new(m, policy, 0.0).pinv(rows, cols))
}

/// Pseudo-inverse and numerical rank, with the rank cut-off measured against
/// `max(σ_max, scale)` instead of `σ_max` alone.
///
/// Used for quantities with a known natural magnitude (whitened
/// cross-covariances are O(1)), so that a round-off-sized matrix is rank 0
/// instead of being blown up into a spurious direction.
pub fn pinv_rect_scaled(m: &Matrix, policy: &RankPolicy, scale: f64) -> Result<(Matrix, usize)> {
    ensure_finite(m, "matrix")?;
    let (rows, cols) = m.shape();
    let svd = ThinSvd::new(m, policy, scale);
    Ok((svd.pinv(rows, cols), svd.rank()))
}

/// Numerical rank via SVD.
pub fn rank(m: &Matrix, policy: &RankPolicy) -> usize {
    ThinSvd::new(m, policy, 0.0).rank()
}

/// Cached whitening products for a covariance matrix.
#[derive(Debug, Clone)]
pub struct WhiteningContext {
    /// `W = (Σ^{1/2})⁺`.
    pub w: Matrix,
    /// `W⁺`, i.e. `Σ^{1/2}` restricted to the range of `Σ`.
    pub w_pinv: Matrix,
    pub rank: usize,
    pub spectrum: EigenSpectrum,
}

impl WhiteningContext {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// Orthogonal projector onto the image of the covariance (`W⁺W`).
    pub fn range_projector(&self) -> Matrix {
        self.spectrum.map_range(|_| 1.0)
    }
}

/// Build the whitening transform of a covariance matrix.
///
/// Textbook formulas write `W = Σ^{-1/2}`; that is only the
/// full-rank special case of the pseudo-inverse form computed here.
pub fn whiten(cov: &Matrix, policy: &RankPolicy) -> Result<WhiteningContext> {
    let spectrum = eig_decompose_psd(cov, policy)?;
    let w = spectrum.map_range(|v| 1.0 / v.sqrt());
    let w_pinv = spectrum.map_range(f64::sqrt);
    Ok(WhiteningContext {
        w,
        w_pinv,
        rank: spectrum.rank(),
        spectrum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Containment {
    pub contained: bool,
    /// `‖(I − P_Im(A)) B‖_F / ‖B‖_F` (zero when `B` is zero).
    pub residual: f64,
}

/// Whether every column of `b` lies in the column space of `a`.
pub fn column_space_contains(a: &Matrix, b: &Matrix, policy: &RankPolicy) -> Result<Containment> {
    if a.nrows() != b.nrows() {
        return Err(Error::dims(format!(
            "column space check needs equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    ensure_finite(a, "a")?;
    ensure_finite(b, "b")?;
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(Containment {
            contained: true,
            residual: 0.0,
        });
    }
    let basis = ThinSvd::new(a, policy, 0.0).range_basis();
    let outside = b - &basis * (basis.transpose() * b);
    let residual = outside.norm() / b_norm;
    Ok(Containment {
        contained: residual <= policy.containment,
        residual,
    })
}
