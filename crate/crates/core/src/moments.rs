// SPDX-License-Identifier: MIT OR Apache-2.0

//! First and second moment estimation from streamed activation batches.
//!
//! [`MomentSummary`] follows the batched Welford recurrence: the first batch
//! initializes the running sum and centered scatter, every later batch adds
//! `Δ_oldᵀ Δ_new` where the deltas are taken against the mean before and
//! after absorbing the batch. Summaries over disjoint shards can be combined
//! with [`MomentSummary::merge`], which is how estimation is parallelized.
//!
//! All covariances use the unbiased `1/(n−1)` normalization. The closed-form
//! solvers are invariant to a common scalar on `Σ_XX` and `Σ_XZ`, so this
//! choice never changes a fitted transform.
//!
//! Rows are treated as i.i.d. observations of one `d`-vector; any token,
//! patch or head axes must be flattened by the caller.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Binary concept indicators, `n × k`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLabels {
    rows: usize,
    cols: usize,
    indicators: Vec<u8>,
}

impl ConceptLabels {
    /// Build from row-major bytes; every byte must be 0 or 1.
    pub fn from_bytes(rows: usize, cols: usize, indicators: Vec<u8>) -> Result<Self> {
        if indicators.len() != rows * cols {
            return Err(Error::dims(format!(
                "{rows}x{cols} labels need {} entries, got {}",
                rows * cols,
                indicators.len()
            )));
        }
        if let Some(pos) = indicators.iter().position(|&b| b > 1) {
            return Err(Error::InvalidLabel {
                row: pos / cols,
                column: pos % cols,
                value: f64::from(indicators[pos]),
            });
        }
        Ok(Self {
            rows,
            cols,
            indicators,
        })
    }

    /// Build from a real matrix whose entries must be exactly 0.0 or 1.0.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let (rows, cols) = m.shape();
        let mut indicators = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = m[(i, j)];
                if v == 0.0 {
                    indicators.push(0);
                } else if v == 1.0 {
                    indicators.push(1);
                } else {
                    return Err(Error::InvalidLabel {
                        row: i,
                        column: j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            indicators,
        })
    }

    /// Single binary concept from booleans.
    pub fn from_flags(flags: &[bool]) -> Self {
        Self {
            rows: flags.len(),
            cols: 1,
            indicators: flags.iter().map(|&f| u8::from(f)).collect(),
        }
    }

    pub fn samples(&self) -> usize {
        self.rows
    }

    pub fn label_dim(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.indicators[row * self.cols + col]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.indicators
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| f64::from(self.get(i, j)))
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.cols) {
            return Err(Error::dims(format!(
                "label column {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut indicators = Vec::with_capacity(self.rows * columns.len());
        for i in 0..self.rows {
            indicators.extend(columns.iter().map(|&c| self.get(i, c)));
        }
        Ok(Self {
            rows: self.rows,
            cols: columns.len(),
            indicators,
        })
    }

    /// Place `other`'s columns to the right of ours.
    pub fn hstack(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dims(format!(
                "cannot stack label blocks with {} and {} rows",
                self.rows, other.rows
            )));
        }
        let mut indicators = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for i in 0..self.rows {
            indicators.extend_from_slice(&self.indicators[i * self.cols..(i + 1) * self.cols]);
            indicators.extend_from_slice(&other.indicators[i * other.cols..(i + 1) * other.cols]);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols + other.cols,
            indicators,
        })
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Self {
        self.slice_rows(0, n)
    }

    /// Rows `start..start + len`, clipped to the available rows.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let start = start.min(self.rows);
        let end = start.saturating_add(len).min(self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            indicators: self.indicators[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Checks one-hot semantics: every row sums to exactly 1.
    pub fn check_partitioning(&self) -> Result<()> {
        for i in 0..self.rows {
            let sum: u32 = (0..self.cols).map(|j| u32::from(self.get(i, j))).sum();
            if sum != 1 {
                return Err(Error::NotPartitioning { row: i, sum });
            }
        }
        Ok(())
    }

    /// Fraction of rows with the indicator set in `col`.
    pub fn positive_fraction(&self, col: usize) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let ones = (0..self.rows).filter(|&i| self.get(i, col) == 1).count();
        ones as f64 / self.rows as f64
    }
}

/// Streaming count / running sum / centered scatter accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    dim: usize,
    count: usize,
    sum: Vector,
    scatter: Matrix,
    finalized: bool,
}

fn column_sums(batch: &Matrix) -> Vector {
    batch.row_sum().transpose()
}

fn centered(batch: &Matrix, mean: &Vector) -> Matrix {
    let mut out = batch.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

impl MomentSummary {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: Vector::zeros(dim),
            scatter: Matrix::zeros(dim, dim),
            finalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn running_sum(&self) -> &Vector {
        &self.sum
    }

    pub fn scatter(&self) -> &Matrix {
        &self.scatter
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Current mean, `M / n` (zero vector when empty).
    pub fn mean(&self) -> Vector {
        if self.count == 0 {
            Vector::zeros(self.dim)
        } else {
            &self.sum / self.count as f64
        }
    }

    /// Absorb a batch of rows.
    pub fn update_batch(&mut self, batch: &Matrix) -> Result<()> {
        if self.finalized {
            return Err(Error::AlreadyFinalized);
        }
        if batch.ncols() != self.dim {
            return Err(Error::dims(format!(
                "batch has {} columns, summary expects {}",
                batch.ncols(),
                self.dim
            )));
        }
        crate::linalg::ensure_finite(batch, "batch")?;
        let m = batch.nrows();
        if m == 0 {
            return Ok(());
        }

        if self.count == 0 {
            self.count = m;
            self.sum = column_sums(batch);
            let delta = centered(batch, &self.mean());
            self.scatter.gemm_tr(1.0, &delta, &delta, 0.0);
        } else {
            let mean_old = self.mean();
            self.count += m;
            self.sum += column_sums(batch);
            let mean_new = self.mean();
            let delta_old = centered(batch, &mean_old);
            let delta_new = centered(batch, &mean_new);
            self.scatter.gemm_tr(1.0, &delta_old, &delta_new, 1.0);
        }
        Ok(())
    }

    /// Combine summaries of two disjoint shards.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::dims(format!(
                "cannot merge summaries of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        if self.finalized || other.finalized {
            return Err(Error::AlreadyFinalized);
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean() - self.mean();
        let mut scatter = &self.scatter + &other.scatter;
        scatter.ger(na * nb / n, &delta, &delta, 1.0);
        Ok(Self {
            dim: self.dim,
            count: self.count + other.count,
            sum: &self.sum + &other.sum,
            scatter,
            finalized: false,
        })
    }

    /// Mean and covariance `(S + Sᵀ) / (2(n−1))`. Marks the summary finalized.
    pub fn finalize(&mut self) -> Result<(Vector, Matrix)> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: self.count,
            });
        }
        self.finalized = true;
        let cov = crate::linalg::symmetrize(&self.scatter) / (self.count - 1) as f64;
        Ok((self.mean(), cov))
    }
}

/// Streaming accumulator for the cross-covariance between activations and
/// concept indicators.
///
/// Keeps the running sums of `x` and `z` plus the centered co-moment
/// `Σ (x − x̄)(z − z̄)ᵀ`, updated with the same batched recurrence as
/// [`MomentSummary`]. Finalizing gives `(Σ xᵢzᵢᵀ − n x̄ z̄ᵀ)/(n−1)` without the
/// cancellation of the raw-sum formula.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMomentSummary {
    dim: usize,
    label_dim: usize,
    count: usize,
    sum_x: Vector,
    sum_z: Vector,
    comoment: Matrix,
}

impl CrossMomentSummary {
    pub fn new(dim: usize, label_dim: usize) -> Self {
        Self {
            dim,
            label_dim,
            count: 0,
            sum_x: Vector::zeros(dim),
            sum_z: Vector::zeros(label_dim),
            comoment: Matrix::zeros(dim, label_dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update_batch(&mut self, batch: &Matrix, labels: &ConceptLabels) -> Result<()> {
        if batch.ncols() != self.dim || labels.label_dim() != self.label_dim {
            return Err(Error::dims(format!(
                "batch {}x{} / labels {}x{} do not match summary ({}, {})",
                batch.nrows(),
                batch.ncols(),
                labels.samples(),
                labels.label_dim(),
                self.dim,
                self.label_dim
            )));
        }
        if batch.nrows() != labels.samples() {
            return Err(Error::dims(format!(
                "{} activation rows but {} label rows",
                batch.nrows(),
                labels.samples()
            )));
        }
        crate::linalg::ensure_finite(batch, "batch")?;
        let m = batch.nrows();
        if m == 0 {
            return Ok(());
        }
        let z = labels.to_matrix();
        let mean_x_old = self.mean_x();
        let first = self.count == 0;
        self.count += m;
        self.sum_x += column_sums(batch);
        self.sum_z += column_sums(&z);
        let dz_new = centered(&z, &self.mean_z());
        let dx = if first {
            centered(batch, &self.mean_x())
        } else {
            centered(batch, &mean_x_old)
        };
        self.comoment.gemm_tr(1.0, &dx, &dz_new, 1.0);
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim || self.label_dim != other.label_dim {
            return Err(Error::dims("cannot merge cross summaries of different shapes"));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let dx = other.mean_x() - self.mean_x();
        let dz = other.mean_z() - self.mean_z();
        let mut comoment = &self.comoment + &other.comoment;
        comoment.ger(na * nb / (na + nb), &dx, &dz, 1.0);
        Ok(Self {
            dim: self.dim,
            label_dim: self.label_dim,
            count: self.count + other.count,
            sum_x: &self.sum_x + &other.sum_x,
            sum_z: &self.sum_z + &other.sum_z,
            comoment,
        })
    }

    pub fn mean_x(&self) -> Vector {
        if self.count == 0 {
            Vector::zeros(self.dim)
        } else {
            &self.sum_x / self.count as f64
        }
    }

    pub fn mean_z(&self) -> Vector {
        if self.count == 0 {
            Vector::zeros(self.label_dim)
        } else {
            &self.sum_z / self.count as f64
        }
    }

    pub fn cross_covariance(&self) -> Result<Matrix> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: self.count,
            });
        }
        Ok(&self.comoment / (self.count - 1) as f64)
    }
}

/// Mean and covariance of a whole matrix of rows in one batch.
pub fn covariance(activations: &Matrix) -> Result<(Vector, Matrix)> {
    let mut summary = MomentSummary::new(activations.ncols());
    summary.update_batch(activations)?;
    summary.finalize()
}

/// Unbiased sample cross-covariance `Cov(X, Z)`, `d × k`.
pub fn cross_covariance(activations: &Matrix, labels: &ConceptLabels) -> Result<Matrix> {
    if activations.nrows() != labels.samples() {
        return Err(Error::dims(format!(
            "{} activation rows but {} label rows",
            activations.nrows(),
            labels.samples()
        )));
    }
    let n = activations.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    crate::linalg::ensure_finite(activations, "activations")?;
    let z = labels.to_matrix();
    let xc = centered(activations, &(column_sums(activations) / n as f64));
    let zc = centered(&z, &(column_sums(&z) / n as f64));
    let mut out = Matrix::zeros(activations.ncols(), labels.label_dim());
    out.gemm_tr(1.0 / (n - 1) as f64, &xc, &zc, 0.0);
    Ok(out)
}

/// Difference of concept-conditional means, with its unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub direction: Vector,
    pub raw_difference: Vector,
    pub positive_fraction: f64,
}

impl SteeringVector {
    /// Normalize an arbitrary direction.
    pub fn from_direction(v: &Vector) -> Result<Self> {
        let norm = v.norm();
        if norm.is_nan() || norm <= ZERO_DIRECTION_NORM || norm.is_infinite() {
            return Err(Error::ZeroDirection { norm });
        }
        Ok(Self {
            direction: v / norm,
            raw_difference: v.clone(),
            positive_fraction: f64::NAN,
        })
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }
}

const ZERO_DIRECTION_NORM: f64 = 1e-12;

/// `E[h | C = 1] − E[h | C = 0]` for label column `column`.
pub fn steering_vector(
    activations: &Matrix,
    labels: &ConceptLabels,
    column: usize,
) -> Result<SteeringVector> {
    if activations.nrows() != labels.samples() {
        return Err(Error::dims(format!(
            "{} activation rows but {} label rows",
            activations.nrows(),
            labels.samples()
        )));
    }
    if column >= labels.label_dim() {
        return Err(Error::dims(format!(
            "label column {column} out of range for {} columns",
            labels.label_dim()
        )));
    }
    let d = activations.ncols();
    let mut sums = [Vector::zeros(d), Vector::zeros(d)];
    let mut counts = [0usize; 2];
    for (i, row) in activations.row_iter().enumerate() {
        let class = usize::from(labels.get(i, column));
        sums[class] += row.transpose();
        counts[class] += 1;
    }
    for class in 0..2u8 {
        if counts[usize::from(class)] == 0 {
            return Err(Error::EmptyClass { column, class });
        }
    }
    let raw = &sums[1] / counts[1] as f64 - &sums[0] / counts[0] as f64;
    let norm = raw.norm();
    if norm.is_nan() || norm <= ZERO_DIRECTION_NORM {
        return Err(Error::ZeroDirection { norm });
    }
    Ok(SteeringVector {
        direction: &raw / norm,
        raw_difference: raw,
        positive_fraction: counts[1] as f64 / activations.nrows() as f64,
    })
}

/// The fitted statistics every solver consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mean: Vector,
    pub cov_xx: Matrix,
    pub cov_xz: Matrix,
    /// Rows behind `mean` and `cov_xx`.
    pub samples: usize,
    /// Rows behind `cov_xz`.
    pub cross_samples: usize,
}

impl MomentEstimate {
    /// Estimate everything from one labeled sample.
    pub fn from_sample(activations: &Matrix, labels: &ConceptLabels) -> Result<Self> {
        let (mean, cov_xx) = covariance(activations)?;
        let cov_xz = cross_covariance(activations, labels)?;
        Ok(Self {
            mean,
            cov_xx,
            cov_xz,
            samples: activations.nrows(),
            cross_samples: activations.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn label_dim(&self) -> usize {
        self.cov_xz.ncols()
    }

    /// Split `cov_xz = [Σ_XZ₁ | Σ_XZ₂]` into equal source/target halves.
    pub fn split_source_target(&self) -> Result<(Matrix, Matrix)> {
        let k = self.label_dim();
        if k == 0 || !k.is_multiple_of(2) {
            return Err(Error::dims(format!(
                "directed steering needs an even number of label columns, got {k}"
            )));
        }
        let l = k / 2;
        Ok((
            self.cov_xz.columns(0, l).clone_owned(),
            self.cov_xz.columns(l, l).clone_owned(),
        ))
    }
}
