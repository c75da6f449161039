// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent checks for fitted transforms.
//!
//! Nothing in this module reuses the closed forms in [`crate::transforms`]:
//! constraint residuals and disturbance are measured on data, and the
//! optimality oracles solve the constrained least-squares problem directly,
//! either as one dense KKT system ([`kkt_oracle`]) or by a quadratic-penalty
//! descent ([`penalty_oracle`]).

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, RankPolicy, Vector};
use crate::moments::{self, ConceptLabels};
use crate::transforms::{AffineTransform, Mode};

/// What `Cov(f(X), Z₁)` is supposed to equal.
#[derive(Debug, Clone, Copy)]
pub enum ConstraintTarget<'a> {
    /// Erasure: zero cross-covariance.
    Zero,
    /// Switch: `−Cov(X, Z₁)`.
    Negated,
    /// Directed steering: `Cov(X, Z₂)` for the given target labels.
    MapTo(&'a ConceptLabels),
}

impl ConstraintTarget<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintTarget::Zero => "zero",
            ConstraintTarget::Negated => "negated",
            ConstraintTarget::MapTo(_) => "mapto",
        }
    }
}

/// `‖Cov(f(X), Z₁) − T‖_F / (1 + ‖T‖_F)` on the given sample.
pub fn constraint_residual(
    t: &AffineTransform,
    data: &Matrix,
    labels: &ConceptLabels,
    target: ConstraintTarget<'_>,
) -> Result<f64> {
    let transformed = t.apply(data)?;
    let after = moments::cross_covariance(&transformed, labels)?;
    let goal = match target {
        ConstraintTarget::Zero => Matrix::zeros(after.nrows(), after.ncols()),
        ConstraintTarget::Negated => -moments::cross_covariance(data, labels)?,
        ConstraintTarget::MapTo(z2) => {
            if z2.label_dim() != labels.label_dim() {
                return Err(Error::dims(format!(
                    "{} source concepts but {} target concepts",
                    labels.label_dim(),
                    z2.label_dim()
                )));
            }
            moments::cross_covariance(data, z2)?
        }
    };
    Ok((after - &goal).norm() / (1.0 + goal.norm()))
}

/// Mean over rows of `‖A x + b − x‖²`.
pub fn disturbance_objective(t: &AffineTransform, data: &Matrix) -> Result<f64> {
    let moved = t.apply(data)? - data;
    if data.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(moved.norm_squared() / data.nrows() as f64)
}

/// `E‖AX + b − X‖²` from moments: `tr((A−I) Σ (A−I)ᵀ) + ‖(A−I) μ + b‖²`.
pub fn population_objective(a: &Matrix, b: &Vector, mean: &Vector, cov_xx: &Matrix) -> f64 {
    let d = mean.len();
    let shift = a - Matrix::identity(d, d);
    let spread = (&shift * cov_xx * shift.transpose()).trace();
    spread + (&shift * mean + b).norm_squared()
}

/// Coefficient norm of the ridgeless least-squares predictor of `Z` from the
/// rows of `transformed`: `‖Σ_XX⁺ Σ_XZ‖_F` on centered data.
///
/// Zero exactly when the representation linearly guards the labels.
pub fn guardedness_score(transformed: &Matrix, labels: &ConceptLabels) -> Result<f64> {
    guardedness_score_with(transformed, labels, &RankPolicy::default())
}

pub fn guardedness_score_with(
    transformed: &Matrix,
    labels: &ConceptLabels,
    policy: &RankPolicy,
) -> Result<f64> {
    let (n, d) = transformed.shape();
    if n < d + 2 {
        return Err(Error::InsufficientSamples { needed: d + 2, got: n });
    }
    let (_, cov_xx) = moments::covariance(transformed)?;
    let cov_xz = moments::cross_covariance(transformed, labels)?;
    let coefficients = linalg::pinv_psd(&cov_xx, policy)? * cov_xz;
    Ok(coefficients.norm())
}

/// Minimizer of the disturbance objective under `A Σ_XZ₁ = target`.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub a: Matrix,
    pub b: Vector,
    pub multiplier: Matrix,
    pub objective: f64,
}

fn check_oracle_inputs(mean: &Vector, cov_xx: &Matrix, cov_xz1: &Matrix, target: &Matrix) -> Result<()> {
    let d = mean.len();
    if cov_xx.shape() != (d, d) || cov_xz1.nrows() != d || target.shape() != cov_xz1.shape() {
        return Err(Error::dims(format!(
            "oracle inputs: mean {d}, covariance {:?}, source {:?}, target {:?}",
            cov_xx.shape(),
            cov_xz1.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Solve the stationarity + feasibility system
///
/// ```text
/// (A − I) Σ_XX + Λ Σ_XZ₁ᵀ = 0
///          A Σ_XZ₁        = target
/// ```
///
/// for `(A, Λ)` as one dense linear system in `d² + d·l` unknowns, then set
/// `b = μ − A μ`. Requires `Σ_XX` positive definite and `Σ_XZ₁` of full
/// column rank; otherwise the system is singular.
pub fn kkt_oracle(mean: &Vector, cov_xx: &Matrix, cov_xz1: &Matrix, target: &Matrix) -> Result<OracleSolution> {
    check_oracle_inputs(mean, cov_xx, cov_xz1, target)?;
    let d = mean.len();
    let l = cov_xz1.ncols();
    let size = d * d + d * l;
    let a_idx = |i: usize, j: usize| i * d + j;
    let m_idx = |i: usize, m: usize| d * d + i * l + m;

    let mut system = Matrix::zeros(size, size);
    let mut rhs = Vector::zeros(size);
    for i in 0..d {
        // stationarity row (i, j): Σ_k A_ik Σ_kj + Σ_m Λ_im S_jm = Σ_ij
        for j in 0..d {
            let row = a_idx(i, j);
            for k in 0..d {
                system[(row, a_idx(i, k))] = cov_xx[(k, j)];
            }
            for m in 0..l {
                system[(row, m_idx(i, m))] = cov_xz1[(j, m)];
            }
            rhs[row] = cov_xx[(i, j)];
        }
        // feasibility row (i, m): Σ_k A_ik S_km = T_im
        for m in 0..l {
            let row = m_idx(i, m);
            for k in 0..d {
                system[(row, a_idx(i, k))] = cov_xz1[(k, m)];
            }
            rhs[row] = target[(i, m)];
        }
    }

    let solution = system.clone().lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    // LU happily returns garbage for numerically singular systems
    let residual = (&system * &solution - &rhs).norm();
    if residual > 1e-6 * (1.0 + rhs.norm()) * (1.0 + solution.norm()) {
        return Err(Error::SingularSystem);
    }

    let a = Matrix::from_fn(d, d, |i, j| solution[a_idx(i, j)]);
    let multiplier = Matrix::from_fn(d, l, |i, m| solution[m_idx(i, m)]);
    let b = mean - &a * mean;
    let objective = population_objective(&a, &b, mean, cov_xx);
    Ok(OracleSolution {
        a,
        b,
        multiplier,
        objective,
    })
}

/// Quadratic-penalty descent for the same problem, independent of both the
/// closed forms and the KKT system.
///
/// Minimizes `tr((A−I)Σ(A−I)ᵀ) + ρ‖A Σ_XZ₁ − target‖²` for each `ρ` in
/// `schedule`, warm-starting from the previous stage. Each stage runs
/// accelerated gradient descent with the fixed step `1/L`, `L` being the
/// Lipschitz constant of the gradient.
pub fn penalty_oracle(
    mean: &Vector,
    cov_xx: &Matrix,
    cov_xz1: &Matrix,
    target: &Matrix,
    schedule: &[f64],
) -> Result<OracleSolution> {
    check_oracle_inputs(mean, cov_xx, cov_xz1, target)?;
    let d = mean.len();
    let policy = RankPolicy::default();
    let spectrum = linalg::eig_decompose_psd(cov_xx, &policy)?;
    let (lambda_max, lambda_min) = (spectrum.values[0], spectrum.values[d - 1]);
    if lambda_min.is_nan() || lambda_min <= 0.0 {
        return Err(Error::SingularSystem);
    }
    let gram = cov_xz1 * cov_xz1.transpose();
    let gram_max = linalg::eig_decompose_psd(&linalg::symmetrize(&gram), &policy)?.values[0];
    let identity = Matrix::identity(d, d);

    let mut a = identity.clone();
    let mut residual = Matrix::zeros(d, cov_xz1.ncols());
    let mut rho = 0.0;
    for &weight in schedule {
        rho = weight;
        let lipschitz = 2.0 * (lambda_max + rho * gram_max);
        let strong = 2.0 * lambda_min;
        let step = 1.0 / lipschitz;
        let kappa_root = (lipschitz / strong).sqrt();
        let momentum = (kappa_root - 1.0) / (kappa_root + 1.0);
        let max_iters = ((kappa_root * 60.0) as usize).clamp(1_000, 4_000_000);

        let mut previous = a.clone();
        for _ in 0..max_iters {
            let look = &a + (&a - &previous) * momentum;
            residual = &look * cov_xz1 - target;
            let grad = (&look - &identity) * cov_xx * 2.0 + &residual * cov_xz1.transpose() * (2.0 * rho);
            previous = std::mem::replace(&mut a, look - grad * step);
            if (&a - &previous).norm() <= 1e-15 * (1.0 + a.norm()) {
                break;
            }
        }
    }
    // first-order multiplier estimate from the final penalty stage
    let multiplier = residual * (2.0 * rho);
    let b = mean - &a * mean;
    let objective = population_objective(&a, &b, mean, cov_xx);
    Ok(OracleSolution {
        a,
        b,
        multiplier,
        objective,
    })
}

/// `|value − reference| / |reference|`, zero when both vanish.
pub fn relative_gap(value: f64, reference: f64) -> f64 {
    let diff = (value - reference).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / reference.abs().max(f64::MIN_POSITIVE)
    }
}

/// Pass/fail thresholds for [`verify_transform`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub constraint: f64,
    /// Post/pre ratio of the guardedness score.
    pub guardedness_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            constraint: 1e-8,
            guardedness_ratio: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub mode: Mode,
    pub beta: f64,
    pub target: &'static str,
    pub constraint_residual: f64,
    pub objective: f64,
    pub guardedness_before: Option<f64>,
    pub guardedness_after: Option<f64>,
    pub oracle_gap: Option<f64>,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub const CSV_HEADER: &'static str =
        "mode,beta,target,constraint_residual,objective,guardedness_before,guardedness_after,oracle_gap,pass";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{:e},{:e},{},{},{},{}",
            self.mode,
            self.beta,
            self.target,
            self.constraint_residual,
            self.objective,
            opt(self.guardedness_before),
            opt(self.guardedness_after),
            opt(self.oracle_gap),
            self.passed()
        )
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "mode: {}", self.mode)?;
        writeln!(out, "beta: {}", self.beta)?;
        writeln!(out, "target: {}", self.target)?;
        writeln!(out, "constraint_residual: {:.6e}", self.constraint_residual)?;
        writeln!(out, "objective: {:.6e}", self.objective)?;
        if let (Some(before), Some(after)) = (self.guardedness_before, self.guardedness_after) {
            writeln!(out, "guardedness_before: {before:.6e}")?;
            writeln!(out, "guardedness_after: {after:.6e}")?;
        }
        if let Some(gap) = self.oracle_gap {
            writeln!(out, "oracle_gap: {gap:.6e}")?;
        }
        for c in &self.checks {
            writeln!(
                out,
                "check {}: {} (value {:.3e}, threshold {:.3e})",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.value,
                c.threshold
            )?;
        }
        write!(out, "result: {}", if self.passed() { "PASS" } else { "FAIL" })?;
        f.write_str(&out)
    }
}

/// Measure a transform on a labeled sample.
///
/// The guardedness check only runs for the zero target, where the transform
/// claims to remove all linear information about the labels.
pub fn verify_transform(
    t: &AffineTransform,
    data: &Matrix,
    labels: &ConceptLabels,
    target: ConstraintTarget<'_>,
    thresholds: &Thresholds,
) -> Result<VerificationReport> {
    let constraint_residual = constraint_residual(t, data, labels, target)?;
    let objective = disturbance_objective(t, data)?;
    let mut checks = vec![Check {
        name: "constraint",
        value: constraint_residual,
        threshold: thresholds.constraint,
        pass: constraint_residual <= thresholds.constraint,
    }];

    let (mut before, mut after) = (None, None);
    if matches!(target, ConstraintTarget::Zero) {
        let pre = guardedness_score(data, labels)?;
        let post = guardedness_score(&t.apply(data)?, labels)?;
        let ratio = if pre > 0.0 { post / pre } else { post };
        checks.push(Check {
            name: "guardedness",
            value: ratio,
            threshold: thresholds.guardedness_ratio,
            pass: ratio <= thresholds.guardedness_ratio,
        });
        before = Some(pre);
        after = Some(post);
    }

    Ok(VerificationReport {
        mode: t.mode,
        beta: t.beta,
        target: target.name(),
        constraint_residual,
        objective,
        guardedness_before: before,
        guardedness_after: after,
        oracle_gap: None,
        checks,
    })
}
