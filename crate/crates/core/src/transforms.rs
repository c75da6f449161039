// SPDX-License-Identifier: MIT OR Apache-2.0

//! Affine concept interventions `f(x) = A x + b`.
//!
//! Two families live here:
//!
//! - **Vanilla steering** built from a single unit direction `s`: additive
//!   steering `h + α s` and the reflection family `I − β s sᵀ` (β = 1 is the
//!   orthogonal projection that deletes `s`, β = 2 the Householder reflection
//!   that flips it).
//! - **Moment-based solvers** that minimize `E‖AX + b − X‖²` under a
//!   cross-covariance constraint, all expressed through the whitening
//!   transform `W = (Σ_XX^{1/2})⁺`:
//!
//!   | mode          | constraint                     | `Â(β)`                                  |
//!   |---------------|--------------------------------|-----------------------------------------|
//!   | `LeaceErase`  | `Cov(f(X), Z) = 0`             | `I − β W⁺ (WΣ_XZ)(WΣ_XZ)⁺ W`            |
//!   | `LeaceSwitch` | `Cov(f(X), Z) = −Cov(X, Z)`    | same, default β = 2                     |
//!   | `MidSteer`    | `Cov(f(X), Z₁) = Cov(X, Z₂)`   | `I + β W⁺ (WΣ₂ − WΣ₁)(WΣ₁)⁺ W`          |
//!
//!   with `b̂ = μ − Â μ` in every case, so the fitted mean is a fixed point.
//!
//! The solvers take moments, not raw data, so population-exact inputs and
//! sample estimates go through one code path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, RankPolicy, Vector, WhiteningContext};
use crate::moments::SteeringVector;

/// Natural magnitude of whitened cross-covariances `Cov(WX, Z)`.
///
/// Whitened activations have unit variance on their support and indicators
/// have variance at most 1/4, so every entry is O(1). Rank decisions on these
/// matrices are measured against this scale.
const WHITENED_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    VanillaAdd,
    VanillaErase,
    VanillaSwitch,
    LeaceErase,
    LeaceSwitch,
    MidSteer,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::VanillaAdd,
        Mode::VanillaErase,
        Mode::VanillaSwitch,
        Mode::LeaceErase,
        Mode::LeaceSwitch,
        Mode::MidSteer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::VanillaAdd => "vanilla-add",
            Mode::VanillaErase => "vanilla-erase",
            Mode::VanillaSwitch => "vanilla-switch",
            Mode::LeaceErase => "leace-erase",
            Mode::LeaceSwitch => "leace-switch",
            Mode::MidSteer => "mid-steer",
        }
    }

    /// β giving the mode its canonical meaning.
    pub fn default_beta(self) -> f64 {
        match self {
            Mode::VanillaSwitch | Mode::LeaceSwitch => 2.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::MalformedDocument(format!("unknown mode {s:?}")))
    }
}

/// `f(x) = A x + b` plus the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub matrix: Matrix,
    pub offset: Vector,
    pub mode: Mode,
    pub beta: f64,
    pub provenance: BTreeMap<String, String>,
}

impl AffineTransform {
    pub fn new(matrix: Matrix, offset: Vector, mode: Mode, beta: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() != offset.len() {
            return Err(Error::dims(format!(
                "transform needs a square matrix matching the offset, got {}x{} and {}",
                matrix.nrows(),
                matrix.ncols(),
                offset.len()
            )));
        }
        linalg::ensure_finite(&matrix, "A")?;
        if let Some(i) = offset.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("b[{i}]")));
        }
        if !beta.is_finite() {
            return Err(Error::NonFiniteValue("beta".into()));
        }
        Ok(Self {
            matrix,
            offset,
            mode,
            beta,
            provenance: BTreeMap::new(),
        })
    }

    pub fn identity(dim: usize, mode: Mode) -> Self {
        Self {
            matrix: Matrix::identity(dim, dim),
            offset: Vector::zeros(dim),
            mode,
            beta: mode.default_beta(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn with_note(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn apply_vector(&self, h: &Vector) -> Result<Vector> {
        if h.len() != self.dim() {
            return Err(Error::dims(format!(
                "vector of length {} for a transform of dimension {}",
                h.len(),
                self.dim()
            )));
        }
        Ok(&self.matrix * h + &self.offset)
    }

    /// Map every row `x` of `batch` to `A x + b`.
    pub fn apply(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.ncols() != self.dim() {
            return Err(Error::dims(format!(
                "batch has {} columns, transform dimension is {}",
                batch.ncols(),
                self.dim()
            )));
        }
        let mut out = Matrix::zeros(batch.nrows(), batch.ncols());
        out.gemm(1.0, batch, &self.matrix.transpose(), 0.0);
        for mut row in out.row_iter_mut() {
            row += self.offset.transpose();
        }
        Ok(out)
    }
}

/// `h + α s` with `s` the unit steering direction.
pub fn vanilla_add(h: &Vector, s: &SteeringVector, alpha: f64) -> Result<Vector> {
    if h.len() != s.dim() {
        return Err(Error::dims(format!(
            "activation of length {} for a steering vector of length {}",
            h.len(),
            s.dim()
        )));
    }
    Ok(h + &s.direction * alpha)
}

fn reflection_family(s: &SteeringVector, beta: f64, mode: Mode) -> AffineTransform {
    let d = s.dim();
    let mut a = Matrix::identity(d, d);
    a.ger(-beta, &s.direction, &s.direction, 1.0);
    AffineTransform {
        matrix: a,
        offset: Vector::zeros(d),
        mode,
        beta,
        provenance: BTreeMap::new(),
    }
}

/// `A = I − β s sᵀ`, `b = 0`.
///
/// β = 1 projects `s` out, β = 2 reflects across the hyperplane orthogonal to
/// `s`; values in between interpolate the two.
pub fn vanilla_erase_matrix(s: &SteeringVector, beta: f64) -> AffineTransform {
    reflection_family(s, beta, Mode::VanillaErase)
}

/// Same matrix family as [`vanilla_erase_matrix`], tagged as a switch.
pub fn vanilla_switch_matrix(s: &SteeringVector, beta: f64) -> AffineTransform {
    reflection_family(s, beta, Mode::VanillaSwitch)
}

/// Knobs shared by the moment-based solvers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    /// Steering strength; `None` picks the mode's default.
    pub beta: Option<f64>,
    pub policy: RankPolicy,
    /// Proceed when `Im(Σ_XZ) ⊄ Im(Σ_XX)` instead of failing. The solver then
    /// acts only on the part of `Σ_XZ` inside the image of `Σ_XX`.
    pub project_onto_range: bool,
}

impl FitOptions {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta: Some(beta),
            ..Self::default()
        }
    }
}

fn check_inputs(mean: &Vector, cov_xx: &Matrix, cross: &[&Matrix]) -> Result<()> {
    let d = mean.len();
    if cov_xx.shape() != (d, d) {
        return Err(Error::dims(format!(
            "covariance is {}x{}, mean has length {d}",
            cov_xx.nrows(),
            cov_xx.ncols()
        )));
    }
    for c in cross {
        if c.nrows() != d {
            return Err(Error::dims(format!(
                "cross-covariance has {} rows, expected {d}",
                c.nrows()
            )));
        }
        linalg::ensure_finite(c, "cross-covariance")?;
    }
    if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("mean[{i}]")));
    }
    Ok(())
}

/// Fails with `RangeViolation` unless the columns of `cov_xz` lie in the
/// image of `cov_xx`; returns the relative residual either way it passes.
fn check_range(cov_xx: &Matrix, cov_xz: &Matrix, opts: &FitOptions) -> Result<f64> {
    let c = linalg::column_space_contains(cov_xx, cov_xz, &opts.policy)?;
    if !c.contained && !opts.project_onto_range {
        return Err(Error::RangeViolation {
            residual: c.residual,
        });
    }
    Ok(c.residual)
}

/// `Â = I + β D` and `b̂ = μ − Â μ`.
fn assemble(
    mean: &Vector,
    direction: &Matrix,
    beta: f64,
    mode: Mode,
) -> Result<AffineTransform> {
    let d = mean.len();
    let a = Matrix::identity(d, d) + direction * beta;
    let b = mean - &a * mean;
    AffineTransform::new(a, b, mode, beta)
}

/// `−W⁺ (WΣ_XZ)(WΣ_XZ)⁺ W`, the shared direction of the LEACE family, and the
/// numerical rank of `WΣ_XZ`.
fn leace_direction(ctx: &WhiteningContext, cov_xz: &Matrix, policy: &RankPolicy) -> Result<(Matrix, usize)> {
    let whitened = &ctx.w * cov_xz;
    let (whitened_pinv, rank) = linalg::pinv_rect_scaled(&whitened, policy, WHITENED_SCALE)?;
    let inner = -whitened * whitened_pinv;
    Ok((&ctx.w_pinv * inner * &ctx.w, rank))
}

fn fit_leace(
    mean: &Vector,
    cov_xx: &Matrix,
    cov_xz: &Matrix,
    mode: Mode,
    opts: &FitOptions,
) -> Result<AffineTransform> {
    opts.policy.validate()?;
    check_inputs(mean, cov_xx, &[cov_xz])?;
    let residual = check_range(cov_xx, cov_xz, opts)?;
    let beta = opts.beta.unwrap_or(mode.default_beta());
    let ctx = linalg::whiten(cov_xx, &opts.policy)?;
    let (direction, concept_rank) = leace_direction(&ctx, cov_xz, &opts.policy)?;
    Ok(assemble(mean, &direction, beta, mode)?
        .with_note("covariance_rank", ctx.rank)
        .with_note("concept_rank", concept_rank)
        .with_note("range_residual", format!("{residual:.3e}"))
        .with_note("rank_threshold", format!("{:.3e}", ctx.spectrum.threshold)))
}

/// Least-squares concept erasure: the minimal-disturbance affine map with
/// `Cov(f(X), Z) = 0` at β = 1.
pub fn fit_leace_erase(
    mean: &Vector,
    cov_xx: &Matrix,
    cov_xz: &Matrix,
    opts: &FitOptions,
) -> Result<AffineTransform> {
    fit_leace(mean, cov_xx, cov_xz, Mode::LeaceErase, opts)
}

/// Minimal-disturbance concept switch: `Cov(f(X), Z) = −Cov(X, Z)` at β = 2.
///
/// Only meaningful when the concept partitions the data (every sample is in
/// the concept or its complement).
pub fn fit_leace_switch(
    mean: &Vector,
    cov_xx: &Matrix,
    cov_xz: &Matrix,
    opts: &FitOptions,
) -> Result<AffineTransform> {
    fit_leace(mean, cov_xx, cov_xz, Mode::LeaceSwitch, opts)
}

/// Directed concept steering: maps the source cross-covariance `Σ_XZ₁` onto
/// the target `Σ_XZ₂`, `Cov(f(X), Z₁) = Cov(X, Z₂)` at β = 1.
///
/// Requires the whitened source cross-covariance `WΣ_XZ₁` to have full
/// column rank; a rank-deficient source is rejected rather than silently
/// reduced to a subset of concepts.
pub fn fit_midsteer(
    mean: &Vector,
    cov_xx: &Matrix,
    cov_xz_source: &Matrix,
    cov_xz_target: &Matrix,
    opts: &FitOptions,
) -> Result<AffineTransform> {
    opts.policy.validate()?;
    check_inputs(mean, cov_xx, &[cov_xz_source, cov_xz_target])?;
    if cov_xz_source.ncols() != cov_xz_target.ncols() {
        return Err(Error::dims(format!(
            "source has {} concepts, target has {}",
            cov_xz_source.ncols(),
            cov_xz_target.ncols()
        )));
    }
    let source_residual = check_range(cov_xx, cov_xz_source, opts)?;
    let target_residual = check_range(cov_xx, cov_xz_target, opts)?;
    let beta = opts.beta.unwrap_or(Mode::MidSteer.default_beta());

    let ctx = linalg::whiten(cov_xx, &opts.policy)?;
    let source = &ctx.w * cov_xz_source;
    let target = &ctx.w * cov_xz_target;
    let (source_pinv, rank) = linalg::pinv_rect_scaled(&source, &opts.policy, WHITENED_SCALE)?;
    let expected = cov_xz_source.ncols();
    if rank < expected {
        return Err(Error::ConceptRankDeficient { rank, expected });
    }
    let inner = (target - source) * source_pinv;
    let direction = &ctx.w_pinv * inner * &ctx.w;

    Ok(assemble(mean, &direction, beta, Mode::MidSteer)?
        .with_note("covariance_rank", ctx.rank)
        .with_note("concept_rank", rank)
        .with_note(
            "range_residual",
            format!("{:.3e}", source_residual.max(target_residual)),
        )
        .with_note("rank_threshold", format!("{:.3e}", ctx.spectrum.threshold)))
}

/// A dense layer `h ↦ W h + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::dims(format!(
                "weight has {} rows, bias has length {}",
                weight.nrows(),
                bias.len()
            )));
        }
        linalg::ensure_finite(&weight, "weight")?;
        if let Some(i) = bias.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("bias[{i}]")));
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, h: &Vector) -> Result<Vector> {
        if h.len() != self.input_dim() {
            return Err(Error::dims(format!(
                "input of length {} for a layer with {} inputs",
                h.len(),
                self.input_dim()
            )));
        }
        Ok(&self.weight * h + &self.bias)
    }
}

/// Fold `t` into the output of `layer`: `A (W h + c) + b = (A W) h + (A c + b)`.
pub fn fold_into_layer(t: &AffineTransform, layer: &LinearLayer) -> Result<LinearLayer> {
    if t.dim() != layer.output_dim() {
        return Err(Error::dims(format!(
            "transform dimension {} does not match layer output {}",
            t.dim(),
            layer.output_dim()
        )));
    }
    Ok(LinearLayer {
        weight: &t.matrix * &layer.weight,
        bias: &t.matrix * &layer.bias + &t.offset,
    })
}
