// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic representation datasets with planted linear concepts.
//!
//! Each sample is `x = μ₀ + Σ_c z_c · gap_c · u_c + ε` with `ε ~ N(0, Σ_noise)`
//! shared across classes, so class-conditional means differ by exactly
//! `gap_c · u_c` and the population moments are available in closed form.
//! Gaussian noise with a shared covariance is the idealization under which
//! the affine theory is exact; it is not meant to look like real activations.
//!
//! Randomness comes from ChaCha8 streams keyed by the seed: stream 0 drives
//! the noise, stream 1 the labels. Output is bit-identical for a fixed spec
//! and seed within this implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, RankPolicy, Vector};
use crate::moments::ConceptLabels;

/// How the concept indicators relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Each concept is an independent coin flip.
    #[default]
    Independent,
    /// At most one concept per sample (horse *or* motorcycle *or* neither).
    Exclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConcept {
    /// Normalized on generation.
    pub direction: Vector,
    pub positive_fraction: f64,
    /// Distance between the class-conditional means along `direction`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWorldSpec {
    pub dim: usize,
    pub concepts: Vec<PlantedConcept>,
    pub layout: Layout,
    pub base_mean: Vector,
    pub noise_covariance: Matrix,
    pub samples: usize,
    pub seed: u64,
}

/// Exact population moments of a [`ConceptWorldSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    pub mean: Vector,
    pub cov_xx: Matrix,
    /// One column per concept.
    pub cov_xz: Matrix,
}

#[derive(Debug, Clone)]
pub struct World {
    pub activations: Matrix,
    pub labels: ConceptLabels,
    pub population: PopulationMoments,
    /// Whether the concepts jointly partition the data (exclusive layout
    /// with fractions summing to one). Bidirectional switching between
    /// concepts is only well-posed when this holds.
    pub partitions: bool,
}

const PARTITION_TOLERANCE: f64 = 1e-12;

impl ConceptWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        if self.base_mean.len() != d || self.noise_covariance.shape() != (d, d) {
            return Err(Error::InvalidSpec(format!(
                "base mean / noise covariance do not match dimension {d}"
            )));
        }
        if self.base_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("base mean must be finite".into()));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.direction.len() != d {
                return Err(Error::InvalidSpec(format!("concept {i}: direction has wrong length")));
            }
            let norm = c.direction.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::InvalidSpec(format!("concept {i}: direction must be nonzero")));
            }
            if !(c.positive_fraction > 0.0 && c.positive_fraction < 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "concept {i}: positive fraction {} outside (0, 1)",
                    c.positive_fraction
                )));
            }
            if !(c.gap >= 0.0 && c.gap.is_finite()) {
                return Err(Error::InvalidSpec(format!("concept {i}: gap must be finite and >= 0")));
            }
        }
        if self.layout == Layout::Exclusive {
            let total: f64 = self.concepts.iter().map(|c| c.positive_fraction).sum();
            if total > 1.0 + PARTITION_TOLERANCE {
                return Err(Error::InvalidSpec(format!(
                    "exclusive concepts have fractions summing to {total} > 1"
                )));
            }
        }
        linalg::eig_decompose_psd(&self.noise_covariance, &RankPolicy::default())
            .map_err(|e| Error::InvalidSpec(format!("noise covariance: {e}")))?;
        Ok(())
    }

    /// Planted offsets `gap_c · u_c` as columns.
    fn shifts(&self) -> Matrix {
        let mut v = Matrix::zeros(self.dim, self.concepts.len());
        for (j, c) in self.concepts.iter().enumerate() {
            v.set_column(j, &(&c.direction * (c.gap / c.direction.norm())));
        }
        v
    }

    fn fractions(&self) -> Vector {
        Vector::from_iterator(self.concepts.len(), self.concepts.iter().map(|c| c.positive_fraction))
    }

    /// Whether the concepts jointly cover every sample exactly once.
    pub fn partitions(&self) -> bool {
        self.layout == Layout::Exclusive
            && (self.fractions().sum() - 1.0).abs() <= PARTITION_TOLERANCE
    }

    /// Closed-form moments.
    ///
    /// With `V` the planted shifts and `Σ_Z` the label covariance
    /// (`diag(p(1−p))` for independent concepts, `diag(p) − ppᵀ` for
    /// exclusive ones): `μ = μ₀ + V p`, `Σ_XX = Σ_noise + V Σ_Z Vᵀ`,
    /// `Σ_XZ = V Σ_Z`. Column `c` of `Σ_XZ` equals
    /// `p_c (1 − p_c)(E[X | Z_c = 1] − E[X | Z_c = 0])` in both layouts.
    pub fn population_moments(&self) -> PopulationMoments {
        let v = self.shifts();
        let p = self.fractions();
        let label_cov = match self.layout {
            Layout::Independent => Matrix::from_diagonal(&p.map(|q| q * (1.0 - q))),
            Layout::Exclusive => Matrix::from_diagonal(&p) - &p * p.transpose(),
        };
        let cov_xz = &v * &label_cov;
        PopulationMoments {
            mean: &self.base_mean + &v * &p,
            cov_xx: &self.noise_covariance + &cov_xz * v.transpose(),
            cov_xz,
        }
    }
}

/// Draw samples from a concept world.
pub fn generate(spec: &ConceptWorldSpec) -> Result<World> {
    spec.validate()?;
    let (n, d, k) = (spec.samples, spec.dim, spec.concepts.len());
    let noise_root = linalg::sqrt_psd(&spec.noise_covariance, &RankPolicy::default())?;
    let shifts = spec.shifts();

    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    label_rng.set_stream(1);
    let mut indicators = vec![0u8; n * k];
    for row in indicators.chunks_mut(k.max(1)).take(n) {
        match spec.layout {
            Layout::Independent => {
                for (slot, c) in row.iter_mut().zip(&spec.concepts) {
                    *slot = u8::from(label_rng.random::<f64>() < c.positive_fraction);
                }
            }
            Layout::Exclusive => {
                let u: f64 = label_rng.random();
                let mut cumulative = 0.0;
                for (slot, c) in row.iter_mut().zip(&spec.concepts) {
                    cumulative += c.positive_fraction;
                    if u < cumulative {
                        *slot = 1;
                        break;
                    }
                }
            }
        }
    }
    let labels = ConceptLabels::from_bytes(n, k, indicators)?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(0);
    // draw row by row so the stream order is independent of storage layout
    let mut white = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            white[(i, j)] = StandardNormal.sample(&mut noise_rng);
        }
    }
    let mut activations = white * noise_root.transpose();
    let z = labels.to_matrix();
    activations.gemm(1.0, &z, &shifts.transpose(), 1.0);
    for mut row in activations.row_iter_mut() {
        row += spec.base_mean.transpose();
    }

    Ok(World {
        activations,
        labels,
        population: spec.population_moments(),
        partitions: spec.partitions(),
    })
}

/// A seeded random world: unit directions, fractions in `[0.2, 0.5]`
/// (scaled to sum to 0.8 in the exclusive layout), gaps in `[1, 3]`, and a
/// well-conditioned random noise covariance.
pub fn random_world(dim: usize, concepts: usize, layout: Layout, samples: usize, seed: u64) -> ConceptWorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut gaussian = |rows: usize, cols: usize| -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    };
    let g = gaussian(dim, dim);
    let noise_covariance = &g * g.transpose() / dim as f64 + Matrix::identity(dim, dim) * 0.5;
    let base_mean = gaussian(dim, 1).column(0).into_owned();
    let directions = gaussian(dim, concepts);

    let mut planted: Vec<PlantedConcept> = (0..concepts)
        .map(|c| {
            let dir = directions.column(c).into_owned();
            PlantedConcept {
                direction: &dir / dir.norm(),
                positive_fraction: 0.2 + 0.3 * rng.random::<f64>(),
                gap: 1.0 + 2.0 * rng.random::<f64>(),
            }
        })
        .collect();
    if layout == Layout::Exclusive && concepts > 0 {
        let total: f64 = planted.iter().map(|c| c.positive_fraction).sum();
        for c in &mut planted {
            c.positive_fraction *= 0.8 / total;
        }
    }

    ConceptWorldSpec {
        dim,
        concepts: planted,
        layout,
        base_mean,
        noise_covariance,
        samples,
        seed,
    }
}

/// Population inputs with zero mean and identity covariance, where the
/// cross-covariance is a positive multiple of the given direction.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedInstance {
    pub mean: Vector,
    pub cov_xx: Matrix,
    pub cov_xz: Matrix,
    pub positive_fraction: f64,
    pub gap: f64,
}

/// Standardized instance with cross-covariance `p(1−p) · gap · s`.
///
/// `p` is drawn from `[0.1, 0.9]` and `gap` from `[0.5, 1]`. Since
/// `p(1−p) · gap ≤ sqrt(p(1−p))` these moments are realizable by a joint
/// distribution of `(X, Z)`. `s` is normalized if it is not already.
pub fn exact_standardized_instance(dim: usize, s: &Vector, seed: u64) -> StandardizedInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 0.1 + 0.8 * rng.random::<f64>();
    let gap = 0.5 + 0.5 * rng.random::<f64>();
    let unit = s / s.norm();
    let cov_xz = Matrix::from_column_slice(dim, 1, (&unit * (p * (1.0 - p) * gap)).as_slice());
    StandardizedInstance {
        mean: Vector::zeros(dim),
        cov_xx: Matrix::identity(dim, dim),
        cov_xz,
        positive_fraction: p,
        gap,
    }
}
