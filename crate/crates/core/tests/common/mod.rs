// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use steerkit::moments::{ConceptLabels, MomentEstimate};
use steerkit::synth::{self, Layout};
use steerkit::transforms::{self, AffineTransform, FitOptions};
use steerkit::verify::ConstraintTarget;
use steerkit::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Erase,
    Switch,
    MidSteer,
}

pub const FAMILIES: [Family; 3] = [Family::Erase, Family::Switch, Family::MidSteer];

/// A sampled world plus the moments and labels each fit mode consumes.
pub struct Instance {
    pub x: Matrix,
    pub source: ConceptLabels,
    /// Target labels, present only for MidSteer instances.
    pub target: Option<ConceptLabels>,
    pub mean: Vector,
    pub cov_xx: Matrix,
    pub cov_xz: Matrix,
    pub cov_xz_target: Option<Matrix>,
}

impl Instance {
    pub fn sampled(family: Family, dim: usize, concepts: usize, n: usize, seed: u64) -> Self {
        let columns = if family == Family::MidSteer { 2 * concepts } else { concepts };
        let spec = synth::random_world(dim, columns, Layout::Independent, n, seed);
        let world = synth::generate(&spec).expect("world");
        let est = MomentEstimate::from_sample(&world.activations, &world.labels).expect("moments");
        let (source, target, cov_xz, cov_xz_target) = if family == Family::MidSteer {
            let src: Vec<usize> = (0..concepts).collect();
            let tgt: Vec<usize> = (concepts..2 * concepts).collect();
            let (s, t) = est.split_source_target().expect("split");
            (
                world.labels.select_columns(&src).unwrap(),
                Some(world.labels.select_columns(&tgt).unwrap()),
                s,
                Some(t),
            )
        } else {
            (world.labels.clone(), None, est.cov_xz.clone(), None)
        };
        Self {
            x: world.activations,
            source,
            target,
            mean: est.mean,
            cov_xx: est.cov_xx,
            cov_xz,
            cov_xz_target,
        }
    }

    pub fn population(family: Family, dim: usize, concepts: usize, seed: u64) -> Self {
        let columns = if family == Family::MidSteer { 2 * concepts } else { concepts };
        let spec = synth::random_world(dim, columns, Layout::Independent, 0, seed);
        let pop = spec.population_moments();
        let (cov_xz, cov_xz_target) = if family == Family::MidSteer {
            (
                pop.cov_xz.columns(0, concepts).clone_owned(),
                Some(pop.cov_xz.columns(concepts, concepts).clone_owned()),
            )
        } else {
            (pop.cov_xz.clone(), None)
        };
        Self {
            x: Matrix::zeros(0, dim),
            source: ConceptLabels::from_bytes(0, concepts, vec![]).unwrap(),
            target: None,
            mean: pop.mean,
            cov_xx: pop.cov_xx,
            cov_xz,
            cov_xz_target,
        }
    }

    pub fn fit(&self, family: Family, opts: &FitOptions) -> steerkit::Result<AffineTransform> {
        match family {
            Family::Erase => transforms::fit_leace_erase(&self.mean, &self.cov_xx, &self.cov_xz, opts),
            Family::Switch => transforms::fit_leace_switch(&self.mean, &self.cov_xx, &self.cov_xz, opts),
            Family::MidSteer => transforms::fit_midsteer(
                &self.mean,
                &self.cov_xx,
                &self.cov_xz,
                self.cov_xz_target.as_ref().expect("target"),
                opts,
            ),
        }
    }

    pub fn constraint(&self, family: Family) -> ConstraintTarget<'_> {
        match family {
            Family::Erase => ConstraintTarget::Zero,
            Family::Switch => ConstraintTarget::Negated,
            Family::MidSteer => ConstraintTarget::MapTo(self.target.as_ref().expect("target labels")),
        }
    }

    /// Right-hand side of `A Σ_XZ₁ = T` for the canonical β of each family.
    pub fn oracle_target(&self, family: Family) -> Matrix {
        match family {
            Family::Erase => Matrix::zeros(self.cov_xz.nrows(), self.cov_xz.ncols()),
            Family::Switch => -&self.cov_xz,
            Family::MidSteer => self.cov_xz_target.clone().expect("target"),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    let v = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    &v / v.norm()
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Two-pass mean and `1/(n−1)` covariance with plain loops.
pub fn two_pass_covariance(x: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[(i, j)];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        for a in 0..d {
            let da = x[(i, a)] - mean[a];
            for b in 0..d {
                cov[a][b] += da * (x[(i, b)] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}

pub fn relative_error(got: &Matrix, reference: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (i, row) in reference.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            diff += (got[(i, j)] - r).powi(2);
            norm += r * r;
        }
    }
    diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE)
}
