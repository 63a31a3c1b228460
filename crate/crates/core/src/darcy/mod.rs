//! Ground truth for the Darcy problem `-∇·(a ∇u) = 1` on `(0,1)²`, `u = 0` on
//! the boundary: random binary coefficients, a finite-volume stencil, a
//! preconditioned CG solver, and the dataset file format.

mod cg;
mod dataset;
mod grf;
mod stencil;

pub use cg::{cg_solve, CgSolution, LinearOperator};
pub use dataset::{
    generate_dataset, generate_dataset_file, read_dataset, write_dataset, Dataset, DatasetSummary,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use grf::{gaussian_random_field, sample_coefficient, sample_coefficient_with, CoefficientSpec};
pub use stencil::{assemble_stencil, DarcyOperator, FaceAveraging};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default CG relative-residual target.
pub const SOLVER_TOL: f64 = 1e-10;

/// An `n × n` field on the cell centres of the unit square, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::dim(
                "field",
                format!("side {n} needs {} values, got {}", n * n, values.len()),
            ));
        }
        Ok(Self { n, values })
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..n * n).map(|c| f(c / n, c % n)).collect();
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Cell-centre coordinate `(i + ½) / n`.
    pub fn coord(n: usize, i: usize) -> f64 {
        (i as f64 + 0.5) / n as f64
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field {
            n: self.n,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square field")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [a, b] if a == b => Field::new(a, t.data().to_vec()),
            [a, b, 1] if a == b => Field::new(a, t.data().to_vec()),
            _ => Err(Error::dim("field", format!("tensor of shape {:?} is not a square field", t.shape()))),
        }
    }
}

/// A coefficient field and the solution it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcySample {
    pub a: Field,
    pub u: Field,
}

impl DarcySample {
    /// `‖A_h u − f‖₂ / ‖f‖₂` for the harmonic-mean stencil built from `a`.
    pub fn residual(&self) -> Result<f64> {
        let (op, rhs) = assemble_stencil(&self.a, FaceAveraging::Harmonic)?;
        Ok(op.relative_residual(self.u.values(), &rhs))
    }
}

/// Solves the discrete Darcy system for a coefficient field.
pub fn solve_darcy(a: &Field, averaging: FaceAveraging) -> Result<(Field, CgSolution)> {
    let (op, rhs) = assemble_stencil(a, averaging)?;
    let sol = cg_solve(&op, &rhs, SOLVER_TOL, 20 * rhs.len() + 100)?;
    Ok((Field::new(a.n(), sol.x.clone())?, sol))
}

/// Draws a coefficient and solves for `u`.
pub fn generate_sample(n: usize, seed: u64, spec: &CoefficientSpec) -> Result<DarcySample> {
    let a = sample_coefficient_with(n, seed, spec)?;
    let (u, _) = solve_darcy(&a, FaceAveraging::Harmonic)?;
    Ok(DarcySample { a, u })
}

/// Result of one manufactured-solution solve.
#[derive(Debug, Clone, Copy)]
pub struct ManufacturedError {
    pub n: usize,
    pub max_error: f64,
    pub iterations: usize,
}

/// Solves `-Δu = 2π² sin(πx) sin(πy)` with `a ≡ 1` and reports the max error
/// against `u* = sin(πx) sin(πy)` at the cell centres.
pub fn manufactured_error(n: usize) -> Result<ManufacturedError> {
    use std::f64::consts::PI;
    let exact = Field::from_fn(n, |i, j| (PI * Field::coord(n, i)).sin() * (PI * Field::coord(n, j)).sin());
    let (op, _) = assemble_stencil(&Field::constant(n, 1.0), FaceAveraging::Harmonic)?;
    let rhs: Vec<f64> = exact.values().iter().map(|u| 2.0 * PI * PI * u).collect();
    let sol = cg_solve(&op, &rhs, 1e-13, 20 * rhs.len() + 100)?;
    let max_error = sol
        .x
        .iter()
        .zip(exact.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ManufacturedError {
        n,
        max_error,
        iterations: sol.iterations,
    })
}
