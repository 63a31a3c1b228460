use super::cg::LinearOperator;
use super::Field;
use crate::error::{Error, Result};

/// How the coefficient is averaged onto the face between two cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceAveraging {
    /// `2 a_i a_j / (a_i + a_j)`, flux-consistent for piecewise constant `a`.
    Harmonic,
    Arithmetic,
}

impl FaceAveraging {
    fn face(self, a: f64, b: f64) -> f64 {
        match self {
            FaceAveraging::Harmonic => 2.0 * a * b / (a + b),
            FaceAveraging::Arithmetic => 0.5 * (a + b),
        }
    }
}

/// Five-point cell-centred finite-volume operator for `-∇·(a∇u)` with
/// homogeneous Dirichlet boundaries eliminated through mirrored ghost cells.
/// All entries carry the `1/h²` factor.
#[derive(Debug, Clone)]
pub struct DarcyOperator {
    n: usize,
    diag: Vec<f64>,
    /// Coupling between `(i, j)` and `(i, j + 1)`, valid for `j < n - 1`.
    east: Vec<f64>,
    /// Coupling between `(i, j)` and `(i + 1, j)`, valid for `i < n - 1`.
    south: Vec<f64>,
}

/// Builds the operator and the right-hand side `f ≡ 1`.
pub fn assemble_stencil(a: &Field, averaging: FaceAveraging) -> Result<(DarcyOperator, Vec<f64>)> {
    if let Some(bad) = a.values().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("coefficient must be strictly positive, found {bad}")));
    }
    let n = a.n();
    let inv_h2 = (n * n) as f64;
    let mut diag = vec![0.0; n * n];
    let mut east = vec![0.0; n * n];
    let mut south = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            let ac = a.get(i, j);
            if j + 1 < n {
                let t = averaging.face(ac, a.get(i, j + 1)) * inv_h2;
                east[c] = t;
                diag[c] += t;
                diag[c + 1] += t;
            }
            if i + 1 < n {
                let t = averaging.face(ac, a.get(i + 1, j)) * inv_h2;
                south[c] = t;
                diag[c] += t;
                diag[c + n] += t;
            }
            // Boundary faces sit half a cell away: ghost u = -u_c.
            let boundary_faces = [i == 0, i + 1 == n, j == 0, j + 1 == n].iter().filter(|&&b| b).count();
            diag[c] += 2.0 * ac * inv_h2 * boundary_faces as f64;
        }
    }
    Ok((DarcyOperator { n, diag, east, south }, vec![1.0; n * n]))
}

impl DarcyOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense row `c` of the operator (test helper, `O(n²)`).
    pub fn row(&self, c: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n * self.n];
        let mut out = vec![0.0; self.n * self.n];
        let mut row = vec![0.0; self.n * self.n];
        for (k, r) in row.iter_mut().enumerate() {
            e[k] = 1.0;
            self.apply(&e, &mut out);
            *r = out[c];
            e[k] = 0.0;
        }
        row
    }

    pub fn relative_residual(&self, u: &[f64], f: &[f64]) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        let r: f64 = au.iter().zip(f).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        r / f.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl LinearOperator for DarcyOperator {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for (c, out) in y.iter_mut().enumerate() {
            let (i, j) = (c / n, c % n);
            let mut v = self.diag[c] * x[c];
            if j + 1 < n {
                v -= self.east[c] * x[c + 1];
            }
            if j > 0 {
                v -= self.east[c - 1] * x[c - 1];
            }
            if i + 1 < n {
                v -= self.south[c] * x[c + n];
            }
            if i > 0 {
                v -= self.south[c - n] * x[c - n];
            }
            *out = v;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.diag.clone()
    }
}
