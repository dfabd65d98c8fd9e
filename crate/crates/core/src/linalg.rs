//! Dense symmetric eigensolver (cyclic Jacobi).

use crate::error::{invalid, Error, Result};

/// Default convergence threshold on the off-diagonal Frobenius norm,
/// relative to `max(1, ‖A‖_F)`.
pub const JACOBI_TOL: f64 = 1e-10;
/// Sweep cap; Jacobi converges quadratically, so hitting this means trouble.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn off_norm(&self) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.data[i * n + j].powi(2);
                }
            }
        }
        s.sqrt()
    }

    fn rows_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let n = self.n;
        let (lo, hi) = self.data.split_at_mut(q * n);
        (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
    }
}

/// Eigenpairs sorted by ascending eigenvalue; `vectors[k]` pairs with `values[k]`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Cyclic-by-row Jacobi.
///
/// The full matrix is kept and each rotation updates rows `p`, `q` in place
/// (contiguous), then mirrors them into columns `p`, `q`. Eigenvectors are
/// accumulated as rows of `Vᵀ` so their update is contiguous too.
pub fn jacobi_eigen(m: &SymMatrix, tol: f64, max_sweeps: usize) -> Result<Eigen> {
    let n = m.n;
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m.get(i, j), m.get(j, i));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a = m.clone();
    let mut vt = SymMatrix::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 });
    let target = tol * a.frobenius().max(1.0);
    // An entry this small cannot keep the off-norm above target even if all are.
    let skip_sq = if n > 1 { target * target / (n * (n - 1)) as f64 } else { 0.0 };
    let mut sweeps = 0;
    while a.off_norm() > target {
        if sweeps == max_sweeps {
            return Err(Error::Numeric(format!(
                "Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {:.3e})",
                a.off_norm()
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq * apq <= skip_sq {
                    continue;
                }
                let (app, aqq) = (a.get(p, p), a.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J rotating the (p, q) plane: rows first…
                let (rp, rq) = a.rows_mut(p, q);
                rotate(rp, rq, c, s);
                // …then columns, which equal the updated rows by symmetry.
                for k in 0..n {
                    let (x, y) = (a.data[k * n + p], a.data[k * n + q]);
                    a.data[k * n + p] = c * x - s * y;
                    a.data[k * n + q] = s * x + c * y;
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                let (vp, vq) = vt.rows_mut(p, q);
                rotate(vp, vq, c, s);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)).then(i.cmp(&j)));
    Ok(Eigen {
        values: order.iter().map(|&i| a.get(i, i)).collect(),
        vectors: order.iter().map(|&i| vt.data[i * n..(i + 1) * n].to_vec()).collect(),
        sweeps,
    })
}
