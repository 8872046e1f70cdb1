//! Matrix-free conjugate gradient and the Neumann finite-difference gradient
//! on square images.

use alloc::vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `A x = b` for symmetric positive semidefinite `A` given as a
/// matvec, starting from the contents of `x`. A zero right-hand side yields
/// `x = 0`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > tol * bnorm && iterations < max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rr.is_finite() {
            return Err(Error::CgBreakdown { iteration: iterations });
        }
        if pap <= 0.0 {
            // direction in the null space: the residual is already as small as A allows
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        iterations += 1;
    }
    if !rr.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::CgBreakdown { iteration: iterations });
    }
    Ok(CgOutcome {
        iterations,
        relative_residual: rr.sqrt() / bnorm,
    })
}

/// `out = DᵀD u` for the forward-difference gradient `D` with Neumann
/// boundary on a `side × side` image (pixel `ix * side + iy`).
pub fn neumann_laplacian(side: usize, u: &[f64], out: &mut [f64]) {
    debug_assert_eq!(u.len(), side * side);
    out.fill(0.0);
    for ix in 0..side {
        for iy in 0..side {
            let m = ix * side + iy;
            if ix + 1 < side {
                let d = u[m + side] - u[m];
                out[m] -= d;
                out[m + side] += d;
            }
            if iy + 1 < side {
                let d = u[m + 1] - u[m];
                out[m] -= d;
                out[m + 1] += d;
            }
        }
    }
}

/// `‖D u‖²`.
pub fn gradient_energy(side: usize, u: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ix in 0..side {
        for iy in 0..side {
            let m = ix * side + iy;
            if ix + 1 < side {
                let d = u[m + side] - u[m];
                acc += d * d;
            }
            if iy + 1 < side {
                let d = u[m + 1] - u[m];
                acc += d * d;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn explicit_gradient(side: usize) -> DMatrix<f64> {
        let m = side * side;
        let mut d = DMatrix::zeros(2 * m, m);
        for ix in 0..side {
            for iy in 0..side {
                let p = ix * side + iy;
                if ix + 1 < side {
                    d[(p, p)] = -1.0;
                    d[(p, p + side)] = 1.0;
                }
                if iy + 1 < side {
                    d[(m + p, p)] = -1.0;
                    d[(m + p, p + 1)] = 1.0;
                }
            }
        }
        d
    }

    #[test]
    fn laplacian_matches_explicit_difference_matrix() {
        let side = 5;
        let d = explicit_gradient(side);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; 25];
        neumann_laplacian(side, &u, &mut out);
        let uv = DVector::from_column_slice(&u);
        let expected = d.transpose() * &d * &uv;
        assert!((DVector::from_column_slice(&out) - expected).norm() < 1e-13);
        assert!((gradient_energy(side, &u) - (&d * &uv).norm_squared()).abs() < 1e-12);
        neumann_laplacian(side, &[2.0; 25], &mut out);
        assert!(out.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn cg_solves_spd_system_and_handles_zero_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(12, 12);
        let rhs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = vec![0.0; 12];
        let out = conjugate_gradient(
            |v, o| o.copy_from_slice((&a * DVector::from_column_slice(v)).as_slice()),
            &rhs,
            &mut x,
            1e-12,
            100,
        )
        .unwrap();
        assert!(out.relative_residual < 1e-12);
        let direct = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
        assert!((DVector::from_column_slice(&x) - direct).norm() < 1e-10);

        let mut x = vec![3.0; 12];
        conjugate_gradient(|v, o| o.copy_from_slice(v), &[0.0; 12], &mut x, 1e-8, 10).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cg_reports_breakdown() {
        let mut x = vec![0.0; 3];
        let err = conjugate_gradient(|_, o| o.fill(f64::NAN), &[1.0; 3], &mut x, 1e-8, 10).unwrap_err();
        assert_eq!(err, Error::CgBreakdown { iteration: 0 });
    }
}
