//! Low-rank reference methods: truncated SVD of a stack, singular-value
//! soft-thresholding, nuclear-norm reconstruction by FISTA, and the
//! discrepancy-principle sweep over regularization weights.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SVD};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::crt::{operator_norm_estimate, DynamicCrtOperator, Measurements};
use crate::error::{invalid, Error, Result};
use crate::grid::ImageStack;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 0;

/// SVD with singular values sorted in decreasing order.
fn sorted_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let svd = SVD::try_new(a.clone(), true, true, SVD_EPS, SVD_MAX_ITER).ok_or(Error::Svd)?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Svd),
    };
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    let s = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    Ok((u, s, v))
}

/// Rank-`r` truncated SVD of the pixel-by-frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiseparableApprox {
    pub spatial: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub temporal: DMatrix<f64>,
}

impl SemiseparableApprox {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `r (M + K)`: one spatial and one temporal factor per rank, with the
    /// singular value absorbed.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.spatial.nrows() + self.temporal.nrows())
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.spatial.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.temporal.transpose()
    }
}

pub fn ss_embed(stack: &ImageStack, rank: usize) -> Result<SemiseparableApprox> {
    let a = stack.coeffs();
    let full = a.nrows().min(a.ncols());
    if rank == 0 || rank > full {
        return Err(invalid(alloc::format!("rank must lie in 1..={full}")));
    }
    let (u, s, v) = sorted_svd(a)?;
    // zero singular values carry no direction; keep the factor count at `rank`
    Ok(SemiseparableApprox {
        spatial: u.columns(0, rank).into_owned(),
        singular_values: s.rows(0, rank).into_owned(),
        temporal: v.columns(0, rank).into_owned(),
    })
}

fn svt_parts(a: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid("threshold must be nonnegative"));
    }
    if a.is_empty() {
        return Ok((a.clone(), 0.0));
    }
    let (u, s, v) = sorted_svd(a)?;
    let kept = s.iter().take_while(|&&x| x > tau).count();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    let mut nuclear = 0.0;
    for j in 0..kept {
        let shrunk = s[j] - tau;
        nuclear += shrunk;
        out.ger(shrunk, &u.column(j), &v.column(j), 1.0);
    }
    Ok((out, nuclear))
}

/// `U max(S − τ, 0) Vᵀ`, the prox of `τ ‖·‖_*`.
pub fn svt(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    svt_parts(a, tau).map(|(m, _)| m)
}

pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64> {
    svt_parts(a, 0.0).map(|(_, n)| n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FistaConfig {
    pub nuclear_weight: f64,
    pub max_iterations: usize,
    /// Stop once the relative objective change falls below this value.
    pub tolerance: f64,
    pub restart: bool,
    pub divergence_factor: f64,
    /// Noise standard deviation; defaults to the value stored with the data.
    pub sigma: Option<f64>,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self {
            nuclear_weight: 0.0,
            max_iterations: 2000,
            tolerance: 1e-6,
            restart: true,
            divergence_factor: 10.0,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FistaRecord {
    pub iteration: usize,
    pub data_fidelity: f64,
    pub nuclear_norm: f64,
    pub objective: f64,
    pub restarted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FistaTrace {
    pub initial_objective: f64,
    pub step: f64,
    pub records: Vec<FistaRecord>,
}

struct DataTerm<'a> {
    meas: &'a Measurements,
    ops: &'a DynamicCrtOperator,
    inv_var: f64,
}

impl DataTerm<'_> {
    /// `(1/2σ²) Σ ‖H_k f_k − d_k‖²`, optionally with its gradient.
    fn eval(&self, f: &DMatrix<f64>, grad: Option<&mut DMatrix<f64>>) -> f64 {
        let mut resid = vec![0.0; self.ops.rows()];
        let mut total = 0.0;
        let mut grad = grad;
        for k in 0..self.ops.frames() {
            let h = self.ops.frame(k).matrix();
            h.mul_vec(f.column(k).as_slice(), &mut resid);
            for (r, d) in resid.iter_mut().zip(self.meas.frame(k)) {
                *r -= d;
                total += *r * *r;
            }
            if let Some(g) = grad.as_deref_mut() {
                resid.iter_mut().for_each(|r| *r *= self.inv_var);
                let m = g.nrows();
                h.tr_mul_vec(&resid, &mut g.as_mut_slice()[k * m..(k + 1) * m]);
            }
        }
        0.5 * self.inv_var * total
    }
}

/// Minimizes `(1/2σ²) Σ_k ‖H_k f_k − d_k‖² + λ ‖F‖_*` by FISTA with
/// restart on objective increase, starting from zero.
pub fn stirnn_reconstruct(
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    cfg: &FistaConfig,
) -> Result<(ImageStack, FistaTrace)> {
    if meas.frames() != ops.frames() || meas.data.nrows() != ops.rows() {
        return Err(Error::Dimension {
            what: "measurements",
            expected: ops.rows() * ops.frames(),
            got: meas.data.len(),
        });
    }
    if !(cfg.nuclear_weight >= 0.0 && cfg.nuclear_weight.is_finite()) || cfg.max_iterations == 0 {
        return Err(invalid("nuclear weight must be nonnegative and the iteration budget positive"));
    }
    let sigma = cfg.sigma.unwrap_or(meas.sigma);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("noise sigma must be positive; set it explicitly for noiseless data"));
    }
    let norm = operator_norm_estimate(ops);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let inv_var = 1.0 / (sigma * sigma);
    let step = 1.0 / (norm * norm * inv_var);
    let tau = cfg.nuclear_weight * step;
    let data = DataTerm { meas, ops, inv_var };
    let grid = *ops.grid();
    let (m, kk) = (grid.pixels(), grid.frames());

    let mut x = DMatrix::zeros(m, kk);
    let mut y = x.clone();
    let mut grad = DMatrix::zeros(m, kk);
    let mut t: f64 = 1.0;
    let mut prev = data.eval(&x, None);
    let mut trace = FistaTrace {
        initial_objective: prev,
        step,
        records: Vec::new(),
    };
    let prox_from = |base: &DMatrix<f64>, grad: &mut DMatrix<f64>| -> Result<(DMatrix<f64>, f64)> {
        data.eval(base, Some(grad));
        svt_parts(&(base - &*grad * step), tau)
    };
    for iteration in 1..=cfg.max_iterations {
        let (mut next, mut nuc) = prox_from(&y, &mut grad)?;
        let mut fid = data.eval(&next, None);
        let mut restarted = false;
        if cfg.restart && fid + cfg.nuclear_weight * nuc > prev {
            // plain proximal-gradient step from the last iterate is monotone
            (next, nuc) = prox_from(&x, &mut grad)?;
            fid = data.eval(&next, None);
            t = 1.0;
            restarted = true;
        }
        let objective = fid + cfg.nuclear_weight * nuc;
        trace.records.push(FistaRecord {
            iteration,
            data_fidelity: fid,
            nuclear_norm: nuc,
            objective,
            restarted,
        });
        if !objective.is_finite() || objective > cfg.divergence_factor * trace.initial_objective.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                iteration,
                objective,
                initial: trace.initial_objective,
                factor: cfg.divergence_factor,
            });
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = next;
        let change = (prev - objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = objective;
        if change < cfg.tolerance {
            break;
        }
    }
    Ok((ImageStack::new(grid, x)?, trace))
}

/// Smallest nuclear weight for which zero minimizes the STIR-NN objective:
/// the spectral norm of `[H_kᵀ d_k / σ²]_k`.
pub fn zero_solution_threshold(meas: &Measurements, ops: &DynamicCrtOperator, sigma: f64) -> Result<f64> {
    let m = ops.grid().pixels();
    let mut g = DMatrix::zeros(m, ops.frames());
    for k in 0..ops.frames() {
        ops.frame(k)
            .matrix()
            .tr_mul_vec(meas.frame(k), &mut g.as_mut_slice()[k * m..(k + 1) * m]);
    }
    let (_, s, _) = sorted_svd(&(g / (sigma * sigma)))?;
    Ok(s.iter().copied().fold(0.0, f64::max))
}

/// Standard deviation of the measurement residual `H f − d` over all rows
/// and frames.
pub fn residual_std(stack: &ImageStack, meas: &Measurements, ops: &DynamicCrtOperator) -> Result<f64> {
    let predicted = crate::crt::forward(stack, ops)?;
    let r = &predicted.data - &meas.data;
    let n = r.len() as f64;
    let mean = r.sum() / n;
    Ok((r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorozovEntry {
    pub lambda: f64,
    pub residual_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorozovReport {
    pub sigma: f64,
    pub table: Vec<MorozovEntry>,
    pub chosen: usize,
    /// Every residual lies on one side of `σ`; the choice is a grid endpoint.
    pub boundary: bool,
}

impl MorozovReport {
    pub fn lambda(&self) -> f64 {
        self.table[self.chosen].lambda
    }
}

/// Runs `solve` for each weight and picks the one whose residual standard
/// deviation is closest to `sigma`. `solve` returns that residual standard
/// deviation together with whatever the caller wants to keep.
pub fn morozov_sweep<T>(
    lambdas: &[f64],
    sigma: f64,
    mut solve: impl FnMut(f64) -> Result<(f64, T)>,
) -> Result<(MorozovReport, T)> {
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(invalid("weights must be positive"));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("weights must be increasing"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma must be nonnegative"));
    }
    let mut table = Vec::with_capacity(lambdas.len());
    let mut best: Option<(usize, f64, T)> = None;
    for (i, &lambda) in lambdas.iter().enumerate() {
        let (residual_std, payload) = solve(lambda)?;
        let gap = (residual_std - sigma).abs();
        table.push(MorozovEntry { lambda, residual_std });
        if best.as_ref().is_none_or(|(_, g, _)| gap < *g) {
            best = Some((i, gap, payload));
        }
    }
    let (chosen, _, payload) = best.expect("nonempty grid");
    let below = table.iter().all(|e| e.residual_std < sigma);
    let above = table.iter().all(|e| e.residual_std > sigma);
    Ok((
        MorozovReport {
            sigma,
            table,
            chosen,
            boundary: below || above,
        },
        payload,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crt::{add_noise, forward, uniform_radii, SensorSchedule};
    use crate::grid::SpacetimeGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-sided Jacobi SVD, independent of the library routine: singular
    /// values only, sorted decreasingly.
    pub(crate) fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
        let mut w = if a.nrows() >= a.ncols() { a.clone() } else { a.transpose() };
        let n = w.ncols();
        for _sweep in 0..100 {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..w.nrows() {
                        let (x, y) = (w[(i, p)], w[(i, q)]);
                        w[(i, p)] = c * x - s * y;
                        w[(i, q)] = s * x + c * y;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut s: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn stack_of(a: DMatrix<f64>) -> ImageStack {
        let side = (a.nrows() as f64).sqrt() as usize;
        let grid = SpacetimeGrid::new(side, 1.0, a.ncols(), 1.0).unwrap();
        ImageStack::new(grid, a).unwrap()
    }

    #[test]
    fn jacobi_oracle_agrees_with_known_values() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 5.0]);
        let s = jacobi_singular_values(&a);
        assert!((s[0] - 45f64.sqrt()).abs() < 1e-12 && (s[1] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ss_embed_examples() {
        let u = DVector::from_fn(16, |i, _| (i as f64 + 1.0).ln());
        let v = DVector::from_fn(5, |i, _| 1.0 + i as f64);
        let outer = &u * v.transpose();
        let approx = ss_embed(&stack_of(outer.clone()), 1).unwrap();
        assert!((approx.reconstruct() - &outer).norm() < 1e-12 * outer.norm());
        assert_eq!(approx.param_count(), 21);

        let a = random_matrix(16, 5, 1);
        let full = ss_embed(&stack_of(a.clone()), 5).unwrap();
        assert!((full.reconstruct() - &a).norm() < 1e-12 * a.norm());
        assert!(ss_embed(&stack_of(a.clone()), 0).is_err());
        assert!(ss_embed(&stack_of(a), 6).is_err());
    }

    #[test]
    fn ss_embed_error_is_the_singular_value_tail() {
        let a = random_matrix(49, 40, 2);
        let oracle = jacobi_singular_values(&a);
        let stack = stack_of(a.clone());
        let mut last = f64::INFINITY;
        for r in [1, 5, 12, 39, 40] {
            let approx = ss_embed(&stack, r).unwrap();
            let err = (approx.reconstruct() - &a).norm();
            let tail = oracle[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - tail).abs() < 1e-10, "r={r}: {err} vs {tail}");
            assert!(err <= last);
            last = err;
            let u = &approx.spatial;
            let v = &approx.temporal;
            assert!((u.transpose() * u - DMatrix::identity(r, r)).amax() < 1e-10);
            assert!((v.transpose() * v - DMatrix::identity(r, r)).amax() < 1e-10);
            let s = &approx.singular_values;
            assert!(s.iter().all(|&x| x > 0.0) && s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svt_examples() {
        let a = random_matrix(3, 3, 3);
        assert!((svt(&a, 0.0).unwrap() - &a).amax() < 1e-12);
        let s = jacobi_singular_values(&a);
        assert!(svt(&a, s[0]).unwrap().iter().all(|&v| v == 0.0));
        assert!(svt(&a, -1.0).is_err());
        for tau in [0.1, s[1], 0.5 * (s[1] + s[2])] {
            let out = jacobi_singular_values(&svt(&a, tau).unwrap());
            for (o, i) in out.iter().zip(&s) {
                assert!((o - (i - tau).max(0.0)).abs() < 1e-10);
            }
        }
        assert!((nuclear_norm(&a).unwrap() - s.iter().sum::<f64>()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn svt_is_nonexpansive(seed in 0u64..10_000, tau in 0.0f64..2.0, rows in 2usize..7, cols in 2usize..7) {
            let a = random_matrix(rows, cols, seed);
            let b = random_matrix(rows, cols, seed + 1);
            let d = (svt(&a, tau).unwrap() - svt(&b, tau).unwrap()).norm();
            prop_assert!(d <= (&a - &b).norm() * (1.0 + 1e-12));
        }
    }

    fn small_problem(frames: usize, seed: u64) -> (DynamicCrtOperator, ImageStack) {
        let grid = SpacetimeGrid::new(8, 3.72, frames, 648.0).unwrap();
        let sched = SensorSchedule::two_group(frames);
        let radii = uniform_radii(&grid, &sched, 16);
        let ops = DynamicCrtOperator::new(&grid, &sched, &radii).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth = DMatrix::from_fn(64, frames, |m, k| base[m] * (1.0 + 0.2 * k as f64));
        (ops, ImageStack::new(grid, truth).unwrap())
    }

    #[test]
    fn unregularized_fista_decreases_residual_monotonically() {
        let (ops, truth) = small_problem(4, 4);
        let meas = forward(&truth, &ops).unwrap();
        let cfg = FistaConfig { sigma: Some(1.0), max_iterations: 300, tolerance: 0.0, ..FistaConfig::default() };
        let (est, trace) = stirnn_reconstruct(&meas, &ops, &cfg).unwrap();
        let obj: Vec<f64> = trace.records.iter().map(|r| r.objective).collect();
        assert!(obj.windows(2).all(|w| w[1] <= w[0]));
        assert!(obj[obj.len() - 1] < 1e-3 * trace.initial_objective);
        let fit = forward(&est, &ops).unwrap();
        assert!((&fit.data - &meas.data).norm() < 0.05 * meas.data.norm());
    }

    #[test]
    fn regularized_fista_objective_is_nonincreasing() {
        let (ops, truth) = small_problem(6, 5);
        let meas = add_noise(&forward(&truth, &ops).unwrap(), 0.05, 1).unwrap();
        let thr = zero_solution_threshold(&meas, &ops, meas.sigma).unwrap();
        let cfg = FistaConfig { nuclear_weight: 0.05 * thr, max_iterations: 400, ..FistaConfig::default() };
        let (_, trace) = stirnn_reconstruct(&meas, &ops, &cfg).unwrap();
        let obj: Vec<f64> = trace.records.iter().map(|r| r.objective).collect();
        assert!(obj.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(trace.records.iter().any(|r| r.nuclear_norm > 0.0));
    }

    #[test]
    fn zero_solution_above_threshold() {
        let (ops, truth) = small_problem(4, 6);
        let meas = add_noise(&forward(&truth, &ops).unwrap(), 0.05, 2).unwrap();
        let thr = zero_solution_threshold(&meas, &ops, meas.sigma).unwrap();
        let run = |w: f64| {
            let cfg = FistaConfig { nuclear_weight: w, max_iterations: 50, ..FistaConfig::default() };
            stirnn_reconstruct(&meas, &ops, &cfg).unwrap().0
        };
        assert!(run(1.001 * thr).coeffs().iter().all(|&v| v == 0.0));
        assert!(run(0.9 * thr).coeffs().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fista_rejects_bad_input() {
        let (ops, truth) = small_problem(4, 7);
        let meas = forward(&truth, &ops).unwrap();
        assert!(stirnn_reconstruct(&meas, &ops, &FistaConfig::default()).is_err());
        let neg = FistaConfig { nuclear_weight: -1.0, sigma: Some(1.0), ..FistaConfig::default() };
        assert!(stirnn_reconstruct(&meas, &ops, &neg).is_err());
    }

    #[test]
    fn morozov_examples() {
        let grid = [0.01, 0.1, 1.0, 10.0];
        assert!(morozov_sweep(&[1.0, 0.5], 1.0, |l| Ok((l, ()))).is_err());
        assert!(morozov_sweep(&[0.0, 1.0], 1.0, |l| Ok((l, ()))).is_err());

        // noiseless: residual grows with λ from zero
        let (rep, _) = morozov_sweep(&grid, 0.0, |l| Ok((l * 1e-3, ()))).unwrap();
        assert_eq!(rep.chosen, 0);
        assert!(rep.boundary);

        let (rep, payload) = morozov_sweep(&grid, 0.05, |l| Ok((0.02 * (1.0 + l).ln() + 0.01, l))).unwrap();
        let i = rep.chosen;
        assert_eq!(payload, rep.lambda());
        assert!(!rep.boundary);
        // the two neighbours bracket σ
        let lo = rep.table.iter().rposition(|e| e.residual_std <= 0.05).unwrap();
        assert!(i == lo || i == lo + 1);
        let (again, _) = morozov_sweep(&grid, 0.05, |l| Ok((0.02 * (1.0 + l).ln() + 0.01, l))).unwrap();
        assert_eq!(rep, again);
    }
}
