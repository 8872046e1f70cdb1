//! Stochastic proximal splitting for a partition field: sampled framewise
//! data-fidelity gradients in the image domain, followed by a regularized
//! re-embedding of the stepped frames onto the field.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crt::{operator_norm_estimate, CrtFrameOperator, DynamicCrtOperator, Measurements};
use crate::error::{invalid, Error, Result};
use crate::grid::ImageStack;
use crate::linalg::{conjugate_gradient, gradient_energy, neumann_laplacian};
use crate::pounet::{refit, EmbedConfig, EmbedReport, FrameSource, NetArchitecture, PartitionNet, PounetField, Regularization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    /// `σ² J / (K max_k ‖H_k‖²)`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxNfConfig {
    pub step: StepSize,
    /// Frames sampled per iteration.
    pub batch: usize,
    pub max_iterations: usize,
    pub stop_ratio: f64,
    /// Abort once the objective exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    /// Scale sampled gradients by `K/J`.
    pub unbiased: bool,
    /// Anchor unsampled frames to the current field in the prox misfit.
    pub anchor_all_frames: bool,
    pub audit_frames: usize,
    pub regularization: Regularization,
    /// Alternating rounds, CG and Adam settings of each prox embedding.
    pub prox: EmbedConfig,
    /// Noise standard deviation used in the data fidelity; defaults to the
    /// value stored with the measurements.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl Default for ProxNfConfig {
    fn default() -> Self {
        Self {
            step: StepSize::Auto,
            batch: 324,
            max_iterations: 200,
            stop_ratio: 0.1,
            divergence_factor: 10.0,
            unbiased: true,
            anchor_all_frames: true,
            audit_frames: 32,
            regularization: Regularization::default(),
            prox: EmbedConfig {
                rounds: 1,
                ..EmbedConfig::default()
            },
            sigma: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxRecord {
    pub iteration: usize,
    pub frames: Vec<usize>,
    pub data_fidelity: f64,
    pub regularization: f64,
    pub prox_gradient_norm: f64,
    /// Seconds since the solver started, as reported by its clock.
    pub elapsed: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxTrace {
    pub initial_data_fidelity: f64,
    pub initial_regularization: f64,
    pub records: Vec<ProxRecord>,
}

impl ProxTrace {
    pub fn objective(&self, i: usize) -> f64 {
        self.records[i].data_fidelity + self.records[i].regularization
    }

    pub fn initial_objective(&self) -> f64 {
        self.initial_data_fidelity + self.initial_regularization
    }
}

/// Source of elapsed time; the core crate has no clock of its own.
pub trait Clock {
    fn seconds(&self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// `g_k = H_kᵀ (H_k f_k − d_k) / σ²`.
pub fn frame_data_gradient(op: &CrtFrameOperator, frame: &[f64], data: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid("noise sigma must be positive"));
    }
    if frame.len() != op.cols() || data.len() != op.rows() {
        return Err(Error::Dimension {
            what: "frame gradient inputs",
            expected: op.cols() + op.rows(),
            got: frame.len() + data.len(),
        });
    }
    let mut residual = vec![0.0; op.rows()];
    op.matrix().mul_vec(frame, &mut residual);
    for (r, d) in residual.iter_mut().zip(data) {
        *r = (*r - d) / (sigma * sigma);
    }
    let mut grad = vec![0.0; op.cols()];
    op.matrix().tr_mul_vec(&residual, &mut grad);
    Ok(grad)
}

/// Framewise direction supported on the sampled frames: column `j` belongs
/// to frame `frames[j]` and already includes any unbiasing scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDirection {
    pub frames: Vec<usize>,
    pub values: DMatrix<f64>,
}

impl SampledDirection {
    pub fn column_of(&self, k: usize) -> Option<usize> {
        self.frames.binary_search(&k).ok()
    }

    pub fn zeros(pixels: usize, frames: Vec<usize>) -> Self {
        let j = frames.len();
        Self {
            frames,
            values: DMatrix::zeros(pixels, j),
        }
    }
}

fn check_problem(field: &PounetField, meas: &Measurements, ops: &DynamicCrtOperator) -> Result<()> {
    if field.grid() != ops.grid() {
        return Err(Error::GridMismatch("field and operator grids differ"));
    }
    if meas.frames() != ops.frames() || meas.data.nrows() != ops.rows() {
        return Err(Error::Dimension {
            what: "measurements",
            expected: ops.rows() * ops.frames(),
            got: meas.data.len(),
        });
    }
    Ok(())
}

/// Data-fidelity gradients at the sampled frames, scaled by `K/J` when
/// `unbiased`.
pub fn sampled_update_direction(
    field: &PounetField,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    frames: &[usize],
    sigma: f64,
    unbiased: bool,
) -> Result<SampledDirection> {
    check_problem(field, meas, ops)?;
    let kk = ops.frames();
    let mut frames = frames.to_vec();
    frames.sort_unstable();
    if frames.len() > kk || frames.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("sampled frames must be distinct and at most K"));
    }
    if let Some(&bad) = frames.iter().find(|&&k| k >= kk) {
        return Err(Error::OutOfRange { index: bad, len: kk });
    }
    let scale = if unbiased { kk as f64 / frames.len() as f64 } else { 1.0 };
    let grid = field.grid();
    let times: Vec<f64> = frames.iter().map(|&k| grid.frame_time(k)).collect();
    let (psi, _) = field.net().evaluate(&times);
    let mut dir = SampledDirection::zeros(grid.pixels(), frames);
    let mut snap = vec![0.0; grid.pixels()];
    for (j, &k) in dir.frames.iter().enumerate() {
        field.snapshot_with(psi.column(j).as_slice(), &mut snap);
        let g = frame_data_gradient(ops.frame(k), &snap, meas.frame(k), sigma)?;
        dir.values.set_column(j, &(DVector::from_vec(g) * scale));
    }
    Ok(dir)
}

/// Prox targets `y_k = snapshot(k) − α g̃_k`, produced frame by frame from
/// a frozen copy of the field's coefficients and partitions.
struct ProxTargets<'a> {
    coeffs: DMatrix<f64>,
    psi: DMatrix<f64>,
    direction: &'a SampledDirection,
    alpha: f64,
    anchor_all: bool,
}

impl FrameSource for ProxTargets<'_> {
    fn frames(&self) -> usize {
        self.psi.ncols()
    }

    fn pixels(&self) -> usize {
        self.coeffs.nrows()
    }

    fn frame_into(&self, k: usize, out: &mut [f64]) {
        let m = self.coeffs.nrows();
        out.fill(0.0);
        for (p, &w) in self.psi.column(k).iter().enumerate() {
            for (o, c) in out.iter_mut().zip(&self.coeffs.as_slice()[p * m..(p + 1) * m]) {
                *o += w * c;
            }
        }
        if let Some(j) = self.direction.column_of(k) {
            for (o, g) in out.iter_mut().zip(self.direction.values.column(j).iter()) {
                *o -= self.alpha * g;
            }
        }
    }

    fn value(&self, m: usize, k: usize) -> f64 {
        let mut v = self.coeffs.row(m).transpose().dot(&self.psi.column(k));
        if let Some(j) = self.direction.column_of(k) {
            v -= self.alpha * self.direction.values[(m, j)];
        }
        v
    }

    fn weight(&self, k: usize) -> f64 {
        if self.anchor_all || self.direction.column_of(k).is_some() {
            0.5 / self.alpha
        } else {
            0.0
        }
    }
}

/// Re-embeds the stepped frames: minimizes
/// `(1/2α) Σ_k ‖CΨ_k − y_k‖² + λ_s Σ_k ‖D CΨ_k‖² + λ_t Σ_k ‖CΨ'_k‖²`
/// starting from the current field.
pub fn prox_step(
    field: &mut PounetField,
    direction: &SampledDirection,
    alpha: f64,
    reg: Regularization,
    prox: &EmbedConfig,
    anchor_all_frames: bool,
) -> Result<EmbedReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("step size must be positive"));
    }
    let (psi, _) = field.frame_partitions();
    let targets = ProxTargets {
        coeffs: field.coeffs().clone(),
        psi,
        direction,
        alpha,
        anchor_all: anchor_all_frames,
    };
    let cfg = EmbedConfig {
        regularization: reg,
        ..prox.clone()
    };
    refit(field, &targets, &cfg)
}

/// `(1/2σ²) Σ_k ‖H_k f_k − d_k‖²` and the regularization value of a field.
pub fn field_objective(
    field: &PounetField,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    sigma: f64,
    reg: Regularization,
) -> Result<(f64, f64)> {
    check_problem(field, meas, ops)?;
    field.net().check_finite()?;
    let grid = field.grid();
    let (psi, dpsi) = field.frame_partitions();
    let mut snap = vec![0.0; grid.pixels()];
    let mut resid = vec![0.0; ops.rows()];
    let (mut data, mut penalty) = (0.0, 0.0);
    for k in 0..grid.frames() {
        field.snapshot_with(psi.column(k).as_slice(), &mut snap);
        ops.frame(k).matrix().mul_vec(&snap, &mut resid);
        data += resid.iter().zip(meas.frame(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if reg.spatial > 0.0 {
            penalty += reg.spatial * gradient_energy(grid.side(), &snap);
        }
        if reg.temporal > 0.0 {
            field.snapshot_with(dpsi.column(k).as_slice(), &mut snap);
            penalty += reg.temporal * snap.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok((data / (2.0 * sigma * sigma), penalty))
}

/// Static reconstruction from all frames treated as one acquisition:
/// `(1/σ²) Σ_k H_kᵀH_k f + 2 K λ_s L f = (1/σ²) Σ_k H_kᵀ d_k`.
pub fn static_reconstruction(
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    sigma: f64,
    spatial: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid("noise sigma must be positive"));
    }
    let grid = ops.grid();
    let (m, kk) = (grid.pixels(), grid.frames());
    let mut counts = vec![0usize; ops.geometries().len()];
    for &g in ops.frame_geometry() {
        counts[g] += 1;
    }
    let s2 = sigma * sigma;
    let mut rhs = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    for k in 0..kk {
        ops.frame(k).matrix().tr_mul_vec(meas.frame(k), &mut tmp);
        for (r, t) in rhs.iter_mut().zip(&tmp) {
            *r += t / s2;
        }
    }
    let mut hx = vec![0.0; ops.rows()];
    let mut lx = vec![0.0; m];
    let apply = |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for (geom, &count) in ops.geometries().iter().zip(&counts) {
            if count == 0 {
                continue;
            }
            geom.matrix().mul_vec(x, &mut hx);
            geom.matrix().tr_mul_vec(&hx, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += count as f64 * t / s2;
            }
        }
        if spatial > 0.0 {
            neumann_laplacian(grid.side(), x, &mut lx);
            for (o, l) in out.iter_mut().zip(&lx) {
                *o += 2.0 * kk as f64 * spatial * l;
            }
        }
    };
    let mut x = vec![0.0; m];
    conjugate_gradient(apply, &rhs, &mut x, tolerance, max_iterations)?;
    Ok(x)
}

/// Time-constant field whose every frame equals `frame`.
pub fn constant_field(grid: &crate::grid::SpacetimeGrid, arch: NetArchitecture, seed: u64, frame: &[f64]) -> Result<PounetField> {
    let net = PartitionNet::new(arch, grid.horizon(), seed)?;
    let p = net.partitions();
    let coeffs = DMatrix::from_fn(grid.pixels(), p, |m, _| frame[m]);
    PounetField::new(*grid, net, coeffs)
}

pub fn resolve_step(cfg: &ProxNfConfig, ops: &DynamicCrtOperator, sigma: f64) -> Result<f64> {
    match cfg.step {
        StepSize::Fixed(a) if a > 0.0 && a.is_finite() => Ok(a),
        StepSize::Fixed(_) => Err(invalid("step size must be positive")),
        StepSize::Auto => {
            let norm = operator_norm_estimate(ops);
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(sigma * sigma * cfg.batch as f64 / (ops.frames() as f64 * norm * norm))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Continue,
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct ProxFailure {
    pub error: Error,
    pub trace: ProxTrace,
}

/// Iterative driver; `step` performs one outer iteration.
pub struct ProxSolver<'a, C: Clock = NoClock> {
    cfg: ProxNfConfig,
    field: PounetField,
    meas: &'a Measurements,
    ops: &'a DynamicCrtOperator,
    sigma: f64,
    alpha: f64,
    rng: ChaCha8Rng,
    audit: Vec<usize>,
    first_norm: Option<f64>,
    trace: ProxTrace,
    clock: C,
    start: f64,
}

impl<'a> ProxSolver<'a, NoClock> {
    pub fn new(cfg: ProxNfConfig, field: PounetField, meas: &'a Measurements, ops: &'a DynamicCrtOperator) -> Result<Self> {
        Self::with_clock(cfg, field, meas, ops, NoClock)
    }
}

impl<'a, C: Clock> ProxSolver<'a, C> {
    pub fn with_clock(
        cfg: ProxNfConfig,
        field: PounetField,
        meas: &'a Measurements,
        ops: &'a DynamicCrtOperator,
        clock: C,
    ) -> Result<Self> {
        check_problem(&field, meas, ops)?;
        cfg.regularization.validate()?;
        let kk = ops.frames();
        if cfg.batch == 0 || cfg.batch > kk {
            return Err(invalid("batch must satisfy 1 <= J <= K"));
        }
        if !(cfg.stop_ratio > 0.0 && cfg.divergence_factor > 1.0) {
            return Err(invalid("stop ratio must be positive and the divergence factor above 1"));
        }
        let sigma = cfg.sigma.unwrap_or(meas.sigma);
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("noise sigma must be positive; set it explicitly for noiseless data"));
        }
        let alpha = resolve_step(&cfg, ops, sigma)?;
        let n_audit = cfg.audit_frames.clamp(1, kk);
        let audit = (0..n_audit).map(|i| i * kk / n_audit).collect();
        let (data, reg) = field_objective(&field, meas, ops, sigma, cfg.regularization)?;
        let start = clock.seconds();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            field,
            meas,
            ops,
            sigma,
            alpha,
            audit,
            first_norm: None,
            trace: ProxTrace {
                initial_data_fidelity: data,
                initial_regularization: reg,
                records: Vec::new(),
            },
            clock,
            start,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn field(&self) -> &PounetField {
        &self.field
    }

    pub fn trace(&self) -> &ProxTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (PounetField, ProxTrace) {
        (self.field, self.trace)
    }

    fn audit_snapshots(&self) -> DMatrix<f64> {
        let grid = self.field.grid();
        let times: Vec<f64> = self.audit.iter().map(|&k| grid.frame_time(k)).collect();
        let (psi, _) = self.field.net().evaluate(&times);
        self.field.coeffs() * psi
    }

    /// One outer iteration: sample, step, prox, record.
    pub fn step(&mut self) -> Result<StepStatus> {
        let iteration = self.trace.records.len() + 1;
        if iteration > self.cfg.max_iterations {
            return Ok(StepStatus::IterationLimit);
        }
        let kk = self.ops.frames();
        let mut frames = index::sample(&mut self.rng, kk, self.cfg.batch).into_vec();
        frames.sort_unstable();
        let direction = sampled_update_direction(&self.field, self.meas, self.ops, &frames, self.sigma, self.cfg.unbiased)?;
        let before = self.audit_snapshots();
        prox_step(
            &mut self.field,
            &direction,
            self.alpha,
            self.cfg.regularization,
            &self.cfg.prox,
            self.cfg.anchor_all_frames,
        )?;
        let after = self.audit_snapshots();
        let norm = (after - before).norm() / self.alpha;
        let (data, reg) = field_objective(&self.field, self.meas, self.ops, self.sigma, self.cfg.regularization)?;
        self.trace.records.push(ProxRecord {
            iteration,
            frames,
            data_fidelity: data,
            regularization: reg,
            prox_gradient_norm: norm,
            elapsed: self.clock.seconds() - self.start,
        });
        let initial = self.trace.initial_objective();
        let objective = data + reg;
        if !objective.is_finite() || objective > self.cfg.divergence_factor * initial {
            return Err(Error::Diverged {
                iteration,
                objective,
                initial,
                factor: self.cfg.divergence_factor,
            });
        }
        let first = *self.first_norm.get_or_insert(norm);
        if iteration > 1 && norm <= self.cfg.stop_ratio * first {
            return Ok(StepStatus::Converged);
        }
        if iteration == self.cfg.max_iterations {
            return Ok(StepStatus::IterationLimit);
        }
        Ok(StepStatus::Continue)
    }

    pub fn run(mut self) -> core::result::Result<(PounetField, ProxTrace, StepStatus), ProxFailure> {
        loop {
            match self.step() {
                Ok(StepStatus::Continue) => {}
                Ok(status) => return Ok((self.field, self.trace, status)),
                Err(error) => {
                    return Err(ProxFailure {
                        error,
                        trace: self.trace,
                    })
                }
            }
        }
    }
}

/// Static-reconstruction initialization followed by the full iteration.
pub fn run(
    cfg: &ProxNfConfig,
    arch: NetArchitecture,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
) -> core::result::Result<(PounetField, ProxTrace, StepStatus), ProxFailure> {
    let fail = |error| ProxFailure {
        error,
        trace: ProxTrace::default(),
    };
    let sigma = cfg.sigma.unwrap_or(meas.sigma);
    let cgc = cfg.prox.cg;
    let frame = static_reconstruction(meas, ops, sigma, cfg.regularization.spatial, cgc.tolerance, cgc.max_iterations)
        .map_err(fail)?;
    let field = constant_field(ops.grid(), arch, cfg.seed, &frame).map_err(fail)?;
    ProxSolver::new(cfg.clone(), field, meas, ops).map_err(fail)?.run()
}

/// Frames reconstructed independently by Tikhonov-regularized least squares,
/// `(1/σ²) H_kᵀH_k f + 2 λ_s L f = (1/σ²) H_kᵀ d_k`.
pub fn framewise_tikhonov(
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    sigma: f64,
    spatial: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<ImageStack> {
    if !(sigma > 0.0) {
        return Err(invalid("noise sigma must be positive"));
    }
    let grid = ops.grid();
    let m = grid.pixels();
    let s2 = sigma * sigma;
    let mut out = DMatrix::zeros(m, grid.frames());
    let mut hx = vec![0.0; ops.rows()];
    let mut tmp = vec![0.0; m];
    let mut lx = vec![0.0; m];
    for k in 0..grid.frames() {
        let h = ops.frame(k).matrix();
        let mut rhs = vec![0.0; m];
        h.tr_mul_vec(meas.frame(k), &mut rhs);
        rhs.iter_mut().for_each(|v| *v /= s2);
        let apply = |x: &[f64], o: &mut [f64]| {
            h.mul_vec(x, &mut hx);
            h.tr_mul_vec(&hx, &mut tmp);
            neumann_laplacian(grid.side(), x, &mut lx);
            for i in 0..m {
                o[i] = tmp[i] / s2 + 2.0 * spatial * lx[i];
            }
        };
        let mut x = vec![0.0; m];
        conjugate_gradient(apply, &rhs, &mut x, tolerance, max_iterations)?;
        out.set_column(k, &DVector::from_vec(x));
    }
    ImageStack::new(*grid, out)
}
