//! Desk-scale experiment drivers: phantom generation, simulated acquisition,
//! the embedding comparison against a truncated SVD, and the reconstruction
//! comparison against nuclear-norm FISTA with discrepancy-principle sweeps.

use std::time::Instant;

use proxnf_core::baselines::{
    morozov_sweep, residual_std, ss_embed, stirnn_reconstruct, zero_solution_threshold, FistaConfig, FistaTrace,
    MorozovReport,
};
use proxnf_core::crt::{add_noise, default_ring_count, forward, uniform_radii, DynamicCrtOperator, Measurements, SensorSchedule};
use proxnf_core::metrics::{lac_rrmse, rrmse, ssim, MetricsReport};
use proxnf_core::phantom::{DynamicPhantom, PhantomConfig};
use proxnf_core::pounet::{embed, AdamConfig, CgConfig, EmbedConfig, EmbedReport, NetArchitecture, PounetField, Regularization};
use proxnf_core::proxnf::{self as solver, Clock, ProxNfConfig, ProxSolver, ProxTrace, StepSize};
use proxnf_core::{ImageStack, RoiMask, SpacetimeGrid};
use serde::{Deserialize, Serialize};

use crate::format::{Acquisition, GridSpec};

/// Wall clock measured from construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub phantom: PhantomConfig,
    pub supersample: usize,
    pub roi_dilation: usize,
}

impl PhantomSpec {
    pub fn desk() -> Self {
        Self {
            grid: GridSpec {
                side: 64,
                fov: 3.72,
                frames: 128,
                horizon: 648.0,
            },
            phantom: PhantomConfig::default(),
            supersample: 4,
            roi_dilation: 2,
        }
    }

    pub fn generate(&self) -> anyhow::Result<(ImageStack, RoiMask)> {
        let grid = self.grid.build()?;
        let ph = DynamicPhantom::new(self.phantom.clone(), grid.fov(), grid.horizon())?;
        let stack = ph.render(&grid, self.supersample)?;
        let roi = ph.lesion_roi(&grid, self.roi_dilation)?;
        Ok((stack, roi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub schedule: SensorSchedule,
    /// Ring count; `None` covers the field of view at one pixel per ring.
    pub rings: Option<usize>,
    pub rnl: f64,
    pub seed: u64,
}

impl AcquisitionSpec {
    pub fn desk(frames: usize) -> Self {
        Self {
            schedule: SensorSchedule::two_group(frames),
            rings: None,
            rnl: 0.04,
            seed: 7,
        }
    }
}

pub fn build_operator(grid: &SpacetimeGrid, schedule: &SensorSchedule, rings: usize) -> anyhow::Result<DynamicCrtOperator> {
    let radii = uniform_radii(grid, schedule, rings);
    Ok(DynamicCrtOperator::new(grid, schedule, &radii)?)
}

pub fn operator_for(acq: &Acquisition, rings: usize) -> anyhow::Result<DynamicCrtOperator> {
    build_operator(&acq.grid.build()?, &acq.schedule, rings)
}

/// Noisy measurements of `truth` plus the description needed to rebuild the
/// operator.
pub fn simulate(truth: &ImageStack, spec: &AcquisitionSpec) -> anyhow::Result<(Measurements, Acquisition, DynamicCrtOperator)> {
    let grid = *truth.grid();
    anyhow::ensure!(spec.schedule.frames == grid.frames(), "schedule frame count differs from the stack");
    let rings = spec.rings.unwrap_or_else(|| default_ring_count(&grid, &spec.schedule));
    let ops = build_operator(&grid, &spec.schedule, rings)?;
    let clean = forward(truth, &ops)?;
    let meas = add_noise(&clean, spec.rnl, spec.seed)?;
    let acq = Acquisition {
        grid: GridSpec::of(&grid),
        schedule: spec.schedule,
    };
    Ok((meas, acq, ops))
}

// ---------------------------------------------------------------- embedding

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStudyConfig {
    pub phantom: PhantomSpec,
    pub architecture: NetArchitecture,
    pub embed: EmbedConfig,
    /// Truncated-SVD rank; `None` matches the field's parameter count.
    pub rank: Option<usize>,
}

impl EmbeddingStudyConfig {
    pub fn desk() -> Self {
        let mut phantom = PhantomSpec::desk();
        phantom.phantom.breathing_amplitude = 0.04;
        Self {
            phantom,
            architecture: NetArchitecture::uniform(2, 32, 12),
            embed: EmbedConfig {
                rounds: 4,
                regularization: Regularization::default(),
                cg: CgConfig {
                    tolerance: 1e-10,
                    max_iterations: 500,
                },
                adam: AdamConfig {
                    learning_rate: 1e-4,
                    steps: 500,
                    batch: 0,
                    ..AdamConfig::default()
                },
                seed: 11,
            },
            rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingOutcome {
    pub field_params: usize,
    pub field_rrmse: f64,
    pub field_ssim: f64,
    pub rank: usize,
    pub svd_params: usize,
    pub svd_rrmse: f64,
    pub svd_ssim: f64,
    pub report: EmbedReport,
    pub seconds: f64,
}

/// Rank whose `r (M + K)` parameters come closest to `params`.
pub fn matched_rank(params: usize, grid: &SpacetimeGrid) -> usize {
    let per = grid.pixels() + grid.frames();
    ((params as f64 / per as f64).round() as usize).clamp(1, grid.pixels().min(grid.frames()))
}

pub fn embedding_study(cfg: &EmbeddingStudyConfig) -> anyhow::Result<(EmbeddingOutcome, PounetField)> {
    let start = Instant::now();
    let (truth, _) = cfg.phantom.generate()?;
    let grid = *truth.grid();
    let (field, report) = embed(&grid, &truth, cfg.architecture.clone(), &cfg.embed)?;
    let est = field.render()?;
    let rank = cfg.rank.unwrap_or_else(|| matched_rank(field.param_count(), &grid));
    let svd = ss_embed(&truth, rank)?;
    let svd_stack = ImageStack::new(grid, svd.reconstruct())?;
    let outcome = EmbeddingOutcome {
        field_params: field.param_count(),
        field_rrmse: rrmse(&est, &truth, None)?,
        field_ssim: ssim(&est, &truth, None)?,
        rank,
        svd_params: svd.param_count(),
        svd_rrmse: rrmse(&svd_stack, &truth, None)?,
        svd_ssim: ssim(&svd_stack, &truth, None)?,
        report,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((outcome, field))
}

// ----------------------------------------------------------- reconstruction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionStudyConfig {
    pub phantom: PhantomSpec,
    pub acquisition: AcquisitionSpec,
    pub architecture: NetArchitecture,
    pub prox: ProxNfConfig,
    /// Spatial weights swept for the field; the temporal weight follows at
    /// `temporal_ratio` times the spatial one.
    pub spatial_weights: Vec<f64>,
    pub temporal_ratio: f64,
    pub fista: FistaConfig,
    /// Nuclear weights swept for the baseline, as fractions of the weight
    /// above which zero is the solution.
    pub nuclear_fractions: Vec<f64>,
}

impl ReconstructionStudyConfig {
    pub fn desk() -> Self {
        let phantom = PhantomSpec::desk();
        let frames = phantom.grid.frames;
        Self {
            acquisition: AcquisitionSpec::desk(frames),
            phantom,
            architecture: NetArchitecture::uniform(2, 32, 12),
            prox: ProxNfConfig {
                step: StepSize::Auto,
                batch: 32,
                max_iterations: 400,
                prox: EmbedConfig {
                    rounds: 1,
                    regularization: Regularization::default(),
                    cg: CgConfig {
                        tolerance: 1e-8,
                        max_iterations: 300,
                    },
                    adam: AdamConfig {
                        learning_rate: 1e-4,
                        steps: 300,
                        batch: 0,
                        ..AdamConfig::default()
                    },
                    seed: 0,
                },
                seed: 3,
                ..ProxNfConfig::default()
            },
            spatial_weights: vec![1e3, 3e3, 1e4],
            // seconds squared; the temporal term must dominate for the
            // field to average noise across neighbouring frames
            temporal_ratio: 1e5,
            fista: FistaConfig::default(),
            nuclear_fractions: vec![0.003, 0.005, 0.01, 0.02, 0.03],
        }
    }

    pub fn prox_with(&self, spatial: f64) -> ProxNfConfig {
        ProxNfConfig {
            regularization: Regularization {
                spatial,
                temporal: spatial * self.temporal_ratio,
            },
            ..self.prox.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub lambda: f64,
    pub sweep: MorozovReport,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionOutcome {
    pub proxnf: MethodResult,
    pub stirnn: MethodResult,
    pub framewise_rrmse: f64,
    pub sigma: f64,
    pub seconds: f64,
}

pub struct ProxRun {
    pub field: PounetField,
    pub trace: ProxTrace,
    pub stack: ImageStack,
}

pub fn run_proxnf(
    cfg: &ProxNfConfig,
    arch: &NetArchitecture,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
    clock: impl Clock,
) -> anyhow::Result<ProxRun> {
    let sigma = cfg.sigma.unwrap_or(meas.sigma);
    let init = solver::static_reconstruction(
        meas,
        ops,
        sigma,
        cfg.regularization.spatial,
        cfg.prox.cg.tolerance,
        cfg.prox.cg.max_iterations,
    )?;
    let field = solver::constant_field(ops.grid(), arch.clone(), cfg.seed, &init)?;
    let (field, trace, _) = ProxSolver::with_clock(cfg.clone(), field, meas, ops, clock)?
        .run()
        .map_err(|f| anyhow::anyhow!("{} after {} iterations", f.error, f.trace.records.len()))?;
    let stack = field.render()?;
    Ok(ProxRun { field, trace, stack })
}

pub fn run_stirnn(
    cfg: &FistaConfig,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
) -> anyhow::Result<(ImageStack, FistaTrace)> {
    Ok(stirnn_reconstruct(meas, ops, cfg)?)
}

pub fn sweep_proxnf(
    cfg: &ReconstructionStudyConfig,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
) -> anyhow::Result<(MorozovReport, ProxRun)> {
    let (report, run) = morozov_sweep(&cfg.spatial_weights, meas.sigma, |lambda| {
        let run = run_proxnf(&cfg.prox_with(lambda), &cfg.architecture, meas, ops, proxnf_core::proxnf::NoClock)
            .map_err(|e| proxnf_core::Error::InvalidParameter(e.to_string()))?;
        Ok((residual_std(&run.stack, meas, ops)?, run))
    })?;
    Ok((report, run))
}

pub fn sweep_stirnn(
    cfg: &ReconstructionStudyConfig,
    meas: &Measurements,
    ops: &DynamicCrtOperator,
) -> anyhow::Result<(MorozovReport, ImageStack)> {
    let threshold = zero_solution_threshold(meas, ops, meas.sigma)?;
    let weights: Vec<f64> = cfg.nuclear_fractions.iter().map(|f| f * threshold).collect();
    let (report, stack) = morozov_sweep(&weights, meas.sigma, |lambda| {
        let fista = FistaConfig {
            nuclear_weight: lambda,
            ..cfg.fista
        };
        let (stack, _) = stirnn_reconstruct(meas, ops, &fista)?;
        Ok((residual_std(&stack, meas, ops)?, stack))
    })?;
    Ok((report, stack))
}

pub fn reconstruction_study(cfg: &ReconstructionStudyConfig) -> anyhow::Result<ReconstructionOutcome> {
    let start = Instant::now();
    let (truth, roi) = cfg.phantom.generate()?;
    let (meas, _, ops) = simulate(&truth, &cfg.acquisition)?;

    let t0 = Instant::now();
    let (sweep, run) = sweep_proxnf(cfg, &meas, &ops)?;
    let proxnf = MethodResult {
        lambda: sweep.lambda(),
        metrics: MetricsReport::evaluate(&run.stack, &truth, &roi)?,
        sweep,
        seconds: t0.elapsed().as_secs_f64(),
    };

    let t0 = Instant::now();
    let (sweep, stack) = sweep_stirnn(cfg, &meas, &ops)?;
    let stirnn = MethodResult {
        lambda: sweep.lambda(),
        metrics: MetricsReport::evaluate(&stack, &truth, &roi)?,
        sweep,
        seconds: t0.elapsed().as_secs_f64(),
    };

    let framewise = solver::framewise_tikhonov(&meas, &ops, meas.sigma, proxnf.lambda, 1e-8, 300)?;
    Ok(ReconstructionOutcome {
        framewise_rrmse: rrmse(&framewise, &truth, None)?,
        sigma: meas.sigma,
        proxnf,
        stirnn,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Curve-level comparison used in reports.
pub fn lesion_errors(est: &ImageStack, truth: &ImageStack, roi: &RoiMask) -> anyhow::Result<(f64, f64)> {
    Ok((rrmse(est, truth, Some(roi))?, lac_rrmse(est, truth, roi)?))
}
