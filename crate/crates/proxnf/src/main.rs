use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use proxnf::export::write_frames;
use proxnf::format::{self, RoiFile};
use proxnf::study::{
    operator_for, run_proxnf, run_stirnn, simulate, sweep_proxnf, sweep_stirnn, AcquisitionSpec, PhantomSpec,
    ReconstructionStudyConfig, WallClock,
};
use proxnf_core::baselines::{residual_std, zero_solution_threshold, FistaConfig, FistaTrace};
use proxnf_core::crt::default_ring_count;
use proxnf_core::metrics::MetricsReport;
use proxnf_core::pounet::{embed, EmbedConfig, EmbedReport, NetArchitecture};
use proxnf_core::proxnf::{ProxNfConfig, ProxTrace};
use proxnf_core::ImageStack;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "proxnf", version, about = "Dynamic circular-Radon reconstruction with partition-of-unity neural fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dynamic phantom and its lesion ROI.
    Phantom {
        /// Phantom spec (JSON); defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        breathing_amplitude: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roi: PathBuf,
        /// Also write PGM frames (log display scale) into this directory.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        pgm_every: usize,
    },
    /// Simulate noisy measurements of a stack.
    Simulate {
        #[arg(long)]
        stack: PathBuf,
        /// Acquisition spec (JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rnl: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rings: Option<usize>,
        #[arg(long)]
        aperture_radius: Option<f64>,
        #[arg(long)]
        n_groups: Option<usize>,
        #[arg(long)]
        sensors_per_group: Option<usize>,
        #[arg(long)]
        sensor_spacing: Option<f64>,
        #[arg(long)]
        rotation_per_frame: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a partition field to a stack.
    Embed {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Reconstruct with stochastic proximal splitting.
    ReconstructProxnf {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruct with nuclear-norm FISTA.
    ReconstructNn {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare an estimate with the reference.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        roi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames_csv: PathBuf,
    },
    /// Choose a regularization weight by the discrepancy principle.
    SweepReg {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Proxnf,
    Nn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProxCommandConfig {
    architecture: NetArchitecture,
    prox: ProxNfConfig,
}

impl Default for ProxCommandConfig {
    fn default() -> Self {
        let study = ReconstructionStudyConfig::desk();
        Self {
            prox: study.prox_with(study.spatial_weights[0]),
            architecture: study.architecture,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NnCommandConfig {
    fista: FistaConfig,
    /// Nuclear weight as a fraction of the zero-solution threshold; when
    /// set, it replaces `fista.nuclear_weight`.
    nuclear_fraction: Option<f64>,
}

impl Default for NnCommandConfig {
    fn default() -> Self {
        Self {
            fista: FistaConfig::default(),
            nuclear_fraction: Some(0.01),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedCommandConfig {
    architecture: NetArchitecture,
    embed: EmbedConfig,
}

impl Default for EmbedCommandConfig {
    fn default() -> Self {
        let study = proxnf::study::EmbeddingStudyConfig::desk();
        Self {
            architecture: study.architecture,
            embed: study.embed,
        }
    }
}

fn load_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        Some(p) => format::read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn ctx(path: &Path) -> String {
    format!("reading {}", path.display())
}

fn echo(command: &str, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(&json!({ "command": command, "config": config, "seed": seed }))?);
    Ok(())
}

fn read_roi(path: &Path, stack: &ImageStack) -> anyhow::Result<proxnf_core::RoiMask> {
    let file: RoiFile = format::read_json(path).with_context(|| ctx(path))?;
    Ok(file.mask(stack.grid())?)
}

fn write_prox_trace(dir: &Path, trace: &ProxTrace) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["iteration", "frames", "data_fidelity", "regularization", "objective", "prox_gradient_norm"])?;
    for r in &trace.records {
        let frames: Vec<String> = r.frames.iter().map(|k| k.to_string()).collect();
        w.write_record([
            r.iteration.to_string(),
            frames.join(" "),
            r.data_fidelity.to_string(),
            r.regularization.to_string(),
            (r.data_fidelity + r.regularization).to_string(),
            r.prox_gradient_norm.to_string(),
        ])?;
    }
    w.flush()?;
    // wall time is kept apart so that trace.csv is reproducible
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["iteration", "elapsed_s"])?;
    for r in &trace.records {
        w.write_record([r.iteration.to_string(), r.elapsed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_fista_trace(dir: &Path, trace: &FistaTrace) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["iteration", "data_fidelity", "nuclear_norm", "objective", "restarted"])?;
    for r in &trace.records {
        w.write_record([
            r.iteration.to_string(),
            r.data_fidelity.to_string(),
            r.nuclear_norm.to_string(),
            r.objective.to_string(),
            r.restarted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_embed_metrics(path: &Path, report: &EmbedReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "relative_misfit", "cg_iterations", "cg_residual", "network_loss_before", "network_loss_after"])?;
    for (i, (misfit, solve)) in report.misfits.iter().zip(&report.solves).enumerate() {
        let (before, after) = report
            .updates
            .get(i)
            .map_or((String::new(), String::new()), |u| (u.initial_loss.to_string(), u.final_loss.to_string()));
        w.write_record([
            i.to_string(),
            misfit.to_string(),
            solve.iterations.to_string(),
            solve.relative_residual.to_string(),
            before,
            after,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary written next to every reconstruction; the comparison block is
/// present only when a reference and ROI were supplied.
fn reconstruction_metrics(
    dir: &Path,
    stack: &ImageStack,
    meas: &proxnf_core::crt::Measurements,
    ops: &proxnf_core::crt::DynamicCrtOperator,
    truth: &Option<PathBuf>,
    roi: &Option<PathBuf>,
    extra: serde_json::Value,
) -> anyhow::Result<()> {
    let report = match (truth, roi) {
        (Some(t), Some(r)) => {
            let truth = format::read_stack(t).with_context(|| ctx(t))?;
            let roi = read_roi(r, &truth)?;
            Some(MetricsReport::evaluate(stack, &truth, &roi)?)
        }
        (None, None) => None,
        _ => anyhow::bail!("--truth and --roi go together"),
    };
    let value = json!({
        "residual_std": residual_std(stack, meas, ops)?,
        "sigma": meas.sigma,
        "solver": extra,
        "metrics": report,
    });
    format::write_json(&dir.join("metrics.json"), &value)?;
    Ok(())
}

fn rings_of(meas: &proxnf_core::crt::Measurements) -> usize {
    meas.rings
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom {
            config,
            side,
            frames,
            breathing_amplitude,
            out,
            roi,
            pgm_dir,
            pgm_every,
        } => {
            let mut spec: PhantomSpec = match &config {
                Some(p) => format::read_json(p).with_context(|| ctx(p))?,
                None => PhantomSpec::desk(),
            };
            if let Some(s) = side {
                spec.grid.side = s;
            }
            if let Some(k) = frames {
                spec.grid.frames = k;
            }
            if let Some(a) = breathing_amplitude {
                spec.phantom.breathing_amplitude = a;
            }
            echo("phantom", &spec, None)?;
            let (stack, mask) = spec.generate()?;
            format::write_stack(&out, &stack)?;
            format::write_json(&roi, &RoiFile::new(&mask, stack.grid(), spec.roi_dilation))?;
            if let Some(dir) = pgm_dir {
                let picks: Vec<usize> = (0..stack.grid().frames()).step_by(pgm_every.max(1)).collect();
                write_frames(&stack, &picks, &dir)?;
            }
        }
        Command::Simulate {
            stack,
            config,
            rnl,
            seed,
            rings,
            aperture_radius,
            n_groups,
            sensors_per_group,
            sensor_spacing,
            rotation_per_frame,
            out,
        } => {
            let truth = format::read_stack(&stack).with_context(|| ctx(&stack))?;
            let mut spec: AcquisitionSpec = match &config {
                Some(p) => format::read_json(p).with_context(|| ctx(p))?,
                None => AcquisitionSpec::desk(truth.grid().frames()),
            };
            let s = &mut spec.schedule;
            s.frames = truth.grid().frames();
            if let Some(v) = aperture_radius {
                s.aperture_radius = v;
            }
            if let Some(v) = n_groups {
                s.n_groups = v;
            }
            if let Some(v) = sensors_per_group {
                s.sensors_per_group = v;
            }
            if let Some(v) = sensor_spacing {
                s.sensor_spacing = v;
            }
            if let Some(v) = rotation_per_frame {
                s.rotation_per_frame = v;
            }
            if let Some(v) = rnl {
                spec.rnl = v;
            }
            if let Some(v) = seed {
                spec.seed = v;
            }
            if rings.is_some() {
                spec.rings = rings;
            }
            if spec.rings.is_none() {
                spec.rings = Some(default_ring_count(truth.grid(), &spec.schedule));
            }
            echo("simulate", &spec, Some(spec.seed))?;
            let (meas, acq, _) = simulate(&truth, &spec)?;
            format::write_measurements(&out, &meas, &acq)?;
        }
        Command::Embed {
            stack,
            config,
            seed,
            out,
            metrics,
        } => {
            let mut cfg: EmbedCommandConfig = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.embed.seed = s;
            }
            echo("embed", &cfg, Some(cfg.embed.seed))?;
            let target = format::read_stack(&stack).with_context(|| ctx(&stack))?;
            let (field, report) = embed(target.grid(), &target, cfg.architecture.clone(), &cfg.embed)?;
            format::write_checkpoint(&out, &field, cfg.embed.seed)?;
            write_embed_metrics(&metrics, &report)?;
        }
        Command::ReconstructProxnf {
            measurements,
            config,
            seed,
            truth,
            roi,
            out_dir,
        } => {
            let mut cfg: ProxCommandConfig = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.prox.seed = s;
            }
            echo("reconstruct-proxnf", &cfg, Some(cfg.prox.seed))?;
            let (meas, acq) = format::read_measurements(&measurements).with_context(|| ctx(&measurements))?;
            let ops = operator_for(&acq, rings_of(&meas))?;
            fs::create_dir_all(&out_dir)?;
            let run = run_proxnf(&cfg.prox, &cfg.architecture, &meas, &ops, WallClock::start())?;
            format::write_checkpoint(&out_dir.join("field.ckp"), &run.field, cfg.prox.seed)?;
            format::write_stack(&out_dir.join("stack.stk"), &run.stack)?;
            write_prox_trace(&out_dir, &run.trace)?;
            let extra = json!({ "iterations": run.trace.records.len() });
            reconstruction_metrics(&out_dir, &run.stack, &meas, &ops, &truth, &roi, extra)?;
        }
        Command::ReconstructNn {
            measurements,
            config,
            truth,
            roi,
            out_dir,
        } => {
            let mut cfg: NnCommandConfig = load_or_default(&config)?;
            let (meas, acq) = format::read_measurements(&measurements).with_context(|| ctx(&measurements))?;
            let ops = operator_for(&acq, rings_of(&meas))?;
            if let Some(f) = cfg.nuclear_fraction {
                let sigma = cfg.fista.sigma.unwrap_or(meas.sigma);
                cfg.fista.nuclear_weight = f * zero_solution_threshold(&meas, &ops, sigma)?;
            }
            echo("reconstruct-nn", &cfg, None)?;
            fs::create_dir_all(&out_dir)?;
            let (stack, trace) = run_stirnn(&cfg.fista, &meas, &ops)?;
            format::write_stack(&out_dir.join("stack.stk"), &stack)?;
            write_fista_trace(&out_dir, &trace)?;
            let extra = json!({ "iterations": trace.records.len(), "nuclear_weight": cfg.fista.nuclear_weight });
            reconstruction_metrics(&out_dir, &stack, &meas, &ops, &truth, &roi, extra)?;
        }
        Command::Evaluate {
            estimate,
            truth,
            roi,
            out,
            frames_csv,
        } => {
            echo("evaluate", &json!({ "estimate": estimate, "truth": truth, "roi": roi }), None)?;
            let est = format::read_stack(&estimate).with_context(|| ctx(&estimate))?;
            let reference = format::read_stack(&truth).with_context(|| ctx(&truth))?;
            let mask = read_roi(&roi, &reference)?;
            let report = MetricsReport::evaluate(&est, &reference, &mask)?;
            format::write_json(&out, &report)?;
            let mut w = csv::Writer::from_path(&frames_csv)?;
            w.write_record(["frame", "rrmse"])?;
            for (k, v) in report.frame_rrmse.iter().enumerate() {
                w.write_record([k.to_string(), v.to_string()])?;
            }
            w.flush()?;
        }
        Command::SweepReg {
            method,
            measurements,
            config,
            out_dir,
        } => {
            let cfg: ReconstructionStudyConfig = match &config {
                Some(p) => format::read_json(p).with_context(|| ctx(p))?,
                None => ReconstructionStudyConfig::desk(),
            };
            echo("sweep-reg", &json!({ "method": method, "study": cfg }), Some(cfg.prox.seed))?;
            let (meas, acq) = format::read_measurements(&measurements).with_context(|| ctx(&measurements))?;
            let ops = operator_for(&acq, rings_of(&meas))?;
            fs::create_dir_all(&out_dir)?;
            let (report, stack) = match method {
                Method::Proxnf => {
                    let (report, run) = sweep_proxnf(&cfg, &meas, &ops)?;
                    (report, run.stack)
                }
                Method::Nn => sweep_stirnn(&cfg, &meas, &ops)?,
            };
            format::write_json(&out_dir.join("sweep.json"), &report)?;
            format::write_stack(&out_dir.join("stack.stk"), &stack)?;
            if report.boundary {
                eprintln!("{}", json!({ "warning": "every residual lies on one side of sigma; chose a grid endpoint" }));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<format::FormatError>() {
                Some(format::FormatError::Magic { .. }) => "bad_magic",
                Some(_) => "format",
                None => "failure",
            };
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
