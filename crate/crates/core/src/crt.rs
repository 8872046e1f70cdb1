//! Circular Radon transform system matrices for a rotating sensor aperture.
//!
//! Row `(s, i)` of a frame operator holds, for each pixel, the length of the
//! circle of radius `ℓ_i` around sensor `s` that falls inside that pixel, so
//! `H_k x` integrates the indicator expansion of `x` over each arc exactly.
//! Rows are ordered sensor-major: `row = s * I + i`.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{ImageStack, SpacetimeGrid};
use crate::sparse::CscMatrix;


/// Euclidean remainder, available without `std`.
fn wrap(x: f64, period: f64) -> f64 {
    let r = x % period;
    if r < 0.0 {
        r + period
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSchedule {
    /// Aperture radius `R` in cm.
    pub aperture_radius: f64,
    pub n_groups: usize,
    pub sensors_per_group: usize,
    /// Angular spacing between sensors of a group, degrees.
    pub sensor_spacing: f64,
    /// Aperture rotation `ΔΘ` between consecutive frames, degrees.
    pub rotation_per_frame: f64,
    pub frames: usize,
}

impl SensorSchedule {
    /// Two antipodal groups of five sensors 1° apart rotating 5° per frame
    /// on a 2.63 cm aperture.
    pub fn two_group(frames: usize) -> Self {
        Self {
            aperture_radius: 2.63,
            n_groups: 2,
            sensors_per_group: 5,
            sensor_spacing: 1.0,
            rotation_per_frame: 5.0,
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aperture_radius > 0.0) || self.n_groups == 0 || self.sensors_per_group == 0 {
            return Err(invalid("schedule needs a positive radius and at least one sensor"));
        }
        if self.frames == 0 {
            return Err(invalid("schedule needs at least one frame"));
        }
        if !self.sensor_spacing.is_finite() || !self.rotation_per_frame.is_finite() {
            return Err(invalid("sensor angles must be finite"));
        }
        Ok(())
    }

    /// `S`, the number of sensors (views) per frame.
    pub fn sensors(&self) -> usize {
        self.n_groups * self.sensors_per_group
    }

    /// Total aperture rotation at frame `k`, reduced to `[0, 360)`.
    pub fn rotation_deg(&self, k: usize) -> f64 {
        wrap(k as f64 * self.rotation_per_frame, 360.0)
    }

    /// Angle of sensor `s` of group `g` at frame `k`, in `[0, 360)`.
    pub fn sensor_angle_deg(&self, group: usize, sensor: usize, k: usize) -> f64 {
        wrap(
            group as f64 * 360.0 / self.n_groups as f64
                + sensor as f64 * self.sensor_spacing
                + k as f64 * self.rotation_per_frame,
            360.0,
        )
    }

    /// Sensor positions at frame `k`, ordered group-major.
    pub fn sensor_positions(&self, k: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.sensors());
        for g in 0..self.n_groups {
            for s in 0..self.sensors_per_group {
                let a = self.sensor_angle_deg(g, s, k).to_radians();
                out.push((self.aperture_radius * a.cos(), self.aperture_radius * a.sin()));
            }
        }
        out
    }

    fn geometry_key(&self, k: usize) -> i64 {
        (self.rotation_deg(k) * 1e6).round() as i64 % 360_000_000
    }
}

/// `count` radii uniformly spaced from one pixel to the farthest FOV corner.
pub fn uniform_radii(grid: &SpacetimeGrid, schedule: &SensorSchedule, count: usize) -> Vec<f64> {
    let h = grid.pixel_size();
    let far = schedule.aperture_radius + grid.fov() / core::f64::consts::SQRT_2;
    if count == 1 {
        return vec![far];
    }
    (0..count)
        .map(|i| h + (far - h) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Number of rings that spaces radii about one pixel apart (263 at 186² pixels).
pub fn default_ring_count(grid: &SpacetimeGrid, schedule: &SensorSchedule) -> usize {
    let far = schedule.aperture_radius + grid.fov() / core::f64::consts::SQRT_2;
    ((far / grid.pixel_size()).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrtFrameOperator {
    matrix: CscMatrix,
    radii: Vec<f64>,
    sensors: usize,
    frame: usize,
}

impl CrtFrameOperator {
    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    /// Frame this geometry was first built for.
    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("frame image", self.cols(), x.len())?;
        let mut y = vec![0.0; self.rows()];
        self.matrix.mul_vec(x, &mut y);
        Ok(y)
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

fn validate_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(invalid("at least one radius is required"));
    }
    if radii.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(invalid("radii must be positive and finite"));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("radii must be strictly increasing"));
    }
    Ok(())
}

/// Appends `(row, pixel, length)` for every pixel the circle crosses.
fn trace_circle(
    grid: &SpacetimeGrid,
    center: (f64, f64),
    radius: f64,
    row: usize,
    angles: &mut Vec<f64>,
    out: &mut Vec<(usize, usize, f64)>,
) {
    let half = 0.5 * grid.fov();
    let (cx, cy) = center;
    // distance from the center to the FOV square, and to its farthest corner
    let dx = (cx.abs() - half).max(0.0);
    let dy = (cy.abs() - half).max(0.0);
    let near = (dx * dx + dy * dy).sqrt();
    let fx = cx.abs() + half;
    let fy = cy.abs() + half;
    if radius < near || radius > (fx * fx + fy * fy).sqrt() {
        return;
    }

    angles.clear();
    angles.push(0.0);
    angles.push(TAU);
    let h = grid.pixel_size();
    for i in 0..=grid.side() {
        let g = -half + i as f64 * h;
        let c = (g - cx) / radius;
        if c.abs() <= 1.0 {
            let a = c.acos();
            angles.push(a);
            angles.push(TAU - a);
        }
        let s = (g - cy) / radius;
        if s.abs() <= 1.0 {
            let a = s.asin();
            angles.push(wrap(a, TAU));
            angles.push(PI - a);
        }
    }
    angles.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    for w in angles.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        if let Some(m) = grid.pixel_at(cx + radius * mid.cos(), cy + radius * mid.sin()) {
            out.push((row, m, radius * (b - a)));
        }
    }
}

/// System matrix `H_k` of frame `k`.
pub fn build_frame_operator(
    grid: &SpacetimeGrid,
    schedule: &SensorSchedule,
    radii: &[f64],
    k: usize,
) -> Result<CrtFrameOperator> {
    schedule.validate()?;
    validate_radii(radii)?;
    let sensors = schedule.sensor_positions(k);
    let rings = radii.len();
    let mut triplets = Vec::new();
    let mut angles = Vec::with_capacity(4 * (grid.side() + 2));
    for (s, &pos) in sensors.iter().enumerate() {
        for (i, &r) in radii.iter().enumerate() {
            trace_circle(grid, pos, r, s * rings + i, &mut angles, &mut triplets);
        }
    }
    Ok(CrtFrameOperator {
        matrix: CscMatrix::from_triplets(sensors.len() * rings, grid.pixels(), triplets),
        radii: radii.to_vec(),
        sensors: sensors.len(),
        frame: k,
    })
}

/// Frame operators for the whole acquisition. Frames whose aperture
/// rotation coincides modulo 360° share one matrix.
#[derive(Debug, Clone)]
pub struct DynamicCrtOperator {
    grid: SpacetimeGrid,
    schedule: SensorSchedule,
    geometries: Vec<Arc<CrtFrameOperator>>,
    frame_geometry: Vec<usize>,
}

impl DynamicCrtOperator {
    pub fn new(grid: &SpacetimeGrid, schedule: &SensorSchedule, radii: &[f64]) -> Result<Self> {
        if schedule.frames != grid.frames() {
            return Err(Error::Dimension {
                what: "schedule frames",
                expected: grid.frames(),
                got: schedule.frames,
            });
        }
        let mut by_key: BTreeMap<i64, usize> = BTreeMap::new();
        let mut geometries = Vec::new();
        let mut frame_geometry = Vec::with_capacity(grid.frames());
        for k in 0..grid.frames() {
            let key = schedule.geometry_key(k);
            let idx = match by_key.get(&key) {
                Some(&idx) => idx,
                None => {
                    geometries.push(Arc::new(build_frame_operator(grid, schedule, radii, k)?));
                    by_key.insert(key, geometries.len() - 1);
                    geometries.len() - 1
                }
            };
            frame_geometry.push(idx);
        }
        Ok(Self {
            grid: *grid,
            schedule: *schedule,
            geometries,
            frame_geometry,
        })
    }

    pub fn grid(&self) -> &SpacetimeGrid {
        &self.grid
    }

    pub fn schedule(&self) -> &SensorSchedule {
        &self.schedule
    }

    pub fn frames(&self) -> usize {
        self.frame_geometry.len()
    }

    /// `S·I`.
    pub fn rows(&self) -> usize {
        self.geometries[0].rows()
    }

    pub fn rings(&self) -> usize {
        self.geometries[0].radii.len()
    }

    pub fn frame(&self, k: usize) -> &CrtFrameOperator {
        &self.geometries[self.frame_geometry[k]]
    }

    pub fn geometries(&self) -> &[Arc<CrtFrameOperator>] {
        &self.geometries
    }

    /// Geometry index used by each frame.
    pub fn frame_geometry(&self) -> &[usize] {
        &self.frame_geometry
    }
}

/// Per-frame measurement vectors `d_k`, stored as columns of an
/// `(S·I) × K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub data: DMatrix<f64>,
    pub sensors: usize,
    pub rings: usize,
    pub sigma: f64,
    pub rnl: f64,
    pub seed: Option<u64>,
}

impl Measurements {
    pub fn new(data: DMatrix<f64>, sensors: usize, rings: usize) -> Result<Self> {
        check_len("measurement rows", sensors * rings, data.nrows())?;
        Ok(Self {
            data,
            sensors,
            rings,
            sigma: 0.0,
            rnl: 0.0,
            seed: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.data.nrows();
        &self.data.as_slice()[k * n..(k + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// `d_k = H_k f_k` for every frame.
pub fn forward(stack: &ImageStack, ops: &DynamicCrtOperator) -> Result<Measurements> {
    if stack.grid() != ops.grid() {
        return Err(Error::GridMismatch("stack and operator grids differ"));
    }
    let rows = ops.rows();
    let mut data = DMatrix::zeros(rows, ops.frames());
    for k in 0..ops.frames() {
        let out = &mut data.as_mut_slice()[k * rows..(k + 1) * rows];
        ops.frame(k).matrix.mul_vec(stack.frame_slice(k), out);
    }
    Measurements::new(data, ops.schedule().sensors(), ops.rings())
}

/// `H_kᵀ r`.
pub fn adjoint_frame(op: &CrtFrameOperator, residual: &[f64]) -> Result<Vec<f64>> {
    check_len("residual", op.rows(), residual.len())?;
    let mut x = vec![0.0; op.cols()];
    op.matrix.tr_mul_vec(residual, &mut x);
    Ok(x)
}

/// Adds i.i.d. Gaussian noise with `σ = rnl · max|d|`.
pub fn add_noise(clean: &Measurements, rnl: f64, seed: u64) -> Result<Measurements> {
    if !(rnl >= 0.0) || !rnl.is_finite() {
        return Err(invalid("relative noise level must be nonnegative"));
    }
    let sigma = rnl * clean.max_abs();
    let mut out = clean.clone();
    out.sigma = sigma;
    out.rnl = rnl;
    out.seed = Some(seed);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    Ok(out)
}

const POWER_MIN_ITERS: usize = 50;
const POWER_MAX_ITERS: usize = 5000;
const POWER_TOL: f64 = 1e-6;

/// Largest singular value of `a` by power iteration on `aᵀa`.
pub fn spectral_norm_estimate(a: &CscMatrix) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..a.cols()).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut ax = vec![0.0; a.rows()];
    let mut atax = vec![0.0; a.cols()];
    let mut estimate = 0.0;
    for it in 0..POWER_MAX_ITERS {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        a.mul_vec(&x, &mut ax);
        a.tr_mul_vec(&ax, &mut atax);
        // Rayleigh quotient of aᵀa at the unit vector x
        let next = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
        let change = (next - estimate).abs() / next.max(f64::MIN_POSITIVE);
        estimate = next;
        core::mem::swap(&mut x, &mut atax);
        if it + 1 >= POWER_MIN_ITERS && change < POWER_TOL {
            break;
        }
    }
    estimate
}

/// `max_k ‖H_k‖₂` over the distinct frame geometries.
pub fn operator_norm_estimate(ops: &DynamicCrtOperator) -> f64 {
    ops.geometries
        .iter()
        .map(|g| spectral_norm_estimate(&g.matrix))
        .fold(0.0, f64::max)
}
