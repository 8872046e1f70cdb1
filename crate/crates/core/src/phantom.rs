//! Synthetic dynamic perfusion phantom: ellipse anatomy, a disk lesion whose
//! contrast follows a two-compartment Tofts curve, and an optional periodic
//! vertical breathing stretch.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use nalgebra::DMatrix;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{ImageStack, RoiMask, SpacetimeGrid};

/// Two-compartment Tofts model driven by a ramp-then-exponential plasma input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToftsTac {
    pub k_trans: f64,
    pub k_ep: f64,
    pub t_injection: f64,
    pub bolus_duration: f64,
    pub plasma_peak: f64,
    pub plasma_decay: f64,
}

impl Default for ToftsTac {
    fn default() -> Self {
        Self {
            k_trans: 5e-3,
            k_ep: 2e-3,
            t_injection: 90.0,
            bolus_duration: 30.0,
            plasma_peak: 1.0,
            plasma_decay: 4e-3,
        }
    }
}

impl ToftsTac {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let finite = [
            self.k_trans,
            self.k_ep,
            self.t_injection,
            self.bolus_duration,
            self.plasma_peak,
            self.plasma_decay,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.k_trans < 0.0 || self.plasma_peak < 0.0 || self.t_injection < 0.0 {
            return Err(invalid("Tofts parameters must be finite and nonnegative"));
        }
        if !(self.k_ep > 0.0 && self.plasma_decay > 0.0 && self.bolus_duration > 0.0) {
            return Err(invalid("Tofts rates and bolus duration must be positive"));
        }
        if self.t_injection + self.bolus_duration >= horizon {
            return Err(invalid("bolus must end before the acquisition horizon"));
        }
        Ok(())
    }

    /// Plasma input `c_p(t)`.
    pub fn plasma(&self, t: f64) -> f64 {
        let u = t - self.t_injection;
        if u <= 0.0 {
            0.0
        } else if u <= self.bolus_duration {
            self.plasma_peak * u / self.bolus_duration
        } else {
            self.plasma_peak * (-self.plasma_decay * (u - self.bolus_duration)).exp()
        }
    }

    /// Tissue concentration `k_trans ∫₀ᵗ c_p(τ) e^{-k_ep (t-τ)} dτ`, closed form.
    pub fn concentration(&self, t: f64) -> f64 {
        let u = t - self.t_injection;
        if u <= 0.0 {
            return 0.0;
        }
        let k = self.k_ep;
        let d = self.plasma_decay;
        let ramp_rate = self.k_trans * self.plasma_peak / self.bolus_duration;
        let ramp = |u: f64| ramp_rate * (u / k - (1.0 - (-k * u).exp()) / (k * k));
        if u <= self.bolus_duration {
            return ramp(u);
        }
        let v = u - self.bolus_duration;
        let decay_part = if (k - d).abs() <= 1e-12 * k {
            v * (-k * v).exp()
        } else {
            ((-d * v).exp() - (-k * v).exp()) / (k - d)
        };
        ramp(self.bolus_duration) * (-k * v).exp() + self.k_trans * self.plasma_peak * decay_part
    }

    /// Maximum of the concentration on `[0, horizon]`.
    pub fn peak(&self, horizon: f64) -> (f64, f64) {
        let n = 2048;
        let step = horizon / n as f64;
        let mut best = (0.0, self.concentration(0.0));
        for i in 1..=n {
            let t = i as f64 * step;
            let c = self.concentration(t);
            if c > best.1 {
                best = (t, c);
            }
        }
        // golden-section refinement around the coarse maximum
        let (mut a, mut b) = ((best.0 - step).max(0.0), (best.0 + step).min(horizon));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let x1 = b - g * (b - a);
            let x2 = a + g * (b - a);
            if self.concentration(x1) >= self.concentration(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        let t = 0.5 * (a + b);
        let c = self.concentration(t);
        if c > best.1 {
            (t, c)
        } else {
            best
        }
    }
}

/// `C(t)` with the time checked against `[0, horizon]`.
pub fn tofts_tac(tac: &ToftsTac, t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(tac.concentration(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation_deg: f64,
    pub value: f64,
    /// Relative enhancement following the plasma input (blood-filled organs).
    #[serde(default)]
    pub perfusion: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = (c * dx + s * dy) / self.semi_axes.0;
        let v = (-s * dx + c * dy) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: (f64, f64),
    pub radius: f64,
    pub base_value: f64,
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyModel {
    /// Painted in order; later regions overwrite earlier ones.
    pub regions: Vec<Ellipse>,
    pub lesion: Lesion,
    pub background_value: f64,
}

impl AnatomyModel {
    /// Abdominal cross-section with eight organs and a subcutaneous lesion
    /// centered about 5 mm below the body surface, sized for a 3.72 cm field
    /// of view. Values stay within [1e-4, 0.06] at peak enhancement.
    pub fn abdomen() -> Self {
        let e = |cx, cy, a, b, rot, value, perfusion| Ellipse {
            center: (cx, cy),
            semi_axes: (a, b),
            rotation_deg: rot,
            value,
            perfusion,
        };
        Self {
            regions: vec![
                e(0.0, 0.0, 1.65, 1.35, 0.0, 0.006, 0.0),
                e(0.0, 0.0, 1.52, 1.22, 0.0, 0.004, 0.0),
                e(-0.55, 0.35, 0.62, 0.42, 25.0, 0.018, 0.4),
                e(0.45, 0.45, 0.38, 0.26, -30.0, 0.012, 0.0),
                e(-0.2, -0.55, 0.5, 0.22, 10.0, 0.009, 0.0),
                e(0.0, -0.05, 0.12, 0.12, 0.0, 0.03, 1.0),
                e(0.75, -0.15, 0.18, 0.3, 15.0, 0.025, 0.0),
                e(-0.95, -0.35, 0.2, 0.13, -45.0, 0.0008, 0.0),
            ],
            lesion: Lesion {
                center: (0.2, 0.8),
                radius: 0.35,
                base_value: 0.01,
            },
            background_value: 1e-4,
        }
    }

    /// Base value at `(x, y)` plus the perfusion weight of the topmost region.
    fn region_at(&self, x: f64, y: f64) -> (f64, f64) {
        self.regions
            .iter()
            .rev()
            .find(|r| r.contains(x, y))
            .map_or((self.background_value, 0.0), |r| (r.value, r.perfusion))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub anatomy: AnatomyModel,
    pub tac: ToftsTac,
    /// Lesion value at peak concentration relative to its base value, minus one.
    pub contrast_gain: f64,
    #[serde(default)]
    pub breathing_amplitude: f64,
    #[serde(default = "default_breathing_period")]
    pub breathing_period: f64,
}

fn default_breathing_period() -> f64 {
    5.0
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            anatomy: AnatomyModel::abdomen(),
            tac: ToftsTac::default(),
            contrast_gain: 3.0,
            breathing_amplitude: 0.0,
            breathing_period: default_breathing_period(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicPhantom {
    config: PhantomConfig,
    horizon: f64,
    peak_concentration: f64,
}

impl DynamicPhantom {
    pub fn new(config: PhantomConfig, fov: f64, horizon: f64) -> Result<Self> {
        config.tac.validate(horizon)?;
        let a = &config.anatomy;
        let lesion = a.lesion;
        let half = 0.5 * fov;
        if !(lesion.radius > 0.0)
            || lesion.center.0.abs() + lesion.radius > half
            || lesion.center.1.abs() + lesion.radius > half
        {
            return Err(invalid("lesion must lie inside the field of view"));
        }
        let values = a
            .regions
            .iter()
            .map(|r| r.value)
            .chain([a.background_value, lesion.base_value]);
        for v in values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid("region values must be finite and nonnegative"));
            }
        }
        if a.regions.iter().any(|r| !(r.semi_axes.0 > 0.0 && r.semi_axes.1 > 0.0) || !(r.perfusion >= 0.0)) {
            return Err(invalid("ellipses need positive semi-axes and nonnegative perfusion"));
        }
        if !(config.contrast_gain >= 0.0) {
            return Err(invalid("contrast gain must be nonnegative"));
        }
        if !(config.breathing_amplitude.abs() < 1.0) || !(config.breathing_period > 0.0) {
            return Err(invalid("breathing amplitude must be below 1 and the period positive"));
        }
        let (_, peak) = config.tac.peak(horizon);
        Ok(Self {
            config,
            horizon,
            peak_concentration: peak,
        })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.config
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn peak_concentration(&self) -> f64 {
        self.peak_concentration
    }

    /// Lesion contrast factor `1 + γ C(t) / C_max`.
    pub fn lesion_factor(&self, t: f64) -> f64 {
        if self.peak_concentration > 0.0 {
            1.0 + self.config.contrast_gain * self.config.tac.concentration(t) / self.peak_concentration
        } else {
            1.0
        }
    }

    fn plasma_factor(&self, t: f64) -> f64 {
        let p = self.config.tac.plasma_peak;
        if p > 0.0 {
            self.config.tac.plasma(t) / p
        } else {
            0.0
        }
    }

    /// Object value at `(x, y)` cm and time `t` s.
    pub fn evaluate(&self, x: f64, y: f64, t: f64) -> f64 {
        let a = self.config.breathing_amplitude;
        let y = if a != 0.0 {
            y / (1.0 + a * (TAU * t / self.config.breathing_period).sin())
        } else {
            y
        };
        let anatomy = &self.config.anatomy;
        if anatomy.lesion.contains(x, y) {
            return anatomy.lesion.base_value * self.lesion_factor(t);
        }
        let (value, perfusion) = anatomy.region_at(x, y);
        if perfusion > 0.0 {
            value * (1.0 + perfusion * self.plasma_factor(t))
        } else {
            value
        }
    }

    /// Pixel means over `supersample²` evenly spaced sub-pixel points at each frame time.
    pub fn render(&self, grid: &SpacetimeGrid, supersample: usize) -> Result<ImageStack> {
        if supersample == 0 {
            return Err(invalid("supersample must be at least 1"));
        }
        let h = grid.pixel_size();
        let offsets: Vec<f64> = (0..supersample)
            .map(|i| ((i as f64 + 0.5) / supersample as f64 - 0.5) * h)
            .collect();
        let norm = 1.0 / (supersample * supersample) as f64;
        let centers = grid.pixel_centers();
        let mut coeffs = DMatrix::zeros(grid.pixels(), grid.frames());
        for k in 0..grid.frames() {
            let t = grid.frame_time(k);
            for (m, &(x, y)) in centers.iter().enumerate() {
                let mut acc = 0.0;
                for &ox in &offsets {
                    for &oy in &offsets {
                        acc += self.evaluate(x + ox, y + oy, t);
                    }
                }
                coeffs[(m, k)] = acc * norm;
            }
        }
        ImageStack::new(*grid, coeffs)
    }

    /// Pixels whose centers lie in the undeformed lesion, dilated by `dilation` pixels.
    pub fn lesion_roi(&self, grid: &SpacetimeGrid, dilation: usize) -> Result<RoiMask> {
        let lesion = self.config.anatomy.lesion;
        let pixels: Vec<usize> = grid
            .pixel_centers()
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| lesion.contains(x, y))
            .map(|(m, _)| m)
            .collect();
        Ok(RoiMask::new(pixels, grid)?.dilate(grid, dilation))
    }
}
