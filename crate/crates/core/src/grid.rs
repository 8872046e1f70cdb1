//! Spatiotemporal discretization: a square pixel grid over the field of view
//! and uniformly spaced frame times, with the indicator-basis projection
//! `Π` and its adjoint `Π*`.
//!
//! Pixels are enumerated row-major with `y` varying fastest, so pixel
//! `m = ix * side + iy`. Every sparse operator column follows this order.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVectorView};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeGrid {
    side: usize,
    fov: f64,
    frames: usize,
    horizon: f64,
}

impl SpacetimeGrid {
    /// `side` pixels per axis over a `fov` cm square, `frames` frames over
    /// `horizon` seconds.
    pub fn new(side: usize, fov: f64, frames: usize, horizon: f64) -> Result<Self> {
        if side == 0 || frames == 0 {
            return Err(invalid("grid needs at least one pixel and one frame"));
        }
        if !(fov > 0.0 && fov.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("field of view and horizon must be positive"));
        }
        Ok(Self {
            side,
            fov,
            frames,
            horizon,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of pixels `M = side²`.
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn pixel_size(&self) -> f64 {
        self.fov / self.side as f64
    }

    pub fn frame_interval(&self) -> f64 {
        self.horizon / self.frames as f64
    }

    /// Volume of one spatiotemporal voxel, `h² ΔT`.
    pub fn voxel_volume(&self) -> f64 {
        let h = self.pixel_size();
        h * h * self.frame_interval()
    }

    pub fn pixel_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.side + iy
    }

    pub fn pixel_coords(&self, m: usize) -> (usize, usize) {
        (m / self.side, m % self.side)
    }

    fn axis_center(&self, i: usize) -> f64 {
        -0.5 * self.fov + (i as f64 + 0.5) * self.pixel_size()
    }

    pub fn pixel_center(&self, m: usize) -> (f64, f64) {
        let (ix, iy) = self.pixel_coords(m);
        (self.axis_center(ix), self.axis_center(iy))
    }

    pub fn pixel_centers(&self) -> Vec<(f64, f64)> {
        (0..self.pixels()).map(|m| self.pixel_center(m)).collect()
    }

    fn axis_cell(&self, v: f64) -> Option<usize> {
        let i = ((v + 0.5 * self.fov) / self.pixel_size()).floor();
        if i >= 0.0 && i < self.side as f64 {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Pixel containing `(x, y)`, if inside the field of view.
    pub fn pixel_at(&self, x: f64, y: f64) -> Option<usize> {
        Some(self.pixel_index(self.axis_cell(x)?, self.axis_cell(y)?))
    }

    /// `t_k = k ΔT` for zero-based `k`.
    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 * self.frame_interval()
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.frames).map(|k| self.frame_time(k)).collect()
    }

    /// Frame whose interval `(t_k - ΔT/2, t_k + ΔT/2)` contains `t`. The
    /// first and last intervals are clipped/extended to `[0, T]`.
    pub fn frame_at(&self, t: f64) -> Option<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return None;
        }
        let k = (t / self.frame_interval() + 0.5).floor() as usize;
        Some(k.min(self.frames - 1))
    }

    pub fn check_frame(&self, k: usize) -> Result<()> {
        if k < self.frames {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                index: k,
                len: self.frames,
            })
        }
    }
}

/// Coefficient matrix `F` (M×K) of a discretized spatiotemporal object;
/// column `k` is the frame-`k` snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    grid: SpacetimeGrid,
    coeffs: DMatrix<f64>,
}

impl ImageStack {
    pub fn new(grid: SpacetimeGrid, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.nrows() != grid.pixels() || coeffs.ncols() != grid.frames() {
            return Err(Error::Dimension {
                what: "image stack",
                expected: grid.pixels() * grid.frames(),
                got: coeffs.len(),
            });
        }
        if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                pixel: i % grid.pixels(),
                frame: i / grid.pixels(),
            });
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: SpacetimeGrid) -> Self {
        Self {
            grid,
            coeffs: DMatrix::zeros(grid.pixels(), grid.frames()),
        }
    }

    /// Stack whose every frame equals `frame`.
    pub fn constant_in_time(grid: SpacetimeGrid, frame: &[f64]) -> Result<Self> {
        if frame.len() != grid.pixels() {
            return Err(Error::Dimension {
                what: "frame",
                expected: grid.pixels(),
                got: frame.len(),
            });
        }
        let coeffs = DMatrix::from_fn(grid.pixels(), grid.frames(), |m, _| frame[m]);
        Self::new(grid, coeffs)
    }

    pub fn grid(&self) -> &SpacetimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> DMatrix<f64> {
        self.coeffs
    }

    pub fn frame(&self, k: usize) -> DVectorView<'_, f64> {
        self.coeffs.column(k)
    }

    pub fn frame_slice(&self, k: usize) -> &[f64] {
        let m = self.grid.pixels();
        &self.coeffs.as_slice()[k * m..(k + 1) * m]
    }

    /// Value of the indicator expansion `I(F)` at `(x, y, t)`; zero outside `Ω_T`.
    pub fn value_at(&self, x: f64, y: f64, t: f64) -> f64 {
        match (self.grid.pixel_at(x, y), self.grid.frame_at(t)) {
            (Some(m), Some(k)) => self.coeffs[(m, k)],
            _ => 0.0,
        }
    }

    pub fn same_grid(&self, other: &ImageStack) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch("image stacks live on different grids"))
        }
    }
}

/// Set of pixels forming a region of interest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiMask {
    pixels: Vec<usize>,
}

impl RoiMask {
    pub fn new(mut pixels: Vec<usize>, grid: &SpacetimeGrid) -> Result<Self> {
        pixels.sort_unstable();
        pixels.dedup();
        if pixels.is_empty() {
            return Err(Error::EmptyRoi);
        }
        if let Some(&bad) = pixels.iter().find(|&&m| m >= grid.pixels()) {
            return Err(Error::OutOfRange {
                index: bad,
                len: grid.pixels(),
            });
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_mask(&self, grid: &SpacetimeGrid) -> Vec<bool> {
        let mut mask = alloc::vec![false; grid.pixels()];
        for &m in &self.pixels {
            mask[m] = true;
        }
        mask
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, grid: &SpacetimeGrid, radius: usize) -> Self {
        let side = grid.side() as isize;
        let r = radius as isize;
        let mut mask = self.to_mask(grid);
        for &m in &self.pixels {
            let (ix, iy) = grid.pixel_coords(m);
            for dx in -r..=r {
                for dy in -r..=r {
                    let (jx, jy) = (ix as isize + dx, iy as isize + dy);
                    if (0..side).contains(&jx) && (0..side).contains(&jy) {
                        mask[grid.pixel_index(jx as usize, jy as usize)] = true;
                    }
                }
            }
        }
        Self {
            pixels: (0..grid.pixels()).filter(|&m| mask[m]).collect(),
        }
    }
}

/// `Π_{M,K}`: samples `object(x, y, t)` at pixel centers and frame times.
pub fn project(
    grid: &SpacetimeGrid,
    object: impl Fn(f64, f64, f64) -> f64,
) -> Result<ImageStack> {
    let centers = grid.pixel_centers();
    let mut coeffs = DMatrix::zeros(grid.pixels(), grid.frames());
    for k in 0..grid.frames() {
        let t = grid.frame_time(k);
        for (m, &(x, y)) in centers.iter().enumerate() {
            let v = object(x, y, t);
            if !v.is_finite() {
                return Err(Error::NonFinite { pixel: m, frame: k });
            }
            coeffs[(m, k)] = v;
        }
    }
    Ok(ImageStack { grid: *grid, coeffs })
}

/// `Π*_{M,K} F`: the continuous function `Σ f_{m,k} β_m γ_k / V`.
#[derive(Debug, Clone, Copy)]
pub struct AdjointEmbedding<'a> {
    stack: &'a ImageStack,
}

pub fn adjoint_embed(stack: &ImageStack) -> AdjointEmbedding<'_> {
    AdjointEmbedding { stack }
}

impl AdjointEmbedding<'_> {
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        self.stack.value_at(x, y, t) / self.stack.grid.voxel_volume()
    }
}

/// `(a, b) = Σ a_{m,k} b_{m,k} V`.
pub fn inner_product(a: &ImageStack, b: &ImageStack) -> Result<f64> {
    a.same_grid(b)?;
    Ok(a.coeffs.dot(&b.coeffs) * a.grid.voxel_volume())
}
