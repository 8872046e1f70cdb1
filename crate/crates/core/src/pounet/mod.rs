//! Partition-of-unity neural field: `Φ(r, t) = Σ_m β_m(r) c_mᵀ Ψ(t)`, with a
//! time-only partition network `Ψ` and an `M × P` coefficient matrix over
//! the pixel indicators. Frame `k` of the field is simply `C Ψ(t_k)`.

mod adam;
mod net;
mod solve;

pub use adam::{Adam, AdamConfig};
pub use net::{Forward, NetArchitecture, PartitionNet};
pub use solve::{
    embed, embedding_objective, refit, solve_coefficients, update_partition, CgConfig, CoefficientSolve,
    EmbedConfig, EmbedReport, PartitionUpdate, Regularization,
};

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{ImageStack, SpacetimeGrid};

/// Per-frame targets produced on demand, so that no `M × K` array needs to
/// exist while training against them.
pub trait FrameSource {
    fn frames(&self) -> usize;
    fn pixels(&self) -> usize;
    /// Writes target frame `k` into `out` (length `pixels()`).
    fn frame_into(&self, k: usize, out: &mut [f64]);
    fn value(&self, m: usize, k: usize) -> f64;
    /// Misfit weight of frame `k`.
    fn weight(&self, _k: usize) -> f64 {
        1.0
    }
}

impl FrameSource for ImageStack {
    fn frames(&self) -> usize {
        self.grid().frames()
    }

    fn pixels(&self) -> usize {
        self.grid().pixels()
    }

    fn frame_into(&self, k: usize, out: &mut [f64]) {
        out.copy_from_slice(self.frame_slice(k));
    }

    fn value(&self, m: usize, k: usize) -> f64 {
        self.coeffs()[(m, k)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PounetField {
    grid: SpacetimeGrid,
    net: PartitionNet,
    coeffs: DMatrix<f64>,
}

impl PounetField {
    pub fn new(grid: SpacetimeGrid, net: PartitionNet, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.nrows() != grid.pixels() || coeffs.ncols() != net.partitions() {
            return Err(Error::Dimension {
                what: "coefficient matrix",
                expected: grid.pixels() * net.partitions(),
                got: coeffs.len(),
            });
        }
        if (net.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon() {
            return Err(Error::GridMismatch("network horizon differs from the grid"));
        }
        Ok(Self { grid, net, coeffs })
    }

    pub fn grid(&self) -> &SpacetimeGrid {
        &self.grid
    }

    pub fn net(&self) -> &PartitionNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut PartitionNet {
        &mut self.net
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.coeffs
    }

    pub fn partitions(&self) -> usize {
        self.net.partitions()
    }

    /// `|η| + M·P`.
    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.coeffs.len()
    }

    /// `Ψ` and `Ψ'` at every frame time, each `P × K`.
    pub fn frame_partitions(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.net.evaluate(&self.grid.frame_times())
    }

    /// `C Ψ(t_k)`.
    pub fn snapshot(&self, k: usize) -> Result<Vec<f64>> {
        self.grid.check_frame(k)?;
        self.net.check_finite()?;
        let (psi, _) = self.net.evaluate(&[self.grid.frame_time(k)]);
        let mut out = vec![0.0; self.grid.pixels()];
        self.snapshot_with(psi.as_slice(), &mut out);
        Ok(out)
    }

    /// `out = C psi` for a precomputed partition vector.
    pub fn snapshot_with(&self, psi: &[f64], out: &mut [f64]) {
        let m = self.grid.pixels();
        out.fill(0.0);
        for (p, &w) in psi.iter().enumerate() {
            let col = &self.coeffs.as_slice()[p * m..(p + 1) * m];
            for (o, c) in out.iter_mut().zip(col) {
                *o += w * c;
            }
        }
    }

    /// Continuous evaluator `Φ(x, y, t)`; zero outside the field of view.
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self.grid.pixel_at(x, y) {
            Some(m) => {
                let (psi, _) = self.net.evaluate(&[t]);
                self.coeffs.row(m).iter().zip(psi.iter()).map(|(c, p)| c * p).sum()
            }
            None => 0.0,
        }
    }

    /// Every frame as a full image stack.
    pub fn render(&self) -> Result<ImageStack> {
        self.net.check_finite()?;
        let (psi, _) = self.frame_partitions();
        ImageStack::new(self.grid, &self.coeffs * psi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_field(grid: SpacetimeGrid, arch: NetArchitecture, seed: u64) -> PounetField {
        let net = PartitionNet::new(arch, grid.horizon(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let c = DMatrix::from_fn(grid.pixels(), net.partitions(), |_, _| rng.random_range(0.0..1.0));
        PounetField::new(grid, net, c).unwrap()
    }

    #[test]
    fn snapshot_examples() {
        let grid = SpacetimeGrid::new(6, 1.0, 5, 10.0).unwrap();
        let arch = NetArchitecture::uniform(2, 8, 3);
        let net = PartitionNet::new(arch.clone(), 10.0, 1).unwrap();
        let zero = PounetField::new(grid, net, DMatrix::zeros(36, 3)).unwrap();
        assert!(zero.snapshot(2).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(zero.snapshot(5), Err(Error::OutOfRange { .. })));

        let single = PartitionNet::new(NetArchitecture::uniform(2, 8, 1), 10.0, 2).unwrap();
        let c = DMatrix::from_fn(36, 1, |m, _| m as f64);
        let field = PounetField::new(grid, single, c.clone()).unwrap();
        for k in 0..5 {
            assert_eq!(field.snapshot(k).unwrap(), c.as_slice());
        }
    }

    #[test]
    fn snapshot_matches_projection_of_evaluator() {
        let grid = SpacetimeGrid::new(8, 2.0, 6, 30.0).unwrap();
        let field = random_field(grid, NetArchitecture::uniform(3, 16, 4), 3);
        let projected = project(&grid, |x, y, t| field.eval(x, y, t)).unwrap();
        let rendered = field.render().unwrap();
        for k in 0..6 {
            let s = field.snapshot(k).unwrap();
            for m in 0..grid.pixels() {
                assert!((s[m] - projected.coeffs()[(m, k)]).abs() <= 1e-12 * s[m].abs().max(1.0));
                assert!((s[m] - rendered.coeffs()[(m, k)]).abs() <= 1e-12 * s[m].abs().max(1.0));
            }
        }
        assert_eq!(field.param_count(), field.net().param_count() + 64 * 4);
    }

    #[test]
    fn snapshot_is_linear_in_coefficients() {
        let grid = SpacetimeGrid::new(5, 1.0, 4, 4.0).unwrap();
        let a = random_field(grid, NetArchitecture::uniform(2, 6, 3), 4);
        let mut b = a.clone();
        *b.coeffs_mut() = a.coeffs() * 2.5 + DMatrix::from_element(25, 3, 1.0);
        let mut ones = a.clone();
        *ones.coeffs_mut() = DMatrix::from_element(25, 3, 1.0);
        for k in 0..4 {
            let sa = a.snapshot(k).unwrap();
            let sb = b.snapshot(k).unwrap();
            let so = ones.snapshot(k).unwrap();
            for m in 0..25 {
                assert!((sb[m] - (2.5 * sa[m] + so[m])).abs() < 1e-13);
            }
        }
    }
}
