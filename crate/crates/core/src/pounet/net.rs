//! Time-input sine MLP with a softmax output layer. Evaluation carries the
//! forward-mode time derivative alongside the value, and `backward`
//! differentiates both with respect to the parameters.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArchitecture {
    /// Layer widths, input first; the input width must be 1 and the last
    /// entry is the number of partitions `P`.
    pub widths: Vec<usize>,
    pub omega0: f64,
}

impl Default for NetArchitecture {
    fn default() -> Self {
        Self::uniform(4, 140, 10)
    }
}

impl NetArchitecture {
    pub fn uniform(hidden_layers: usize, width: usize, partitions: usize) -> Self {
        let mut widths = alloc::vec![1];
        widths.extend(core::iter::repeat_n(width, hidden_layers));
        widths.push(partitions);
        Self { widths, omega0: 30.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths[0] != 1 || self.widths.contains(&0) {
            return Err(invalid("network needs a scalar input and nonempty layers"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(invalid("sine frequency must be positive"));
        }
        Ok(())
    }

    pub fn partitions(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weights: usize,
    bias: usize,
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionNet {
    arch: NetArchitecture,
    horizon: f64,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Values and time derivatives of the partition functions at a batch of
/// times, plus what `backward` needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub psi: DMatrix<f64>,
    pub dpsi: DMatrix<f64>,
    inputs: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pre: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PartitionNet {
    /// Sine-network initialization: first-layer weights `U(-1, 1)`, hidden
    /// weights `U(±√(6/n)/ω₀)`, output weights `U(±√(6/n))`, biases
    /// `U(±1/√n)` with `n` the fan-in. The frequency `ω₀` multiplies every
    /// hidden pre-activation.
    pub fn new(arch: NetArchitecture, horizon: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch, horizon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.clone().iter().enumerate() {
            let n = layer.inputs as f64;
            let wb = if l == 0 {
                1.0
            } else if l == last {
                (6.0 / n).sqrt()
            } else {
                (6.0 / n).sqrt() / net.arch.omega0
            };
            let bb = 1.0 / n.sqrt();
            for w in &mut net.params[layer.weights..layer.bias] {
                *w = rng.random_range(-wb..=wb);
            }
            for b in &mut net.params[layer.bias..layer.bias + layer.outputs] {
                *b = rng.random_range(-bb..=bb);
            }
        }
        Ok(net)
    }

    pub fn zeros(arch: NetArchitecture, horizon: f64) -> Result<Self> {
        arch.validate()?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        let mut layers = Vec::with_capacity(arch.widths.len() - 1);
        let mut offset = 0;
        for w in arch.widths.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            layers.push(Layer {
                weights: offset,
                bias: offset + inputs * outputs,
                inputs,
                outputs,
            });
            offset += outputs * (inputs + 1);
        }
        Ok(Self {
            params: alloc::vec![0.0; offset],
            arch,
            horizon,
            layers,
        })
    }

    pub fn from_params(arch: NetArchitecture, horizon: f64, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch, horizon)?;
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                what: "network parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn architecture(&self) -> &NetArchitecture {
        &self.arch
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn partitions(&self) -> usize {
        self.arch.partitions()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteWeights)
        }
    }

    fn weights(&self, layer: &Layer) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[layer.weights..layer.bias], layer.outputs, layer.inputs)
    }

    /// `Ψ(t)` and `Ψ'(t)` for one time.
    pub fn eval_partition(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_finite()?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let (psi, dpsi) = self.evaluate(&[t]);
        Ok((psi.as_slice().to_vec(), dpsi.as_slice().to_vec()))
    }

    /// `Ψ` and `Ψ'` as `P × B` matrices for a batch of times.
    pub fn evaluate(&self, times: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = self.run(times, false);
        (f.psi, f.dpsi)
    }

    pub fn forward(&self, times: &[f64]) -> Forward {
        self.run(times, true)
    }

    fn run(&self, times: &[f64], keep: bool) -> Forward {
        let b = times.len();
        let omega = self.arch.omega0;
        let scale = 2.0 / self.horizon;
        let mut z = DMatrix::from_fn(1, b, |_, j| scale * times[j] - 1.0);
        let mut dz = DMatrix::from_element(1, b, scale);
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.weights(layer);
            let bias = &self.params[layer.bias..layer.bias + layer.outputs];
            let mut a = w * &z;
            for mut col in a.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(bias) {
                    *v += bi;
                }
            }
            let da = w * &dz;
            if keep {
                inputs.push((z, dz));
            }
            if l == last {
                let (psi, dpsi) = softmax_with_tangent(&a, &da);
                if keep {
                    pre.push((a, da));
                }
                return Forward {
                    psi,
                    dpsi,
                    inputs,
                    pre,
                };
            }
            z = a.map(|v| (omega * v).sin());
            dz = a.zip_map(&da, |v, dv| omega * (omega * v).cos() * dv);
            if keep {
                pre.push((a, da));
            }
        }
        unreachable!("architecture has at least one layer")
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// sensitivities to `Ψ` and `Ψ'` are `g_psi` and `g_dpsi`.
    pub fn backward(&self, fwd: &Forward, g_psi: &DMatrix<f64>, g_dpsi: &DMatrix<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let omega = self.arch.omega0;
        let psi = &fwd.psi;
        let da_last = &fwd.pre.last().unwrap().1;
        // softmax with tangent
        let mut ga = DMatrix::zeros(psi.nrows(), psi.ncols());
        let mut gda = DMatrix::zeros(psi.nrows(), psi.ncols());
        for j in 0..psi.ncols() {
            let p = psi.column(j);
            let da = da_last.column(j);
            let gp = g_psi.column(j);
            let gdp = g_dpsi.column(j);
            let q = p.dot(&gdp);
            let s = p.dot(&da);
            let ghat = gp + gdp.component_mul(&(da - nalgebra::DVector::from_element(da.len(), s))) - da * q;
            let pg = p.dot(&ghat);
            for i in 0..p.len() {
                gda[(i, j)] = p[i] * (gdp[i] - q);
                ga[(i, j)] = p[i] * (ghat[i] - pg);
            }
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (z, dz) = &fwd.inputs[l];
            {
                let mut gw = DMatrixViewMut::from_slice(&mut grad[layer.weights..layer.bias], layer.outputs, layer.inputs);
                gw.gemm(1.0, &ga, &z.transpose(), 1.0);
                gw.gemm(1.0, &gda, &dz.transpose(), 1.0);
            }
            for (gb, row) in grad[layer.bias..layer.bias + layer.outputs].iter_mut().zip(ga.row_iter()) {
                *gb += row.sum();
            }
            if l == 0 {
                break;
            }
            let w = self.weights(layer);
            let gz = w.tr_mul(&ga);
            let gdz = w.tr_mul(&gda);
            // through the sine activation of the previous layer
            let (a, da) = &fwd.pre[l - 1];
            ga = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
                let (s, c) = (omega * a[(i, j)]).sin_cos();
                gz[(i, j)] * omega * c - gdz[(i, j)] * omega * omega * s * da[(i, j)]
            });
            gda = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| gdz[(i, j)] * omega * (omega * a[(i, j)]).cos());
        }
    }
}

fn softmax_with_tangent(a: &DMatrix<f64>, da: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut psi = a.clone();
    let mut dpsi = da.clone();
    for j in 0..a.ncols() {
        let mut col = psi.column_mut(j);
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
        let s = col.dot(&da.column(j));
        for i in 0..col.len() {
            dpsi[(i, j)] = psi[(i, j)] * (da[(i, j)] - s);
        }
    }
    (psi, dpsi)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: f64 = 648.0;

    #[test]
    fn architecture_counts() {
        let arch = NetArchitecture::default();
        assert_eq!(arch.widths, [1, 140, 140, 140, 140, 10]);
        assert_eq!(arch.param_count(), 280 + 3 * 140 * 141 + 10 * 141);
        let net = PartitionNet::new(arch.clone(), T, 1).unwrap();
        assert_eq!(net.param_count(), arch.param_count());
        assert!(NetArchitecture { widths: alloc::vec![2, 3], omega0: 30.0 }.validate().is_err());
    }

    #[test]
    fn partition_of_unity() {
        let net = PartitionNet::new(NetArchitecture::default(), T, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let times: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=T)).collect();
        let (psi, dpsi) = net.evaluate(&times);
        for j in 0..1000 {
            assert!(psi.column(j).iter().all(|&p| p >= 0.0));
            assert!((psi.column(j).sum() - 1.0).abs() < 1e-12);
            assert!(dpsi.column(j).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn zero_network_is_uniform_and_constant() {
        let net = PartitionNet::zeros(NetArchitecture::uniform(2, 5, 4), T).unwrap();
        let (psi, dpsi) = net.eval_partition(100.0).unwrap();
        assert!(psi.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(dpsi.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn invalid_evaluations() {
        let mut net = PartitionNet::new(NetArchitecture::uniform(1, 3, 2), T, 1).unwrap();
        assert!(matches!(net.eval_partition(T + 1.0), Err(Error::TimeOutOfRange { .. })));
        net.params_mut()[0] = f64::NAN;
        assert_eq!(net.eval_partition(1.0).unwrap_err(), Error::NonFiniteWeights);
    }

    fn worst_fd_error(net: &PartitionNet, step: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t = rng.random_range(step..T - step);
            let (_, d) = net.eval_partition(t).unwrap();
            let (p1, _) = net.eval_partition(t + step).unwrap();
            let (p0, _) = net.eval_partition(t - step).unwrap();
            let fd = p1.iter().zip(&p0).map(|(a, b)| (a - b) / (2.0 * step));
            let num: f64 = d.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = d.iter().map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
        worst
    }

    #[test]
    fn derivative_matches_central_differences() {
        let net = PartitionNet::new(NetArchitecture::default(), T, 3).unwrap();
        let worst = worst_fd_error(&net, 1e-5 * T);
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn central_difference_error_is_second_order() {
        // a wrong derivative would leave an O(1) floor instead of shrinking 100x per decade
        let net = PartitionNet::new(NetArchitecture::default(), T, 3).unwrap();
        let coarse = worst_fd_error(&net, 1e-4 * T);
        let fine = worst_fd_error(&net, 1e-5 * T);
        assert!(fine < coarse / 50.0, "{coarse} -> {fine}");
    }

    fn toy_loss(net: &PartitionNet, times: &[f64], wp: &DMatrix<f64>, wd: &DMatrix<f64>) -> f64 {
        let (p, d) = net.evaluate(times);
        0.5 * (p.component_mul(&p).component_mul(wp).sum() + d.component_mul(&d).component_mul(wd).sum())
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = NetArchitecture { widths: alloc::vec![1, 3, 3, 2], omega0: 3.0 };
        let net = PartitionNet::new(arch, 10.0, 5).unwrap();
        let times = [0.5, 3.0, 7.25, 9.9];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wp = DMatrix::from_fn(2, 4, |_, _| rng.random_range(0.5..2.0));
        let wd = DMatrix::from_fn(2, 4, |_, _| rng.random_range(0.5..2.0));
        let fwd = net.forward(&times);
        let gp = fwd.psi.component_mul(&wp);
        let gd = fwd.dpsi.component_mul(&wd);
        let mut grad = alloc::vec![0.0; net.param_count()];
        net.backward(&fwd, &gp, &gd, &mut grad);
        let mut fd = alloc::vec![0.0; net.param_count()];
        for i in 0..net.param_count() {
            let h = 1e-6;
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            fd[i] = (toy_loss(&plus, &times, &wp, &wd) - toy_loss(&minus, &times, &wp, &wd)) / (2.0 * h);
        }
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "relative error {}", num / den);
    }
}
