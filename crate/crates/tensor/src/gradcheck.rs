//! Central finite-difference verification of backward rules.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// What to compare for each input tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Every entry of the gradient.
    AllEntries,
    /// This many entries chosen at random.
    SampledEntries(usize),
    /// Directional derivatives `⟨∇f, u⟩` along this many random
    /// directions `u` per input, entries uniform in `[-1, 1]`.
    Directions(usize),
    /// Like `Directions`, but each direction spans all inputs at once.
    JointDirections(usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Finite-difference step.
    pub step: f64,
    pub probe: Probe,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, step: 1e-5, probe: Probe::AllEntries, seed: 0 }
    }

    pub fn sampled(mut self, max_entries: usize, seed: u64) -> Self {
        self.probe = Probe::SampledEntries(max_entries);
        self.seed = seed;
        self
    }

    pub fn directional(mut self, directions: usize, seed: u64) -> Self {
        self.probe = Probe::Directions(directions);
        self.seed = seed;
        self
    }

    pub fn joint_directional(mut self, directions: usize, seed: u64) -> Self {
        self.probe = Probe::JointDirections(directions);
        self.seed = seed;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h·u) − f(x−h·u)) / 2h`, where `u` is a unit basis
/// vector or a random direction depending on [`Probe`].
///
/// Relative error per probe is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(TensorError::NotScalar { op: "grad_check", shape: out.shape().to_vec() });
    }
    out.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    let _guard = no_grad();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()])).collect();
    // A probe is a sparse direction: (input, entry, weight) triples.
    let probes: Vec<Vec<(usize, usize, f64)>> = match opts.probe {
        Probe::JointDirections(k) => (0..k)
            .map(|_| {
                let mut dir = Vec::new();
                for (which, leaf) in leaves.iter().enumerate() {
                    dir.extend((0..leaf.numel()).map(|i| (which, i, rng.random_range(-1.0..=1.0))));
                }
                dir
            })
            .collect(),
        _ => {
            let mut probes = Vec::new();
            for (which, leaf) in leaves.iter().enumerate() {
                let n = leaf.numel();
                match opts.probe {
                    Probe::SampledEntries(k) if k < n => {
                        probes.extend(sample(&mut rng, n, k).into_iter().map(|i| vec![(which, i, 1.0)]))
                    }
                    Probe::Directions(k) => probes
                        .extend((0..k).map(|_| (0..n).map(|i| (which, i, rng.random_range(-1.0..=1.0))).collect())),
                    _ => probes.extend((0..n).map(|i| vec![(which, i, 1.0)])),
                }
            }
            probes
        }
    };
    let eval = |dir: &[(usize, usize, f64)], sign: f64| -> Result<f64> {
        let mut data: Vec<Vec<f64>> = leaves.iter().map(Tensor::to_vec).collect();
        for &(which, i, u) in dir {
            data[which][i] += sign * h * u;
        }
        let probe =
            data.into_iter().zip(&leaves).map(|(d, l)| Tensor::new(d, l.shape())).collect::<Result<Vec<_>>>()?;
        f(&probe)?.item()
    };
    for dir in probes {
        let numeric = (eval(&dir, 1.0)? - eval(&dir, -1.0)?) / (2.0 * h);
        let a: f64 = dir.iter().map(|&(which, i, u)| analytic[which][i] * u).sum();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        op_name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel <= opts.tolerance,
    })
}
