//! Numeric convergence bound for the regularized Adam variant, constant
//! estimation from trajectories, and a synthetic smooth objective on which
//! every constant is known analytically.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::optimizer::{AdamState, Backend, ADAM_EPS};
use crate::rng::{stream_rng, streams};
use crate::tensor::{l2, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub k: u64,
    pub alpha: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub r: f64,
    pub l: f64,
    pub f0: f64,
    pub f_star: f64,
    pub eps: f64,
    /// Window length in `1 − β₂ⁿ`; `None` means `n = K`.
    #[serde(default)]
    pub n: Option<u64>,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Domain("K must be >= 1".into()));
        }
        if !(self.beta2 > 0.0 && self.beta2 <= 1.0) {
            return Err(Error::Domain(format!("beta2 must lie in (0, 1], got {}", self.beta2)));
        }
        if self.beta2 == 1.0 {
            return Err(Error::Domain("the bound diverges at beta2 = 1".into()));
        }
        if !(self.alpha > 0.0 && self.eps > 0.0 && self.lambda >= 0.0 && self.l >= 0.0) {
            return Err(Error::Domain("need alpha > 0, eps > 0, lambda >= 0, L >= 0".into()));
        }
        if self.r < self.eps.sqrt() {
            return Err(Error::Domain(format!("R = {} is below sqrt(eps)", self.r)));
        }
        let vals = [self.alpha, self.lambda, self.r, self.l, self.f0, self.f_star];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("bound inputs must be finite".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> u64 {
        self.n.unwrap_or(self.k)
    }
}

/// `2R(F₀ − f*) / (α(1+λ)K)`.
pub fn bound_first_term(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(2.0 * b.r * (b.f0 - b.f_star) / (b.alpha * (1.0 + b.lambda) * b.k as f64))
}

/// `C = 2αR/√(1−β₂) + α²L/(2(1−β₂))`.
pub fn bound_constant(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let one = 1.0 - b.beta2;
    Ok(2.0 * b.alpha * b.r / one.sqrt() + b.alpha * b.alpha * b.l / (2.0 * one))
}

/// Right-hand side of the convergence bound.
pub fn convergence_bound(b: &BoundInputs) -> Result<f64> {
    let first = bound_first_term(b)?;
    let c = bound_constant(b)?;
    let one = 1.0 - b.beta2;
    let arg = (1.0 - b.beta2.powf(b.window() as f64)) * b.r * b.r / (one * b.eps);
    if !(arg > 0.0) || !arg.is_finite() {
        return Err(Error::Domain(format!("log argument {arg} is not positive")));
    }
    Ok(first + c * (arg.ln() / b.k as f64 - b.beta2.ln()))
}

/// A trajectory of the Adam variant on some objective `F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub backend: Backend,
    pub alpha: f64,
    pub beta2: f64,
    pub lambda: f64,
    /// `F(x_k)` for `k = 0..=K`.
    pub objective: Vec<f64>,
    /// `‖∇F(x_k)‖²` for `k = 0..K`.
    pub grad_norm_sq: Vec<f64>,
    /// `‖∇f + λ∇h‖` at `x_k` for `k = 0..K`.
    pub combined_norm: Vec<f64>,
    /// `(k, x_k)` at sampled steps.
    pub snapshots: Vec<(u64, Vec<f64>)>,
}

impl Trajectory {
    pub fn steps(&self) -> u64 {
        self.grad_norm_sq.len() as u64
    }
}

/// Estimated bound inputs with flags on what is a proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub inputs: BoundInputs,
    /// `L` is a lower estimate from sampled secant slopes.
    pub l_is_lower_estimate: bool,
    /// `f*` is the best observed objective minus `slack`, not a proven bound.
    pub f_star_is_proxy: bool,
    pub slack: f64,
}

/// Reads the bound inputs off a trajectory. `grad` evaluates `∇F` at a
/// snapshot.
pub fn estimate_constants(
    traj: &Trajectory,
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    slack: f64,
) -> Result<Estimate> {
    if traj.snapshots.len() < 2 {
        return Err(Error::contract("estimating L needs at least two snapshots"));
    }
    if traj.grad_norm_sq.is_empty() || traj.objective.is_empty() {
        return Err(Error::contract("empty trajectory"));
    }
    let r = traj.combined_norm.iter().copied().fold(0.0, f64::max) + ADAM_EPS.sqrt();
    let grads = traj
        .snapshots
        .iter()
        .map(|(_, x)| grad(x))
        .collect::<Result<Vec<_>>>()?;
    let mut l: f64 = 0.0;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            let dx: Vec<f64> = traj.snapshots[i].1.iter().zip(&traj.snapshots[j].1).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = grads[i].iter().zip(&grads[j]).map(|(a, b)| a - b).collect();
            let nx = l2(&dx);
            if nx > 0.0 {
                l = l.max(l2(&dg) / nx);
            }
        }
    }
    let best = traj.objective.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Estimate {
        inputs: BoundInputs {
            k: traj.steps(),
            alpha: traj.alpha,
            beta2: traj.beta2,
            lambda: traj.lambda,
            r,
            l,
            f0: traj.objective[0],
            f_star: best - slack,
            eps: ADAM_EPS,
            n: None,
        },
        l_is_lower_estimate: true,
        f_star_is_proxy: true,
        slack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub min_grad_norm_sq: f64,
    /// Second reading: mean over steps of `‖∇F(x_k)‖²`.
    pub mean_grad_norm_sq: f64,
    pub bound: f64,
    pub satisfied: bool,
    /// `bound − min_grad_norm_sq`.
    pub margin: f64,
    pub inputs: BoundInputs,
    pub max_combined_norm: f64,
}

pub fn verify_trajectory(traj: &Trajectory, b: &BoundInputs) -> Result<Verification> {
    if traj.backend != Backend::Adam {
        return Err(Error::contract("the bound applies to adam-backend trajectories only"));
    }
    if traj.alpha != b.alpha || traj.beta2 != b.beta2 || traj.lambda != b.lambda {
        return Err(Error::contract("trajectory (alpha, beta2, lambda) differ from the bound inputs"));
    }
    if traj.steps() != b.k {
        return Err(Error::contract(format!("trajectory has {} steps, bound expects {}", traj.steps(), b.k)));
    }
    let max_combined = traj.combined_norm.iter().copied().fold(0.0, f64::max);
    if b.r < max_combined + b.eps.sqrt() {
        return Err(Error::contract(format!(
            "R = {} is below the observed gradient bound {}",
            b.r,
            max_combined + b.eps.sqrt()
        )));
    }
    let bound = convergence_bound(b)?;
    let min = traj.grad_norm_sq.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = traj.grad_norm_sq.iter().sum::<f64>() / traj.grad_norm_sq.len() as f64;
    Ok(Verification {
        min_grad_norm_sq: min,
        mean_grad_norm_sq: mean,
        bound,
        satisfied: min <= bound,
        margin: bound - min,
        inputs: b.clone(),
        max_combined_norm: max_combined,
    })
}

/// Mean logistic loss `F(x) = (1/n) Σ ln(1 + exp(−yᵢ aᵢᵀx))`, regularized by
/// `h = F`, so the combined gradient is `(1+λ)∇F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProblem {
    pub a: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub points: usize,
    pub dim: usize,
    pub alpha: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub snapshot_every: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            points: 64,
            dim: 5,
            alpha: 0.01,
            beta2: 0.99,
            lambda: 1.0,
            snapshot_every: 10,
        }
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProblem {
    /// Gaussian design with labels from a random separating direction plus
    /// label noise.
    pub fn generate(points: usize, dim: usize, seed: u64) -> Result<Self> {
        if points == 0 || dim == 0 {
            return Err(Error::config("synthetic problem needs points and dim >= 1"));
        }
        let mut rng = stream_rng(seed, streams::SYNTHETIC);
        let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut a = Vec::with_capacity(points);
        let mut y = Vec::with_capacity(points);
        for _ in 0..points {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let z: f64 = row.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() + noise;
            y.push(if z >= 0.0 { 1.0 } else { -1.0 });
            a.push(row);
        }
        Ok(Self { a, y })
    }

    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.a.len() as f64;
        self.a
            .iter()
            .zip(&self.y)
            .map(|(a, y)| log1p_exp(-y * a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()))
            .sum::<f64>()
            / n
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.a.len() as f64;
        let mut g = vec![0.0; x.len()];
        for (a, y) in self.a.iter().zip(&self.y) {
            let m = y * a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            let c = -y * sigmoid(-m) / n;
            for (gi, ai) in g.iter_mut().zip(a) {
                *gi += c * ai;
            }
        }
        g
    }

    /// `max ‖aᵢ‖`, which bounds `‖∇F‖` everywhere.
    pub fn grad_bound(&self) -> f64 {
        self.a.iter().map(|a| l2(a)).fold(0.0, f64::max)
    }

    /// `λ_max(AᵀA) / (4n)`, the Lipschitz constant of `∇F`.
    pub fn smoothness(&self) -> f64 {
        let (n, d) = (self.a.len(), self.dim());
        let m = DMatrix::from_fn(n, d, |i, j| self.a[i][j]);
        let gram = m.transpose() * m;
        let top = SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top / (4.0 * n as f64)
    }

    /// Valid constants: `R = (1+λ)·max‖aᵢ‖ + √ε`, `L` exact, `f* = 0`.
    pub fn strict_inputs(&self, cfg: &SyntheticConfig, k: u64) -> BoundInputs {
        BoundInputs {
            k,
            alpha: cfg.alpha,
            beta2: cfg.beta2,
            lambda: cfg.lambda,
            r: (1.0 + cfg.lambda) * self.grad_bound() + ADAM_EPS.sqrt(),
            l: self.smoothness(),
            f0: self.value(&vec![0.0; self.dim()]),
            f_star: 0.0,
            eps: ADAM_EPS,
            n: None,
        }
    }

    /// `K` Adam steps from the origin on the combined gradient.
    pub fn run_adam(&self, cfg: &SyntheticConfig, steps: u64) -> Result<Trajectory> {
        let d = self.dim();
        let mut x = ParamSet::new();
        x.insert("x", Tensor::zeros(&[1, d]));
        let mut state = AdamState::new(&x, cfg.beta2, cfg.alpha)?;
        let mut traj = Trajectory {
            backend: Backend::Adam,
            alpha: cfg.alpha,
            beta2: cfg.beta2,
            lambda: cfg.lambda,
            objective: Vec::with_capacity(steps as usize + 1),
            grad_norm_sq: Vec::with_capacity(steps as usize),
            combined_norm: Vec::with_capacity(steps as usize),
            snapshots: Vec::new(),
        };
        let every = cfg.snapshot_every.max(1);
        for k in 0..=steps {
            let xk = x.flat();
            traj.objective.push(self.value(&xk));
            if k % every == 0 || k == steps {
                traj.snapshots.push((k, xk.clone()));
            }
            if k == steps {
                break;
            }
            let g = self.grad(&xk);
            let gn = l2(&g);
            traj.grad_norm_sq.push(gn * gn);
            traj.combined_norm.push((1.0 + cfg.lambda) * gn);
            let mut combined = ParamSet::new();
            combined.insert("x", Tensor::matrix(1, d, g.iter().map(|v| (1.0 + cfg.lambda) * v).collect())?);
            state.step(&mut x, &combined)?;
        }
        Ok(traj)
    }
}
