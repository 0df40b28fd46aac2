//! Update rules: plain SGD, the β₁ = 0 Adam variant, and the regularized
//! two-component step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::balance::{h_from_norms, with_candidate};
use crate::metrics::{
    compute_kappa, gradient_bounds, normalized_grad_norm, sequence_distance, BalanceRecord, DistanceKind, KappaConfig,
};
use crate::model::{Component, Example, ForwardOptions, GenerationDistribution, Model, ParamSet};
use crate::schedulers::Rates;

pub const ADAM_EPS: f64 = 1e-8;

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr)
}

/// `α_k = α·√((1−β₂^k)/(1−β₂))`, with the ratio read as `k` at `β₂ = 1`.
pub fn adam_step_size(alpha: f64, beta2: f64, k: u64) -> f64 {
    if beta2 == 1.0 {
        alpha * (k as f64).sqrt()
    } else {
        alpha * ((1.0 - beta2.powf(k as f64)) / (1.0 - beta2)).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub v: ParamSet,
    pub k: u64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha: f64,
}

impl AdamState {
    pub fn new(like: &ParamSet, beta2: f64, alpha: f64) -> Result<Self> {
        if !(beta2 > 0.0 && beta2 <= 1.0) {
            return Err(Error::config(format!("beta2 must lie in (0, 1], got {beta2}")));
        }
        Ok(Self {
            v: like.zeros_like(),
            k: 0,
            beta2,
            eps: ADAM_EPS,
            alpha,
        })
    }

    /// `v ← β₂v + ĝ²`, `x ← x − α_k ĝ/√(v + ε)`. Returns the applied delta.
    pub fn step(&mut self, params: &mut ParamSet, g: &ParamSet) -> Result<ParamSet> {
        params.check_like(g, "adam_step")?;
        self.v.check_like(g, "adam_step")?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "adam_step gradient".into(),
            });
        }
        self.k += 1;
        let ak = adam_step_size(self.alpha, self.beta2, self.k);
        let mut delta = g.zeros_like();
        let it = params.iter_mut().zip(self.v.iter_mut()).zip(g.iter()).zip(delta.iter_mut());
        for ((((_, x), (_, v)), (_, g)), (_, d)) in it {
            for (((x, v), g), d) in x.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(d.data_mut()) {
                *v = self.beta2 * *v + g * g;
                *d = -ak * g / (*v + self.eps).sqrt();
                *x += *d;
            }
        }
        Ok(delta)
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, g: &ParamSet) -> Result<ParamSet> {
    state.step(params, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub kind: DistanceKind,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 1.0,
            kind: DistanceKind::SqrtJensenShannon,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Sgd,
    #[default]
    Adam,
}

/// How the candidate steps behind `κ_t` are sized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaStep {
    /// Each component's current scheduler rate.
    #[default]
    LrScaled,
    /// One fixed probe rate for both components.
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub reg: RegularizerConfig,
    pub backend: Backend,
    pub beta2: f64,
    /// Distance used for `κ_t`, `H` and the logged step distances.
    pub metric: DistanceKind,
    pub kappa: KappaConfig,
    pub gamma: f64,
    pub kappa_step: KappaStep,
    pub probe_lr: f64,
    /// Extra forward at the jointly stepped point for the triangle check.
    pub joint_diagnostics: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            reg: RegularizerConfig::default(),
            backend: Backend::default(),
            beta2: 0.999,
            metric: DistanceKind::TotalVariation,
            kappa: KappaConfig::default(),
            gamma: 0.5,
            kappa_step: KappaStep::LrScaled,
            probe_lr: 1e-4,
            joint_diagnostics: true,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        self.kappa.validate()?;
        if !self.reg.lambda.is_finite() || self.reg.lambda < 0.0 {
            return Err(Error::config("regularizer lambda must be finite and >= 0"));
        }
        if !(self.beta2 > 0.0 && self.beta2 <= 1.0) {
            return Err(Error::config(format!("beta2 must lie in (0, 1], got {}", self.beta2)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(Error::config("probe_lr must be positive"));
        }
        Ok(())
    }
}

/// Output of one look-ahead probe.
#[derive(Clone, Debug)]
pub struct Lookahead {
    /// `∇ d̄` at the candidate point.
    pub grad: ParamSet,
    /// Mean sequence distance between the detached current distributions and
    /// those at the candidate point.
    pub distance: f64,
    /// Distributions at the candidate point.
    pub moved: GenerationDistribution,
}

/// Look-ahead probe against precomputed current distributions `base`.
pub fn lookahead_from(
    model: &mut Model,
    batch: &[Example],
    base: &GenerationDistribution,
    component: Component,
    base_grad: &ParamSet,
    lr: f64,
    kind: DistanceKind,
) -> Result<Lookahead> {
    with_candidate(model, component, base_grad, lr, |m| {
        let mut fwd = m.forward(
            batch,
            ForwardOptions {
                track: &[component],
                ..Default::default()
            },
        )?;
        if fwd.mask != base.mask {
            return Err(Error::contract("look-ahead batch differs from the base batch"));
        }
        let rows = fwd.graph.row_distance(fwd.probs, &base.probs, kind)?;
        let mean = fwd.graph.weighted_sum(rows, &base.mask.weights())?;
        let distance = fwd.graph.value(mean).data()[0];
        let grad = fwd.grads_for(m, component, mean)?;
        Ok(Lookahead {
            grad,
            distance,
            moved: fwd.distributions(),
        })
    })
}

/// Gradient of the mean distribution change caused by the candidate step
/// `θ − lr·base_grad` on `component`, evaluated at the candidate point.
pub fn lookahead_regularizer_grad(
    model: &mut Model,
    batch: &[Example],
    component: Component,
    base_grad: &ParamSet,
    lr: f64,
    kind: DistanceKind,
) -> Result<Lookahead> {
    let base = model.forward_distributions(batch, true)?;
    lookahead_from(model, batch, &base, component, base_grad, lr, kind)
}

/// Triangle decomposition of the joint step, both readings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleCheck {
    pub d_joint: f64,
    /// Encoder step taken after the adapter step.
    pub d_s_after_t: f64,
    /// `d_joint ≤ d_T + d_S_after_T`, the literal metric inequality.
    pub literal_ok: bool,
    /// `d_joint ≤ d_T + d_S` with both terms at the current point.
    pub same_point_ok: bool,
}

/// Everything a coordinated step computed, in encoder/adapter order.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: BalanceRecord,
    pub kappa_degenerate: bool,
    pub loss_grads: [ParamSet; 2],
    pub reg_grads: Option<[ParamSet; 2]>,
    pub combined: [ParamSet; 2],
    /// Applied parameter changes (zero when not applied).
    pub deltas: [ParamSet; 2],
    pub update_norms: [f64; 2],
    pub triangle: Option<TriangleCheck>,
    /// Forwards and backwards of the step proper.
    pub ops: (u64, u64),
    /// Forwards spent on diagnostics only.
    pub diagnostic_forwards: u64,
}

const ORDER: [Component; 2] = [Component::Encoder, Component::Adapter];

/// Optimizer state for both trainable components.
#[derive(Clone, Debug)]
pub struct CommitOptimizer {
    pub config: StepConfig,
    adam: Option<[AdamState; 2]>,
}

impl CommitOptimizer {
    pub fn new(model: &Model, config: StepConfig) -> Result<Self> {
        config.validate()?;
        let adam = match config.backend {
            Backend::Sgd => None,
            Backend::Adam => Some([
                AdamState::new(model.params(Component::Encoder), config.beta2, 0.0)?,
                AdamState::new(model.params(Component::Adapter), config.beta2, 0.0)?,
            ]),
        };
        Ok(Self { config, adam })
    }

    pub fn adam(&self, c: Component) -> Option<&AdamState> {
        let i = ORDER.iter().position(|x| *x == c)?;
        self.adam.as_ref().map(|a| &a[i])
    }

    /// Measures the balance quantities at the current point and, when
    /// `apply`, updates both components. A component with rate 0 is left
    /// untouched, optimizer state included.
    pub fn step(
        &mut self,
        model: &mut Model,
        batch: &[Example],
        rates: Rates,
        step: u64,
        apply: bool,
    ) -> Result<StepReport> {
        let cfg = self.config.clone();
        if !(rates.lr_s >= 0.0 && rates.lr_t >= 0.0 && rates.lr_s.is_finite() && rates.lr_t.is_finite()) {
            return Err(Error::config(format!("invalid rates {rates:?}")));
        }
        let ops_before = model.counters.snapshot();
        let mut diagnostic_forwards = 0;

        let mut fwd = model.forward(
            batch,
            ForwardOptions {
                track: &ORDER,
                ..Default::default()
            },
        )?;
        let loss_var = fwd.loss()?;
        let loss = fwd.graph.value(loss_var).data()[0];
        let base = fwd.distributions();
        let mut grads = fwd.grads(model, &ORDER, loss_var)?;
        drop(fwd);
        let loss_grads: [ParamSet; 2] = [std::mem::take(&mut grads[0]), std::mem::take(&mut grads[1])];

        // candidate steps: one per component, shared by the regularizer and κ
        let mut dist = [0.0; 2];
        let mut reg_d = [0.0; 2];
        let mut reg_grads = Vec::new();
        let mut moved = Vec::with_capacity(2);
        for (i, &c) in ORDER.iter().enumerate() {
            let lr = rates.get(c);
            let probe = match cfg.kappa_step {
                KappaStep::LrScaled => lr,
                KappaStep::Probe => cfg.probe_lr,
            };
            let measured = if cfg.reg.enabled {
                let la = lookahead_from(model, batch, &base, c, &loss_grads[i], lr, cfg.reg.kind)?;
                reg_d[i] = la.distance;
                reg_grads.push(la.grad);
                if probe == lr {
                    la.moved
                } else {
                    diagnostic_forwards += 1;
                    with_candidate(model, c, &loss_grads[i], probe, |m| m.forward_distributions(batch, true))?
                }
            } else {
                if probe != lr {
                    diagnostic_forwards += 1;
                }
                with_candidate(model, c, &loss_grads[i], probe, |m| m.forward_distributions(batch, true))?
            };
            dist[i] = sequence_distance(&measured, &base, cfg.metric)?;
            moved.push(measured);
        }
        let [d_s, d_t] = dist;
        let kappa = compute_kappa(d_t, d_s, &cfg.kappa)?;

        let triangle = if cfg.joint_diagnostics {
            diagnostic_forwards += 1;
            let probe_rate = |c: Component| match cfg.kappa_step {
                KappaStep::LrScaled => rates.get(c),
                KappaStep::Probe => cfg.probe_lr,
            };
            let snap_s = model.params(Component::Encoder).clone();
            let snap_t = model.params(Component::Adapter).clone();
            model.apply_delta(Component::Adapter, &loss_grads[1], -probe_rate(Component::Adapter))?;
            model.apply_delta(Component::Encoder, &loss_grads[0], -probe_rate(Component::Encoder))?;
            let joint = model.forward_distributions(batch, true);
            model.set_params(Component::Encoder, snap_s)?;
            model.set_params(Component::Adapter, snap_t)?;
            let joint = joint?;
            let d_joint = sequence_distance(&joint, &base, cfg.metric)?;
            let d_s_after_t = sequence_distance(&joint, &moved[1], cfg.metric)?;
            Some(TriangleCheck {
                d_joint,
                d_s_after_t,
                literal_ok: d_joint <= d_t + d_s_after_t + 1e-9,
                same_point_ok: d_joint <= d_t + d_s + 1e-9,
            })
        } else {
            None
        };

        let norms = model.input_norms(batch)?;
        let (h_s, h_t) = h_from_norms(&norms, d_s, d_t)?;
        let (bound_t, bound_s) = gradient_bounds(kappa.value, h_s, h_t, cfg.gamma)?;
        let gnorm_s = normalized_grad_norm(&loss_grads[0], model.params(Component::Encoder))?;
        let gnorm_t = normalized_grad_norm(&loss_grads[1], model.params(Component::Adapter))?;

        let reg_grads: Option<[ParamSet; 2]> = reg_grads.try_into().ok();
        let combined: [ParamSet; 2] = match (&reg_grads, cfg.reg.lambda) {
            (Some(r), lambda) if lambda != 0.0 => {
                let mut out = loss_grads.clone();
                for i in 0..2 {
                    out[i].add_scaled(&r[i], -lambda)?;
                }
                out
            }
            _ => loss_grads.clone(),
        };
        for (i, g) in combined.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("combined gradient of {:?} at step {step}", ORDER[i]),
                });
            }
        }

        let mut deltas = [combined[0].zeros_like(), combined[1].zeros_like()];
        let mut update_norms = [0.0; 2];
        if apply {
            for (i, &c) in ORDER.iter().enumerate() {
                let lr = rates.get(c);
                if lr == 0.0 {
                    continue;
                }
                match &mut self.adam {
                    None => {
                        sgd_step(model.trainable_mut(c)?, &combined[i], lr)?;
                        deltas[i] = combined[i].scaled(-lr);
                        update_norms[i] = lr * combined[i].norm();
                    }
                    Some(states) => {
                        states[i].alpha = lr;
                        deltas[i] = states[i].step(model.trainable_mut(c)?, &combined[i])?;
                        update_norms[i] = deltas[i].norm();
                    }
                }
                if !model.params(c).is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("{c:?} update at step {step}"),
                    });
                }
            }
        }

        let ops_after = model.counters.snapshot();
        let ops = (
            ops_after.0 - ops_before.0 - diagnostic_forwards,
            ops_after.1 - ops_before.1,
        );
        let record = BalanceRecord {
            step,
            loss,
            kappa: kappa.value,
            kappa_ma: kappa.value,
            d_t,
            d_s,
            d_joint: triangle.map_or(0.0, |t| t.d_joint),
            h_s,
            h_t,
            bound_t,
            bound_s,
            gnorm_s,
            gnorm_t,
            lr_s: rates.lr_s,
            lr_t: rates.lr_t,
            reg_ds: reg_d[0],
            reg_dt: reg_d[1],
            eval_acc: None,
        };
        Ok(StepReport {
            record,
            kappa_degenerate: kappa.degenerate,
            loss_grads,
            reg_grads,
            combined,
            deltas,
            update_norms,
            triangle,
            ops,
            diagnostic_forwards,
        })
    }
}

/// One applied coordinated step with fresh optimizer state.
pub fn commit_step(
    model: &mut Model,
    batch: &[Example],
    rates: Rates,
    config: &StepConfig,
) -> Result<StepReport> {
    CommitOptimizer::new(model, config.clone())?.step(model, batch, rates, 0, true)
}

/// The plain trainer: one forward, one backward, an SGD step on both
/// trainable components. Returns the loss before the step.
pub fn plain_sgd_step(model: &mut Model, batch: &[Example], rates: Rates) -> Result<f64> {
    let mut fwd = model.forward(
        batch,
        ForwardOptions {
            track: &ORDER,
            ..Default::default()
        },
    )?;
    let l = fwd.loss()?;
    let loss = fwd.graph.value(l).data()[0];
    let grads = fwd.grads(model, &ORDER, l)?;
    for (g, c) in grads.iter().zip(ORDER) {
        sgd_step(model.trainable_mut(c)?, g, rates.get(c))?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(1, vals.len(), vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn sgd_cases() {
        let mut p = set(&[1.0, -2.0]);
        sgd_step(&mut p, &set(&[5.0, 5.0]), 0.0).unwrap();
        assert_eq!(p, set(&[1.0, -2.0]));
        let g = p.clone();
        sgd_step(&mut p, &g, 1.0).unwrap();
        assert_eq!(p, set(&[0.0, 0.0]));
        let mut a = set(&[0.3, 0.7]);
        let mut b = a.clone();
        let g = set(&[0.25, -0.5]);
        sgd_step(&mut a, &g, 0.5).unwrap();
        sgd_step(&mut a, &g, 0.5).unwrap();
        sgd_step(&mut b, &g, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step() {
        for beta2 in [0.5, 0.9, 0.999, 1.0] {
            assert!((adam_step_size(0.1, beta2, 1) - 0.1).abs() < 1e-15);
            let mut st = AdamState::new(&set(&[0.0, 0.0]), beta2, 0.1).unwrap();
            let mut p = set(&[1.0, 1.0]);
            st.step(&mut p, &set(&[0.5, -2.0])).unwrap();
            assert_eq!(st.v, set(&[0.25, 4.0]));
            assert_eq!(st.k, 1);
        }
        assert!(AdamState::new(&set(&[0.0]), 0.0, 0.1).is_err());
        assert!(AdamState::new(&set(&[0.0]), 1.5, 0.1).is_err());
    }

    #[test]
    fn adam_step_size_law() {
        let mut prev = 0.0;
        for k in 1..200 {
            let a = adam_step_size(1.0, 0.9, k);
            assert!(a > prev);
            assert!(a < 1.0 / (0.1f64).sqrt());
            prev = a;
        }
        assert!((adam_step_size(2.0, 1.0, 9) - 6.0).abs() < 1e-15);
    }
}
