//! Balance measurements between the encoder and adapter steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::distance::{distance_unchecked, DistanceKind};
use crate::model::{Component, Example, GenerationDistribution, InputNorms, Model, ParamSet};

/// Mean over examples of the mean over answer positions of the row distance.
pub fn sequence_distance(a: &GenerationDistribution, b: &GenerationDistribution, kind: DistanceKind) -> Result<f64> {
    if a.mask != b.mask {
        return Err(Error::contract("sequence_distance: answer masks differ"));
    }
    if a.probs.shape() != b.probs.shape() {
        return Err(Error::Shape {
            op: "sequence_distance",
            lhs: a.probs.shape().to_vec(),
            rhs: b.probs.shape().to_vec(),
        });
    }
    let w = a.mask.weights();
    Ok((0..a.rows())
        .map(|r| w[r] * distance_unchecked(a.probs.row(r), b.probs.row(r), kind))
        .sum())
}

/// Distributions after the candidate step `θ_c − lr·delta`, with the model
/// restored to its exact prior state afterwards.
pub fn candidate_distributions(
    model: &mut Model,
    batch: &[Example],
    component: Component,
    delta: &ParamSet,
    lr: f64,
) -> Result<GenerationDistribution> {
    with_candidate(model, component, delta, lr, |m| m.forward_distributions(batch, true))
}

/// Runs `f` on the model moved to `θ_c − lr·delta`, then restores `θ_c`
/// from a snapshot and checks the checksum.
pub(crate) fn with_candidate<T>(
    model: &mut Model,
    component: Component,
    delta: &ParamSet,
    lr: f64,
    f: impl FnOnce(&Model) -> Result<T>,
) -> Result<T> {
    let snapshot = model.params(component).clone();
    let before = snapshot.checksum();
    model.apply_delta(component, delta, -lr)?;
    let out = f(model);
    model.set_params(component, snapshot)?;
    if model.params(component).checksum() != before {
        return Err(Error::contract(format!("restoring {component:?} after a candidate step failed")));
    }
    out
}

/// `d[p(θ_c − lr·delta), p(θ)]` on `batch`; the model is left untouched.
pub fn component_step_distance(
    model: &mut Model,
    batch: &[Example],
    component: Component,
    delta: &ParamSet,
    lr: f64,
    kind: DistanceKind,
) -> Result<f64> {
    let base = model.forward_distributions(batch, true)?;
    let moved = candidate_distributions(model, batch, component, delta, lr)?;
    sequence_distance(&moved, &base, kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaConfig {
    pub floor: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            floor: 1e-12,
            min: 1e-3,
            max: 1e3,
        }
    }
}

impl KappaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.min > 0.0 && self.min <= 1.0 && self.max >= 1.0 && self.max.is_finite()) {
            return Err(Error::config("kappa: need floor > 0 and 0 < min <= 1 <= max < inf"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// The floor replaced the denominator.
    pub degenerate: bool,
}

pub fn compute_kappa(d_t: f64, d_s: f64, cfg: &KappaConfig) -> Result<Kappa> {
    if !(d_t >= 0.0 && d_s >= 0.0) {
        return Err(Error::contract(format!("kappa needs non-negative distances, got {d_t}, {d_s}")));
    }
    let degenerate = d_s < cfg.floor;
    let value = (d_t / d_s.max(cfg.floor)).clamp(cfg.min, cfg.max);
    Ok(Kappa { value, degenerate })
}

/// Individual learning steps `(H^S, H^T)` from precomputed batch norms.
pub fn h_from_norms(norms: &InputNorms, d_s: f64, d_t: f64) -> Result<(f64, f64)> {
    let denom_s = norms.instruction + norms.soft_tokens;
    if !(denom_s > 0.0 && norms.features > 0.0) {
        return Err(Error::contract("individual steps need non-zero input norms"));
    }
    Ok((d_s / denom_s, d_t / norms.features))
}

pub fn compute_h(model: &Model, batch: &[Example], d_s: f64, d_t: f64) -> Result<(f64, f64)> {
    h_from_norms(&model.input_norms(batch)?, d_s, d_t)
}

/// Right-hand sides `(γ(κ+1)H^S, γ(1/κ+1)H^T)`.
pub fn gradient_bounds(kappa: f64, h_s: f64, h_t: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::contract(format!("kappa must be positive, got {kappa}")));
    }
    Ok((gamma * (kappa + 1.0) * h_s, gamma * (1.0 / kappa + 1.0) * h_t))
}

/// `‖G‖ / ‖θ‖` over the concatenated parameter set.
pub fn normalized_grad_norm(grads: &ParamSet, params: &ParamSet) -> Result<f64> {
    grads.check_like(params, "normalized_grad_norm")?;
    let p = params.norm();
    if p == 0.0 {
        return Err(Error::contract("normalized gradient norm of an all-zero parameter set"));
    }
    Ok(grads.norm() / p)
}

/// One step's measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub step: u64,
    pub loss: f64,
    pub kappa: f64,
    pub kappa_ma: f64,
    pub d_t: f64,
    pub d_s: f64,
    pub d_joint: f64,
    pub h_s: f64,
    pub h_t: f64,
    pub bound_t: f64,
    pub bound_s: f64,
    pub gnorm_s: f64,
    pub gnorm_t: f64,
    pub lr_s: f64,
    pub lr_t: f64,
    pub reg_ds: f64,
    pub reg_dt: f64,
    pub eval_acc: Option<f64>,
}

impl BalanceRecord {
    /// Every numeric entry finite and the distances in range.
    pub fn check(&self) -> Result<()> {
        let vals = [
            self.loss, self.kappa, self.kappa_ma, self.d_t, self.d_s, self.d_joint, self.h_s, self.h_t,
            self.bound_t, self.bound_s, self.gnorm_s, self.gnorm_t, self.lr_s, self.lr_t, self.reg_ds,
            self.reg_dt,
        ];
        if vals.iter().any(|v| !v.is_finite()) || self.eval_acc.is_some_and(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("balance record at step {}", self.step),
            });
        }
        if self.kappa <= 0.0 {
            return Err(Error::contract("kappa must be positive"));
        }
        for d in [self.d_t, self.d_s, self.d_joint] {
            if !(0.0..=1.0 + 1e-12).contains(&d) {
                return Err(Error::contract(format!("distance {d} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_cases() {
        let c = KappaConfig::default();
        assert_eq!(compute_kappa(0.3, 0.3, &c).unwrap().value, 1.0);
        assert!((compute_kappa(0.02, 0.01, &c).unwrap().value - 2.0).abs() < 1e-15);
        let k = compute_kappa(0.5, 0.0, &c).unwrap();
        assert_eq!(k.value, 1e3);
        assert!(k.degenerate);
        let k = compute_kappa(0.0, 0.5, &c).unwrap();
        assert_eq!(k.value, 1e-3);
        assert!(!k.degenerate);
        assert!(compute_kappa(-1.0, 0.5, &c).is_err());
    }

    #[test]
    fn bounds_cases() {
        let (bt, bs) = gradient_bounds(1.0, 0.3, 0.7, 0.5).unwrap();
        assert!((bt - 2.0 * 0.5 * 0.3).abs() < 1e-15);
        assert!((bs - 2.0 * 0.5 * 0.7).abs() < 1e-15);
        let (bt, _) = gradient_bounds(2.0, 0.1, 1.0, 0.5).unwrap();
        assert!((bt - 0.15).abs() < 1e-15);
        let (_, bs) = gradient_bounds(1e12, 0.1, 1.0, 0.5).unwrap();
        assert!((bs - 0.5).abs() < 1e-9);
        assert!(matches!(gradient_bounds(1.0, 0.1, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(gradient_bounds(1.0, 0.1, 0.1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn h_homogeneity() {
        let n = InputNorms {
            instruction: 2.0,
            soft_tokens: 1.0,
            features: 4.0,
        };
        assert_eq!(h_from_norms(&n, 0.0, 0.2).unwrap().0, 0.0);
        let doubled = InputNorms { features: 8.0, ..n };
        let (_, a) = h_from_norms(&n, 0.1, 0.2).unwrap();
        let (_, b) = h_from_norms(&doubled, 0.1, 0.2).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
}
