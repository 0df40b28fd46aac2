//! Metrics on categorical distributions.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1` accepted by the checked entry points.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// `½ Σ |pᵢ − qᵢ|`.
    #[default]
    TotalVariation,
    /// Square root of the base-2 Jensen-Shannon divergence.
    SqrtJensenShannon,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" | "total-variation" => Ok(Self::TotalVariation),
            "sqrt-js" | "sqrt-jensen-shannon" => Ok(Self::SqrtJensenShannon),
            other => Err(Error::config(format!("unknown distance kind `{other}`"))),
        }
    }
}

fn check_categorical(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::contract(format!("{name} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::contract(format!("{name} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Distance between two categorical distributions, validating both inputs.
pub fn distribution_distance(p: &[f64], q: &[f64], kind: DistanceKind) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "distribution_distance",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_categorical(p, "p")?;
    check_categorical(q, "q")?;
    Ok(distance_unchecked(p, q, kind))
}

pub(crate) fn distance_unchecked(p: &[f64], q: &[f64], kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::TotalVariation => {
            0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
        }
        DistanceKind::SqrtJensenShannon => js_divergence(p, q).sqrt(),
    }
}

/// Base-2 Jensen-Shannon divergence, clamped at zero against rounding.
pub(crate) fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let s = a + b;
        if s <= 0.0 {
            continue;
        }
        // log(a / m) = log1p((a - b) / (a + b)); accurate when a ≈ b.
        let r = (a - b) / s;
        if a > 0.0 {
            acc += a * r.ln_1p();
        }
        if b > 0.0 {
            acc += b * (-r).ln_1p();
        }
    }
    (0.5 * acc / LN_2).max(0.0)
}

/// Gradient of `d(p, q)` with respect to `q`, holding `p` fixed.
///
/// At coincident inputs both kinds are non-differentiable; the zero vector is
/// returned there.
pub(crate) fn distance_grad_q(p: &[f64], q: &[f64], kind: DistanceKind, out: &mut [f64]) {
    match kind {
        DistanceKind::TotalVariation => {
            for ((o, &a), &b) in out.iter_mut().zip(p).zip(q) {
                *o = if b > a {
                    0.5
                } else if b < a {
                    -0.5
                } else {
                    0.0
                };
            }
        }
        DistanceKind::SqrtJensenShannon => {
            let js = js_divergence(p, q);
            if js <= 0.0 {
                out.iter_mut().for_each(|o| *o = 0.0);
                return;
            }
            // d JS / d q_i = ½ log2(q_i / m_i)
            let scale = 1.0 / (2.0 * js.sqrt());
            for ((o, &a), &b) in out.iter_mut().zip(p).zip(q) {
                let s = a + b;
                *o = if b > 0.0 && s > 0.0 {
                    let log_q_over_m = ((b - a) / s).ln_1p();
                    scale * 0.5 * log_q_over_m / LN_2
                } else {
                    0.0
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DistanceKind::*;

    #[test]
    fn hand_values() {
        assert_eq!(distribution_distance(&[1.0, 0.0], &[0.0, 1.0], TotalVariation).unwrap(), 1.0);
        let tv = distribution_distance(&[0.5, 0.5], &[0.75, 0.25], TotalVariation).unwrap();
        assert!((tv - 0.25).abs() < 1e-15);
        let js = distribution_distance(&[1.0, 0.0], &[0.0, 1.0], SqrtJensenShannon).unwrap();
        assert!((js - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_is_zero() {
        let p = [0.1, 0.2, 0.3, 0.4];
        for kind in [TotalVariation, SqrtJensenShannon] {
            assert_eq!(distribution_distance(&p, &p, kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(distribution_distance(&[0.5, 0.4], &[0.5, 0.5], TotalVariation).is_err());
        assert!(distribution_distance(&[0.5, 0.5], &[1.0], TotalVariation).is_err());
    }

    #[test]
    fn js_matches_textbook_formula() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
        let kl = |x: &[f64]| -> f64 {
            x.iter().zip(&m).map(|(a, b)| if *a > 0.0 { a * (a / b).log2() } else { 0.0 }).sum()
        };
        let want = (0.5 * kl(&p) + 0.5 * kl(&q)).sqrt();
        let got = distribution_distance(&p, &q, SqrtJensenShannon).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn js_gradient_matches_differences() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.25, 0.45, 0.3];
        let mut g = [0.0; 3];
        distance_grad_q(&p, &q, SqrtJensenShannon, &mut g);
        let h = 1e-7;
        for i in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (distance_unchecked(&p, &qp, SqrtJensenShannon)
                - distance_unchecked(&p, &qm, SqrtJensenShannon))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }
}
