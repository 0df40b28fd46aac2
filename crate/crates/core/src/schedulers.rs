//! Learning-rate strategies for the two trainable components.
//!
//! The coordinated strategy tracks a moving average `κ̃` of the balance
//! coefficient and periodically splits a fixed budget `α/γ` between the
//! components, giving the faster-moving one the smaller share.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::KappaConfig;
use crate::model::Component;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Both components at the base rate ("synced").
    Constant,
    /// Adapter rate raised.
    LanguageUp,
    /// Encoder rate raised.
    VisionUp,
    /// Encoder first, adapter frozen, swapping on stabilization.
    FeatureCd,
    /// Adapter first.
    LanguageCd,
    Coordinated,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" | "synced" => Ok(Self::Constant),
            "language-up" => Ok(Self::LanguageUp),
            "vision-up" => Ok(Self::VisionUp),
            "feature-cd" => Ok(Self::FeatureCd),
            "language-cd" => Ok(Self::LanguageCd),
            "coordinated" => Ok(Self::Coordinated),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// When a measured `κ_t` enters the moving-average buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaFeed {
    #[default]
    EveryStep,
    /// Only measurements taken at refresh steps.
    RefreshOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub strategy: Strategy,
    pub n_kappa: usize,
    pub l_lr: u64,
    pub alpha: f64,
    pub gamma: f64,
    /// Encoder rate of the fixed strategies, and the warm-up rate.
    pub lr_s: f64,
    /// Adapter rate of the fixed strategies, and the warm-up rate.
    pub lr_t: f64,
    /// Raised rate of the up-strategies.
    pub up_lr: f64,
    pub cd_threshold: f64,
    pub cd_patience: u32,
    pub feed: KappaFeed,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Constant,
            n_kappa: 8,
            l_lr: 10,
            alpha: 1e-4,
            gamma: 0.5,
            lr_s: 1e-4,
            lr_t: 1e-4,
            up_lr: 1e-3,
            cd_threshold: 1e-6,
            cd_patience: 20,
            feed: KappaFeed::EveryStep,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kappa == 0 || self.l_lr == 0 {
            return Err(Error::config("scheduler: n_kappa and l_lr must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("scheduler: gamma must lie in (0, 1), got {}", self.gamma)));
        }
        for (name, v) in [("alpha", self.alpha), ("lr_s", self.lr_s), ("lr_t", self.lr_t), ("up_lr", self.up_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("scheduler: {name} must be positive and finite")));
            }
        }
        if !(self.cd_threshold >= 0.0) || self.cd_patience == 0 {
            return Err(Error::config("scheduler: invalid coordinate-descent switch rule"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub lr_s: f64,
    pub lr_t: f64,
}

impl Rates {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Encoder => self.lr_s,
            Component::Adapter => self.lr_t,
            Component::Backbone => 0.0,
        }
    }
}

/// `(β^T, β^S) = (α / (γ(κ̃+1)), α / (γ(1/κ̃+1)))`.
pub fn coordinated_rates(kappa_ma: f64, alpha: f64, gamma: f64, bounds: &KappaConfig) -> Result<(f64, f64)> {
    if !(kappa_ma >= bounds.min && kappa_ma <= bounds.max) {
        return Err(Error::config(format!(
            "kappa_ma {kappa_ma} outside [{}, {}]",
            bounds.min, bounds.max
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be positive, got {alpha}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    Ok((alpha / (gamma * (kappa_ma + 1.0)), alpha / (gamma * (1.0 / kappa_ma + 1.0))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Refresh {
        step: u64,
        lr_s: f64,
        lr_t: f64,
        kappa_ma: f64,
        warmup: bool,
    },
    CdSwitch {
        step: u64,
        active: Component,
    },
}

#[derive(Clone, Debug)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    bounds: KappaConfig,
    buffer: VecDeque<f64>,
    kappa_ma: f64,
    rates: Rates,
    cd_active: Component,
    cd_calm: u32,
    pub events: Vec<Event>,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig, bounds: KappaConfig) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let cd_active = match config.strategy {
            Strategy::LanguageCd => Component::Adapter,
            _ => Component::Encoder,
        };
        let mut s = Self {
            buffer: VecDeque::with_capacity(config.n_kappa),
            kappa_ma: 1.0,
            rates: Rates {
                lr_s: config.lr_s,
                lr_t: config.lr_t,
            },
            cd_active,
            cd_calm: 0,
            events: Vec::new(),
            config,
            bounds,
        };
        s.rates = s.fixed_rates();
        Ok(s)
    }

    fn fixed_rates(&self) -> Rates {
        let c = &self.config;
        let (lr_s, lr_t, up) = (c.lr_s, c.lr_t, c.up_lr);
        match c.strategy {
            Strategy::Constant | Strategy::Coordinated => Rates { lr_s, lr_t },
            Strategy::LanguageUp => Rates { lr_s, lr_t: up },
            Strategy::VisionUp => Rates { lr_s: up, lr_t },
            Strategy::FeatureCd | Strategy::LanguageCd => match self.cd_active {
                Component::Adapter => Rates { lr_s: 0.0, lr_t },
                _ => Rates { lr_s, lr_t: 0.0 },
            },
        }
    }

    pub fn kappa_ma(&self) -> f64 {
        self.kappa_ma
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn current(&self) -> Rates {
        self.rates
    }

    /// Pushes `κ_t` and returns the moving average over the buffer.
    pub fn update_kappa_ma(&mut self, kappa: f64) -> Result<f64> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::contract(format!("kappa must be positive and finite, got {kappa}")));
        }
        if self.buffer.len() == self.config.n_kappa {
            self.buffer.pop_front();
        }
        self.buffer.push_back(kappa);
        self.kappa_ma = self.buffer.iter().sum::<f64>() / self.buffer.len() as f64;
        Ok(self.kappa_ma)
    }

    /// Rates for `step`, refreshing them first where the strategy says so.
    pub fn rates_for(&mut self, step: u64) -> Result<Rates> {
        if self.config.strategy == Strategy::Coordinated && step % self.config.l_lr == 0 {
            let ready = self.buffer.len() == self.config.n_kappa && step >= self.config.l_lr;
            self.rates = if ready {
                let (lr_t, lr_s) = coordinated_rates(self.kappa_ma, self.config.alpha, self.config.gamma, &self.bounds)?;
                Rates { lr_s, lr_t }
            } else {
                self.fixed_rates()
            };
            self.events.push(Event::Refresh {
                step,
                lr_s: self.rates.lr_s,
                lr_t: self.rates.lr_t,
                kappa_ma: self.kappa_ma,
                warmup: !ready,
            });
        }
        Ok(self.rates)
    }

    /// Feeds the measurements of `step` back: `κ_t` and the norms of the
    /// parameter updates actually applied. Returns `κ̃` after the push.
    pub fn observe(&mut self, step: u64, kappa: f64, update_s: f64, update_t: f64) -> Result<f64> {
        let feed = match self.config.feed {
            KappaFeed::EveryStep => true,
            KappaFeed::RefreshOnly => step % self.config.l_lr == 0,
        };
        if feed {
            self.update_kappa_ma(kappa)?;
        }
        if matches!(self.config.strategy, Strategy::FeatureCd | Strategy::LanguageCd) {
            let norm = match self.cd_active {
                Component::Adapter => update_t,
                _ => update_s,
            };
            if norm < self.config.cd_threshold {
                self.cd_calm += 1;
            } else {
                self.cd_calm = 0;
            }
            if self.cd_calm >= self.config.cd_patience {
                self.cd_active = match self.cd_active {
                    Component::Encoder => Component::Adapter,
                    _ => Component::Encoder,
                };
                self.cd_calm = 0;
                self.rates = self.fixed_rates();
                self.events.push(Event::CdSwitch {
                    step,
                    active: self.cd_active,
                });
            }
        }
        Ok(self.kappa_ma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(strategy: Strategy) -> SchedulerState {
        SchedulerState::new(
            SchedulerConfig {
                strategy,
                ..Default::default()
            },
            KappaConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn moving_average_small_window() {
        let mut s = SchedulerState::new(
            SchedulerConfig {
                n_kappa: 2,
                ..Default::default()
            },
            KappaConfig::default(),
        )
        .unwrap();
        assert_eq!(s.update_kappa_ma(1.0).unwrap(), 1.0);
        assert_eq!(s.update_kappa_ma(3.0).unwrap(), 2.0);
        assert_eq!(s.update_kappa_ma(5.0).unwrap(), 4.0);
        assert_eq!(s.buffer_len(), 2);
    }

    #[test]
    fn coordinated_formula_cases() {
        let b = KappaConfig::default();
        let (t, s) = coordinated_rates(1.0, 1e-4, 0.5, &b).unwrap();
        assert!((t - 1e-4).abs() < 1e-18 && (s - 1e-4).abs() < 1e-18);
        let (t, s) = coordinated_rates(3.0, 1e-4, 0.5, &b).unwrap();
        assert!((t - 5e-5).abs() < 1e-18 && (s - 1.5e-4).abs() < 1e-18);
        assert!(coordinated_rates(0.0, 1e-4, 0.5, &b).is_err());
        assert!(coordinated_rates(1.0, 1e-4, 1.5, &b).is_err());
    }

    #[test]
    fn fixed_strategies() {
        assert_eq!(state(Strategy::Constant).rates_for(7).unwrap(), Rates { lr_s: 1e-4, lr_t: 1e-4 });
        assert_eq!(state(Strategy::LanguageUp).rates_for(0).unwrap().lr_t, 1e-3);
        assert_eq!(state(Strategy::VisionUp).rates_for(0).unwrap().lr_s, 1e-3);
    }

    #[test]
    fn coordinated_refreshes_on_period_after_warmup() {
        let mut s = state(Strategy::Coordinated);
        let mut prev = s.rates_for(0).unwrap();
        for step in 0..60u64 {
            let r = s.rates_for(step).unwrap();
            if step % 10 != 0 {
                assert_eq!(r, prev);
            }
            if step < 10 {
                assert_eq!(r, Rates { lr_s: 1e-4, lr_t: 1e-4 });
            }
            prev = r;
            s.observe(step, 2.0 + (step % 3) as f64, 1.0, 1.0).unwrap();
        }
        let refreshes = s.events.iter().filter(|e| matches!(e, Event::Refresh { warmup: false, .. })).count();
        assert_eq!(refreshes, 5);
        assert!(prev.lr_s > prev.lr_t);
    }

    #[test]
    fn cd_switches_after_patience() {
        let mut s = state(Strategy::FeatureCd);
        assert_eq!(s.rates_for(0).unwrap().lr_t, 0.0);
        for step in 0..19 {
            s.observe(step, 1.0, 1e-7, 0.0).unwrap();
        }
        assert_eq!(s.current().lr_t, 0.0);
        s.observe(19, 1.0, 1e-7, 0.0).unwrap();
        assert_eq!(s.current(), Rates { lr_s: 0.0, lr_t: 1e-4 });
        let mut s = state(Strategy::LanguageCd);
        assert_eq!(s.rates_for(0).unwrap().lr_s, 0.0);
        s.observe(0, 1.0, 0.0, 1e-7).unwrap();
        s.observe(1, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(s.current().lr_s, 0.0);
    }
}
