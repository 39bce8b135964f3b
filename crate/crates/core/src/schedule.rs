//! Learning-rate schedules and multiplicative warmup factors.
//!
//! The applied learning rate of a parameter group at step `t` is
//!
//! ```text
//! η_t = mup_lr(base, group) · base_factor(t) · warmup_factor(t)
//! ```
//!
//! Two warmup factors start at `1/m` and approach one:
//!
//! ```text
//! exp-increasing: ŝ_t = m^{min(0, t/T_W − 1)}
//! decay-away:     ŝ_t = (1 + (m² − 1) ∏_{τ<t} (1 − η_τ λ)²)^{-1/2}
//! ```
//!
//! For decay-away, `η_τ` is the learning rate that was actually applied at the
//! earlier step (including the factor itself), so the running product is
//! maintained causally by [`WarmupState`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{mup_lr, OptimConfig, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearWarmupLinearDecay,
    LinearWarmupCosine,
    /// Linear warmup, then flat. `floor` is ignored.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub peak: f64,
    pub floor: f64,
}

impl ScheduleSpec {
    pub fn constant(total_steps: u64, peak: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            total_steps,
            warmup_frac: 0.0,
            peak,
            floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("schedule total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if !(self.peak > 0.0) || !(self.floor >= 0.0) || self.floor > self.peak {
            return Err(Error::Config("schedule needs 0 <= floor <= peak, peak > 0".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }
}

/// Schedule multiplier in `[0, 1]` at step `t ∈ [0, T]`.
pub fn base_factor(spec: &ScheduleSpec, t: u64) -> Result<f64> {
    let total = spec.total_steps;
    if t > total {
        return Err(Error::StepOutOfRange { t, total });
    }
    let warm = spec.warmup_steps();
    if t < warm {
        return Ok(t as f64 / warm as f64);
    }
    let end = spec.floor / spec.peak;
    if warm == total {
        return Ok(1.0);
    }
    let progress = (t - warm) as f64 / (total - warm) as f64;
    Ok(match spec.kind {
        ScheduleKind::Constant => 1.0,
        ScheduleKind::LinearWarmupLinearDecay => end + (1.0 - end) * (1.0 - progress),
        ScheduleKind::LinearWarmupCosine => {
            end + (1.0 - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    })
}

/// Where the exp-increasing warmup clock starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupOffset {
    #[default]
    Start,
    AfterLinearWarmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarmupFactorSpec {
    None,
    ExpIncreasing {
        m: f64,
        tw: u64,
        #[serde(default)]
        offset: WarmupOffset,
    },
    DecayAway {
        m: f64,
        lambda: f64,
    },
}

impl Default for WarmupFactorSpec {
    fn default() -> Self {
        WarmupFactorSpec::None
    }
}

impl WarmupFactorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WarmupFactorSpec::None => Ok(()),
            WarmupFactorSpec::ExpIncreasing { m, tw, .. } => {
                if !(m >= 1.0) || tw == 0 {
                    return Err(Error::Config("exp_increasing needs m >= 1 and tw >= 1".into()));
                }
                Ok(())
            }
            WarmupFactorSpec::DecayAway { m, lambda } => {
                if !(m >= 1.0) || !(lambda >= 0.0) {
                    return Err(Error::Config("decay_away needs m >= 1 and lambda >= 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// `m^{min(0, t/T_W − 1)}`.
pub fn exp_increasing_factor(t: u64, tw: u64, m: f64) -> f64 {
    let remaining = 1.0 - t as f64 / tw as f64;
    if remaining <= 0.0 {
        1.0
    } else {
        1.0 / m.powf(remaining)
    }
}

/// Decay-away factor from the explicit history of applied `η_τ λ`, τ < t.
pub fn decay_away_factor(t: usize, applied_eta_lambda: &[f64], m: f64) -> Result<f64> {
    if applied_eta_lambda.len() < t {
        return Err(Error::InvalidParameter(format!(
            "history of length {} for step {t}",
            applied_eta_lambda.len()
        )));
    }
    let mut product = 1.0;
    for &el in &applied_eta_lambda[..t] {
        product *= decay_sq(el)?;
    }
    Ok(decay_away_from_product(product, m))
}

fn decay_sq(eta_lambda: f64) -> Result<f64> {
    let a = 1.0 - eta_lambda;
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::DecayMultiplier(a));
    }
    Ok(a * a)
}

fn decay_away_from_product(product: f64, m: f64) -> f64 {
    1.0 / (1.0 + (m * m - 1.0) * product).sqrt()
}

/// First step at which a decay-away factor under constant `ηλ` reaches
/// `target`.
pub fn decay_away_horizon(m: f64, eta_lambda: f64, target: f64) -> Result<u64> {
    let a2 = decay_sq(eta_lambda)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter(format!("target {target}")));
    }
    let need = (1.0 / (target * target) - 1.0) / (m * m - 1.0);
    if need >= 1.0 {
        return Ok(0);
    }
    if a2 == 1.0 {
        return Err(Error::NoEquilibrium);
    }
    Ok((need.ln() / a2.ln()).ceil() as u64)
}

/// Per-run warmup-factor state. Only decay-away carries history.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupState {
    spec: WarmupFactorSpec,
    linear_warmup_steps: u64,
    product: f64,
    steps_seen: u64,
}

impl WarmupState {
    pub fn new(spec: WarmupFactorSpec, schedule: &ScheduleSpec) -> Self {
        Self {
            spec,
            linear_warmup_steps: schedule.warmup_steps(),
            product: 1.0,
            steps_seen: 0,
        }
    }

    pub fn spec(&self) -> &WarmupFactorSpec {
        &self.spec
    }

    /// Running `∏_{τ<t} (1 − η_τ λ)²`.
    pub fn product(&self) -> f64 {
        self.product
    }

    pub fn factor(&self, t: u64) -> f64 {
        match self.spec {
            WarmupFactorSpec::None => 1.0,
            WarmupFactorSpec::ExpIncreasing { m, tw, offset } => {
                let start = match offset {
                    WarmupOffset::Start => 0,
                    WarmupOffset::AfterLinearWarmup => self.linear_warmup_steps,
                };
                exp_increasing_factor(t.saturating_sub(start), tw, m)
            }
            WarmupFactorSpec::DecayAway { m, .. } => decay_away_from_product(self.product, m),
        }
    }

    /// Records the learning rate applied at the step just taken.
    pub fn advance(&mut self, applied_eta: f64) -> Result<()> {
        if let WarmupFactorSpec::DecayAway { lambda, .. } = self.spec {
            self.product *= decay_sq(applied_eta * lambda)?;
        }
        self.steps_seen += 1;
        Ok(())
    }
}

/// Applied learning rate of `group` at step `t`.
pub fn lr_at(
    t: u64,
    group: &ParamGroup,
    optim: &OptimConfig,
    schedule: &ScheduleSpec,
    warmup: &WarmupState,
) -> Result<f64> {
    let base = mup_lr(optim.base_lr_for(group.role), group, optim);
    Ok(base * base_factor(schedule, t)? * warmup.factor(t))
}
