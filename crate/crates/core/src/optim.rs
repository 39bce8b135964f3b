//! AdamW (PyTorch variant) with width-dependent learning-rate and weight-decay
//! scaling.
//!
//! Per step, for a parameter `θ` with gradient `g`:
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
//! θ ← (1 − η_t λ) θ − η_t m̂ / (√v̂ + ε)
//! ```
//!
//! The decay multiplier uses the scheduled `η_t`. When a model is widened by
//! `m`, hidden and output matrices get `η/m` and, depending on [`WdMode`],
//! `λ`, `mλ` or `√m λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Gaussian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Hidden,
    Output,
    Gain,
    Bias,
}

impl Role {
    /// Hidden and output matrices scale with width.
    pub fn is_width_scaled(self) -> bool {
        matches!(self, Role::Hidden | Role::Output)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Hidden => "hidden",
            Role::Output => "output",
            Role::Gain => "gain",
            Role::Bias => "bias",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdMode {
    /// `(η, λ) ↦ (η/m, λ)`
    Standard,
    /// `(η, λ) ↦ (η/m, mλ)`
    Independent,
    /// No weight decay at all.
    None,
    /// `(η, λ) ↦ (η/√m, √m λ)`
    Sqrt,
}

impl WdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WdMode::Standard => "standard",
            WdMode::Independent => "independent",
            WdMode::None => "none",
            WdMode::Sqrt => "sqrt",
        }
    }
}

impl std::str::FromStr for WdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(WdMode::Standard),
            "independent" => Ok(WdMode::Independent),
            "none" => Ok(WdMode::None),
            "sqrt" => Ok(WdMode::Sqrt),
            other => Err(Error::Config(format!("unknown wd_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: String,
    pub role: Role,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Width of this model relative to the base width.
    pub width_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Base learning rate of width-scaled groups, before µP scaling.
    pub eta_base: f64,
    /// Learning rate of input, gain and bias groups. Falls back to `eta_base`.
    pub eta_frozen: Option<f64>,
    pub lambda_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd_mode: WdMode,
    pub mup_lr_scaling: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta_base: 8e-3,
            eta_frozen: None,
            lambda_base: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            wd_mode: WdMode::Independent,
            mup_lr_scaling: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.eta_base > 0.0 && self.eta_base.is_finite()) {
            return bad("eta_base must be positive");
        }
        if let Some(f) = self.eta_frozen {
            if !(f > 0.0 && f.is_finite()) {
                return bad("eta_frozen must be positive");
            }
        }
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return bad("lambda_base must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }

    /// Pre-scaling learning rate of a role.
    pub fn base_lr_for(&self, role: Role) -> f64 {
        if role.is_width_scaled() {
            self.eta_base
        } else {
            self.eta_frozen.unwrap_or(self.eta_base)
        }
    }
}

/// µP-prescribed learning rate for `group` given a base rate.
pub fn mup_lr(eta_base: f64, group: &ParamGroup, config: &OptimConfig) -> f64 {
    if !config.mup_lr_scaling || !group.role.is_width_scaled() {
        return eta_base;
    }
    let m = group.width_multiplier;
    match config.wd_mode {
        WdMode::Sqrt => eta_base / m.sqrt(),
        _ => eta_base / m,
    }
}

/// Decoupled weight-decay coefficient actually used for `group`.
pub fn effective_wd(config: &OptimConfig, group: &ParamGroup) -> f64 {
    let lambda = config.lambda_base;
    if group.role == Role::Gain {
        return 0.0;
    }
    let m = group.width_multiplier;
    match config.wd_mode {
        WdMode::None => 0.0,
        WdMode::Standard => lambda,
        WdMode::Independent if group.role.is_width_scaled() => m * lambda,
        WdMode::Sqrt if group.role.is_width_scaled() => m.sqrt() * lambda,
        WdMode::Independent | WdMode::Sqrt => lambda,
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_param(theta: &Mat) -> Self {
        Self::new(theta.len())
    }
}

/// Applies one AdamW step in place and returns the gradient part of the
/// update, `−η_t m̂/(√v̂ + ε)`, which excludes the decay shrinkage.
pub fn adamw_step(
    state: &mut AdamWState,
    theta: &mut Mat,
    grad: &Mat,
    eta_t: f64,
    lambda_eff: f64,
    config: &OptimConfig,
) -> Result<Mat> {
    if theta.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "parameter {:?} vs gradient {:?}",
            theta.shape(),
            grad.shape()
        )));
    }
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::Shape(format!(
            "optimizer state of length {} for parameter of length {}",
            state.m.len(),
            theta.len()
        )));
    }
    if !(eta_t >= 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate {eta_t}")));
    }
    if let Some(pos) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {pos} at step {}",
            state.t + 1
        )));
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - eta_t * lambda_eff;

    let mut update = Mat::zeros(theta.rows(), theta.cols());
    let it = theta
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(update.data_mut());
    for (((p, &g), (m, v)), u) in it {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let step = -eta_t * m_hat / (v_hat.sqrt() + config.eps);
        *p = decay * *p + step;
        *u = step;
    }
    Ok(update)
}

/// First step at which two parameter trajectories differ.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMismatch {
    pub step: u64,
    pub max_abs_diff: f64,
}

/// Compares AdamW at `(η/m, λ_eff = mλ)` with explicit decay against the
/// trajectory obtained from `mode`'s own scaling rules for a hidden matrix of
/// width multiplier `m`, feeding both the same synthetic gradient stream.
///
/// Under [`WdMode::Independent`] the two are the same computation and agree
/// bit for bit.
pub fn independent_equivalence_check(
    eta: f64,
    lambda: f64,
    m: f64,
    mode: WdMode,
    steps: u64,
    seed: u64,
) -> std::result::Result<(), TrajectoryMismatch> {
    let config = OptimConfig {
        eta_base: eta,
        lambda_base: lambda,
        wd_mode: mode,
        ..OptimConfig::default()
    };
    let group = ParamGroup {
        id: "hidden".into(),
        role: Role::Hidden,
        fan_in: 8,
        fan_out: 4,
        width_multiplier: m,
    };
    let (rows, cols) = (group.fan_out, group.fan_in);
    let mut g = Gaussian::from_seed(seed);
    let mut init = Mat::zeros(rows, cols);
    g.fill(init.data_mut());

    let mut reference = init.clone();
    let mut scaled = init;
    let mut st_ref = AdamWState::for_param(&reference);
    let mut st_scaled = AdamWState::for_param(&scaled);
    let ref_lr = eta / m;
    let ref_wd = m * lambda;
    let lr = mup_lr(eta, &group, &config);
    let wd = effective_wd(&config, &group);

    let mut grad = Mat::zeros(rows, cols);
    for step in 1..=steps {
        g.fill(grad.data_mut());
        adamw_step(&mut st_ref, &mut reference, &grad, ref_lr, ref_wd, &config)
            .expect("finite synthetic gradient");
        adamw_step(&mut st_scaled, &mut scaled, &grad, lr, wd, &config)
            .expect("finite synthetic gradient");
        if reference != scaled {
            let max_abs_diff = reference.sub(&scaled).expect("same shape").max_abs();
            return Err(TrajectoryMismatch { step, max_abs_diff });
        }
    }
    Ok(())
}
