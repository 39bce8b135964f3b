//! Closed-form models of update alignment and weight-norm dynamics, with the
//! Monte-Carlo and rollout procedures that check them.
//!
//! # Single-neuron noise model
//!
//! A neuron with fan-in `C` sees a batch of `B` inputs
//! `x_b = (x̃_b + √φ · s / y'_b) / √(1 + φ)` with `x̃_b, s ~ N(0, I_C)` and
//! output gradients `y'_b = ±1`. Plain gradient descent gives
//! `Δw = −η/B Σ_b y'_b x_b`, whose update alignment is predicted from the
//! ratio of square expectations.
//!
//! # Weight-norm recurrence
//!
//! With updates orthogonal to the weights and unit elementwise update RMS
//! (scaled by `b`), the weight RMS `ρ` follows
//! `ρ²_{t+1} = (1 − η_t λ)² ρ²_t + b² η²_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metrics::frob_norm;
use crate::optim::{adamw_step, AdamWState, OptimConfig};
use crate::rng::{derive_seed, Gaussian, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelParams {
    /// Fan-in `C`.
    pub c: usize,
    /// Batch size `B`.
    pub b: usize,
    /// Signal-to-noise ratio `φ`.
    pub phi: f64,
}

impl NoiseModelParams {
    pub fn new(c: usize, b: usize, phi: f64) -> Self {
        Self { c, b, phi }
    }

    fn validate(&self) -> Result<()> {
        if self.c == 0 || self.b == 0 {
            return Err(Error::InvalidParameter("C and B must be at least 1".into()));
        }
        if !(self.phi >= 0.0) {
            return Err(Error::InvalidParameter(format!("phi = {}", self.phi)));
        }
        Ok(())
    }
}

/// Ratio-of-square-expectations prediction of `E[α_ΔW]`. Reported as is, so
/// it can exceed one (e.g. `√((C+2)/C)` at `B = 1`).
pub fn predict_update_alignment(p: &NoiseModelParams) -> f64 {
    let c = p.c as f64;
    let b = p.b as f64;
    let phi = p.phi;
    let numerator = (c + 2.0)
        + (b - 1.0)
        + (1.0 + b).powi(2) * phi
        + phi * (b - 1.0)
        + b * b * phi * phi * (c + 2.0)
        + 2.0 * b * phi * c;
    let denominator = (1.0 + b * phi) * (1.0 + phi) * c * b;
    (numerator / denominator).sqrt()
}

/// `√(1/C + 1/B + φ/(1 + φ))`.
pub fn approx_update_alignment(p: &NoiseModelParams) -> f64 {
    let signal = if p.phi.is_infinite() {
        1.0
    } else {
        p.phi / (1.0 + p.phi)
    };
    (1.0 / p.c as f64 + 1.0 / p.b as f64 + signal).sqrt()
}

/// Monte-Carlo estimate of the update alignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    /// `√(E‖Δwᵀ X‖² / (E‖Δw‖² E‖X‖²))` over the same samples, i.e. the
    /// quantity the closed-form prediction targets.
    pub moment_ratio: f64,
}

struct TrialSample {
    alignment: f64,
    out_sq: f64,
    update_sq: f64,
    input_sq: f64,
}

/// One draw of the noise model. Inputs are stored sample-major (`B` rows of
/// length `C`); `signs` holds the `y'_b`.
struct NoiseDraw {
    inputs: Vec<f64>,
    signs: Vec<f64>,
}

fn draw_noise_model(p: &NoiseModelParams, seed: u64) -> NoiseDraw {
    let mut g = Gaussian::from_seed(seed);
    let (c, b) = (p.c, p.b);
    let mut signal = vec![0.0; c];
    g.fill(&mut signal);
    let signs: Vec<f64> = (0..b).map(|_| g.sign()).collect();
    let mut inputs = vec![0.0; b * c];
    g.fill(&mut inputs);
    if p.phi > 0.0 {
        let sp = p.phi.sqrt();
        let norm = (1.0 + p.phi).sqrt();
        for (row, &y) in inputs.chunks_exact_mut(c).zip(&signs) {
            // 1/y' = y' for y' = ±1.
            for (x, &s) in row.iter_mut().zip(&signal) {
                *x = (*x + sp * s * y) / norm;
            }
        }
    }
    NoiseDraw { inputs, signs }
}

/// Mean gradient `g = 1/B Σ y'_b x_b`.
fn mean_gradient(draw: &NoiseDraw, c: usize) -> Vec<f64> {
    let b = draw.signs.len();
    let mut grad = vec![0.0; c];
    for (row, &y) in draw.inputs.chunks_exact(c).zip(&draw.signs) {
        for (gj, &x) in grad.iter_mut().zip(row) {
            *gj += y * x;
        }
    }
    let inv_b = 1.0 / b as f64;
    grad.iter_mut().for_each(|gj| *gj *= inv_b);
    grad
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_trial(p: &NoiseModelParams, seed: u64) -> TrialSample {
    let c = p.c;
    let draw = draw_noise_model(p, seed);
    // Δw = −g with η = 1; the sign and η cancel in the alignment.
    let grad = mean_gradient(&draw, c);
    let mut out_sq = 0.0;
    let mut input_sq = 0.0;
    for row in draw.inputs.chunks_exact(c) {
        let proj = dot(&grad, row);
        out_sq += proj * proj;
        input_sq += dot(row, row);
    }
    let update_sq = dot(&grad, &grad);
    TrialSample {
        alignment: out_sq.sqrt() / (update_sq.sqrt() * input_sq.sqrt()),
        out_sq,
        update_sq,
        input_sq,
    }
}

/// Samples the noise model `trials` times. Trial `i` uses its own seed derived
/// from `(seed, i)`, and statistics are accumulated in trial order.
pub fn mc_update_alignment(p: &NoiseModelParams, trials: usize, seed: u64) -> Result<McEstimate> {
    p.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let (mut out, mut upd, mut inp) = (0.0, 0.0, 0.0);
    for i in 0..trials {
        let s = run_trial(p, derive_seed(seed, i as u64, Stream::Trial));
        sum += s.alignment;
        sum_sq += s.alignment * s.alignment;
        out += s.out_sq;
        upd += s.update_sq;
        inp += s.input_sq;
    }
    let n = trials as f64;
    let mean = sum / n;
    let stderr = if trials > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let moment_ratio = ((out / n) / ((upd / n) * (inp / n))).sqrt();
    Ok(McEstimate {
        mean,
        stderr,
        trials,
        moment_ratio,
    })
}

/// RMS over the batch of the self-contribution and interference parts of the
/// output change `Δy_i = ⟨Δw, x_i⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputChangeSplit {
    pub self_term_rms: f64,
    pub interference_rms: f64,
}

/// Splits `Δy_i` into `−(1/B) y'_i ⟨x_i, x_i⟩` and
/// `−(1/B) Σ_{b≠i} y'_b ⟨x_b, x_i⟩` for one draw of the model (η = 1).
pub fn decompose_output_change(p: &NoiseModelParams, seed: u64) -> Result<OutputChangeSplit> {
    p.validate()?;
    let c = p.c;
    let draw = draw_noise_model(p, derive_seed(seed, 0, Stream::Trial));
    let inv_b = 1.0 / p.b as f64;
    let mut sum_all = vec![0.0; c];
    for (row, &y) in draw.inputs.chunks_exact(c).zip(&draw.signs) {
        for (acc, &x) in sum_all.iter_mut().zip(row) {
            *acc += y * x;
        }
    }
    let (mut self_sq, mut inter_sq) = (0.0, 0.0);
    for (row, &y) in draw.inputs.chunks_exact(c).zip(&draw.signs) {
        let own = y * dot(row, row);
        let all = dot(&sum_all, row);
        let self_term = -inv_b * own;
        let interference = -inv_b * (all - own);
        self_sq += self_term * self_term;
        inter_sq += interference * interference;
    }
    let n = p.b as f64;
    Ok(OutputChangeSplit {
        self_term_rms: (self_sq / n).sqrt(),
        interference_rms: (inter_sq / n).sqrt(),
    })
}

/// Inputs of the equilibrium and warmup-ratio formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumParams {
    pub eta: f64,
    pub lambda: f64,
    /// Initial weight RMS.
    pub rho0: f64,
    /// Width multiplier of the scaled configuration `(η/m, mλ)`.
    pub m: f64,
    /// Elementwise RMS of the update before the learning rate.
    pub update_rms_scale: f64,
}

impl EquilibriumParams {
    pub fn new(eta: f64, lambda: f64, rho0: f64, m: f64) -> Self {
        Self {
            eta,
            lambda,
            rho0,
            m,
            update_rms_scale: 1.0,
        }
    }

    fn decay(&self) -> Result<f64> {
        decay_multiplier(self.eta, self.lambda)
    }

    /// Equilibrium RMS including the update scale `b`.
    fn rho_inf(&self) -> Result<f64> {
        Ok(rho_equilibrium(self.eta, self.lambda)? * self.update_rms_scale)
    }
}

fn decay_multiplier(eta: f64, lambda: f64) -> Result<f64> {
    let a = 1.0 - eta * lambda;
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::DecayMultiplier(a));
    }
    Ok(a)
}

/// Iterates `ρ²_{t+1} = a_t² ρ²_t + b² η_t²`; returns `ρ_0 … ρ_n`.
pub fn rho_rollout(eta_schedule: &[f64], lambda: f64, rho0: f64, b: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(eta_schedule.len() + 1);
    let mut rho_sq = rho0 * rho0;
    out.push(rho0);
    for &eta in eta_schedule {
        let a = decay_multiplier(eta, lambda)?;
        rho_sq = a * a * rho_sq + b * b * eta * eta;
        out.push(rho_sq.sqrt());
    }
    Ok(out)
}

/// Constant-learning-rate solution of the recurrence at step `t`.
pub fn rho_closed_form(t: u64, eta: f64, lambda: f64, rho0: f64, b: f64) -> Result<f64> {
    let a = decay_multiplier(eta, lambda)?;
    if lambda == 0.0 {
        return Ok((rho0 * rho0 + t as f64 * b * b * eta * eta).sqrt());
    }
    let rho_inf_sq = (b * eta).powi(2) / (1.0 - a * a);
    let decay = a.powf(2.0 * t as f64);
    Ok((rho_inf_sq + (rho0 * rho0 - rho_inf_sq) * decay).sqrt())
}

/// `ρ∞ = √(η² / (1 − a²))` with `a = 1 − ηλ`.
pub fn rho_equilibrium(eta: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Err(Error::NoEquilibrium);
    }
    let a = decay_multiplier(eta, lambda)?;
    Ok((eta * eta / (1.0 - a * a)).sqrt())
}

/// `√(η / (2λ))`, the small-`ηλ` form of [`rho_equilibrium`].
pub fn rho_equilibrium_approx(eta: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Err(Error::NoEquilibrium);
    }
    Ok((eta / (2.0 * lambda)).sqrt())
}

/// Steps until the constant-rate weight RMS first lies within a factor `√2`
/// of `ρ∞`, i.e. inside `[ρ∞/√2, √2 ρ∞]`. Zero when `ρ0` already does.
///
/// Uses the exact per-step contraction `a² = (1 − ηλ)²` so the result is the
/// first integer step of the rollout that lands in the band.
pub fn t_eq(eta: f64, lambda: f64, rho0: f64) -> Result<u64> {
    let rho_inf = rho_equilibrium(eta, lambda)?;
    let a = decay_multiplier(eta, lambda)?;
    let r2 = (rho0 / rho_inf).powi(2);
    let target = if r2 < 0.5 {
        // ρ_t² ≥ ρ∞²/2  ⇔  (1 − r²) a^{2t} ≤ 1/2
        0.5 / (1.0 - r2)
    } else if r2 > 2.0 {
        // ρ_t² ≤ 2ρ∞²  ⇔  (r² − 1) a^{2t} ≤ 1
        1.0 / (r2 - 1.0)
    } else {
        return Ok(0);
    };
    Ok((target.ln() / (2.0 * a.ln())).ceil().max(0.0) as u64)
}

/// Three-case estimate with `1/(2ηλ)` time constants and the
/// `1 − 1/√2` and `√2 − 1` thresholds, rounded up.
pub fn t_eq_published(eta: f64, lambda: f64, rho0: f64) -> Result<u64> {
    let rho_inf = rho_equilibrium(eta, lambda)?;
    let r2 = (rho0 / rho_inf).powi(2);
    let scale = 1.0 / (2.0 * eta * lambda);
    let sqrt2 = std::f64::consts::SQRT_2;
    let steps = if rho0 < rho_inf / sqrt2 {
        scale * ((1.0 - r2) / (1.0 - 1.0 / sqrt2)).ln()
    } else if rho0 > sqrt2 * rho_inf {
        scale * ((r2 - 1.0) / (sqrt2 - 1.0)).ln()
    } else {
        0.0
    };
    Ok(steps.ceil().max(0.0) as u64)
}

/// Constant-rate ratio of relative updates between `(η/m, mλ)` and `(η, λ)`:
/// `s_t = √((1 + (ρ0²/ρ∞² − 1) a^{2t}) / (1 + (m² ρ0²/ρ∞² − 1) a^{2t}))`.
pub fn warmup_ratio_s(t: u64, p: &EquilibriumParams) -> Result<f64> {
    let a = p.decay()?;
    let r2 = (p.rho0 / p.rho_inf()?).powi(2);
    let decay = a.powf(2.0 * t as f64);
    let num = 1.0 + (r2 - 1.0) * decay;
    let den = 1.0 + (p.m * p.m * r2 - 1.0) * decay;
    if den == 0.0 {
        // ρ0 = 0 at t = 0: both norms vanish, the limit is 1/m.
        return Ok(1.0 / p.m);
    }
    Ok(num.sqrt() / den.sqrt())
}

/// Warmup ratio for an arbitrary schedule, `s_t = (1/m) ρ_t / ρ̂_t`, from two
/// rollouts at `(η_t, λ)` and `(η_t/m, mλ)`. Returns `s_0 … s_n`.
pub fn warmup_ratio_rollout(
    eta_schedule: &[f64],
    lambda: f64,
    rho0: f64,
    m: f64,
    b: f64,
) -> Result<Vec<f64>> {
    let base = rho_rollout(eta_schedule, lambda, rho0, b)?;
    let scaled_etas: Vec<f64> = eta_schedule.iter().map(|e| e / m).collect();
    let scaled = rho_rollout(&scaled_etas, m * lambda, rho0, b)?;
    Ok(base
        .iter()
        .zip(&scaled)
        .map(|(r, rh)| r / (m * rh))
        .collect())
}

/// Relative update `η / √(ρ0² + t η²)` without weight decay.
pub fn rel_update_no_wd(t: u64, eta: f64, rho0: f64) -> f64 {
    eta / (rho0 * rho0 + t as f64 * eta * eta).sqrt()
}

/// Idealized scale-invariant weight matrix trained by AdamW on random
/// gradients that are orthogonal to the current weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleInvariantSim {
    pub rows: usize,
    pub cols: usize,
    pub rho0: f64,
    pub eta_schedule: Vec<f64>,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub t: u64,
    /// Weight RMS before the step.
    pub rho: f64,
    /// `‖ΔW‖/‖W‖` of the gradient part of the step.
    pub rel_update: f64,
}

pub fn simulate_scale_invariant(sim: &ScaleInvariantSim) -> Result<Vec<SimStep>> {
    let config = OptimConfig {
        eta_base: sim.eta_schedule.first().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE),
        lambda_base: sim.lambda,
        beta1: sim.beta1,
        beta2: sim.beta2,
        ..OptimConfig::default()
    };
    let mut init = Gaussian::from_seed(derive_seed(sim.seed, 0, Stream::Init));
    let mut noise = Gaussian::from_seed(derive_seed(sim.seed, 0, Stream::Gradient));
    let mut w = Mat::zeros(sim.rows, sim.cols);
    init.fill(w.data_mut());
    w.scale(sim.rho0);
    let mut state = AdamWState::for_param(&w);
    let mut grad = Mat::zeros(sim.rows, sim.cols);
    let size = (w.len() as f64).sqrt();
    let mut out = Vec::with_capacity(sim.eta_schedule.len());
    for (t, &eta) in sim.eta_schedule.iter().enumerate() {
        noise.fill(grad.data_mut());
        let coef = grad.dot(&w)? / w.sum_sq();
        grad.data_mut()
            .iter_mut()
            .zip(w.data())
            .for_each(|(g, &x)| *g -= coef * x);
        let w_norm = frob_norm(&w);
        let update = adamw_step(&mut state, &mut w, &grad, eta, sim.lambda, &config)?;
        out.push(SimStep {
            t: t as u64,
            rho: w_norm / size,
            rel_update: frob_norm(&update) / w_norm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() < rel
    }

    #[test]
    fn prediction_examples() {
        let p = predict_update_alignment(&NoiseModelParams::new(64, 4, 0.0));
        assert!((p - (69.0f64 / 256.0).sqrt()).abs() < 1e-15);
        assert!((p - 0.51917).abs() < 1e-5);
        let q = predict_update_alignment(&NoiseModelParams::new(128, 128, 1.0));
        assert!((q - (2179713.0f64 / 4227072.0).sqrt()).abs() < 1e-15);
        assert!((q - 0.71810).abs() < 1e-5);
        let r = predict_update_alignment(&NoiseModelParams::new(64, 1, 0.0));
        assert!((r - (66.0f64 / 64.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn batch_one_prediction_is_independent_of_phi() {
        for phi in [0.0, 0.01, 1.0, 100.0] {
            let p = predict_update_alignment(&NoiseModelParams::new(16, 1, phi));
            assert!((p - (18.0f64 / 16.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn approximation_examples() {
        let a = approx_update_alignment(&NoiseModelParams::new(64, 1024, 0.0));
        assert!((a - (1.0f64 / 64.0 + 1.0 / 1024.0).sqrt()).abs() < 1e-15);
        assert!((a - 0.12885).abs() < 1e-5);
        let inf = approx_update_alignment(&NoiseModelParams::new(64, 1024, f64::INFINITY));
        assert!(inf > 1.0 && inf < 1.01);
        let big = approx_update_alignment(&NoiseModelParams::new(1 << 20, 1 << 20, 1e12));
        assert!((big - 1.0).abs() < 1e-5);
        let sym = approx_update_alignment(&NoiseModelParams::new(50, 50, 0.0));
        assert!((sym - (2.0f64 / 50.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn prediction_and_approximation_agree_on_grid() {
        for c in [8, 16, 64, 256, 1024, 4096] {
            for b in [8, 16, 64, 256, 1024, 4096] {
                for phi in [0.0, 0.001, 0.01, 0.1, 1.0, 10.0] {
                    let p = NoiseModelParams::new(c, b, phi);
                    let (x, y) = (predict_update_alignment(&p), approx_update_alignment(&p));
                    assert!(close(y, x, 0.10), "C={c} B={b} phi={phi}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn single_sample_batches_are_perfectly_aligned() {
        for c in [3, 64] {
            for phi in [0.0, 0.5] {
                let est = mc_update_alignment(&NoiseModelParams::new(c, 1, phi), 50, 5).unwrap();
                assert!((est.mean - 1.0).abs() < 1e-12);
                assert!(est.stderr < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_matches_prediction_small_batch() {
        let p = NoiseModelParams::new(64, 4, 0.0);
        let est = mc_update_alignment(&p, 5000, 17).unwrap();
        let pred = predict_update_alignment(&p);
        let tol = (3.0 * est.stderr).max(0.05 * pred);
        assert!((est.mean - pred).abs() < tol, "{est:?} vs {pred}");
        // The ratio of square expectations is exactly what the closed form models.
        assert!(close(est.moment_ratio, pred, 0.02));
    }

    #[test]
    fn pure_signal_limit() {
        let est = mc_update_alignment(&NoiseModelParams::new(64, 256, 1e6), 200, 3).unwrap();
        assert!((est.mean - 1.0).abs() < 0.01, "{est:?}");
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let p = NoiseModelParams::new(16, 8, 0.1);
        assert_eq!(
            mc_update_alignment(&p, 100, 9).unwrap(),
            mc_update_alignment(&p, 100, 9).unwrap()
        );
    }

    #[test]
    fn interference_vanishes_for_single_sample() {
        let s = decompose_output_change(&NoiseModelParams::new(32, 1, 0.0), 4).unwrap();
        assert_eq!(s.interference_rms, 0.0);
        assert!(s.self_term_rms > 0.0);
    }

    #[test]
    fn interference_dominates_for_large_batches() {
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let s = decompose_output_change(&NoiseModelParams::new(32, 4096, 0.0), seed).unwrap();
            ratios.push(s.interference_rms / s.self_term_rms);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let expected = (4096.0f64 / 32.0).sqrt();
        assert!(close(mean, expected, 0.3), "{mean} vs {expected}");

        let small = decompose_output_change(&NoiseModelParams::new(4096, 4, 0.0), 1).unwrap();
        assert!(small.interference_rms / small.self_term_rms < 0.1);
    }

    #[test]
    fn rollout_without_decay_grows_linearly_in_square() {
        let rho = rho_rollout(&[0.01; 300], 0.0, 0.1, 1.0).unwrap();
        for (t, r) in rho.iter().enumerate() {
            let expect = (0.01 + t as f64 * 1e-4).sqrt();
            assert!(close(*r, expect, 1e-12));
        }
        let still = rho_rollout(&[0.0; 50], 0.1, 0.3, 1.0).unwrap();
        assert!(still.iter().all(|&r| r == 0.3));
    }

    #[test]
    fn rollout_matches_closed_form() {
        let (eta, lambda, rho0) = (0.004, 0.1, 0.05);
        let rho = rho_rollout(&vec![eta; 20_000], lambda, rho0, 1.0).unwrap();
        for (t, r) in rho.iter().enumerate() {
            let cf = rho_closed_form(t as u64, eta, lambda, rho0, 1.0).unwrap();
            assert!(close(*r, cf, 1e-12), "t={t}");
        }
        let from_zero = rho_rollout(&vec![eta; 60_000], lambda, 0.0, 1.0).unwrap();
        assert!((from_zero.last().unwrap() - 0.141435).abs() < 1e-6);
    }

    #[test]
    fn rollout_rejects_non_positive_decay() {
        assert!(matches!(
            rho_rollout(&[0.5, 2.0], 1.0, 1.0, 1.0),
            Err(Error::DecayMultiplier(_))
        ));
    }

    #[test]
    fn equilibrium_values() {
        let r = rho_equilibrium(0.004, 0.1).unwrap();
        assert!((r - 0.141435).abs() < 1e-6);
        assert!((rho_equilibrium_approx(0.004, 0.1).unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((rho_equilibrium(0.1, 0.5).unwrap() - 0.32026).abs() < 1e-5);
        assert!(matches!(rho_equilibrium(0.1, 0.0), Err(Error::NoEquilibrium)));
        let m = 16.0;
        let scaled = rho_equilibrium_approx(0.004 / m, 0.1 * m).unwrap();
        assert!(close(scaled, rho_equilibrium_approx(0.004, 0.1).unwrap() / m, 1e-14));
    }

    #[test]
    fn scaled_pair_converges_to_scaled_equilibrium() {
        let (eta, lambda, m) = (0.004, 0.1, 16.0);
        let rho = rho_rollout(&vec![eta / m; 40_000], m * lambda, 0.05, 1.0).unwrap();
        let target = rho_equilibrium(eta / m, m * lambda).unwrap();
        assert!(close(*rho.last().unwrap(), target, 1e-9));
        assert!(close(target, rho_equilibrium(eta, lambda).unwrap() / m, 1e-12));
    }

    #[test]
    fn t_eq_is_zero_inside_band() {
        let r = rho_equilibrium(0.004, 0.1).unwrap();
        assert_eq!(t_eq(0.004, 0.1, r).unwrap(), 0);
        assert_eq!(t_eq_published(0.004, 0.1, r).unwrap(), 0);
        assert!(matches!(t_eq(0.004, 0.0, 1.0), Err(Error::NoEquilibrium)));
    }

    #[test]
    fn published_t_eq_examples() {
        let (eta, lambda) = (0.004, 0.1);
        let r = rho_equilibrium(eta, lambda).unwrap();
        assert_eq!(t_eq_published(eta, lambda, 0.5 * r).unwrap(), 1176);
        let expected = (1.0 / (2.0 * eta * lambda) * (3.0 / (2f64.sqrt() - 1.0)).ln()).ceil() as u64;
        assert_eq!(t_eq_published(eta, lambda, 2.0 * r).unwrap(), expected);
    }

    #[test]
    fn t_eq_matches_rollout_entry() {
        let (eta, lambda) = (0.004, 0.1);
        let r = rho_equilibrium(eta, lambda).unwrap();
        for rho0 in [0.0, 0.2 * r, 0.5 * r, 2.0 * r, 5.0 * r] {
            let rho = rho_rollout(&vec![eta; 20_000], lambda, rho0, 1.0).unwrap();
            let sqrt2 = std::f64::consts::SQRT_2;
            let entry = rho
                .iter()
                .position(|&x| x >= r / sqrt2 && x <= sqrt2 * r)
                .unwrap() as i64;
            let t = t_eq(eta, lambda, rho0).unwrap() as i64;
            assert!((t - entry).abs() <= 1, "rho0={rho0}: {t} vs {entry}");
        }
    }

    #[test]
    fn warmup_ratio_examples() {
        let (eta, lambda, m) = (0.004, 0.1, 16.0);
        let r = rho_equilibrium(eta, lambda).unwrap();
        let p = EquilibriumParams::new(eta, lambda, r, m);
        assert_eq!(warmup_ratio_s(0, &p).unwrap(), 1.0 / 16.0);
        let s = warmup_ratio_s(2500, &p).unwrap();
        let expected = 1.0 / (1.0 + 255.0 * (5000.0 * (1.0f64 - 4e-4).ln()).exp()).sqrt();
        assert!(close(s, expected, 1e-12));
        assert!((s - 0.1679).abs() < 1e-3);
        assert!((warmup_ratio_s(1_000_000, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_ratio_rollout_matches_closed_form() {
        let (eta, lambda, m, rho0) = (0.004, 0.1, 8.0, 0.05);
        let s = warmup_ratio_rollout(&vec![eta; 5000], lambda, rho0, m, 1.0).unwrap();
        let p = EquilibriumParams::new(eta, lambda, rho0, m);
        for (t, v) in s.iter().enumerate().step_by(97) {
            assert!(close(*v, warmup_ratio_s(t as u64, &p).unwrap(), 1e-9), "t={t}");
        }
    }

    #[test]
    fn warmup_ratio_nondecreasing_below_equilibrium() {
        let (eta, lambda) = (0.01, 0.1);
        let r = rho_equilibrium(eta, lambda).unwrap();
        for frac in [0.0, 0.3, 1.0] {
            let p = EquilibriumParams::new(eta, lambda, frac * r, 16.0);
            let mut prev = 0.0;
            for t in 0..3000 {
                let s = warmup_ratio_s(t, &p).unwrap();
                assert!(s >= prev - 1e-15);
                prev = s;
            }
        }
    }

    #[test]
    fn no_wd_relative_update() {
        assert!((rel_update_no_wd(0, 0.01, 0.1) - 0.1).abs() < 1e-15);
        assert!((rel_update_no_wd(300, 0.01, 0.1) - 0.05).abs() < 1e-15);
        let late = rel_update_no_wd(10_000_000, 0.01, 0.1) / rel_update_no_wd(10_000_000, 0.04, 0.1);
        assert!((late - 1.0).abs() < 1e-3);
    }

    #[test]
    fn simulation_tracks_recurrence_with_decay() {
        let (eta, lambda) = (0.01, 0.5);
        let sim = ScaleInvariantSim {
            rows: 64,
            cols: 64,
            rho0: 0.05,
            eta_schedule: vec![eta; 2000],
            lambda,
            beta1: 0.0,
            beta2: 0.99,
            seed: 1,
        };
        let steps = simulate_scale_invariant(&sim).unwrap();
        let expect = rho_equilibrium(eta, lambda).unwrap();
        let last = steps.last().unwrap();
        assert!(close(last.rho, expect, 0.05), "{} vs {expect}", last.rho);
    }
}
