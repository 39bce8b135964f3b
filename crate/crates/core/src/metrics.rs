//! Norms, alignments and relative-change metrics of a linear layer `Y = W X`.
//!
//! For a weight `W` (K×C), an update `ΔW` and a fixed probe input `X` (C×B):
//!
//! ```text
//! α_W  = ‖W X‖ / (‖W‖ ‖X‖)          weight alignment
//! α_ΔW = ‖ΔW X‖ / (‖ΔW‖ ‖X‖)        update alignment
//! ‖ΔY‖/‖Y‖ = (α_ΔW / α_W) · ‖ΔW‖/‖W‖
//! ```
//!
//! All norms are Frobenius norms. Zero matrices are rejected instead of
//! producing zeros or infinities in the logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Tolerance of the re-asserted `rrc = ratio · rel_update` identity.
pub const IDENTITY_TOL: f64 = 1e-9;

pub fn frob_norm(m: &Mat) -> f64 {
    m.sum_sq().sqrt()
}

pub fn rms_norm(m: &Mat) -> f64 {
    frob_norm(m) / (m.len() as f64).sqrt()
}

fn checked_norm(m: &Mat, what: &'static str) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    let n = frob_norm(m);
    if n == 0.0 {
        return Err(Error::DegenerateAlignment(what));
    }
    Ok(n)
}

fn alignment(a: &Mat, x: &Mat, what: &'static str) -> Result<f64> {
    let na = checked_norm(a, what)?;
    let nx = checked_norm(x, "input")?;
    let y = a.matmul(x)?;
    Ok(frob_norm(&y) / (na * nx))
}

/// `‖ΔW·X‖ / (‖ΔW‖ ‖X‖)`.
pub fn update_alignment(dw: &Mat, x: &Mat) -> Result<f64> {
    alignment(dw, x, "update")
}

/// `‖W·X‖ / (‖W‖ ‖X‖)`.
pub fn weight_alignment(w: &Mat, x: &Mat) -> Result<f64> {
    alignment(w, x, "weight")
}

/// One per-layer, per-step metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub step: u64,
    pub layer_id: String,
    pub fan_in: usize,
    pub weight_frob: f64,
    pub weight_rms: f64,
    pub delta_w_frob: f64,
    pub rel_weight_update: f64,
    pub y_frob: f64,
    pub delta_y_frob: f64,
    pub rel_repr_change: f64,
    pub weight_alignment: f64,
    pub update_alignment: f64,
    pub alignment_ratio: f64,
    pub lr_applied: f64,
    pub wd_applied: f64,
}

/// Full metric record for weight `w`, gradient-part update `dw` and probe
/// input `x`. `ΔY` is the local change `dw·x` on the same probe input.
pub fn layer_metrics(
    w: &Mat,
    dw: &Mat,
    x: &Mat,
    step: u64,
    layer_id: &str,
    lr: f64,
    wd: f64,
) -> Result<AlignmentSample> {
    if w.shape() != dw.shape() {
        return Err(Error::Shape(format!(
            "weight {:?} vs update {:?}",
            w.shape(),
            dw.shape()
        )));
    }
    let w_frob = checked_norm(w, "weight")?;
    let dw_frob = checked_norm(dw, "update")?;
    let x_frob = checked_norm(x, "input")?;
    let y = w.matmul(x)?;
    let dy = dw.matmul(x)?;
    let y_frob = frob_norm(&y);
    if y_frob == 0.0 {
        return Err(Error::DegenerateAlignment("layer output"));
    }
    let dy_frob = frob_norm(&dy);

    let weight_alignment = y_frob / (w_frob * x_frob);
    let update_alignment = dy_frob / (dw_frob * x_frob);
    let alignment_ratio = update_alignment / weight_alignment;
    let rel_weight_update = dw_frob / w_frob;
    let rel_repr_change = dy_frob / y_frob;

    let product = alignment_ratio * rel_weight_update;
    if rel_repr_change > 0.0 && ((rel_repr_change - product) / rel_repr_change).abs() > IDENTITY_TOL
    {
        return Err(Error::IdentityViolation {
            rrc: rel_repr_change,
            product,
        });
    }

    Ok(AlignmentSample {
        step,
        layer_id: layer_id.to_string(),
        fan_in: w.cols(),
        weight_frob: w_frob,
        weight_rms: w_frob / (w.len() as f64).sqrt(),
        delta_w_frob: dw_frob,
        rel_weight_update,
        y_frob,
        delta_y_frob: dy_frob,
        rel_repr_change,
        weight_alignment,
        update_alignment,
        alignment_ratio,
        lr_applied: lr,
        wd_applied: wd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Gaussian;
    use proptest::prelude::*;

    fn gaussian(rows: usize, cols: usize, g: &mut Gaussian<crate::rng::RunRng>) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        g.fill(m.data_mut());
        m
    }

    #[test]
    fn norms_of_small_matrices() {
        assert!((frob_norm(&Mat::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(frob_norm(&Mat::zeros(3, 4)), 0.0);
        assert_eq!(frob_norm(&Mat::from_rows(&[&[3.0, 4.0]])), 5.0);
        assert_eq!(rms_norm(&Mat::filled(4, 4, 1.0)), 1.0);
        assert!((rms_norm(&Mat::identity(2)) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rms_norm(&Mat::zeros(2, 5)), 0.0);
    }

    #[test]
    fn rank_one_update_is_perfectly_aligned() {
        let x = Mat::column(&[0.3, -1.2, 2.0, 0.7]);
        let dw = Mat::from_rows(&[&[0.3 * 2.5, -1.2 * 2.5, 2.0 * 2.5, 0.7 * 2.5]]);
        assert!((update_alignment(&dw, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((weight_alignment(&x.transpose(), &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_rows_have_zero_alignment() {
        let x = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let dw = Mat::from_rows(&[&[0.0, 1.0, -1.0]]);
        assert_eq!(update_alignment(&dw, &x).unwrap(), 0.0);
        assert_eq!(weight_alignment(&dw, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_inputs_are_degenerate() {
        let x = Mat::filled(3, 2, 1.0);
        assert!(matches!(
            update_alignment(&Mat::zeros(1, 3), &x),
            Err(Error::DegenerateAlignment("update"))
        ));
        assert!(matches!(
            weight_alignment(&Mat::filled(1, 3, 1.0), &Mat::zeros(3, 2)),
            Err(Error::DegenerateAlignment("input"))
        ));
    }

    #[test]
    fn proportional_update_metrics() {
        let w = Mat::identity(2);
        let dw = Mat::identity(2).scaled(0.1);
        let s = layer_metrics(&w, &dw, &Mat::identity(2), 0, "l", 1e-3, 0.1).unwrap();
        assert!((s.rel_weight_update - 0.1).abs() < 1e-15);
        assert!((s.rel_repr_change - 0.1).abs() < 1e-15);
        assert!((s.alignment_ratio - 1.0).abs() < 1e-15);
        assert_eq!(s.fan_in, 2);
    }

    #[test]
    fn random_alignment_scales_as_inverse_sqrt_width() {
        // Independent Gaussian W and X in C = 4096 dims. E[α²] = 1/C exactly,
        // so the root-mean-square over seeds estimates 1/√C = 1/64.
        let c = 4096;
        let seeds = 100;
        let mut g = Gaussian::from_seed(11);
        let (mut sq_w, mut sq_u, mut sum_ratio_u) = (0.0, 0.0, 0.0);
        for _ in 0..seeds {
            let w = gaussian(1, c, &mut g);
            let dw = gaussian(1, c, &mut g);
            let x = gaussian(c, 1, &mut g);
            sq_w += weight_alignment(&w, &x).unwrap().powi(2);
            sq_u += update_alignment(&dw, &x).unwrap().powi(2);
            // Update parallel to the single input: α_ΔW = 1.
            let s = layer_metrics(&w, &x.transpose(), &x, 0, "l", 0.0, 0.0).unwrap();
            assert!((s.update_alignment - 1.0).abs() < 1e-12);
            sum_ratio_u += s.update_alignment;
        }
        let rms_w = (sq_w / seeds as f64).sqrt();
        let rms_u = (sq_u / seeds as f64).sqrt();
        assert!((rms_w / 0.015625 - 1.0).abs() < 0.2, "rms α_W {rms_w}");
        assert!((rms_u / 0.015625 - 1.0).abs() < 0.2, "rms α_ΔW {rms_u}");
        let ratio = (sum_ratio_u / seeds as f64) / rms_w;
        assert!((ratio / 64.0 - 1.0).abs() < 0.25, "alignment ratio {ratio}");
    }

    proptest! {
        #[test]
        fn identity_and_bounds_hold(seed in 0u64..10_000, k in 1usize..6, c in 1usize..8, b in 1usize..6) {
            let mut g = Gaussian::from_seed(seed);
            let w = gaussian(k, c, &mut g);
            let dw = gaussian(k, c, &mut g);
            let x = gaussian(c, b, &mut g);
            let s = layer_metrics(&w, &dw, &x, 0, "p", 0.0, 0.0).unwrap();
            prop_assert!(s.weight_alignment >= 0.0 && s.weight_alignment <= 1.0 + 1e-9);
            prop_assert!(s.update_alignment >= 0.0 && s.update_alignment <= 1.0 + 1e-9);
            let rel = ((s.alignment_ratio * s.rel_weight_update - s.rel_repr_change) / s.rel_repr_change).abs();
            prop_assert!(rel < 1e-10);
        }

        #[test]
        fn update_alignment_is_scale_invariant(seed in 0u64..10_000, scale in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
            let mut g = Gaussian::from_seed(seed);
            let dw = gaussian(3, 5, &mut g);
            let x = gaussian(5, 4, &mut g);
            let a = update_alignment(&dw, &x).unwrap();
            let b = update_alignment(&dw.scaled(scale), &x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn batch_permutation_leaves_metrics_unchanged(seed in 0u64..10_000) {
            let mut g = Gaussian::from_seed(seed);
            let w = gaussian(3, 4, &mut g);
            let dw = gaussian(3, 4, &mut g);
            let x = gaussian(4, 5, &mut g);
            let xp = x.select_cols(&[3, 1, 4, 0, 2]);
            let a = layer_metrics(&w, &dw, &x, 0, "p", 0.0, 0.0).unwrap();
            let b = layer_metrics(&w, &dw, &xp, 0, "p", 0.0, 0.0).unwrap();
            prop_assert!((a.alignment_ratio - b.alignment_ratio).abs() < 1e-12 * a.alignment_ratio);
            prop_assert!((a.rel_repr_change - b.rel_repr_change).abs() < 1e-12 * a.rel_repr_change);
        }
    }
}
