//! The exponential weight `phi = exp(lambda * psi)` with
//! `psi(x,t) = |x - x0|^2 - beta (t - t0)^2`, its analytic derivative jet, and
//! the pseudoconvexity gap `b(psi) = |psi_t|^2 - |grad psi|^2`.
//!
//! Everything here is closed-form; discrete differentiation is reserved for
//! the solution fields. Quantities of the form `Q * exp(2 s phi)` are
//! accumulated with a shared exponent offset (see [`ExpOffset`]) so that
//! ratios of weighted integrals stay finite for large `s`.

use crate::error::{LabError, Result};
use crate::geometry::Domain;
use serde::{Deserialize, Serialize};

/// Parameters of the weight: multiplier point, convexification rate `lambda`,
/// time damping `beta`, time center `t0`, and the large parameter `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub x0: Vec<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub t0: f64,
    pub s: f64,
}

impl CarlemanParams {
    pub fn new(x0: Vec<f64>, lambda: f64, beta: f64, t0: f64, s: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(LabError::Validation(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        if !(s > 0.0) {
            return Err(LabError::Validation(format!("s must be > 0, got {s}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(LabError::Validation(format!(
                "beta must lie in (0,1), got {beta}"
            )));
        }
        if !(t0 >= 0.0) {
            return Err(LabError::Validation(format!("t0 must be >= 0, got {t0}")));
        }
        Ok(CarlemanParams {
            x0,
            lambda,
            beta,
            t0,
            s,
        })
    }

    /// Same weight with a different large parameter.
    pub fn with_s(&self, s: f64) -> CarlemanParams {
        CarlemanParams { s, ..self.clone() }
    }

    /// Check that `x0` is admissible for the given domain.
    pub fn check_against(&self, domain: &Domain) -> Result<()> {
        if self.x0.len() != domain.dim() {
            return Err(LabError::Validation(
                "weight point dimension does not match domain".into(),
            ));
        }
        if domain.contains_closure(&self.x0) {
            return Err(LabError::Validation(
                "weight point must lie outside the closed domain".into(),
            ));
        }
        Ok(())
    }
}

/// Analytic derivatives of `psi` and `phi` at one space-time point.
///
/// Primes denote time derivatives; `wave_*` is the d'Alembert combination
/// `(d_tt - Laplace)` applied to the named quantity. The spatial Hessian of
/// `psi` is `2 I`, exposed through the quadratic-form helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightJet {
    pub lambda: f64,
    pub psi: f64,
    pub phi: f64,
    pub psi_t: f64,
    pub psi_tt: f64,
    pub grad_psi: Vec<f64>,
    pub laplace_psi: f64,
    pub phi_t: f64,
    pub phi_tt: f64,
    pub phi_ttt: f64,
    pub grad_phi: Vec<f64>,
    pub laplace_phi: f64,
    pub grad_phi_t: Vec<f64>,
    pub laplace_phi_t: f64,
    /// phi'' - Laplace phi
    pub wave_phi: f64,
    /// (d_tt - Laplace) phi'
    pub wave_phi_t: f64,
    /// (d_tt - Laplace)^2 phi
    pub biwave_phi: f64,
    /// gradient of (phi'' - Laplace phi)
    pub grad_wave_phi: Vec<f64>,
    /// b(psi) = |psi'|^2 - |grad psi|^2
    pub gap: f64,
}

impl WeightJet {
    /// Quadratic form of the spatial Hessian of psi: `2 |w|^2`.
    pub fn hess_psi_form(&self, w: &[f64]) -> f64 {
        2.0 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Quadratic form of the spatial Hessian of phi:
    /// `lambda phi (2 |w|^2 + lambda <grad psi, w>^2)`.
    pub fn hess_phi_form(&self, w: &[f64]) -> f64 {
        let wsq: f64 = w.iter().map(|v| v * v).sum();
        let gw: f64 = self.grad_psi.iter().zip(w).map(|(g, v)| g * v).sum();
        self.lambda * self.phi * (2.0 * wsq + self.lambda * gw * gw)
    }

    /// `|phi'|^2 - |grad phi|^2 = lambda^2 phi^2 b(psi)`.
    pub fn conjugation_symbol(&self) -> f64 {
        self.lambda * self.lambda * self.phi * self.phi * self.gap
    }
}

/// Evaluate `(psi, phi)` at a point.
pub fn evaluate_weight(params: &CarlemanParams, x: &[f64], t: f64) -> (f64, f64) {
    let r_sq: f64 = x
        .iter()
        .zip(&params.x0)
        .map(|(xi, x0i)| (xi - x0i) * (xi - x0i))
        .sum();
    let dt = t - params.t0;
    let psi = r_sq - params.beta * dt * dt;
    (psi, (params.lambda * psi).exp())
}

/// Full analytic jet at a point. All formulas follow from the chain rule on
/// `phi = exp(lambda psi)` with quadratic `psi`.
pub fn weight_jet(params: &CarlemanParams, x: &[f64], t: f64) -> WeightJet {
    let n = x.len() as f64;
    let lam = params.lambda;
    let beta = params.beta;
    let dt = t - params.t0;

    let grad_psi: Vec<f64> = x
        .iter()
        .zip(&params.x0)
        .map(|(xi, x0i)| 2.0 * (xi - x0i))
        .collect();
    let grad_sq: f64 = grad_psi.iter().map(|g| g * g).sum();
    let (psi, phi) = evaluate_weight(params, x, t);
    let psi_t = -2.0 * beta * dt;
    let psi_tt = -2.0 * beta;
    let laplace_psi = 2.0 * n;
    let gap = psi_t * psi_t - grad_sq;

    let phi_t = lam * psi_t * phi;
    let phi_tt = lam * phi * (psi_tt + lam * psi_t * psi_t);
    let phi_ttt = lam * lam * psi_t * phi * (3.0 * psi_tt + lam * psi_t * psi_t);
    let grad_phi: Vec<f64> = grad_psi.iter().map(|g| lam * phi * g).collect();
    let laplace_phi = lam * phi * (laplace_psi + lam * grad_sq);
    let grad_phi_t: Vec<f64> = grad_psi
        .iter()
        .map(|g| lam * lam * psi_t * phi * g)
        .collect();
    let laplace_phi_t = lam * lam * psi_t * phi * (laplace_psi + lam * grad_sq);

    // g = psi'' - Laplace psi + lambda b(psi); wave_phi = lambda phi g
    let g = psi_tt - laplace_psi + lam * gap;
    let wave_phi = lam * phi * g;
    let wave_phi_t = lam * lam * psi_t * phi * (3.0 * psi_tt - laplace_psi + lam * gap);
    // time/space derivatives of b: b' = 2 psi' psi'', grad b = -4 grad psi,
    // b'' = 2 psi''^2, Laplace b = -4 Laplace psi
    let b_t = 2.0 * psi_t * psi_tt;
    let b_tt = 2.0 * psi_tt * psi_tt;
    let biwave_phi = lam
        * lam
        * phi
        * (g * g + 2.0 * lam * (psi_t * b_t + 4.0 * grad_sq) + b_tt + 4.0 * laplace_psi);
    let grad_wave_phi: Vec<f64> = grad_psi
        .iter()
        .map(|gp| lam * lam * phi * (g - 4.0) * gp)
        .collect();

    WeightJet {
        lambda: lam,
        psi,
        phi,
        psi_t,
        psi_tt,
        grad_psi,
        laplace_psi,
        phi_t,
        phi_tt,
        phi_ttt,
        grad_phi,
        laplace_phi,
        grad_phi_t,
        laplace_phi_t,
        wave_phi,
        wave_phi_t,
        biwave_phi,
        grad_wave_phi,
        gap,
    }
}

/// `b(psi) = 4 beta^2 (t-t0)^2 - 4 |x-x0|^2`.
pub fn pseudoconvexity_gap(params: &CarlemanParams, x: &[f64], t: f64) -> f64 {
    weight_jet(params, x, t).gap
}

/// Absorption margin `c0 = 2 (exp(lambda d0^2) - exp(lambda (d1^2 - beta T^2)))`;
/// positive exactly when `T sqrt(beta) > sqrt(d1^2 - d0^2)`.
pub fn absorption_margin(lambda: f64, beta: f64, d0: f64, d1: f64, t_final: f64) -> f64 {
    2.0 * ((lambda * d0 * d0).exp() - (lambda * (d1 * d1 - beta * t_final * t_final)).exp())
}

/// Shared exponent offset for accumulating `Q * exp(logw)` terms without
/// overflow: every integrand is scaled by `exp(logw - offset)` and the offset
/// is reported alongside. Ratios of quantities sharing an offset are exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpOffset {
    pub offset: f64,
}

impl ExpOffset {
    pub fn new(offset: f64) -> Self {
        ExpOffset { offset }
    }

    /// Offset at the maximum of the supplied log-weights.
    pub fn from_log_max<I: IntoIterator<Item = f64>>(logs: I) -> Self {
        let m = logs.into_iter().fold(f64::NEG_INFINITY, f64::max);
        ExpOffset {
            offset: if m.is_finite() { m } else { 0.0 },
        }
    }

    /// Scaled weight `exp(logw - offset)`, always <= 1 for logw <= offset.
    pub fn scale(&self, logw: f64) -> f64 {
        (logw - self.offset).exp()
    }

    /// Undo the offset on an accumulated value; +inf when it cannot be
    /// represented in f64.
    pub fn unscale(&self, scaled: f64) -> f64 {
        if scaled == 0.0 {
            return 0.0;
        }
        let log_abs = scaled.abs().ln() + self.offset;
        if log_abs > f64::MAX.ln() {
            f64::INFINITY * scaled.signum()
        } else {
            scaled.signum() * log_abs.exp()
        }
    }
}
