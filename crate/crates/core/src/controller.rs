//! Conventional tracking input, adaptive attack compensation, and the
//! attacked input handed to the safety filter.

use nalgebra::DVector;

use crate::gains::{AgentModel, GainSet};
use crate::observer::capped_exp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensatorState {
    /// Log-gain of the compensation magnitude; non-decreasing.
    pub rho_hat: f64,
    pub alpha: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlBreakdown {
    pub u_c: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    pub u_r: DVector<f64>,
    pub u_bar: DVector<f64>,
}

/// `u_c = Kx + Hζ`
pub fn conventional_input(gains: &GainSet, x: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
    &gains.k * x + &gains.h * zeta
}

/// `BᵀPε`, whose norm equals `‖εᵀPB‖` for symmetric `P`.
pub fn weighted_error(gains: &GainSet, model: &AgentModel, eps: &DVector<f64>) -> DVector<f64> {
    model.b.transpose() * (&gains.p * eps)
}

/// `γ̂ = BᵀPε / (‖εᵀPB‖ + exp(−c t²)) · exp(ρ̂)`
pub fn compensation_signal(
    gains: &GainSet,
    model: &AgentModel,
    eps: &DVector<f64>,
    comp: &CompensatorState,
    t: f64,
    exp_cap: f64,
) -> DVector<f64> {
    let v = weighted_error(gains, model, eps);
    let norm = v.norm();
    let denom = norm + (-comp.c * t * t).exp();
    let (scale, _) = capped_exp(comp.rho_hat, exp_cap);
    if denom == 0.0 {
        return v;
    }
    v * (scale / denom)
}

/// `ρ̂̇ = α ‖εᵀPB‖`
pub fn compensator_rate(
    gains: &GainSet,
    model: &AgentModel,
    eps: &DVector<f64>,
    comp: &CompensatorState,
) -> f64 {
    comp.alpha * weighted_error(gains, model, eps).norm()
}

/// `u_r = u_c − γ̂`, `ū = u_r + γ^a`.
pub fn corrupted_input(
    u_c: DVector<f64>,
    gamma_hat: DVector<f64>,
    gamma_a: &DVector<f64>,
) -> ControlBreakdown {
    let u_r = &u_c - &gamma_hat;
    let u_bar = &u_r + gamma_a;
    ControlBreakdown {
        u_c,
        gamma_hat,
        u_r,
        u_bar,
    }
}
