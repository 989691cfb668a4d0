//! Distributed observer layer with adaptive coupling gain `exp(ϑ_i)`.

use nalgebra::DVector;

use crate::gains::LeaderModel;
use crate::topology::Topology;

/// Upper clamp on the exponent of the adaptive gains, in natural-log units.
pub const DEFAULT_EXP_CAP: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub zeta: DVector<f64>,
    /// Log of the coupling gain; non-decreasing along trajectories.
    pub theta: f64,
    /// Adaptation constant, `> 0`.
    pub q: f64,
}

/// `ξ_i = Σ_j a_ij (ζ_j − ζ_i) + Σ_r g_ir (x_r − ζ_i)`.
pub fn neighborhood_xi(
    i: usize,
    zetas: &[DVector<f64>],
    leader_states: &[DVector<f64>],
    topology: &Topology,
) -> DVector<f64> {
    let own = &zetas[i];
    let mut xi = DVector::zeros(own.len());
    for (j, zeta_j) in zetas.iter().enumerate() {
        let a = topology.weight(i, j);
        if a != 0.0 {
            xi += (zeta_j - own) * a;
        }
    }
    for (r, x_r) in leader_states.iter().enumerate() {
        let g = topology.pin(i, r);
        if g != 0.0 {
            xi += (x_r - own) * g;
        }
    }
    xi
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverRates {
    pub dzeta: DVector<f64>,
    pub dtheta: f64,
    /// Set when `ϑ` exceeded the cap and the gain was evaluated at the cap.
    pub clamped: bool,
}

/// `exp(min(x, cap))`, reporting whether the cap was hit.
pub fn capped_exp(x: f64, cap: f64) -> (f64, bool) {
    if x > cap {
        (cap.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// `ζ̇ = Sζ + exp(ϑ)ξ + γ^ol`, `ϑ̇ = q ξᵀξ`.
pub fn observer_derivatives(
    state: &ObserverState,
    xi: &DVector<f64>,
    gamma_ol: &DVector<f64>,
    leader: &LeaderModel,
    exp_cap: f64,
) -> ObserverRates {
    let (gain, clamped) = capped_exp(state.theta, exp_cap);
    ObserverRates {
        dzeta: &leader.s * &state.zeta + xi * gain + gamma_ol,
        dtheta: state.q * xi.norm_squared(),
        clamped,
    }
}
