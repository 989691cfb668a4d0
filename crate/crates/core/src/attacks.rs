//! Exponentially unbounded false-data-injection signals.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// How the exponent's clock relates to the attack onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackClock {
    /// `c_j exp(k_j (t − t_on))`: onset values equal the coefficients.
    #[default]
    Shifted,
    /// `c_j exp(k_j t)` switched on at `t_on`.
    Absolute,
}

/// Component-wise `c_j exp(k_j τ)` that is zero before `start_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpSignal {
    pub coefficients: DVector<f64>,
    pub rates: DVector<f64>,
    pub start_time: f64,
    pub clock: AttackClock,
}

impl ExpSignal {
    pub fn new(
        coefficients: Vec<f64>,
        rates: Vec<f64>,
        start_time: f64,
        clock: AttackClock,
    ) -> Self {
        assert_eq!(
            coefficients.len(),
            rates.len(),
            "coefficient/rate length mismatch"
        );
        Self {
            coefficients: DVector::from_vec(coefficients),
            rates: DVector::from_vec(rates),
            start_time,
            clock,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![0.0; dim], 0.0, AttackClock::Shifted)
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        if t < self.start_time {
            return DVector::zeros(self.dim());
        }
        let tau = match self.clock {
            AttackClock::Shifted => t - self.start_time,
            AttackClock::Absolute => t,
        };
        self.coefficients
            .zip_map(&self.rates, |c, k| c * (k * tau).exp())
    }

    /// `(C, κ)` with `‖eval(t)‖ ≤ C exp(κ τ)`, `C = ‖c‖`, `κ = max_j k_j`.
    pub fn envelope(&self) -> (f64, f64) {
        let kappa = self.rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (self.coefficients.norm(), kappa.max(0.0))
    }

    pub fn is_silent(&self) -> bool {
        self.coefficients.iter().all(|&c| c == 0.0)
    }
}

/// Per-follower attacks on the control-input layer (`cil`, length `m_i`)
/// and the observer layer (`ol`, length `n`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackProfile {
    pub cil: ExpSignal,
    pub ol: ExpSignal,
}

impl AttackProfile {
    pub fn none(input_dim: usize, state_dim: usize) -> Self {
        Self {
            cil: ExpSignal::zero(input_dim),
            ol: ExpSignal::zero(state_dim),
        }
    }
}

/// `(γ^a, γ^ol)` at time `t`.
pub fn eval_attack(profile: &AttackProfile, t: f64) -> (DVector<f64>, DVector<f64>) {
    (profile.cil.eval(t), profile.ol.eval(t))
}
