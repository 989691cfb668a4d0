//! Offline per-follower gain synthesis: regulator solution `Π`, Riccati
//! solution `P`, feedback `K = −U⁻¹BᵀP` and feedforward `H = Π − K`.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::linalg;

pub const CARE_TOLERANCE: f64 = 1e-8;
pub const REGULATOR_TOLERANCE: f64 = 1e-10;
const CARE_MAX_ITERATIONS: usize = 100;

/// Follower plant `ẋ = Ax + Bu` with LQR weights `Q`, `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl AgentModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Checks shapes, weight symmetry and definiteness, and controllability.
    /// Returns every problem found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.a.nrows();
        if !self.a.is_square() || n == 0 {
            out.push(format!(
                "A must be square and non-empty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            ));
            return out;
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            out.push(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                self.b.nrows(),
                self.b.ncols()
            ));
            return out;
        }
        let m = self.b.ncols();
        if self.q.shape() != (n, n) {
            out.push(format!(
                "Q must be {n}x{n}, got {}x{}",
                self.q.nrows(),
                self.q.ncols()
            ));
        } else {
            if !linalg::is_symmetric(&self.q, 1e-12) {
                out.push("Q is not symmetric".into());
            }
            if !linalg::is_positive_definite(&self.q) {
                out.push("Q is not positive definite".into());
            }
        }
        if self.u.shape() != (m, m) {
            out.push(format!(
                "U must be {m}x{m}, got {}x{}",
                self.u.nrows(),
                self.u.ncols()
            ));
        } else {
            if !linalg::is_symmetric(&self.u, 1e-12) {
                out.push("U is not symmetric".into());
            }
            if !linalg::is_positive_definite(&self.u) {
                out.push("U is not positive definite".into());
            }
        }
        let all = [&self.a, &self.b, &self.q, &self.u];
        if all.iter().any(|mat| mat.iter().any(|v| !v.is_finite())) {
            out.push("matrices contain non-finite entries".into());
        }
        if let Err(e) = check_controllable(&self.a, &self.b) {
            out.push(e.to_string());
        }
        out
    }
}

/// Leader command generator `ẋ_r = S x_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderModel {
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub care_residual: f64,
    pub regulator_residual: f64,
}

impl GainSet {
    /// `Bᵀ P`, the row block shared by the compensator and its adaptation law.
    pub fn bt_p(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        b.transpose() * &self.p
    }
}

pub fn check_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let rank = linalg::rank(&linalg::controllability_matrix(a, b), 1e-10);
    if rank < n {
        return Err(Error::NotControllable { rank, n });
    }
    Ok(())
}

/// Least-squares solution of `S = A + BΠ`; errors unless the residual
/// `‖S − A − BΠ‖_F` is at most [`REGULATOR_TOLERANCE`].
pub fn solve_regulator(model: &AgentModel, leader: &LeaderModel) -> Result<DMatrix<f64>> {
    let target = &leader.s - &model.a;
    if target.shape() != model.a.shape() {
        return Err(Error::Dimension(format!(
            "S is {}x{} but A is {}x{}",
            leader.s.nrows(),
            leader.s.ncols(),
            model.a.nrows(),
            model.a.ncols()
        )));
    }
    let svd = model.b.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let pi = if smax == 0.0 {
        DMatrix::zeros(model.b.ncols(), model.a.ncols())
    } else {
        svd.solve(&target, smax * 1e-12)
            .map_err(|e| Error::Model(format!("regulator least squares failed: {e}")))?
    };
    let residual = regulator_residual(model, leader, &pi);
    if residual > REGULATOR_TOLERANCE {
        return Err(Error::RegulatorUnsolvable { residual });
    }
    Ok(pi)
}

pub fn regulator_residual(model: &AgentModel, leader: &LeaderModel, pi: &DMatrix<f64>) -> f64 {
    (&leader.s - &model.a - &model.b * pi).norm()
}

/// Frobenius norm of `AᵀP + PA + Q − PBU⁻¹BᵀP`.
pub fn care_residual(model: &AgentModel, p: &DMatrix<f64>) -> f64 {
    let u_inv = model
        .u
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::zeros(0, 0));
    if u_inv.is_empty() {
        return f64::INFINITY;
    }
    let a = &model.a;
    let b = &model.b;
    (a.transpose() * p + p * a + &model.q - p * b * u_inv * b.transpose() * p).norm()
}

/// Stabilising gain by Bass's method: with `β` exceeding the spectral
/// radius of `A`, `K = −BᵀW⁻¹` where `(A+βI)W + W(A+βI)ᵀ = 2BBᵀ`.
fn initial_stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = a + DMatrix::<f64>::identity(n, n) * beta;
    let bbt = b * b.transpose();
    // solve_lyapunov handles Mᵀ W + W M = −C, so M = (A+βI)ᵀ and C = −2BBᵀ.
    let w = linalg::solve_lyapunov(&shifted.transpose(), &(bbt * -2.0))?;
    let w_inv = w
        .try_inverse()
        .ok_or_else(|| Error::Model("controllability Gramian is singular".into()))?;
    Ok(-b.transpose() * w_inv)
}

/// Newton–Kleinman iteration for `AᵀP + PA + Q − PBU⁻¹BᵀP = 0`.
pub fn solve_care(model: &AgentModel) -> Result<DMatrix<f64>> {
    let (a, b, q, u) = (&model.a, &model.b, &model.q, &model.u);
    check_controllable(a, b)?;
    if !linalg::is_positive_definite(q) || !linalg::is_positive_definite(u) {
        return Err(Error::Model("Q and U must be positive definite".into()));
    }
    let u_inv = u
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Model("U is singular".into()))?;
    let u_inv_bt = &u_inv * b.transpose();

    let mut k = initial_stabilizing_gain(a, b)?;
    if !linalg::is_hurwitz(&(a + b * &k)) {
        return Err(Error::Model(
            "failed to find an initial stabilising gain".into(),
        ));
    }
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    let mut residual = f64::INFINITY;
    for _ in 0..CARE_MAX_ITERATIONS {
        let closed = a + b * &k;
        let weight = q + k.transpose() * u * &k;
        let next = linalg::solve_lyapunov(&closed, &weight)?;
        let next = (&next + next.transpose()) * 0.5;
        let step = (&next - &p).amax();
        p = next;
        k = -&u_inv_bt * &p;
        residual = care_residual(model, &p);
        if !residual.is_finite() {
            break;
        }
        if step <= 1e-14 * (1.0 + p.amax()) || residual <= 1e-13 * (1.0 + p.amax()) {
            break;
        }
    }
    if residual.is_nan() || residual > CARE_TOLERANCE {
        return Err(Error::CareNoConvergence {
            iterations: CARE_MAX_ITERATIONS,
            residual,
        });
    }
    Ok(p)
}

pub fn synthesize_gains(model: &AgentModel, leader: &LeaderModel) -> Result<GainSet> {
    let pi = solve_regulator(model, leader)?;
    let p = solve_care(model)?;
    let u_inv = model
        .u
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Model("U is singular".into()))?;
    let k = -u_inv * model.b.transpose() * &p;
    let h = &pi - &k;
    Ok(GainSet {
        care_residual: care_residual(model, &p),
        regulator_residual: regulator_residual(model, leader, &pi),
        p,
        k,
        h,
        pi,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderCheck {
    pub eigenvalues: Vec<Complex<f64>>,
    pub passed: bool,
    pub reason: Option<String>,
}

const LEADER_RE_TOL: f64 = 1e-9;
const LEADER_REPEAT_TOL: f64 = 1e-6;

/// Eigenvalues must have non-positive real part (to `1e−9`) and those on
/// the imaginary axis must be simple.
pub fn check_leader_assumption(leader: &LeaderModel) -> LeaderCheck {
    if !leader.s.is_square() || leader.s.is_empty() {
        return LeaderCheck {
            eigenvalues: Vec::new(),
            passed: false,
            reason: Some("S must be square and non-empty".into()),
        };
    }
    let eigenvalues = linalg::eigenvalues(&leader.s);
    let mut reason = None;
    if let Some(bad) = eigenvalues.iter().find(|l| l.re > LEADER_RE_TOL) {
        reason = Some(format!("eigenvalue {bad} has positive real part"));
    } else {
        let on_axis: Vec<_> = eigenvalues
            .iter()
            .filter(|l| l.re.abs() <= LEADER_RE_TOL.max(LEADER_REPEAT_TOL))
            .collect();
        'outer: for (idx, x) in on_axis.iter().enumerate() {
            for y in &on_axis[idx + 1..] {
                if (**x - **y).norm() < LEADER_REPEAT_TOL {
                    reason = Some(format!("eigenvalue {x} on the imaginary axis is repeated"));
                    break 'outer;
                }
            }
        }
    }
    LeaderCheck {
        eigenvalues,
        passed: reason.is_none(),
        reason,
    }
}
