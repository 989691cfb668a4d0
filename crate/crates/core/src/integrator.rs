//! Classical fixed-step fourth-order Runge–Kutta.

use nalgebra::DVector;

/// One RK4 step of `ẏ = f(t, y)`. The right-hand side may fail (for
/// example when a stage hits an infeasible safety QP); the first error is
/// returned unchanged.
pub fn rk4_step<E, F>(mut f: F, t: f64, y: &DVector<f64>, dt: f64) -> Result<DVector<f64>, E>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, E>,
{
    let half = 0.5 * dt;
    let k1 = f(t, y)?;
    let k2 = f(t + half, &(y + &k1 * half))?;
    let k3 = f(t + half, &(y + &k2 * half))?;
    let k4 = f(t + dt, &(y + &k3 * dt))?;
    Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
}
