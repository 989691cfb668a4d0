//! Pairwise collision-avoidance barrier constraints and the per-agent
//! projection QP, solved in backward agent order.
//!
//! Each follower pair `(i, j)` with `i < j` contributes the affine row
//!
//! ```text
//!   −2(x_i − x_j)ᵀB_i u_i ≤ −δ_ij h − 2(x_i − x_j)ᵀA_j x_j − 2(x_i − x_j)ᵀB_j u_j + 2(x_i − x_j)ᵀA_i x_i
//! ```
//!
//! with `h = d_s² − ‖x_i − x_j‖²`, so that `ḣ ≤ −δ_ij h` along the closed
//! loop. The safe set is `h ≤ 0`. The highest-indexed agent keeps its input;
//! every lower agent projects its input against the already-final inputs of
//! all higher agents.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gains::AgentModel;

/// Tolerance on constraint satisfaction and KKT conditions.
pub const QP_TOLERANCE: f64 = 1e-9;
const MAX_QP_ITERATIONS: usize = 500;

/// `h = d_s² − ‖x_i − x_j‖²`; non-positive means the pair is safe.
pub fn cbf_value(x_i: &DVector<f64>, x_j: &DVector<f64>, d_s: f64) -> f64 {
    d_s * d_s - (x_i - x_j).norm_squared()
}

/// `aᵀu_i ≤ b` for the pair `(i, j)` (0-based, `i < j`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairConstraint {
    pub i: usize,
    pub j: usize,
    pub a: DVector<f64>,
    pub b: f64,
    pub delta: f64,
    pub h: f64,
}

impl PairConstraint {
    pub fn slack(&self, u_i: &DVector<f64>) -> f64 {
        self.b - self.a.dot(u_i)
    }

    /// Pair label as printed in traces and errors (1-based).
    pub fn label(&self) -> (usize, usize) {
        (self.i + 1, self.j + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PairContext<'a> {
    pub x_i: &'a DVector<f64>,
    pub x_j: &'a DVector<f64>,
    pub model_i: &'a AgentModel,
    pub model_j: &'a AgentModel,
    /// Final input of the higher-indexed agent.
    pub u_j: &'a DVector<f64>,
}

pub fn build_constraint(
    i: usize,
    j: usize,
    ctx: PairContext<'_>,
    delta: f64,
    d_s: f64,
) -> PairConstraint {
    let d = ctx.x_i - ctx.x_j;
    let h = d_s * d_s - d.norm_squared();
    let a = ctx.model_i.b.transpose() * &d * -2.0;
    let lf_i = -2.0 * d.dot(&(&ctx.model_i.a * ctx.x_i));
    let drift_j = &ctx.model_j.a * ctx.x_j + &ctx.model_j.b * ctx.u_j;
    let b = -delta * h - 2.0 * d.dot(&drift_j) - lf_i;
    PairConstraint {
        i,
        j,
        a,
        b,
        delta,
        h,
    }
}

/// `normalᵀx ≤ bound`
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: DVector<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub x: DVector<f64>,
    /// One multiplier per input row, zero for inactive rows.
    pub multipliers: Vec<f64>,
    /// Rows in the final working set (held with equality).
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibleRows(pub Vec<usize>);

/// Euclidean projection of `target` onto `{x : nᵀx ≤ b for every row}`.
///
/// Dual active-set method (Goldfarb–Idnani specialised to an identity
/// Hessian): start from the unconstrained minimiser and add the most
/// violated row, dropping working rows whose multipliers would turn
/// negative. Infeasibility shows up as a violated row that is a
/// non-negative combination of the working rows.
pub fn project_onto_polyhedron(
    target: &DVector<f64>,
    rows: &[HalfSpace],
) -> std::result::Result<Projection, InfeasibleRows> {
    let mut x = target.clone();
    let mut lambda = vec![0.0; rows.len()];
    let mut active: Vec<usize> = Vec::new();

    let mut usable = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        if row.normal.norm() <= f64::EPSILON {
            // 0 ≤ b
            if row.bound < -QP_TOLERANCE {
                return Err(InfeasibleRows(vec![k]));
            }
        } else {
            usable.push(k);
        }
    }

    let violation = |x: &DVector<f64>, k: usize| rows[k].normal.dot(x) - rows[k].bound;
    let tol = |x: &DVector<f64>, k: usize| {
        1e-13 * (1.0 + rows[k].bound.abs() + rows[k].normal.norm() * x.norm())
    };

    for _ in 0..MAX_QP_ITERATIONS {
        let candidate = usable
            .iter()
            .copied()
            .filter(|k| !active.contains(k))
            .map(|k| (k, violation(&x, k)))
            .filter(|&(k, s)| s > tol(&x, k))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((p, _)) = candidate else {
            if let Some((px, plam)) = polish(target, rows, &active) {
                let worst = |x: &DVector<f64>| {
                    usable
                        .iter()
                        .map(|&k| violation(x, k))
                        .fold(0.0f64, f64::max)
                };
                if plam.iter().all(|&l| l >= 0.0) && worst(&px) <= worst(&x).max(0.0) + f64::EPSILON
                {
                    x = px;
                    for (&k, l) in active.iter().zip(plam.iter()) {
                        lambda[k] = *l;
                    }
                }
            }
            return Ok(Projection {
                x,
                multipliers: lambda,
                active,
            });
        };
        let a_p = &rows[p].normal;

        loop {
            let (r, z) = split_direction(rows, &active, a_p);
            let mut drop: Option<(usize, f64)> = None;
            for (pos, &k) in active.iter().enumerate() {
                if r[pos] > 1e-14 {
                    let step = lambda[k] / r[pos];
                    if drop.is_none_or(|(_, best)| step < best) {
                        drop = Some((pos, step));
                    }
                }
            }
            let zz = z.norm_squared();
            let full = if zz > 1e-20 * a_p.norm_squared() {
                Some(violation(&x, p) / zz)
            } else {
                None
            };
            let (t, add) = match (full, drop) {
                (None, None) => {
                    let mut conflict = active.clone();
                    conflict.push(p);
                    conflict.sort_unstable();
                    return Err(InfeasibleRows(conflict));
                }
                (Some(t1), None) => (t1, true),
                (None, Some((_, t2))) => (t2, false),
                (Some(t1), Some((_, t2))) => {
                    if t1 <= t2 {
                        (t1, true)
                    } else {
                        (t2, false)
                    }
                }
            };
            x -= &z * t;
            for (pos, &k) in active.iter().enumerate() {
                lambda[k] -= t * r[pos];
            }
            lambda[p] += t;
            if add {
                active.push(p);
                break;
            }
            let (pos, _) = drop.expect("partial step implies a blocking row");
            let k = active.remove(pos);
            lambda[k] = 0.0;
        }
    }
    Err(InfeasibleRows(active))
}

/// Re-solves the working-set equality problem in one shot by QR, removing
/// drift accumulated over the incremental updates.
fn polish(
    target: &DVector<f64>,
    rows: &[HalfSpace],
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    if active.is_empty() || active.len() > target.len() {
        return None;
    }
    let n = DMatrix::from_columns(
        &active
            .iter()
            .map(|&k| rows[k].normal.clone())
            .collect::<Vec<_>>(),
    );
    let rhs = n.transpose() * target
        - DVector::from_iterator(active.len(), active.iter().map(|&k| rows[k].bound));
    let r = n.clone().qr().r();
    // RᵀR λ = rhs
    let y = r.transpose().solve_lower_triangular(&rhs)?;
    let lambda = r.solve_upper_triangular(&y)?;
    let x = target - n * &lambda;
    Some((x, lambda))
}

/// `r = (NᵀN)⁻¹Nᵀa`, `z = a − N r` for the working-set normals `N`.
fn split_direction(
    rows: &[HalfSpace],
    active: &[usize],
    a: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (DVector::zeros(0), a.clone());
    }
    let n = DMatrix::from_columns(
        &active
            .iter()
            .map(|&k| rows[k].normal.clone())
            .collect::<Vec<_>>(),
    );
    let gram = n.transpose() * &n;
    let rhs = n.transpose() * a;
    // Working-set normals stay linearly independent in this method, so the
    // Gram matrix is positive definite; fall back to a pseudo-inverse when
    // rounding says otherwise.
    let r = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .pseudo_inverse(1e-14)
            .map(|pinv| pinv * &rhs)
            .unwrap_or_else(|_| DVector::zeros(active.len())),
    };
    let z = a - &n * &r;
    (r, z)
}

/// Worst violation of the KKT conditions of the projection QP.
///
/// Complementarity is measured by the natural residual `|min(λ, −s)|`
/// rather than `|λ s|`, which stays meaningful when multipliers are large.
pub fn kkt_residual(target: &DVector<f64>, rows: &[HalfSpace], sol: &Projection) -> f64 {
    let mut grad = &sol.x - target;
    let mut worst: f64 = 0.0;
    for (row, &lam) in rows.iter().zip(&sol.multipliers) {
        grad += &row.normal * lam;
        let s = row.normal.dot(&sol.x) - row.bound;
        worst = worst.max(s).max(-lam).max(lam.min(-s).abs());
    }
    worst.max(grad.amax())
}

/// Optional per-component input bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBox {
    fn rows(&self) -> Vec<HalfSpace> {
        let m = self.lower.len();
        let mut out = Vec::with_capacity(2 * m);
        for k in 0..m {
            let mut e = DVector::zeros(m);
            e[k] = 1.0;
            out.push(HalfSpace {
                normal: e.clone(),
                bound: self.upper[k],
            });
            out.push(HalfSpace {
                normal: -e,
                bound: -self.lower[k],
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u: DVector<f64>,
    /// `u − ū`
    pub delta_u: DVector<f64>,
    /// 0-based pairs whose rows are held with equality.
    pub active_pairs: Vec<(usize, usize)>,
    pub constraints: Vec<PairConstraint>,
    pub multipliers: Vec<f64>,
}

/// `min ‖u − ū‖²` subject to the pair rows and optional box bounds.
pub fn solve_agent_qp(
    agent: usize,
    u_bar: &DVector<f64>,
    constraints: Vec<PairConstraint>,
    bounds: Option<&InputBox>,
) -> Result<FilterResult> {
    let mut rows: Vec<HalfSpace> = constraints
        .iter()
        .map(|c| HalfSpace {
            normal: c.a.clone(),
            bound: c.b,
        })
        .collect();
    if let Some(b) = bounds {
        rows.extend(b.rows());
    }
    let sol = project_onto_polyhedron(u_bar, &rows).map_err(|InfeasibleRows(bad)| {
        Error::QpInfeasible {
            agent: agent + 1,
            pairs: bad
                .iter()
                .filter_map(|&k| constraints.get(k).map(PairConstraint::label))
                .collect(),
        }
    })?;
    let active_pairs = sol
        .active
        .iter()
        .filter_map(|&k| constraints.get(k).map(|c| (c.i, c.j)))
        .collect();
    Ok(FilterResult {
        delta_u: &sol.x - u_bar,
        u: sol.x,
        active_pairs,
        multipliers: sol.multipliers[..constraints.len()].to_vec(),
        constraints,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyParams {
    pub d_s: f64,
    /// `δ_ij`, read at `(i, j)` with `i < j`.
    pub delta: DMatrix<f64>,
    pub input_bounds: Option<Vec<InputBox>>,
}

impl SafetyParams {
    pub fn uniform(n_agents: usize, d_s: f64, delta: f64) -> Self {
        Self {
            d_s,
            delta: DMatrix::from_element(n_agents, n_agents, delta),
            input_bounds: None,
        }
    }
}

/// Pairs in evaluation order: agent `N−1` against `N`, then `N−2` against
/// `N−1, N`, …, down to agent 1 against everyone above it (0-based here).
pub fn backward_pair_order(n_agents: usize) -> Vec<(usize, usize)> {
    (0..n_agents)
        .rev()
        .flat_map(|i| (i + 1..n_agents).map(move |j| (i, j)))
        .collect()
}

/// Runs the per-agent QPs from the highest index down, each one
/// constrained against the final inputs of every higher-indexed agent.
pub fn sequential_filter(
    u_bars: &[DVector<f64>],
    states: &[DVector<f64>],
    models: &[AgentModel],
    params: &SafetyParams,
) -> Result<Vec<FilterResult>> {
    let n = u_bars.len();
    let mut finals: Vec<Option<FilterResult>> = vec![None; n];
    for i in (0..n).rev() {
        let constraints = (i + 1..n)
            .map(|j| {
                let u_j = &finals[j].as_ref().expect("higher agents are final").u;
                let ctx = PairContext {
                    x_i: &states[i],
                    x_j: &states[j],
                    model_i: &models[i],
                    model_j: &models[j],
                    u_j,
                };
                build_constraint(i, j, ctx, params.delta[(i, j)], params.d_s)
            })
            .collect();
        let bounds = params.input_bounds.as_ref().map(|b| &b[i]);
        finals[i] = Some(solve_agent_qp(i, &u_bars[i], constraints, bounds)?);
    }
    Ok(finals
        .into_iter()
        .map(|r| r.expect("all agents filtered"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn integrator(n: usize) -> AgentModel {
        AgentModel {
            a: DMatrix::zeros(n, n),
            b: DMatrix::identity(n, n),
            q: DMatrix::identity(n, n),
            u: DMatrix::identity(n, n),
        }
    }

    #[test]
    fn cbf_values() {
        let z = DVector::zeros(3);
        assert!((cbf_value(&dvector![1.0, 0.0, 0.0], &z, 0.3) + 0.91).abs() < 1e-15);
        assert_eq!(cbf_value(&z, &z, 0.3), 0.3 * 0.3);
        assert!(cbf_value(&dvector![0.3, 0.0, 0.0], &z, 0.3).abs() < 1e-16);
    }

    #[test]
    fn hand_evaluated_constraint() {
        let m = integrator(3);
        let x_i = dvector![1.0, 0.0, 0.0];
        let x_j = DVector::zeros(3);
        let u_j = DVector::zeros(3);
        let ctx = PairContext {
            x_i: &x_i,
            x_j: &x_j,
            model_i: &m,
            model_j: &m,
            u_j: &u_j,
        };
        let c = build_constraint(0, 1, ctx, 1.0, 0.3);
        assert_eq!(c.a, dvector![-2.0, 0.0, 0.0]);
        assert!((c.b - 0.91).abs() < 1e-15);
        assert!((c.h + 0.91).abs() < 1e-15);
    }

    #[test]
    fn equality_gives_exponential_decay_rate() {
        // With aᵀu_i = b the barrier evolves as ḣ = −δh exactly.
        let mi = AgentModel {
            a: DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            b: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
            q: DMatrix::identity(2, 2),
            u: DMatrix::identity(2, 2),
        };
        let mj = AgentModel {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            ..mi.clone()
        };
        let (x_i, x_j) = (dvector![0.4, -0.1], dvector![0.1, 0.2]);
        let u_j = dvector![0.3, -0.7];
        let ctx = PairContext {
            x_i: &x_i,
            x_j: &x_j,
            model_i: &mi,
            model_j: &mj,
            u_j: &u_j,
        };
        let c = build_constraint(0, 1, ctx, 2.5, 0.3);
        let u_i = &c.a * (c.b / c.a.norm_squared());
        let xdot_i = &mi.a * &x_i + &mi.b * &u_i;
        let xdot_j = &mj.a * &x_j + &mj.b * &u_j;
        let hdot = -2.0 * (&x_i - &x_j).dot(&(xdot_i - xdot_j));
        assert!((hdot + 2.5 * c.h).abs() < 1e-14);
    }

    #[test]
    fn interior_optimum_is_untouched() {
        let u_bar = dvector![0.2, -0.1];
        let c = PairConstraint {
            i: 0,
            j: 1,
            a: dvector![1.0, 0.0],
            b: 5.0,
            delta: 1.0,
            h: -1.0,
        };
        let r = solve_agent_qp(0, &u_bar, vec![c], None).unwrap();
        assert_eq!(r.u, u_bar);
        assert_eq!(r.delta_u.norm(), 0.0);
        assert!(r.active_pairs.is_empty());
        let none = solve_agent_qp(0, &u_bar, vec![], None).unwrap();
        assert_eq!(none.u, u_bar);
    }

    #[test]
    fn single_violated_row_projects_onto_half_space() {
        let u_bar = dvector![2.0, 1.0, -1.0];
        let a = dvector![1.0, 2.0, 0.5];
        let b = 0.5;
        let c = PairConstraint {
            i: 0,
            j: 2,
            a: a.clone(),
            b,
            delta: 1.0,
            h: 0.0,
        };
        let r = solve_agent_qp(0, &u_bar, vec![c], None).unwrap();
        let expected = &u_bar - &a * ((a.dot(&u_bar) - b) / a.norm_squared());
        assert!((r.u - expected).amax() < 1e-14);
        assert_eq!(r.active_pairs, vec![(0, 2)]);
    }

    #[test]
    fn opposing_rows_are_infeasible() {
        let rows = vec![
            PairConstraint {
                i: 0,
                j: 1,
                a: dvector![1.0],
                b: -1.0,
                delta: 1.0,
                h: 0.0,
            },
            PairConstraint {
                i: 0,
                j: 2,
                a: dvector![-1.0],
                b: -1.0,
                delta: 1.0,
                h: 0.0,
            },
        ];
        let err = solve_agent_qp(0, &dvector![0.0], rows, None).unwrap_err();
        assert_eq!(
            err,
            Error::QpInfeasible {
                agent: 1,
                pairs: vec![(1, 2), (1, 3)]
            }
        );
    }

    #[test]
    fn box_bounds_clip() {
        let bx = InputBox {
            lower: dvector![-1.0, -1.0],
            upper: dvector![1.0, 1.0],
        };
        let r = solve_agent_qp(0, &dvector![3.0, -0.5], vec![], Some(&bx)).unwrap();
        assert!((r.u - dvector![1.0, -0.5]).amax() < 1e-15);
    }

    #[test]
    fn pair_order_matches_backward_scheme() {
        assert_eq!(
            backward_pair_order(4),
            vec![(2, 3), (1, 2), (1, 3), (0, 1), (0, 2), (0, 3)]
        );
    }

    #[test]
    fn distant_agents_keep_inputs() {
        let models = vec![integrator(3); 4];
        let states: Vec<_> = (0..4).map(|k| dvector![3.0 * k as f64, 0.0, 0.0]).collect();
        let u_bars: Vec<_> = (0..4)
            .map(|k| dvector![0.01 * k as f64, 0.02, -0.01])
            .collect();
        let out = sequential_filter(
            &u_bars,
            &states,
            &models,
            &SafetyParams::uniform(4, 0.3, 5.0),
        )
        .unwrap();
        for (r, ub) in out.iter().zip(&u_bars) {
            assert_eq!(&r.u, ub);
        }
        assert_eq!(out[3].constraints.len(), 0);
        assert_eq!(out[2].constraints.len(), 1);
        assert_eq!(out[1].constraints.len(), 2);
        assert_eq!(out[0].constraints.len(), 3);
    }

    #[test]
    fn head_on_pair_deflects_lower_agent() {
        let models = vec![integrator(3); 2];
        let states = vec![dvector![0.0, 0.0, 0.0], dvector![0.4, 0.0, 0.0]];
        let u_bars = vec![dvector![1.0, 0.0, 0.0], dvector![-1.0, 0.0, 0.0]];
        let params = SafetyParams::uniform(2, 0.3, 5.0);
        let out = sequential_filter(&u_bars, &states, &models, &params).unwrap();
        assert_eq!(out[1].u, u_bars[1]);
        assert_ne!(out[0].u, u_bars[0]);
        let d = &states[0] - &states[1];
        let h = cbf_value(&states[0], &states[1], 0.3);
        let hdot = -2.0 * d.dot(&(&out[0].u - &out[1].u));
        assert!(hdot <= -5.0 * h + 1e-9);
    }
}
