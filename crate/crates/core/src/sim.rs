//! Closed-loop simulation of leaders, followers, observers and adaptive
//! gains, with per-step trace records and run summaries.

use std::time::Instant;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attacks::{eval_attack, AttackProfile};
use crate::controller::{
    compensation_signal, compensator_rate, conventional_input, corrupted_input, CompensatorState,
};
use crate::error::{Error, Result};
use crate::gains::{AgentModel, GainSet, LeaderModel};
use crate::integrator::rk4_step;
use crate::linalg::stack;
use crate::observer::{capped_exp, neighborhood_xi, observer_derivatives, ObserverState};
use crate::safety::{cbf_value, sequential_filter, SafetyParams};
use crate::topology::{PhiFamily, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Resilient observer, attack compensation and the barrier QP.
    #[default]
    Saar,
    /// Resilient observer and compensation, QP disabled.
    ResilientUnsafe,
    /// Fixed-gain observer, `u = Kx + Hζ + γ^a`, no compensation, no QP.
    Conventional,
}

impl ControllerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerMode::Saar => "saar",
            ControllerMode::ResilientUnsafe => "resilient_unsafe",
            ControllerMode::Conventional => "conventional",
        }
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "saar" => Ok(Self::Saar),
            "resilient_unsafe" => Ok(Self::ResilientUnsafe),
            "conventional" => Ok(Self::Conventional),
            other => Err(format!("unknown controller mode '{other}'")),
        }
    }
}

/// What to do when a safety QP has no solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasiblePolicy {
    /// Stop the run and report the conflicting pairs.
    #[default]
    Abort,
    /// Apply `ū` unfiltered for that evaluation and count the event.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSpec {
    pub model: AgentModel,
    pub gains: GainSet,
    pub attack: AttackProfile,
    pub q: f64,
    pub alpha: f64,
    pub c: f64,
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub followers: Vec<FollowerSpec>,
    pub leader: LeaderModel,
    pub topology: Topology,
    pub phi: PhiFamily,
    pub safety: SafetyParams,
    pub mode: ControllerMode,
    pub theta_cap: f64,
    pub rho_cap: f64,
    pub on_infeasible: InfeasiblePolicy,
}

impl System {
    pub fn n_followers(&self) -> usize {
        self.followers.len()
    }

    pub fn n_leaders(&self) -> usize {
        self.phi.n_leaders()
    }

    pub fn state_dim(&self) -> usize {
        self.leader.s.nrows()
    }

    fn models(&self) -> Vec<AgentModel> {
        self.followers.iter().map(|f| f.model.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub t: f64,
    pub leader_x: Vec<DVector<f64>>,
    pub follower_x: Vec<DVector<f64>>,
    pub zeta: Vec<DVector<f64>>,
    pub theta: Vec<f64>,
    pub rho_hat: Vec<f64>,
}

impl WorldState {
    /// Layout: leaders, followers, observer states, `ϑ`, `ρ̂`.
    fn pack(&self) -> DVector<f64> {
        let mut parts: Vec<DVector<f64>> = Vec::new();
        parts.extend(self.leader_x.iter().cloned());
        parts.extend(self.follower_x.iter().cloned());
        parts.extend(self.zeta.iter().cloned());
        parts.push(DVector::from_column_slice(&self.theta));
        parts.push(DVector::from_column_slice(&self.rho_hat));
        stack(&parts)
    }

    fn unpack(t: f64, y: &DVector<f64>, n_leaders: usize, n_followers: usize, dim: usize) -> Self {
        let block = |k: usize| DVector::from_column_slice(&y.as_slice()[k * dim..(k + 1) * dim]);
        let leader_x = (0..n_leaders).map(block).collect();
        let follower_x = (0..n_followers).map(|i| block(n_leaders + i)).collect();
        let zeta = (0..n_followers)
            .map(|i| block(n_leaders + n_followers + i))
            .collect();
        let off = (n_leaders + 2 * n_followers) * dim;
        let theta = y.as_slice()[off..off + n_followers].to_vec();
        let rho_hat = y.as_slice()[off + n_followers..off + 2 * n_followers].to_vec();
        Self {
            t,
            leader_x,
            follower_x,
            zeta,
            theta,
            rho_hat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    pub x: DVector<f64>,
    pub zeta: DVector<f64>,
    pub theta: f64,
    pub rho_hat: f64,
    pub xi: DVector<f64>,
    pub eps: DVector<f64>,
    pub u_c: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    pub u_r: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub u: DVector<f64>,
    pub delta_u: DVector<f64>,
    pub gamma_a: DVector<f64>,
    pub gamma_ol: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    /// 0-based, `i < j`
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub h: f64,
    pub active: bool,
}

/// Everything observable at one instant of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub agents: Vec<AgentSample>,
    pub leaders: Vec<DVector<f64>>,
    pub e_c: DVector<f64>,
    pub delta_o: DVector<f64>,
    pub pairs: Vec<PairSample>,
    pub qp_infeasible: bool,
}

impl TraceRecord {
    pub fn ec_norm(&self) -> f64 {
        self.e_c.norm()
    }

    pub fn eps_stacked(&self) -> DVector<f64> {
        stack(
            &self
                .agents
                .iter()
                .map(|a| a.eps.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn xi_stacked(&self) -> DVector<f64> {
        stack(&self.agents.iter().map(|a| a.xi.clone()).collect::<Vec<_>>())
    }

    pub fn min_pair_distance(&self) -> Option<(f64, usize, usize)> {
        self.pairs
            .iter()
            .map(|p| (p.distance, p.i, p.j))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// `e_c = x − (ΣΦ ⊗ I)⁻¹ Σ_r (Φ_r ⊗ I)(1 ⊗ x_r)`, stacked.
pub fn containment_error(
    follower_x: &[DVector<f64>],
    leader_x: &[DVector<f64>],
    phi: &PhiFamily,
) -> DVector<f64> {
    let targets = phi.hull_targets(leader_x);
    stack(
        &follower_x
            .iter()
            .zip(&targets)
            .map(|(x, target)| x - target)
            .collect::<Vec<_>>(),
    )
}

/// Same as [`containment_error`] with observer states in place of `x`.
pub fn observer_containment_error(
    zetas: &[DVector<f64>],
    leader_x: &[DVector<f64>],
    phi: &PhiFamily,
) -> DVector<f64> {
    containment_error(zetas, leader_x, phi)
}

struct Evaluation {
    rates: DVector<f64>,
    agents: Vec<AgentSample>,
    active_pairs: Vec<(usize, usize)>,
    qp_infeasible: bool,
    clamped: bool,
}

impl System {
    fn evaluate(&self, world: &WorldState) -> Result<Evaluation> {
        let t = world.t;
        let n_f = self.n_followers();
        let conventional = self.mode == ControllerMode::Conventional;
        let mut clamped = false;

        let leader_rates: Vec<DVector<f64>> =
            world.leader_x.iter().map(|x| &self.leader.s * x).collect();

        let mut partial = Vec::with_capacity(n_f);
        for (i, f) in self.followers.iter().enumerate() {
            let xi = neighborhood_xi(i, &world.zeta, &world.leader_x, &self.topology);
            let (gamma_a, gamma_ol) = eval_attack(&f.attack, t);
            let obs = ObserverState {
                zeta: world.zeta[i].clone(),
                theta: world.theta[i],
                q: f.q,
            };
            let mut obs_rates =
                observer_derivatives(&obs, &xi, &gamma_ol, &self.leader, self.theta_cap);
            clamped |= obs_rates.clamped;

            let x = &world.follower_x[i];
            let eps = x - &world.zeta[i];
            let u_c = conventional_input(&f.gains, x, &world.zeta[i]);
            let comp = CompensatorState {
                rho_hat: world.rho_hat[i],
                alpha: f.alpha,
                c: f.c,
            };
            let (gamma_hat, drho) = if conventional {
                obs_rates.dtheta = 0.0;
                (DVector::zeros(f.model.input_dim()), 0.0)
            } else {
                clamped |= comp.rho_hat > self.rho_cap;
                (
                    compensation_signal(&f.gains, &f.model, &eps, &comp, t, self.rho_cap),
                    compensator_rate(&f.gains, &f.model, &eps, &comp),
                )
            };
            let breakdown = corrupted_input(u_c, gamma_hat, &gamma_a);
            partial.push((xi, eps, gamma_a, gamma_ol, obs_rates, drho, breakdown));
        }

        let u_bars: Vec<DVector<f64>> = partial.iter().map(|p| p.6.u_bar.clone()).collect();
        let mut qp_infeasible = false;
        let mut active_pairs = Vec::new();
        let inputs: Vec<DVector<f64>> = if self.mode == ControllerMode::Saar {
            match sequential_filter(&u_bars, &world.follower_x, &self.models(), &self.safety) {
                Ok(results) => {
                    for r in &results {
                        active_pairs.extend(r.active_pairs.iter().copied());
                    }
                    results.into_iter().map(|r| r.u).collect()
                }
                Err(e)
                    if e.is_qp_infeasible()
                        && self.on_infeasible == InfeasiblePolicy::Passthrough =>
                {
                    qp_infeasible = true;
                    u_bars.clone()
                }
                Err(e) => return Err(e.at(t)),
            }
        } else {
            u_bars.clone()
        };

        let mut follower_rates = Vec::with_capacity(n_f);
        let mut zeta_rates = Vec::with_capacity(n_f);
        let mut theta_rates = Vec::with_capacity(n_f);
        let mut rho_rates = Vec::with_capacity(n_f);
        let mut agents = Vec::with_capacity(n_f);
        for (i, ((xi, eps, gamma_a, gamma_ol, obs_rates, drho, breakdown), u)) in
            partial.into_iter().zip(inputs).enumerate()
        {
            let f = &self.followers[i];
            let x = &world.follower_x[i];
            follower_rates.push(&f.model.a * x + &f.model.b * &u);
            zeta_rates.push(obs_rates.dzeta);
            theta_rates.push(obs_rates.dtheta);
            rho_rates.push(drho);
            agents.push(AgentSample {
                x: x.clone(),
                zeta: world.zeta[i].clone(),
                theta: world.theta[i],
                rho_hat: world.rho_hat[i],
                xi,
                eps,
                delta_u: &u - &breakdown.u_bar,
                u,
                u_c: breakdown.u_c,
                gamma_hat: breakdown.gamma_hat,
                u_r: breakdown.u_r,
                u_bar: breakdown.u_bar,
                gamma_a,
                gamma_ol,
            });
        }

        let mut parts = leader_rates;
        parts.extend(follower_rates);
        parts.extend(zeta_rates);
        parts.push(DVector::from_vec(theta_rates));
        parts.push(DVector::from_vec(rho_rates));
        Ok(Evaluation {
            rates: stack(&parts),
            agents,
            active_pairs,
            qp_infeasible,
            clamped,
        })
    }

    fn record(&self, world: &WorldState, eval: Evaluation) -> TraceRecord {
        let n_f = self.n_followers();
        let mut pairs = Vec::with_capacity(n_f * n_f.saturating_sub(1) / 2);
        for i in 0..n_f {
            for j in i + 1..n_f {
                let (xi, xj) = (&world.follower_x[i], &world.follower_x[j]);
                pairs.push(PairSample {
                    i,
                    j,
                    distance: (xi - xj).norm(),
                    h: cbf_value(xi, xj, self.safety.d_s),
                    active: eval.active_pairs.contains(&(i, j)),
                });
            }
        }
        TraceRecord {
            t: world.t,
            agents: eval.agents,
            leaders: world.leader_x.clone(),
            e_c: containment_error(&world.follower_x, &world.leader_x, &self.phi),
            delta_o: observer_containment_error(&world.zeta, &world.leader_x, &self.phi),
            pairs,
            qp_infeasible: eval.qp_infeasible,
        }
    }

    /// Gershgorin bound on the observer's fastest rate, `max_i 2 e^ϑ_i d_i`
    /// with `d_i` the total neighbour and pinning weight of follower `i`.
    pub fn observer_stiffness(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(i, &th)| {
                let degree: f64 = (0..self.n_followers())
                    .map(|j| self.topology.weight(i, j))
                    .sum::<f64>()
                    + (0..self.n_leaders())
                        .map(|r| self.topology.pin(i, r))
                        .sum::<f64>();
                2.0 * capped_exp(th, self.theta_cap).0 * degree
            })
            .fold(0.0, f64::max)
    }

    /// Full observation of the closed loop at `world` without advancing it.
    pub fn observe(&self, world: &WorldState) -> Result<TraceRecord> {
        let eval = self.evaluate(world)?;
        Ok(self.record(world, eval))
    }

    /// One RK4 step. The returned record describes the state at the start
    /// of the step, including the inputs applied in its first stage.
    pub fn step(&self, world: &WorldState, dt: f64) -> Result<(WorldState, TraceRecord)> {
        let (next, record, _) = self.step_inner(world, dt)?;
        Ok((next, record))
    }

    fn step_inner(
        &self,
        world: &WorldState,
        dt: f64,
    ) -> Result<(WorldState, TraceRecord, StepFlags)> {
        let (n_l, n_f, dim) = (self.n_leaders(), self.n_followers(), self.state_dim());
        let first = self.evaluate(world)?;
        let mut flags = StepFlags {
            infeasible: first.qp_infeasible,
            clamped: first.clamped,
        };
        let k1 = first.rates.clone();
        let record = self.record(world, first);

        let y = world.pack();
        let mut stage = 0;
        let next = rk4_step(
            |t, y| {
                stage += 1;
                if stage == 1 {
                    return Ok(k1.clone());
                }
                let eval = self.evaluate(&WorldState::unpack(t, y, n_l, n_f, dim))?;
                flags.infeasible |= eval.qp_infeasible;
                flags.clamped |= eval.clamped;
                Ok::<_, Error>(eval.rates)
            },
            world.t,
            &y,
            dt,
        )?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t: world.t + dt,
                what: "closed-loop state".into(),
            });
        }
        Ok((
            WorldState::unpack(world.t + dt, &next, n_l, n_f, dim),
            record,
            flags,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
struct StepFlags {
    infeasible: bool,
    clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `stride`-th step in the returned trace.
    pub stride: usize,
    pub divergence_threshold: f64,
    /// Fraction of the horizon, measured from the end, used for `max_ec_tail`.
    pub tail_fraction: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            horizon: 16.0,
            dt: 1e-3,
            stride: 10,
            divergence_threshold: 1e3,
            tail_fraction: 0.3,
        }
    }
}

impl RunOptions {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: ControllerMode,
    pub horizon: f64,
    pub dt: f64,
    pub steps_completed: usize,
    pub final_time: f64,
    pub max_ec: f64,
    pub max_ec_tail: f64,
    pub final_ec: f64,
    pub min_pair_distance: Option<f64>,
    /// 1-based pair and time of the closest approach.
    pub min_pair: Option<(usize, usize)>,
    pub min_pair_time: Option<f64>,
    pub first_divergence_time: Option<f64>,
    pub final_theta: Vec<f64>,
    pub final_rho: Vec<f64>,
    pub max_delta_u: f64,
    pub qp_infeasible_count: usize,
    pub exp_clamp_engaged: bool,
    /// First time the observer coupling gain pushed the fixed step past the
    /// explicit stability bound; results after it are unreliable.
    pub stiffness_exceeded_at: Option<f64>,
    pub wall_clock_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub summary: RunSummary,
    /// Set when the run stopped before the horizon.
    pub failure: Option<Error>,
}

struct Metrics {
    max_ec: f64,
    tail: f64,
    last_ec: f64,
    min_pair: Option<(f64, usize, usize, f64)>,
    divergence: Option<f64>,
    max_delta_u: f64,
}

impl Metrics {
    fn absorb(&mut self, rec: &TraceRecord, tail_start: f64, threshold: f64) {
        let ec = rec.ec_norm();
        self.last_ec = ec;
        self.max_ec = self.max_ec.max(ec);
        if rec.t >= tail_start {
            self.tail = self.tail.max(ec);
        }
        if self.divergence.is_none() && ec > threshold {
            self.divergence = Some(rec.t);
        }
        if let Some((d, i, j)) = rec.min_pair_distance() {
            if self.min_pair.is_none_or(|(best, ..)| d < best) {
                self.min_pair = Some((d, i, j, rec.t));
            }
        }
        for a in &rec.agents {
            self.max_delta_u = self.max_delta_u.max(a.delta_u.norm());
        }
    }
}

/// Real-axis extent of the classical RK4 stability region.
pub const RK4_STABILITY_LIMIT: f64 = 2.785;

/// Integrates from `initial` to the horizon, keeping every `stride`-th
/// record plus the final state. Metrics in the summary use every step.
pub fn run(system: &System, initial: WorldState, opts: &RunOptions) -> RunOutput {
    let started = Instant::now();
    let steps = opts.steps();
    let stride = opts.stride.max(1);
    let tail_start = opts.horizon * (1.0 - opts.tail_fraction);
    let mut metrics = Metrics {
        max_ec: 0.0,
        tail: 0.0,
        last_ec: 0.0,
        min_pair: None,
        divergence: None,
        max_delta_u: 0.0,
    };
    let mut records = Vec::with_capacity(steps / stride + 2);
    let mut world = initial;
    let mut infeasible_count = 0;
    let mut clamp_engaged = false;
    let mut stiff_at = None;
    let mut failure = None;
    let mut completed = 0;

    for k in 0..steps {
        match system.step_inner(&world, opts.dt) {
            Ok((mut next, rec, flags)) => {
                metrics.absorb(&rec, tail_start, opts.divergence_threshold);
                if flags.infeasible {
                    infeasible_count += 1;
                }
                if stiff_at.is_none()
                    && system.observer_stiffness(&next.theta) * opts.dt > RK4_STABILITY_LIMIT
                {
                    let t = (k + 1) as f64 * opts.dt;
                    warn!("observer gain exceeds the integrator stability bound at t = {t}; reduce dt");
                    stiff_at = Some(t);
                }
                if flags.clamped && !clamp_engaged {
                    warn!("adaptive gain exponent reached its cap at t = {}", rec.t);
                    clamp_engaged = true;
                }
                if k % stride == 0 {
                    records.push(rec);
                }
                // Re-derive time from the step index so long runs do not drift.
                next.t = (k + 1) as f64 * opts.dt;
                world = next;
                completed = k + 1;
            }
            Err(e) => {
                if e.is_qp_infeasible() {
                    infeasible_count += 1;
                }
                failure = Some(e);
                break;
            }
        }
    }
    if failure.is_none() {
        match system.observe(&world) {
            Ok(rec) => {
                metrics.absorb(&rec, tail_start, opts.divergence_threshold);
                records.push(rec);
            }
            Err(e) => {
                if e.is_qp_infeasible() {
                    infeasible_count += 1;
                }
                failure = Some(e);
            }
        }
    }

    let summary = RunSummary {
        mode: system.mode,
        horizon: opts.horizon,
        dt: opts.dt,
        steps_completed: completed,
        final_time: world.t,
        max_ec: metrics.max_ec,
        max_ec_tail: metrics.tail,
        final_ec: metrics.last_ec,
        min_pair_distance: metrics.min_pair.map(|m| m.0),
        min_pair: metrics.min_pair.map(|m| (m.1 + 1, m.2 + 1)),
        min_pair_time: metrics.min_pair.map(|m| m.3),
        first_divergence_time: metrics.divergence,
        final_theta: world.theta.clone(),
        final_rho: world.rho_hat.clone(),
        max_delta_u: metrics.max_delta_u,
        qp_infeasible_count: infeasible_count,
        exp_clamp_engaged: clamp_engaged,
        stiffness_exceeded_at: stiff_at,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        error: failure.as_ref().map(ToString::to_string),
    };
    RunOutput {
        records,
        summary,
        failure,
    }
}

/// Maxima of `values` over consecutive windows of `width` seconds covering
/// `[from, to]`; the last window is closed on the right.
pub fn windowed_maxima(samples: &[(f64, f64)], from: f64, to: f64, width: f64) -> Vec<f64> {
    let count = ((to - from) / width).round().max(1.0) as usize;
    (0..count)
        .map(|w| {
            let lo = from + w as f64 * width;
            let hi = if w + 1 == count { to } else { lo + width };
            samples
                .iter()
                .filter(|(t, _)| *t >= lo && (*t < hi || (w + 1 == count && *t <= hi)))
                .map(|&(_, v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Ultimate-boundedness check over `[from, to]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UubReport {
    pub reference: f64,
    pub sup: f64,
    pub ratio: f64,
    pub window_maxima: Vec<f64>,
    pub non_increasing: bool,
}

pub fn uub_report(samples: &[(f64, f64)], from: f64, to: f64, window: f64) -> UubReport {
    let reference = samples
        .iter()
        .min_by(|a, b| (a.0 - from).abs().total_cmp(&(b.0 - from).abs()))
        .map_or(f64::NAN, |s| s.1);
    let sup = samples
        .iter()
        .filter(|(t, _)| *t >= from && *t <= to)
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let window_maxima = windowed_maxima(samples, from, to, window);
    let non_increasing = window_maxima.windows(2).all(|w| w[1] <= w[0]);
    UubReport {
        reference,
        sup,
        ratio: sup / reference,
        window_maxima,
        non_increasing,
    }
}
