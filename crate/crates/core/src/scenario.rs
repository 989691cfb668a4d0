//! Declarative scenario files: parsing, validation, and compilation into
//! a runnable [`System`] plus its initial [`WorldState`].
//!
//! Matrices are nested row arrays in row-major order. Agent indices in the
//! file (per-pair overrides) are 1-based.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackClock, AttackProfile, ExpSignal};
use crate::gains::{check_leader_assumption, synthesize_gains, AgentModel, LeaderModel};
use crate::linalg::matrix_from_rows;
use crate::observer::DEFAULT_EXP_CAP;
use crate::safety::{InputBox, SafetyParams};
use crate::sim::{ControllerMode, FollowerSpec, InfeasiblePolicy, RunOptions, System, WorldState};
use crate::topology::{build_phi_family, check_reachability, Topology};

const BUNDLED_DEFAULT: &str = include_str!("../scenarios/paper_sec4.json");

/// Names accepted by [`builtin`].
pub const BUILTIN_SCENARIOS: &[&str] = &["paper_sec4"];

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub leader: LeaderConfig,
    pub followers: Vec<FollowerConfig>,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub attack_start: f64,
    #[serde(default)]
    pub absolute_clock: bool,
    pub safety: SafetyConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    #[serde(rename = "S")]
    pub s: Rows,
    pub initial_states: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "U")]
    pub u: Rows,
    pub x0: Vec<f64>,
    /// Defaults to `x0`.
    #[serde(default)]
    pub zeta0: Option<Vec<f64>>,
    #[serde(default)]
    pub theta0: f64,
    #[serde(default)]
    pub rho0: f64,
    #[serde(default = "one")]
    pub q_adapt: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default)]
    pub attack: AttackConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpTerm {
    pub coeff: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// One term per input channel; empty means no attack.
    #[serde(default)]
    pub cil: Vec<ExpTerm>,
    /// One term per state component; empty means no attack.
    #[serde(default)]
    pub ol: Vec<ExpTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// `N × N`, entry `(i, j)` is follower `i`'s weight on follower `j`.
    pub adjacency: Rows,
    /// `N × M`, entry `(i, r)` is follower `i`'s pinning gain on leader `r`.
    pub pinning: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaOverride {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub d_s: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub delta_overrides: Vec<DeltaOverride>,
    /// Either absent or one box per follower.
    #[serde(default)]
    pub input_bounds: Option<Vec<BoxConfig>>,
}

fn default_delta() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub dt: f64,
    pub stride: usize,
    pub mode: ControllerMode,
    pub theta_cap: f64,
    pub rho_cap: f64,
    pub divergence_threshold: f64,
    pub tail_fraction: f64,
    pub on_infeasible: InfeasiblePolicy,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let run = RunOptions::default();
        Self {
            horizon: run.horizon,
            dt: run.dt,
            stride: run.stride,
            mode: ControllerMode::Saar,
            theta_cap: DEFAULT_EXP_CAP,
            rho_cap: DEFAULT_EXP_CAP,
            divergence_threshold: run.divergence_threshold,
            tail_fraction: run.tail_fraction,
            on_infeasible: InfeasiblePolicy::Abort,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation error(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            horizon: self.simulation.horizon,
            dt: self.simulation.dt,
            stride: self.simulation.stride,
            divergence_threshold: self.simulation.divergence_threshold,
            tail_fraction: self.simulation.tail_fraction,
        }
    }

    /// Every violation found; an empty list means [`compile`](Self::compile) succeeds.
    pub fn validate(&self) -> Vec<Violation> {
        match self.compile() {
            Ok(_) => Vec::new(),
            Err(ScenarioError::Invalid(v)) => v,
            Err(other) => vec![Violation {
                field: "scenario".into(),
                message: other.to_string(),
            }],
        }
    }

    /// Validates and builds the system, synthesising all gains.
    pub fn compile(&self) -> Result<(System, WorldState), ScenarioError> {
        let mut v = Violations::default();

        let s = v.matrix("leader.S", &self.leader.s);
        let n = s.as_ref().map(|s| s.nrows());
        let leader = s.and_then(|s| {
            if !s.is_square() || s.is_empty() {
                v.push("leader.S", "must be square and non-empty");
                return None;
            }
            let check = check_leader_assumption(&LeaderModel { s: s.clone() });
            if !check.passed {
                v.push("leader.S", check.reason.unwrap_or_default());
            }
            Some(LeaderModel { s })
        });

        let n_f = self.followers.len();
        if n_f == 0 {
            v.push("followers", "at least one follower is required");
        }
        let n_l = self.leader.initial_states.len();
        if n_l == 0 {
            v.push("leader.initial_states", "at least one leader is required");
        }
        if let Some(n) = n {
            for (r, x) in self.leader.initial_states.iter().enumerate() {
                if x.len() != n {
                    v.push(
                        format!("leader.initial_states[{}]", r + 1),
                        format!("expected length {n}, got {}", x.len()),
                    );
                }
            }
        }

        let topology = self.compile_topology(&mut v, n_f, n_l);
        let phi = topology.as_ref().and_then(|t| match build_phi_family(t) {
            Ok(p) => Some(p),
            Err(e) => {
                v.push("topology", e.to_string());
                None
            }
        });

        let clock = if self.absolute_clock {
            AttackClock::Absolute
        } else {
            AttackClock::Shifted
        };
        if self.attack_start.is_nan() || self.attack_start < 0.0 {
            v.push("attack_start", "must be >= 0");
        }

        let mut followers = Vec::with_capacity(n_f);
        for (idx, f) in self.followers.iter().enumerate() {
            let field = |name: &str| format!("followers[{}].{name}", idx + 1);
            let (a, b, q, u) = (
                v.matrix(&field("A"), &f.a),
                v.matrix(&field("B"), &f.b),
                v.matrix(&field("Q"), &f.q),
                v.matrix(&field("U"), &f.u),
            );
            for (name, value) in [("q_adapt", f.q_adapt), ("alpha", f.alpha), ("c", f.c)] {
                v.positive(&field(name), value);
            }
            for (name, value) in [("theta0", f.theta0), ("rho0", f.rho0)] {
                if !value.is_finite() {
                    v.push(field(name), "must be finite");
                }
            }
            let (Some(a), Some(b), Some(q), Some(u)) = (a, b, q, u) else {
                continue;
            };
            let model = AgentModel { a, b, q, u };
            let problems = model.violations();
            for p in &problems {
                let name = ["Q", "U", "B", "A"]
                    .into_iter()
                    .find(|m| p.starts_with(m))
                    .unwrap_or("model");
                v.push(field(name), p.clone());
            }
            let dim = model.state_dim();
            if n.is_some_and(|n| n != dim) {
                v.push(
                    field("A"),
                    format!(
                        "state dimension {dim} differs from leader dimension {}",
                        n.unwrap_or(0)
                    ),
                );
                continue;
            }
            if f.x0.len() != dim {
                v.push(
                    field("x0"),
                    format!("expected length {dim}, got {}", f.x0.len()),
                );
            }
            if let Some(z) = &f.zeta0 {
                if z.len() != dim {
                    v.push(
                        field("zeta0"),
                        format!("expected length {dim}, got {}", z.len()),
                    );
                }
            }
            let m = model.input_dim();
            let cil = v.signal(
                &field("attack.cil"),
                &f.attack.cil,
                m,
                self.attack_start,
                clock,
            );
            let ol = v.signal(
                &field("attack.ol"),
                &f.attack.ol,
                dim,
                self.attack_start,
                clock,
            );
            if !problems.is_empty() {
                continue;
            }
            let Some(leader) = leader.as_ref() else {
                continue;
            };
            match synthesize_gains(&model, leader) {
                Ok(gains) => {
                    if let (Some(cil), Some(ol)) = (cil, ol) {
                        followers.push(FollowerSpec {
                            model,
                            gains,
                            attack: AttackProfile { cil, ol },
                            q: f.q_adapt,
                            alpha: f.alpha,
                            c: f.c,
                        });
                    }
                }
                Err(e) => v.push(field("gains"), e.to_string()),
            }
        }

        let safety = self.compile_safety(&mut v, n_f);
        let sim = &self.simulation;
        v.positive("simulation.dt", sim.dt);
        v.positive("simulation.horizon", sim.horizon);
        v.positive("simulation.theta_cap", sim.theta_cap);
        v.positive("simulation.rho_cap", sim.rho_cap);
        v.positive("simulation.divergence_threshold", sim.divergence_threshold);
        if sim.stride == 0 {
            v.push("simulation.stride", "must be >= 1");
        }
        if !(sim.tail_fraction > 0.0 && sim.tail_fraction <= 1.0) {
            v.push("simulation.tail_fraction", "must lie in (0, 1]");
        }
        if sim.dt > 0.0 && sim.horizon > 0.0 && sim.dt > sim.horizon {
            v.push("simulation.dt", "must not exceed the horizon");
        }

        if !v.0.is_empty() {
            return Err(ScenarioError::Invalid(v.0));
        }
        let (Some(leader), Some(topology), Some(phi), Some(safety)) =
            (leader, topology, phi, safety)
        else {
            unreachable!("missing components always record a violation");
        };
        let system = System {
            followers,
            leader,
            topology,
            phi,
            safety,
            mode: sim.mode,
            theta_cap: sim.theta_cap,
            rho_cap: sim.rho_cap,
            on_infeasible: sim.on_infeasible,
        };
        let world = WorldState {
            t: 0.0,
            leader_x: self
                .leader
                .initial_states
                .iter()
                .map(|x| DVector::from_column_slice(x))
                .collect(),
            follower_x: self
                .followers
                .iter()
                .map(|f| DVector::from_column_slice(&f.x0))
                .collect(),
            zeta: self
                .followers
                .iter()
                .map(|f| DVector::from_column_slice(f.zeta0.as_deref().unwrap_or(&f.x0)))
                .collect(),
            theta: self.followers.iter().map(|f| f.theta0).collect(),
            rho_hat: self.followers.iter().map(|f| f.rho0).collect(),
        };
        Ok((system, world))
    }

    fn compile_topology(&self, v: &mut Violations, n_f: usize, n_l: usize) -> Option<Topology> {
        let adj = v.matrix("topology.adjacency", &self.topology.adjacency)?;
        let pins = v.matrix("topology.pinning", &self.topology.pinning)?;
        if adj.shape() != (n_f, n_f) {
            v.push(
                "topology.adjacency",
                format!("expected {n_f}x{n_f}, got {}x{}", adj.nrows(), adj.ncols()),
            );
            return None;
        }
        if pins.shape() != (n_f, n_l) {
            v.push(
                "topology.pinning",
                format!(
                    "expected {n_f}x{n_l} (followers x leaders), got {}x{}",
                    pins.nrows(),
                    pins.ncols()
                ),
            );
            return None;
        }
        match Topology::from_pinning_table(adj, &pins) {
            Ok(t) => {
                let unreachable = check_reachability(&t);
                if !unreachable.is_empty() {
                    let names: Vec<_> = unreachable.iter().map(|i| i + 1).collect();
                    v.push(
                        "topology",
                        format!("followers {names:?} have no directed path from any leader"),
                    );
                    return None;
                }
                Some(t)
            }
            Err(e) => {
                v.push("topology", e.to_string());
                None
            }
        }
    }

    fn compile_safety(&self, v: &mut Violations, n_f: usize) -> Option<SafetyParams> {
        let cfg = &self.safety;
        let before = v.0.len();
        v.positive("safety.d_s", cfg.d_s);
        v.positive("safety.delta", cfg.delta);
        let mut params = SafetyParams::uniform(n_f, cfg.d_s, cfg.delta);
        for (k, o) in cfg.delta_overrides.iter().enumerate() {
            let field = format!("safety.delta_overrides[{}]", k + 1);
            if !(o.i >= 1 && o.i < o.j && o.j <= n_f) {
                v.push(
                    &field,
                    format!("pair ({}, {}) must satisfy 1 <= i < j <= {n_f}", o.i, o.j),
                );
                continue;
            }
            v.positive(&field, o.delta);
            params.delta[(o.i - 1, o.j - 1)] = o.delta;
        }
        if let Some(boxes) = &cfg.input_bounds {
            if boxes.len() != n_f {
                v.push(
                    "safety.input_bounds",
                    format!("expected {n_f} boxes, got {}", boxes.len()),
                );
            } else {
                let mut out = Vec::with_capacity(n_f);
                for (i, (bx, f)) in boxes.iter().zip(&self.followers).enumerate() {
                    let m = f.b.first().map_or(0, Vec::len);
                    let field = format!("safety.input_bounds[{}]", i + 1);
                    if bx.lower.len() != m || bx.upper.len() != m {
                        v.push(&field, format!("bounds must have length {m}"));
                    } else if bx
                        .lower
                        .iter()
                        .zip(&bx.upper)
                        .any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo > hi)
                    {
                        v.push(&field, "lower bound exceeds upper bound");
                    }
                    out.push(InputBox {
                        lower: DVector::from_column_slice(&bx.lower),
                        upper: DVector::from_column_slice(&bx.upper),
                    });
                }
                params.input_bounds = Some(out);
            }
        }
        (v.0.len() == before).then_some(params)
    }
}

#[derive(Default)]
struct Violations(Vec<Violation>);

impl Violations {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    fn positive(&mut self, field: &str, value: f64) {
        if !(value > 0.0 && value.is_finite()) {
            self.push(field, format!("must be positive and finite, got {value}"));
        }
    }

    fn matrix(&mut self, field: &str, rows: &Rows) -> Option<DMatrix<f64>> {
        if rows.is_empty() || rows[0].is_empty() {
            self.push(field, "matrix is empty");
            return None;
        }
        match matrix_from_rows(rows) {
            Ok(m) if m.iter().all(|x| x.is_finite()) => Some(m),
            Ok(_) => {
                self.push(field, "matrix has non-finite entries");
                None
            }
            Err(e) => {
                self.push(field, e.to_string());
                None
            }
        }
    }

    fn signal(
        &mut self,
        field: &str,
        terms: &[ExpTerm],
        dim: usize,
        start: f64,
        clock: AttackClock,
    ) -> Option<ExpSignal> {
        if terms.is_empty() {
            return Some(ExpSignal::zero(dim));
        }
        if terms.len() != dim {
            self.push(field, format!("expected {dim} terms, got {}", terms.len()));
            return None;
        }
        if terms
            .iter()
            .any(|t| !t.coeff.is_finite() || !t.rate.is_finite())
        {
            self.push(field, "attack terms must be finite");
            return None;
        }
        Some(ExpSignal::new(
            terms.iter().map(|t| t.coeff).collect(),
            terms.iter().map(|t| t.rate).collect(),
            start,
            clock,
        ))
    }
}

/// Bundled scenario by name.
pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    match name {
        "paper_sec4" => {
            Some(ScenarioConfig::from_json(BUNDLED_DEFAULT).expect("bundled scenario parses"))
        }
        _ => None,
    }
}

/// Accepts either a bundled scenario name or a path to a JSON file.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig, ScenarioError> {
    if let Some(cfg) = builtin(spec) {
        return Ok(cfg);
    }
    load_scenario_file(Path::new(spec))
}

/// Reads, parses and fully validates a scenario file.
pub fn load_scenario_file(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg = ScenarioConfig::from_json(&text)?;
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(ScenarioError::Invalid(violations));
    }
    Ok(cfg)
}

/// Scalar parameters accepted by [`ScenarioConfig::set_scalar`].
pub const SWEEPABLE: &[&str] = &[
    "d_s",
    "delta",
    "q",
    "alpha",
    "c",
    "attack_start",
    "attack_scale",
    "horizon",
    "dt",
    "theta_cap",
    "rho_cap",
];

impl ScenarioConfig {
    /// Zeroes every attack coefficient.
    pub fn without_attacks(mut self) -> Self {
        for f in &mut self.followers {
            f.attack = AttackConfig::default();
        }
        self
    }

    /// Sets a named scalar. Per-follower gains are set on every follower;
    /// `attack_scale` multiplies every attack coefficient.
    pub fn set_scalar(&mut self, name: &str, value: f64) -> Result<(), String> {
        match name {
            "d_s" => self.safety.d_s = value,
            "delta" => {
                self.safety.delta = value;
                self.safety.delta_overrides.clear();
            }
            "q" => self.followers.iter_mut().for_each(|f| f.q_adapt = value),
            "alpha" => self.followers.iter_mut().for_each(|f| f.alpha = value),
            "c" => self.followers.iter_mut().for_each(|f| f.c = value),
            "attack_start" => self.attack_start = value,
            "attack_scale" => {
                for f in &mut self.followers {
                    for term in f.attack.cil.iter_mut().chain(f.attack.ol.iter_mut()) {
                        term.coeff *= value;
                    }
                }
            }
            "horizon" => self.simulation.horizon = value,
            "dt" => self.simulation.dt = value,
            "theta_cap" => self.simulation.theta_cap = value,
            "rho_cap" => self.simulation.rho_cap = value,
            _ => {
                return Err(format!(
                    "unknown parameter '{name}', expected one of {}",
                    SWEEPABLE.join(", ")
                ))
            }
        }
        Ok(())
    }
}
