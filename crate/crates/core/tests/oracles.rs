mod common;

use common::*;
use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saar_core::attacks::eval_attack;
use saar_core::gains::{
    care_residual, check_leader_assumption, regulator_residual, synthesize_gains, AgentModel,
    LeaderModel,
};
use saar_core::linalg::{is_hurwitz, matrix_from_rows};
use saar_core::observer::neighborhood_xi;
use saar_core::safety::{
    backward_pair_order, build_constraint, cbf_value, kkt_residual, project_onto_polyhedron,
    HalfSpace, PairContext,
};
use saar_core::scenario::builtin;
use saar_core::sim::{
    containment_error, observer_containment_error, ControllerMode, System, WorldState,
};

fn default_system() -> (System, WorldState) {
    builtin("paper_sec4").unwrap().compile().unwrap()
}

fn randomize(world: &WorldState, rng: &mut ChaCha8Rng) -> WorldState {
    let mut w = world.clone();
    for v in w
        .follower_x
        .iter_mut()
        .chain(w.zeta.iter_mut())
        .chain(w.leader_x.iter_mut())
    {
        *v = random_vector(rng, 3, 3.0);
    }
    w
}

#[test]
fn bundled_matrices_match_listing() {
    let cfg = builtin("paper_sec4").unwrap();
    let a = [
        [[-2.0, 1.0, 0.0], [0.0, -3.0, 1.0], [0.5, 0.0, -1.0]],
        [[-1.0, 0.0, 0.5], [0.0, -2.0, 1.0], [0.5, 0.0, -0.5]],
        [[-1.0, 1.0, 0.0], [0.0, -3.0, 1.0], [0.0, 0.5, -1.0]],
        [[-1.0, 0.5, 0.0], [0.5, -1.5, 0.5], [-0.5, 0.0, -2.0]],
    ];
    let eye = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let b2 = vec![
        vec![0.5, 1.0, 0.0],
        vec![1.0, 0.5, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    for (i, f) in cfg.followers.iter().enumerate() {
        let expected: Vec<Vec<f64>> = a[i].iter().map(|r| r.to_vec()).collect();
        assert_eq!(f.a, expected, "A{}", i + 1);
        assert_eq!(
            f.b,
            if i == 1 { b2.clone() } else { eye.clone() },
            "B{}",
            i + 1
        );
        let three: Vec<Vec<f64>> = eye
            .iter()
            .map(|r| r.iter().map(|x| 3.0 * x).collect())
            .collect();
        assert_eq!(f.q, three);
        assert_eq!(f.u, eye);
    }
    assert_eq!(
        cfg.leader.s,
        vec![
            vec![0.0, -2.0, 1.0],
            vec![2.0, 0.0, 1.0],
            vec![-1.0, -1.0, 0.0]
        ]
    );
    assert_eq!(cfg.safety.d_s, 0.3);
    assert_eq!(cfg.attack_start, 3.0);

    let cil = [
        [(2.5, 0.07), (1.5, 0.04), (-6.6, 0.08)],
        [(2.3, 0.05), (-4.7, 0.05), (11.5, 0.04)],
        [(3.6, 0.10), (-4.7, 0.09), (-10.2, 0.06)],
        [(-2.9, 0.09), (5.2, 0.06), (-7.7, 0.07)],
    ];
    let ol = [
        [(-1.2, 0.10), (1.5, 0.17), (2.7, 0.15)],
        [(3.3, 0.06), (-2.2, 0.15), (-1.7, 0.12)],
        [(2.8, 0.14), (-5.0, 0.04), (-1.8, 0.08)],
        [(-5.2, 0.04), (2.4, 0.13), (-2.1, 0.14)],
    ];
    for (i, f) in cfg.followers.iter().enumerate() {
        let got: Vec<_> = f.attack.cil.iter().map(|t| (t.coeff, t.rate)).collect();
        assert_eq!(got, cil[i].to_vec());
        let got: Vec<_> = f.attack.ol.iter().map(|t| (t.coeff, t.rate)).collect();
        assert_eq!(got, ol[i].to_vec());
    }
}

#[test]
fn default_initial_layout() {
    let cfg = builtin("paper_sec4").unwrap();
    for x in &cfg.leader.initial_states {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r - 1.0).abs() < 1e-15);
    }
    let l = &cfg.leader.initial_states;
    let edge = |a: &Vec<f64>, b: &Vec<f64>| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for i in 0..4 {
        for j in i + 1..4 {
            assert!((edge(&l[i], &l[j]) - (8.0f64 / 3.0).sqrt()).abs() < 1e-14);
            assert!(edge(&cfg.followers[i].x0, &cfg.followers[j].x0) >= 2.0 * cfg.safety.d_s);
        }
    }
    for f in &cfg.followers {
        let r = f.x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r > 1.0, "follower starts inside the circumsphere");
    }
}

#[test]
fn phi_sum_eigenvalues_are_positive() {
    let (system, _) = default_system();
    let eig = oracle_eigenvalues(&system.phi.phi_sum);
    assert_eq!(eig.len(), 4);
    for e in eig {
        assert!(e.re > 0.0, "{e}");
    }
}

#[test]
fn leader_eigenvalues_match_characteristic_polynomial() {
    let s = matrix_from_rows(&[
        vec![0.0, -2.0, 1.0],
        vec![2.0, 0.0, 1.0],
        vec![-1.0, -1.0, 0.0],
    ])
    .unwrap();
    // det(λI − S) = λ³ + 6λ
    let poly = char_poly(&s);
    assert_eq!(poly, vec![1.0, 0.0, 6.0, 0.0]);
    let mut roots = poly_roots(&poly);
    roots.sort_by(|a, b| a.im.total_cmp(&b.im));
    let r6 = 6f64.sqrt();
    for (got, want) in roots.iter().zip([-r6, 0.0, r6]) {
        assert!(
            got.re.abs() < 1e-10 && (got.im - want).abs() < 1e-10,
            "{got}"
        );
    }
    let check = check_leader_assumption(&LeaderModel { s });
    assert!(check.passed);
    let mut lib = check.eigenvalues.clone();
    lib.sort_by(|a, b| a.im.total_cmp(&b.im));
    for (a, b) in lib.iter().zip(&roots) {
        assert!((a - b).norm() < 1e-10);
    }
}

#[test]
fn gains_satisfy_residual_contracts() {
    let (system, _) = default_system();
    for f in &system.followers {
        let g = &f.gains;
        assert!(care_residual(&f.model, &g.p) <= 1e-8);
        assert!(regulator_residual(&f.model, &system.leader, &g.pi) <= 1e-10);
        let closed = &f.model.a + &f.model.b * &g.k;
        assert!(oracle_eigenvalues(&closed).iter().all(|e| e.re < 0.0));
        assert!(is_hurwitz(&closed));
        // K = −U⁻¹BᵀP and K + H = Π
        let k = -f.model.u.clone().try_inverse().unwrap() * f.model.b.transpose() * &g.p;
        assert!((&k - &g.k).amax() < 1e-12);
        assert!((&g.h - (&g.pi - &g.k)).amax() < 1e-12);
        assert!((&g.p - g.p.transpose()).amax() < 1e-12);
    }
}

#[test]
fn scalar_care_oracle() {
    // a = 1, b = 1, q = 1, u = 1: p² − 2p − 1 = 0 → p = 1 + √2
    let one = DMatrix::from_element(1, 1, 1.0);
    let model = AgentModel {
        a: one.clone(),
        b: one.clone(),
        q: one.clone(),
        u: one.clone(),
    };
    let leader = LeaderModel {
        s: DMatrix::zeros(1, 1),
    };
    let g = synthesize_gains(&model, &leader).unwrap();
    assert!((g.p[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-12);
    assert!((g.k[(0, 0)] + 1.0 + 2f64.sqrt()).abs() < 1e-12);
    assert!((g.pi[(0, 0)] + 1.0).abs() < 1e-12);
}

#[test]
fn containment_error_matches_dense_assembly() {
    let (system, world) = default_system();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let w = randomize(&world, &mut rng);
        let ec = containment_error(&w.follower_x, &w.leader_x, &system.phi);
        let d_o = observer_containment_error(&w.zeta, &w.leader_x, &system.phi);
        assert!((&ec - dense_containment(&w.follower_x, &w.leader_x, &system.phi)).amax() < 1e-12);
        assert!((&d_o - dense_containment(&w.zeta, &w.leader_x, &system.phi)).amax() < 1e-12);
        let eps = stack(
            &w.follower_x
                .iter()
                .zip(&w.zeta)
                .map(|(x, z)| x - z)
                .collect::<Vec<_>>(),
        );
        assert!((&ec - &d_o - eps).amax() < 1e-12);
    }
}

#[test]
fn neighborhood_xi_matches_global_form() {
    let (system, world) = default_system();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let w = randomize(&world, &mut rng);
        let local: Vec<_> = (0..4)
            .map(|i| neighborhood_xi(i, &w.zeta, &w.leader_x, &system.topology))
            .collect();
        let d_o = dense_containment(&w.zeta, &w.leader_x, &system.phi);
        assert!((stack(&local) - dense_xi(&d_o, &system.phi)).amax() < 1e-12);
    }
}

#[test]
fn containment_at_hull_targets_is_zero() {
    let (system, world) = default_system();
    let targets = system.phi.hull_targets(&world.leader_x);
    let ec = containment_error(&targets, &world.leader_x, &system.phi);
    assert!(ec.amax() < 1e-14);
}

#[test]
fn attack_onset_value() {
    let (system, _) = default_system();
    let (ga, gol) = eval_attack(&system.followers[0].attack, 3.0);
    assert_eq!(ga, dvector![2.5, 1.5, -6.6]);
    assert_eq!(gol, dvector![-1.2, 1.5, 2.7]);
    let (ga, _) = eval_attack(&system.followers[0].attack, 2.999);
    assert_eq!(ga, DVector::zeros(3));
}

#[test]
fn cbf_rate_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d_s = 0.3;
    for _ in 0..50 {
        let mi = AgentModel {
            a: random_matrix(&mut rng, 3, 3, 1.0),
            b: random_matrix(&mut rng, 3, 3, 1.0),
            q: DMatrix::identity(3, 3),
            u: DMatrix::identity(3, 3),
        };
        let mj = AgentModel {
            a: random_matrix(&mut rng, 3, 3, 1.0),
            b: random_matrix(&mut rng, 3, 3, 1.0),
            q: DMatrix::identity(3, 3),
            u: DMatrix::identity(3, 3),
        };
        let (xi, xj) = (
            random_vector(&mut rng, 3, 1.0),
            random_vector(&mut rng, 3, 1.0),
        );
        let (ui, uj) = (
            random_vector(&mut rng, 3, 2.0),
            random_vector(&mut rng, 3, 2.0),
        );
        let c = build_constraint(
            0,
            1,
            PairContext {
                x_i: &xi,
                x_j: &xj,
                model_i: &mi,
                model_j: &mj,
                u_j: &uj,
            },
            5.0,
            d_s,
        );
        let fi = &mi.a * &xi + &mi.b * &ui;
        let fj = &mj.a * &xj + &mj.b * &uj;
        let step = 1e-6;
        let hdot = (cbf_value(&(&xi + &fi * step), &(&xj + &fj * step), d_s)
            - cbf_value(&(&xi - &fi * step), &(&xj - &fj * step), d_s))
            / (2.0 * step);
        // aᵀu ≤ b ⇔ ḣ ≤ −δh, so ḣ + δh = aᵀu − b
        assert!(
            (hdot + 5.0 * c.h - (c.a.dot(&ui) - c.b)).abs() < 1e-6,
            "{hdot}"
        );
    }
}

#[test]
fn qp_matches_enumeration_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..200 {
        let m = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let target = random_vector(&mut rng, m, 3.0);
        let rows: Vec<(DVector<f64>, f64)> = (0..k)
            .map(|_| (random_vector(&mut rng, m, 2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let hs: Vec<HalfSpace> = rows
            .iter()
            .map(|(a, b)| HalfSpace {
                normal: a.clone(),
                bound: *b,
            })
            .collect();
        match (
            project_onto_polyhedron(&target, &hs),
            brute_force_projection(&target, &rows),
        ) {
            (Ok(sol), Some(x)) => {
                assert!((&sol.x - x).amax() < 1e-8);
                assert!(
                    kkt_residual(&target, &hs, &sol) < 1e-9,
                    "{} {target:?} {rows:?} {sol:?}",
                    kkt_residual(&target, &hs, &sol)
                );
                checked += 1;
            }
            (Err(_), None) => {}
            (a, b) => panic!("solver {a:?} disagrees with oracle {b:?}"),
        }
    }
    assert!(checked > 100);
}

#[test]
fn pair_order_for_four_agents() {
    let order: Vec<_> = backward_pair_order(4)
        .into_iter()
        .map(|(i, j)| (i + 1, j + 1))
        .collect();
    assert_eq!(order, vec![(3, 4), (2, 3), (2, 4), (1, 2), (1, 3), (1, 4)]);
}

#[test]
fn leaders_rotate_like_matrix_exponential() {
    let (system, world) = default_system();
    let dt = 1e-3;
    let mut w = world.clone();
    for _ in 0..1000 {
        w = system.step(&w, dt).unwrap().0;
    }
    let flow = expm(&system.leader.s);
    for (x0, x1) in world.leader_x.iter().zip(&w.leader_x) {
        assert!((&flow * x0 - x1).amax() < 1e-10);
        assert!((x1.norm() - x0.norm()).abs() < 1e-10);
    }
}

#[test]
fn zero_dynamics_leave_state_unchanged() {
    let (mut system, mut world) = default_system();
    for f in &mut system.followers {
        f.model.a = DMatrix::zeros(3, 3);
        f.model.b = DMatrix::zeros(3, 3);
        f.attack = saar_core::attacks::AttackProfile::none(3, 3);
    }
    system.leader.s = DMatrix::zeros(3, 3);
    // Observer estimates already at their fixed points and inputs ignored.
    let targets = system.phi.hull_targets(&world.leader_x);
    world.zeta = targets;
    let next = system.step(&world, 0.01).unwrap().0;
    assert_eq!(next.follower_x, world.follower_x);
    assert_eq!(next.leader_x, world.leader_x);
    assert!((stack(&next.zeta) - stack(&world.zeta)).amax() < 1e-14);
    assert!((next.t - 0.01).abs() < 1e-15);
}

#[test]
fn full_scenario_self_convergence() {
    // Attack-free so the compensator stays smooth over the first second.
    let cfg = builtin("paper_sec4").unwrap().without_attacks();
    let (mut system, world) = cfg.compile().unwrap();
    system.mode = ControllerMode::ResilientUnsafe;
    let final_state = |dt: f64| {
        let steps = (1.0 / dt).round() as usize;
        let mut w = world.clone();
        for _ in 0..steps {
            w = system.step(&w, dt).unwrap().0;
        }
        stack(&[
            stack(&w.follower_x),
            stack(&w.zeta),
            DVector::from_vec(w.theta.clone()),
            DVector::from_vec(w.rho_hat.clone()),
        ])
    };
    let (a, b, c) = (final_state(0.02), final_state(0.01), final_state(0.005));
    let ratio = (&a - &b).norm() / (&b - &c).norm();
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}
