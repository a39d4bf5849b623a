use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::arm_ik::*;
use teleop_core::kinematics::ModelDocument;
use teleop_core::se3::{Pose, Quat};
use teleop_core::{fixtures, JointVector, KinematicModel};

fn solver() -> ArmIk {
    ArmIk::new(fixtures::arm7_generic(), IkConfig::default()).unwrap()
}

fn random_q(rng: &mut ChaCha8Rng, model: &KinematicModel, margin: f64) -> JointVector {
    let lo = model.limits_lo();
    let hi = model.limits_hi();
    JointVector::from(
        (0..lo.len())
            .map(|k| {
                let pad = margin * (hi[k] - lo[k]);
                rng.gen_range(lo[k] + pad..=hi[k] - pad)
            })
            .collect::<Vec<_>>(),
    )
}

fn random_request(rng: &mut ChaCha8Rng, ik: &ArmIk) -> IkRequest {
    let m = ik.model();
    let q_star = random_q(rng, m, 0.1);
    let q_prev = m.clamp(&JointVector::from(q_star.0.map(|v| v + rng.gen_range(-0.2..0.2))));
    IkRequest {
        target: ik.fk(&q_star).unwrap(),
        q_prev,
        q_neutral: m.neutral(),
    }
}

/// Max of g over `n` uniform samples of `[a, b]`.
fn grid_max(ik: &ArmIk, req: &IkRequest, w: &RedundancyWeights, (a, b): (f64, f64), n: usize) -> Option<f64> {
    (0..n)
        .filter_map(|k| ik.objective_at(req, w, a + (b - a) * k as f64 / (n - 1) as f64))
        .reduce(f64::max)
}

/// Plain restatement of the objective, with manipulability from the tree
/// Jacobian through an SVD.
fn objective_oracle(ik: &ArmIk, q: &JointVector, req: &IkRequest, w: &RedundancyWeights) -> f64 {
    let jac: DMatrix<f64> = ik.model().jacobian(q, "ee").unwrap();
    let m: f64 = jac.svd(false, false).singular_values.iter().product();
    let mut n2 = 0.0;
    let mut c2 = 0.0;
    for k in 0..7 {
        n2 += (w.neutral_diag[k] * (q[k] - req.q_neutral[k])).powi(2);
        c2 += (w.continuity_diag[k] * (q[k] - req.q_prev[k])).powi(2);
    }
    w.w_m * m - w.w_n * n2.sqrt() - w.w_c * c2.sqrt()
}

#[test]
fn resolve_matches_dense_grid_on_random_targets() {
    let ik = solver();
    let w = RedundancyWeights::default_for(ik.model());
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..20 {
        let req = random_request(&mut rng, &ik);
        let (sol, stats) = ik.resolve_with_stats(&req, &w).unwrap();
        assert!(ik.model().within_limits(&sol.q));
        let (dp, da) = ik.fk(&sol.q).unwrap().error_to(&req.target);
        assert!(dp <= 1e-4 && da <= 1e-3);
        let best = grid_max(&ik, &req, &w, stats.bracket, 2000).unwrap();
        assert!(sol.objective >= best - 1e-6, "{} < {}", sol.objective, best);
    }
}

#[test]
fn centered_target_with_symmetric_limits_matches_grid() {
    let mut doc = ModelDocument::parse(fixtures::ARM7_GENERIC).unwrap();
    for j in doc.joints.iter_mut() {
        if let Some([lo, hi]) = j.limits {
            let r = lo.abs().max(hi.abs());
            j.limits = Some([-r, r]);
            j.neutral = Some(0.0);
        }
    }
    let model = KinematicModel::from_document(doc).unwrap();
    let ik = ArmIk::new(model, IkConfig::default()).unwrap();
    let w = RedundancyWeights::default_for(ik.model());
    let zero = JointVector::zeros(7);
    let q_c = JointVector::from_slice(&[0.0, 0.4, 0.0, -1.6, 0.0, 1.9, 0.0]);
    let req = IkRequest {
        target: ik.fk(&q_c).unwrap(),
        q_prev: zero.clone(),
        q_neutral: zero,
    };
    let (sol, stats) = ik.resolve_with_stats(&req, &w).unwrap();
    let best = grid_max(&ik, &req, &w, stats.bracket, 2000).unwrap();
    assert!((sol.objective - best).abs() <= 1e-6 || sol.objective > best);
}

#[test]
fn scaling_weights_keeps_the_selection() {
    let ik = solver();
    let w = RedundancyWeights::default_for(ik.model());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let req = random_request(&mut rng, &ik);
        let base = ik.resolve(&req, &w).unwrap();
        let times4 = ik.resolve(&req, &w.scaled(4.0)).unwrap();
        assert_eq!(base.q, times4.q);
        let odd = ik.resolve(&req, &w.scaled(3.7)).unwrap();
        assert!((&base.q.0 - &odd.q.0).amax() <= 1e-6);
    }
}

#[test]
fn small_steps_give_small_joint_changes() {
    let ik = solver();
    let w = RedundancyWeights::default_for(ik.model());
    assert!(w.w_c >= 1.0);
    let q0 = JointVector::from_slice(&[0.2, -0.3, 0.1, -2.0, 0.2, 1.8, 0.4]);
    let start = ik.fk(&q0).unwrap();
    let mut q_prev = q0.clone();
    let step_deg = 0.5_f64.to_radians();
    for i in 1..=60 {
        let t = i as f64;
        let p = start.p + nalgebra::Vector3::new(1e-3 * t, -0.5e-3 * t, 0.3e-3 * t);
        let dq = Quat::from_axis_angle(&nalgebra::Vector3::new(0.3, 1.0, -0.2).normalize(), step_deg * t);
        let req = IkRequest {
            target: Pose::new(p, dq.mul(&start.q)),
            q_prev: q_prev.clone(),
            q_neutral: ik.model().neutral(),
        };
        let sol = ik.resolve(&req, &w).unwrap();
        let jump = (&sol.q.0 - &q_prev.0).amax();
        assert!(jump <= 5f64.to_radians(), "step {i}: {jump}");
        q_prev = sol.q;
    }
}

#[test]
fn far_target_is_unreachable() {
    let ik = solver();
    let w = RedundancyWeights::default_for(ik.model());
    let req = IkRequest {
        target: Pose::from_translation(nalgebra::Vector3::new(2.0, 0.0, 0.5)),
        q_prev: ik.model().neutral(),
        q_neutral: ik.model().neutral(),
    };
    assert!(matches!(ik.resolve(&req, &w), Err(IkError::Unreachable)));
}

#[test]
fn solve_fixed_q7_spread_seeds() {
    let ik = solver();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let q_star = random_q(&mut rng, ik.model(), 0.1);
        let target = ik.fk(&q_star).unwrap();
        let seeds: Vec<JointVector> = (0..8).map(|_| random_q(&mut rng, ik.model(), 0.0)).collect();
        let mut all = seeds.clone();
        all.push(q_star.clone());
        let sols = ik.solve_fixed_q7(&target, q_star[6], &all);
        assert!(!sols.is_empty());
        for s in &sols {
            let (dp, da) = ik.fk(&s.q).unwrap().error_to(&target);
            assert!(dp <= 1e-4 && da <= 1e-3);
            assert!(ik.model().within_limits(&s.q));
            assert_eq!(s.q[6], q_star[6]);
        }
        for (i, a) in sols.iter().enumerate() {
            for b in &sols[i + 1..] {
                assert!((&a.q.0 - &b.q.0).amax() > 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_matches_restated_formula(
        seed in any::<u64>(),
        wm in 0.0f64..3.0,
        wn in 0.0f64..3.0,
        wc in 0.0f64..3.0,
        diag in prop::collection::vec(0.0f64..2.0, 14),
    ) {
        let ik = solver();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&mut rng, ik.model(), 0.0);
        let req = IkRequest {
            target: Pose::identity(),
            q_prev: random_q(&mut rng, ik.model(), 0.0),
            q_neutral: random_q(&mut rng, ik.model(), 0.0),
        };
        let w = RedundancyWeights {
            w_m: wm,
            w_n: wn,
            w_c: wc,
            neutral_diag: DVector::from_column_slice(&diag[..7]),
            continuity_diag: DVector::from_column_slice(&diag[7..]),
        };
        let got = ik.redundancy_objective(&q, &req, &w).unwrap();
        let want = objective_oracle(&ik, &q, &req, &w);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }
}
