use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::traj::*;

/// Integrates a profile with 1 µs steps, using the exact average jerk over
/// each step.
fn integrate(p: &Profile) -> AxisState {
    let h = 1e-6;
    let mut bounds = Vec::with_capacity(p.segments.len());
    let mut acc = 0.0;
    for s in &p.segments {
        acc += s.duration;
        bounds.push((acc - s.duration, acc, s.jerk));
    }
    let steps = (p.duration / h).ceil() as usize;
    let (mut x, mut v, mut a) = (p.start.p, p.start.v, p.start.a);
    for k in 0..steps {
        let t0 = k as f64 * h;
        let t1 = ((k + 1) as f64 * h).min(p.duration);
        let dt = t1 - t0;
        if dt <= 0.0 {
            break;
        }
        let mut j = 0.0;
        for (b0, b1, jerk) in &bounds {
            let overlap = (t1.min(*b1) - t0.max(*b0)).max(0.0);
            j += jerk * overlap;
        }
        j /= dt;
        x += v * dt + a * dt * dt / 2.0 + j * dt * dt * dt / 6.0;
        v += a * dt + j * dt * dt / 2.0;
        a += j * dt;
    }
    AxisState { p: x, v, a }
}

fn feasible_state(rng: &mut ChaCha8Rng, lim: &Limits) -> AxisState {
    loop {
        let v = rng.gen_range(-lim.v_max..=lim.v_max);
        let a = rng.gen_range(-lim.a_max..=lim.a_max);
        let v_nat = v + a * a.abs() / (2.0 * lim.j_max);
        if v_nat.abs() <= lim.v_max {
            return AxisState {
                p: rng.gen_range(-2.0..2.0),
                v,
                a,
            };
        }
    }
}

#[test]
fn fine_integration_reaches_target() {
    let lim = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let s = feasible_state(&mut rng, &lim);
        let target = rng.gen_range(-2.5..2.5);
        let p = Profile::plan(s, target, &lim).unwrap();
        let end = integrate(&p);
        assert!((end.p - target).abs() <= 1e-5, "p {} vs {}", end.p, target);
        assert!(end.v.abs() <= 1e-4, "v {}", end.v);
        assert!(end.a.abs() <= 1e-3, "a {}", end.a);
    }
}

#[test]
fn samples_respect_limits_and_consistency() {
    let lim = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dt = 1e-3;
    for _ in 0..200 {
        let s = feasible_state(&mut rng, &lim);
        let target = rng.gen_range(-3.0..3.0);
        let p = Profile::plan(s, target, &lim).unwrap();
        let n = (p.duration / dt).ceil() as usize + 2;
        let mut prev = p.sample(0.0);
        for k in 1..n {
            let cur = p.sample(k as f64 * dt);
            assert!(cur.v.abs() <= lim.v_max + 1e-9);
            assert!(cur.a.abs() <= lim.a_max + 1e-9);
            assert!((cur.a - prev.a).abs() <= lim.j_max * dt + 1e-9);
            assert!(((cur.p - prev.p) - prev.v * dt).abs() <= lim.a_max * dt * dt + 1e-12);
            prev = cur;
        }
    }
}

#[test]
fn bridge_plateau_move_converges_within_one_tick() {
    let lim = Limits::default();
    let mut b = Bridge::new(vec![0.0], vec![lim]).unwrap();
    b.push(0, vec![1.5]).unwrap();
    let optimal = lim.plateau_duration(1.5);
    let mut arrived = None;
    for _ in 0..2000 {
        let s = b.tick();
        if s.state.q[0] == 1.5 && s.state.v[0] == 0.0 {
            arrived = Some(s.tick);
            break;
        }
    }
    let arrived = arrived.expect("reaches target") as f64 * 1e-3;
    assert!(arrived <= optimal + 1e-3 + 1e-12, "{arrived} vs {optimal}");
    assert!(arrived >= optimal - 1e-12);
}

#[test]
fn bridge_replans_are_c2_continuous() {
    let lim = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut b = Bridge::new(vec![0.0, 0.0], vec![lim; 2]).unwrap();
    let mut prev = b.tick();
    for i in 1..3000u64 {
        if i % 37 == 0 {
            b.push_now(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .unwrap();
        }
        let cur = b.tick();
        for j in 0..2 {
            assert!((cur.state.a[j] - prev.state.a[j]).abs() <= lim.j_max * 1e-3 + 1e-9);
            assert!((cur.state.v[j] - prev.state.v[j]).abs() <= lim.a_max * 1e-3 + 1e-9);
        }
        prev = cur;
    }
}

#[test]
fn deterministic_replay_is_identical() {
    let cmds: Vec<(u64, Vec<f64>)> = (0..60u64)
        .map(|i| (teleop_core::types::step_timestamp_us(i, 30), vec![(i as f64 * 0.3).sin()]))
        .collect();
    let a = bridge_stream(vec![0.0], vec![Limits::default()], &cmds, 2000).unwrap();
    let b = bridge_stream(vec![0.0], vec![Limits::default()], &cmds, 2000).unwrap();
    assert_eq!(a, b);
}

/// Re-target stress over many events; the full 10⁵ run lives in the
/// acceptance suite.
#[test]
fn fuzzed_retargets_stay_within_limits() {
    let lim = Limits {
        v_max: 1.5,
        a_max: 8.0,
        j_max: 600.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut b = Bridge::new(vec![0.0], vec![lim]).unwrap();
    let mut prev = b.tick();
    for _ in 0..10_000 {
        b.push_now(vec![rng.gen_range(-3.0..3.0)]).unwrap();
        for _ in 0..rng.gen_range(1..60) {
            let cur = b.tick();
            assert!(cur.state.v[0].abs() <= lim.v_max + 1e-9);
            assert!(cur.state.a[0].abs() <= lim.a_max + 1e-9);
            assert!((cur.state.a[0] - prev.state.a[0]).abs() <= lim.j_max * 1e-3 + 1e-9);
            prev = cur;
        }
    }
}

proptest! {
    #[test]
    fn rest_to_rest_terminal_and_peak(dq in -3.0f64..3.0) {
        let lim = Limits::default();
        let p = Profile::plan(AxisState::at_rest(0.0), dq, &lim).unwrap();
        prop_assert!(p.peak_velocity() <= lim.v_max + 1e-12);
        let end = p.sample(p.duration);
        prop_assert_eq!(end.p, dq);
        if dq.abs() >= lim.v_max * (lim.v_max / lim.a_max + lim.a_max / lim.j_max) {
            prop_assert!((p.duration - lim.plateau_duration(dq)).abs() < 1e-9);
        } else {
            prop_assert!(p.peak_velocity() < lim.v_max);
        }
    }

    #[test]
    fn sample_starts_at_initial_state(v in -2.0f64..2.0, a in -10.0f64..10.0, target in -3.0f64..3.0) {
        let lim = Limits::default();
        prop_assume!((v + a * a.abs() / (2.0 * lim.j_max)).abs() <= lim.v_max);
        let s = AxisState { p: 0.3, v, a };
        let p = Profile::plan(s, target, &lim).unwrap();
        prop_assert_eq!(p.sample(0.0), s);
    }
}
