use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;
use teleop_core::se3::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn quat() -> impl Strategy<Value = Quat> {
    (vec3(1.0), 0.0f64..std::f64::consts::PI).prop_map(|(axis, angle)| {
        let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis };
        Quat::from_axis_angle(&axis, angle)
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(2.0), quat()).prop_map(|(p, q)| Pose::new(p, q))
}

fn frame_map() -> impl Strategy<Value = FrameMap> {
    prop_oneof![
        Just(FrameMap::standard()),
        Just(FrameMap::identity()),
        (vec3(1.0), -3.0f64..3.0).prop_map(|(axis, angle)| {
            let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
            FrameMap::new(*r.matrix()).unwrap()
        }),
    ]
}

proptest! {
    #[test]
    fn products_stay_unit(a in quat(), b in quat()) {
        prop_assert!((a.mul(&b).norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn canonical_scalar_is_nonnegative(q in quat()) {
        let n = Quat::new(-q.w, -q.x, -q.y, -q.z).canonicalize();
        prop_assert!(n.w >= 0.0);
        prop_assert!(n.angle_to(&q) <= 1e-9);
    }

    #[test]
    fn product_matches_matrix_product(a in quat(), b in quat()) {
        let m: Matrix3<f64> = a.to_rotation_matrix() * b.to_rotation_matrix();
        prop_assert!((a.mul(&b).to_rotation_matrix() - m).amax() <= 1e-12);
    }

    #[test]
    fn still_wrist_round_trips(w in pose(), ee in pose(), fm in frame_map()) {
        let out = compose_target(&ee, &map_intent(&compute_intent(&w, &w), &fm));
        prop_assert!((out.p - ee.p).amax() <= 1e-12);
        prop_assert!(out.q.angle_to(&ee.q) <= 1e-12);
    }

    #[test]
    fn mapping_preserves_rotation_angle(w0 in pose(), wt in pose(), fm in frame_map()) {
        let intent = compute_intent(&w0, &wt);
        let mapped = map_intent(&intent, &fm);
        prop_assert!((mapped.dq.angle() - intent.dq.angle()).abs() <= 1e-9);
        prop_assert!((mapped.dq.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn mapping_keeps_translation_length(w0 in pose(), wt in pose(), fm in frame_map()) {
        let intent = compute_intent(&w0, &wt);
        let mapped = map_intent(&intent, &fm);
        prop_assert!((mapped.dp.norm() - intent.dp.norm()).abs() <= 1e-12);
    }

    #[test]
    fn intent_ignores_common_offset(w0 in pose(), wt in pose(), off in vec3(5.0)) {
        let a = compute_intent(&w0, &wt);
        let b = compute_intent(
            &Pose::new(w0.p + off, w0.q),
            &Pose::new(wt.p + off, wt.q),
        );
        prop_assert!((a.dp - b.dp).amax() <= 1e-12);
        prop_assert!(a.dq.angle_to(&b.dq) <= 1e-12);
    }

    #[test]
    fn target_matches_homogeneous_matrices(ee in pose(), dp in vec3(0.5), dq in quat()) {
        let out = compose_target(&ee, &DifferentialIntent { dp, dq });
        let mut m = dq.to_rotation_matrix().to_homogeneous();
        let ee_m = ee.to_matrix();
        m *= ee_m;
        m[(0, 3)] = ee_m[(0, 3)] + dp.x;
        m[(1, 3)] = ee_m[(1, 3)] + dp.y;
        m[(2, 3)] = ee_m[(2, 3)] + dp.z;
        prop_assert!((out.to_matrix() - m).amax() <= 1e-12);
    }

    #[test]
    fn rotation_matrix_round_trip(q in quat()) {
        let back = Quat::from_rotation_matrix(&q.to_rotation_matrix());
        prop_assert!(back.angle_to(&q) <= 1e-9);
        prop_assert!(back.w >= 0.0);
    }
}
