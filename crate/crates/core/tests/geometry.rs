use std::f64::consts::FRAC_PI_2;

use approx::assert_relative_eq;
use ngs_core::geometry::{
    deproject, euler_to_matrix, geodesic_angle, matrix_to_euler, symmetric_grasp_angle, CameraIntrinsics, EulerRotation,
    RGBDFrame,
};
use proptest::prelude::*;

fn angle() -> impl Strategy<Value = f64> {
    -FRAC_PI_2 + 1e-6..FRAC_PI_2 - 1e-6
}

proptest! {
    #[test]
    fn euler_round_trip(theta in angle(), gamma in angle(), beta in angle()) {
        let r = EulerRotation::new(theta, gamma, beta).unwrap();
        let m = euler_to_matrix(&r);
        let back = matrix_to_euler(&m).unwrap();
        prop_assert!((euler_to_matrix(&back) - m).amax() < 1e-9);
        // Away from gimbal lock the angles themselves come back.
        if gamma.abs() < FRAC_PI_2 - 1e-3 {
            prop_assert!((back.theta - theta).abs() < 1e-8);
            prop_assert!((back.gamma - gamma).abs() < 1e-8);
            prop_assert!((back.beta - beta).abs() < 1e-8);
        }
    }

    #[test]
    fn rotation_matrices_are_orthonormal(theta in angle(), gamma in angle(), beta in angle()) {
        let m = euler_to_matrix(&EulerRotation::new(theta, gamma, beta).unwrap());
        prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_is_a_metric(a in (angle(), angle(), angle()), b in (angle(), angle(), angle())) {
        let ma = euler_to_matrix(&EulerRotation::new(a.0, a.1, a.2).unwrap());
        let mb = euler_to_matrix(&EulerRotation::new(b.0, b.1, b.2).unwrap());
        prop_assert!(geodesic_angle(&ma, &ma) < 1e-6);
        prop_assert!((geodesic_angle(&ma, &mb) - geodesic_angle(&mb, &ma)).abs() < 1e-12);
        prop_assert!(symmetric_grasp_angle(&ma, &mb) <= geodesic_angle(&ma, &mb) + 1e-12);
    }

    #[test]
    fn deprojection_inverts_projection(u in 0usize..40, v in 0usize..30, z in 0.1f64..3.0) {
        let k = CameraIntrinsics::new(50.0, 55.0, 19.5, 14.5, 40, 30).unwrap();
        let p = k.deproject_pixel(u as f64, v as f64, z);
        let (pu, pv, pz) = k.project(&p);
        prop_assert!((pu - u as f64).abs() < 1e-9 && (pv - v as f64).abs() < 1e-9);
        assert_relative_eq!(pz, z, epsilon = 1e-12);
    }
}

#[test]
fn out_of_range_angles_are_rejected() {
    assert!(EulerRotation::new(2.0, 0.0, 0.0).is_err());
    assert!(EulerRotation::new(0.0, f64::NAN, 0.0).is_err());
}

#[test]
fn zero_depth_pixels_are_invalid_points() {
    let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
    let mut depth = vec![1.0; 9];
    depth[4] = 0.0;
    let pm = deproject(&RGBDFrame::from_depth(3, 3, depth).unwrap(), &k).unwrap();
    assert_eq!(pm.valid_count(), 8);
    assert!(pm.point(1, 1).is_none());
    assert_relative_eq!(pm.point(0, 0).unwrap().x, -0.1, epsilon = 1e-15);
}
