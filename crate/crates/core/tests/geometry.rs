use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use proptest::prelude::*;

use carm_core::geometry::*;

fn approx_mat(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
    (a - b).amax() < tol
}

fn intrinsics_identity_frame() -> Intrinsics {
    Intrinsics::new(1000.0, 200, 300, [0.5, 0.25], [0.0, 0.0])
        .unwrap()
        .with_orientation(Orientation::Identity)
}

#[test]
fn intrinsic_matrix_is_product_of_pixel_and_camera_matrices() {
    let k = Intrinsics::new(1020.0, 256, 128, [0.8, 0.6], [3.0, -2.0]).unwrap();
    let expected = Matrix3::new(
        1020.0 / 0.8,
        0.0,
        3.0 / 0.8 + 64.0,
        0.0,
        1020.0 / 0.6,
        -2.0 / 0.6 + 128.0,
        0.0,
        0.0,
        1.0,
    );
    assert!(approx_mat(&k.k(), &expected, 1e-9));
}

#[test]
fn intrinsics_reject_bad_values() {
    assert!(Intrinsics::new(0.0, 1, 1, [1.0, 1.0], [0.0, 0.0]).is_err());
    assert!(Intrinsics::new(10.0, 0, 1, [1.0, 1.0], [0.0, 0.0]).is_err());
    assert!(Intrinsics::new(10.0, 1, 1, [-1.0, 1.0], [0.0, 0.0]).is_err());
    let json = r#"{"focal_length_mm": 10, "height": 2, "width": 2, "pixel_spacing_mm": [1, 0]}"#;
    assert!(serde_json::from_str::<Intrinsics>(json).is_err());
    let json = r#"{"focal_length_mm": 10, "height": 2, "width": 2, "pixel_spacing_mm": [1, 1], "bogus": 1}"#;
    assert!(serde_json::from_str::<Intrinsics>(json).is_err());
}

#[test]
fn pixel_center_convention_round_trips() {
    let k = Intrinsics::new(1000.0, 7, 10, [0.5, 0.25], [1.5, -0.5]).unwrap();
    let (x, y) = k.image_plane(3.0, 4.0);
    assert_eq!(x, (3.0 + 0.5 - 5.0) * 0.5 - 1.5);
    assert_eq!(y, (4.0 + 0.5 - 3.5) * 0.25 + 0.5);
    let (u, v) = k.pixel_index(x, y);
    assert!((u - 3.0).abs() < 1e-12 && (v - 4.0).abs() < 1e-12);
}

#[test]
fn downsample_keeps_physical_extent() {
    let k = Intrinsics::new(1000.0, 256, 256, [0.8, 0.8], [1.0, 2.0]).unwrap();
    let k8 = k.downsample(8).unwrap();
    assert_eq!((k8.height, k8.width), (32, 32));
    assert_eq!(k8.pixel_spacing_mm, [6.4, 6.4]);
    assert_eq!(k8.optical_center_mm, [1.0, 2.0]);
    // A binned pixel sits at the mean position of the block it covers.
    let odd = Intrinsics::new(1000.0, 10, 11, [1.0, 1.0], [0.0, 0.0]).unwrap();
    let k2 = odd.downsample(2).unwrap();
    assert_eq!((k2.height, k2.width), (5, 5));
    for u in 0..5 {
        let (x2, _) = k2.image_plane(u as f64, 0.0);
        let (xa, _) = odd.image_plane(2.0 * u as f64, 0.0);
        let (xb, _) = odd.image_plane(2.0 * u as f64 + 1.0, 0.0);
        assert!((x2 - (xa + xb) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn orientation_frames_are_rotations() {
    for o in [Orientation::Ap, Orientation::Pa, Orientation::Identity] {
        let f = o.frame();
        assert!(approx_mat(
            &(f.transpose() * f),
            &Matrix3::identity(),
            1e-15
        ));
        assert!((f.determinant() - 1.0).abs() < 1e-15);
    }
    // Viewing direction of the AP layout is +y, of PA is -y.
    assert_eq!(Orientation::Ap.frame() * Vector3::z(), Vector3::y());
    assert_eq!(Orientation::Pa.frame() * Vector3::z(), -Vector3::y());
}

#[test]
fn euler_identity() {
    let p = euler_to_pose(&EulerPose::default()).unwrap();
    assert_eq!(p, Pose::identity());
}

#[test]
fn euler_quarter_turn_alpha() {
    let p = euler_to_pose(&EulerPose::new(90.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
    let x = p.rotation() * Vector3::x();
    assert!((x - Vector3::y()).norm() < 1e-15);
}

#[test]
fn euler_matches_matrix_product_oracle() {
    // Frozen from an independent numpy evaluation of Rz(10°) Rx(20°) Ry(30°).
    let r_expected = Matrix3::new(
        0.823172944645501,
        -0.16317591116653482,
        0.5438381424823255,
        0.3187957775971679,
        0.9254165783983234,
        -0.20487412870286215,
        -0.46984631039295416,
        0.3420201433256687,
        0.8137976813493738,
    );
    let t_world = Vector3::new(119.97051696724886, -646.8122483769491, -239.32193883588477);
    let p = euler_to_pose(&EulerPose::new(10.0, 20.0, 30.0, 5.0, -700.0, 3.0)).unwrap();
    assert!(approx_mat(p.rotation(), &r_expected, 1e-12));
    assert!((p.source_position() - t_world).amax() < 1e-12);
    let m = p.camera_to_world();
    assert!((m.fixed_view::<3, 1>(0, 3) - t_world).amax() < 1e-12);
}

#[test]
fn euler_rejects_non_finite() {
    assert!(euler_to_pose(&EulerPose::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
    assert!(euler_to_pose(&EulerPose::new(0.0, 0.0, 0.0, 0.0, f64::INFINITY, 0.0)).is_err());
}

#[test]
fn pose_to_euler_cases() {
    let d = pose_to_euler(&Pose::identity());
    assert_eq!(d.euler.to_array(), [0.0; 6]);
    assert!(!d.gimbal_lock);

    let e = EulerPose::new(45.0, -30.0, 10.0, 1.0, 2.0, 3.0);
    let d = pose_to_euler(&e.to_pose().unwrap());
    for (a, b) in d.euler.to_array().iter().zip(e.to_array()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    let e = EulerPose::new(25.0, 90.0, 15.0, 0.0, 0.0, 0.0);
    let p = e.to_pose().unwrap();
    let d = pose_to_euler(&p);
    assert!(d.gimbal_lock);
    assert_eq!(d.euler.gamma_deg, 0.0);
    let back = d.euler.to_pose().unwrap();
    assert!(approx_mat(back.rotation(), p.rotation(), 1e-9));
}

#[test]
fn projection_examples() {
    let k = intrinsics_identity_frame();
    let pi = ProjectionMatrix::new(&k, &Pose::identity());
    let f = k.focal_length_mm;
    let c = pi.project(&Vector3::new(0.0, 0.0, f)).pixel().unwrap();
    assert!((c - Vector2::new(150.0, 100.0)).norm() < 1e-12);
    // K (s_x, 0, f)ᵀ / f = (1 + W/2, H/2).
    let c = pi.project(&Vector3::new(0.5, 0.0, f)).pixel().unwrap();
    assert!((c - Vector2::new(151.0, 100.0)).norm() < 1e-9);
    // The literal point (f s_x, 0, f) moves f pixels, not one.
    let c = pi.project(&Vector3::new(f * 0.5, 0.0, f)).pixel().unwrap();
    assert!((c - Vector2::new(150.0 + f, 100.0)).norm() < 1e-9);
}

#[test]
fn projection_matches_rendered_pixel_centers() {
    // The K convention puts pixel index u at u + 0.5.
    let k = Intrinsics::new(900.0, 12, 16, [1.1, 0.9], [2.0, -1.0]).unwrap();
    let pose = EulerPose::new(12.0, -7.0, 3.0, 4.0, -600.0, 9.0)
        .to_pose()
        .unwrap();
    let pi = ProjectionMatrix::new(&k, &pose);
    for (u, v) in [(0.0, 0.0), (15.0, 11.0), (7.0, 3.0)] {
        let w = pose.transform_point(&(k.carm_point(u, v) * 0.6));
        let px = pi.project(&w).pixel().unwrap();
        assert!((px - Vector2::new(u + 0.5, v + 0.5)).norm() < 1e-9, "{px}");
    }
}

#[test]
fn projection_flags_points_behind_camera() {
    let k = intrinsics_identity_frame();
    let pi = ProjectionMatrix::new(&k, &Pose::identity());
    let out = project_points(
        &pi,
        &[
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, -5.0),
            Vector3::new(1.0, 1.0, 5.0),
        ],
    );
    assert_eq!(out[0], Projected::Degenerate);
    assert_eq!(out[1], Projected::Degenerate);
    assert!(out[2].pixel().is_some());
}

#[test]
fn projection_transform_consistency() {
    let k = Intrinsics::new(1000.0, 64, 64, [1.0, 1.0], [0.0, 0.0]).unwrap();
    let p = EulerPose::new(20.0, -10.0, 5.0, 3.0, -700.0, 4.0)
        .to_pose()
        .unwrap();
    let x = Vector3::new(12.0, -30.0, 7.0);
    let a = ProjectionMatrix::new(&k, &p).project(&x).pixel().unwrap();
    let x_local = p.inverse().camera_to_world() * x.push(1.0);
    let b = ProjectionMatrix::new(&k, &Pose::identity())
        .project_homogeneous(&x_local)
        .pixel()
        .unwrap();
    assert!((a - b).norm() < 1e-9);
}

#[test]
fn camera_to_world_inverse() {
    let p = EulerPose::new(33.0, 12.0, -40.0, 10.0, -500.0, -20.0)
        .to_pose()
        .unwrap();
    let prod = p.camera_to_world() * p.world_to_camera();
    assert!((prod - nalgebra::Matrix4::identity()).amax() < 1e-9);
    let back = Pose::from_camera_to_world(&p.camera_to_world()).unwrap();
    assert!(approx_mat(back.rotation(), p.rotation(), 1e-12));
    assert!((back.translation() - p.translation()).amax() < 1e-9);
}

#[test]
fn pose_rejects_non_rotation() {
    let mut r = Matrix3::identity();
    r[(0, 0)] = -1.0;
    assert!(Pose::new(r, Vector3::zeros()).is_err());
    assert!(Pose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
}

#[test]
fn pose_distance_examples() {
    let a = EulerPose::new(10.0, 5.0, -3.0, 1.0, -700.0, 2.0)
        .to_pose()
        .unwrap();
    let d = pose_distance(&a, &a, 1000.0);
    assert_eq!(
        (d.rot_rad, d.arc_mm, d.xyz_mm, d.dgeo_mm),
        (0.0, 0.0, 0.0, 0.0)
    );

    let b = Pose::new(*a.rotation(), a.translation() + Vector3::new(3.0, 4.0, 0.0)).unwrap();
    let d = pose_distance(&a, &b, 1000.0);
    assert!((d.xyz_mm - 5.0).abs() < 1e-12 && (d.dgeo_mm - 5.0).abs() < 1e-12);

    let c = Pose::new(rot_z(0.1), Vector3::zeros()).unwrap();
    let d = pose_distance(&Pose::identity(), &c, 1000.0);
    assert!((d.rot_rad - 0.1).abs() < 1e-12);
    assert!((d.arc_mm - 50.0).abs() < 1e-9);
    assert!((d.dgeo_mm - 50.0).abs() < 1e-9);
}

#[test]
fn axis_angle_round_trip() {
    let rv = Vector3::new(0.2, -0.4, 0.1);
    let r = rotation_from_axis_angle(&rv);
    assert!((axis_angle(&r) - rv).norm() < 1e-12);
    assert!((rotation_angle(&r) - rv.norm()).abs() < 1e-12);
}

#[test]
fn pose_json_round_trip_and_rejection() {
    let doc = PoseJson::from_euler(&EulerPose::new(0.1, -2.5, 3.0, 4.0, -750.125, 1e-7));
    let text = serde_json::to_string(&doc).unwrap();
    assert_eq!(serde_json::from_str::<PoseJson>(&text).unwrap(), doc);

    let pose = EulerPose::new(17.0, 3.0, -8.0, 2.0, -650.0, 5.0)
        .to_pose()
        .unwrap();
    let doc = PoseJson::from_pose_matrix(&pose);
    let text = serde_json::to_string(&doc).unwrap();
    let parsed: PoseJson = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, doc);
    let back = parsed.to_pose().unwrap();
    assert!((back.camera_to_world() - pose.camera_to_world()).amax() < 1e-12);

    let bad =
        r#"{"parameterization": "quaternion", "rotation": [1,0,0,0], "translation": [0,0,0]}"#;
    assert!(serde_json::from_str::<PoseJson>(bad).is_err());
    let bad = r#"{"parameterization": "euler_zxy_deg", "rotation": [0,0,0], "translation": [0,0,0], "x": 1}"#;
    assert!(serde_json::from_str::<PoseJson>(bad).is_err());
    let partial = r#"{"parameterization": "euler_zxy_deg", "rotation": [30,10,0], "translation": [0,-750,0], "partial": true}"#;
    assert!(serde_json::from_str::<PoseJson>(partial)
        .unwrap()
        .is_partial());
}

#[test]
fn euler_chart_jacobian_matches_finite_differences() {
    let e = EulerPose::new(20.0, -15.0, 8.0, 4.0, -650.0, -3.0);
    let jac = ChartJacobian::euler(&e).unwrap();
    let c = Vector3::new(12.0, 900.0, -40.0);
    let p = e.to_pose().unwrap();
    let analytic = jac.point_derivatives(&(c + p.translation()));
    for k in 0..6 {
        let h = 1e-4;
        let mut a = e.to_array();
        let mut b = e.to_array();
        a[k] += h;
        b[k] -= h;
        let wa = EulerPose::from_array(a)
            .to_pose()
            .unwrap()
            .transform_point(&c);
        let wb = EulerPose::from_array(b)
            .to_pose()
            .unwrap()
            .transform_point(&c);
        let fd = (wa - wb) / (2.0 * h);
        assert!(
            (fd - analytic[k]).norm() < 1e-6 * (1.0 + fd.norm()),
            "param {k}"
        );
    }
}

#[test]
fn se3_chart_jacobian_matches_perturbation() {
    let p = EulerPose::new(-30.0, 25.0, 4.0, 10.0, -800.0, 6.0)
        .to_pose()
        .unwrap();
    let jac = ChartJacobian::se3(&p);
    let c = Vector3::new(-50.0, 1000.0, 20.0);
    let analytic = jac.point_derivatives(&(c + p.translation()));
    for k in 0..6 {
        let h = 1e-4;
        let mut d = [0.0; 6];
        d[k] = h;
        let wa = perturb_se3(&p, &d).transform_point(&c);
        d[k] = -h;
        let wb = perturb_se3(&p, &d).transform_point(&c);
        let fd = (wa - wb) / (2.0 * h);
        assert!(
            (fd - analytic[k]).norm() < 1e-6 * (1.0 + fd.norm()),
            "param {k}"
        );
    }
}

#[test]
fn euler_chart_refuses_gimbal_lock() {
    let e = EulerPose::new(0.0, 90.0, 0.0, 0.0, 0.0, 0.0);
    assert!(ChartJacobian::euler(&e).is_err());
    assert!(Chart::EulerZxy.jacobian(&e.to_pose().unwrap()).is_err());
    assert!(Chart::Se3.jacobian(&e.to_pose().unwrap()).is_ok());
}

fn euler_strategy() -> impl Strategy<Value = EulerPose> {
    (
        -180.0..180.0f64,
        -89.0..89.0f64,
        -180.0..180.0f64,
        -500.0..500.0f64,
        -1000.0..1000.0f64,
        -500.0..500.0f64,
    )
        .prop_map(|(a, b, g, x, y, z)| EulerPose::new(a, b, g, x, y, z))
}

proptest! {
    #[test]
    fn euler_rotation_is_orthonormal(e in euler_strategy()) {
        let p = e.to_pose().unwrap();
        let r = p.rotation();
        prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn euler_round_trip(e in euler_strategy()) {
        let p = e.to_pose().unwrap();
        let back = pose_to_euler(&p).euler.to_pose().unwrap();
        prop_assert!((back.camera_to_world() - p.camera_to_world()).amax() < 1e-9);
    }

    #[test]
    fn composition_matches_matrix_product(a in euler_strategy(), b in euler_strategy()) {
        let (pa, pb) = (a.to_pose().unwrap(), b.to_pose().unwrap());
        let lhs = pa.compose(&pb).camera_to_world();
        let rhs = pa.camera_to_world() * pb.camera_to_world();
        prop_assert!((lhs - rhs).amax() < 1e-9 * (1.0 + rhs.amax()));
    }

    #[test]
    fn pose_distance_symmetric_and_positive(a in euler_strategy(), b in euler_strategy()) {
        let (pa, pb) = (a.to_pose().unwrap(), b.to_pose().unwrap());
        let ab = pose_distance(&pa, &pb, 1000.0);
        let ba = pose_distance(&pb, &pa, 1000.0);
        prop_assert!((ab.dgeo_mm - ba.dgeo_mm).abs() < 1e-9);
        prop_assert!((ab.rot_rad - ba.rot_rad).abs() < 1e-12);
        prop_assert_eq!(pose_distance(&pa, &pa, 1000.0).dgeo_mm, 0.0);
        prop_assert!(ab.dgeo_mm > 0.0);
    }

    #[test]
    fn projection_scale_invariant(
        e in euler_strategy(),
        x in -100.0..100.0f64, y in -100.0..100.0f64, z in -100.0..100.0f64,
        s in prop_oneof![-50.0..-0.01f64, 0.01..50.0f64],
    ) {
        let k = Intrinsics::new(1000.0, 64, 64, [1.0, 1.0], [0.0, 0.0]).unwrap();
        let pi = ProjectionMatrix::new(&k, &e.to_pose().unwrap());
        let a = pi.project_homogeneous(&Vector4::new(x, y, z, 1.0));
        let b = pi.project_homogeneous(&Vector4::new(s * x, s * y, s * z, s));
        match (a, b) {
            (Projected::Pixel(pa), Projected::Pixel(pb)) => {
                prop_assert!((pa - pb).norm() < 1e-9 * (1.0 + pa.norm()));
            }
            (Projected::Degenerate, Projected::Degenerate) => {}
            _ => prop_assert!(false, "scaling changed degeneracy"),
        }
    }
}
