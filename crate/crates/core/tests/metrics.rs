use carm_core::geometry::{pose_distance, rot_z, EulerPose, Intrinsics, Orientation, Pose};
use carm_core::metrics::*;
use carm_core::volume::FiducialSet;
use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn markers() -> FiducialSet {
    FiducialSet::from_points([
        ("a", Vector3::new(10.0, 5.0, -3.0)),
        ("b", Vector3::new(-20.0, 0.0, 12.0)),
        ("c", Vector3::new(0.0, -15.0, 25.0)),
        ("d", Vector3::new(30.0, 8.0, 0.0)),
    ])
    .unwrap()
}

fn camera(h: usize, w: usize, s: [f64; 2]) -> Intrinsics {
    Intrinsics::new(1000.0, h, w, s, [0.0, 0.0]).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    EulerPose::new(
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-30.0..30.0),
        rng.gen_range(-750.0..-550.0),
        rng.gen_range(-30.0..30.0),
    )
    .to_pose()
    .unwrap()
}

/// Pinhole projection written out for the identity detector layout.
fn project_by_hand(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Vector2<f64> {
    let c = pose.rotation().transpose() * x - pose.translation();
    let [sx, sy] = k.pixel_spacing_mm;
    let f = k.focal_length_mm;
    Vector2::new(
        f * c.x / c.z / sx + k.width as f64 / 2.0,
        f * c.y / c.z / sy + k.height as f64 / 2.0,
    )
}

fn mpe_by_hand(k: &Intrinsics, t: &Pose, t_hat: &Pose, x: &FiducialSet) -> f64 {
    let d: f64 = x
        .points()
        .map(|p| (project_by_hand(k, t, &p) - project_by_hand(k, t_hat, &p)).norm())
        .sum();
    d / x.len() as f64
}

#[test]
fn identical_poses_give_an_all_zero_report() {
    let k = camera(64, 64, [1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let t = random_pose(&mut rng);
        let r = full_report(&t, &t, &k, Some(&markers())).unwrap();
        for v in [
            r.mpe_px.unwrap(),
            r.mpe_mm.unwrap(),
            r.mrpe_mm.unwrap(),
            r.rot_deg,
            r.arc_mm,
            r.xyz_mm,
            r.dgeo_mm,
            r.mtre_mm.unwrap(),
        ] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(r.submillimeter, Some(true));
    }
}

#[test]
fn pure_translation_gives_its_length_everywhere() {
    let k = camera(64, 64, [1.0, 1.0]);
    let t_hat = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
    assert!((mtre(&Pose::identity(), &t_hat, &markers()).unwrap() - 5.0).abs() < 1e-12);
    // Same offset seen from a pose that has every marker in front of the source.
    let t = Pose::from_translation(Vector3::new(0.0, -600.0, 0.0));
    let t_hat = Pose::from_translation(Vector3::new(0.0, -600.0, 5.0));
    let r = full_report(&t, &t_hat, &k, Some(&markers())).unwrap();
    assert!((r.mtre_mm.unwrap() - 5.0).abs() < 1e-12);
    for f in &r.per_fiducial {
        assert!((f.tre_mm - 5.0).abs() < 1e-12, "{}", f.name);
    }
}

#[test]
fn rotation_chord() {
    let x = FiducialSet::from_points([("p", Vector3::new(100.0, 0.0, 0.0))]).unwrap();
    let t_hat = Pose::new(rot_z(0.1), Vector3::zeros()).unwrap();
    let m = mtre(&Pose::identity(), &t_hat, &x).unwrap();
    assert!((m - 200.0 * 0.05f64.sin()).abs() < 1e-12);
    assert!((m - 9.9958).abs() < 1e-4);
}

#[test]
fn depth_change_moves_projections_slightly() {
    let k = camera(128, 128, [0.5, 0.5]).with_orientation(Orientation::Identity);
    let t = Pose::from_translation(Vector3::new(0.0, 0.0, -600.0));
    let t_hat = Pose::from_translation(Vector3::new(0.0, 0.0, -610.0));
    let x = FiducialSet::from_points([("a", Vector3::new(10.0, 5.0, 0.0))]).unwrap();
    let px = mpe_px(&t, &t_hat, &k, &x).unwrap();
    assert!(px > 0.0 && px < 1.0, "{px}");
    // 1000 / 0.5 · √(10² + 5²) · (1/600 − 1/610)
    let expected = 2000.0 * 125f64.sqrt() * (1.0 / 600.0 - 1.0 / 610.0);
    assert!((px - expected).abs() < 1e-9);
    assert!((mpe(&t, &t_hat, &k, &x).unwrap() - 0.5 * expected).abs() < 1e-9);
}

#[test]
fn in_plane_shift_matches_projection_oracle() {
    let k = camera(100, 80, [0.4, 0.7]).with_orientation(Orientation::Identity);
    let t = EulerPose::new(0.0, 0.0, 0.0, 0.0, 0.0, -700.0)
        .to_pose()
        .unwrap();
    let t_hat = EulerPose::new(0.0, 0.0, 0.0, 0.4, 0.0, -700.0)
        .to_pose()
        .unwrap();
    let x = markers();
    assert!((mpe_px(&t, &t_hat, &k, &x).unwrap() - mpe_by_hand(&k, &t, &t_hat, &x)).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let (a, b) = (
            Pose::new(*a.rotation(), Vector3::new(0.0, 0.0, -700.0)).unwrap(),
            Pose::new(*b.rotation(), Vector3::new(0.0, 0.0, -690.0)).unwrap(),
        );
        let e = mpe_px(&a, &b, &k, &x).unwrap();
        assert!((e - mpe_by_hand(&k, &a, &b, &x)).abs() < 1e-9 * e.max(1.0));
    }
}

#[test]
fn reprojection_error_of_one_pixel_is_the_spacing() {
    // A camera shift of d·s/f at depth d moves the marker by exactly one column.
    let k = camera(64, 64, [0.3, 0.8]).with_orientation(Orientation::Identity);
    let x = FiducialSet::from_points([("p", Vector3::new(0.0, 0.0, 0.0))]).unwrap();
    let t = Pose::from_translation(Vector3::new(0.0, 0.0, -750.0));
    let t_hat = Pose::from_translation(Vector3::new(-750.0 * 0.3 / 1000.0, 0.0, -750.0));
    assert!((mpe_px(&t, &t_hat, &k, &x).unwrap() - 1.0).abs() < 1e-9);
    // f ‖K⁻¹ (1, 0, 0)ᵀ‖ with K⁻¹ = diag(1/f, 1/f, 1) · diag(s_x, s_y, 1) on the
    // first two coordinates of a direction.
    let kinv: Matrix3<f64> = k.k().try_inverse().unwrap();
    let lifted = 1000.0 * (kinv * Vector3::new(1.0, 0.0, 0.0)).norm();
    assert!((lifted - 0.3).abs() < 1e-12);
    assert!((mrpe(&t, &t_hat, &k, &x).unwrap() - 0.3).abs() < 1e-9);
    assert!((mpe(&t, &t_hat, &k, &x).unwrap() - (0.3f64 * 0.8).sqrt()).abs() < 1e-9);
}

#[test]
fn square_pixels_make_reprojection_and_projection_errors_agree() {
    let k = camera(64, 64, [0.6, 0.6]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let t = random_pose(&mut rng);
        let t_hat = t.compose(
            &EulerPose::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                0.0,
                rng.gen_range(-5.0..5.0),
                0.0,
                0.0,
            )
            .to_pose()
            .unwrap(),
        );
        let (a, b) = (
            mrpe(&t, &t_hat, &k, &markers()).unwrap(),
            mpe(&t, &t_hat, &k, &markers()).unwrap(),
        );
        assert!(a >= b - 1e-9 * b.max(1.0));
        assert!((a - b).abs() < 1e-9 * b.max(1.0));
    }
}

#[test]
fn report_fields_match_standalone_operations() {
    let k = camera(96, 80, [0.5, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, t_hat) = (random_pose(&mut rng), random_pose(&mut rng));
    let t_hat = Pose::new(
        *t_hat.rotation(),
        *t.translation() + Vector3::new(0.3, 0.2, -0.1),
    )
    .unwrap();
    let x = markers();
    let r = full_report(&t, &t_hat, &k, Some(&x)).unwrap();
    let d = pose_distance(&t, &t_hat, 1000.0);
    assert_eq!(r.mpe_px.unwrap(), mpe_px(&t, &t_hat, &k, &x).unwrap());
    assert_eq!(r.mpe_mm.unwrap(), mpe(&t, &t_hat, &k, &x).unwrap());
    assert_eq!(r.mrpe_mm.unwrap(), mrpe(&t, &t_hat, &k, &x).unwrap());
    assert_eq!(r.mtre_mm.unwrap(), mtre(&t, &t_hat, &x).unwrap());
    assert_eq!(
        (r.arc_mm, r.xyz_mm, r.dgeo_mm),
        (d.arc_mm, d.xyz_mm, d.dgeo_mm)
    );
    assert_eq!(r.rot_deg, d.rot_rad.to_degrees());
    assert_eq!(r.submillimeter, Some(r.mtre_mm.unwrap() < 1.0));
    assert_eq!(r.per_fiducial.len(), 4);
    let json = serde_json::to_value(&r).unwrap();
    for key in [
        "mpe_px",
        "mpe_mm",
        "mrpe_mm",
        "rot_deg",
        "arc_mm",
        "xyz_mm",
        "dgeo_mm",
        "mtre_mm",
        "submillimeter",
        "per_fiducial",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn submillimeter_flag_follows_mtre() {
    let k = camera(64, 64, [1.0, 1.0]);
    let at = |y: f64| Pose::from_translation(Vector3::new(0.0, y, 0.0));
    let near = full_report(&at(-600.0), &at(-599.1), &k, Some(&markers())).unwrap();
    let far = full_report(&at(-600.0), &at(-598.9), &k, Some(&markers())).unwrap();
    assert_eq!(near.submillimeter, Some(true));
    assert_eq!(far.submillimeter, Some(false));
}

#[test]
fn fiducial_free_report_has_only_pose_distances() {
    let k = camera(64, 64, [1.0, 1.0]);
    let t_hat = Pose::new(rot_z(0.1), Vector3::new(3.0, 4.0, 0.0)).unwrap();
    let r = full_report(&Pose::identity(), &t_hat, &k, None).unwrap();
    assert!(
        r.mpe_mm.is_none()
            && r.mrpe_mm.is_none()
            && r.mtre_mm.is_none()
            && r.submillimeter.is_none()
    );
    assert!((r.arc_mm - 50.0).abs() < 1e-9);
    assert!((r.xyz_mm - 5.0).abs() < 1e-12);
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("mtre_mm").is_none());
    assert!(json.get("dgeo_mm").is_some());
}

#[test]
fn geodesic_distance_is_the_quadrature_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let d = pose_distance(&a, &b, 1000.0);
        assert_eq!(
            d.dgeo_mm,
            (d.arc_mm * d.arc_mm + d.xyz_mm * d.xyz_mm).sqrt()
        );
        assert!(
            (d.dgeo_mm.powi(2) - (d.arc_mm.powi(2) + d.xyz_mm.powi(2))).abs()
                <= 1e-12 * d.dgeo_mm.powi(2)
        );
    }
}

#[test]
fn errors() {
    let k = camera(64, 64, [1.0, 1.0]);
    let empty = FiducialSet::new(vec![]).unwrap();
    assert!(mtre(&Pose::identity(), &Pose::identity(), &empty).is_err());
    assert!(mpe(&Pose::identity(), &Pose::identity(), &k, &empty).is_err());
    // Marker behind the source under the estimate.
    let x = FiducialSet::from_points([("behind", Vector3::new(0.0, 0.0, 0.0))]).unwrap();
    let t = Pose::from_translation(Vector3::new(0.0, -600.0, 0.0));
    let t_hat = Pose::from_translation(Vector3::new(0.0, 600.0, 0.0));
    let e = mpe(&t, &t_hat, &k, &x).unwrap_err().to_string();
    assert!(e.contains("behind"), "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mtre_is_invariant_to_a_common_rotation(seed in any::<u64>(), ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, t_hat) = (random_pose(&mut rng), random_pose(&mut rng));
        let g = Pose::new(carm_core::geometry::rotation_from_axis_angle(&Vector3::new(ax, ay, az)), Vector3::zeros()).unwrap();
        let x = markers();
        let base = mtre(&t, &t_hat, &x).unwrap();
        prop_assert!((mtre(&g.compose(&t), &g.compose(&t_hat), &x).unwrap() - base).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn metrics_are_nonnegative_and_vanish_only_at_equality(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = camera(64, 64, [1.0, 1.0]);
        let (t, t_hat) = (random_pose(&mut rng), random_pose(&mut rng));
        let r = full_report(&t, &t_hat, &k, Some(&markers())).unwrap();
        for v in [r.mpe_mm.unwrap(), r.mrpe_mm.unwrap(), r.arc_mm, r.xyz_mm, r.dgeo_mm, r.mtre_mm.unwrap()] {
            prop_assert!(v > 1e-12);
        }
    }
}
