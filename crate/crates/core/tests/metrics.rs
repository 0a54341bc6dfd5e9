use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use vilo_core::metrics::*;
use vilo_core::{RigidTransform, Rotation};

fn random_transform(rng: &mut ChaCha8Rng, scale: f64) -> RigidTransform {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    RigidTransform::new(Rotation::exp(&(Vector3::from(axis) * angle)), t * scale)
}

fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
    let mut pose = random_transform(rng, 5.0);
    let samples = (0..n)
        .map(|i| {
            let step = RigidTransform::new(
                Rotation::exp(&Vector3::new(0.0, 0.0, rng.random_range(-0.2..0.2))),
                Vector3::new(rng.random_range(0.5..1.0), rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)),
            );
            pose = pose.compose(&step);
            (i as f64 * 0.1, pose)
        })
        .collect();
    Trajectory::new("gt", samples).unwrap()
}

fn offset(traj: &Trajectory, mut delta: impl FnMut(usize) -> Vector3<f64>) -> Trajectory {
    let samples = traj
        .samples()
        .iter()
        .enumerate()
        .map(|(i, (t, p))| (*t, RigidTransform::new(p.rotation, p.translation + delta(i))))
        .collect();
    Trajectory::new("est", samples).unwrap()
}

#[test]
fn identical_trajectories_align_to_identity() {
    let gt = random_trajectory(&mut ChaCha8Rng::seed_from_u64(1), 30);
    let t = align_se3(&gt, &gt).unwrap();
    let (dt, dr) = alignment_error(&t, &RigidTransform::identity());
    assert!(dt < 1e-12 && dr < 1e-12);
    assert!(mapping_keyframe_error(&gt, &gt).unwrap() < 1e-12);
}

#[test]
fn known_offset_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let gt = random_trajectory(&mut rng, 25);
        let truth = random_transform(&mut rng, 10.0);
        let est = gt.transformed(&truth.inverse(), "est");
        let t = align_se3(&est, &gt).unwrap();
        let (dt, dr) = alignment_error(&t, &truth);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    }
}

#[test]
fn noisy_alignment_within_three_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma = 0.01;
    let noise = Normal::new(0.0, sigma).unwrap();
    for _ in 0..20 {
        let gt = random_trajectory(&mut rng, 100);
        let truth = random_transform(&mut rng, 10.0);
        let clean = gt.transformed(&truth.inverse(), "est");
        let noisy = offset(&clean, |_| Vector3::from_fn(|_, _| noise.sample(&mut rng)));
        let t = align_se3(&noisy, &gt).unwrap();
        // First-order covariance of the left rotation error is σ²·A⁻¹ with
        // A = Σ [p̄_i]×ᵀ[p̄_i]× over centred ground-truth positions.
        let n = gt.len() as f64;
        let positions = gt.positions();
        let mean = positions.iter().sum::<Vector3<f64>>() / n;
        let mut a = nalgebra::Matrix3::zeros();
        for p in &positions {
            let k = vilo_core::geometry::skew(&(p - mean));
            a += k.transpose() * k;
        }
        let delta = (t.rotation * truth.rotation.inverse()).log();
        let mahalanobis = (delta.transpose() * a * delta)[0] / (sigma * sigma);
        // 99.7% quantile of χ²(3).
        assert!(mahalanobis < 14.16, "rotation {mahalanobis}");
        let centroid_err = (t.transform_point(&(truth.inverse().transform_point(&mean))) - mean).norm();
        assert!(centroid_err < 3.0 * sigma * 3f64.sqrt() / n.sqrt(), "centroid {centroid_err}");
    }
}

#[test]
fn keyframe_error_with_orthogonal_perturbation() {
    let base = [(1.0, 0.0), (0.0, 2.0), (3.0, 1.0), (2.0, -3.0)];
    let mut points = Vec::new();
    let mut signs = Vec::new();
    for (k, (x, y)) in base.iter().enumerate() {
        let s = if k % 2 == 0 { 1.0 } else { -1.0 };
        points.push(Vector3::new(*x, *y, 0.0));
        points.push(Vector3::new(-x, -y, 0.0));
        signs.extend([s, s]);
    }
    let gt = Trajectory::new(
        "gt",
        points.iter().enumerate().map(|(i, p)| (i as f64, RigidTransform::from_translation(*p))).collect(),
    )
    .unwrap();
    let est = offset(&gt, |i| Vector3::z() * 0.1 * signs[i]);
    let e = mapping_keyframe_error(&est, &gt).unwrap();
    assert!((e - 0.1).abs() < 1e-12, "{e}");
}

#[test]
fn single_keyframe_is_rejected() {
    let gt = random_trajectory(&mut ChaCha8Rng::seed_from_u64(4), 1);
    assert!(matches!(mapping_keyframe_error(&gt, &gt), Err(MetricsError::TooFewPairs { .. })));
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0))
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn point_error_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = cloud(&mut rng, 1000);
    let cfg = IcpConfig::default();

    let same = mapping_point_error(&gt, &gt, &cfg).unwrap();
    assert_eq!(same.rmse, 0.0);
    assert!(same.converged);

    let moved = gt.transformed(&RigidTransform::new(Rotation::from_yaw(0.01), Vector3::new(0.05, -0.03, 0.02)));
    let r = mapping_point_error(&moved, &gt, &cfg).unwrap();
    assert!(r.converged);
    assert!(r.rmse < 1e-8, "{}", r.rmse);
    assert_eq!(r.pairs, 1000);

    let radius = 0.05;
    let noisy = PointCloud::new(
        gt.points()
            .iter()
            .map(|p| {
                let d: [f64; 3] = UnitSphere.sample(&mut rng);
                p + Vector3::from(d) * radius
            })
            .collect(),
    )
    .unwrap();
    let r = mapping_point_error(&noisy, &gt, &cfg).unwrap();
    assert!((r.rmse - radius).abs() < 0.1 * radius, "{}", r.rmse);
}

#[test]
fn alignment_error_examples() {
    let id = RigidTransform::identity();
    assert_eq!(alignment_error(&id, &id), (0.0, 0.0));
    let yaw = RigidTransform::new(Rotation::from_yaw(std::f64::consts::FRAC_PI_2), Vector3::zeros());
    let (dt, dr) = alignment_error(&yaw, &id);
    assert_eq!(dt, 0.0);
    assert!((dr - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let a = random_transform(&mut rng, 3.0);
        let b = random_transform(&mut rng, 3.0);
        let (dt, dr) = alignment_error(&a, &b);
        let qa = UnitQuaternion::from_matrix(&a.rotation.matrix());
        let qb = UnitQuaternion::from_matrix(&b.rotation.matrix());
        assert!((dr - qa.angle_to(&qb)).abs() < 1e-10);
        assert_eq!(dr, alignment_error(&b, &a).1);
        assert_eq!(dt, (a.translation - b.translation).norm());
    }
}

#[test]
fn local_trajectory_error_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = random_trajectory(&mut rng, 100);
    assert_eq!(local_trajectory_error(&gt, &gt).unwrap(), 0.0);

    let moved = gt.transformed(&random_transform(&mut rng, 20.0), "est");
    assert!(local_trajectory_error(&moved, &gt).unwrap() < 1e-12);

    let drift = offset(&gt, |i| Vector3::x() * 0.01 * i as f64);
    let expected = ((1..100).map(|i| (0.01 * i as f64).powi(2)).sum::<f64>() / 99.0).sqrt();
    let e = local_trajectory_error(&drift, &gt).unwrap();
    assert!((e - expected).abs() < 1e-12, "{e} {expected}");

    let single = Trajectory::new("x", vec![gt.samples()[0]]).unwrap();
    assert!(local_trajectory_error(&single, &gt).is_err());
    assert!(local_trajectory_error(&Trajectory::new("x", vec![]).unwrap(), &gt).is_err());
}

#[test]
fn local_trajectory_error_is_invariant_to_global_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for _ in 0..100 {
        let gt = random_trajectory(&mut rng, 50);
        let est = offset(&gt, |_| Vector3::from_fn(|_, _| noise.sample(&mut rng)));
        let base = local_trajectory_error(&est, &gt).unwrap();
        let g = random_transform(&mut rng, 50.0);
        let moved = local_trajectory_error(&est.transformed(&g, "est"), &gt.transformed(&g, "gt")).unwrap();
        assert!((base - moved).abs() < 1e-9 * (1.0 + base), "{base} {moved}");
    }
}

#[test]
fn map_trajectory_error_examples() {
    let gt = random_trajectory(&mut ChaCha8Rng::seed_from_u64(9), 40);
    assert_eq!(map_trajectory_error(&gt, &gt).unwrap(), 0.0);
    let shifted = offset(&gt, |_| Vector3::new(3.0, 4.0, 0.0));
    assert!((map_trajectory_error(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
    // Not alignment invariant.
    let moved = gt.transformed(&RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)), "est");
    assert!((map_trajectory_error(&moved, &gt).unwrap() - 1.0).abs() < 1e-12);
    let late = Trajectory::new("x", vec![(100.0, RigidTransform::identity())]).unwrap();
    assert!(matches!(map_trajectory_error(&late, &gt), Err(MetricsError::LengthMismatch { .. })));
}

#[test]
fn metrics_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = random_trajectory(&mut rng, 60);
    let est = offset(&gt, |i| Vector3::new(0.01 * i as f64, 0.0, 0.0));
    let a = (local_trajectory_error(&est, &gt).unwrap(), map_trajectory_error(&est, &gt).unwrap());
    let b = (local_trajectory_error(&est, &gt).unwrap(), map_trajectory_error(&est, &gt).unwrap());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
}
