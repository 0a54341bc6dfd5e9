use approx::assert_relative_eq;
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use vilo_core::camera::{body_camera_rotation, CameraModel, Correspondence, Intrinsics};
use vilo_core::geometry::{RigidTransform, Rotation, YawPose};
use vilo_core::initializer::initialize;
use vilo_core::map_model::MapBundle;
use vilo_core::sim::{generate_scenario, query_case, QueryCaseConfig, SimConfig};
use vilo_core::solvers::{ransac_pose, ransac_success_probability, solve_2pt, QueryFrame, RansacConfig};
use vilo_core::{InitConfig, Real};

fn scene<T: Real>() -> (QueryFrame<T>, Vec<Correspondence<T>>, YawPose<T>) {
    let c = |v: f64| T::from_f64(v).unwrap();
    let cam = CameraModel::new(
        0,
        Intrinsics::new(c(400.0), c(400.0), c(320.0), c(240.0), 640, 480),
        RigidTransform::new(body_camera_rotation(T::zero()), Vector3::zeros()),
    );
    let attitude = Rotation::from_euler_zyx(c(0.3), c(0.04), c(-0.03));
    let frame = QueryFrame::new(&attitude, &[cam], 0).unwrap();
    let truth = YawPose::new(c(0.7), Vector3::new(c(1.0), c(-2.0), c(0.5)));
    let map_t_imu = frame.map_t_imu(&truth);
    let corrs = [(6.0, 0.5, 0.2), (9.0, -1.5, -0.4), (4.0, 1.0, 1.0)]
        .iter()
        .enumerate()
        .map(|(i, &(x, y, z))| {
            let point = map_t_imu.transform_point(&cam.imu_t_cam.transform_point(&Vector3::new(c(y), c(z), c(x))));
            Correspondence {
                camera: 0,
                map: 1,
                landmark: i as u32,
                pixel: cam.project_world(&map_t_imu, &point).unwrap(),
                point,
                weight: T::one(),
                inlier: true,
            }
        })
        .collect();
    (frame, corrs, truth)
}

fn solves_exactly<T: Real>(tol: f64) {
    let (frame, corrs, truth) = scene::<T>();
    let obs = frame.observations(&corrs).unwrap();
    let candidates = solve_2pt(&obs[0], &obs[1]).unwrap();
    let best = candidates
        .iter()
        .map(|c| {
            (
                (c.pose.yaw - truth.yaw).to_f64().unwrap().abs(),
                (c.pose.translation - truth.translation).norm().to_f64().unwrap(),
            )
        })
        .fold((f64::MAX, f64::MAX), |a, b| if b.0 + b.1 < a.0 + a.1 { b } else { a });
    assert!(best.0 < tol && best.1 < tol, "{best:?}");
}

#[test]
fn two_point_solver_is_exact_in_double_and_single_precision() {
    solves_exactly::<f64>(1e-9);
    solves_exactly::<f32>(2e-3);
}

#[test]
fn ransac_and_initializer_agree_on_a_contaminated_query() {
    let case = query_case(&QueryCaseConfig {
        correspondences: 80,
        inlier_rate: 0.5,
        sigma_px: 0.5,
        cameras: 2,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let frame = case.frame();
    let obs = frame.observations(&case.correspondences).unwrap();
    let truth = case.truth();

    let ransac = ransac_pose(&obs, &RansacConfig { iterations: 200, polish: true, ..RansacConfig::default() }).unwrap();
    let init = initialize(&obs, &InitConfig { sigma_px: 0.5, ..InitConfig::default() }).unwrap();
    for pose in [ransac.pose, init.refined_pose] {
        assert!((pose.translation - truth.translation).norm() < 0.05);
        assert!((pose.yaw - truth.yaw).abs() < 0.5f64.to_radians());
    }
    let labelled: Vec<usize> = (0..obs.len()).filter(|&i| case.correspondences[i].inlier).collect();
    assert!(labelled.iter().all(|i| init.inliers.contains(i)));

    let again = initialize(&obs, &InitConfig { sigma_px: 0.5, ..InitConfig::default() }).unwrap();
    assert_eq!(again.refined_pose.yaw.to_bits(), init.refined_pose.yaw.to_bits());
    assert_eq!(again.inliers, init.inliers);
}

#[test]
fn initializer_rejects_a_single_observation() {
    let case = query_case(&QueryCaseConfig { correspondences: 1, inlier_rate: 1.0, ..Default::default() }).unwrap();
    let obs = case.frame().observations(&case.correspondences).unwrap();
    assert!(initialize(&obs, &InitConfig::default()).is_err());
}

#[test]
fn success_probability_matches_closed_form() {
    assert_relative_eq!(ransac_success_probability(0.5, 2, 10), 1.0 - 0.75f64.powi(10), epsilon = 1e-15);
    assert_relative_eq!(ransac_success_probability(0.2, 3, 100), 1.0 - 0.992f64.powi(100), epsilon = 1e-15);
    assert_eq!(ransac_success_probability(1.0, 2, 1), 1.0);
    assert_eq!(ransac_success_probability(0.0, 2, 50), 0.0);
}

#[test]
fn generated_maps_round_trip_through_text() {
    let s = generate_scenario(&SimConfig { duration: 8.0, maps: 2, seed: 1, ..SimConfig::default() }).unwrap();
    assert_eq!(s.maps.len(), 2);
    for map in &s.maps {
        let back = MapBundle::from_text(&map.to_text()).unwrap();
        assert_eq!(&back, map);
    }
    let map = &s.maps[0];
    assert!(!map.keyframes().is_empty() && !map.landmarks().is_empty());
    let kf = &map.keyframes()[0];
    let seen: Vec<Vector2<f64>> =
        map.landmarks().iter().filter_map(|lm| map.keyframe_observation(kf.id, lm.id)).collect();
    assert!(!seen.is_empty());
}

proptest! {
    #[test]
    fn jpl_quaternions_round_trip(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let r = Rotation::exp(&Vector3::new(x, y, z));
        let back = Rotation::from_jpl(r.to_jpl()).unwrap();
        prop_assert!(r.angle_to(&back) < 1e-12);
        prop_assert!((r.quaternion_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transforms_compose_with_their_inverse(yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
        let t = RigidTransform::new(Rotation::from_euler_zyx(yaw, pitch, 0.2), Vector3::new(tx, ty, 1.0));
        let id = t.compose(&t.inverse());
        prop_assert!(id.translation.norm() < 1e-12);
        prop_assert!(id.rotation.angle() < 1e-12);
        let p = Vector3::new(1.0, 2.0, 3.0);
        prop_assert!((t.inverse().transform_point(&t.transform_point(&p)) - p).norm() < 1e-10);
    }
}
