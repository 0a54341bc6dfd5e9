//! Multi-camera, multi-map visual-inertial localization.
//!
//! The numerical core ([`geometry`], [`camera`], [`imu`], [`solvers`], [`initializer`],
//! [`map_model`]) is generic over the scalar type through [`Real`]; the aliases below fix
//! it to `f64`. The simulator, filter and metrics work in `f64` directly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod filter;
pub mod geometry;
pub mod imu;
pub mod initializer;
pub mod map_model;
pub mod metrics;
pub mod scalar;
pub mod sim;
pub mod solvers;

pub use scalar::Real;

pub type Rotation = geometry::Rotation<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type YawPose = geometry::YawPose<f64>;
pub type Intrinsics = camera::Intrinsics<f64>;
pub type CameraModel = camera::CameraModel<f64>;
pub type Correspondence = camera::Correspondence<f64>;
pub type ImuSample = imu::ImuSample<f64>;
pub type NavState = imu::NavState<f64>;
pub type MapBundle = map_model::MapBundle<f64>;
pub type QueryFrame = solvers::QueryFrame<f64>;
pub type Observation = solvers::Observation<f64>;
pub type RansacConfig = solvers::RansacConfig<f64>;
pub type MatchResult = solvers::MatchResult<f64>;
pub type InitConfig = initializer::InitConfig<f64>;
pub type InitResult = initializer::InitResult<f64>;
