//! IMU samples and strapdown kinematics in a gravity-aligned local frame.
//!
//! Over one sample interval the bias-corrected angular rate and specific force are held at
//! the average of the two bracketing samples and the kinematics
//! `Ṙ = R⌊ω×⌋, v̇ = R a + g, ṗ = v` are integrated in closed form. For motions with
//! constant body rates (static, straight lines, circles) this is exact.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{gravity, skew, RigidTransform, Rotation};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample<T: Real> {
    /// Seconds.
    pub t: T,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vector3<T>,
    /// Specific force in the body frame, m/s².
    pub accel: Vector3<T>,
}

/// Pose and velocity of the IMU in the local frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState<T: Real> {
    /// `local_R_imu`.
    pub rotation: Rotation<T>,
    pub velocity: Vector3<T>,
    pub position: Vector3<T>,
}

impl<T: Real> NavState<T> {
    pub fn pose(&self) -> RigidTransform<T> {
        RigidTransform::new(self.rotation, self.position)
    }
}

/// `(1−cosθ)/θ²`, `(θ−sinθ)/θ³`, `(θ²/2+cosθ−1)/θ⁴`, series-expanded near zero.
fn gamma_coefficients<T: Real>(theta: T) -> (T, T, T) {
    if theta < T::lit(1e-2) {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            T::lit(0.5) - t2 / T::lit(24.0) + t4 / T::lit(720.0),
            T::lit(1.0 / 6.0) - t2 / T::lit(120.0) + t4 / T::lit(5040.0),
            T::lit(1.0 / 24.0) - t2 / T::lit(720.0) + t4 / T::lit(40320.0),
        )
    } else {
        let t2 = theta * theta;
        let (s, c) = theta.sin_cos();
        ((T::one() - c) / t2, (theta - s) / (t2 * theta), (t2 * T::lit(0.5) + c - T::one()) / (t2 * t2))
    }
}

/// `∫₀ᵈᵗ Exp(ωτ) dτ` and `∫₀ᵈᵗ∫₀ˢ Exp(ωτ) dτ ds`.
pub fn rotation_integrals<T: Real>(omega: &Vector3<T>, dt: T) -> (Matrix3<T>, Matrix3<T>) {
    let theta = omega.norm() * dt;
    let (f1, f2, f3) = gamma_coefficients(theta);
    let k = skew(omega);
    let k2 = k * k;
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let i = Matrix3::identity();
    let g1 = i * dt + k * (f1 * dt2) + k2 * (f2 * dt3);
    let g2 = i * (dt2 * T::lit(0.5)) + k * (f2 * dt3) + k2 * (f3 * dt3 * dt);
    (g1, g2)
}

/// Propagates `state` over `dt` with constant body rate `omega` and specific force `accel`
/// (both already bias-corrected).
pub fn integrate_constant<T: Real>(state: &NavState<T>, omega: &Vector3<T>, accel: &Vector3<T>, dt: T) -> NavState<T> {
    let (g1, g2) = rotation_integrals(omega, dt);
    let r = state.rotation.matrix();
    let g = gravity::<T>();
    NavState {
        rotation: state.rotation * Rotation::exp(&(omega * dt)),
        velocity: state.velocity + r * (g1 * accel) + g * dt,
        position: state.position + state.velocity * dt + r * (g2 * accel) + g * (dt * dt * T::lit(0.5)),
    }
}

/// One step between two consecutive samples using their averaged readings.
pub fn integrate_interval<T: Real>(
    state: &NavState<T>,
    from: &ImuSample<T>,
    to: &ImuSample<T>,
    gyro_bias: &Vector3<T>,
    accel_bias: &Vector3<T>,
) -> NavState<T> {
    let half = T::lit(0.5);
    let omega = (from.gyro + to.gyro) * half - gyro_bias;
    let accel = (from.accel + to.accel) * half - accel_bias;
    integrate_constant(state, &omega, &accel, to.t - from.t)
}

/// Integrates a whole stream from `initial` (at the first sample time). Returns one state
/// per sample.
pub fn integrate_stream<T: Real>(initial: NavState<T>, samples: &[ImuSample<T>]) -> Vec<NavState<T>> {
    let mut out = Vec::with_capacity(samples.len());
    let zero = Vector3::zeros();
    let mut state = initial;
    if let Some(first) = samples.first() {
        out.push(state);
        let mut prev = first;
        for s in &samples[1..] {
            state = integrate_interval(&state, prev, s, &zero, &zero);
            out.push(state);
            prev = s;
        }
    }
    out
}
