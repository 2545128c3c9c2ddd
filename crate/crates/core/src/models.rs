//! Ground-truth dynamics and measurement synthesis.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{rotation, Mat2, Mat4, Mat42, Vec2, Vec4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Vehicle,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntityState {
    pub p: Vec2,
    pub v: Vec2,
    pub kind: EntityKind,
}

impl EntityState {
    pub fn new(p: Vec2, v: Vec2, kind: EntityKind) -> Self {
        debug_assert!(p.iter().chain(v.iter()).all(|c| c.is_finite()));
        Self { p, v, kind }
    }

    pub fn vehicle(p: Vec2, v: Vec2) -> Self {
        Self::new(p, v, EntityKind::Vehicle)
    }

    pub fn feature(p: Vec2, v: Vec2) -> Self {
        Self::new(p, v, EntityKind::Feature)
    }

    pub fn as_vector(&self) -> Vec4 {
        Vec4::new(self.p[0], self.p[1], self.v[0], self.v[1])
    }

    pub fn from_vector(x: &Vec4, kind: EntityKind) -> Self {
        Self::new(Vec2::new(x[0], x[1]), Vec2::new(x[2], x[3]), kind)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }
}

/// Constant-velocity model with known acceleration input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub ts: f64,
    pub transition: Mat4,
    pub input_map: Mat42,
    pub process_noise: Mat4,
}

pub fn transition_matrix(ts: f64) -> Mat4 {
    let mut a = Mat4::identity();
    a[(0, 2)] = ts;
    a[(1, 3)] = ts;
    a
}

pub fn input_map(ts: f64) -> Mat42 {
    let h = 0.5 * ts * ts;
    Mat42::new(h, 0.0, 0.0, h, ts, 0.0, 0.0, ts)
}

/// Motion model whose acceleration noise is `sigma_parallel` along
/// `heading` and `sigma_perp` across it.
pub fn make_motion_params(
    ts: f64,
    sigma_parallel: f64,
    sigma_perp: f64,
    heading: f64,
) -> MotionParams {
    assert!(ts > 0.0, "sampling interval must be positive");
    assert!(sigma_parallel >= 0.0 && sigma_perp >= 0.0);
    let b = input_map(ts);
    let rot = rotation(heading);
    let accel_cov = rot
        * Mat2::new(sigma_parallel * sigma_parallel, 0.0, 0.0, sigma_perp * sigma_perp)
        * rot.transpose();
    let q = b * accel_cov * b.transpose();
    MotionParams {
        ts,
        transition: transition_matrix(ts),
        input_map: b,
        process_noise: (q + q.transpose()) * 0.5,
    }
}

/// Same model with the noise switched off: used for static features.
pub fn static_motion_params(ts: f64) -> MotionParams {
    make_motion_params(ts, 0.0, 0.0, 0.0)
}

/// Draws `w ~ N(0, q)` for a PSD, possibly singular, `q`.
pub fn sample_psd<R: Rng + ?Sized>(q: &Mat4, rng: &mut R) -> Vec4 {
    let eig = SymmetricEigen::new(*q);
    let mut w = Vec4::zeros();
    for j in 0..4 {
        let ev = eig.eigenvalues[j];
        // always consume the draw so streams stay aligned across configurations
        let n: f64 = rng.sample(StandardNormal);
        if ev > 0.0 {
            w += eig.eigenvectors.column(j) * (ev.sqrt() * n);
        }
    }
    w
}

/// `x' = A x + B a + w`, with `w = 0` when `noise` is `None`.
pub fn propagate_vehicle(
    x: &EntityState,
    params: &MotionParams,
    accel: &Vec2,
    noise: Option<Vec4>,
) -> EntityState {
    let next = params.transition * x.as_vector()
        + params.input_map * accel
        + noise.unwrap_or_else(Vec4::zeros);
    EntityState::from_vector(&next, x.kind)
}

/// `x' = A x + w`. Features have no control input.
pub fn propagate_feature(x: &EntityState, params: &MotionParams, noise: Option<Vec4>) -> EntityState {
    let next = params.transition * x.as_vector() + noise.unwrap_or_else(Vec4::zeros);
    EntityState::from_vector(&next, x.kind)
}

/// Zero-mean diagonal prior used to initialize an entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialPrior {
    /// Position variance per axis (m^2).
    pub position_var: f64,
    /// Velocity variance per axis ((m/s)^2).
    pub velocity_var: f64,
}

impl Default for InitialPrior {
    fn default() -> Self {
        Self {
            position_var: 1e6,
            velocity_var: 1e4,
        }
    }
}

impl InitialPrior {
    /// Static object: broad position prior, velocity pinned near zero.
    pub fn at_rest() -> Self {
        Self { position_var: 1e6, velocity_var: 1e-6 }
    }

    pub fn covariance(&self) -> Mat4 {
        Mat4::from_diagonal(&Vec4::new(
            self.position_var,
            self.position_var,
            self.velocity_var,
            self.velocity_var,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub vehicle_id: usize,
    pub z: Vec2,
    pub r: Mat2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct V2fObservation {
    pub vehicle_id: usize,
    pub feature_id: usize,
    /// Feature position relative to the vehicle.
    pub z: Vec2,
    pub r: Mat2,
}

fn isotropic_draw<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Vec2 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    Vec2::new(a, b) * sigma
}

/// Noise floor applied to a zero sigma so that `r` stays invertible.
const MIN_VARIANCE: f64 = 1e-12;

fn isotropic_cov(sigma: f64) -> Mat2 {
    Mat2::identity() * (sigma * sigma).max(MIN_VARIANCE)
}

pub fn simulate_gnss<R: Rng + ?Sized>(
    vehicle_id: usize,
    truth: &EntityState,
    sigma: f64,
    rng: &mut R,
) -> GnssFix {
    GnssFix {
        vehicle_id,
        z: truth.p + isotropic_draw(sigma, rng),
        r: isotropic_cov(sigma),
    }
}

pub fn simulate_v2f<R: Rng + ?Sized>(
    vehicle_id: usize,
    veh: &EntityState,
    feature_id: usize,
    feat: &EntityState,
    sigma: f64,
    rng: &mut R,
) -> V2fObservation {
    V2fObservation {
        vehicle_id,
        feature_id,
        z: feat.p - veh.p + isotropic_draw(sigma, rng),
        r: isotropic_cov(sigma),
    }
}
