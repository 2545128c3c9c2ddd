//! Fixed-size aliases used throughout the crate.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

pub type Vec2 = SVector<f64, 2>;
pub type Vec4 = SVector<f64, 4>;
pub type Mat2 = SMatrix<f64, 2, 2>;
pub type Mat4 = SMatrix<f64, 4, 4>;
pub type Mat24 = SMatrix<f64, 2, 4>;
pub type Mat42 = SMatrix<f64, 4, 2>;
pub type DMat = DMatrix<f64>;
pub type DVec = DVector<f64>;

/// 2-D rotation by `angle` radians.
pub fn rotation(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(c, -s, s, c)
}
