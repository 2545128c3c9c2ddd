//! Information-form algebra for Gaussian messages over the 4-D
//! position-velocity state `[px, py, vx, vy]`.
//!
//! Messages are stored as `(lambda, eta) = (C^-1, C^-1 mu)`. This makes the
//! product of densities a plain sum and lets rank-deficient messages (a GNSS
//! fix says nothing about velocity) be represented exactly. Covariance form
//! is only produced when a belief has to be reported.

use nalgebra::{Cholesky, SymmetricEigen};
use thiserror::Error;

use crate::linalg::{Mat2, Mat24, Mat4, Vec2, Vec4};

/// Relative symmetry tolerance for a valid information matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_TOL * ||lambda||` are accepted as non-negative.
pub const PSD_TOL: f64 = 1e-10;
/// Relative least-squares residual allowed for `eta` outside the column space.
pub const RANGE_TOL: f64 = 1e-8;
/// Eigenvalues below `RANK_TOL * max_eigenvalue` count as null directions.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("product of an empty list of messages")]
    EmptyProduct,
    #[error("degenerate message: information matrix has a null space of dimension {null_dim}")]
    Degenerate { null_dim: usize },
    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid message: {0}")]
    Invalid(String),
}

/// The constant selector `[I2 0]` that maps a state to its position.
#[derive(Debug, Clone, Copy, Default)]
pub struct PositionProjector;

impl PositionProjector {
    pub fn matrix() -> Mat24 {
        Mat24::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    /// `P^T M P`: embeds a 2x2 position block into a 4x4 matrix.
    pub fn lift_matrix(m: &Mat2) -> Mat4 {
        let mut out = Mat4::zeros();
        out.fixed_view_mut::<2, 2>(0, 0).copy_from(m);
        out
    }

    /// `P^T v`.
    pub fn lift_vector(v: &Vec2) -> Vec4 {
        Vec4::new(v[0], v[1], 0.0, 0.0)
    }

    pub fn position(x: &Vec4) -> Vec2 {
        Vec2::new(x[0], x[1])
    }
}

/// Symmetric part `(m + m^T) / 2`.
pub fn symmetrize<const D: usize>(
    m: &nalgebra::SMatrix<f64, D, D>,
) -> nalgebra::SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// A Gaussian in information form. Possibly rank deficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoMessage {
    lambda: Mat4,
    eta: Vec4,
}

/// A Gaussian in moment form with an SPD covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentGaussian {
    pub mu: Vec4,
    pub cov: Mat4,
}

impl MomentGaussian {
    pub fn new(mu: Vec4, cov: Mat4) -> Result<Self, GaussianError> {
        let cov = symmetrize(&cov);
        if Cholesky::new(cov).is_none() {
            return Err(GaussianError::NotPositiveDefinite("covariance"));
        }
        Ok(Self { mu, cov })
    }

    pub fn position(&self) -> Vec2 {
        PositionProjector::position(&self.mu)
    }

    pub fn position_cov(&self) -> Mat2 {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
}

impl InfoMessage {
    /// Builds a message and checks symmetry, PSD and range invariants.
    pub fn new(lambda: Mat4, eta: Vec4) -> Result<Self, GaussianError> {
        let msg = Self { lambda, eta };
        msg.validate()?;
        Ok(Self {
            lambda: symmetrize(&lambda),
            eta,
        })
    }

    /// Builds a message without validation; lambda is symmetrized.
    pub fn from_parts(lambda: Mat4, eta: Vec4) -> Self {
        Self {
            lambda: symmetrize(&lambda),
            eta,
        }
    }

    /// Zero information: the limit of a covariance tending to infinity.
    pub fn uninformative() -> Self {
        Self {
            lambda: Mat4::zeros(),
            eta: Vec4::zeros(),
        }
    }

    pub fn from_moments(m: &MomentGaussian) -> Result<Self, GaussianError> {
        let chol =
            Cholesky::new(symmetrize(&m.cov)).ok_or(GaussianError::NotPositiveDefinite("covariance"))?;
        let lambda = symmetrize(&chol.inverse());
        let eta = chol.solve(&m.mu);
        Ok(Self { lambda, eta })
    }

    pub fn lambda(&self) -> &Mat4 {
        &self.lambda
    }

    pub fn eta(&self) -> &Vec4 {
        &self.eta
    }

    pub fn is_uninformative(&self) -> bool {
        self.lambda.iter().all(|v| *v == 0.0) && self.eta.iter().all(|v| *v == 0.0)
    }

    /// Numerical rank of lambda.
    pub fn rank(&self) -> usize {
        4 - null_dimension(&self.lambda)
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        let norm = self.lambda.norm();
        if !norm.is_finite() || !self.eta.iter().all(|v| v.is_finite()) {
            return Err(GaussianError::Invalid("non-finite entries".into()));
        }
        let asym = (self.lambda - self.lambda.transpose()).norm();
        if asym > SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE) {
            return Err(GaussianError::Invalid(format!(
                "lambda is not symmetric (asymmetry {asym:e})"
            )));
        }
        if norm == 0.0 {
            return if self.eta.norm() == 0.0 {
                Ok(())
            } else {
                Err(GaussianError::Invalid(
                    "eta is nonzero but lambda carries no information".into(),
                ))
            };
        }
        let eig = SymmetricEigen::new(symmetrize(&self.lambda));
        let min = eig.eigenvalues.min();
        if min < -PSD_TOL * norm {
            return Err(GaussianError::Invalid(format!(
                "lambda is indefinite (min eigenvalue {min:e})"
            )));
        }
        // eta must be representable as lambda * mean
        let max = eig.eigenvalues.max();
        let mut residual = Vec4::zeros();
        for (j, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= RANK_TOL * max {
                let v = eig.eigenvectors.column(j);
                residual += v * v.dot(&self.eta);
            }
        }
        if residual.norm() > RANGE_TOL * self.eta.norm().max(f64::MIN_POSITIVE) {
            return Err(GaussianError::Invalid(
                "eta lies outside the column space of lambda".into(),
            ));
        }
        Ok(())
    }

    /// Inverts to moment form. Fails with the null-space dimension when the
    /// message is not full rank.
    pub fn to_moments(&self) -> Result<MomentGaussian, GaussianError> {
        match Cholesky::new(self.lambda) {
            Some(chol) => {
                let cov = symmetrize(&chol.inverse());
                let mu = chol.solve(&self.eta);
                Ok(MomentGaussian { mu, cov })
            }
            None => Err(GaussianError::Degenerate {
                null_dim: null_dimension(&self.lambda).max(1),
            }),
        }
    }

    /// Marginal information `(J, h)` of the position sub-vector. Velocity
    /// directions without information are integrated out exactly.
    pub fn position_marginal(&self) -> (Mat2, Vec2) {
        let lpp = self.lambda.fixed_view::<2, 2>(0, 0).into_owned();
        let lpv = self.lambda.fixed_view::<2, 2>(0, 2).into_owned();
        let lvv = self.lambda.fixed_view::<2, 2>(2, 2).into_owned();
        let ep = Vec2::new(self.eta[0], self.eta[1]);
        let ev = Vec2::new(self.eta[2], self.eta[3]);
        let lvv_pinv = pseudo_inverse2(&lvv, self.lambda.norm());
        let j = symmetrize(&(lpp - lpv * lvv_pinv * lpv.transpose()));
        let h = ep - lpv * lvv_pinv * ev;
        (j, h)
    }
}

impl std::ops::Mul for InfoMessage {
    type Output = InfoMessage;

    fn mul(self, rhs: InfoMessage) -> InfoMessage {
        InfoMessage::from_parts(self.lambda + rhs.lambda, self.eta + rhs.eta)
    }
}

impl std::ops::Mul<&InfoMessage> for &InfoMessage {
    type Output = InfoMessage;

    fn mul(self, rhs: &InfoMessage) -> InfoMessage {
        InfoMessage::from_parts(self.lambda + rhs.lambda, self.eta + rhs.eta)
    }
}

/// Product of densities; messages are summed left to right.
pub fn info_product(msgs: &[InfoMessage]) -> Result<InfoMessage, GaussianError> {
    let (first, rest) = msgs.split_first().ok_or(GaussianError::EmptyProduct)?;
    let mut lambda = first.lambda;
    let mut eta = first.eta;
    for m in rest {
        lambda += m.lambda;
        eta += m.eta;
    }
    Ok(InfoMessage::from_parts(lambda, eta))
}

/// What to do with a quotient whose information matrix went indefinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndefinitePolicy {
    /// Clamp negative eigenvalues to zero and drop the matching part of eta.
    #[default]
    FloorEigenvalues,
    /// Keep the raw difference.
    Keep,
}

/// Result of a message division.
#[derive(Debug, Clone, Copy)]
pub struct Quotient {
    pub message: InfoMessage,
    /// True when lambda has an eigenvalue below `-PSD_TOL * ||lambda||`.
    pub indefinite: bool,
}

impl Quotient {
    pub fn regularized(self, policy: IndefinitePolicy) -> InfoMessage {
        match (self.indefinite, policy) {
            (true, IndefinitePolicy::FloorEigenvalues) => floor_negative_eigenvalues(&self.message),
            _ => self.message,
        }
    }
}

/// `num / den`: subtracts information. Never fails; indefinite results are
/// flagged for the caller.
pub fn info_divide(num: &InfoMessage, den: &InfoMessage) -> Quotient {
    let message = InfoMessage::from_parts(num.lambda - den.lambda, num.eta - den.eta);
    let norm = message.lambda.norm();
    let indefinite = norm > 0.0 && {
        let eig = SymmetricEigen::new(message.lambda);
        eig.eigenvalues.min() < -PSD_TOL * norm
    };
    Quotient {
        message,
        indefinite,
    }
}

/// Projects a message onto the PSD cone: eigenvalues below zero become zero
/// and eta loses its component along those directions.
pub fn floor_negative_eigenvalues(m: &InfoMessage) -> InfoMessage {
    let eig = SymmetricEigen::new(m.lambda);
    let mut lambda = Mat4::zeros();
    let mut eta = m.eta;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j).into_owned();
        if ev > 0.0 {
            lambda += v * v.transpose() * ev;
        } else {
            eta -= v * v.dot(&m.eta);
        }
    }
    InfoMessage::from_parts(lambda, eta)
}

/// Smallest covariance eigenvalue kept when a near point-mass has to be
/// expressed in information form.
pub const COVARIANCE_FLOOR: f64 = 1e-9;

/// Inverse of a PSD covariance. When it is numerically singular, the
/// eigenvalues are floored at `COVARIANCE_FLOOR` first.
pub fn floored_inverse(cov: &Mat4) -> Mat4 {
    let c = symmetrize(cov);
    if let Some(chol) = Cholesky::new(c) {
        let eig_min = c.diagonal().min();
        if eig_min > COVARIANCE_FLOOR {
            return symmetrize(&chol.inverse());
        }
    }
    let eig = SymmetricEigen::new(c);
    let mut inv = Mat4::zeros();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j);
        inv += v * v.transpose() / ev.max(COVARIANCE_FLOOR);
    }
    symmetrize(&inv)
}

impl InfoMessage {
    /// Information form of `N(mu, cov)` for any PSD `cov`, flooring point masses.
    pub fn from_mean_cov_floored(mu: &Vec4, cov: &Mat4) -> Self {
        let lambda = floored_inverse(cov);
        Self::from_parts(lambda, lambda * mu)
    }
}

/// Lifts a position measurement `z ~ N(p, r)` to a rank-2 4-D message.
pub fn lift_position_observation(z: &Vec2, r: &Mat2) -> Result<InfoMessage, GaussianError> {
    let chol = Cholesky::new(symmetrize(r)).ok_or(GaussianError::NotPositiveDefinite("r"))?;
    let w = symmetrize(&chol.inverse());
    Ok(InfoMessage::from_parts(
        PositionProjector::lift_matrix(&w),
        PositionProjector::lift_vector(&(w * z)),
    ))
}

/// Pushes `source` through the relative-position factor
/// `rho = p_other - p_source` (sign = +1) or `rho = p_source - p_other`
/// (sign = -1) with noise covariance `r`, and returns the position-only
/// message on the other endpoint.
///
/// With `(J, h)` the position marginal of `source`, the output carries
/// `W = (r + J^-1)^-1` and `W (mu + sign * rho)`, evaluated without ever
/// inverting `J` so that degenerate inputs stay exact.
pub fn relative_position_message(
    source: &InfoMessage,
    rho: &Vec2,
    r: &Mat2,
    sign: f64,
) -> Result<InfoMessage, GaussianError> {
    let r_chol = Cholesky::new(symmetrize(r)).ok_or(GaussianError::NotPositiveDefinite("r"))?;
    let r_inv = symmetrize(&r_chol.inverse());
    let (j, h) = source.position_marginal();
    let m_chol = Cholesky::new(symmetrize(&(r_inv + j)))
        .ok_or(GaussianError::NotPositiveDefinite("r^-1 + J"))?;
    let w = symmetrize(&(r_inv - r_inv * m_chol.solve(&r_inv)));
    let info_vec = w * rho * sign + r_inv * m_chol.solve(&h);
    Ok(InfoMessage::from_parts(
        PositionProjector::lift_matrix(&w),
        PositionProjector::lift_vector(&info_vec),
    ))
}

fn null_dimension(m: &Mat4) -> usize {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.max();
    if max <= 0.0 {
        return 4;
    }
    eig.eigenvalues.iter().filter(|&&ev| ev <= RANK_TOL * max).count()
}

fn pseudo_inverse2(m: &Mat2, scale: f64) -> Mat2 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let tol = RANK_TOL * scale.max(f64::MIN_POSITIVE);
    let mut out = Mat2::zeros();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(j);
            out += v * v.transpose() / ev;
        }
    }
    out
}
