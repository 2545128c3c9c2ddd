//! Centralized reference: the joint Kalman filter over all vehicles and
//! features, fed with every measurement of the epoch.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{floored_inverse, symmetrize, PositionProjector};
use crate::linalg::{DMat, DVec, Mat2, Mat4, Vec2, Vec4};
use crate::models::{InitialPrior, MotionParams};
use crate::network::EpochSnapshot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CentralizedError {
    #[error("invalid epoch input: {0}")]
    Input(String),
    #[error("posterior information matrix is singular: state is unobservable")]
    Unobservable,
    #[error("measurement covariance is not positive definite")]
    BadNoise,
}

/// Stacked model `rho = H theta + n` of one epoch. Rows are ordered as the
/// GNSS fixes followed by the V2F observations, in input order.
#[derive(Debug, Clone)]
pub struct MeasurementStack {
    pub h: DMat,
    pub r: DMat,
    pub rho: DVec,
    /// Measurement `m` (after the GNSS block) is observation of feature
    /// `index[m].1` by vehicle `index[m].0`.
    pub index: Vec<(usize, usize)>,
    pub n_vehicles: usize,
    pub n_features: usize,
}

pub fn build_stack(epoch: &EpochSnapshot) -> Result<MeasurementStack, CentralizedError> {
    epoch.validate().map_err(CentralizedError::Input)?;
    let (nv, nf) = (epoch.num_vehicles(), epoch.num_features());
    let rows = 2 * (epoch.gnss.len() + epoch.v2f.len());
    let cols = 4 * (nv + nf);
    let mut h = DMat::zeros(rows, cols);
    let mut r = DMat::zeros(rows, rows);
    let mut rho = DVec::zeros(rows);
    let mut put = |row: usize, z: &Vec2, cov: &Mat2| {
        r.view_mut((row, row), (2, 2)).copy_from(cov);
        rho.rows_mut(row, 2).copy_from(z);
    };
    for (m, g) in epoch.gnss.iter().enumerate() {
        put(2 * m, &g.z, &g.r);
        for c in 0..2 {
            h[(2 * m + c, 4 * g.vehicle_id + c)] = 1.0;
        }
    }
    let base = 2 * epoch.gnss.len();
    let mut index = Vec::with_capacity(epoch.v2f.len());
    for (m, o) in epoch.v2f.iter().enumerate() {
        let row = base + 2 * m;
        put(row, &o.z, &o.r);
        for c in 0..2 {
            h[(row + c, 4 * o.vehicle_id + c)] = -1.0;
            h[(row + c, 4 * (nv + o.feature_id) + c)] = 1.0;
        }
        index.push((o.vehicle_id, o.feature_id));
    }
    Ok(MeasurementStack { h, r, rho, index, n_vehicles: nv, n_features: nf })
}

impl MeasurementStack {
    /// `(H^T R^-1 H, H^T R^-1 rho)`, exploiting the 2x2 block structure of R.
    pub fn information(&self) -> Result<(DMat, DVec), CentralizedError> {
        let rows = self.rho.len();
        let mut r_inv = DMat::zeros(rows, rows);
        for b in (0..rows).step_by(2) {
            let blk: Mat2 = self.r.fixed_view::<2, 2>(b, b).into_owned();
            let inv = Cholesky::new(blk).ok_or(CentralizedError::BadNoise)?.inverse();
            r_inv.fixed_view_mut::<2, 2>(b, b).copy_from(&inv);
        }
        let ht_rinv = self.h.transpose() * r_inv;
        let info = &ht_rinv * &self.h;
        let vec = &ht_rinv * &self.rho;
        Ok(((&info + info.transpose()) * 0.5, vec))
    }
}

/// Joint state `[vehicles; features]`, 4 entries per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub theta: DVec,
    pub cov: DMat,
    pub n_vehicles: usize,
    pub n_features: usize,
}

impl JointEstimate {
    pub fn from_prior(nv: usize, nf: usize, prior: &InitialPrior) -> Self {
        Self::from_priors(nv, nf, prior, prior)
    }

    pub fn from_priors(nv: usize, nf: usize, vehicle: &InitialPrior, feature: &InitialPrior) -> Self {
        let n = 4 * (nv + nf);
        let mut cov = DMat::zeros(n, n);
        let (cv, cf) = (vehicle.covariance(), feature.covariance());
        for e in 0..(nv + nf) {
            cov.fixed_view_mut::<4, 4>(4 * e, 4 * e).copy_from(if e < nv { &cv } else { &cf });
        }
        Self { theta: DVec::zeros(n), cov, n_vehicles: nv, n_features: nf }
    }

    fn entity_offset(&self, e: usize) -> usize {
        4 * e
    }

    pub fn vehicle_mean(&self, i: usize) -> Vec4 {
        self.theta.fixed_rows::<4>(self.entity_offset(i)).into_owned()
    }

    pub fn vehicle_cov(&self, i: usize) -> Mat4 {
        let o = self.entity_offset(i);
        self.cov.fixed_view::<4, 4>(o, o).into_owned()
    }

    pub fn feature_mean(&self, k: usize) -> Vec4 {
        self.theta.fixed_rows::<4>(self.entity_offset(self.n_vehicles + k)).into_owned()
    }

    pub fn feature_cov(&self, k: usize) -> Mat4 {
        let o = self.entity_offset(self.n_vehicles + k);
        self.cov.fixed_view::<4, 4>(o, o).into_owned()
    }

    pub fn vehicle_position(&self, i: usize) -> Vec2 {
        PositionProjector::position(&self.vehicle_mean(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedConfig {
    pub prior: InitialPrior,
    pub feature_prior: InitialPrior,
    /// Keep cross-entity covariance through the prediction (exact joint
    /// filter) instead of the block-diagonal recursion.
    pub retain_cross_covariance: bool,
}

impl Default for CentralizedConfig {
    fn default() -> Self {
        Self { prior: InitialPrior::default(), feature_prior: InitialPrior::at_rest(), retain_cross_covariance: false }
    }
}

/// Per-entity propagation. Cross-entity blocks are dropped unless `retain`.
pub fn predict(
    prev: &JointEstimate,
    controls: &[Vec2],
    vehicle_motion: &[MotionParams],
    feature_motion: &[MotionParams],
    retain: bool,
) -> JointEstimate {
    let (nv, nf) = (prev.n_vehicles, prev.n_features);
    let n = 4 * (nv + nf);
    let mut a_all = DMat::zeros(n, n);
    let mut q_all = DMat::zeros(n, n);
    let mut theta = DVec::zeros(n);
    for e in 0..(nv + nf) {
        let (m, u) = if e < nv {
            (&vehicle_motion[e], vehicle_motion[e].input_map * controls[e])
        } else {
            (&feature_motion[e - nv], Vec4::zeros())
        };
        let o = 4 * e;
        let x = prev.theta.fixed_rows::<4>(o).into_owned();
        theta.fixed_rows_mut::<4>(o).copy_from(&(m.transition * x + u));
        a_all.fixed_view_mut::<4, 4>(o, o).copy_from(&m.transition);
        q_all.fixed_view_mut::<4, 4>(o, o).copy_from(&m.process_noise);
    }
    let cov = if retain {
        &a_all * &prev.cov * a_all.transpose() + q_all
    } else {
        let mut cov = DMat::zeros(n, n);
        for e in 0..(nv + nf) {
            let o = 4 * e;
            let a: Mat4 = a_all.fixed_view::<4, 4>(o, o).into_owned();
            let c: Mat4 = prev.cov.fixed_view::<4, 4>(o, o).into_owned();
            let q: Mat4 = q_all.fixed_view::<4, 4>(o, o).into_owned();
            cov.fixed_view_mut::<4, 4>(o, o).copy_from(&symmetrize(&(a * c * a.transpose() + q)));
        }
        cov
    };
    JointEstimate { theta, cov: (&cov + cov.transpose()) * 0.5, n_vehicles: nv, n_features: nf }
}

/// Prior information of a prediction. Block-diagonal predictions are
/// inverted per entity, with point masses floored.
fn prediction_information(pred: &JointEstimate) -> Result<DMat, CentralizedError> {
    let n = pred.theta.len();
    let block_diagonal = (0..n).all(|r| {
        (0..n).all(|c| r / 4 == c / 4 || pred.cov[(r, c)] == 0.0)
    });
    if block_diagonal {
        let mut info = DMat::zeros(n, n);
        for o in (0..n).step_by(4) {
            let c: Mat4 = pred.cov.fixed_view::<4, 4>(o, o).into_owned();
            info.fixed_view_mut::<4, 4>(o, o).copy_from(&floored_inverse(&c));
        }
        Ok(info)
    } else {
        let chol = Cholesky::new(pred.cov.clone()).ok_or(CentralizedError::Unobservable)?;
        let inv = chol.inverse();
        Ok((&inv + inv.transpose()) * 0.5)
    }
}

/// Kalman update in information form.
pub fn update(pred: &JointEstimate, stack: &MeasurementStack) -> Result<JointEstimate, CentralizedError> {
    let prior_info = prediction_information(pred)?;
    let (meas_info, meas_vec) = stack.information()?;
    let post_info = &prior_info + meas_info;
    let eta = &prior_info * &pred.theta + meas_vec;
    let chol = Cholesky::new(post_info).ok_or(CentralizedError::Unobservable)?;
    let theta = chol.solve(&eta);
    let cov = chol.inverse();
    Ok(JointEstimate {
        theta,
        cov: (&cov + cov.transpose()) * 0.5,
        n_vehicles: pred.n_vehicles,
        n_features: pred.n_features,
    })
}

/// Alternates predict and update over a timeline. The prior stands in for
/// the prediction of the first epoch.
pub fn run_centralized(
    epochs: &[EpochSnapshot],
    cfg: &CentralizedConfig,
) -> Result<Vec<JointEstimate>, CentralizedError> {
    let mut out: Vec<JointEstimate> = Vec::with_capacity(epochs.len());
    for (t, epoch) in epochs.iter().enumerate() {
        let pred = match out.last() {
            None => JointEstimate::from_priors(epoch.num_vehicles(), epoch.num_features(), &cfg.prior, &cfg.feature_prior),
            Some(prev) => predict(
                prev,
                &epoch.controls,
                &epoch.vehicle_motion,
                &epoch.feature_motion,
                cfg.retain_cross_covariance,
            ),
        };
        let stack = build_stack(epoch)?;
        let post = update(&pred, &stack).map_err(|e| match e {
            CentralizedError::Input(m) => CentralizedError::Input(format!("epoch {t}: {m}")),
            other => other,
        })?;
        out.push(post);
    }
    Ok(out)
}

/// Stand-alone per-vehicle filter that fuses only its own GNSS fixes.
pub fn run_gnss_only(epochs: &[EpochSnapshot], prior: &InitialPrior) -> Vec<Vec<(Vec4, Mat4)>> {
    let mut out: Vec<Vec<(Vec4, Mat4)>> = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let nv = epoch.num_vehicles();
        let preds: Vec<(Vec4, Mat4)> = match out.last() {
            None => vec![(Vec4::zeros(), prior.covariance()); nv],
            Some(prev) => prev
                .iter()
                .enumerate()
                .map(|(i, (mu, c))| {
                    let m = &epoch.vehicle_motion[i];
                    (
                        m.transition * mu + m.input_map * epoch.controls[i],
                        symmetrize(&(m.transition * c * m.transition.transpose() + m.process_noise)),
                    )
                })
                .collect(),
        };
        let mut post = Vec::with_capacity(nv);
        for (i, (mu, c)) in preds.into_iter().enumerate() {
            let mut lambda = floored_inverse(&c);
            let mut eta = lambda * mu;
            for g in epoch.gnss.iter().filter(|g| g.vehicle_id == i) {
                let w = g.r.try_inverse().expect("GNSS covariance is SPD");
                lambda += PositionProjector::lift_matrix(&w);
                eta += PositionProjector::lift_vector(&(w * g.z));
            }
            let chol = Cholesky::new(symmetrize(&lambda)).expect("prior keeps the filter full rank");
            post.push((chol.solve(&eta), symmetrize(&chol.inverse())));
        }
        out.push(post);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_motion_params, static_motion_params, EntityState, GnssFix, V2fObservation};
    use crate::network::{build_sensing, CommGraph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot(veh: Vec<Vec2>, feat: Vec<Vec2>, sensing: Vec<Vec<usize>>, seed: u64, sg: f64, sr: f64) -> EpochSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = veh.len();
        let vehicles: Vec<_> = veh.iter().map(|p| EntityState::vehicle(*p, Vec2::zeros())).collect();
        let features: Vec<_> = feat.iter().map(|p| EntityState::feature(*p, Vec2::zeros())).collect();
        let gnss = vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| crate::models::simulate_gnss(i, v, sg, &mut rng))
            .collect();
        let mut v2f = Vec::new();
        for (i, fs) in sensing.iter().enumerate() {
            for &k in fs {
                v2f.push(crate::models::simulate_v2f(i, &vehicles[i], k, &features[k], sr, &mut rng));
            }
        }
        EpochSnapshot {
            t: 0,
            v2v: CommGraph::complete(nv),
            sensing,
            gnss,
            v2f,
            controls: vec![Vec2::zeros(); nv],
            vehicle_motion: vec![make_motion_params(1.0, 0.3, 0.3, 0.0); nv],
            feature_motion: vec![static_motion_params(1.0); features.len()],
            vehicles,
            features,
        }
    }

    #[test]
    fn single_vehicle_stack_is_the_projector() {
        let e = snapshot(vec![Vec2::new(1.0, 2.0)], vec![], vec![vec![]], 0, 1.0, 1.0);
        let s = build_stack(&e).unwrap();
        assert_eq!(s.h.nrows(), 2);
        assert_eq!(s.h, DMat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn shared_feature_stack_pattern() {
        let e = snapshot(
            vec![Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0)],
            vec![Vec2::new(2.0, 2.0)],
            vec![vec![0], vec![0]],
            0,
            1.0,
            0.5,
        );
        let s = build_stack(&e).unwrap();
        assert_eq!(s.h.shape(), (8, 12));
        assert_eq!(s.index, vec![(0, 0), (1, 0)]);
        // second V2F block: -P at vehicle 1, +P at the feature
        assert_eq!(s.h[(6, 4)], -1.0);
        assert_eq!(s.h[(7, 5)], -1.0);
        assert_eq!(s.h[(6, 8)], 1.0);
        assert_eq!(s.h[(6, 0)], 0.0);
    }

    #[test]
    fn unknown_entity_is_rejected() {
        let mut e = snapshot(vec![Vec2::zeros()], vec![Vec2::zeros()], vec![vec![0]], 0, 1.0, 1.0);
        e.v2f.push(V2fObservation { vehicle_id: 0, feature_id: 3, z: Vec2::zeros(), r: Mat2::identity() });
        assert!(matches!(build_stack(&e), Err(CentralizedError::Input(_))));
        e.v2f.pop();
        e.gnss.push(GnssFix { vehicle_id: 9, z: Vec2::zeros(), r: Mat2::identity() });
        assert!(build_stack(&e).is_err());
    }

    #[test]
    fn stack_reproduces_noiseless_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let veh: Vec<Vec2> = (0..4).map(|_| Vec2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let feat: Vec<Vec2> = (0..5).map(|_| Vec2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let sensing = build_sensing(&veh, &feat, 60.0);
        let mut e = snapshot(veh, feat, sensing, 1, 0.0, 0.0);
        for (k, f) in e.features.iter_mut().enumerate() {
            f.v = Vec2::new(k as f64, -1.0);
        }
        let s = build_stack(&e).unwrap();
        let mut theta = DVec::zeros(4 * (4 + 5));
        for (i, v) in e.vehicles.iter().chain(e.features.iter()).enumerate() {
            theta.fixed_rows_mut::<4>(4 * i).copy_from(&v.as_vector());
        }
        let direct: Vec<f64> = e
            .vehicles
            .iter()
            .flat_map(|v| [v.p[0], v.p[1]])
            .chain(e.v2f.iter().flat_map(|o| {
                let d = e.features[o.feature_id].p - e.vehicles[o.vehicle_id].p;
                [d[0], d[1]]
            }))
            .collect();
        assert!((&s.h * theta - DVec::from_vec(direct)).norm() < 1e-9);
    }

    #[test]
    fn static_feature_prediction_is_identity() {
        let mut prev = JointEstimate::from_prior(0, 1, &InitialPrior::default());
        prev.theta = DVec::from_vec(vec![1.0, 2.0, 0.0, 0.0]);
        prev.cov = DMat::identity(4, 4);
        prev.cov[(2, 2)] = 0.0;
        prev.cov[(3, 3)] = 0.0;
        let p = predict(&prev, &[], &[], &[static_motion_params(1.0)], false);
        assert_eq!(p, prev);
    }

    #[test]
    fn single_vehicle_prediction_is_textbook_kalman() {
        let m = make_motion_params(0.5, 0.3, 0.1, 0.4);
        let c0 = Mat4::new(2.0, 0.1, 0.3, 0.0, 0.1, 3.0, 0.0, 0.2, 0.3, 0.0, 1.0, 0.0, 0.0, 0.2, 0.0, 1.5);
        let mu0 = Vec4::new(1.0, 2.0, 3.0, 4.0);
        let prev = JointEstimate {
            theta: DVec::from_column_slice(mu0.as_slice()),
            cov: DMat::from_column_slice(4, 4, c0.as_slice()),
            n_vehicles: 1,
            n_features: 0,
        };
        let a = Vec2::new(0.5, -0.2);
        let p = predict(&prev, &[a], &[m], &[], false);
        let mu = m.transition * mu0 + m.input_map * a;
        let c = m.transition * c0 * m.transition.transpose() + m.process_noise;
        assert!((p.vehicle_mean(0) - mu).norm() < 1e-12);
        assert!((p.vehicle_cov(0) - c).norm() < 1e-12);
        // and zero covariance, zero noise stays zero
        let zero = JointEstimate { cov: DMat::zeros(4, 4), ..prev };
        let p = predict(&zero, &[a], &[static_motion_params(0.5)], &[], false);
        assert_eq!(p.cov, DMat::zeros(4, 4));
    }

    #[test]
    fn gnss_only_update_is_scalar_fusion() {
        let e = snapshot(vec![Vec2::new(10.0, -3.0)], vec![], vec![vec![]], 9, 2.0, 1.0);
        let prior = InitialPrior { position_var: 4.0, velocity_var: 1.0 };
        let pred = JointEstimate::from_prior(1, 0, &prior);
        let post = update(&pred, &build_stack(&e).unwrap()).unwrap();
        assert!((post.vehicle_cov(0)[(0, 0)] - 2.0).abs() < 1e-12);
        let z = e.gnss[0].z;
        assert!((post.vehicle_position(0) - z * 0.5).norm() < 1e-12);
    }

    #[test]
    fn tiny_noise_solves_least_squares_on_observable_directions() {
        // two vehicles, one feature: the absolute frame is fixed by GNSS
        let e = snapshot(
            vec![Vec2::new(0.0, 0.0), Vec2::new(4.0, 1.0)],
            vec![Vec2::new(2.0, 3.0)],
            vec![vec![0], vec![0]],
            4,
            1e-6,
            1e-6,
        );
        let mut e = e;
        for g in &mut e.gnss {
            g.r = Mat2::identity() * 1e-12;
        }
        for o in &mut e.v2f {
            o.r = Mat2::identity() * 1e-12;
        }
        let s = build_stack(&e).unwrap();
        let post = update(&JointEstimate::from_prior(2, 1, &InitialPrior::default()), &s).unwrap();
        // least squares over positions only (the velocity columns are zero)
        let cols = [0usize, 1, 4, 5, 8, 9];
        let hp = DMat::from_fn(s.h.nrows(), cols.len(), |r, c| s.h[(r, cols[c])]);
        let ls = (hp.transpose() * &hp).try_inverse().unwrap() * hp.transpose() * &s.rho;
        for (j, &c) in cols.iter().enumerate() {
            assert!((post.theta[c] - ls[j]).abs() < 1e-6, "{c}: {} vs {}", post.theta[c], ls[j]);
        }
    }

    fn random_epoch(seed: u64) -> EpochSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = rng.random_range(1..5);
        let nf = rng.random_range(0..5);
        let veh: Vec<Vec2> = (0..nv).map(|_| Vec2::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
        let feat: Vec<Vec2> = (0..nf).map(|_| Vec2::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
        let sensing = build_sensing(&veh, &feat, 40.0);
        snapshot(veh, feat, sensing, seed, 2.0, 0.5)
    }

    proptest! {
        #[test]
        fn measurements_never_remove_information(seed in any::<u64>()) {
            let e = random_epoch(seed);
            let prior = InitialPrior { position_var: 25.0, velocity_var: 4.0 };
            let pred = JointEstimate::from_prior(e.num_vehicles(), e.num_features(), &prior);
            let post = update(&pred, &build_stack(&e).unwrap()).unwrap();
            // C_post <= C_pred in the Loewner order
            let diff = &pred.cov - &post.cov;
            let min = diff.symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-9);
        }

        #[test]
        fn measurement_order_is_irrelevant(seed in any::<u64>()) {
            let e = random_epoch(seed);
            let mut shuffled = e.clone();
            shuffled.v2f.reverse();
            let pred = JointEstimate::from_prior(e.num_vehicles(), e.num_features(), &InitialPrior::default());
            let a = update(&pred, &build_stack(&e).unwrap()).unwrap();
            let b = update(&pred, &build_stack(&shuffled).unwrap()).unwrap();
            prop_assert!((&a.theta - &b.theta).norm() <= 1e-10 * a.theta.norm().max(1.0));
            prop_assert!((&a.cov - &b.cov).norm() <= 1e-10 * a.cov.norm());
        }

        #[test]
        fn without_features_equals_independent_filters(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nv = rng.random_range(1..4);
            let epochs: Vec<EpochSnapshot> = (0..5)
                .map(|t| {
                    let veh = (0..nv).map(|i| Vec2::new(t as f64 * 3.0 + i as f64, 1.0)).collect();
                    let mut e = snapshot(veh, vec![], vec![vec![]; nv], seed ^ t as u64, 2.0, 0.5);
                    e.controls = (0..nv).map(|_| Vec2::new(rng.random_range(-1.0..1.0), 0.0)).collect();
                    e
                })
                .collect();
            let cfg = CentralizedConfig::default();
            let joint = run_centralized(&epochs, &cfg).unwrap();
            let solo = run_gnss_only(&epochs, &cfg.prior);
            for (j, s) in joint.iter().zip(&solo) {
                for i in 0..nv {
                    prop_assert!((j.vehicle_mean(i) - s[i].0).norm() <= 1e-9 * s[i].0.norm().max(1.0));
                    prop_assert!((j.vehicle_cov(i) - s[i].1).norm() <= 1e-9 * s[i].1.norm());
                }
            }
        }
    }
}
