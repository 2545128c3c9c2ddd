//! Fisher-information bounds on vehicle positioning.
//!
//! All variances may be `f64::INFINITY`, which means "no information" and
//! contributes exactly zero to the FIM.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DMat;
use crate::network::SensingMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("feature block of the FIM is singular: feature {0} has neither a prior nor an observer")]
    SingularFeatureBlock(usize),
    #[error("FIM is singular")]
    SingularFim,
    #[error("sensing map has {got} vehicles, expected {expected}")]
    SensingSize { got: usize, expected: usize },
}

/// I.i.d. measurement and prior assumptions shared by all entities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FimConfig {
    pub n_v: usize,
    pub n_f: usize,
    pub sigma_gnss2: f64,
    pub sigma_v2f2: f64,
    pub sigma_p_prior_v2: f64,
    pub sigma_p_prior_f2: f64,
    #[serde(default = "infinite")]
    pub sigma_v_prior_v2: f64,
    #[serde(default = "infinite")]
    pub sigma_v_prior_f2: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

impl FimConfig {
    /// Position information available to a vehicle if every feature it sees
    /// were an anchor.
    pub fn alpha_p_vehicle(&self) -> f64 {
        self.n_f as f64 / self.sigma_v2f2 + 1.0 / self.sigma_p_prior_v2 + 1.0 / self.sigma_gnss2
    }

    /// Stand-alone (prior + GNSS) position variance.
    pub fn standalone_variance(&self) -> f64 {
        1.0 / (1.0 / self.sigma_p_prior_v2 + 1.0 / self.sigma_gnss2)
    }

    fn velocity_informative(&self) -> bool {
        self.sigma_v_prior_v2.is_finite() && self.sigma_v_prior_f2.is_finite()
    }
}

/// Which features each vehicle observes.
#[derive(Debug, Clone, PartialEq)]
pub enum Sensing {
    AllToAll,
    Map(SensingMap),
}

/// Joint FIM over `[vehicles; features]`.
///
/// Velocities only receive prior information and never couple to
/// positions, so when a velocity prior is infinite the matrix is built over
/// positions only (`block == 2`); otherwise over full states (`block == 4`).
#[derive(Debug, Clone, PartialEq)]
pub struct Fim {
    pub block: usize,
    pub n_v: usize,
    pub n_f: usize,
    pub matrix: DMat,
}

impl Fim {
    fn nv_dim(&self) -> usize {
        self.block * self.n_v
    }

    pub fn d(&self) -> DMat {
        let n = self.nv_dim();
        self.matrix.view((0, 0), (n, n)).into_owned()
    }

    pub fn e(&self) -> DMat {
        let n = self.nv_dim();
        self.matrix
            .view((0, n), (n, self.block * self.n_f))
            .into_owned()
    }

    pub fn g(&self) -> DMat {
        let n = self.nv_dim();
        let m = self.block * self.n_f;
        self.matrix.view((n, n), (m, m)).into_owned()
    }

    /// Diagonal of the full inverse for each vehicle's x coordinate.
    pub fn vehicle_position_variances(&self) -> Result<Vec<f64>, BoundsError> {
        let inv = Cholesky::new(self.matrix.clone())
            .ok_or(BoundsError::SingularFim)?
            .inverse();
        Ok((0..self.n_v).map(|i| inv[(i * self.block, i * self.block)]).collect())
    }
}

fn add_diag(m: &mut DMat, start: usize, values: &[f64]) {
    for (o, v) in values.iter().enumerate() {
        m[(start + o, start + o)] += v;
    }
}

pub fn full_fim(cfg: &FimConfig, sensing: &Sensing) -> Result<Fim, BoundsError> {
    let block = if cfg.velocity_informative() { 4 } else { 2 };
    let (nv, nf) = (cfg.n_v, cfg.n_f);
    let map: SensingMap = match sensing {
        Sensing::AllToAll => vec![(0..nf).collect(); nv],
        Sensing::Map(m) => {
            if m.len() != nv {
                return Err(BoundsError::SensingSize { got: m.len(), expected: nv });
            }
            m.clone()
        }
    };
    let dim = block * (nv + nf);
    let mut f = DMat::zeros(dim, dim);
    let w_g = 1.0 / cfg.sigma_gnss2;
    let w_r = 1.0 / cfg.sigma_v2f2;
    let prior = |pos: f64, vel: f64| -> Vec<f64> {
        let mut p = vec![1.0 / pos; 2];
        if block == 4 {
            p.extend([1.0 / vel; 2]);
        }
        p
    };
    let veh_prior = prior(cfg.sigma_p_prior_v2, cfg.sigma_v_prior_v2);
    let feat_prior = prior(cfg.sigma_p_prior_f2, cfg.sigma_v_prior_f2);
    for i in 0..nv {
        add_diag(&mut f, block * i, &veh_prior);
        add_diag(&mut f, block * i, &[w_g, w_g]);
    }
    for k in 0..nf {
        add_diag(&mut f, block * (nv + k), &feat_prior);
    }
    for (i, feats) in map.iter().enumerate() {
        for &k in feats {
            let (vi, fk) = (block * i, block * (nv + k));
            for c in 0..2 {
                f[(vi + c, vi + c)] += w_r;
                f[(fk + c, fk + c)] += w_r;
                f[(vi + c, fk + c)] -= w_r;
                f[(fk + c, vi + c)] -= w_r;
            }
        }
    }
    Ok(Fim { block, n_v: nv, n_f: nf, matrix: f })
}

/// Equivalent FIM of the vehicles: `D - E G^-1 E^T`.
pub fn efim_vehicle(fim: &Fim) -> Result<DMat, BoundsError> {
    let d = fim.d();
    if fim.n_f == 0 {
        return Ok(d);
    }
    let g = fim.g();
    for k in 0..fim.n_f {
        let b = fim.block * k;
        if g[(b, b)] <= 0.0 {
            return Err(BoundsError::SingularFeatureBlock(k));
        }
    }
    let chol = Cholesky::new(g).ok_or(BoundsError::SingularFim)?;
    let e = fim.e();
    let ge = chol.solve(&e.transpose());
    let out = &d - &e * ge;
    Ok((&out + out.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundResult {
    pub sigma_p_post2: f64,
    pub sigma_v_post2: f64,
}

/// Closed-form vehicle posterior variance for the all-to-all case.
pub fn posterior_variance(cfg: &FimConfig) -> BoundResult {
    let a = cfg.alpha_p_vehicle();
    let nv = cfg.n_v as f64;
    let nf = cfg.n_f as f64;
    let denom = nv / cfg.sigma_p_prior_v2 + nv / cfg.sigma_gnss2 + a * cfg.sigma_v2f2 / cfg.sigma_p_prior_f2;
    let coop = if cfg.n_f == 0 { 0.0 } else { (nf / cfg.sigma_v2f2) / denom };
    BoundResult {
        sigma_p_post2: (1.0 + coop) / a,
        sigma_v_post2: cfg.sigma_v_prior_v2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitCase {
    ManyVehicles,
    ManyFeatures,
    PerfectV2f,
    PerfectFeaturePrior,
    PerfectVehiclePriorOrGnss,
}

impl LimitCase {
    pub const ALL: [LimitCase; 5] = [
        LimitCase::ManyVehicles,
        LimitCase::ManyFeatures,
        LimitCase::PerfectV2f,
        LimitCase::PerfectFeaturePrior,
        LimitCase::PerfectVehiclePriorOrGnss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LimitCase::ManyVehicles => "many_vehicles",
            LimitCase::ManyFeatures => "many_features",
            LimitCase::PerfectV2f => "perfect_v2f",
            LimitCase::PerfectFeaturePrior => "perfect_feature_prior",
            LimitCase::PerfectVehiclePriorOrGnss => "perfect_vehicle_prior_or_gnss",
        }
    }

    /// Returns `cfg` with the swept parameter set to `value`. Counts are
    /// rounded; variances are used as given.
    pub fn with_parameter(self, cfg: &FimConfig, value: f64) -> FimConfig {
        let mut c = *cfg;
        match self {
            LimitCase::ManyVehicles => c.n_v = value.round() as usize,
            LimitCase::ManyFeatures => c.n_f = value.round() as usize,
            LimitCase::PerfectV2f => c.sigma_v2f2 = value,
            LimitCase::PerfectFeaturePrior => c.sigma_p_prior_f2 = value,
            LimitCase::PerfectVehiclePriorOrGnss => c.sigma_gnss2 = value,
        }
        c
    }

    /// Six decades in the direction of the limit, starting from the value in `cfg`'s regime.
    pub fn sweep_values(self, points_per_decade: usize) -> Vec<f64> {
        let (start, dir) = match self {
            LimitCase::ManyVehicles | LimitCase::ManyFeatures => (0.0, 1.0),
            LimitCase::PerfectV2f | LimitCase::PerfectVehiclePriorOrGnss => (0.0, -1.0),
            LimitCase::PerfectFeaturePrior => (2.0, -1.0),
        };
        let n = 6 * points_per_decade;
        (0..=n)
            .map(|j| 10f64.powf(start + dir * j as f64 / points_per_decade as f64))
            .collect()
    }
}

/// Closed-form value that `posterior_variance` approaches in each regime.
pub fn asymptotic_limit(case: LimitCase, cfg: &FimConfig) -> f64 {
    match case {
        LimitCase::ManyVehicles | LimitCase::PerfectFeaturePrior => 1.0 / cfg.alpha_p_vehicle(),
        LimitCase::ManyFeatures | LimitCase::PerfectVehiclePriorOrGnss => 0.0,
        LimitCase::PerfectV2f => {
            let nv = cfg.n_v as f64;
            1.0 / (nv / cfg.sigma_p_prior_v2 + nv / cfg.sigma_gnss2 + cfg.n_f as f64 / cfg.sigma_p_prior_f2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> FimConfig {
        FimConfig {
            n_v: 2,
            n_f: 2,
            sigma_gnss2: 1.0,
            sigma_v2f2: 1.0,
            sigma_p_prior_v2: f64::INFINITY,
            sigma_p_prior_f2: f64::INFINITY,
            sigma_v_prior_v2: f64::INFINITY,
            sigma_v_prior_f2: f64::INFINITY,
        }
    }

    #[test]
    fn two_by_two_case_by_hand() {
        let fim = full_fim(&toy(), &Sensing::AllToAll).unwrap();
        assert_eq!(fim.block, 2);
        let efim = efim_vehicle(&fim).unwrap();
        // x coordinates of the two vehicles: [[2, -1], [-1, 2]]
        assert!((efim[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((efim[(0, 2)] + 1.0).abs() < 1e-15);
        assert!((efim[(0, 1)]).abs() < 1e-15);
        // inverse of [[2,-1],[-1,2]] has diagonal 2/3
        let var = fim.vehicle_position_variances().unwrap();
        assert!((var[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((posterior_variance(&toy()).sigma_p_post2 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_features_is_block_diagonal_standalone_fusion() {
        let cfg = FimConfig { n_f: 0, sigma_p_prior_v2: 4.0, sigma_gnss2: 4.0, ..toy() };
        let fim = full_fim(&cfg, &Sensing::AllToAll).unwrap();
        assert_eq!(efim_vehicle(&fim).unwrap(), fim.d());
        assert!((posterior_variance(&cfg).sigma_p_post2 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_blocks_match_closed_forms() {
        let cfg = FimConfig {
            n_v: 3,
            n_f: 2,
            sigma_gnss2: 4.0,
            sigma_v2f2: 0.25,
            sigma_p_prior_v2: 100.0,
            sigma_p_prior_f2: 50.0,
            sigma_v_prior_v2: 9.0,
            sigma_v_prior_f2: 1.0,
        };
        let fim = full_fim(&cfg, &Sensing::AllToAll).unwrap();
        assert_eq!(fim.block, 4);
        let alpha_p_v = cfg.alpha_p_vehicle();
        let alpha_p_f = cfg.n_v as f64 / cfg.sigma_v2f2 + 1.0 / cfg.sigma_p_prior_f2;
        let d = fim.d();
        let g = fim.g();
        assert!((d[(0, 0)] - alpha_p_v).abs() < 1e-12);
        assert!((d[(2, 2)] - 1.0 / 9.0).abs() < 1e-15);
        assert!((g[(0, 0)] - alpha_p_f).abs() < 1e-12);
        assert!((g[(3, 3)] - 1.0).abs() < 1e-15);
        // efim = I (x) diag(alpha_p I, alpha_v I) - beta~ 1 (x) P^T P
        let beta_t = cfg.n_f as f64 / (alpha_p_f * cfg.sigma_v2f2 * cfg.sigma_v2f2);
        let efim = efim_vehicle(&fim).unwrap();
        assert!((efim[(0, 0)] - (alpha_p_v - beta_t)).abs() < 1e-10);
        assert!((efim[(0, 4)] + beta_t).abs() < 1e-10);
        assert!((efim[(2, 2)] - 1.0 / 9.0).abs() < 1e-15);
        assert!(efim[(2, 6)].abs() < 1e-15);
    }

    #[test]
    fn unobserved_feature_without_prior_is_singular() {
        let map = vec![vec![0], vec![0]];
        let fim = full_fim(&toy(), &Sensing::Map(map)).unwrap();
        assert_eq!(efim_vehicle(&fim), Err(BoundsError::SingularFeatureBlock(1)));
    }

    #[test]
    fn anchors_limit_matches_alpha() {
        let mut cfg = toy();
        cfg.sigma_p_prior_f2 = 1e-12;
        let v = posterior_variance(&cfg).sigma_p_post2;
        assert!((v * cfg.alpha_p_vehicle() - 1.0).abs() < 1e-9);
    }

    fn config() -> impl Strategy<Value = FimConfig> {
        (1usize..8, 0usize..6, 0.1f64..20.0, 0.01f64..5.0, 0.5f64..1e3, 0.5f64..1e3, 0.1f64..10.0, 0.1f64..10.0, any::<bool>())
            .prop_map(|(n_v, n_f, g, r, pv, pf, vv, vf, vel)| FimConfig {
                n_v,
                n_f,
                sigma_gnss2: g,
                sigma_v2f2: r,
                sigma_p_prior_v2: pv,
                sigma_p_prior_f2: pf,
                sigma_v_prior_v2: if vel { vv } else { f64::INFINITY },
                sigma_v_prior_f2: if vel { vf } else { f64::INFINITY },
            })
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    proptest! {
        #[test]
        fn schur_identity_and_closed_form(cfg in config()) {
            let fim = full_fim(&cfg, &Sensing::AllToAll).unwrap();
            let full = fim.vehicle_position_variances().unwrap();
            let efim = efim_vehicle(&fim).unwrap();
            let einv = Cholesky::new(efim).unwrap().inverse();
            let closed = posterior_variance(&cfg).sigma_p_post2;
            for i in 0..cfg.n_v {
                let e = einv[(i * fim.block, i * fim.block)];
                prop_assert!(rel(full[i], e) < 1e-10);
                prop_assert!(rel(closed, e) < 1e-10, "closed {closed} vs efim {e}");
            }
        }

        #[test]
        fn cooperation_never_hurts(cfg in config()) {
            prop_assert!(posterior_variance(&cfg).sigma_p_post2 <= cfg.standalone_variance() * (1.0 + 1e-12));
        }

        #[test]
        fn monotone_in_counts_and_information(cfg in config(), s in 1.01f64..4.0) {
            let base = posterior_variance(&cfg).sigma_p_post2;
            let tol = 1.0 + 1e-12;
            let more_f = FimConfig { n_f: cfg.n_f + 1, ..cfg };
            let more_v = FimConfig { n_v: cfg.n_v + 1, ..cfg };
            prop_assert!(posterior_variance(&more_f).sigma_p_post2 <= base * tol);
            prop_assert!(posterior_variance(&more_v).sigma_p_post2 <= base * tol);
            for c in [
                FimConfig { sigma_gnss2: cfg.sigma_gnss2 / s, ..cfg },
                FimConfig { sigma_v2f2: cfg.sigma_v2f2 / s, ..cfg },
                FimConfig { sigma_p_prior_v2: cfg.sigma_p_prior_v2 / s, ..cfg },
                FimConfig { sigma_p_prior_f2: cfg.sigma_p_prior_f2 / s, ..cfg },
            ] {
                prop_assert!(posterior_variance(&c).sigma_p_post2 <= base * tol);
            }
        }

        #[test]
        fn sweeps_approach_limits_monotonically(cfg in config()) {
            let cfg = FimConfig { n_f: cfg.n_f.max(1), ..cfg };
            for case in LimitCase::ALL {
                let limit = asymptotic_limit(case, &cfg);
                let gaps: Vec<f64> = case
                    .sweep_values(2)
                    .into_iter()
                    .map(|x| (posterior_variance(&case.with_parameter(&cfg, x)).sigma_p_post2 - limit).abs())
                    .collect();
                for w in gaps.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}: {:?}", case, gaps);
                }
            }
        }
    }
}
