//! TOML configuration for the command-line driver.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::FimConfig;
use crate::centralized::CentralizedConfig;
use crate::gmp::GmpConfig;
use crate::harness::{Estimator, RadioParams, RunConfig, ScenarioSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorsSection {
    pub enabled: Vec<Estimator>,
    pub n_runs: usize,
    pub base_seed: u64,
    /// 0 uses all available cores.
    pub threads: usize,
    pub retain_cross_covariance: bool,
}

impl Default for EstimatorsSection {
    fn default() -> Self {
        Self { enabled: Estimator::ALL.to_vec(), n_runs: 20, base_seed: 0, threads: 0, retain_cross_covariance: false }
    }
}

/// Posterior-variance sweep over the product of `n_v_values` and `n_f_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub n_v_values: Vec<usize>,
    pub n_f_values: Vec<usize>,
    pub sigma_gnss2: f64,
    pub sigma_v2f2: f64,
    pub sigma_p_prior_v2: f64,
    pub sigma_p_prior_f2: f64,
    /// Also emit the limit sweeps; 0 disables them.
    pub points_per_decade: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        // urban canyon of the crossroad, static features with no prior
        Self {
            n_v_values: vec![4, 12, 32],
            n_f_values: vec![5, 200],
            sigma_gnss2: 15.0 * 15.0,
            sigma_v2f2: 0.5 * 0.5,
            sigma_p_prior_v2: 1e6,
            sigma_p_prior_f2: 1e6,
            points_per_decade: 4,
        }
    }
}

impl BoundsSection {
    pub fn fim_config(&self, n_v: usize, n_f: usize) -> FimConfig {
        FimConfig {
            n_v,
            n_f,
            sigma_gnss2: self.sigma_gnss2,
            sigma_v2f2: self.sigma_v2f2,
            sigma_p_prior_v2: self.sigma_p_prior_v2,
            sigma_p_prior_f2: self.sigma_p_prior_f2,
            sigma_v_prior_v2: f64::INFINITY,
            sigma_v_prior_f2: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_v_values.is_empty() || self.n_f_values.is_empty() {
            return Err("bounds: n_v_values and n_f_values must not be empty".into());
        }
        if self.n_v_values.contains(&0) {
            return Err("bounds: vehicle counts must be positive".into());
        }
        let ok = |v: f64| v > 0.0 && !v.is_nan();
        if !(ok(self.sigma_gnss2) && ok(self.sigma_v2f2) && ok(self.sigma_p_prior_v2) && ok(self.sigma_p_prior_f2)) {
            return Err("bounds: variances must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub rate: f64,
    pub n_b: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        let r = RadioParams::default();
        Self { dir: PathBuf::from("out"), rate: r.rate, n_b: r.n_b }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub scenario: ScenarioSource,
    pub estimators: EstimatorsSection,
    pub gmp: GmpConfig,
    pub bounds: BoundsSection,
    pub output: OutputSection,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads a config file. Relative trace paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let ScenarioSource::Trace { path: trace, .. } = &mut cfg.scenario {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scenario.validate().map_err(|e| format!("scenario: {e}"))?;
        self.bounds.validate()?;
        if self.estimators.n_runs == 0 {
            return Err("estimators: n_runs must be at least 1".into());
        }
        if self.estimators.enabled.is_empty() {
            return Err("estimators: enable at least one estimator".into());
        }
        if !(self.output.rate > 0.0 && self.output.n_b > 0.0) {
            return Err("output: rate and n_b must be positive".into());
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            scenario: self.scenario.clone(),
            estimators: self.estimators.enabled.clone(),
            gmp: self.gmp,
            centralized: CentralizedConfig {
                prior: self.gmp.prior,
                feature_prior: self.gmp.feature_prior,
                retain_cross_covariance: self.estimators.retain_cross_covariance,
            },
            n_runs: self.estimators.n_runs,
            base_seed: self.estimators.base_seed,
            threads: self.estimators.threads,
        }
    }

    pub fn radio(&self) -> RadioParams {
        RadioParams { rate: self.output.rate, n_b: self.output.n_b }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::CrossroadParams;

    #[test]
    fn empty_file_gives_defaults() {
        let c = CliConfig::from_toml("").unwrap();
        assert_eq!(c, CliConfig::default());
        assert_eq!(c.estimators.n_runs, 20);
        assert_eq!(c.gmp.n_mp_max, 50);
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let c = CliConfig::from_toml(
            r#"
            [scenario]
            kind = "crossroad"
            n_vehicles = 8
            duration = 20.0

            [estimators]
            enabled = ["gnss_only", "distributed_icp"]
            n_runs = 3

            [gmp]
            gamma_mp = 0.001

            [gmp.consensus]
            n_con_max = 200

            [output]
            dir = "results"
            "#,
        )
        .unwrap();
        match c.scenario {
            ScenarioSource::Crossroad(p) => {
                assert_eq!(p.n_vehicles, 8);
                assert_eq!(p.n_features, CrossroadParams::default().n_features);
            }
            _ => panic!("crossroad expected"),
        }
        assert_eq!(c.run_config().estimators.len(), 2);
        assert_eq!(c.gmp.consensus.n_con_max, 200);
        assert_eq!(c.output.dir, PathBuf::from("results"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(CliConfig::from_toml("[gmp]\nn_mp = 3\n").is_err());
        assert!(CliConfig::from_toml("[scenario]\nkind = \"crossroad\"\nlanes = 2\n").is_err());
        assert!(CliConfig::from_toml("[plots]\n").is_err());
    }

    #[test]
    fn invalid_geometry_fails_validation() {
        let c = CliConfig::from_toml("[scenario]\nkind = \"crossroad\"\nn_vehicles = 6\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn urban_zones_parse_and_validate() {
        let text = r#"
            [scenario]
            kind = "urban"
            [scenario.traces]
            n_vehicles = 4
            [scenario.sensors]
            sigma_v2f = 0.1
            r_c = 200.0
            r_s = 50.0
            accel_sigma_parallel = 0.3
            accel_sigma_perp = 0.3
            feature_motion = { kind = "mobile", sigma = 0.3 }
            [scenario.sensors.gnss]
            model = "zoned"
            receivers = ["SPS", "RTK"]
            zones = [{ area_id = "A2", factor = 2.0, polygon = [[0, 0], [1, 0], [1, 1]] }]
        "#;
        let c = CliConfig::from_toml(text).unwrap();
        c.validate().unwrap();
        let bad = text.replace("factor = 2.0", "factor = 4.0");
        assert!(CliConfig::from_toml(&bad).unwrap().validate().is_err());
    }
}
