//! Monte Carlo orchestration: truth to measurements to estimators, and the
//! metrics computed from the raw per-run outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::{run_centralized, run_gnss_only, CentralizedConfig};
use crate::gmp::{gmp_epoch, DistributedState, GmpConfig};
use crate::linalg::Vec2;
use crate::models::{make_motion_params, simulate_gnss, simulate_v2f, static_motion_params};
use crate::network::{build_sensing, build_v2v, comm_lower_bound, EpochSnapshot, OverheadParams};
use crate::scenario::{
    generate_crossroad, generate_urban, load_traces, CrossroadParams, FeatureMotion, Scenario, ScenarioError,
    SensorConfig, UrbanTraceParams,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    GnssOnly,
    CentralizedIcp,
    DistributedIcp,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::GnssOnly, Estimator::CentralizedIcp, Estimator::DistributedIcp];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::GnssOnly => "gnss_only",
            Estimator::CentralizedIcp => "centralized_icp",
            Estimator::DistributedIcp => "distributed_icp",
        }
    }
}

/// Where the truth comes from. Crossroad features are redrawn every run;
/// trace-based scenarios keep the same truth and redraw only measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScenarioSource {
    Crossroad(CrossroadParams),
    Urban { traces: UrbanTraceParams, sensors: SensorConfig },
    Trace { path: PathBuf, sensors: SensorConfig },
}

impl Default for ScenarioSource {
    fn default() -> Self {
        ScenarioSource::Crossroad(CrossroadParams::default())
    }
}

impl ScenarioSource {
    /// Checks what can be checked without generating or reading truth.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        match self {
            ScenarioSource::Crossroad(p) => p.validate(),
            ScenarioSource::Urban { sensors, .. } | ScenarioSource::Trace { sensors, .. } => sensors.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioSource,
    pub estimators: Vec<Estimator>,
    pub gmp: GmpConfig,
    pub centralized: CentralizedConfig,
    pub n_runs: usize,
    pub base_seed: u64,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSource::Crossroad(CrossroadParams::default()),
            estimators: Estimator::ALL.to_vec(),
            gmp: GmpConfig::default(),
            centralized: CentralizedConfig::default(),
            n_runs: 20,
            base_seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_runs == 0 {
            return Err(HarnessError::Config("n_runs must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(HarnessError::Config("no estimator selected".into()));
        }
        Ok(())
    }
}

/// Builds the per-epoch snapshots: graphs, sensing sets and one
/// measurement realization drawn from `rng`.
pub fn synthesize_epochs(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Vec<EpochSnapshot> {
    let s = &scenario.sensors;
    let nf = scenario.num_features();
    let feature_motion = match s.feature_motion {
        FeatureMotion::Static => static_motion_params(scenario.ts),
        FeatureMotion::Mobile { sigma } => make_motion_params(scenario.ts, sigma, sigma, 0.0),
    };
    (0..scenario.num_epochs())
        .map(|t| {
            let vehicles = scenario.vehicles[t].clone();
            let features = scenario.features[t].clone();
            let vp: Vec<Vec2> = vehicles.iter().map(|v| v.p).collect();
            let fp: Vec<Vec2> = features.iter().map(|f| f.p).collect();
            let v2v = build_v2v(&vp, s.r_c);
            let sensing = build_sensing(&vp, &fp, s.r_s);
            let gnss = vehicles
                .iter()
                .enumerate()
                .map(|(i, v)| simulate_gnss(i, v, s.gnss.sigma(i, &v.p), rng))
                .collect();
            let mut v2f = Vec::new();
            for (i, ks) in sensing.iter().enumerate() {
                for &k in ks {
                    v2f.push(simulate_v2f(i, &vehicles[i], k, &features[k], s.sigma_v2f, rng));
                }
            }
            let vehicle_motion = scenario.headings[t]
                .iter()
                .map(|&h| make_motion_params(scenario.ts, s.accel_sigma_parallel, s.accel_sigma_perp, h))
                .collect();
            EpochSnapshot {
                t,
                vehicles,
                features,
                v2v,
                sensing,
                gnss,
                v2f,
                controls: scenario.controls[t].clone(),
                vehicle_motion,
                feature_motion: vec![feature_motion; nf],
            }
        })
        .collect()
}

/// Output of one estimator in one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorTrack {
    pub estimator: Estimator,
    /// Position error norm `errors[t][i]` (m).
    pub errors: Vec<Vec<f64>>,
    /// Mean of the two posterior position variances, `position_var[t][i]` (m^2).
    pub position_var: Vec<Vec<f64>>,
}

/// Raw outputs of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub run: usize,
    pub seed: u64,
    pub tracks: Vec<EstimatorTrack>,
    pub mean_degree: Vec<f64>,
    pub v2f_count: Vec<usize>,
    pub n_features: usize,
    /// Distributed estimator counters per epoch (zeros when it is not run).
    pub n_mp: Vec<usize>,
    pub n_con: Vec<usize>,
    pub consensus_rounds: Vec<usize>,
    pub gmp_converged: Vec<bool>,
    /// Set when an estimator failed; the run is then left out of the metrics.
    pub error: Option<String>,
}

impl RunOutput {
    pub fn track(&self, e: Estimator) -> Option<&EstimatorTrack> {
        self.tracks.iter().find(|t| t.estimator == e)
    }
}

fn position_var(cov: &crate::linalg::Mat4) -> f64 {
    0.5 * (cov[(0, 0)] + cov[(1, 1)])
}

/// Runs every selected estimator on the same measurement realization.
pub fn run_once(scenario: &Scenario, cfg: &RunConfig, run: usize, seed: u64) -> RunOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let epochs = synthesize_epochs(scenario, &mut rng);
    let n_epochs = epochs.len();
    let mut out = RunOutput {
        run,
        seed,
        tracks: Vec::new(),
        mean_degree: epochs.iter().map(|e| mean_degree(e)).collect(),
        v2f_count: epochs.iter().map(|e| e.v2f.len()).collect(),
        n_features: scenario.num_features(),
        n_mp: vec![0; n_epochs],
        n_con: vec![0; n_epochs],
        consensus_rounds: vec![0; n_epochs],
        gmp_converged: vec![true; n_epochs],
        error: None,
    };
    let err_of = |pos: Vec2, t: usize, i: usize| (pos - epochs[t].vehicles[i].p).norm();
    for &est in &cfg.estimators {
        let mut track = EstimatorTrack { estimator: est, errors: Vec::with_capacity(n_epochs), position_var: Vec::with_capacity(n_epochs) };
        match est {
            Estimator::GnssOnly => {
                for (t, beliefs) in run_gnss_only(&epochs, &cfg.centralized.prior).iter().enumerate() {
                    track.errors.push(beliefs.iter().enumerate().map(|(i, (mu, _))| err_of(Vec2::new(mu[0], mu[1]), t, i)).collect());
                    track.position_var.push(beliefs.iter().map(|(_, c)| position_var(c)).collect());
                }
            }
            Estimator::CentralizedIcp => match run_centralized(&epochs, &cfg.centralized) {
                Ok(est) => {
                    for (t, j) in est.iter().enumerate() {
                        let nv = j.n_vehicles;
                        track.errors.push((0..nv).map(|i| err_of(j.vehicle_position(i), t, i)).collect());
                        track.position_var.push((0..nv).map(|i| position_var(&j.vehicle_cov(i))).collect());
                    }
                }
                Err(e) => {
                    out.error = Some(format!("centralized_icp: {e}"));
                    return out;
                }
            },
            Estimator::DistributedIcp => {
                let mut state = DistributedState::new(scenario.num_vehicles(), scenario.num_features());
                for (t, epoch) in epochs.iter().enumerate() {
                    let step = gmp_epoch(epoch, &state, &cfg.gmp).and_then(|(next, rep)| {
                        let m = next
                            .vehicles
                            .iter()
                            .map(|b| b.message.to_moments())
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok((next, rep, m))
                    });
                    match step {
                        Ok((next, rep, moments)) => {
                            track.errors.push(moments.iter().enumerate().map(|(i, m)| err_of(m.position(), t, i)).collect());
                            track.position_var.push(moments.iter().map(|m| position_var(&m.cov)).collect());
                            out.n_mp[t] = rep.n_mp;
                            out.n_con[t] = rep.n_con_max;
                            out.consensus_rounds[t] = rep.consensus_rounds_total;
                            out.gmp_converged[t] = rep.converged;
                            state = next;
                        }
                        Err(e) => {
                            out.error = Some(format!("distributed_icp at epoch {t}: {e}"));
                            return out;
                        }
                    }
                }
            }
        }
        out.tracks.push(track);
    }
    out
}

fn mean_degree(e: &EpochSnapshot) -> f64 {
    let n = e.v2v.len();
    if n == 0 {
        0.0
    } else {
        2.0 * e.v2v.edge_count() as f64 / n as f64
    }
}

/// Resolves the truth for run `run`.
pub fn scenario_for_run(source: &ScenarioSource, seed: u64) -> Result<Scenario, HarnessError> {
    Ok(match source {
        ScenarioSource::Crossroad(p) => generate_crossroad(&CrossroadParams { seed, ..*p })?,
        ScenarioSource::Urban { traces, sensors } => generate_urban(traces, sensors)?,
        ScenarioSource::Trace { path, sensors } => load_traces(path, sensors.clone())?,
    })
}

/// Outputs of all runs plus the metrics derived from them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSeries {
    pub ts: f64,
    pub n_epochs: usize,
    pub estimators: Vec<Estimator>,
    pub runs: Vec<RunOutput>,
}

impl MetricsSeries {
    /// Runs that completed for every estimator.
    pub fn ok_runs(&self) -> impl Iterator<Item = &RunOutput> {
        self.runs.iter().filter(|r| r.error.is_none())
    }

    pub fn failures(&self) -> Vec<(usize, String)> {
        self.runs.iter().filter_map(|r| r.error.clone().map(|e| (r.run, e))).collect()
    }

    /// Per-epoch RMSE: squared errors averaged over vehicles, then runs.
    pub fn rmse(&self, e: Estimator) -> Vec<f64> {
        (0..self.n_epochs)
            .map(|t| {
                let per_run: Vec<f64> = self
                    .ok_runs()
                    .filter_map(|r| r.track(e))
                    .map(|tr| mean(tr.errors[t].iter().map(|x| x * x)))
                    .collect();
                mean(per_run.into_iter()).sqrt()
            })
            .collect()
    }

    /// Mean of the per-epoch RMSE over `t` in `range`.
    pub fn time_averaged_rmse(&self, e: Estimator, range: std::ops::Range<usize>) -> f64 {
        let r = self.rmse(e);
        mean(r[range.start.min(r.len())..range.end.min(r.len())].iter().copied())
    }

    /// Error samples of all vehicles and runs for epochs in `range`.
    pub fn error_samples(&self, e: Estimator, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut v = Vec::new();
        for r in self.ok_runs() {
            if let Some(tr) = r.track(e) {
                for t in range.clone().filter(|t| *t < self.n_epochs) {
                    v.extend_from_slice(&tr.errors[t]);
                }
            }
        }
        v
    }

    pub fn mean_degree(&self) -> Vec<f64> {
        self.per_epoch_mean(|r, t| r.mean_degree[t])
    }

    pub fn v2f_count(&self) -> Vec<f64> {
        self.per_epoch_mean(|r, t| r.v2f_count[t] as f64)
    }

    /// Largest GMP iteration count over runs, per epoch.
    pub fn n_mp(&self) -> Vec<usize> {
        self.per_epoch_max(|r, t| r.n_mp[t])
    }

    pub fn n_con(&self) -> Vec<usize> {
        self.per_epoch_max(|r, t| r.n_con[t])
    }

    pub fn mean_position_var(&self, e: Estimator) -> Vec<f64> {
        self.per_epoch_mean_opt(|r, t| r.track(e).map(|tr| mean(tr.position_var[t].iter().copied())))
    }

    fn per_epoch_mean(&self, f: impl Fn(&RunOutput, usize) -> f64) -> Vec<f64> {
        (0..self.n_epochs).map(|t| mean(self.ok_runs().map(|r| f(r, t)))).collect()
    }

    fn per_epoch_mean_opt(&self, f: impl Fn(&RunOutput, usize) -> Option<f64>) -> Vec<f64> {
        (0..self.n_epochs).map(|t| mean(self.ok_runs().filter_map(|r| f(r, t)))).collect()
    }

    fn per_epoch_max(&self, f: impl Fn(&RunOutput, usize) -> usize) -> Vec<usize> {
        (0..self.n_epochs).map(|t| self.ok_runs().map(|r| f(r, t)).max().unwrap_or(0)).collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs `cfg.n_runs` replications with seeds `base_seed + r`, spread over
/// worker threads. Results are ordered by run index, so the output does
/// not depend on scheduling.
pub fn run_experiment(cfg: &RunConfig) -> Result<MetricsSeries, HarnessError> {
    cfg.validate()?;
    // trace-based truth does not depend on the seed
    let shared = match &cfg.scenario {
        ScenarioSource::Crossroad(_) => None,
        other => Some(scenario_for_run(other, cfg.base_seed)?),
    };
    let first = match &shared {
        Some(s) => s.clone(),
        None => scenario_for_run(&cfg.scenario, cfg.base_seed)?,
    };
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    }
    .min(cfg.n_runs)
    .max(1);

    let job = |r: usize| -> Result<RunOutput, HarnessError> {
        let seed = cfg.base_seed.wrapping_add(r as u64);
        let owned;
        let sc = match &shared {
            Some(s) => s,
            None if r == 0 => &first,
            None => {
                owned = scenario_for_run(&cfg.scenario, seed)?;
                &owned
            }
        };
        Ok(run_once(sc, cfg, r, seed))
    };
    let mut results: Vec<Option<Result<RunOutput, HarnessError>>> = (0..cfg.n_runs).map(|_| None).collect();
    if threads == 1 {
        for (r, slot) in results.iter_mut().enumerate() {
            *slot = Some(job(r));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let job = &job;
                    s.spawn(move || {
                        (w..cfg.n_runs).step_by(threads).map(|r| (r, job(r))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (r, res) in h.join().expect("worker panicked") {
                    results[r] = Some(res);
                }
            }
        });
    }
    let runs = results.into_iter().map(|r| r.expect("every run scheduled")).collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsSeries { ts: first.ts, n_epochs: first.num_epochs(), estimators: cfg.estimators.clone(), runs })
}

/// `sqrt(mean(e^2))`; zero for no samples.
pub fn compute_rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Empirical CDF of `errors` evaluated on `grid`.
pub fn compute_cdf(errors: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    grid.iter()
        .map(|g| {
            if sorted.is_empty() {
                0.0
            } else {
                sorted.partition_point(|e| e <= g) as f64 / sorted.len() as f64
            }
        })
        .collect()
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Radio parameters for the latency accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioParams {
    pub rate: f64,
    pub n_b: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self { rate: 6e6, n_b: 100.0 }
    }
}

/// Per-epoch communication time implied by the recorded counters.
pub fn record_overhead(series: &MetricsSeries, radio: &RadioParams) -> Vec<f64> {
    let n_f = series.ok_runs().next().map_or(0, |r| r.n_features) as f64;
    let (n_mp, n_con, deg) = (series.n_mp(), series.n_con(), series.mean_degree());
    (0..series.n_epochs)
        .map(|t| {
            comm_lower_bound(&OverheadParams {
                rate: radio.rate,
                n_b: radio.n_b,
                n_nei: deg[t],
                n_f,
                n_mp: n_mp[t] as f64,
                n_con: n_con[t] as f64,
                ts: series.ts,
            })
        })
        .collect()
}

fn f(v: f64) -> String {
    crate::scenario::format_float(v)
}

/// One row per epoch per estimator.
pub fn write_rmse_csv<W: Write>(series: &MetricsSeries, radio: &RadioParams, w: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["t_s", "estimator", "rmse_m", "mean_degree", "v2f_count", "n_mp", "n_con", "latency_s"])?;
    let (deg, v2f, n_mp, n_con) = (series.mean_degree(), series.v2f_count(), series.n_mp(), series.n_con());
    let lat = record_overhead(series, radio);
    for &e in &series.estimators {
        let rmse = series.rmse(e);
        for t in 0..series.n_epochs {
            w.write_record([
                f(t as f64 * series.ts),
                e.name().to_string(),
                f(rmse[t]),
                f(deg[t]),
                f(v2f[t]),
                n_mp[t].to_string(),
                n_con[t].to_string(),
                f(lat[t]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw per-run, per-vehicle errors.
pub fn write_errors_csv<W: Write>(series: &MetricsSeries, w: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["run", "seed", "t_s", "estimator", "vehicle", "error_m", "position_var_m2"])?;
    for r in &series.runs {
        for tr in &r.tracks {
            for (t, errs) in tr.errors.iter().enumerate() {
                for (i, e) in errs.iter().enumerate() {
                    w.write_record([
                        r.run.to_string(),
                        r.seed.to_string(),
                        f(t as f64 * series.ts),
                        tr.estimator.name().to_string(),
                        i.to_string(),
                        f(*e),
                        f(tr.position_var[t][i]),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// First epoch counted as steady state.
pub fn steady_state_start(ts: f64) -> usize {
    (10.0 / ts).ceil() as usize
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub time_averaged_rmse_m: f64,
    pub steady_state_rmse_m: f64,
    pub median_error_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a, C: Serialize> {
    pub config: &'a C,
    pub runs: usize,
    pub failed_runs: Vec<(usize, String)>,
    pub estimators: Vec<EstimatorSummary>,
    pub max_n_mp: usize,
    pub max_n_con: usize,
    pub max_latency_s: f64,
}

pub fn summarize<'a, C: Serialize>(series: &MetricsSeries, radio: &RadioParams, config: &'a C) -> Summary<'a, C> {
    let ss = steady_state_start(series.ts);
    let n = series.n_epochs;
    Summary {
        config,
        runs: series.runs.len(),
        failed_runs: series.failures(),
        estimators: series
            .estimators
            .iter()
            .map(|&e| EstimatorSummary {
                estimator: e,
                time_averaged_rmse_m: series.time_averaged_rmse(e, 0..n),
                steady_state_rmse_m: series.time_averaged_rmse(e, ss..n),
                median_error_m: median(&series.error_samples(e, ss..n)),
            })
            .collect(),
        max_n_mp: series.n_mp().into_iter().max().unwrap_or(0),
        max_n_con: series.n_con().into_iter().max().unwrap_or(0),
        max_latency_s: record_overhead(series, radio).into_iter().fold(0.0, f64::max),
    }
}

/// Writes `rmse.csv`, `errors.csv` and `summary.json` into `dir`.
pub fn write_outputs<C: Serialize>(
    series: &MetricsSeries,
    radio: &RadioParams,
    config: &C,
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_rmse_csv(series, radio, std::fs::File::create(dir.join("rmse.csv"))?)?;
    write_errors_csv(series, std::io::BufWriter::new(std::fs::File::create(dir.join("errors.csv"))?))?;
    let json = serde_json::to_string_pretty(&summarize(series, radio, config))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}
