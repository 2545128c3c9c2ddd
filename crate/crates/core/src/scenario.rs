//! Ground truth: the crossroad generator, trace ingestion, GNSS zones and
//! receiver classes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vec2;
use crate::models::{input_map, transition_matrix, EntityKind, EntityState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("trace row {row}: {msg}")]
    Trace { row: usize, msg: String },
    #[error("trace: {0}")]
    TraceFile(String),
    #[error("zone file: {0}")]
    Zones(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// GNSS quality areas with their standard-deviation multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AreaId {
    A1,
    A2,
    A3,
    A4,
}

impl AreaId {
    pub fn factor(self) -> f64 {
        match self {
            AreaId::A1 => 1.0,
            AreaId::A2 => 2.0,
            AreaId::A3 => 5.0,
            AreaId::A4 => 20.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AreaId::A1 => "nominal",
            AreaId::A2 => "slightly degraded",
            AreaId::A3 => "severely degraded",
            AreaId::A4 => "lost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnssZone {
    pub area_id: AreaId,
    pub factor: f64,
    /// Simple polygon, vertices in order; closing edge implied.
    pub polygon: Vec<[f64; 2]>,
}

impl GnssZone {
    pub fn new(area_id: AreaId, polygon: Vec<[f64; 2]>) -> Self {
        Self { area_id, factor: area_id.factor(), polygon }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        point_in_polygon(&self.polygon, p)
    }
}

/// Even-odd rule; points on an edge may fall either way.
fn point_in_polygon(poly: &[[f64; 2]], p: &Vec2) -> bool {
    let (x, y) = (p[0], p[1]);
    let mut inside = false;
    let n = poly.len();
    for a in 0..n {
        let b = (a + n - 1) % n;
        let ([xa, ya], [xb, yb]) = (poly[a], poly[b]);
        if (ya > y) != (yb > y) && x < (xb - xa) * (y - ya) / (yb - ya) + xa {
            inside = !inside;
        }
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneFile {
    pub zones: Vec<GnssZone>,
}

/// Parses and validates a zone document.
pub fn parse_zones(json: &str) -> Result<Vec<GnssZone>, ScenarioError> {
    let f: ZoneFile = serde_json::from_str(json).map_err(|e| ScenarioError::Zones(e.to_string()))?;
    validate_zones(&f.zones)?;
    Ok(f.zones)
}

/// Factors must match their area and polygons must be non-degenerate.
pub fn validate_zones(zones: &[GnssZone]) -> Result<(), ScenarioError> {
    for (i, z) in zones.iter().enumerate() {
        if z.factor != z.area_id.factor() {
            return Err(ScenarioError::Zones(format!(
                "zone {i}: area {:?} has factor {}, expected {}",
                z.area_id,
                z.factor,
                z.area_id.factor()
            )));
        }
        if z.polygon.len() < 3 {
            return Err(ScenarioError::Zones(format!("zone {i}: polygon needs at least 3 vertices")));
        }
    }
    Ok(())
}

/// First zone containing `p`, if any.
pub fn zone_at<'a>(zones: &'a [GnssZone], p: &Vec2) -> Option<&'a GnssZone> {
    zones.iter().find(|z| z.contains(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReceiverClass {
    Sps,
    Sbas,
    Dgnss,
    Rtk,
}

impl ReceiverClass {
    pub fn base_sigma(self) -> f64 {
        match self {
            ReceiverClass::Sps => 3.6,
            ReceiverClass::Sbas => 1.44,
            ReceiverClass::Dgnss => 0.40,
            ReceiverClass::Rtk => 0.01,
        }
    }

    /// The 3/3/2/2 split over ten vehicles, repeated for larger fleets.
    pub fn default_mix(n: usize) -> Vec<ReceiverClass> {
        const MIX: [ReceiverClass; 10] = [
            ReceiverClass::Sps,
            ReceiverClass::Sps,
            ReceiverClass::Sps,
            ReceiverClass::Sbas,
            ReceiverClass::Sbas,
            ReceiverClass::Sbas,
            ReceiverClass::Dgnss,
            ReceiverClass::Dgnss,
            ReceiverClass::Rtk,
            ReceiverClass::Rtk,
        ];
        (0..n).map(|i| MIX[i % MIX.len()]).collect()
    }
}

/// `factor(zone(p)) * base_sigma(receiver)`; unzoned positions are nominal.
pub fn gnss_sigma_at(position: &Vec2, zones: &[GnssZone], receiver: ReceiverClass) -> f64 {
    zone_at(zones, position).map_or(1.0, |z| z.factor) * receiver.base_sigma()
}

/// GNSS accuracy as a function of vehicle and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum GnssModel {
    /// Square canyon of half side `half_extent` around `center`, rural elsewhere.
    TwoZone { rural: f64, canyon: f64, center: [f64; 2], half_extent: f64 },
    /// Area polygons and a receiver per vehicle.
    Zoned { zones: Vec<GnssZone>, receivers: Vec<ReceiverClass> },
}

impl GnssModel {
    pub fn sigma(&self, vehicle: usize, p: &Vec2) -> f64 {
        match self {
            GnssModel::TwoZone { rural, canyon, center, half_extent } => {
                if in_canyon(p, center, *half_extent) {
                    *canyon
                } else {
                    *rural
                }
            }
            GnssModel::Zoned { zones, receivers } => gnss_sigma_at(p, zones, receivers[vehicle]),
        }
    }
}

fn in_canyon(p: &Vec2, center: &[f64; 2], half: f64) -> bool {
    (p[0] - center[0]).abs().max((p[1] - center[1]).abs()) <= half
}

/// How features move between epochs in the estimators' model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMotion {
    Static,
    /// Isotropic acceleration noise (m/s^2).
    Mobile { sigma: f64 },
}

/// Everything about sensing and the estimators' motion models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub sigma_v2f: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub gnss: GnssModel,
    pub accel_sigma_parallel: f64,
    pub accel_sigma_perp: f64,
    pub feature_motion: FeatureMotion,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.sigma_v2f >= 0.0 && self.r_c >= 0.0 && self.r_s >= 0.0) {
            return Err(ScenarioError::Geometry("ranges and sigmas must be non-negative".into()));
        }
        if !(self.accel_sigma_parallel >= 0.0 && self.accel_sigma_perp >= 0.0) {
            return Err(ScenarioError::Geometry("acceleration sigmas must be non-negative".into()));
        }
        if let GnssModel::Zoned { zones, .. } = &self.gnss {
            validate_zones(zones)?;
        }
        Ok(())
    }
}

/// Truth timeline with constant sampling interval and stable entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ts: f64,
    /// `vehicles[t][i]`.
    pub vehicles: Vec<Vec<EntityState>>,
    pub features: Vec<Vec<EntityState>>,
    /// Acceleration applied from `t - 1` to `t`; zero at `t = 0`.
    pub controls: Vec<Vec<Vec2>>,
    /// Road-frame heading used to orient the process noise from `t - 1` to `t`.
    pub headings: Vec<Vec<f64>>,
    pub vehicle_labels: Vec<String>,
    pub feature_labels: Vec<String>,
    pub sensors: SensorConfig,
}

impl Scenario {
    pub fn num_epochs(&self) -> usize {
        self.vehicles.len()
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicle_labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_labels.len()
    }

    /// Builds a scenario from truth, deriving controls and headings.
    pub fn from_truth(
        ts: f64,
        vehicles: Vec<Vec<EntityState>>,
        features: Vec<Vec<EntityState>>,
        vehicle_labels: Vec<String>,
        feature_labels: Vec<String>,
        sensors: SensorConfig,
    ) -> Self {
        let nv = vehicle_labels.len();
        let mut controls = vec![vec![Vec2::zeros(); nv]; vehicles.len()];
        let mut headings = vec![vec![0.0; nv]; vehicles.len()];
        for t in 0..vehicles.len() {
            for i in 0..nv {
                if t > 0 {
                    controls[t][i] = (vehicles[t][i].v - vehicles[t - 1][i].v) / ts;
                }
                // heading of the motion over the coming or last step
                let v = if t > 0 { vehicles[t - 1][i].v } else { vehicles[t][i].v };
                let v = if v.norm() > 1e-6 { v } else { vehicles[t][i].v };
                headings[t][i] = if v.norm() > 1e-6 {
                    v[1].atan2(v[0])
                } else if t > 0 {
                    headings[t - 1][i]
                } else {
                    0.0
                };
            }
        }
        Self { ts, vehicles, features, controls, headings, vehicle_labels, feature_labels, sensors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossroadParams {
    pub road_length: f64,
    pub center: [f64; 2],
    pub lane_width: f64,
    pub sidewalk_width: f64,
    pub n_vehicles: usize,
    pub n_features: usize,
    pub rural_len: f64,
    pub canyon_len: f64,
    pub speed_limit: f64,
    pub accel: f64,
    /// Bumper-to-bumper spacing inside a cluster at t = 0.
    pub cluster_gap: f64,
    pub sigma_gnss_rural: f64,
    pub sigma_gnss_canyon: f64,
    pub sigma_v2f: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub ts: f64,
    pub duration: f64,
    pub accel_sigma_parallel: f64,
    pub accel_sigma_perp: f64,
    pub seed: u64,
}

impl Default for CrossroadParams {
    fn default() -> Self {
        Self {
            road_length: 1500.0,
            center: [750.0, 750.0],
            lane_width: 3.0,
            sidewalk_width: 1.3,
            n_vehicles: 12,
            n_features: 20,
            rural_len: 300.0,
            canyon_len: 900.0,
            speed_limit: 50.0 / 3.6,
            accel: 1.4,
            cluster_gap: 15.0,
            sigma_gnss_rural: 2.0,
            sigma_gnss_canyon: 15.0,
            sigma_v2f: 0.5,
            r_c: 150.0,
            r_s: 50.0,
            ts: 1.0,
            duration: 100.0,
            accel_sigma_parallel: 0.3,
            accel_sigma_perp: 1e-4,
            seed: 0,
        }
    }
}

/// Lane of one cluster: start point, unit direction, and lateral lane center offset direction.
#[derive(Debug, Clone, Copy)]
pub struct Lane {
    pub start: Vec2,
    pub dir: Vec2,
    /// Lane polygon as (center line point, half width) for containment checks.
    pub center_offset: Vec2,
}

impl CrossroadParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let g = |m: &str| Err(ScenarioError::Geometry(m.to_string()));
        if !(self.road_length > 0.0 && self.lane_width > 0.0 && self.sidewalk_width >= 0.0) {
            return g("lengths must be positive");
        }
        if (2.0 * self.rural_len + self.canyon_len - self.road_length).abs() > 1e-9 * self.road_length {
            return g("two rural sections plus the canyon must add up to the road length");
        }
        if self.rural_len < 0.0 || self.canyon_len < 0.0 {
            return g("section lengths must be non-negative");
        }
        if self.n_vehicles % 4 != 0 {
            return g("vehicle count must be a multiple of 4");
        }
        if !(self.ts > 0.0 && self.duration >= 0.0 && self.speed_limit > 0.0 && self.accel > 0.0) {
            return g("timing and speed parameters must be positive");
        }
        if !(self.r_c >= 0.0 && self.r_s >= 0.0 && self.sigma_v2f >= 0.0) {
            return g("ranges and sigmas must be non-negative");
        }
        let per = (self.n_vehicles / 4).max(1) as f64;
        if (per - 1.0) * self.cluster_gap > self.rural_len {
            return g("clusters do not fit in the first rural section");
        }
        let half = self.road_length / 2.0;
        if (self.center[0] - half).abs() > 1e-9 || (self.center[1] - half).abs() > 1e-9 {
            return g("roads run from 0 to road_length, so the center must sit at their midpoint");
        }
        Ok(())
    }

    /// Right-hand traffic, one lane each way, entering from the four road ends.
    pub fn lanes(&self) -> [Lane; 4] {
        let (c, l, off) = (self.center, self.road_length, self.lane_width / 2.0);
        [
            // eastbound from the west end
            Lane { start: Vec2::new(0.0, c[1] - off), dir: Vec2::new(1.0, 0.0), center_offset: Vec2::new(0.0, -off) },
            // westbound from the east end
            Lane { start: Vec2::new(l, c[1] + off), dir: Vec2::new(-1.0, 0.0), center_offset: Vec2::new(0.0, off) },
            // northbound from the south end
            Lane { start: Vec2::new(c[0] + off, 0.0), dir: Vec2::new(0.0, 1.0), center_offset: Vec2::new(off, 0.0) },
            // southbound from the north end
            Lane { start: Vec2::new(c[0] - off, l), dir: Vec2::new(0.0, -1.0), center_offset: Vec2::new(-off, 0.0) },
        ]
    }

    pub fn sensors(&self) -> SensorConfig {
        SensorConfig {
            sigma_v2f: self.sigma_v2f,
            r_c: self.r_c,
            r_s: self.r_s,
            gnss: GnssModel::TwoZone {
                rural: self.sigma_gnss_rural,
                canyon: self.sigma_gnss_canyon,
                center: self.center,
                half_extent: self.canyon_len / 2.0,
            },
            accel_sigma_parallel: self.accel_sigma_parallel,
            accel_sigma_perp: self.accel_sigma_perp,
            feature_motion: FeatureMotion::Static,
        }
    }

    pub fn in_canyon(&self, p: &Vec2) -> bool {
        in_canyon(p, &self.center, self.canyon_len / 2.0)
    }
}

/// Four clusters entering from the road ends at t = 0, accelerating to the
/// speed limit and cruising; static features scattered over the canyon's
/// roads and sidewalks.
pub fn generate_crossroad(p: &CrossroadParams) -> Result<Scenario, ScenarioError> {
    p.validate()?;
    let per = p.n_vehicles / 4;
    let n_epochs = (p.duration / p.ts + 1e-9).floor() as usize + 1;
    let a_mat = transition_matrix(p.ts);
    let b_mat = input_map(p.ts);

    let lanes = p.lanes();
    let mut state: Vec<EntityState> = Vec::with_capacity(p.n_vehicles);
    let mut dirs = Vec::with_capacity(p.n_vehicles);
    for lane in &lanes {
        for j in 0..per {
            let s = (per - 1 - j) as f64 * p.cluster_gap;
            state.push(EntityState::vehicle(lane.start + lane.dir * s, Vec2::zeros()));
            dirs.push(lane.dir);
        }
    }
    let mut vehicles = Vec::with_capacity(n_epochs);
    let mut controls = Vec::with_capacity(n_epochs);
    vehicles.push(state.clone());
    controls.push(vec![Vec2::zeros(); p.n_vehicles]);
    for _ in 1..n_epochs {
        let mut ctl = Vec::with_capacity(p.n_vehicles);
        for (x, d) in state.iter_mut().zip(&dirs) {
            let speed = x.v.dot(d);
            let a = p.accel.min((p.speed_limit - speed) / p.ts).max(0.0);
            let u = d * a;
            let next = a_mat * x.as_vector() + b_mat * u;
            *x = EntityState::from_vector(&next, EntityKind::Vehicle);
            ctl.push(u);
        }
        vehicles.push(state.clone());
        controls.push(ctl);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let half_road = p.lane_width + p.sidewalk_width;
    let half_canyon = p.canyon_len / 2.0;
    let feats: Vec<EntityState> = (0..p.n_features)
        .map(|_| {
            let along = rng.random_range(-half_canyon..=half_canyon);
            let across = rng.random_range(-half_road..=half_road);
            let pos = if rng.random_bool(0.5) {
                Vec2::new(p.center[0] + along, p.center[1] + across)
            } else {
                Vec2::new(p.center[0] + across, p.center[1] + along)
            };
            EntityState::feature(pos, Vec2::zeros())
        })
        .collect();

    let headings: Vec<Vec<f64>> = vec![dirs.iter().map(|d| d[1].atan2(d[0])).collect(); n_epochs];
    Ok(Scenario {
        ts: p.ts,
        features: vec![feats; n_epochs],
        vehicles,
        controls,
        headings,
        vehicle_labels: (0..p.n_vehicles).map(|i| i.to_string()).collect(),
        feature_labels: (0..p.n_features).map(|k| (p.n_vehicles + k).to_string()).collect(),
        sensors: p.sensors(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    V,
    F,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::V => "V",
            Kind::F => "F",
        })
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    t_s: f64,
    entity_id: String,
    kind: String,
    x_m: f64,
    y_m: f64,
    #[serde(default)]
    vx_mps: Option<f64>,
    #[serde(default)]
    vy_mps: Option<f64>,
}

const TIME_TOL: f64 = 1e-6;

/// Reads a trace CSV (`t_s,entity_id,kind,x_m,y_m[,vx_mps,vy_mps]`).
///
/// Rows must be grouped by non-decreasing timestamp with a constant step,
/// and every entity must appear exactly once per timestamp. Missing
/// velocities are finite differences of consecutive positions.
pub fn load_traces(path: &Path, sensors: SensorConfig) -> Result<Scenario, ScenarioError> {
    let file = std::fs::File::open(path)?;
    read_traces(file, sensors)
}

pub fn read_traces<R: std::io::Read>(reader: R, sensors: SensorConfig) -> Result<Scenario, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for need in ["t_s", "entity_id", "kind", "x_m", "y_m"] {
        if !headers.iter().any(|h| h == need) {
            return Err(ScenarioError::TraceFile(format!("missing column `{need}` in header")));
        }
    }

    let mut times: Vec<f64> = Vec::new();
    // per timestamp: label -> (kind, p, v)
    let mut frames: Vec<HashMap<String, (Kind, Vec2, Option<Vec2>)>> = Vec::new();
    let mut order: Vec<(String, Kind)> = Vec::new();
    let mut known: HashMap<String, Kind> = HashMap::new();
    for (n, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        // header is line 1
        let row = n + 2;
        let r = rec.map_err(|e| ScenarioError::Trace { row, msg: e.to_string() })?;
        let err = |msg: String| ScenarioError::Trace { row, msg };
        let kind = match r.kind.as_str() {
            "V" => Kind::V,
            "F" => Kind::F,
            other => return Err(err(format!("unknown entity kind `{other}`"))),
        };
        if ![r.t_s, r.x_m, r.y_m].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let vel = match (r.vx_mps, r.vy_mps) {
            (Some(a), Some(b)) => Some(Vec2::new(a, b)),
            (None, None) => None,
            _ => return Err(err("only one velocity component given".into())),
        };
        match times.last() {
            Some(&last) if r.t_s < last - TIME_TOL => {
                return Err(err(format!("timestamp {} goes back from {last}", r.t_s)));
            }
            Some(&last) if r.t_s <= last + TIME_TOL => {}
            _ => {
                times.push(r.t_s);
                frames.push(HashMap::new());
            }
        }
        match known.get(&r.entity_id) {
            Some(k) if *k != kind => return Err(err(format!("entity `{}` changes kind", r.entity_id))),
            Some(_) => {}
            None => {
                if times.len() > 1 {
                    return Err(err(format!("entity `{}` appears after the first timestamp", r.entity_id)));
                }
                known.insert(r.entity_id.clone(), kind);
                order.push((r.entity_id.clone(), kind));
            }
        }
        let frame = frames.last_mut().expect("frame pushed above");
        if frame.insert(r.entity_id.clone(), (kind, Vec2::new(r.x_m, r.y_m), vel)).is_some() {
            return Err(err(format!("entity `{}` repeated at t = {}", r.entity_id, r.t_s)));
        }
    }
    if times.is_empty() {
        return Err(ScenarioError::TraceFile("no rows".into()));
    }
    let ts = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    if ts <= 0.0 {
        return Err(ScenarioError::TraceFile("non-positive time step".into()));
    }
    for (j, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - ts).abs() > TIME_TOL * ts.max(1.0) {
            return Err(ScenarioError::TraceFile(format!(
                "gap between t = {} and t = {} (expected step {ts}) at timestamp index {}",
                w[0], w[1], j + 1
            )));
        }
    }
    for (j, f) in frames.iter().enumerate() {
        if f.len() != order.len() {
            let missing: Vec<&str> =
                order.iter().filter(|(l, _)| !f.contains_key(l)).map(|(l, _)| l.as_str()).collect();
            return Err(ScenarioError::TraceFile(format!("t = {}: missing entities {missing:?}", times[j])));
        }
    }

    let vehicle_labels: Vec<String> = order.iter().filter(|(_, k)| *k == Kind::V).map(|(l, _)| l.clone()).collect();
    let feature_labels: Vec<String> = order.iter().filter(|(_, k)| *k == Kind::F).map(|(l, _)| l.clone()).collect();
    if let GnssModel::Zoned { receivers, .. } = &sensors.gnss {
        if receivers.len() < vehicle_labels.len() {
            return Err(ScenarioError::TraceFile(format!(
                "{} vehicles but only {} receivers configured",
                vehicle_labels.len(),
                receivers.len()
            )));
        }
    }
    let track = |label: &str, kind: EntityKind| -> Vec<EntityState> {
        let pos: Vec<Vec2> = frames.iter().map(|f| f[label].1).collect();
        (0..frames.len())
            .map(|j| {
                let v = frames[j][label].2.unwrap_or_else(|| {
                    if frames.len() == 1 {
                        Vec2::zeros()
                    } else if j == 0 {
                        (pos[1] - pos[0]) / ts
                    } else {
                        (pos[j] - pos[j - 1]) / ts
                    }
                });
                EntityState::new(pos[j], v, kind)
            })
            .collect()
    };
    let v_tracks: Vec<Vec<EntityState>> = vehicle_labels.iter().map(|l| track(l, EntityKind::Vehicle)).collect();
    let f_tracks: Vec<Vec<EntityState>> = feature_labels.iter().map(|l| track(l, EntityKind::Feature)).collect();
    let transpose = |tracks: &[Vec<EntityState>]| -> Vec<Vec<EntityState>> {
        (0..frames.len()).map(|j| tracks.iter().map(|tr| tr[j]).collect()).collect()
    };
    Ok(Scenario::from_truth(
        ts,
        transpose(&v_tracks),
        transpose(&f_tracks),
        vehicle_labels,
        feature_labels,
        sensors,
    ))
}

/// Writes the truth timeline with explicit velocities, vehicles first at
/// each timestamp.
pub fn write_traces<W: std::io::Write>(scenario: &Scenario, writer: W) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_s", "entity_id", "kind", "x_m", "y_m", "vx_mps", "vy_mps"])?;
    for t in 0..scenario.num_epochs() {
        let time = format_float(t as f64 * scenario.ts);
        let rows = scenario.vehicles[t]
            .iter()
            .zip(&scenario.vehicle_labels)
            .map(|(s, l)| (s, l, Kind::V))
            .chain(scenario.features[t].iter().zip(&scenario.feature_labels).map(|(s, l)| (s, l, Kind::F)));
        for (s, label, kind) in rows {
            w.write_record([
                time.clone(),
                label.clone(),
                kind.to_string(),
                format_float(s.p[0]),
                format_float(s.p[1]),
                format_float(s.v[0]),
                format_float(s.v[1]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same f64.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Parameters of the synthetic downtown traces used in place of the
/// proprietary traffic-simulator output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UrbanTraceParams {
    pub width: f64,
    pub height: f64,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub duration: f64,
    pub ts: f64,
    pub vehicle_speed: f64,
    pub pedestrian_speed: f64,
    pub vehicle_accel_max: f64,
    pub pedestrian_accel_max: f64,
    pub seed: u64,
}

impl Default for UrbanTraceParams {
    fn default() -> Self {
        Self {
            width: 1200.0,
            height: 500.0,
            n_vehicles: 10,
            n_pedestrians: 20,
            duration: 200.0,
            ts: 1.0,
            vehicle_speed: 14.0,
            pedestrian_speed: 1.4,
            vehicle_accel_max: 2.0,
            pedestrian_accel_max: 0.3,
            seed: 0,
        }
    }
}

/// Street layout of the synthetic downtown: two avenues and three cross
/// streets, each with its own GNSS area.
#[derive(Debug, Clone)]
pub struct UrbanLayout {
    /// y of the two horizontal streets.
    pub avenues: [f64; 2],
    /// x of the three vertical streets.
    pub cross: [f64; 3],
    pub street_half_width: f64,
}

impl UrbanLayout {
    pub fn new(p: &UrbanTraceParams) -> Self {
        Self {
            avenues: [0.2 * p.height, 0.8 * p.height],
            cross: [p.width / 6.0, p.width / 2.0, 5.0 * p.width / 6.0],
            street_half_width: 12.0,
        }
    }

    /// Areas by street: A1 the lower avenue and the left street, A2 the
    /// upper avenue and the middle street, the right street a canyon whose
    /// lower half is A3 and upper half A4. Earlier zones win at crossings.
    pub fn zones(&self, p: &UrbanTraceParams) -> Vec<GnssZone> {
        let h = self.street_half_width;
        let hband = |y: f64| vec![[0.0, y - h], [p.width, y - h], [p.width, y + h], [0.0, y + h]];
        let vband = |x: f64, y0: f64, y1: f64| vec![[x - h, y0], [x + h, y0], [x + h, y1], [x - h, y1]];
        let mid = p.height / 2.0;
        vec![
            GnssZone::new(AreaId::A4, vband(self.cross[2], mid, p.height)),
            GnssZone::new(AreaId::A3, vband(self.cross[2], 0.0, mid)),
            GnssZone::new(AreaId::A2, hband(self.avenues[1])),
            GnssZone::new(AreaId::A2, vband(self.cross[1], 0.0, p.height)),
            GnssZone::new(AreaId::A1, hband(self.avenues[0])),
            GnssZone::new(AreaId::A1, vband(self.cross[0], 0.0, p.height)),
        ]
    }

    /// Rectangular loop through the block `(a, b)` between cross streets `a` and `b`.
    fn loop_route(&self, a: usize, b: usize, clockwise: bool) -> Vec<Vec2> {
        let (x0, x1) = (self.cross[a], self.cross[b]);
        let (y0, y1) = (self.avenues[0], self.avenues[1]);
        let mut r = vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)];
        if clockwise {
            r.reverse();
        }
        r
    }
}

/// Tracks waypoints with bounded acceleration by integrating the same
/// constant-velocity model the estimators use, so the truth is exactly
/// reproducible from positions, velocities and controls.
fn follow(
    start: Vec2,
    route: &[Vec2],
    cyclic: bool,
    speed: f64,
    accel_max: f64,
    ts: f64,
    steps: usize,
    pause: &[(usize, usize)],
    kind: EntityKind,
) -> Vec<EntityState> {
    let a_mat = transition_matrix(ts);
    let b_mat = input_map(ts);
    let mut x = EntityState::new(start, Vec2::zeros(), kind);
    let mut next_wp = 0;
    let mut out = Vec::with_capacity(steps);
    out.push(x);
    for t in 1..steps {
        let paused = pause.iter().any(|&(a, b)| t >= a && t < b);
        let target_v = if paused || route.is_empty() {
            Vec2::zeros()
        } else {
            let mut d = route[next_wp] - x.p;
            // switch once the waypoint is within one step of travel
            if d.norm() < (speed * ts).max(1.0) {
                if next_wp + 1 < route.len() {
                    next_wp += 1;
                } else if cyclic {
                    next_wp = 0;
                }
                d = route[next_wp] - x.p;
            }
            let dist = d.norm();
            if dist < 1e-9 {
                Vec2::zeros()
            } else {
                // slow down near the end of an open route
                let cap = if !cyclic && next_wp + 1 == route.len() { (dist / ts).min(speed) } else { speed };
                d / dist * cap
            }
        };
        let mut a = (target_v - x.v) / ts;
        let n = a.norm();
        if n > accel_max {
            a *= accel_max / n;
        }
        let next = a_mat * x.as_vector() + b_mat * a;
        x = EntityState::from_vector(&next, kind);
        out.push(x);
    }
    out
}

/// Synthetic downtown traffic: vehicles circling city blocks, pedestrians
/// standing, queuing or walking along sidewalks and turning into side
/// streets. Returns the scenario and its zone layout.
pub fn generate_urban(p: &UrbanTraceParams, sensors_base: &SensorConfig) -> Result<Scenario, ScenarioError> {
    if !(p.width > 0.0 && p.height > 0.0 && p.ts > 0.0 && p.duration >= 0.0) {
        return Err(ScenarioError::Geometry("urban area and timing must be positive".into()));
    }
    let layout = UrbanLayout::new(p);
    let steps = (p.duration / p.ts + 1e-9).floor() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let blocks = [(0usize, 1usize), (1, 2), (0, 2)];
    let mut v_tracks = Vec::with_capacity(p.n_vehicles);
    for i in 0..p.n_vehicles {
        let (a, b) = blocks[i % blocks.len()];
        let route = layout.loop_route(a, b, i % 2 == 1);
        // start somewhere along the first edge
        let s: f64 = rng.random_range(0.0..1.0);
        let start = route[0] + (route[1] - route[0]) * s;
        let mut r = route.clone();
        r.rotate_left(1);
        let speed = p.vehicle_speed * rng.random_range(0.8..=1.0);
        v_tracks.push(follow(start, &r, true, speed, p.vehicle_accel_max, p.ts, steps, &[], EntityKind::Vehicle));
    }

    let side = layout.street_half_width - 2.0;
    let inside = |v: Vec2| Vec2::new(v[0].clamp(0.0, p.width), v[1].clamp(0.0, p.height));
    let mut f_tracks = Vec::with_capacity(p.n_pedestrians);
    for _ in 0..p.n_pedestrians {
        // pedestrians gather around crossings: pick one, an arm and a sidewalk
        let corner = Vec2::new(layout.cross[rng.random_range(0..3)], layout.avenues[rng.random_range(0..2)]);
        let horizontal = rng.random_bool(0.5);
        let (along, across) = if horizontal {
            (Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0))
        } else {
            (Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0))
        };
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let curb = if rng.random_bool(0.5) { side } else { -side };
        let start = inside(corner + along * (dir * rng.random_range(15.0..80.0)) + across * curb);
        let end = inside(start + along * rng.random_range(-60.0..60.0));
        let mode = rng.random_range(0..4);
        let speed = p.pedestrian_speed * rng.random_range(0.5..=1.0);
        let track = match mode {
            // standing still
            0 => follow(start, &[], false, 0.0, p.pedestrian_accel_max, p.ts, steps, &[], EntityKind::Feature),
            // queuing: walk, wait, walk
            1 => {
                let a = rng.random_range(0..steps.max(2) / 2);
                let pause = [(a, a + steps / 4)];
                follow(start, &[end], false, speed, p.pedestrian_accel_max, p.ts, steps, &pause, EntityKind::Feature)
            }
            // back and forth along the sidewalk
            2 => follow(start, &[end, start], true, speed, p.pedestrian_accel_max, p.ts, steps, &[], EntityKind::Feature),
            // walk to the corner and turn into the side street
            _ => {
                let turn_at = corner + along * (dir * side) + across * curb;
                let away = if rng.random_bool(0.5) { 60.0 } else { -60.0 };
                let turn = vec![inside(turn_at), inside(turn_at + across * away)];
                follow(start, &turn, false, speed, p.pedestrian_accel_max, p.ts, steps, &[], EntityKind::Feature)
            }
        };
        f_tracks.push(track);
    }

    let transpose = |tracks: &[Vec<EntityState>]| -> Vec<Vec<EntityState>> {
        (0..steps).map(|j| tracks.iter().map(|tr| tr[j]).collect()).collect()
    };
    let mut sensors = sensors_base.clone();
    if let GnssModel::Zoned { zones, receivers } = &mut sensors.gnss {
        if zones.is_empty() {
            *zones = layout.zones(p);
        }
        if receivers.is_empty() {
            *receivers = ReceiverClass::default_mix(p.n_vehicles);
        }
    }
    Ok(Scenario::from_truth(
        p.ts,
        transpose(&v_tracks),
        transpose(&f_tracks),
        (0..p.n_vehicles).map(|i| format!("veh{i}")).collect(),
        (0..p.n_pedestrians).map(|k| format!("ped{k}")).collect(),
        sensors,
    ))
}

/// Urban sensing defaults: RADAR-grade V2F, 200 m V2V range.
pub fn urban_sensors(r_s: f64) -> SensorConfig {
    SensorConfig {
        sigma_v2f: 0.1,
        r_c: 200.0,
        r_s,
        gnss: GnssModel::Zoned { zones: Vec::new(), receivers: Vec::new() },
        accel_sigma_parallel: 0.3,
        accel_sigma_perp: 0.3,
        feature_motion: FeatureMotion::Mobile { sigma: 0.3 },
    }
}

/// Per-axis acceleration variance estimated from the increments of a
/// track, averaged over entities: the mobility calibration helper.
pub fn estimate_accel_variance(tracks: &[Vec<EntityState>], ts: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in tracks {
        for w in tr.windows(2) {
            let a = (w[1].v - w[0].v) / ts;
            sum += a.norm_squared();
            n += 2;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
