//! Distributed estimator: per-epoch Gaussian message passing on the
//! vehicle/feature factor graph, with feature messages combined by
//! consensus so that features never have to compute anything.

use serde::{Deserialize, Serialize};

use crate::consensus::{aggregate_feature_moments, ConsensusConfig};
use crate::gaussian::{
    info_divide, info_product, lift_position_observation, relative_position_message, GaussianError,
    IndefinitePolicy, InfoMessage, MomentGaussian,
};
use crate::linalg::{Mat2, Vec2};
use crate::models::{InitialPrior, MotionParams};
use crate::network::{components, EpochSnapshot};

/// How the network-wide product of feature messages is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    /// Average consensus over the V2V graph.
    #[default]
    Average,
    /// Exact summation, as if consensus had run to completion. Used as a
    /// reference; reports zero consensus rounds.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmpConfig {
    pub n_mp_max: usize,
    pub gamma_mp: f64,
    pub consensus: ConsensusConfig,
    pub consensus_mode: ConsensusMode,
    /// Keep the predicted belief of a feature that nobody observed instead
    /// of resetting it to zero information.
    pub retain_unobserved_feature_prior: bool,
    pub indefinite_policy: IndefinitePolicy,
    pub prior: InitialPrior,
    pub feature_prior: InitialPrior,
}

impl Default for GmpConfig {
    fn default() -> Self {
        Self {
            n_mp_max: 50,
            gamma_mp: 1e-2,
            consensus: ConsensusConfig::default(),
            consensus_mode: ConsensusMode::Average,
            retain_unobserved_feature_prior: false,
            indefinite_policy: IndefinitePolicy::FloorEigenvalues,
            prior: InitialPrior::default(),
            feature_prior: InitialPrior::at_rest(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub entity_id: usize,
    pub message: InfoMessage,
    /// GMP iteration that produced the belief (0 means no V2F information).
    pub iteration: usize,
}

/// What every vehicle carries from one epoch to the next: its own belief
/// and its own copy of every feature belief.
#[derive(Debug, Clone)]
pub struct DistributedState {
    pub vehicles: Vec<Belief>,
    /// `features[i][k]`: vehicle `i`'s belief about feature `k`.
    pub features: Vec<Vec<Belief>>,
}

impl DistributedState {
    /// Zero-information state, replaced by the prior at the first prediction.
    pub fn new(n_vehicles: usize, n_features: usize) -> Self {
        let blank = |id| Belief { entity_id: id, message: InfoMessage::uninformative(), iteration: 0 };
        Self {
            vehicles: (0..n_vehicles).map(blank).collect(),
            features: (0..n_vehicles).map(|_| (0..n_features).map(blank).collect()).collect(),
        }
    }
}

/// Propagates a previous belief through the motion model. A belief that
/// cannot be inverted carries no usable history and is replaced by `prior`.
pub fn prediction_message(
    prev: &InfoMessage,
    motion: &MotionParams,
    control: Option<&Vec2>,
    prior: &InitialPrior,
) -> InfoMessage {
    match prev.to_moments() {
        Ok(m) => {
            let mut mu = motion.transition * m.mu;
            if let Some(a) = control {
                mu += motion.input_map * a;
            }
            let cov = motion.transition * m.cov * motion.transition.transpose() + motion.process_noise;
            InfoMessage::from_mean_cov_floored(&mu, &cov)
        }
        Err(_) => InfoMessage::from_mean_cov_floored(&crate::linalg::Vec4::zeros(), &prior.covariance()),
    }
}

/// Prediction messages for all vehicles and all per-vehicle feature copies.
pub fn prediction_messages(
    prev: &DistributedState,
    epoch: &EpochSnapshot,
    prior: &InitialPrior,
    feature_prior: &InitialPrior,
) -> (Vec<InfoMessage>, Vec<Vec<InfoMessage>>) {
    let veh = prev
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, b)| prediction_message(&b.message, &epoch.vehicle_motion[i], Some(&epoch.controls[i]), prior))
        .collect();
    let feat = prev
        .features
        .iter()
        .map(|copies| {
            copies
                .iter()
                .enumerate()
                .map(|(k, b)| prediction_message(&b.message, &epoch.feature_motion[k], None, feature_prior))
                .collect()
        })
        .collect();
    (veh, feat)
}

/// One V2F observation held by a vehicle of the component.
#[derive(Debug, Clone, Copy)]
struct Link {
    slot: usize,
    z: Vec2,
    r: Mat2,
}

/// Message-passing state of one connected component during one epoch.
/// Vehicles are addressed by local index, features by slot.
#[derive(Debug, Clone)]
pub struct EpochState {
    /// Global ids of the component's vehicles.
    pub members: Vec<usize>,
    /// Global ids of features observed by at least one member.
    pub features: Vec<usize>,
    graph: crate::network::CommGraph,
    pred_vehicle: Vec<InfoMessage>,
    gnss: Vec<InfoMessage>,
    /// `pred_feature[i][slot]`.
    pred_feature: Vec<Vec<InfoMessage>>,
    links: Vec<Vec<Link>>,
    /// Factor-to-vehicle messages from the latest iteration, per link.
    incoming: Vec<Vec<InfoMessage>>,
    /// Factor-to-feature messages from the latest iteration, per link.
    to_feature: Vec<Vec<InfoMessage>>,
    /// `u[slot][i]` from the latest iteration.
    u: Vec<Vec<InfoMessage>>,
    pub iteration: usize,
    pub indefinite_divisions: usize,
    cfg: GmpConfig,
}

/// Counters of one GMP iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub consensus_rounds: usize,
    pub consensus_converged: bool,
}

impl EpochState {
    pub fn new(
        epoch: &EpochSnapshot,
        members: &[usize],
        pred_vehicle: &[InfoMessage],
        pred_feature: &[Vec<InfoMessage>],
        cfg: &GmpConfig,
    ) -> Result<Self, GaussianError> {
        let mut features: Vec<usize> = members.iter().flat_map(|&g| epoch.sensing[g].iter().copied()).collect();
        features.sort_unstable();
        features.dedup();
        let slot_of = |k: usize| features.binary_search(&k).expect("sensed feature has a slot");

        let mut links = vec![Vec::new(); members.len()];
        let mut gnss = vec![InfoMessage::uninformative(); members.len()];
        let mut local = vec![usize::MAX; epoch.num_vehicles()];
        for (li, &g) in members.iter().enumerate() {
            local[g] = li;
        }
        for fix in &epoch.gnss {
            let li = local[fix.vehicle_id];
            if li != usize::MAX {
                gnss[li] = gnss[li] * lift_position_observation(&fix.z, &fix.r)?;
            }
        }
        for o in &epoch.v2f {
            let li = local[o.vehicle_id];
            if li != usize::MAX {
                links[li].push(Link { slot: slot_of(o.feature_id), z: o.z, r: o.r });
            }
        }
        let incoming = links.iter().map(|l| vec![InfoMessage::uninformative(); l.len()]).collect();
        let to_feature = links.iter().map(|l| vec![InfoMessage::uninformative(); l.len()]).collect();
        Ok(Self {
            graph: epoch.v2v.induced(members),
            pred_vehicle: members.iter().map(|&g| pred_vehicle[g]).collect(),
            gnss,
            pred_feature: members
                .iter()
                .map(|&g| features.iter().map(|&k| pred_feature[g][k]).collect())
                .collect(),
            u: vec![vec![InfoMessage::uninformative(); members.len()]; features.len()],
            members: members.to_vec(),
            features,
            links,
            incoming,
            to_feature,
            iteration: 0,
            indefinite_divisions: 0,
            cfg: *cfg,
        })
    }

    fn link_index(&self, i: usize, slot: usize) -> Option<usize> {
        self.links[i].iter().position(|l| l.slot == slot)
    }

    fn slot(&self, k: usize) -> Option<usize> {
        self.features.binary_search(&k).ok()
    }

    /// Outgoing vehicle message towards link `j`: everything the vehicle
    /// knows except what came back along that same link.
    fn vehicle_outgoing(&self, i: usize, j: usize) -> InfoMessage {
        let mut out = self.pred_vehicle[i] * self.gnss[i];
        for (jj, m) in self.incoming[i].iter().enumerate() {
            if jj != j {
                out = out * *m;
            }
        }
        out
    }

    /// Message from vehicle `i` (local) through its observation of feature
    /// `k` (global), built from the previous iteration's incoming messages.
    pub fn vehicle_to_feature_message(&self, i: usize, k: usize) -> Result<InfoMessage, GaussianError> {
        let j = self
            .slot(k)
            .and_then(|s| self.link_index(i, s))
            .ok_or_else(|| GaussianError::Invalid(format!("vehicle {} does not observe feature {k}", self.members[i])))?;
        let link = self.links[i][j];
        relative_position_message(&self.vehicle_outgoing(i, j), &link.z, &link.r, 1.0)
    }

    /// Message from feature `k` back to vehicle `i` through their
    /// observation factor, built from the current `u`.
    pub fn feature_to_vehicle_message(&mut self, i: usize, k: usize) -> Result<InfoMessage, GaussianError> {
        let slot = self.slot(k).ok_or_else(|| GaussianError::Invalid(format!("feature {k} unobserved")))?;
        let j = self
            .link_index(i, slot)
            .ok_or_else(|| GaussianError::Invalid(format!("vehicle {} does not observe feature {k}", self.members[i])))?;
        let q = info_divide(&self.u[slot][i], &self.to_feature[i][j]);
        if q.indefinite {
            self.indefinite_divisions += 1;
        }
        let outgoing = self.pred_feature[i][slot] * q.regularized(self.cfg.indefinite_policy);
        let link = self.links[i][j];
        relative_position_message(&outgoing, &link.z, &link.r, -1.0)
    }

    fn aggregate(&mut self) -> IterationStats {
        let nv = self.members.len();
        let mut per_slot = vec![vec![InfoMessage::uninformative(); nv]; self.features.len()];
        for (i, links) in self.links.iter().enumerate() {
            for (j, l) in links.iter().enumerate() {
                per_slot[l.slot][i] = self.to_feature[i][j];
            }
        }
        match self.cfg.consensus_mode {
            ConsensusMode::Exact => {
                self.u = per_slot
                    .iter()
                    .map(|msgs| vec![info_product(msgs).unwrap_or_else(|_| InfoMessage::uninformative()); nv])
                    .collect();
                IterationStats { consensus_rounds: 0, consensus_converged: true }
            }
            ConsensusMode::Average => {
                let agg = aggregate_feature_moments(&per_slot, &self.graph, &self.cfg.consensus);
                self.u = agg.u;
                IterationStats { consensus_rounds: agg.rounds, consensus_converged: agg.converged }
            }
        }
    }

    /// Runs one synchronous GMP iteration.
    pub fn iterate(&mut self) -> Result<IterationStats, GaussianError> {
        let mut to_feature = Vec::with_capacity(self.members.len());
        for i in 0..self.members.len() {
            let mut row = Vec::with_capacity(self.links[i].len());
            for j in 0..self.links[i].len() {
                let l = self.links[i][j];
                row.push(relative_position_message(&self.vehicle_outgoing(i, j), &l.z, &l.r, 1.0)?);
            }
            to_feature.push(row);
        }
        self.to_feature = to_feature;
        let stats = self.aggregate();
        let mut incoming = Vec::with_capacity(self.members.len());
        for i in 0..self.members.len() {
            let mut row = Vec::with_capacity(self.links[i].len());
            for j in 0..self.links[i].len() {
                let k = self.features[self.links[i][j].slot];
                row.push(self.feature_to_vehicle_message(i, k)?);
            }
            incoming.push(row);
        }
        self.incoming = incoming;
        self.iteration += 1;
        Ok(stats)
    }

    /// Vehicle belief: prediction, GNSS and every incoming V2F message.
    pub fn vehicle_belief(&self, i: usize) -> InfoMessage {
        self.incoming[i].iter().fold(self.pred_vehicle[i] * self.gnss[i], |acc, m| acc * *m)
    }

    /// Vehicle `i`'s belief about the feature in `slot`: prediction times `u`.
    pub fn feature_belief(&self, i: usize, slot: usize) -> InfoMessage {
        self.pred_feature[i][slot] * self.u[slot][i]
    }

    pub fn update_beliefs(&self) -> (Vec<InfoMessage>, Vec<Vec<InfoMessage>>) {
        let veh = (0..self.members.len()).map(|i| self.vehicle_belief(i)).collect();
        let feat = (0..self.members.len())
            .map(|i| (0..self.features.len()).map(|s| self.feature_belief(i, s)).collect())
            .collect();
        (veh, feat)
    }

    /// Trace of the information in `u` for `slot`, as seen by vehicle `i`.
    pub fn u_information_trace(&self, slot: usize, i: usize) -> f64 {
        self.u[slot][i].lambda().trace()
    }
}

fn settled(prev: &MomentGaussian, next: &MomentGaussian, gamma: f64) -> bool {
    (next.mu - prev.mu).norm() < gamma && (next.cov - prev.cov).norm().sqrt() < gamma
}

/// Counters of one epoch, combined over components.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EpochReport {
    /// Largest number of GMP iterations used by any component.
    pub n_mp: usize,
    /// Largest number of consensus rounds in any single GMP iteration.
    pub n_con_max: usize,
    /// Consensus rounds summed over the iterations of the slowest component.
    pub consensus_rounds_total: usize,
    /// All components met the GMP stopping rule within `n_mp_max`.
    pub converged: bool,
    /// All consensus runs met their stopping rule.
    pub consensus_converged: bool,
    pub indefinite_divisions: usize,
    pub components: usize,
}

/// Solves one epoch: prediction, message passing per connected component,
/// and the beliefs handed to the next epoch.
pub fn gmp_epoch(
    epoch: &EpochSnapshot,
    prev: &DistributedState,
    cfg: &GmpConfig,
) -> Result<(DistributedState, EpochReport), GaussianError> {
    epoch.validate().map_err(GaussianError::Invalid)?;
    let (pred_v, pred_f) = prediction_messages(prev, epoch, &cfg.prior, &cfg.feature_prior);
    let nf = epoch.num_features();
    let mut next = DistributedState::new(epoch.num_vehicles(), nf);
    let mut report = EpochReport { converged: true, consensus_converged: true, ..Default::default() };

    let mut observed = vec![false; nf];
    for o in &epoch.v2f {
        observed[o.feature_id] = true;
    }

    for members in components(&epoch.v2v) {
        let mut st = EpochState::new(epoch, &members, &pred_v, &pred_f, cfg)?;
        let nloc = members.len();
        let to_moments = |m: &InfoMessage| m.to_moments();
        let mut beliefs: Vec<MomentGaussian> =
            (0..nloc).map(|i| to_moments(&st.vehicle_belief(i))).collect::<Result<_, _>>()?;
        let mut rounds = 0;
        let mut n_con_max = 0;
        let mut done = false;
        while st.iteration < cfg.n_mp_max {
            let s = st.iterate()?;
            rounds += s.consensus_rounds;
            n_con_max = n_con_max.max(s.consensus_rounds);
            report.consensus_converged &= s.consensus_converged;
            let new: Vec<MomentGaussian> =
                (0..nloc).map(|i| to_moments(&st.vehicle_belief(i))).collect::<Result<_, _>>()?;
            let all_settled = beliefs.iter().zip(&new).all(|(a, b)| settled(a, b, cfg.gamma_mp));
            beliefs = new;
            if all_settled {
                done = true;
                break;
            }
        }
        report.converged &= done;
        if st.iteration > report.n_mp || (st.iteration == report.n_mp && rounds > report.consensus_rounds_total) {
            report.consensus_rounds_total = rounds;
        }
        report.n_mp = report.n_mp.max(st.iteration);
        report.n_con_max = report.n_con_max.max(n_con_max);
        report.indefinite_divisions += st.indefinite_divisions;
        report.components += 1;

        let (veh, feat) = st.update_beliefs();
        for (li, &g) in members.iter().enumerate() {
            next.vehicles[g] = Belief { entity_id: g, message: veh[li], iteration: st.iteration };
            for k in 0..nf {
                let message = match st.slot(k) {
                    Some(s) => feat[li][s],
                    // seen elsewhere in the network: zero-information u, belief is the prediction
                    None if cfg.retain_unobserved_feature_prior || observed[k] => pred_f[g][k],
                    None => InfoMessage::uninformative(),
                };
                let iteration = if st.slot(k).is_some() { st.iteration } else { 0 };
                next.features[g][k] = Belief { entity_id: k, message, iteration };
            }
        }
    }
    Ok((next, report))
}
