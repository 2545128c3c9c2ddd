//! V2V connectivity, sensing maps, components and communication accounting.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::linalg::Vec2;
use crate::models::{EntityState, GnssFix, MotionParams, V2fObservation};

/// Undirected graph over vehicles, stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommGraph {
    adj: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn empty(n: usize) -> Self {
        Self { adj: vec![Vec::new(); n] }
    }

    pub fn complete(n: usize) -> Self {
        Self {
            adj: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    /// Builds from an edge list; duplicates and self loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            assert!(a < n && b < n, "edge ({a},{b}) out of range for {n} vertices");
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }
        Self { adj }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Subgraph induced by `members`, relabelled to `0..members.len()`.
    pub fn induced(&self, members: &[usize]) -> CommGraph {
        let mut local = vec![usize::MAX; self.len()];
        for (li, &g) in members.iter().enumerate() {
            local[g] = li;
        }
        let adj = members
            .iter()
            .map(|&g| {
                let mut l: Vec<usize> = self.adj[g]
                    .iter()
                    .filter_map(|&n| (local[n] != usize::MAX).then_some(local[n]))
                    .collect();
                l.sort_unstable();
                l
            })
            .collect();
        CommGraph { adj }
    }
}

fn within(a: &Vec2, b: &Vec2, range: f64) -> bool {
    let d = a - b;
    d[0] * d[0] + d[1] * d[1] <= range * range
}

/// Edge iff `||p_i - p_j|| <= r_c`.
pub fn build_v2v(positions: &[Vec2], r_c: f64) -> CommGraph {
    let n = positions.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if within(&positions[i], &positions[j], r_c) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    CommGraph { adj }
}

/// Per-vehicle sorted list of sensed feature ids.
pub type SensingMap = Vec<Vec<usize>>;

/// `k` is sensed by `i` iff `||p_k - p_i|| <= r_s`.
pub fn build_sensing(vehicles: &[Vec2], features: &[Vec2], r_s: f64) -> SensingMap {
    vehicles
        .iter()
        .map(|pv| {
            features
                .iter()
                .enumerate()
                .filter(|(_, pf)| within(pv, pf, r_s))
                .map(|(k, _)| k)
                .collect()
        })
        .collect()
}

/// Connected components, each sorted, ordered by smallest member.
pub fn components(graph: &CommGraph) -> Vec<Vec<usize>> {
    let n = graph.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in graph.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Everything the estimators see at one epoch, plus the truth for scoring.
#[derive(Debug, Clone)]
pub struct EpochSnapshot {
    pub t: usize,
    pub vehicles: Vec<EntityState>,
    pub features: Vec<EntityState>,
    pub v2v: CommGraph,
    pub sensing: SensingMap,
    pub gnss: Vec<GnssFix>,
    pub v2f: Vec<V2fObservation>,
    /// Known acceleration applied between the previous epoch and this one.
    pub controls: Vec<Vec2>,
    pub vehicle_motion: Vec<MotionParams>,
    pub feature_motion: Vec<MotionParams>,
}

impl EpochSnapshot {
    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    /// Checks ids and the sensing map against the observation lists.
    pub fn validate(&self) -> Result<(), String> {
        let (nv, nf) = (self.vehicles.len(), self.features.len());
        if self.v2v.len() != nv || self.sensing.len() != nv {
            return Err(format!("epoch {}: graph or sensing map size differs from {nv} vehicles", self.t));
        }
        if self.controls.len() != nv || self.vehicle_motion.len() != nv || self.feature_motion.len() != nf {
            return Err(format!("epoch {}: per-entity model lists have the wrong length", self.t));
        }
        for g in &self.gnss {
            if g.vehicle_id >= nv {
                return Err(format!("epoch {}: GNSS fix for unknown vehicle {}", self.t, g.vehicle_id));
            }
        }
        for o in &self.v2f {
            if o.vehicle_id >= nv || o.feature_id >= nf {
                return Err(format!(
                    "epoch {}: observation ({}, {}) references an unknown entity",
                    self.t, o.vehicle_id, o.feature_id
                ));
            }
            if self.sensing[o.vehicle_id].binary_search(&o.feature_id).is_err() {
                return Err(format!(
                    "epoch {}: observation ({}, {}) is outside the sensing map",
                    self.t, o.vehicle_id, o.feature_id
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadParams {
    /// Link rate in bit/s.
    pub rate: f64,
    /// Bits per transmitted feature belief.
    pub n_b: f64,
    pub n_nei: f64,
    pub n_f: f64,
    pub n_mp: f64,
    pub n_con: f64,
    pub ts: f64,
}

/// Minimum time to exchange all consensus messages of one epoch.
pub fn comm_lower_bound(p: &OverheadParams) -> f64 {
    p.n_mp * p.n_con * p.n_f * p.n_nei * p.n_b / p.rate
}

/// Largest `N_mp * N_con` that fits in one sampling interval.
pub fn iteration_budget(rate: f64, n_b: f64, n_nei: f64, n_f: f64, ts: f64) -> u64 {
    let raw = ts * rate / (n_f * n_nei * n_b);
    // guard against 299.99999 from rounding
    (raw * (1.0 + 1e-12)).floor() as u64
}
