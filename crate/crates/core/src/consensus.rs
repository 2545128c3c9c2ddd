//! Synchronous average consensus over the V2V graph, used to turn per-vehicle
//! feature messages into their network-wide product.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::gaussian::{symmetrize, InfoMessage};
use crate::linalg::{Mat4, Vec4};
use crate::network::CommGraph;

/// A quantity that can be averaged and tested for a small per-round change.
pub trait ConsensusValue: Clone {
    fn zero_like(&self) -> Self;
    /// `self += scale * (other - base)`.
    fn add_scaled_diff(&mut self, other: &Self, base: &Self, scale: f64);
    fn scale(&mut self, s: f64);
    /// True when `self - prev` is below the stopping threshold.
    fn settled(&self, prev: &Self, gamma: f64) -> bool;
    /// Squared Frobenius norm, used for conservation checks.
    fn norm_squared(&self) -> f64;
    fn add(&mut self, other: &Self);
}

impl ConsensusValue for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_scaled_diff(&mut self, other: &Self, base: &Self, scale: f64) {
        *self += scale * (other - base);
    }
    fn scale(&mut self, s: f64) {
        *self *= s;
    }
    fn settled(&self, prev: &Self, gamma: f64) -> bool {
        (self - prev).abs() < gamma
    }
    fn norm_squared(&self) -> f64 {
        self * self
    }
    fn add(&mut self, other: &Self) {
        *self += other;
    }
}

/// Vectors stop on `||delta|| < gamma`, matrices on `||delta||_F^(1/2) < gamma`.
impl<const R: usize, const C: usize> ConsensusValue for SMatrix<f64, R, C> {
    fn zero_like(&self) -> Self {
        Self::zeros()
    }
    fn add_scaled_diff(&mut self, other: &Self, base: &Self, scale: f64) {
        *self += (other - base) * scale;
    }
    fn scale(&mut self, s: f64) {
        *self *= s;
    }
    fn settled(&self, prev: &Self, gamma: f64) -> bool {
        let d = (self - prev).norm();
        if C == 1 {
            d < gamma
        } else {
            d.sqrt() < gamma
        }
    }
    fn norm_squared(&self) -> f64 {
        self.norm_squared()
    }
    fn add(&mut self, other: &Self) {
        *self += other;
    }
}

impl<A: ConsensusValue, B: ConsensusValue> ConsensusValue for (A, B) {
    fn zero_like(&self) -> Self {
        (self.0.zero_like(), self.1.zero_like())
    }
    fn add_scaled_diff(&mut self, other: &Self, base: &Self, scale: f64) {
        self.0.add_scaled_diff(&other.0, &base.0, scale);
        self.1.add_scaled_diff(&other.1, &base.1, scale);
    }
    fn scale(&mut self, s: f64) {
        self.0.scale(s);
        self.1.scale(s);
    }
    fn settled(&self, prev: &Self, gamma: f64) -> bool {
        self.0.settled(&prev.0, gamma) && self.1.settled(&prev.1, gamma)
    }
    fn norm_squared(&self) -> f64 {
        self.0.norm_squared() + self.1.norm_squared()
    }
    fn add(&mut self, other: &Self) {
        self.0.add(&other.0);
        self.1.add(&other.1);
    }
}

/// Element-wise: settled only when every element is.
impl<T: ConsensusValue> ConsensusValue for Vec<T> {
    fn zero_like(&self) -> Self {
        self.iter().map(T::zero_like).collect()
    }
    fn add_scaled_diff(&mut self, other: &Self, base: &Self, scale: f64) {
        for ((s, o), b) in self.iter_mut().zip(other).zip(base) {
            s.add_scaled_diff(o, b, scale);
        }
    }
    fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| x.scale(s));
    }
    fn settled(&self, prev: &Self, gamma: f64) -> bool {
        self.iter().zip(prev).all(|(a, b)| a.settled(b, gamma))
    }
    fn norm_squared(&self) -> f64 {
        self.iter().map(T::norm_squared).sum()
    }
    fn add(&mut self, other: &Self) {
        for (s, o) in self.iter_mut().zip(other) {
            s.add(o);
        }
    }
}

/// `factor / max_degree`, or 0 for a graph without edges.
pub fn step_size(graph: &CommGraph, factor: f64) -> f64 {
    assert!(!graph.is_empty(), "step size of an empty graph");
    assert!(factor > 0.0 && factor < 1.0, "step factor must lie in (0, 1)");
    match graph.max_degree() {
        0 => 0.0,
        d => factor / d as f64,
    }
}

/// One synchronous round: every vehicle reads its neighbors' previous values.
pub fn consensus_round<T: ConsensusValue>(graph: &CommGraph, values: &[T], eps: f64) -> Vec<T> {
    values
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut next = xi.clone();
            for &j in graph.neighbors(i) {
                next.add_scaled_diff(&values[j], xi, eps);
            }
            next
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome<T> {
    pub values: Vec<T>,
    pub rounds: usize,
    pub converged: bool,
}

/// Iterates rounds until every vehicle's change is below `gamma` or
/// `n_max` rounds have run. The graph is assumed connected.
pub fn consensus_run<T: ConsensusValue>(
    graph: &CommGraph,
    initial: Vec<T>,
    eps: f64,
    gamma: f64,
    n_max: usize,
) -> ConsensusOutcome<T> {
    assert_eq!(graph.len(), initial.len());
    if graph.len() <= 1 || graph.edge_count() == 0 {
        return ConsensusOutcome {
            values: initial,
            rounds: 0,
            converged: graph.len() <= 1,
        };
    }
    let mut values = initial;
    for r in 1..=n_max {
        let next = consensus_round(graph, &values, eps);
        let settled = next.iter().zip(&values).all(|(a, b)| a.settled(b, gamma));
        values = next;
        if settled {
            return ConsensusOutcome {
                values,
                rounds: r,
                converged: true,
            };
        }
    }
    ConsensusOutcome {
        values,
        rounds: n_max,
        converged: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    /// Step size is `step_factor / max_degree`.
    pub step_factor: f64,
    pub gamma_con: f64,
    pub n_con_max: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            step_factor: 0.99,
            gamma_con: 1e-2,
            n_con_max: 500,
        }
    }
}

/// Network-wide product of one iteration's feature messages, as seen by each vehicle.
#[derive(Debug, Clone)]
pub struct FeatureAggregate {
    /// `u[f][i]`: product estimate for feature slot `f` at local vehicle `i`.
    pub u: Vec<Vec<InfoMessage>>,
    pub rounds: usize,
    pub converged: bool,
}

/// Averages `(lambda, eta)` of `incoming[f][i]` over the component and
/// rescales by its size. All feature slots share the same rounds.
pub fn aggregate_feature_moments(
    incoming: &[Vec<InfoMessage>],
    graph: &CommGraph,
    cfg: &ConsensusConfig,
) -> FeatureAggregate {
    let nv = graph.len();
    if incoming.is_empty() || nv == 0 {
        return FeatureAggregate {
            u: vec![Vec::new(); incoming.len()],
            rounds: 0,
            converged: true,
        };
    }
    // per vehicle: one (Phi, Phi~) pair per feature slot
    let initial: Vec<Vec<(Mat4, Vec4)>> = (0..nv)
        .map(|i| incoming.iter().map(|per_v| (*per_v[i].lambda(), *per_v[i].eta())).collect())
        .collect();
    let eps = step_size(graph, cfg.step_factor);
    let out = consensus_run(graph, initial, eps, cfg.gamma_con, cfg.n_con_max);
    let scale = nv as f64;
    let u = (0..incoming.len())
        .map(|f| {
            (0..nv)
                .map(|i| {
                    let (phi, phi_t) = &out.values[i][f];
                    InfoMessage::from_parts(symmetrize(phi) * scale, phi_t * scale)
                })
                .collect()
        })
        .collect();
    FeatureAggregate {
        u,
        rounds: out.rounds,
        converged: out.converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{info_product, lift_position_observation};
    use crate::linalg::{Mat2, Vec2};
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> CommGraph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        CommGraph::from_edges(n, &edges)
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size(&ring(6), 0.99), 0.495);
        assert_eq!(CommGraph::complete(3).max_degree(), 2);
        assert_eq!(step_size(&CommGraph::empty(1), 0.99), 0.0);
    }

    #[test]
    fn pair_averages_in_one_round() {
        let g = CommGraph::complete(2);
        let out = consensus_run(&g, vec![1.0, 3.0], 0.5, 1e-9, 10);
        assert_eq!(out.values, vec![2.0, 2.0]);
        // the second round confirms the fixed point
        assert_eq!(out.rounds, 2);
    }

    #[test]
    fn triangle_converges_to_mean() {
        let out = consensus_run(&CommGraph::complete(3), vec![1.0, 2.0, 3.0], 0.3, 1e-12, 1000);
        assert!(out.converged);
        for v in out.values {
            assert!((v - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exhausting_rounds_is_reported() {
        let out = consensus_run(&ring(10), vec![0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0], 0.1, 1e-12, 3);
        assert!(!out.converged);
        assert_eq!(out.rounds, 3);
    }

    #[test]
    fn ring_rounds_follow_the_spectral_rate() {
        // W = I - eps L; the error contracts by rho = max(|l2|, |ln|) per round
        let n = 10;
        let g = ring(n);
        let eps = step_size(&g, 0.99);
        let mut w = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for &j in g.neighbors(i) {
                w[(i, j)] += eps;
                w[(i, i)] -= eps;
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(w).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let rho = ev[1].abs().max(ev[n - 1].abs());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let mean = x0.iter().sum::<f64>() / n as f64;
        let e0 = x0.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        let gamma = 1e-2;

        // rounds until every node is within gamma of the mean
        let mut x = x0.clone();
        let mut r = 0;
        while x.iter().any(|v| (v - mean).abs() >= gamma) {
            x = consensus_round(&g, &x, eps);
            r += 1;
        }
        let bound = ((e0 / gamma).ln() / (1.0 / rho).ln()).ceil() as usize;
        assert!(r <= bound, "{r} rounds exceed spectral bound {bound}");
        // the bound is tight to within the transient of the slower modes
        assert!(r * 3 >= bound, "{r} rounds far below bound {bound}");

        let out = consensus_run(&g, x0, eps, gamma, 10_000);
        assert!(out.converged);
        assert!(out.rounds > 0);
    }

    #[test]
    fn aggregate_on_complete_graph_equals_direct_product() {
        let msgs: Vec<InfoMessage> = (0..4)
            .map(|i| lift_position_observation(&Vec2::new(i as f64, 1.0), &(Mat2::identity() * (1.0 + i as f64))).unwrap())
            .collect();
        let direct = info_product(&msgs).unwrap();
        let cfg = ConsensusConfig { gamma_con: 1e-13, ..Default::default() };
        let agg = aggregate_feature_moments(&[msgs], &CommGraph::complete(4), &cfg);
        for u in &agg.u[0] {
            assert!((u.lambda() - direct.lambda()).norm() < 1e-10);
            assert!((u.eta() - direct.eta()).norm() < 1e-10);
        }
    }

    #[test]
    fn unobserved_feature_yields_zero_information() {
        let cfg = ConsensusConfig::default();
        let agg = aggregate_feature_moments(&[vec![InfoMessage::uninformative(); 3]], &ring(3), &cfg);
        assert!(agg.u[0].iter().all(InfoMessage::is_uninformative));
    }

    #[test]
    fn chain_aggregate_within_tolerance() {
        let g = CommGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let msgs: Vec<InfoMessage> = (0..4)
            .map(|i| {
                if i == 3 {
                    InfoMessage::uninformative()
                } else {
                    lift_position_observation(&Vec2::new(2.0 * i as f64, -1.0), &(Mat2::identity() * 0.25)).unwrap()
                }
            })
            .collect();
        let direct = info_product(&msgs).unwrap();
        let cfg = ConsensusConfig { gamma_con: 1e-4, ..Default::default() };
        let agg = aggregate_feature_moments(&[msgs], &g, &cfg);
        assert!(agg.converged);
        let tol = 1e-2 * 4.0;
        for u in &agg.u[0] {
            assert!((u.eta() - direct.eta()).norm() < tol);
            assert!((u.lambda() - direct.lambda()).norm() < tol);
        }
    }

    fn connected_graph() -> impl Strategy<Value = CommGraph> {
        (2usize..30, any::<u64>()).prop_map(|(n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // random spanning tree plus extra edges
            let mut edges = Vec::new();
            for v in 1..n {
                edges.push((v, rng.random_range(0..v)));
            }
            for _ in 0..n {
                edges.push((rng.random_range(0..n), rng.random_range(0..n)));
            }
            CommGraph::from_edges(n, &edges)
        })
    }

    proptest! {
        #[test]
        fn rounds_conserve_the_sum(g in connected_graph(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = g.len();
            let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s0: f64 = x.iter().sum();
            let scale: f64 = x.iter().map(|v| v.abs()).sum();
            let eps = step_size(&g, 0.99);
            let mean = s0 / n as f64;
            let mut dev = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            for _ in 0..50 {
                x = consensus_round(&g, &x, eps);
                let s: f64 = x.iter().sum();
                prop_assert!((s - s0).abs() <= 1e-12 * scale.max(1.0));
                let d = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
                prop_assert!(d <= dev + 1e-12);
                dev = d;
            }
        }

        #[test]
        fn de_averaged_u_agrees_across_vehicles(g in connected_graph(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = g.len();
            let msgs: Vec<InfoMessage> = (0..n).map(|_| {
                if rng.random_bool(0.5) {
                    let z = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                    lift_position_observation(&z, &(Mat2::identity() * rng.random_range(0.5..2.0))).unwrap()
                } else {
                    InfoMessage::uninformative()
                }
            }).collect();
            let cfg = ConsensusConfig { gamma_con: 1e-6, n_con_max: 100_000, ..Default::default() };
            let agg = aggregate_feature_moments(&[msgs], &g, &cfg);
            prop_assert!(agg.converged);
            let first = agg.u[0][0];
            for u in &agg.u[0] {
                prop_assert!((u.eta() - first.eta()).norm() < 1e-2 * n as f64);
                prop_assert!((u.lambda() - first.lambda()).norm() < 1e-2 * n as f64);
            }
        }
    }
}
