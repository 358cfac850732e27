//! Directed k-nearest-neighbour interaction graphs over particle positions.

use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::physics::ParticleState;

/// Neighbour count used by the model unless configured otherwise.
pub const DEFAULT_K: usize = 15;

/// Receiver-oriented edge list with `[Δx, Δy, dist]` features, where
/// `Δ = x_sender − x_receiver`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    n: usize,
    receivers: Arc<[usize]>,
    senders: Arc<[usize]>,
    edge_features: Tensor,
}

impl SpatialGraph {
    /// Graph over `positions` with explicit `(receiver, sender)` edges.
    pub fn from_edges(positions: &[[f64; 2]], edges: &[(usize, usize)]) -> Result<Self> {
        let n = positions.len();
        let mut feats = Vec::with_capacity(edges.len() * 3);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Index {
                    op: "SpatialGraph::from_edges",
                    index: i.max(j),
                    bound: n,
                });
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop on node {i}")));
            }
            let dx = positions[j][0] - positions[i][0];
            let dy = positions[j][1] - positions[i][1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist == 0.0 {
                return Err(Error::Coincident {
                    i: i.min(j),
                    j: i.max(j),
                });
            }
            feats.extend_from_slice(&[dx, dy, dist]);
        }
        Ok(Self {
            n,
            receivers: edges.iter().map(|e| e.0).collect(),
            senders: edges.iter().map(|e| e.1).collect(),
            edge_features: Tensor::matrix(edges.len(), 3, feats),
        })
    }

    /// `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            receivers: Arc::from(Vec::new()),
            senders: Arc::from(Vec::new()),
            edge_features: Tensor::zeros(&[0, 3]),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.receivers.len()
    }

    pub fn receivers(&self) -> &Arc<[usize]> {
        &self.receivers
    }

    pub fn senders(&self) -> &Arc<[usize]> {
        &self.senders
    }

    pub fn edge_features(&self) -> &Tensor {
        &self.edge_features
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.receivers.iter().copied().zip(self.senders.iter().copied())
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.receivers.iter().filter(|&&r| r == i).count()
    }
}

/// Each node receives edges from its `min(k, n − 1)` nearest neighbours;
/// equal distances are broken by the smaller sender index.
pub fn knn_graph(state: &ParticleState, k: usize) -> Result<SpatialGraph> {
    let positions: Vec<[f64; 2]> = (0..state.n()).map(|i| state.position(i)).collect();
    knn_from_positions(&positions, k)
}

pub fn knn_from_positions(positions: &[[f64; 2]], k: usize) -> Result<SpatialGraph> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::invalid(format!("k-NN graph needs n ≥ 2, got {n}")));
    }
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let k = k.min(n - 1);
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let dx = positions[j][0] - positions[i][0];
            let dy = positions[j][1] - positions[i][1];
            let d2 = dx * dx + dy * dy;
            if !d2.is_finite() {
                return Err(Error::NonFinite(format!("position of particle {j}")));
            }
            cand.push((d2, j));
        }
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_key);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_key);
        edges.extend(cand.iter().map(|&(_, j)| (i, j)));
    }
    SpatialGraph::from_edges(positions, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{sample_initial, trajectory_rng, SystemKind, SystemSpec};
    use proptest::prelude::*;

    fn state(points: &[[f64; 2]]) -> ParticleState {
        let f = points
            .iter()
            .flat_map(|p| [1.0, p[0], p[1], 0.0, 0.0])
            .collect();
        ParticleState::new(SystemKind::Gravity, points.len(), f).unwrap()
    }

    /// Full sort of every pairwise distance per node.
    fn brute_force(points: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
        let n = points.len();
        let mut out = Vec::new();
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = ((points[j][0] - points[i][0]).powi(2)
                        + (points[j][1] - points[i][1]).powi(2))
                    .sqrt();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(all.iter().take(k.min(n - 1)).map(|&(_, j)| (i, j)));
        }
        out
    }

    #[test]
    fn collinear_triple_is_complete() {
        let g = knn_graph(&state(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), 2).unwrap();
        assert_eq!(g.num_edges(), 6);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 1), (2, 0)]);
        // Edge (1 ← 0): Δ = x₀ − x₁.
        assert_eq!(&g.edge_features().data()[6..9], &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_prefer_smaller_sender() {
        let g = knn_graph(&state(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]), 1).unwrap();
        assert_eq!(g.edges().next(), Some((0, 1)));
    }

    #[test]
    fn fifteen_neighbours_for_twenty_particles() {
        let spec = SystemSpec::new(SystemKind::Gravity);
        let s = sample_initial(20, &spec, &mut trajectory_rng(3, 0)).unwrap();
        let g = knn_graph(&s, DEFAULT_K).unwrap();
        assert_eq!(g.num_edges(), 300);
        for i in 0..20 {
            assert_eq!(g.in_degree(i), 15);
        }
        for ((i, j), f) in g.edges().zip(g.edge_features().data().chunks(3)) {
            assert_ne!(i, j);
            assert!(f[2] > 0.0);
            assert!((f[2] * f[2] - (f[0] * f[0] + f[1] * f[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(knn_graph(&state(&[[0.0, 0.0]]), 3).is_err());
        assert!(knn_graph(&state(&[[0.0, 0.0], [1.0, 1.0]]), 0).is_err());
        assert!(matches!(
            knn_graph(&state(&[[0.5, 0.5], [0.5, 0.5]]), 1),
            Err(Error::Coincident { i: 0, j: 1 })
        ));
    }

    #[test]
    fn matches_brute_force_up_to_500() {
        let spec = SystemSpec::new(SystemKind::Gravity);
        for (seed, n, k) in [(1, 2, 15), (2, 7, 3), (3, 60, 15), (4, 500, 15)] {
            let s = sample_initial(n, &spec, &mut trajectory_rng(seed, 0)).unwrap();
            let pts: Vec<[f64; 2]> = (0..n).map(|i| s.position(i)).collect();
            let g = knn_graph(&s, k).unwrap();
            assert_eq!(g.edges().collect::<Vec<_>>(), brute_force(&pts, k));
        }
    }

    proptest! {
        #[test]
        fn translation_invariant(
            pts in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..25),
            shift in (-50.0f64..50.0, -50.0f64..50.0),
            k in 1usize..20,
        ) {
            let a: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            // Shift by a dyadic amount so coordinate differences stay exact.
            let s = [(shift.0 * 64.0).round() / 64.0, (shift.1 * 64.0).round() / 64.0];
            let a: Vec<[f64; 2]> = a.iter().map(|p| [(p[0] * 64.0).round() / 64.0, (p[1] * 64.0).round() / 64.0]).collect();
            let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + s[0], p[1] + s[1]]).collect();
            let ga = knn_from_positions(&a, k);
            let gb = knn_from_positions(&b, k);
            match (ga, gb) {
                (Ok(ga), Ok(gb)) => {
                    prop_assert_eq!(ga.edges().collect::<Vec<_>>(), gb.edges().collect::<Vec<_>>());
                    prop_assert_eq!(ga.edge_features(), gb.edge_features());
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "only one of the graphs failed"),
            }
        }

        #[test]
        fn distance_rotation_invariant(
            pts in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..20),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let a: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let (s, c) = angle.sin_cos();
            let b: Vec<[f64; 2]> = a.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            // Complete graphs so neighbour selection cannot flip on near-ties.
            if let (Ok(ga), Ok(gb)) = (knn_from_positions(&a, a.len()), knn_from_positions(&b, b.len())) {
                let keyed = |g: &SpatialGraph| {
                    let mut v: Vec<((usize, usize), f64)> = g
                        .edges()
                        .zip(g.edge_features().data().chunks(3).map(|f| f[2]))
                        .collect();
                    v.sort_by_key(|e| e.0);
                    v
                };
                for (x, y) in keyed(&ga).iter().zip(&keyed(&gb)) {
                    prop_assert_eq!(x.0, y.0);
                    prop_assert!((x.1 - y.1).abs() < 1e-9);
                }
            }
        }
    }
}
