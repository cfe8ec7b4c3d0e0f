//! Planted-partition graphs with cluster-correlated bag-of-words features.

use crate::error::{Error, Result};
use crate::graph::{Graph, LabeledDataset, Splits};
use crate::matrix::{DenseMatrix, SparseMatrix};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub clusters: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    /// Probability that an active word is drawn from the node's own cluster
    /// vocabulary rather than uniformly.
    pub feature_signal: f64,
    pub words_per_node: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 30,
            clusters: 2,
            p_in: 0.5,
            p_out: 0.05,
            dim: 16,
            feature_signal: 0.7,
            words_per_node: 4,
            seed: 0,
        }
    }
}

/// Generate a labeled planted-partition graph.
///
/// Node `i` belongs to cluster `i % clusters`. Each pair is linked with
/// probability `p_in` inside a cluster and `p_out` across. A node left
/// without neighbours is joined to one uniformly random other node, so
/// diffusion operators are always defined. Each cluster's nodes are split
/// 40/20/40 into train, validation and test.
pub fn planted_partition(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if cfg.clusters < 2 || cfg.nodes < cfg.clusters {
        return Err(Error::InvalidParameter(format!(
            "need nodes >= clusters >= 2, got {} nodes and {} clusters",
            cfg.nodes, cfg.clusters
        )));
    }
    if !(0.0 <= cfg.p_out && cfg.p_out <= cfg.p_in && cfg.p_in <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in {} and p_out {}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.dim < cfg.clusters {
        return Err(Error::InvalidParameter("feature dimension must be >= clusters".into()));
    }
    let n = cfg.nodes;
    let k = cfg.clusters;
    let mut rng = RngState::new(cfg.seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();

    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.bernoulli(p) {
                edges.push((i, j));
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    for i in 0..n {
        if degree[i] == 0 {
            let mut j = rng.index(n - 1);
            if j >= i {
                j += 1;
            }
            edges.push((i.min(j), i.max(j)));
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    let triplets = edges.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]).collect();
    let adjacency = SparseMatrix::from_triplets(n, n, triplets)?;

    let block = cfg.dim / k;
    let mut features = DenseMatrix::zeros(n, cfg.dim);
    for i in 0..n {
        for _ in 0..cfg.words_per_node {
            let word = if rng.bernoulli(cfg.feature_signal) {
                labels[i] * block + rng.index(block)
            } else {
                rng.index(cfg.dim)
            };
            features.set(i, word, 1.0);
        }
    }

    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        let m = members.len();
        let train = (m * 2).div_ceil(5).max(1);
        let val = (m / 5).min(m - train);
        splits.train.extend_from_slice(&members[..train]);
        splits.val.extend_from_slice(&members[train..train + val]);
        splits.test.extend_from_slice(&members[train + val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let graph = Graph::new(features, adjacency)?;
    LabeledDataset::new(format!("synth-{n}-{k}"), graph, labels, k, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::degree_vector;

    #[test]
    fn default_fixture_is_valid_and_connected() {
        let ds = planted_partition(&SynthConfig::default()).unwrap();
        assert_eq!(ds.graph.num_nodes(), 30);
        assert!(degree_vector(ds.graph.adjacency()).iter().all(|&d| d > 0.0));
        let total = ds.splits.train.len() + ds.splits.val.len() + ds.splits.test.len();
        assert_eq!(total, 30);
    }

    #[test]
    fn same_seed_same_graph() {
        let a = planted_partition(&SynthConfig::default()).unwrap();
        let b = planted_partition(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_parameters() {
        for cfg in [
            SynthConfig { clusters: 1, ..SynthConfig::default() },
            SynthConfig { p_out: 0.6, ..SynthConfig::default() },
            SynthConfig { nodes: 1, ..SynthConfig::default() },
        ] {
            assert!(planted_partition(&cfg).is_err());
        }
    }
}
