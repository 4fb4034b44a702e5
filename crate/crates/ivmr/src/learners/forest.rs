//! Bagged regression / probability forest.
//!
//! Probability estimation grows the same regression trees on 0/1 targets;
//! a leaf's value is then its class frequency and the forest prediction is
//! the average over trees. Trees fit in parallel on per-tree seed streams,
//! so the model is identical for a given `(data, seed)` pair regardless of
//! thread count.

use rand::Rng;

use super::tree::{mean_leaf, Tree, TreeParams};
use super::ForestParams;
use crate::numerics::child_rng;
use crate::par;

#[derive(Debug, Clone)]
pub struct ForestModel {
    trees: Vec<Tree>,
}

impl ForestModel {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], params: &ForestParams, seed: u64) -> Self {
        let n = features.len();
        let q = features[0].len();
        let mtry = params
            .mtry
            .unwrap_or_else(|| (q as f64).sqrt().ceil() as usize)
            .clamp(1, q);
        let tree_params = TreeParams {
            mtry,
            min_leaf: params.min_leaf,
            max_depth: None,
        };
        let trees = par::map_indices(params.n_trees, |t| {
            let mut rng = child_rng(seed, t as u64);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            Tree::fit(
                features,
                targets,
                rows,
                tree_params,
                &mut rng,
                &mean_leaf(targets),
            )
        });
        ForestModel { trees }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}
