//! Regression tree used by the forest and boosting learners.
//!
//! Splits minimize within-node squared error over candidate features drawn
//! without replacement per node; thresholds are midpoints of consecutive
//! distinct sorted values. Leaf values come from a caller-supplied
//! aggregator so boosting can apply its per-leaf Newton step.

use rand::Rng;

use crate::numerics::StreamRng;

#[derive(Debug, Clone)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

struct Builder<'a> {
    features: &'a [Vec<f64>],
    targets: &'a [f64],
    params: TreeParams,
    nodes: Vec<Node>,
}

impl Tree {
    /// Grow a tree on the given sample rows (duplicates allowed, as from a
    /// bootstrap). `leaf_value` maps the rows of a leaf to its prediction.
    pub fn fit<F>(
        features: &[Vec<f64>],
        targets: &[f64],
        rows: Vec<usize>,
        params: TreeParams,
        rng: &mut StreamRng,
        leaf_value: &F,
    ) -> Tree
    where
        F: Fn(&[usize]) -> f64,
    {
        let mut builder = Builder {
            features,
            targets,
            params,
            nodes: Vec::new(),
        };
        builder.grow(rows, 0, rng, leaf_value);
        Tree {
            nodes: builder.nodes,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    #[cfg(test)]
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<'a> Builder<'a> {
    fn grow<F>(
        &mut self,
        rows: Vec<usize>,
        depth: usize,
        rng: &mut StreamRng,
        leaf_value: &F,
    ) -> u32
    where
        F: Fn(&[usize]) -> f64,
    {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });

        let depth_done = self
            .params
            .max_depth
            .map(|d| depth >= d)
            .unwrap_or(false);
        let best = if depth_done || rows.len() < 2 * self.params.min_leaf {
            None
        } else {
            self.best_split(&rows, rng)
        };

        match best {
            Some(split) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&r| self.features[r][split.feature] <= split.threshold);
                let left = self.grow(left_rows, depth + 1, rng, leaf_value);
                let right = self.grow(right_rows, depth + 1, rng, leaf_value);
                self.nodes[id as usize] = Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[id as usize] = Node::Leaf {
                    value: leaf_value(&rows),
                };
            }
        }
        id
    }

    fn best_split(&self, rows: &[usize], rng: &mut StreamRng) -> Option<BestSplit> {
        let q = self.features[0].len();
        let mtry = self.params.mtry.clamp(1, q);
        // Partial Fisher-Yates over the feature indices.
        let mut candidates: Vec<usize> = (0..q).collect();
        for i in 0..mtry {
            let j = rng.gen_range(i..q);
            candidates.swap(i, j);
        }

        let total_sum: f64 = rows.iter().map(|&r| self.targets[r]).sum();
        let n = rows.len() as f64;
        let min_leaf = self.params.min_leaf;

        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = Vec::with_capacity(rows.len());
        for &feature in &candidates[..mtry] {
            order.clear();
            order.extend_from_slice(rows);
            order.sort_unstable_by(|&a, &b| {
                self.features[a][feature]
                    .partial_cmp(&self.features[b][feature])
                    .unwrap()
            });

            let mut left_sum = 0.0;
            for (k, &r) in order.iter().enumerate().take(order.len() - 1) {
                left_sum += self.targets[r];
                let n_left = k + 1;
                let n_right = order.len() - n_left;
                let v = self.features[r][feature];
                let next = self.features[order[k + 1]][feature];
                if next <= v {
                    continue; // not a boundary between distinct values
                }
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let right_sum = total_sum - left_sum;
                // Variance reduction up to constants: maximize
                // SL^2/nL + SR^2/nR - S^2/n.
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / n_right as f64
                    - total_sum * total_sum / n;
                if gain > best.as_ref().map_or(1e-12, |b| b.gain) {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (v + next),
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// Mean leaf aggregator for plain regression trees.
pub fn mean_leaf<'a>(targets: &'a [f64]) -> impl Fn(&[usize]) -> f64 + 'a {
    move |rows: &[usize]| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|&r| targets[r]).sum::<f64>() / rows.len() as f64
        }
    }
}
