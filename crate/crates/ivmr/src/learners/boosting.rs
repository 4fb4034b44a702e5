//! Stagewise gradient boosting with shallow regression trees.
//!
//! Stages fit depth-limited trees to the negative gradient (residuals for
//! squared error, `y - p` for logistic loss) on a per-stage row subsample.
//! Logistic leaves take a single Newton step, `sum(grad) / sum(p (1 - p))`.
//! The stage count is selected on an internal 20% validation split with a
//! fixed early-stopping patience; trees past the best stage are dropped.

use rand::Rng;

use super::tree::{Tree, TreeParams};
use super::{BoostParams, Family};
use crate::numerics::{expit, rng_from_seed};

#[derive(Debug, Clone)]
pub struct BoostModel {
    base: f64,
    trees: Vec<Tree>,
    shrinkage: f64,
    family: Family,
    pub val_loss: f64,
}

const LOGIT_CLAMP: f64 = 1e-5;
const HESSIAN_FLOOR: f64 = 1e-6;

fn base_score(family: Family, mean: f64) -> f64 {
    match family {
        Family::Continuous => mean,
        Family::Binary => {
            let p = mean.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            (p / (1.0 - p)).ln()
        }
    }
}

impl BoostModel {
    pub fn fit(
        features: &[Vec<f64>],
        targets: &[f64],
        family: Family,
        params: &BoostParams,
        seed: u64,
    ) -> Self {
        let n = features.len();
        let mut rng = rng_from_seed(seed);

        // Internal train/validation split for stage selection.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let n_val = ((n as f64 * params.val_fraction) as usize).clamp(1, n.saturating_sub(1));
        let (val_rows, fit_rows) = perm.split_at(n_val);

        let mean_fit: f64 =
            fit_rows.iter().map(|&r| targets[r]).sum::<f64>() / fit_rows.len() as f64;
        let base = base_score(family, mean_fit);

        let mut f: Vec<f64> = vec![base; n];
        let mut grad = vec![0.0; n];
        let mut trees: Vec<Tree> = Vec::new();
        let mut best_loss = val_loss(&f, targets, val_rows, family);
        let mut best_stage = 0usize; // number of trees kept
        let tree_params = TreeParams {
            mtry: features[0].len(),
            min_leaf: params.min_leaf,
            max_depth: Some(params.depth),
        };

        for stage in 0..params.n_trees {
            // Negative gradient on the fitting half.
            for &r in fit_rows {
                grad[r] = match family {
                    Family::Continuous => targets[r] - f[r],
                    Family::Binary => targets[r] - expit(f[r]),
                };
            }
            // Row subsample without replacement.
            let mut pool: Vec<usize> = fit_rows.to_vec();
            let keep = ((pool.len() as f64 * params.subsample) as usize).max(2);
            for i in 0..keep {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(keep);

            let leaf = |rows: &[usize]| -> f64 {
                if rows.is_empty() {
                    return 0.0;
                }
                match family {
                    Family::Continuous => {
                        rows.iter().map(|&r| grad[r]).sum::<f64>() / rows.len() as f64
                    }
                    Family::Binary => {
                        let g: f64 = rows.iter().map(|&r| grad[r]).sum();
                        let h: f64 = rows
                            .iter()
                            .map(|&r| {
                                let p = expit(f[r]);
                                p * (1.0 - p)
                            })
                            .sum();
                        g / h.max(HESSIAN_FLOOR)
                    }
                }
            };
            let tree = Tree::fit(features, &grad, pool, tree_params, &mut rng, &leaf);
            for (i, fi) in f.iter_mut().enumerate() {
                *fi += params.shrinkage * tree.predict(&features[i]);
            }
            trees.push(tree);

            let loss = val_loss(&f, targets, val_rows, family);
            if loss < best_loss {
                best_loss = loss;
                best_stage = stage + 1;
            } else if stage + 1 - best_stage >= params.patience {
                break;
            }
        }
        trees.truncate(best_stage);
        BoostModel {
            base,
            trees,
            shrinkage: params.shrinkage,
            family,
            val_loss: best_loss,
        }
    }

    pub fn raw_score(&self, x: &[f64]) -> f64 {
        let mut f = self.base;
        for t in &self.trees {
            f += self.shrinkage * t.predict(x);
        }
        f
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Continuous => self.raw_score(x),
            Family::Binary => expit(self.raw_score(x)),
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

fn val_loss(f: &[f64], targets: &[f64], rows: &[usize], family: Family) -> f64 {
    let mut loss = 0.0;
    for &r in rows {
        match family {
            Family::Continuous => {
                let e = targets[r] - f[r];
                loss += e * e;
            }
            Family::Binary => {
                let p = expit(f[r]).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                loss -= 2.0 * (targets[r] * p.ln() + (1.0 - targets[r]) * (1.0 - p).ln());
            }
        }
    }
    loss / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn smooth_data(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let noise: f64 = rng.gen_range(-0.1..0.1);
            xs.push(vec![a, b]);
            ys.push((2.0 * a).sin() + b * b + noise);
        }
        (xs, ys)
    }

    #[test]
    fn zero_stages_gives_base_score() {
        let (xs, ys) = smooth_data(41, 100);
        let mut params = BoostParams::default();
        params.n_trees = 0;
        let model = BoostModel::fit(&xs, &ys, Family::Continuous, &params, 1);
        assert_eq!(model.n_trees(), 0);
        assert_eq!(model.predict(&xs[0]), model.predict(&xs[1]));
    }

    #[test]
    fn beats_intercept_only_on_smooth_target() {
        let (train_x, train_y) = smooth_data(42, 1000);
        let (test_x, test_y) = smooth_data(43, 1000);
        let model = BoostModel::fit(&train_x, &train_y, Family::Continuous, &BoostParams::default(), 2);
        let mean: f64 = train_y.iter().sum::<f64>() / train_y.len() as f64;
        let mse_model: f64 = test_x
            .iter()
            .zip(&test_y)
            .map(|(x, &y)| (model.predict(x) - y).powi(2))
            .sum::<f64>()
            / test_y.len() as f64;
        let mse_mean: f64 =
            test_y.iter().map(|&y| (mean - y).powi(2)).sum::<f64>() / test_y.len() as f64;
        assert!(
            mse_model < 0.5 * mse_mean,
            "model {mse_model} vs intercept {mse_mean}"
        );
    }

    #[test]
    fn seed_determinism() {
        let (xs, ys) = smooth_data(44, 300);
        let a = BoostModel::fit(&xs, &ys, Family::Continuous, &BoostParams::default(), 5);
        let b = BoostModel::fit(&xs, &ys, Family::Continuous, &BoostParams::default(), 5);
        for x in xs.iter().take(10) {
            assert_eq!(a.predict(x).to_bits(), b.predict(x).to_bits());
        }
    }
}
