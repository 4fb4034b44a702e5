//! Selective machine learning: enumerate candidate learner tuples, score
//! them with cross-validated minimax pseudo-risks, select and estimate.
//!
//! A learner tuple `(t1, ..., t5)` indexes one candidate per nuisance role
//! `(pi, mu, delta, tau, rho)`. Over `S` 50/50 sample splits, each tuple's
//! influence-function mean on the validation half is cached. Writing
//! `m_s(t)` for that mean, the pseudo-risk components for the robustness
//! index sets `v1 = {delta, tau, rho}`, `v2 = {mu, rho}`, `v3 = {pi, tau}`
//! are
//!
//! ```text
//! Lambda_dagger_k(t)  = max over replacements c of the v_k coordinates:
//!                       (1/S) sum_s [m_s(t) - m_s(t with v_k = c)]^2
//! Lambda_ddagger_k(t) = max over ordered pairs (c, c'):
//!                       (1/S) sum_s [m_s(t:v_k=c) - m_s(t:v_k=c')]^2
//! ```
//!
//! with `R_dagger = max_k Lambda_dagger_k` and `R_ddagger = sum_k
//! Lambda_ddagger_k`. The square sits inside the split average. Selection
//! minimizes the chosen risk, breaking ties by the lexicographically
//! smallest tuple; the estimate is the split-averaged validation mean at
//! the selected tuple.
//!
//! Candidate models are fit once per distinct dependency combination and
//! shared across tuples: `delta` candidates once per `(pi, mu)` candidate
//! pair, `tau` candidates once per `delta` kind, and `rho` candidates once
//! per `(mu, delta-kind)` pair. The `delta` fit consumed by the `tau` and
//! `rho` regressions is the one built on the first `(pi, mu)` pair.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{IvmrError, Result};
use crate::influence::{phi_eff_at, NuisanceValues, TrimPolicy, XFn, ZxFn};
use crate::learners::{
    delta_pseudo_outcomes, fit_delta_role, fit_mu_role, fit_pi_role, fit_rho_role, fit_tau_role,
    predict_x, predict_zx, FittedLearner, LearnerKind, LearnerParams, TrainArrays,
};
use crate::numerics::{child_rng, child_seed, kahan_mean, mean_and_sd};
use crate::par;
use crate::report::{Diagnostics, EstimateReport, EstimatorId};

/// Nuisance-role index sets (0-based roles: 0 pi, 1 mu, 2 delta, 3 tau,
/// 4 rho) whose joint perturbation leaves the influence-function mean
/// unchanged when the complementary roles are consistent.
pub const UPSILON_SETS: [&[usize]; 3] = [&[2, 3, 4], &[1, 4], &[0, 3]];

/// Complement of `UPSILON_SETS[k]` within `{0, .., 4}`.
pub fn upsilon_complement(k: usize) -> Vec<usize> {
    (0..5).filter(|j| !UPSILON_SETS[k].contains(j)).collect()
}

/// One candidate index per nuisance role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LearnerTuple(pub [usize; 5]);

impl std::fmt::Display for LearnerTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d, e] = self.0;
        write!(f, "({a},{b},{c},{d},{e})")
    }
}

/// Candidate learner for a role taking covariates only.
#[derive(Clone)]
pub enum CandidateX {
    Learner(LearnerKind),
    /// A fixed, pre-specified function; never trained.
    Fixed(XFn),
}

/// Candidate learner for a role taking `(z, x)`.
#[derive(Clone)]
pub enum CandidateZx {
    Learner(LearnerKind),
    Fixed(ZxFn),
}

impl std::fmt::Debug for CandidateX {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateX::Learner(k) => write!(f, "Learner({})", k.as_str()),
            CandidateX::Fixed(_) => write!(f, "Fixed"),
        }
    }
}

impl std::fmt::Debug for CandidateZx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateZx::Learner(k) => write!(f, "Learner({})", k.as_str()),
            CandidateZx::Fixed(_) => write!(f, "Fixed"),
        }
    }
}

/// Per-role candidate lists.
#[derive(Debug, Clone)]
pub struct CandidateLists {
    pub pi: Vec<CandidateX>,
    pub mu: Vec<CandidateZx>,
    pub delta: Vec<CandidateX>,
    pub tau: Vec<CandidateZx>,
    pub rho: Vec<CandidateX>,
}

impl CandidateLists {
    /// The same learner kinds for every role.
    pub fn uniform_kinds(kinds: &[LearnerKind]) -> Self {
        CandidateLists {
            pi: kinds.iter().map(|&k| CandidateX::Learner(k)).collect(),
            mu: kinds.iter().map(|&k| CandidateZx::Learner(k)).collect(),
            delta: kinds.iter().map(|&k| CandidateX::Learner(k)).collect(),
            tau: kinds.iter().map(|&k| CandidateZx::Learner(k)).collect(),
            rho: kinds.iter().map(|&k| CandidateX::Learner(k)).collect(),
        }
    }

    pub fn r(&self) -> [usize; 5] {
        [
            self.pi.len(),
            self.mu.len(),
            self.delta.len(),
            self.tau.len(),
            self.rho.len(),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SmlConfig {
    /// Number of sample splits `S`.
    pub splits: usize,
    pub seed: u64,
    /// Enumeration guard: product of candidate-list lengths.
    pub tuple_cap: usize,
}

impl Default for SmlConfig {
    fn default() -> Self {
        SmlConfig {
            splits: 2,
            seed: 0,
            tuple_cap: 1024,
        }
    }
}

/// Which pseudo-risk drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskCriterion {
    Dagger,
    Ddagger,
}

// ---------------------------------------------------------------------------
// Split cache

/// Cached validation values and means of the influence function for every
/// tuple and split.
#[derive(Debug, Clone)]
pub struct SplitCache {
    r: [usize; 5],
    splits: usize,
    /// `[split][flat tuple]` validation mean.
    means: Vec<Vec<f64>>,
    /// `[split][flat tuple]` validation values.
    values: Vec<Vec<Vec<f64>>>,
    /// Learner fits performed per split (fixed candidates cost none).
    pub fit_counts: Vec<usize>,
    pub winsorized: u64,
}

impl SplitCache {
    pub fn r(&self) -> [usize; 5] {
        self.r
    }

    pub fn splits(&self) -> usize {
        self.splits
    }

    pub fn tuple_count(&self) -> usize {
        self.r.iter().product()
    }

    #[inline]
    pub fn flat(&self, t: &LearnerTuple) -> usize {
        let [r1, r2, r3, r4, r5] = self.r;
        debug_assert!(
            t.0[0] < r1 && t.0[1] < r2 && t.0[2] < r3 && t.0[3] < r4 && t.0[4] < r5
        );
        let _ = r1;
        (((t.0[0] * r2 + t.0[1]) * r3 + t.0[2]) * r4 + t.0[3]) * r5 + t.0[4]
    }

    pub fn tuple_at(&self, flat: usize) -> LearnerTuple {
        let [_, r2, r3, r4, r5] = self.r;
        let t5 = flat % r5;
        let rest = flat / r5;
        let t4 = rest % r4;
        let rest = rest / r4;
        let t3 = rest % r3;
        let rest = rest / r3;
        let t2 = rest % r2;
        let t1 = rest / r2;
        LearnerTuple([t1, t2, t3, t4, t5])
    }

    /// Validation mean of `phi_eff` for a tuple on one split.
    pub fn mean(&self, split: usize, t: &LearnerTuple) -> f64 {
        self.means[split][self.flat(t)]
    }

    pub fn validation_values(&self, split: usize, t: &LearnerTuple) -> &[f64] {
        &self.values[split][self.flat(t)]
    }

    /// Build a cache directly from per-split means; value vectors are left
    /// empty. Intended for tests and diagnostics of the risk computations.
    pub fn from_means(r: [usize; 5], means: Vec<Vec<f64>>) -> Self {
        let splits = means.len();
        let tuple_count: usize = r.iter().product();
        for m in &means {
            assert_eq!(m.len(), tuple_count);
        }
        SplitCache {
            r,
            splits,
            values: vec![vec![Vec::new(); tuple_count]; splits],
            means,
            fit_counts: vec![0; splits],
            winsorized: 0,
        }
    }
}

enum XPredictor {
    Model(FittedLearner),
    Fixed(XFn),
}

impl XPredictor {
    fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        match self {
            XPredictor::Model(m) => predict_x(m, rows),
            XPredictor::Fixed(f) => rows.iter().map(|x| f(x)).collect(),
        }
    }
}

enum ZxPredictor {
    Model(FittedLearner),
    Fixed(ZxFn),
}

impl ZxPredictor {
    fn predict_rows_at(&self, rows: &[Vec<f64>], z: u8) -> Vec<f64> {
        match self {
            ZxPredictor::Model(m) => predict_zx(m, rows, f64::from(z)),
            ZxPredictor::Fixed(f) => rows.iter().map(|x| f(z, x)).collect(),
        }
    }

    fn predict_rows_obs(&self, rows: &[Vec<f64>], z: &[u8]) -> Vec<f64> {
        match self {
            ZxPredictor::Model(m) => rows
                .iter()
                .zip(z)
                .map(|(x, &zi)| {
                    let mut row = Vec::with_capacity(1 + x.len());
                    row.push(f64::from(zi));
                    row.extend_from_slice(x);
                    m.predict(&row)
                })
                .collect(),
            ZxPredictor::Fixed(f) => rows.iter().zip(z).map(|(x, &zi)| f(zi, x)).collect(),
        }
    }
}

/// Fit every candidate model on the training half of each split and cache
/// all tuples' validation values of the influence function.
pub fn build_cache(
    dataset: &Dataset,
    candidates: &CandidateLists,
    config: &SmlConfig,
    trim: &TrimPolicy,
    params: &LearnerParams,
) -> Result<SplitCache> {
    dataset.require_both_arms()?;
    let r = candidates.r();
    if r.iter().any(|&x| x == 0) {
        return Err(IvmrError::Invalid("empty candidate list".into()));
    }
    let tuple_count: usize = r.iter().product();
    if tuple_count > config.tuple_cap {
        return Err(IvmrError::TupleCapExceeded {
            count: tuple_count,
            cap: config.tuple_cap,
        });
    }
    if config.splits == 0 {
        return Err(IvmrError::Invalid("splits must be at least 1".into()));
    }

    let n = dataset.n();
    let [r1, r2, r3, r4, r5] = r;
    let mut means = Vec::with_capacity(config.splits);
    let mut values = Vec::with_capacity(config.splits);
    let mut fit_counts = Vec::with_capacity(config.splits);
    let mut winsorized_total = 0u64;

    for s in 0..config.splits {
        let split_seed = child_seed(config.seed, s as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = child_rng(split_seed, 0);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let (train_idx, val_idx) = perm.split_at(n / 2);
        let train = dataset.subset(train_idx.to_vec());
        let arrays = TrainArrays::from_view(&train);

        let val_x: Vec<Vec<f64>> = val_idx.iter().map(|&i| dataset.x_row(i).to_vec()).collect();
        let val_y: Vec<f64> = val_idx.iter().map(|&i| dataset.y()[i]).collect();
        let val_a: Vec<u8> = val_idx.iter().map(|&i| dataset.a()[i]).collect();
        let val_z: Vec<u8> = val_idx.iter().map(|&i| dataset.z()[i]).collect();
        let n_val = val_idx.len();

        let mut fits = 0usize;

        // pi candidates.
        let pi_models: Vec<XPredictor> = par::map_indices(r1, |t1| match &candidates.pi[t1] {
            CandidateX::Learner(kind) => XPredictor::Model(fit_pi_role(
                *kind,
                &arrays,
                params,
                child_seed(split_seed, 100 + t1 as u64),
            )),
            CandidateX::Fixed(f) => XPredictor::Fixed(f.clone()),
        });
        fits += candidates
            .pi
            .iter()
            .filter(|c| matches!(c, CandidateX::Learner(_)))
            .count();
        let pi1_train: Vec<Vec<f64>> =
            pi_models.iter().map(|m| m.predict_rows(&arrays.x)).collect();
        let pi1_val: Vec<Vec<f64>> = pi_models.iter().map(|m| m.predict_rows(&val_x)).collect();

        // mu candidates.
        let mu_models: Vec<ZxPredictor> = par::map_indices(r2, |t2| match &candidates.mu[t2] {
            CandidateZx::Learner(kind) => ZxPredictor::Model(fit_mu_role(
                *kind,
                &arrays,
                params,
                child_seed(split_seed, 200 + t2 as u64),
            )),
            CandidateZx::Fixed(f) => ZxPredictor::Fixed(f.clone()),
        });
        fits += candidates
            .mu
            .iter()
            .filter(|c| matches!(c, CandidateZx::Learner(_)))
            .count();
        let mu1_train: Vec<Vec<f64>> = mu_models
            .iter()
            .map(|m| m.predict_rows_at(&arrays.x, 1))
            .collect();
        let mu0_train: Vec<Vec<f64>> = mu_models
            .iter()
            .map(|m| m.predict_rows_at(&arrays.x, 0))
            .collect();
        let mu_obs_train: Vec<Vec<f64>> = (0..r2)
            .map(|t2| {
                (0..arrays.n())
                    .map(|i| {
                        if arrays.z[i] == 1 {
                            mu1_train[t2][i]
                        } else {
                            mu0_train[t2][i]
                        }
                    })
                    .collect()
            })
            .collect();
        let mu1_val: Vec<Vec<f64>> = mu_models.iter().map(|m| m.predict_rows_at(&val_x, 1)).collect();
        let mu0_val: Vec<Vec<f64>> = mu_models.iter().map(|m| m.predict_rows_at(&val_x, 0)).collect();

        // delta candidates: one pseudo-outcome vector per (pi, mu) pair,
        // one fit per (pair, kind). The first pair's fits double as the
        // reference deltas consumed by the tau and rho regressions.
        let any_delta_learner = candidates
            .delta
            .iter()
            .any(|c| matches!(c, CandidateX::Learner(_)));
        let pseudo_by_pair: Vec<(Vec<f64>, u64)> = par::map_indices(r1 * r2, |pair| {
            let t1 = pair / r2;
            let t2 = pair % r2;
            if any_delta_learner {
                delta_pseudo_outcomes(
                    &arrays,
                    &pi1_train[t1],
                    &mu1_train[t2],
                    &mu0_train[t2],
                    trim,
                )
            } else {
                (Vec::new(), 0)
            }
        });
        winsorized_total += pseudo_by_pair.iter().map(|p| p.1).sum::<u64>();

        struct DeltaFit {
            val: Vec<f64>,
            train: Option<Vec<f64>>,
        }
        let delta_fits: Vec<DeltaFit> = par::map_indices(r1 * r2 * r3, |idx| {
            let t3 = idx % r3;
            let pair = idx / r3;
            let want_train = pair == 0;
            match &candidates.delta[t3] {
                CandidateX::Learner(kind) => {
                    let model = fit_delta_role(
                        *kind,
                        &arrays,
                        &pseudo_by_pair[pair].0,
                        params,
                        child_seed(split_seed, 300 + idx as u64),
                    );
                    DeltaFit {
                        val: predict_x(&model, &val_x),
                        train: want_train.then(|| predict_x(&model, &arrays.x)),
                    }
                }
                CandidateX::Fixed(f) => DeltaFit {
                    val: val_x.iter().map(|x| f(x)).collect(),
                    train: want_train.then(|| arrays.x.iter().map(|x| f(x)).collect()),
                },
            }
        });
        fits += r1
            * r2
            * candidates
                .delta
                .iter()
                .filter(|c| matches!(c, CandidateX::Learner(_)))
                .count();
        let delta_ref_train: Vec<&Vec<f64>> = (0..r3)
            .map(|t3| delta_fits[t3].train.as_ref().expect("first pair keeps train"))
            .collect();

        // tau candidates: one fit per (delta kind, tau kind).
        let tau_fits: Vec<Vec<f64>> = par::map_indices(r3 * r4, |idx| {
            let t3 = idx / r4;
            let t4 = idx % r4;
            match &candidates.tau[t4] {
                CandidateZx::Learner(kind) => {
                    let model = fit_tau_role(
                        *kind,
                        &arrays,
                        delta_ref_train[t3],
                        params,
                        child_seed(split_seed, 400 + idx as u64),
                    );
                    ZxPredictor::Model(model).predict_rows_obs(&val_x, &val_z)
                }
                CandidateZx::Fixed(f) => val_x
                    .iter()
                    .zip(&val_z)
                    .map(|(x, &z)| f(z, x))
                    .collect(),
            }
        });
        fits += r3
            * candidates
                .tau
                .iter()
                .filter(|c| matches!(c, CandidateZx::Learner(_)))
                .count();

        // rho candidates: one fit per (mu kind, delta kind, rho kind).
        let rho_fits: Vec<Vec<f64>> = par::map_indices(r2 * r3 * r5, |idx| {
            let t5 = idx % r5;
            let rest = idx / r5;
            let t3 = rest % r3;
            let t2 = rest / r3;
            match &candidates.rho[t5] {
                CandidateX::Learner(kind) => {
                    let model = fit_rho_role(
                        *kind,
                        &arrays,
                        &mu_obs_train[t2],
                        delta_ref_train[t3],
                        params,
                        child_seed(split_seed, 500 + idx as u64),
                    );
                    predict_x(&model, &val_x)
                }
                CandidateX::Fixed(f) => val_x.iter().map(|x| f(x)).collect(),
            }
        });
        fits += r2
            * r3
            * candidates
                .rho
                .iter()
                .filter(|c| matches!(c, CandidateX::Learner(_)))
                .count();

        // Assemble every tuple's validation values from the shared parts.
        let tuple_values: Vec<Vec<f64>> = par::map_indices(tuple_count, |flat| {
            let t5 = flat % r5;
            let rest = flat / r5;
            let t4 = rest % r4;
            let rest = rest / r4;
            let t3 = rest % r3;
            let rest = rest / r3;
            let t2 = rest % r2;
            let t1 = rest / r2;
            let delta_idx = (t1 * r2 + t2) * r3 + t3;
            let tau_idx = t3 * r4 + t4;
            let rho_idx = (t2 * r3 + t3) * r5 + t5;
            (0..n_val)
                .map(|j| {
                    let v = NuisanceValues {
                        pi1: pi1_val[t1][j],
                        mu1: mu1_val[t2][j],
                        mu0: mu0_val[t2][j],
                        delta: delta_fits[delta_idx].val[j],
                        tau: tau_fits[tau_idx][j],
                        rho: rho_fits[rho_idx][j],
                    };
                    phi_eff_at(val_y[j], val_a[j], val_z[j], &v, trim)
                })
                .collect()
        });
        let tuple_means: Vec<f64> = tuple_values.iter().map(|v| kahan_mean(v)).collect();

        means.push(tuple_means);
        values.push(tuple_values);
        fit_counts.push(fits);
    }

    Ok(SplitCache {
        r,
        splits: config.splits,
        means,
        values,
        fit_counts,
        winsorized: winsorized_total,
    })
}

// ---------------------------------------------------------------------------
// Pseudo-risks

fn for_each_combo<F: FnMut(&[usize])>(dims: &[usize], mut f: F) {
    let mut combo = vec![0usize; dims.len()];
    loop {
        f(&combo);
        let mut pos = dims.len();
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            combo[pos] += 1;
            if combo[pos] < dims[pos] {
                break;
            }
            combo[pos] = 0;
        }
    }
}

/// Anchored minimax component: max over replacements of the `v_k`
/// coordinates of the split-averaged squared mean difference from `t`.
/// `k` is 1-based (1, 2 or 3).
pub fn lambda_dagger(t: &LearnerTuple, k: usize, cache: &SplitCache) -> f64 {
    assert!((1..=3).contains(&k));
    let set = UPSILON_SETS[k - 1];
    let dims: Vec<usize> = set.iter().map(|&j| cache.r[j]).collect();
    let mut best: f64 = 0.0;
    for_each_combo(&dims, |combo| {
        let mut alt = *t;
        for (pos, &j) in set.iter().enumerate() {
            alt.0[j] = combo[pos];
        }
        let mut acc = 0.0;
        for s in 0..cache.splits {
            let d = cache.mean(s, t) - cache.mean(s, &alt);
            acc += d * d;
        }
        best = best.max(acc / cache.splits as f64);
    });
    best
}

/// Pairwise mixed-minimax component: max over ordered pairs of `v_k`
/// replacements, holding `t`'s complementary coordinates fixed.
pub fn lambda_ddagger(t: &LearnerTuple, k: usize, cache: &SplitCache) -> f64 {
    assert!((1..=3).contains(&k));
    let set = UPSILON_SETS[k - 1];
    let dims: Vec<usize> = set.iter().map(|&j| cache.r[j]).collect();
    // Collect every replacement's per-split means once.
    let mut alts: Vec<Vec<f64>> = Vec::new();
    for_each_combo(&dims, |combo| {
        let mut alt = *t;
        for (pos, &j) in set.iter().enumerate() {
            alt.0[j] = combo[pos];
        }
        alts.push((0..cache.splits).map(|s| cache.mean(s, &alt)).collect());
    });
    let mut best: f64 = 0.0;
    for a in &alts {
        for b in &alts {
            let mut acc = 0.0;
            for s in 0..cache.splits {
                let d = a[s] - b[s];
                acc += d * d;
            }
            best = best.max(acc / cache.splits as f64);
        }
    }
    best
}

/// Risk components for one tuple.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RiskRow {
    pub tuple: LearnerTuple,
    pub lambda_dagger: [f64; 3],
    pub r_dagger: f64,
    pub lambda_ddagger: [f64; 3],
    pub r_ddagger: f64,
}

/// Pseudo-risk components for every enumerated tuple, in lexicographic
/// tuple order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PseudoRiskTable {
    pub rows: Vec<RiskRow>,
}

impl PseudoRiskTable {
    /// Index of the risk-minimizing row (ties: first, i.e. smallest tuple).
    pub fn select(&self, criterion: RiskCriterion) -> usize {
        let mut best = 0usize;
        for (i, row) in self.rows.iter().enumerate() {
            let (v, b) = match criterion {
                RiskCriterion::Dagger => (row.r_dagger, self.rows[best].r_dagger),
                RiskCriterion::Ddagger => (row.r_ddagger, self.rows[best].r_ddagger),
            };
            if v < b {
                best = i;
            }
        }
        best
    }
}

/// Compute the full pseudo-risk table from a cache.
pub fn risk_table(cache: &SplitCache) -> PseudoRiskTable {
    let rows = par::map_indices(cache.tuple_count(), |flat| {
        let tuple = cache.tuple_at(flat);
        let ld = [
            lambda_dagger(&tuple, 1, cache),
            lambda_dagger(&tuple, 2, cache),
            lambda_dagger(&tuple, 3, cache),
        ];
        let ldd = [
            lambda_ddagger(&tuple, 1, cache),
            lambda_ddagger(&tuple, 2, cache),
            lambda_ddagger(&tuple, 3, cache),
        ];
        RiskRow {
            tuple,
            lambda_dagger: ld,
            r_dagger: ld[0].max(ld[1]).max(ld[2]),
            lambda_ddagger: ldd,
            r_ddagger: ldd[0] + ldd[1] + ldd[2],
        }
    });
    PseudoRiskTable { rows }
}

/// Split-averaged estimate and standard error of one tuple from the cache.
pub fn estimate_from_cache(cache: &SplitCache, tuple: &LearnerTuple) -> (f64, f64) {
    let mut means = Vec::with_capacity(cache.splits);
    let mut ses = Vec::with_capacity(cache.splits);
    for s in 0..cache.splits {
        means.push(cache.mean(s, tuple));
        let vals = cache.validation_values(s, tuple);
        if vals.len() > 1 {
            let (_, sd) = mean_and_sd(vals);
            ses.push(sd / (vals.len() as f64).sqrt());
        }
    }
    let estimate = kahan_mean(&means);
    let se = if ses.is_empty() { f64::NAN } else { kahan_mean(&ses) };
    (estimate, se)
}

/// Selection output: the chosen tuple, its estimate report and the full
/// risk table.
#[derive(Debug, Clone)]
pub struct SmlSelection {
    pub selected: LearnerTuple,
    pub report: EstimateReport,
    pub table: PseudoRiskTable,
}

/// Build the cache, score every tuple, select the risk minimizer and
/// return its split-averaged estimate. The reported standard error carries
/// a post-selection caveat flag: it is the plug-in influence-function
/// standard error under the selected learners and ignores selection.
pub fn select_and_estimate(
    dataset: &Dataset,
    candidates: &CandidateLists,
    config: &SmlConfig,
    criterion: RiskCriterion,
    trim: &TrimPolicy,
    params: &LearnerParams,
) -> Result<SmlSelection> {
    let cache = build_cache(dataset, candidates, config, trim, params)?;
    Ok(select_from_cache(&cache, criterion, trim))
}

/// Selection and estimation on an already-built cache.
pub fn select_from_cache(
    cache: &SplitCache,
    criterion: RiskCriterion,
    trim: &TrimPolicy,
) -> SmlSelection {
    let table = risk_table(cache);
    let best = table.select(criterion);
    let selected = table.rows[best].tuple;
    let (estimate, se) = estimate_from_cache(cache, &selected);
    let id = match criterion {
        RiskCriterion::Dagger => EstimatorId::SmlDagger,
        RiskCriterion::Ddagger => EstimatorId::SmlDdagger,
    };
    let diagnostics = Diagnostics {
        converged: true,
        trim: trim.counts(),
        winsorized: cache.winsorized,
        post_selection: true,
        ..Diagnostics::default()
    };
    let report = EstimateReport::new(id, estimate, se).with_diagnostics(diagnostics);
    SmlSelection {
        selected,
        report,
        table,
    }
}
