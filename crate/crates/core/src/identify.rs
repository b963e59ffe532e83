//! System identification on sufficient statistics: least squares, residual
//! scores, cluster identity estimation, and robust clustered identification
//! (RCSI).
//!
//! Nothing here touches raw trajectories. A system is represented by its
//! regression moments `(XX, XZ, ZZ, n)`, which are also what a Byzantine
//! system poisons.

use rayon::prelude::*;

use crate::aggregate::{aggregate, AggregateError, AggregationRule, GEOMEDIAN_MAX_ITER, GEOMEDIAN_TOL};
use crate::mat::{is_finite, split_theta, Mat, Vector};

pub const DEFAULT_RIDGE: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IdentifyError {
    #[error("covariates are singular (condition number {0:.3e})")]
    SingularCovariates(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid rcsi configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

/// Regression moments of one system's data.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub xx: Mat,
    pub xz: Mat,
    pub zz: Mat,
    pub n: usize,
}

impl SufficientStats {
    pub fn zeros(dx: usize, du: usize) -> Self {
        let d = dx + du;
        Self { xx: Mat::zeros(dx, dx), xz: Mat::zeros(dx, d), zz: Mat::zeros(d, d), n: 0 }
    }

    pub fn state_dim(&self) -> usize {
        self.xx.nrows()
    }

    /// `d′ = d_x + d_u`.
    pub fn regressor_dim(&self) -> usize {
        self.zz.nrows()
    }

    /// Add one transition `(z_t, x_{t+1})`.
    pub fn push(&mut self, x_next: &Vector, z: &Vector) {
        self.xx.ger(1.0, x_next, x_next, 1.0);
        self.xz.ger(1.0, x_next, z, 1.0);
        self.zz.ger(1.0, z, z, 1.0);
        self.n += 1;
    }

    pub fn accumulate(&mut self, other: &SufficientStats) {
        self.xx += &other.xx;
        self.xz += &other.xz;
        self.zz += &other.zz;
        self.n += other.n;
    }

    /// Multiply every moment by `c` (the count is left alone).
    pub fn scaled(&self, c: f64) -> Self {
        Self { xx: &self.xx * c, xz: &self.xz * c, zz: &self.zz * c, n: self.n }
    }
}

/// An estimated `Θ̂ = [Â B̂]` of shape `d_x × d′`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub theta: Mat,
}

impl ModelEstimate {
    pub fn new(theta: Mat) -> Self {
        Self { theta }
    }

    /// `(Â, B̂)`.
    pub fn split(&self) -> (Mat, Mat) {
        split_theta(&self.theta, self.theta.nrows())
    }
}

fn check_theta(stats: &SufficientStats, theta: &Mat) -> Result<(), IdentifyError> {
    if theta.shape() != stats.xz.shape() {
        return Err(IdentifyError::DimensionMismatch(format!(
            "model is {:?}, statistics expect {:?}",
            theta.shape(),
            stats.xz.shape()
        )));
    }
    Ok(())
}

/// `(ZZ + ridge·I)⁻¹` applied from the right to `XZ`.
fn regularized_solve(stats: &SufficientStats, ridge: f64) -> Result<Mat, IdentifyError> {
    let d = stats.regressor_dim();
    let gram = &stats.zz + Mat::identity(d, d) * ridge;
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(IdentifyError::SingularCovariates(condition));
    }
    let chol = gram.cholesky().ok_or(IdentifyError::SingularCovariates(condition))?;
    // Θ = XZ·G⁻¹  ⇔  Θᵀ = G⁻¹·XZᵀ (G symmetric)
    let theta = chol.solve(&stats.xz.transpose()).transpose();
    if !is_finite(&theta) {
        return Err(IdentifyError::SingularCovariates(condition));
    }
    Ok(theta)
}

/// Least squares `Θ̂ = XZ·(ZZ + ridge·I)⁻¹`.
pub fn ols_fit(stats: &SufficientStats, ridge: f64) -> Result<ModelEstimate, IdentifyError> {
    regularized_solve(stats, ridge).map(ModelEstimate::new)
}

/// `‖X − ΘZ‖_F² = tr(XX) − 2⟨Θ, XZ⟩ + ⟨Θ·ZZ, Θ⟩`.
pub fn residual_score(stats: &SufficientStats, theta: &ModelEstimate) -> Result<f64, IdentifyError> {
    check_theta(stats, &theta.theta)?;
    let t = &theta.theta;
    let cross = t.dot(&stats.xz);
    let quad = (t * &stats.zz).dot(t);
    Ok(stats.xx.trace() - 2.0 * cross + quad)
}

/// Index of the model with the smallest residual; ties go to the lowest index.
pub fn assign_cluster(stats: &SufficientStats, models: &[ModelEstimate]) -> Result<usize, IdentifyError> {
    if models.is_empty() {
        return Err(IdentifyError::InvalidConfig("no cluster models to choose from".into()));
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (j, m) in models.iter().enumerate() {
        let score = residual_score(stats, m)?;
        if score < best_score {
            best = j;
            best_score = score;
        }
    }
    Ok(best)
}

/// `G = (X − Θ̂Z)Zᵀ(ZZᵀ + ridge·I)⁻¹ = XZ(ZZ + ridge·I)⁻¹ − Θ̂(ZZ)(ZZ + ridge·I)⁻¹`.
/// With the ridge term dropped from the second product this is exactly
/// `ols_fit(stats) − Θ̂`, which is what is returned.
pub fn local_gradient(stats: &SufficientStats, theta: &ModelEstimate, ridge: f64) -> Result<Mat, IdentifyError> {
    check_theta(stats, &theta.theta)?;
    Ok(regularized_solve(stats, ridge)? - &theta.theta)
}

/// How the aggregation rule is sized for a given number of inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregatorSpec {
    Mean,
    /// Trim `ceil(fraction · M)` per side, capped so at least one value survives.
    Cwtm { trim_fraction: f64 },
    CwMed,
    GeoMedian { tol: f64, max_iter: usize },
    /// Discard `ceil(fraction · M)` values farthest from the median.
    MeaMed { f_fraction: f64 },
}

impl AggregatorSpec {
    pub fn geomedian() -> Self {
        Self::GeoMedian { tol: GEOMEDIAN_TOL, max_iter: GEOMEDIAN_MAX_ITER }
    }

    pub fn resolve(&self, count: usize) -> AggregationRule {
        let scaled = |fraction: f64| (fraction * count as f64 - 1e-9).ceil().max(0.0) as usize;
        match *self {
            Self::Mean => AggregationRule::Mean,
            Self::Cwtm { trim_fraction } => {
                AggregationRule::Cwtm { trim: scaled(trim_fraction).min(count.saturating_sub(1) / 2) }
            }
            Self::CwMed => AggregationRule::CwMed,
            Self::GeoMedian { tol, max_iter } => AggregationRule::GeoMedian { tol, max_iter },
            Self::MeaMed { f_fraction } => AggregationRule::MeaMed { f: scaled(f_fraction).min(count.saturating_sub(1)) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcsiConfig {
    pub n_clusters: usize,
    pub iterations: usize,
    /// Step size `η ∈ (0, 1]`; the honest contraction rate is `1 − η`.
    pub step: f64,
    pub aggregator: AggregatorSpec,
    pub ridge: f64,
}

impl RcsiConfig {
    pub fn validate(&self) -> Result<(), IdentifyError> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(IdentifyError::InvalidConfig(format!("step must lie in (0, 1], got {}", self.step)));
        }
        if self.iterations == 0 {
            return Err(IdentifyError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.n_clusters == 0 {
            return Err(IdentifyError::InvalidConfig("need at least one cluster".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(IdentifyError::InvalidConfig("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Iteration count `⌈log(Δ_min τ₁²) / log(1/(1−η))⌉` clamped to `[5, 50]`.
pub fn default_iterations(delta_min: f64, tau1: usize, step: f64) -> usize {
    let rate = 1.0 - step;
    if rate <= 0.0 {
        return 5;
    }
    let target = (delta_min * (tau1 * tau1) as f64).ln() / (1.0 / rate).ln();
    if !target.is_finite() {
        return 5;
    }
    (target.ceil().max(0.0) as usize).clamp(5, 50)
}

/// Per-system inputs of one RCSI call.
#[derive(Debug, Clone, Copy)]
pub struct RcsiInputs<'a> {
    /// Statistics each system transmits (possibly poisoned).
    pub stats: &'a [SufficientStats],
    /// Statistics each system uses privately to pick its cluster. Byzantine
    /// systems report a truthful identity, so this is their clean data.
    pub identity_stats: &'a [SufficientStats],
    pub adversary_mask: &'a [bool],
    /// Ground-truth cluster labels, when known, for misclassification counts.
    pub labels: Option<&'a [usize]>,
}

impl<'a> RcsiInputs<'a> {
    pub fn new(stats: &'a [SufficientStats], adversary_mask: &'a [bool]) -> Self {
        Self { stats, identity_stats: stats, adversary_mask, labels: None }
    }

    pub fn with_labels(mut self, labels: &'a [usize]) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_identity_stats(mut self, identity_stats: &'a [SufficientStats]) -> Self {
        self.identity_stats = identity_stats;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcsiOutcome {
    pub models: Vec<ModelEstimate>,
    pub cluster_models: Vec<ModelEstimate>,
    /// Cluster chosen by each system in the last iteration.
    pub assignments: Vec<usize>,
    /// Honest systems whose last assignment differs from their label.
    pub misclassified: usize,
    /// Cluster-iterations that had no members (their model was frozen).
    pub empty_clusters: usize,
}

/// Robust clustered system identification.
///
/// Each iteration every system picks the cluster model that best explains
/// its data, then every system `i` steps
/// `Θ̂⁽ⁱ⁾ ← Θ̂⁽ⁱ⁾ + η·F({G_ℓ(Θ̂⁽ⁱ⁾)}_{ℓ ∈ C_ĵ})` with `F` the configured
/// rule over the gradients of its cluster's members. Cluster models are
/// then refreshed as `F` over their members' updated models; a cluster
/// nobody picked keeps its previous model.
pub fn rcsi(
    inputs: &RcsiInputs<'_>,
    init_models: &[ModelEstimate],
    cluster_models: &[ModelEstimate],
    cfg: &RcsiConfig,
) -> Result<RcsiOutcome, IdentifyError> {
    cfg.validate()?;
    let m = inputs.stats.len();
    if init_models.len() != m || inputs.identity_stats.len() != m || inputs.adversary_mask.len() != m {
        return Err(IdentifyError::DimensionMismatch(format!(
            "{m} statistics, {} models, {} identity statistics, {} mask entries",
            init_models.len(),
            inputs.identity_stats.len(),
            inputs.adversary_mask.len()
        )));
    }
    if cluster_models.len() != cfg.n_clusters {
        return Err(IdentifyError::DimensionMismatch(format!(
            "{} cluster models for {} clusters",
            cluster_models.len(),
            cfg.n_clusters
        )));
    }
    if let Some(labels) = inputs.labels {
        if labels.len() != m {
            return Err(IdentifyError::DimensionMismatch(format!("{} labels for {m} systems", labels.len())));
        }
    }

    // G_ℓ(Θ̂) = OLS_ℓ − Θ̂, so the per-system fits are all that is needed.
    let fits: Vec<Mat> = inputs
        .stats
        .par_iter()
        .map(|s| regularized_solve(s, cfg.ridge))
        .collect::<Result<_, _>>()?;
    for (s, model) in inputs.stats.iter().zip(init_models) {
        check_theta(s, &model.theta)?;
    }

    let mut models: Vec<ModelEstimate> = init_models.to_vec();
    let mut clusters: Vec<ModelEstimate> = cluster_models.to_vec();
    let mut assignments = vec![0; m];
    let mut empty_clusters = 0;

    for _ in 0..cfg.iterations {
        assignments = inputs
            .identity_stats
            .par_iter()
            .map(|s| assign_cluster(s, &clusters))
            .collect::<Result<_, _>>()?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
        for (i, &j) in assignments.iter().enumerate() {
            members[j].push(i);
        }

        models = (0..m)
            .into_par_iter()
            .map(|i| {
                let group = &members[assignments[i]];
                let current = &models[i].theta;
                let grads: Vec<Mat> = group.iter().map(|&l| &fits[l] - current).collect();
                let rule = cfg.aggregator.resolve(grads.len());
                let direction = aggregate(&rule, &grads)?;
                Ok(ModelEstimate::new(current + direction * cfg.step))
            })
            .collect::<Result<_, IdentifyError>>()?;

        for (j, group) in members.iter().enumerate() {
            if group.is_empty() {
                empty_clusters += 1;
                continue;
            }
            let member_models: Vec<&Mat> = group.iter().map(|&i| &models[i].theta).collect();
            let rule = cfg.aggregator.resolve(member_models.len());
            clusters[j] = ModelEstimate::new(aggregate(&rule, &member_models)?);
        }
    }

    let misclassified = match inputs.labels {
        Some(labels) => (0..m)
            .filter(|&i| !inputs.adversary_mask[i] && assignments[i] != labels[i])
            .count(),
        None => 0,
    };

    Ok(RcsiOutcome { models, cluster_models: clusters, assignments, misclassified, empty_clusters })
}

/// Seed `k` cluster models from per-system estimates: start from the first
/// estimate, then repeatedly add the estimate farthest (Frobenius) from
/// every model chosen so far.
pub fn farthest_point_seeding(estimates: &[ModelEstimate], k: usize) -> Vec<ModelEstimate> {
    assert!(!estimates.is_empty() && k >= 1);
    let mut chosen = vec![0usize];
    let mut nearest: Vec<f64> = estimates.iter().map(|e| (&e.theta - &estimates[0].theta).norm()).collect();
    while chosen.len() < k.min(estimates.len()) {
        let (next, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        chosen.push(next);
        for (i, e) in estimates.iter().enumerate() {
            nearest[i] = nearest[i].min((&e.theta - &estimates[next].theta).norm());
        }
    }
    let mut seeds: Vec<ModelEstimate> = chosen.iter().map(|&i| estimates[i].clone()).collect();
    while seeds.len() < k {
        seeds.push(seeds[seeds.len() - 1].clone());
    }
    seeds
}

/// Relabeling `estimated → true` that maximizes agreement over the systems
/// in `considered`. Exhaustive for up to 8 clusters, identity beyond that.
pub fn best_label_map(assignments: &[usize], labels: &[usize], considered: &[usize], n_clusters: usize) -> Vec<usize> {
    use itertools::Itertools;
    let identity: Vec<usize> = (0..n_clusters).collect();
    if n_clusters > 8 {
        return identity;
    }
    let agreement = |map: &[usize]| considered.iter().filter(|&&i| map[assignments[i]] == labels[i]).count();
    let mut best = identity.clone();
    let mut best_score = agreement(&identity);
    for perm in (0..n_clusters).permutations(n_clusters) {
        let score = agreement(&perm);
        if score > best_score {
            best_score = score;
            best = perm;
        }
    }
    best
}
