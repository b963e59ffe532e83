//! The adaptive control loop: doubling epochs of exploration, clustered
//! re-identification, certainty-equivalent controller refresh, the abort
//! fallback, and regret bookkeeping over Monte Carlo trials.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{corrupt_stats, select_adversaries, target_cluster};
use crate::config::ExperimentConfig;
use crate::control::{avg_cost, lqr_gain, solve_dlyap, spectral_radius, CostWeights, DLYAP_MAX_ITER, DLYAP_TOL};
use crate::identify::{
    best_label_map, farthest_point_seeding, ols_fit, rcsi, ModelEstimate, RcsiConfig, RcsiInputs, SufficientStats,
};
use crate::mat::{frob_sq, is_finite, spectral_norm, Mat, Vector};
use crate::plant::{rollout_epoch, spawn_fleet_sized, stats_from_trajectory, ClusterSpec, Fleet};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start every model near its cluster's nominal model.
    #[default]
    OraclePerturbed,
    /// Fit each system on its first epoch and seed clusters from those fits.
    ColdOls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSampleMode {
    /// Epoch `k` runs `τ_k − τ_{k−1}` steps, so the horizon is `τ_{k_fin}`.
    #[default]
    Incremental,
    /// Epoch `k` runs `τ_k` steps.
    FullTauK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSchedule {
    pub tau1: usize,
    pub k_fin: usize,
    pub sample_mode: EpochSampleMode,
}

impl EpochSchedule {
    /// `τ_k = 2^(k−1) τ₁` for `k ≥ 1`.
    pub fn tau(&self, k: usize) -> usize {
        assert!(k >= 1, "epochs are numbered from 1");
        self.tau1 << (k - 1)
    }

    /// `T = τ_{k_fin}`.
    pub fn horizon(&self) -> usize {
        self.tau(self.k_fin)
    }

    /// Steps simulated during epoch `k`.
    pub fn steps(&self, k: usize) -> usize {
        match self.sample_mode {
            EpochSampleMode::Incremental if k > 1 => self.tau(k) - self.tau(k - 1),
            _ => self.tau(k),
        }
    }

    pub fn total_steps(&self) -> usize {
        (1..=self.k_fin).map(|k| self.steps(k)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Exploration {
    TheoremHomogeneous,
    TheoremAdversarial,
    /// Input noise standard deviation per epoch; the last entry repeats.
    ExplicitList(Vec<f64>),
}

/// Exploration variance `σ_k²` for epoch `k`.
///
/// The theorem schedules use `c = √(d_u² d_x) / (d_x² + d_x d_u)`:
/// homogeneous `c / √(τ_k M_j)`, adversarial `c √((1 + λ² d_x m_j) / (τ_k m_j))`.
pub fn exploration_sigma2(
    mode: &Exploration,
    k: usize,
    tau_k: usize,
    group_size: usize,
    dims: (usize, usize),
    lambda_nom: f64,
) -> f64 {
    let (dx, du) = dims;
    let c = ((du * du * dx) as f64).sqrt() / ((dx * dx + dx * du) as f64);
    let tau = tau_k.max(1) as f64;
    let m = group_size.max(1) as f64;
    match mode {
        Exploration::TheoremHomogeneous => c / (tau * m).sqrt(),
        Exploration::TheoremAdversarial => c * ((1.0 + lambda_nom * lambda_nom * dx as f64 * m) / (tau * m)).sqrt(),
        Exploration::ExplicitList(sigmas) => match sigmas.get(k.max(1) - 1).or(sigmas.last()) {
            Some(s) => s * s,
            None => 0.0,
        },
    }
}

/// CE gains from the initial models, each checked against its true plant.
pub fn initial_controllers(fleet: &Fleet, init_models: &[ModelEstimate], weights: &CostWeights) -> Result<Vec<Mat>> {
    fleet
        .systems
        .iter()
        .zip(init_models)
        .enumerate()
        .map(|(i, (sys, model))| {
            let (a, b) = model.split();
            let not_stabilizing = |radius| Error::InitNotStabilizing { system: i, radius };
            let k = lqr_gain(&a, &b, weights).map_err(|_| not_stabilizing(f64::INFINITY))?;
            let radius = spectral_radius(&(&sys.a_star + &sys.b_star * &k));
            if radius < 1.0 { Ok(k) } else { Err(not_stabilizing(radius)) }
        })
        .collect()
}

/// `nominal + R·D/‖D‖_F` with `D` uniform on `[−1, 1]` entrywise.
fn perturbed(nominal: &Mat, radius: f64, rng: &mut impl Rng) -> Mat {
    let d = Mat::from_fn(nominal.nrows(), nominal.ncols(), |_, _| rng.random_range(-1.0..=1.0));
    let norm = d.norm();
    if radius == 0.0 || norm == 0.0 {
        return nominal.clone();
    }
    nominal + d * (radius / norm)
}

/// Per-system and per-cluster models at a Frobenius distance of
/// `radius` from the nominal cluster models.
pub fn oracle_perturbed_models(fleet: &Fleet, radius: f64, seed: u64) -> (Vec<ModelEstimate>, Vec<ModelEstimate>) {
    let m = fleet.systems.len();
    let per_system = fleet
        .systems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(seed, Purpose::InitModels, i as u64, 0);
            ModelEstimate::new(perturbed(&fleet.clusters[s.cluster].theta(), radius, &mut rng))
        })
        .collect();
    let clusters = fleet
        .clusters
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut rng = stream(seed, Purpose::InitModels, (m + j) as u64, 0);
            ModelEstimate::new(perturbed(&c.theta(), radius, &mut rng))
        })
        .collect();
    (per_system, clusters)
}

/// Frobenius radius of the initial perturbation: a quarter of the smallest
/// cluster separation (zero for a single cluster).
pub fn init_radius(fleet: &Fleet) -> f64 {
    0.25 * fleet.min_separation()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub t: usize,
    pub stage_cost: f64,
    pub cum_regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau_k: usize,
    pub sigma_k2: f64,
    /// `‖Θ̂ − Θ★‖_F²` after this epoch's identification.
    pub est_error_frobsq: f64,
    pub cluster_assigned: Option<usize>,
    /// Took part in this epoch's identification.
    pub identified: bool,
    pub misclassified: bool,
    /// Aborted at or before the end of this epoch.
    pub aborted: bool,
    pub cum_regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub seed: u64,
    pub system_id: usize,
    pub cluster_true: usize,
    pub honest: bool,
    /// `J(K★)` of this system's own plant.
    pub j_star: f64,
    pub total_cost: f64,
    pub steps: usize,
    /// Every `trace_stride`-th step plus the last step of each epoch.
    pub samples: Vec<TraceSample>,
    pub epochs: Vec<EpochRecord>,
}

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.cum_regret)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDiagnostics {
    pub realized_eps_het: f64,
    pub n_adversaries: usize,
    /// `max_i ‖dlyap(A★ + B★K₀, Q + K₀ᵀRK₀)‖₂` over the fleet.
    pub p0_max: f64,
    /// `max_i ‖B★‖₂` over the fleet.
    pub psi_b_max: f64,
    pub rcsi_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub traces: Vec<RegretTrace>,
    pub diagnostics: TrialDiagnostics,
}

pub fn build_fleet(cfg: &ExperimentConfig, seed: u64) -> Fleet {
    spawn_fleet_sized(&cfg.cluster_specs(), &cfg.cluster_counts(), cfg.eps_het, cfg.sigma_w(), seed)
}

struct SystemState {
    x: Vector,
    k: Mat,
    k0: Mat,
    model: ModelEstimate,
    aborted: bool,
    assigned: Option<usize>,
    collected: SufficientStats,
    t: usize,
    cost_sum: f64,
    cum_regret: f64,
    samples: Vec<TraceSample>,
    epochs: Vec<EpochRecord>,
}

/// One Monte Carlo trial of the full algorithm on `fleet`.
pub fn run_trial(fleet: &Fleet, cfg: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    let mut fleet = fleet.clone();
    let weights = CostWeights::identity(
        fleet.systems.first().map_or(0, |s| s.state_dim()),
        fleet.systems.first().map_or(0, |s| s.input_dim()),
    );
    let m = fleet.systems.len();
    let n_clusters = fleet.clusters.len();
    let dims = (weights.state_dim(), weights.input_dim());
    let schedule = cfg.schedule();
    let bounds = cfg.abort_bounds();
    let rcsi_cfg: RcsiConfig = cfg.rcsi_config();
    let exploration = cfg.exploration.exploration();

    let mut adv_rng = stream(seed, Purpose::Adversaries, 0, 0);
    let mask = select_adversaries(&fleet.systems, &cfg.attack, &mut adv_rng);
    for (s, &bad) in fleet.systems.iter_mut().zip(&mask) {
        s.honest = !bad;
    }
    let labels = fleet.labels();
    let sizes = fleet.cluster_sizes();
    let honest_sizes: Vec<usize> =
        (0..n_clusters).map(|j| (0..m).filter(|&i| labels[i] == j && !mask[i]).count()).collect();

    let j_star: Vec<f64> = fleet
        .systems
        .par_iter()
        .map(|s| {
            let k = lqr_gain(&s.a_star, &s.b_star, &weights)?;
            Ok(avg_cost(&s.a_star, &s.b_star, &k, &weights, s.sigma_w)?)
        })
        .collect::<Result<_>>()?;

    let (init_models, mut cluster_models) = oracle_perturbed_models(&fleet, init_radius(&fleet), seed);
    let k0 = initial_controllers(&fleet, &init_models, &weights)?;
    let diagnostics = TrialDiagnostics {
        realized_eps_het: fleet.realized_eps_het,
        n_adversaries: mask.iter().filter(|&&b| b).count(),
        p0_max: fleet
            .systems
            .iter()
            .zip(&k0)
            .map(|(s, k)| {
                let w = weights.q() + k.transpose() * weights.r() * k;
                solve_dlyap(&(&s.a_star + &s.b_star * k), &w, DLYAP_TOL, DLYAP_MAX_ITER)
                    .map_or(f64::INFINITY, |p| spectral_norm(&p))
            })
            .fold(0.0, f64::max),
        psi_b_max: fleet.systems.iter().map(|s| spectral_norm(&s.b_star)).fold(0.0, f64::max),
        rcsi_iterations: rcsi_cfg.iterations,
    };

    let mut states: Vec<SystemState> = init_models
        .into_iter()
        .zip(k0)
        .map(|(model, k0)| SystemState {
            x: Vector::zeros(dims.0),
            k: k0.clone(),
            k0,
            model,
            aborted: false,
            assigned: None,
            collected: SufficientStats::zeros(dims.0, dims.1),
            t: 0,
            cost_sum: 0.0,
            cum_regret: 0.0,
            samples: Vec::new(),
            epochs: Vec::with_capacity(schedule.k_fin),
        })
        .collect();

    for k in 1..=schedule.k_fin {
        let tau_k = schedule.tau(k);
        let steps = schedule.steps(k);
        let sigma2: Vec<f64> = (0..m)
            .map(|i| {
                let j = labels[i];
                let (group, lambda) = match exploration {
                    Exploration::TheoremAdversarial => {
                        let honest = honest_sizes[j].max(1);
                        let f = sizes[j] - honest_sizes[j];
                        (honest, cfg.exploration.lambda_nominal.unwrap_or(f as f64 / honest as f64))
                    }
                    _ => (sizes[j], 0.0),
                };
                exploration_sigma2(&exploration, k, tau_k, group, dims, lambda)
            })
            .collect();

        // rollouts; `Some(stats)` for systems still running the adaptive controller
        let fresh: Vec<Option<SufficientStats>> = states
            .par_iter_mut()
            .enumerate()
            .map(|(i, st)| {
                let sys = &fleet.systems[i];
                let mut rng = stream(seed, Purpose::Rollout, i as u64, k as u64);
                let x0 = if cfg.reset_state_each_epoch { Vector::zeros(dims.0) } else { st.x.clone() };
                let mut costs = Vec::with_capacity(steps);
                let mut stats = None;
                if st.aborted {
                    let traj = rollout_epoch(sys, &st.k0, 0.0, &x0, steps, None, &weights, cfg.cost_input_mode, &mut rng);
                    st.x = traj.final_state().clone();
                    costs = traj.costs;
                } else {
                    let traj = rollout_epoch(
                        sys,
                        &st.k,
                        sigma2[i].sqrt(),
                        &x0,
                        steps,
                        Some(&bounds),
                        &weights,
                        cfg.cost_input_mode,
                        &mut rng,
                    );
                    if traj.aborted {
                        st.aborted = true;
                        costs.extend_from_slice(&traj.costs);
                        let rest = rollout_epoch(
                            sys,
                            &st.k0,
                            0.0,
                            traj.final_state(),
                            steps - traj.costs.len(),
                            None,
                            &weights,
                            cfg.cost_input_mode,
                            &mut rng,
                        );
                        costs.extend_from_slice(&rest.costs);
                        st.x = rest.final_state().clone();
                    } else {
                        st.x = traj.final_state().clone();
                        stats = stats_from_trajectory(&traj).ok();
                        costs = traj.costs;
                    }
                }
                for (n, c) in costs.iter().enumerate() {
                    st.cost_sum += c;
                    st.cum_regret += c - j_star[i];
                    if st.t % cfg.trace_stride == 0 || n + 1 == costs.len() {
                        st.samples.push(TraceSample { t: st.t, stage_cost: *c, cum_regret: st.cum_regret });
                    }
                    st.t += 1;
                }
                stats
            })
            .collect();

        let active: Vec<usize> = (0..m).filter(|&i| fresh[i].is_some()).collect();
        if !active.is_empty() {
            let clean: Vec<SufficientStats> = active
                .iter()
                .map(|&i| {
                    let new = fresh[i].as_ref().expect("active systems have statistics");
                    if cfg.cumulative_stats {
                        states[i].collected.accumulate(new);
                        states[i].collected.clone()
                    } else {
                        new.clone()
                    }
                })
                .collect();
            let sent: Vec<SufficientStats> = active
                .iter()
                .zip(&clean)
                .map(|(&i, s)| {
                    if !mask[i] {
                        return s.clone();
                    }
                    let mut rng = stream(seed, Purpose::Attack, i as u64, k as u64);
                    let target = target_cluster(labels[i], n_clusters, cfg.attack.target_mode, &mut rng);
                    corrupt_stats(s, &ModelEstimate::new(fleet.clusters[target].theta()), &cfg.attack, &mut rng)
                })
                .collect();
            let sub_mask: Vec<bool> = active.iter().map(|&i| mask[i]).collect();
            let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();

            let cold_start = cfg.init_mode == InitMode::ColdOls && k == 1;
            let start: Vec<ModelEstimate> = if cold_start {
                sent.iter().map(|s| ols_fit(s, rcsi_cfg.ridge)).collect::<Result<_, _>>()?
            } else {
                active.iter().map(|&i| states[i].model.clone()).collect()
            };
            if cold_start {
                cluster_models = farthest_point_seeding(&start, n_clusters);
            }
            let inputs = RcsiInputs::new(&sent, &sub_mask).with_identity_stats(&clean).with_labels(&sub_labels);
            let out = rcsi(&inputs, &start, &cluster_models, &rcsi_cfg)?;
            cluster_models = out.cluster_models;

            // cluster indices are anonymous and can drift away from the
            // oracle's ordering, so report against the best relabelling
            let honest: Vec<usize> = (0..active.len()).filter(|&a| !sub_mask[a]).collect();
            let label_map = best_label_map(&out.assignments, &sub_labels, &honest, n_clusters);
            for ((&i, model), &assigned) in active.iter().zip(out.models).zip(&out.assignments) {
                states[i].model = model;
                states[i].assigned = Some(label_map[assigned]);
            }
        }

        let active_now: Vec<bool> = (0..m).map(|i| fresh[i].is_some()).collect();
        states.par_iter_mut().enumerate().for_each(|(i, st)| {
            if active_now[i] && k < schedule.k_fin {
                let (a, b) = st.model.split();
                match lqr_gain(&a, &b, &weights) {
                    Ok(gain) if is_finite(&gain) && spectral_norm(&gain) < bounds.k_b => st.k = gain,
                    _ => st.aborted = true,
                }
            }
            st.epochs.push(EpochRecord {
                epoch: k,
                tau_k,
                sigma_k2: if active_now[i] { sigma2[i] } else { 0.0 },
                est_error_frobsq: frob_sq(&(&st.model.theta - fleet.systems[i].theta_star())),
                cluster_assigned: st.assigned,
                identified: active_now[i],
                misclassified: active_now[i] && st.assigned != Some(labels[i]),
                aborted: st.aborted,
                cum_regret: st.cum_regret,
            });
        });
    }

    let traces = states
        .into_iter()
        .enumerate()
        .map(|(i, st)| RegretTrace {
            seed,
            system_id: i,
            cluster_true: labels[i],
            honest: !mask[i],
            j_star: j_star[i],
            total_cost: st.cost_sum,
            steps: st.t,
            samples: st.samples,
            epochs: st.epochs,
        })
        .collect();
    Ok(TrialResult { seed, traces, diagnostics })
}

/// Per-epoch statistics across seeds, over honest systems only.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub epoch: usize,
    pub tau_k: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub mean_est_error: f64,
    pub misclass_rate: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub trials: Vec<TrialResult>,
    pub summary: Vec<SummaryRow>,
}

/// Fleet average of honest systems' `(cum_regret, est_error, misclassified rate)` at epoch index `e`.
fn trial_epoch_means(trial: &TrialResult, e: usize) -> (f64, f64, f64) {
    let honest: Vec<&EpochRecord> = trial.traces.iter().filter(|t| t.honest).map(|t| &t.epochs[e]).collect();
    let n = honest.len().max(1) as f64;
    let regret = honest.iter().map(|r| r.cum_regret).sum::<f64>() / n;
    let err = honest.iter().map(|r| r.est_error_frobsq).sum::<f64>() / n;
    let identified = honest.iter().filter(|r| r.identified).count();
    let wrong = honest.iter().filter(|r| r.misclassified).count();
    let rate = if identified == 0 { 0.0 } else { wrong as f64 / identified as f64 };
    (regret, err, rate)
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(trials: &[TrialResult], schedule: &EpochSchedule) -> Vec<SummaryRow> {
    (0..schedule.k_fin)
        .map(|e| {
            let per_seed: Vec<(f64, f64, f64)> = trials.iter().map(|t| trial_epoch_means(t, e)).collect();
            let regrets: Vec<f64> = per_seed.iter().map(|p| p.0).collect();
            let (mean_regret, std_regret) = mean_std(&regrets);
            let n = trials.len().max(1) as f64;
            SummaryRow {
                epoch: e + 1,
                tau_k: schedule.tau(e + 1),
                mean_regret,
                std_regret,
                mean_est_error: per_seed.iter().map(|p| p.1).sum::<f64>() / n,
                misclass_rate: per_seed.iter().map(|p| p.2).sum::<f64>() / n,
                n_seeds: trials.len(),
            }
        })
        .collect()
}

/// Run every seed of `cfg` (ignoring any sweep). `workers` pins the thread
/// count; results never depend on it.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let job = || -> Result<ExperimentOutcome> {
        let trials: Vec<TrialResult> = cfg
            .seeds
            .par_iter()
            .map(|&seed| run_trial(&build_fleet(cfg, seed), cfg, seed))
            .collect::<Result<_>>()?;
        let summary = summarize(&trials, &cfg.schedule());
        Ok(ExperimentOutcome { trials, summary })
    };
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Runtime(format!("cannot start worker pool: {e}")))?
            .install(job),
        None => job(),
    }
}

/// Settings for a one-shot identification experiment: every system runs
/// its initial CE controller with exploration for `tau` steps from rest,
/// then the fleet runs RCSI once on the collected statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub clusters: Vec<ClusterSpec>,
    pub counts: Vec<usize>,
    pub eps_het: f64,
    pub sigma_w: f64,
    pub sigma_u: f64,
    pub tau: usize,
    pub rcsi: RcsiConfig,
    /// Frobenius radius of the oracle initialization; `None` uses
    /// `0.25·Δ_min` of the spawned fleet (zero for a single cluster).
    pub init_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    /// `‖Θ̂ − Θ★‖_F` of each system's own least-squares fit.
    pub ols_errors: Vec<f64>,
    /// `‖Θ̂ − Θ★‖_F` after RCSI.
    pub rcsi_errors: Vec<f64>,
    pub misclassified: usize,
}

impl ProbeOutcome {
    pub fn misclassification_rate(&self) -> f64 {
        self.misclassified as f64 / self.rcsi_errors.len().max(1) as f64
    }
}

pub fn identification_probe(spec: &ProbeSpec, seed: u64) -> Result<ProbeOutcome> {
    let fleet = spawn_fleet_sized(&spec.clusters, &spec.counts, spec.eps_het, spec.sigma_w, seed);
    let dx = fleet.systems[0].state_dim();
    let du = fleet.systems[0].input_dim();
    let weights = CostWeights::identity(dx, du);
    let radius = spec.init_radius.unwrap_or_else(|| init_radius(&fleet));
    let (init_models, cluster_models) = oracle_perturbed_models(&fleet, radius, seed);
    let k0 = initial_controllers(&fleet, &init_models, &weights)?;
    let stats: Vec<SufficientStats> = fleet
        .systems
        .par_iter()
        .zip(&k0)
        .enumerate()
        .map(|(i, (sys, k))| {
            let mut rng = stream(seed, Purpose::Probe, i as u64, 0);
            let traj = rollout_epoch(
                sys,
                k,
                spec.sigma_u,
                &Vector::zeros(dx),
                spec.tau,
                None,
                &weights,
                Default::default(),
                &mut rng,
            );
            stats_from_trajectory(&traj).map_err(|e| Error::Runtime(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<Mat> = fleet.systems.iter().map(|s| s.theta_star()).collect();
    let ols_errors = stats
        .iter()
        .zip(&truth)
        .map(|(s, t)| Ok((ols_fit(s, spec.rcsi.ridge)?.theta - t).norm()))
        .collect::<Result<_>>()?;
    let mask = vec![false; stats.len()];
    let labels = fleet.labels();
    let out = rcsi(&RcsiInputs::new(&stats, &mask).with_labels(&labels), &init_models, &cluster_models, &spec.rcsi)?;
    let rcsi_errors = out.models.iter().zip(&truth).map(|(m, t)| (&m.theta - t).norm()).collect();
    Ok(ProbeOutcome { ols_errors, rcsi_errors, misclassified: out.misclassified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::plant::default_unicycle_clusters;

    #[test]
    fn schedule_bookkeeping() {
        let s = EpochSchedule { tau1: 15, k_fin: 9, sample_mode: EpochSampleMode::Incremental };
        assert_eq!(s.horizon(), 3840);
        assert_eq!(s.tau(2), 30);
        assert_eq!(s.steps(1), 15);
        assert_eq!(s.steps(2), 15);
        assert_eq!(s.steps(9), 1920);
        assert_eq!(s.total_steps(), 3840);
        let full = EpochSchedule { sample_mode: EpochSampleMode::FullTauK, ..s };
        assert_eq!(full.total_steps(), 2 * 3840 - 15);
    }

    #[test]
    fn exploration_examples() {
        // √12/15 / √300 evaluated independently
        let expected = (12f64).sqrt() / 15.0 / (300f64).sqrt();
        let got = exploration_sigma2(&Exploration::TheoremHomogeneous, 1, 15, 20, (3, 2), 0.0);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.013333).abs() < 1e-6);
        let adv = exploration_sigma2(&Exploration::TheoremAdversarial, 1, 15, 20, (3, 2), 0.0);
        assert!((adv - got).abs() < 1e-15);
        let list = Exploration::ExplicitList(vec![0.663, 0.411]);
        assert!((exploration_sigma2(&list, 1, 15, 20, (3, 2), 0.0) - 0.663 * 0.663).abs() < 1e-15);
        assert!((exploration_sigma2(&list, 7, 15, 20, (3, 2), 0.0) - 0.411 * 0.411).abs() < 1e-15);
        assert!((0.663f64 * 0.663 - 0.4396).abs() < 1e-4);
    }

    #[test]
    fn theorem_schedules_decrease() {
        let s = EpochSchedule { tau1: 15, k_fin: 9, sample_mode: EpochSampleMode::Incremental };
        for mode in [Exploration::TheoremHomogeneous, Exploration::TheoremAdversarial] {
            let seq: Vec<f64> = (1..=9).map(|k| exploration_sigma2(&mode, k, s.tau(k), 14, (3, 2), 0.3)).collect();
            assert!(seq.windows(2).all(|w| w[1] < w[0]));
        }
    }

    fn tiny_fleet(eps: f64) -> Fleet {
        spawn_fleet_sized(&default_unicycle_clusters(), &[2, 2, 2], eps, 0.1, 3)
    }

    #[test]
    fn true_models_give_optimal_controllers() {
        let fleet = tiny_fleet(0.0);
        let w = CostWeights::identity(3, 2);
        let models: Vec<ModelEstimate> = fleet.systems.iter().map(|s| ModelEstimate::new(s.theta_star())).collect();
        let ks = initial_controllers(&fleet, &models, &w).unwrap();
        for (s, k) in fleet.systems.iter().zip(&ks) {
            assert_eq!(k, &lqr_gain(&s.a_star, &s.b_star, &w).unwrap());
            assert!(spectral_radius(&(&s.a_star + &s.b_star * k)) < 1.0);
        }
        let nudged: Vec<ModelEstimate> = models.iter().map(|m| ModelEstimate::new(&m.theta + Mat::from_element(3, 5, 1e-3))).collect();
        assert!(initial_controllers(&fleet, &nudged, &w).is_ok());
    }

    #[test]
    fn wildly_wrong_model_is_rejected() {
        let fleet = tiny_fleet(0.0);
        let w = CostWeights::identity(3, 2);
        let models: Vec<ModelEstimate> = fleet
            .systems
            .iter()
            .map(|s| ModelEstimate::new(crate::mat::hstack(&(&s.a_star * 10.0), &s.b_star)))
            .collect();
        assert!(matches!(initial_controllers(&fleet, &models, &w), Err(Error::InitNotStabilizing { .. })));
    }

    #[test]
    fn oracle_init_has_requested_radius() {
        let fleet = tiny_fleet(0.0);
        let r = init_radius(&fleet);
        assert!(r > 0.0);
        let (models, clusters) = oracle_perturbed_models(&fleet, r, 9);
        for (s, m) in fleet.systems.iter().zip(&models) {
            assert!(((&m.theta - s.theta_star()).norm() - r).abs() < 1e-12);
        }
        assert_eq!(clusters.len(), 3);
    }

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = preset("panel4_adversarial").unwrap();
        cfg.sweep = None;
        cfg.per_cluster = 4;
        cfg.k_fin = 4;
        cfg.seeds = vec![1, 2];
        cfg.trace_stride = 1;
        cfg
    }

    #[test]
    fn noiseless_oracle_run_has_zero_regret() {
        let mut cfg = small_cfg();
        cfg.sigma_w2 = 0.0;
        cfg.eps_het = 0.0;
        cfg.attack.rho_byz = 0.0;
        cfg.exploration.mode = crate::config::ExplorationMode::ExplicitList;
        cfg.exploration.sigmas = vec![0.0];
        let trial = run_trial(&build_fleet(&cfg, 1), &cfg, 1).unwrap();
        for t in &trial.traces {
            assert!(t.samples.iter().all(|s| s.cum_regret == 0.0 && s.stage_cost == 0.0));
        }
    }

    #[test]
    fn trial_bookkeeping() {
        let cfg = small_cfg();
        let trial = run_trial(&build_fleet(&cfg, 5), &cfg, 5).unwrap();
        let horizon = cfg.schedule().horizon();
        for t in &trial.traces {
            assert_eq!(t.steps, horizon);
            assert_eq!(t.samples.len(), horizon);
            assert_eq!(t.epochs.len(), cfg.k_fin);
            let expected = t.total_cost - horizon as f64 * t.j_star;
            assert!((t.final_regret() - expected).abs() <= 1e-9 * expected.abs().max(t.total_cost));
            // once aborted, always aborted
            let first = t.epochs.iter().position(|e| e.aborted).unwrap_or(cfg.k_fin);
            assert!(t.epochs[first..].iter().all(|e| e.aborted));
        }
    }

    #[test]
    fn experiment_is_deterministic_across_worker_counts() {
        let cfg = small_cfg();
        let one = run_experiment(&cfg, Some(1)).unwrap();
        let many = run_experiment(&cfg, Some(4)).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn single_seed_summary_has_zero_std() {
        let mut cfg = small_cfg();
        cfg.seeds = vec![3];
        let out = run_experiment(&cfg, None).unwrap();
        assert!(out.summary.iter().all(|r| r.std_regret == 0.0 && r.n_seeds == 1));
        let last = out.summary.last().unwrap();
        let honest: Vec<f64> = out.trials[0].traces.iter().filter(|t| t.honest).map(|t| t.final_regret()).collect();
        assert!((last.mean_regret - honest.iter().sum::<f64>() / honest.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
