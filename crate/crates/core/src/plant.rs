//! Plants: unicycle cluster models, heterogeneous fleets, and closed-loop
//! rollouts with exploration noise and the abort safeguard.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::control::{quad_form, CostWeights};
use crate::identify::SufficientStats;
use crate::mat::{frob_sq, hstack, spectral_norm, Mat, Vector};
use crate::rng::{self, Purpose};

/// Nominal model of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub nominal_a: Mat,
    pub nominal_b: Mat,
    pub label: usize,
}

impl ClusterSpec {
    pub fn theta(&self) -> Mat {
        hstack(&self.nominal_a, &self.nominal_b)
    }
}

/// Euler discretization of the unicycle kinematics linearized around
/// forward speed `v0` and heading `theta0` (radians). State `(p_x, p_y, θ)`,
/// input `(v, ω)`.
pub fn unicycle_cluster(v0: f64, theta0: f64, dt: f64, label: usize) -> ClusterSpec {
    assert!(dt > 0.0, "dt must be positive");
    let (s, c) = theta0.sin_cos();
    let a = Mat::from_row_slice(3, 3, &[1.0, 0.0, -dt * v0 * s, 0.0, 1.0, dt * v0 * c, 0.0, 0.0, 1.0]);
    let b = Mat::from_row_slice(3, 2, &[dt * c, 0.0, dt * s, 0.0, 0.0, dt]);
    ClusterSpec { nominal_a: a, nominal_b: b, label }
}

/// One plant of the fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a_star: Mat,
    pub b_star: Mat,
    pub cluster: usize,
    pub honest: bool,
    pub sigma_w: f64,
}

impl LinearSystem {
    pub fn state_dim(&self) -> usize {
        self.a_star.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_star.ncols()
    }

    /// `Θ★ = [A★ B★]`.
    pub fn theta_star(&self) -> Mat {
        hstack(&self.a_star, &self.b_star)
    }
}

/// A generated fleet plus the separation diagnostics of its clusters.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub clusters: Vec<ClusterSpec>,
    pub systems: Vec<LinearSystem>,
    /// Realized `max ‖Θ★⁽ⁱ⁾ − Θ★⁽ˡ⁾‖_F` over pairs within a cluster.
    pub realized_eps_het: f64,
}

impl Fleet {
    pub fn labels(&self) -> Vec<usize> {
        self.systems.iter().map(|s| s.cluster).collect()
    }

    /// Systems per cluster, indexed by cluster label.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters.len()];
        for s in &self.systems {
            sizes[s.cluster] += 1;
        }
        sizes
    }

    pub fn min_separation(&self) -> f64 {
        separation(&self.clusters).0
    }
}

/// `(Δ_min, Δ_max)`: smallest and largest spectral-norm distance between
/// nominal cluster models. Both are zero with fewer than two clusters.
pub fn separation(clusters: &[ClusterSpec]) -> (f64, f64) {
    let thetas: Vec<Mat> = clusters.iter().map(ClusterSpec::theta).collect();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..thetas.len() {
        for j in i + 1..thetas.len() {
            let d = spectral_norm(&(&thetas[i] - &thetas[j]));
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if lo.is_infinite() {
        lo = 0.0;
    }
    (lo, hi)
}

/// Spawn `counts[j]` systems around each cluster's nominal model. Every
/// entry of `A` and `B` gets an independent `N(0, eps_het²)` perturbation
/// (`eps_het` is a standard deviation).
pub fn spawn_fleet_sized(
    clusters: &[ClusterSpec],
    counts: &[usize],
    eps_het: f64,
    sigma_w: f64,
    seed: u64,
) -> Fleet {
    assert!(eps_het >= 0.0, "eps_het must be nonnegative");
    assert_eq!(clusters.len(), counts.len());
    let mut rng = rng::stream(seed, Purpose::Fleet, 0, 0);
    let perturb = Normal::new(0.0, eps_het).expect("finite std");
    let mut systems = Vec::with_capacity(counts.iter().sum());
    for (j, (spec, &count)) in clusters.iter().zip(counts).enumerate() {
        for _ in 0..count {
            let mut a = spec.nominal_a.clone();
            let mut b = spec.nominal_b.clone();
            if eps_het > 0.0 {
                a.iter_mut().for_each(|v| *v += perturb.sample(&mut rng));
                b.iter_mut().for_each(|v| *v += perturb.sample(&mut rng));
            }
            systems.push(LinearSystem { a_star: a, b_star: b, cluster: j, honest: true, sigma_w });
        }
    }
    let realized_eps_het = max_intra_cluster_distance(&systems);
    Fleet { clusters: clusters.to_vec(), systems, realized_eps_het }
}

pub fn spawn_fleet(clusters: &[ClusterSpec], per_cluster: usize, eps_het: f64, sigma_w: f64, seed: u64) -> Fleet {
    spawn_fleet_sized(clusters, &vec![per_cluster; clusters.len()], eps_het, sigma_w, seed)
}

fn max_intra_cluster_distance(systems: &[LinearSystem]) -> f64 {
    let thetas: Vec<Mat> = systems.iter().map(LinearSystem::theta_star).collect();
    let mut worst: f64 = 0.0;
    for i in 0..systems.len() {
        for l in i + 1..systems.len() {
            if systems[i].cluster == systems[l].cluster {
                worst = worst.max(frob_sq(&(&thetas[i] - &thetas[l])).sqrt());
            }
        }
    }
    worst
}

/// Which input the stage cost charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostInputMode {
    /// The input actually applied, exploration included.
    #[default]
    Applied,
    /// Only the feedback part `Kx`.
    FeedbackOnly,
}

/// Abort thresholds: stop when `‖x_t‖² ≥ x_b² log T` or `‖K‖ ≥ K_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbortBounds {
    pub x_b: f64,
    pub k_b: f64,
    pub horizon: usize,
}

impl AbortBounds {
    pub fn state_limit(&self) -> f64 {
        self.x_b * self.x_b * (self.horizon as f64).ln()
    }
}

/// States `x_0..x_n`, applied inputs `u_0..u_{n-1}` and stage costs `c_0..c_{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub costs: Vec<f64>,
    pub aborted: bool,
}

impl Trajectory {
    pub fn transitions(&self) -> usize {
        self.inputs.len()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory always holds its initial state")
    }
}

/// Simulate `x_{t+1} = A★x_t + B★(K x_t + σ_u g_t) + w_t` for up to `steps`
/// steps. With `bounds`, the rollout stops (and is flagged aborted) as soon
/// as the gain or a visited state crosses its threshold; without bounds it
/// always runs to completion.
#[allow(clippy::too_many_arguments)]
pub fn rollout_epoch<R: Rng + ?Sized>(
    system: &LinearSystem,
    k: &Mat,
    sigma_u: f64,
    x_init: &Vector,
    steps: usize,
    bounds: Option<&AbortBounds>,
    weights: &CostWeights,
    cost_mode: CostInputMode,
    rng: &mut R,
) -> Trajectory {
    assert!(sigma_u >= 0.0, "sigma_u must be nonnegative");
    let dx = system.state_dim();
    let du = system.input_dim();
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
        aborted: false,
    };
    traj.states.push(x_init.clone());
    let state_limit = bounds.map(AbortBounds::state_limit);
    if let Some(b) = bounds {
        if spectral_norm(k) >= b.k_b {
            traj.aborted = true;
            return traj;
        }
    }
    let mut x = x_init.clone();
    for _ in 0..steps {
        if let Some(limit) = state_limit {
            if x.norm_squared() >= limit {
                traj.aborted = true;
                return traj;
            }
        }
        let feedback = k * &x;
        let mut u = feedback.clone();
        for i in 0..du {
            let g: f64 = StandardNormal.sample(rng);
            u[i] += sigma_u * g;
        }
        let charged = match cost_mode {
            CostInputMode::Applied => &u,
            CostInputMode::FeedbackOnly => &feedback,
        };
        traj.costs.push(quad_form(weights.q(), &x) + quad_form(weights.r(), charged));
        let mut next = &system.a_star * &x + &system.b_star * &u;
        for i in 0..dx {
            let w: f64 = StandardNormal.sample(rng);
            next[i] += system.sigma_w * w;
        }
        traj.inputs.push(u);
        traj.states.push(next.clone());
        x = next;
    }
    if let Some(limit) = state_limit {
        if x.norm_squared() >= limit {
            traj.aborted = true;
        }
    }
    traj
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trajectory has no transitions")]
pub struct EmptyTrajectory;

/// Regression moments `XX = Σ x_{t+1}x_{t+1}ᵀ`, `XZ = Σ x_{t+1}z_tᵀ`,
/// `ZZ = Σ z_t z_tᵀ` with `z_t = [x_t; u_t]`.
pub fn stats_from_trajectory(traj: &Trajectory) -> Result<SufficientStats, EmptyTrajectory> {
    let n = traj.transitions();
    if n == 0 {
        return Err(EmptyTrajectory);
    }
    let dx = traj.states[0].len();
    let du = traj.inputs[0].len();
    let mut stats = SufficientStats::zeros(dx, du);
    let mut z = Vector::zeros(dx + du);
    for t in 0..n {
        z.rows_mut(0, dx).copy_from(&traj.states[t]);
        z.rows_mut(dx, du).copy_from(&traj.inputs[t]);
        stats.push(&traj.states[t + 1], &z);
    }
    Ok(stats)
}

/// Nominal clusters of the unicycle fleet used throughout the experiments.
pub fn default_unicycle_clusters() -> Vec<ClusterSpec> {
    [(1.0, 0.0), (1.0, 45.0), (0.8, 90.0)]
        .iter()
        .enumerate()
        .map(|(j, &(v0, deg))| unicycle_cluster(v0, f64::to_radians(deg), 0.1, j))
        .collect()
}
