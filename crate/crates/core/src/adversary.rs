//! Byzantine systems: who is corrupted and how their statistics are poisoned.
//!
//! A corrupted system reports
//! `XZ' = (1 − β)·XZ + β·Θ_wrong·ZZ + E` with `E` entrywise Gaussian, which
//! pulls its least-squares fit toward a wrong cluster's model while the
//! covariates still look legitimate. `XX`, `ZZ` and `n` are passed through.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::identify::{ModelEstimate, SufficientStats};
use crate::plant::LinearSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Always the next cluster, `(j + 1) mod N_c`.
    #[default]
    WrongClusterFixed,
    /// A uniformly chosen other cluster, redrawn each epoch.
    WrongClusterRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub rho_byz: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon_std")]
    pub epsilon_std: f64,
    #[serde(default)]
    pub target_mode: TargetMode,
}

fn default_beta() -> f64 {
    0.6
}

fn default_epsilon_std() -> f64 {
    1e-6
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { rho_byz: 0.0, beta: default_beta(), epsilon_std: default_epsilon_std(), target_mode: TargetMode::default() }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..0.5).contains(&self.rho_byz) {
            return Err(format!("attack.rho_byz must lie in [0, 0.5), got {}", self.rho_byz));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("attack.beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.epsilon_std >= 0.0 && self.epsilon_std.is_finite()) {
            return Err(format!("attack.epsilon_std must be nonnegative, got {}", self.epsilon_std));
        }
        Ok(())
    }
}

/// Flag each system with probability `rho_byz`, then unflag random members
/// of any cluster where adversaries are not a strict minority.
pub fn select_adversaries<R: Rng + ?Sized>(systems: &[LinearSystem], cfg: &AttackConfig, rng: &mut R) -> Vec<bool> {
    let mut mask: Vec<bool> = systems.iter().map(|_| rng.random::<f64>() < cfg.rho_byz).collect();
    let n_clusters = systems.iter().map(|s| s.cluster + 1).max().unwrap_or(0);
    for j in 0..n_clusters {
        let members: Vec<usize> = (0..systems.len()).filter(|&i| systems[i].cluster == j).collect();
        let mut flagged: Vec<usize> = members.iter().copied().filter(|&i| mask[i]).collect();
        if 2 * flagged.len() < members.len() {
            continue;
        }
        flagged.shuffle(rng);
        let keep = (members.len() - 1) / 2;
        for &i in &flagged[keep..] {
            mask[i] = false;
        }
    }
    mask
}

/// Index of the cluster whose nominal model a system of cluster `own` imitates.
pub fn target_cluster<R: Rng + ?Sized>(own: usize, n_clusters: usize, mode: TargetMode, rng: &mut R) -> usize {
    if n_clusters < 2 {
        return own;
    }
    match mode {
        TargetMode::WrongClusterFixed => (own + 1) % n_clusters,
        TargetMode::WrongClusterRandom => {
            let pick = rng.random_range(0..n_clusters - 1);
            if pick >= own { pick + 1 } else { pick }
        }
    }
}

/// Poison the cross-moment of `stats` toward `wrong_model`.
pub fn corrupt_stats<R: Rng + ?Sized>(
    stats: &SufficientStats,
    wrong_model: &ModelEstimate,
    cfg: &AttackConfig,
    rng: &mut R,
) -> SufficientStats {
    assert_eq!(wrong_model.theta.shape(), stats.xz.shape(), "wrong model shape does not match statistics");
    let mut xz = &stats.xz * (1.0 - cfg.beta) + &wrong_model.theta * &stats.zz * cfg.beta;
    if cfg.epsilon_std > 0.0 {
        xz.iter_mut().for_each(|v| *v += cfg.epsilon_std * rng.sample::<f64, _>(StandardNormal));
    }
    SufficientStats { xx: stats.xx.clone(), xz, zz: stats.zz.clone(), n: stats.n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::{local_gradient, ols_fit, DEFAULT_RIDGE};
    use crate::mat::{Mat, Vector};
    use crate::plant::{default_unicycle_clusters, spawn_fleet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_for(theta: &Mat, n: usize, rng: &mut ChaCha8Rng) -> SufficientStats {
        let mut s = SufficientStats::zeros(theta.nrows(), theta.ncols() - theta.nrows());
        for _ in 0..n {
            let z = Vector::from_fn(theta.ncols(), |_, _| rng.sample(StandardNormal));
            let noise = Vector::from_fn(theta.nrows(), |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
            s.push(&(theta * &z + noise), &z);
        }
        s
    }

    fn thetas(rng: &mut ChaCha8Rng) -> (Mat, Mat) {
        (Mat::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)), Mat::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn no_attack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (truth, wrong) = thetas(&mut rng);
        let s = stats_for(&truth, 30, &mut rng);
        let cfg = AttackConfig { rho_byz: 0.1, beta: 0.0, epsilon_std: 0.0, target_mode: TargetMode::WrongClusterFixed };
        assert_eq!(corrupt_stats(&s, &ModelEstimate::new(wrong), &cfg, &mut rng), s);
    }

    #[test]
    fn full_attack_fits_wrong_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (truth, wrong) = thetas(&mut rng);
        let s = stats_for(&truth, 50, &mut rng);
        let cfg = AttackConfig { rho_byz: 0.1, beta: 1.0, epsilon_std: 0.0, target_mode: TargetMode::WrongClusterFixed };
        let wrong = ModelEstimate::new(wrong);
        let bad = corrupt_stats(&s, &wrong, &cfg, &mut rng);
        assert!((ols_fit(&bad, DEFAULT_RIDGE).unwrap().theta - &wrong.theta).amax() < 1e-6);
        let probe = ModelEstimate::new(Mat::zeros(3, 5));
        let g = local_gradient(&bad, &probe, DEFAULT_RIDGE).unwrap();
        assert!((g - (&wrong.theta - &probe.theta)).amax() < 1e-6);
    }

    #[test]
    fn partial_attack_lands_on_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (truth, wrong) = thetas(&mut rng);
        let s = stats_for(&truth, 50, &mut rng);
        let cfg = AttackConfig::default();
        let honest = ols_fit(&s, DEFAULT_RIDGE).unwrap().theta;
        let bad = corrupt_stats(&s, &ModelEstimate::new(wrong.clone()), &cfg, &mut rng);
        let fit = ols_fit(&bad, DEFAULT_RIDGE).unwrap().theta;
        assert!((fit - (honest * 0.4 + wrong * 0.6)).amax() < 1e-6);
    }

    #[test]
    fn zz_and_xx_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (truth, wrong) = thetas(&mut rng);
        let s = stats_for(&truth, 20, &mut rng);
        let cfg = AttackConfig { epsilon_std: 0.5, ..AttackConfig::default() };
        let bad = corrupt_stats(&s, &ModelEstimate::new(wrong), &cfg, &mut rng);
        assert_eq!(bad.zz, s.zz);
        assert_eq!(bad.xx, s.xx);
        assert_eq!(bad.n, s.n);
        assert_eq!(bad.xz.shape(), s.xz.shape());
    }

    #[test]
    fn selection_examples() {
        let fleet = spawn_fleet(&default_unicycle_clusters(), 20, 0.0, 0.1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(select_adversaries(&fleet.systems, &AttackConfig::default(), &mut rng).iter().all(|&f| !f));

        let cfg = AttackConfig { rho_byz: 0.15, ..AttackConfig::default() };
        let a = select_adversaries(&fleet.systems, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = select_adversaries(&fleet.systems, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let count = a.iter().filter(|&&f| f).count();
        assert!((2..=20).contains(&count), "{count} adversaries out of 60");
    }

    #[test]
    fn target_never_own_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(target_cluster(2, 3, TargetMode::WrongClusterFixed, &mut rng), 0);
        for _ in 0..200 {
            let own = rng.random_range(0..4);
            let t = target_cluster(own, 4, TargetMode::WrongClusterRandom, &mut rng);
            assert!(t != own && t < 4);
        }
    }

    #[test]
    fn validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig { rho_byz: 0.5, ..AttackConfig::default() }.validate().is_err());
        assert!(AttackConfig { beta: 1.2, ..AttackConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn honest_majority_always_holds(per_cluster in 1usize..8, rho in 0.0f64..0.49, seed in any::<u64>()) {
            let fleet = spawn_fleet(&default_unicycle_clusters(), per_cluster, 0.0, 0.1, 1);
            let cfg = AttackConfig { rho_byz: rho, ..AttackConfig::default() };
            let mask = select_adversaries(&fleet.systems, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for j in 0..3 {
                let members = fleet.systems.iter().filter(|s| s.cluster == j).count();
                let bad = fleet.systems.iter().zip(&mask).filter(|(s, &f)| s.cluster == j && f).count();
                prop_assert!(2 * bad < members);
            }
        }
    }
}
