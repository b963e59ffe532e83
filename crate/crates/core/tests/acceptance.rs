//! Acceptance suite. Runs every primary criterion at its stated tolerance,
//! prints one PASS/FAIL line per criterion and exits non-zero if any fail.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rmlqr::aggregate::{aggregate, empirical_resilience, AggregationRule};
use rmlqr::config::{preset, ExperimentConfig};
use rmlqr::control::{
    avg_cost, dare_residual, gain, lqr_gain, solve_dare, spectral_radius, CostWeights, DARE_MAX_ITER, DARE_TOL,
};
use rmlqr::identify::{
    default_iterations, rcsi, AggregatorSpec, ModelEstimate, RcsiConfig, RcsiInputs, SufficientStats, DEFAULT_RIDGE,
};
use rmlqr::mat::Vector;
use rmlqr::orchestrator::{identification_probe, run_experiment, ProbeSpec, SummaryRow};
use rmlqr::plant::{default_unicycle_clusters, rollout_epoch, separation, CostInputMode, LinearSystem};
use rmlqr::report::run_to_dir;
use rmlqr::Mat;

type Check = fn() -> (bool, String);

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn delta_min() -> f64 {
    separation(&default_unicycle_clusters()).0
}

fn probe(counts: Vec<usize>, eps_het: f64, sigma_w: f64, sigma_u: f64, tau: usize, single: bool) -> ProbeSpec {
    let clusters = if single { vec![default_unicycle_clusters()[0].clone()] } else { default_unicycle_clusters() };
    let n_clusters = clusters.len();
    ProbeSpec {
        clusters,
        counts,
        eps_het,
        sigma_w,
        sigma_u,
        tau,
        rcsi: RcsiConfig {
            n_clusters,
            iterations: default_iterations(delta_min(), 15, 0.5),
            step: 0.5,
            aggregator: AggregatorSpec::Mean,
            ridge: DEFAULT_RIDGE,
        },
        // single-cluster fleets have no separation of their own; use the
        // three-cluster gap so the start is not the truth itself
        init_radius: if single { Some(0.25 * delta_min()) } else { None },
    }
}

/// Per-seed fleet-average RCSI error, median over `seeds` seeds.
fn median_rcsi_error(spec: &ProbeSpec, seeds: u64) -> f64 {
    median(
        (0..seeds)
            .map(|s| mean(&identification_probe(spec, s).expect("probe runs").rcsi_errors))
            .collect(),
    )
}

fn riccati() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_residual: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    for _ in 0..100 {
        let dx = rng.random_range(1..=4);
        let du = rng.random_range(1..=dx);
        let a = gaussian(dx, dx, &mut rng) * (1.2 / (dx as f64).sqrt());
        let b = gaussian(dx, du, &mut rng);
        let w = CostWeights::identity(dx, du);
        let p = solve_dare(&a, &b, &w, DARE_TOL, DARE_MAX_ITER).expect("random pair is stabilizable");
        let k = gain(&a, &b, &p, w.r()).expect("gain");
        worst_residual = worst_residual.max(dare_residual(&a, &b, &w, &p));
        worst_radius = worst_radius.max(spectral_radius(&(&a + &b * &k)));
    }
    // scalar closed form: b²p² + ((1 − a²)r − qb²)p − qr = 0
    let (a, b, q, r) = (0.5f64, 1.0f64, 1.0f64, 1.0f64);
    let lin = (1.0 - a * a) * r - q * b * b;
    let closed = (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b);
    let w = CostWeights::new(Mat::from_element(1, 1, q), Mat::from_element(1, 1, r)).unwrap();
    let p = solve_dare(&Mat::from_element(1, 1, a), &Mat::from_element(1, 1, b), &w, DARE_TOL, DARE_MAX_ITER).unwrap();
    let scalar_err = (p[(0, 0)] - closed).abs().max((closed - 1.1327822).abs());
    let ok = worst_residual <= 1e-8 && worst_radius < 1.0 && scalar_err <= 1e-6;
    (ok, format!("max residual {worst_residual:.2e}, max closed-loop radius {worst_radius:.4}, scalar p {:.7}", p[(0, 0)]))
}

fn cost_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = CostWeights::identity(3, 2);
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let raw = gaussian(3, 3, &mut rng);
        let a = &raw * (0.8 / spectral_radius(&raw));
        let b = gaussian(3, 2, &mut rng);
        let k = lqr_gain(&a, &b, &w).unwrap();
        let sigma_w = 0.5;
        let exact = avg_cost(&a, &b, &k, &w, sigma_w).unwrap();
        let sys = LinearSystem { a_star: a, b_star: b, cluster: 0, honest: true, sigma_w };
        let mut sim_rng = ChaCha8Rng::seed_from_u64(100 + i);
        let traj =
            rollout_epoch(&sys, &k, 0.0, &Vector::zeros(3), 200_000, None, &w, CostInputMode::Applied, &mut sim_rng);
        let empirical = mean(&traj.costs);
        worst = worst.max((empirical - exact).abs() / exact);
    }
    (worst <= 0.03, format!("max relative gap {:.2}%", 100.0 * worst))
}

fn ols_rate() -> (bool, String) {
    let at = |tau| {
        median(
            (0..50)
                .map(|s| identification_probe(&probe(vec![1], 0.0, 0.01, 0.1, tau, true), s).unwrap().ols_errors[0])
                .collect(),
        )
    };
    let (short, long) = (at(100), at(6400));
    (long <= 0.25 * short, format!("median error {short:.4} at 100 steps, {long:.4} at 6400 (ratio {:.3})", long / short))
}

fn multitask_gain() -> (bool, String) {
    let single = median_rcsi_error(&probe(vec![1], 0.0, 0.01, 0.1, 200, true), 50);
    let pooled = median_rcsi_error(&probe(vec![25], 0.0, 0.01, 0.1, 200, true), 50);
    (pooled <= 0.5 * single, format!("M=1 {single:.4}, M=25 {pooled:.4} (ratio {:.3})", pooled / single))
}

fn heterogeneity_floor() -> (bool, String) {
    let drop = |eps| {
        let small = median_rcsi_error(&probe(vec![25], eps, 0.01, 0.1, 1600, true), 50);
        let large = median_rcsi_error(&probe(vec![100], eps, 0.01, 0.1, 1600, true), 50);
        1.0 - large / small
    };
    let (het, hom) = (drop(0.01), drop(0.0));
    (het < 0.2 && hom >= 0.4, format!("25→100 error reduction {:.1}% with eps_het=0.01, {:.1}% with eps_het=0", 100.0 * het, 100.0 * hom))
}

fn misclassification_decay() -> (bool, String) {
    let taus = [25, 50, 100, 200, 400];
    let rates: Vec<f64> = taus
        .iter()
        .map(|&tau| {
            let spec = probe(vec![5; 3], 0.0, 0.1, 0.1, tau, false);
            mean(&(0..200).map(|s| identification_probe(&spec, s).unwrap().misclassification_rate()).collect::<Vec<_>>())
        })
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let last = *rates.last().unwrap();
    let shown: Vec<String> = taus.iter().zip(&rates).map(|(t, r)| format!("{t}:{r:.4}")).collect();
    (monotone && last <= 0.01, format!("rates {}", shown.join(" ")))
}

fn rcsi_contraction() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let truth = default_unicycle_clusters()[0].theta();
    let m = 10;
    let stats: Vec<SufficientStats> = (0..m)
        .map(|_| {
            let mut s = SufficientStats::zeros(3, 2);
            for _ in 0..2000 {
                let z = Vector::from_fn(5, |_, _| rng.sample(StandardNormal));
                s.push(&(&truth * &z), &z);
            }
            s
        })
        .collect();
    let init: Vec<ModelEstimate> = (0..m).map(|_| ModelEstimate::new(&truth + gaussian(3, 5, &mut rng) * 0.1)).collect();
    let cfg = RcsiConfig { n_clusters: 1, iterations: 10, step: 0.5, aggregator: AggregatorSpec::Mean, ridge: DEFAULT_RIDGE };
    let mask = vec![false; m];
    let out = rcsi(&RcsiInputs::new(&stats, &mask), &init, &[init[0].clone()], &cfg).unwrap();
    let factor = 0.5f64.powi(10);
    let worst = init
        .iter()
        .zip(&out.models)
        .map(|(a, b)| ((&b.theta - &truth).norm() - factor * (&a.theta - &truth).norm()).abs())
        .fold(0.0, f64::max);
    (worst <= 1e-10, format!("max deviation from (1-eta)^N law {worst:.2e}"))
}

fn resilience_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let robust = [
        AggregationRule::Cwtm { trim: 5 },
        AggregationRule::CwMed,
        AggregationRule::geomedian(),
        AggregationRule::MeaMed { f: 5 },
    ];
    let mut worst_robust = [0.0f64; 4];
    let mut least_mean = f64::INFINITY;
    for _ in 0..1000 {
        let mut inputs: Vec<Mat> = (0..15).map(|_| gaussian(3, 5, &mut rng)).collect();
        inputs.extend((0..5).map(|_| gaussian(3, 5, &mut rng) * 1e6));
        inputs.shuffle(&mut rng);
        let honest: Vec<usize> = (0..20).filter(|&i| inputs[i].amax() < 1e3).collect();
        for (slot, rule) in worst_robust.iter_mut().zip(&robust) {
            *slot = slot.max(empirical_resilience(rule, &inputs, &honest).unwrap());
        }
        least_mean = least_mean.min(empirical_resilience(&AggregationRule::Mean, &inputs, &honest).unwrap());
    }

    let mut violations = 0;
    for _ in 0..500 {
        let count = rng.random_range(5..=20);
        let (rows, cols) = (rng.random_range(1..=3), rng.random_range(1..=5));
        let inputs: Vec<Mat> = (0..count).map(|_| gaussian(rows, cols, &mut rng) * 10.0).collect();
        let f = (count - 1) / 2;
        let trim = count / 4;
        let rules = [
            AggregationRule::Mean,
            AggregationRule::Cwtm { trim },
            AggregationRule::CwMed,
            AggregationRule::geomedian(),
            AggregationRule::MeaMed { f },
        ];
        let mut shuffled = inputs.clone();
        shuffled.shuffle(&mut rng);
        let shift = gaussian(rows, cols, &mut rng) * 5.0;
        let moved: Vec<Mat> = inputs.iter().map(|m| m + &shift).collect();
        for rule in &rules {
            let base = aggregate(rule, &inputs).unwrap();
            let scale = 1.0 + base.amax() + shift.amax();
            let tol = match rule {
                AggregationRule::GeoMedian { .. } => 1e-6 * scale,
                AggregationRule::Mean => 1e-12 * scale,
                _ => 0.0,
            };
            if (aggregate(rule, &shuffled).unwrap() - &base).amax() > tol {
                violations += 1;
            }
            let shift_tol = if matches!(rule, AggregationRule::GeoMedian { .. }) { 1e-6 * scale } else { 1e-12 * scale };
            if (aggregate(rule, &moved).unwrap() - (&base + &shift)).amax() > shift_tol {
                violations += 1;
            }
            for r in 0..rows {
                for c in 0..cols {
                    let mut col: Vec<f64> = inputs.iter().map(|m| m[(r, c)]).collect();
                    col.sort_by(|a, b| a.total_cmp(b));
                    let (lo, hi) = match rule {
                        AggregationRule::Cwtm { trim } => (col[*trim], col[count - 1 - trim]),
                        AggregationRule::CwMed => (col[(count - 1) / 2], col[count / 2]),
                        AggregationRule::MeaMed { f } => {
                            let med = if count % 2 == 1 { col[count / 2] } else { 0.5 * (col[count / 2 - 1] + col[count / 2]) };
                            let mut near = col.clone();
                            near.sort_by(|a, b| (a - med).abs().total_cmp(&(b - med).abs()).then(a.total_cmp(b)));
                            let kept = &near[..count - f];
                            (kept.iter().cloned().fold(f64::INFINITY, f64::min), kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                        }
                        // the convex hull sits inside the coordinate box
                        _ => (col[0], col[count - 1]),
                    };
                    let v = base[(r, c)];
                    if v < lo - 1e-12 * scale || v > hi + 1e-12 * scale {
                        violations += 1;
                    }
                }
            }
        }
    }
    let ok = worst_robust.iter().all(|&l| l <= 2.0) && least_mean >= 1e3 && violations == 0;
    (
        ok,
        format!(
            "max resilience cwtm {:.3} cwmed {:.3} geomedian {:.3} meamed {:.3}; min mean {least_mean:.3e}; property violations {violations}",
            worst_robust[0], worst_robust[1], worst_robust[2], worst_robust[3]
        ),
    )
}

fn panel4_at(rule: &str) -> ExperimentConfig {
    let mut cfg = preset("panel4_adversarial").unwrap();
    cfg.sweep = None;
    cfg.with_param("attack.rho_byz", &toml::Value::Float(0.3))
        .and_then(|c| c.with_param("aggregator.rule", &toml::Value::String(rule.into())))
        .unwrap()
}

fn per_step_regret(summary: &[SummaryRow], cfg: &ExperimentConfig, epoch: usize) -> f64 {
    let before = if epoch == 1 { 0.0 } else { summary[epoch - 2].mean_regret };
    (summary[epoch - 1].mean_regret - before) / cfg.schedule().steps(epoch) as f64
}

fn adversarial_regret() -> (bool, String) {
    let cwtm_cfg = panel4_at("cwtm");
    let mean_cfg = panel4_at("mean");
    let cwtm = run_experiment(&cwtm_cfg, None).unwrap().summary;
    let plain = run_experiment(&mean_cfg, None).unwrap().summary;
    let k_fin = cwtm_cfg.k_fin;
    let (early, late) = (per_step_regret(&cwtm, &cwtm_cfg, 2), per_step_regret(&cwtm, &cwtm_cfg, k_fin));
    let (r_cwtm, r_mean) = (cwtm[k_fin - 1].mean_regret, plain[k_fin - 1].mean_regret);
    let sublinear = late <= 0.5 * early;
    let separated = r_mean >= 3.0 * r_cwtm;
    (
        sublinear && separated,
        format!(
            "(a) per-step regret epoch 2 {early:.4}, epoch {k_fin} {late:.4} [{}]; (b) final regret mean {r_mean:.1} vs cwtm {r_cwtm:.1}, ratio {:.2} [{}]",
            if sublinear { "ok" } else { "fail" },
            r_mean / r_cwtm,
            if separated { "ok" } else { "fail" }
        ),
    )
}

fn homogeneous_scaling() -> (bool, String) {
    let base = {
        let mut cfg = preset("panel1_homogeneous").unwrap();
        cfg.sweep = None;
        cfg
    };
    let at = |m: i64| {
        let cfg = base.with_param("per_cluster", &toml::Value::Integer(m)).unwrap();
        run_experiment(&cfg, None).unwrap().summary.last().unwrap().mean_regret
    };
    let (small, large) = (at(5), at(25));
    (large <= 0.6 * small, format!("final mean regret M=5 {small:.1}, M=25 {large:.1} (ratio {:.3})", large / small))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> (bool, String) {
    let cfg = panel4_at("cwtm");
    let one = tempfile::tempdir().unwrap();
    let many = tempfile::tempdir().unwrap();
    run_to_dir(&cfg, one.path(), Some(1)).unwrap();
    run_to_dir(&cfg, many.path(), Some(4)).unwrap();
    let (a, b) = (csv_files(one.path()), csv_files(many.path()));
    let same = !a.is_empty() && a == b;
    (same, format!("{} CSV files compared between 1 and 4 workers", a.len()))
}

fn main() {
    let checks: [(u32, &str, u64, Check); 11] = [
        (1, "Riccati correctness", 5, riccati),
        (2, "cost identity", 30, cost_identity),
        (3, "OLS rate", 60, ols_rate),
        (4, "multitask gain", 120, multitask_gain),
        (5, "heterogeneity floor", 300, heterogeneity_floor),
        (6, "misclassification decay", 300, misclassification_decay),
        (7, "RCSI contraction", 1, rcsi_contraction),
        (8, "resilience suite", 30, resilience_suite),
        (9, "adversarial regret trend", 900, adversarial_regret),
        (10, "homogeneous regret scaling", 900, homogeneous_scaling),
        (11, "determinism across worker counts", 900, determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, check) in checks {
        let start = Instant::now();
        let (ok, detail) = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = ok && in_time;
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.2}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
