//! CSV output and the run driver used by the command line.
//!
//! Every run directory gets `trials.csv`, `epochs.csv`, `summary.csv`,
//! `diagnostics.csv` and the resolved `config.toml`. A sweep writes one
//! such directory per value plus a combined `summary.csv` at the top, and
//! `manifest.csv` at the top lists every file written.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::orchestrator::{run_experiment, ExperimentOutcome, SummaryRow, TrialResult};
use crate::{Error, Result};

pub const TRIALS_HEADER: [&str; 7] = ["scenario", "seed", "system_id", "cluster_true", "t", "stage_cost", "cum_regret"];
pub const EPOCHS_HEADER: [&str; 10] = [
    "scenario",
    "seed",
    "system_id",
    "epoch",
    "tau_k",
    "sigma_k2",
    "est_error_frobsq",
    "cluster_assigned",
    "misclassified",
    "aborted",
];
pub const SUMMARY_HEADER: [&str; 8] =
    ["scenario", "sweep_value", "epoch", "mean_regret", "std_regret", "mean_est_error", "misclass_rate", "n_seeds"];
pub const MANIFEST_HEADER: [&str; 5] = ["scenario", "sweep_param", "sweep_value", "kind", "path"];

/// Nine significant digits, `%.9g` style.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    trim_zeros(&format!("{x:.*}", (8 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.') } else { s }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv { path: path.display().to_string(), source }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

macro_rules! row {
    ($w:expr, $path:expr, [$($field:expr),* $(,)?]) => {
        $w.write_record([$(AsRef::<str>::as_ref(&$field)),*]).map_err(|e| csv_error($path, e))?
    };
}

/// Per-step stage cost and cumulative regret of honest systems.
pub fn write_trials(path: &Path, scenario: &str, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRIALS_HEADER).map_err(|e| csv_error(path, e))?;
    for trial in trials {
        for trace in trial.traces.iter().filter(|t| t.honest) {
            let (seed, id, cluster) = (trace.seed.to_string(), trace.system_id.to_string(), trace.cluster_true.to_string());
            for s in &trace.samples {
                row!(w, path, [scenario, seed, id, cluster, s.t.to_string(), fmt_g9(s.stage_cost), fmt_g9(s.cum_regret)]);
            }
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// One row per honest system and epoch. `cluster_assigned` is -1 before
/// the system's first identification.
pub fn write_epochs(path: &Path, scenario: &str, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(EPOCHS_HEADER).map_err(|e| csv_error(path, e))?;
    for trial in trials {
        for trace in trial.traces.iter().filter(|t| t.honest) {
            for e in &trace.epochs {
                let assigned = e.cluster_assigned.map_or("-1".to_string(), |c| c.to_string());
                row!(
                    w,
                    path,
                    [
                        scenario,
                        trace.seed.to_string(),
                        trace.system_id.to_string(),
                        e.epoch.to_string(),
                        e.tau_k.to_string(),
                        fmt_g9(e.sigma_k2),
                        fmt_g9(e.est_error_frobsq),
                        assigned,
                        u8::from(e.misclassified).to_string(),
                        u8::from(e.aborted).to_string(),
                    ]
                );
            }
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_summary(path: &Path, scenario: &str, rows: &[(String, SummaryRow)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_error(path, e))?;
    for (sweep_value, r) in rows {
        row!(
            w,
            path,
            [
                scenario,
                sweep_value,
                r.epoch.to_string(),
                fmt_g9(r.mean_regret),
                fmt_g9(r.std_regret),
                fmt_g9(r.mean_est_error),
                fmt_g9(r.misclass_rate),
                r.n_seeds.to_string(),
            ]
        );
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_diagnostics(path: &Path, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "realized_eps_het", "n_adversaries", "p0_max", "psi_b_max", "rcsi_iterations"])
        .map_err(|e| csv_error(path, e))?;
    for t in trials {
        let d = &t.diagnostics;
        row!(
            w,
            path,
            [
                t.seed.to_string(),
                fmt_g9(d.realized_eps_het),
                d.n_adversaries.to_string(),
                fmt_g9(d.p0_max),
                fmt_g9(d.psi_b_max),
                d.rcsi_iterations.to_string(),
            ]
        );
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Label used in `summary.csv` for runs without a sweep.
pub const NO_SWEEP: &str = "base";

/// Results of one directory's worth of output.
#[derive(Debug)]
pub struct RunOutput {
    pub sweep_value: Option<String>,
    pub dir: PathBuf,
    pub outcome: ExperimentOutcome,
}

/// Run `cfg` (fanning out its sweep) and write everything under `out`.
/// Returns the paths written, manifest last.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<(Vec<RunOutput>, Vec<PathBuf>)> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let param = cfg.sweep.as_ref().map(|s| s.param.clone());
    let mut manifest: Vec<[String; 5]> = Vec::new();
    let mut written = Vec::new();
    let mut runs = Vec::new();
    let mut combined: Vec<(String, SummaryRow)> = Vec::new();
    let scenario = cfg.scenario.as_str();

    for (label, run_cfg) in cfg.expand_sweep()? {
        let dir = match (&param, &label) {
            (Some(p), Some(v)) => out.join(format!("{p}={v}")),
            _ => out.to_path_buf(),
        };
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let outcome = run_experiment(&run_cfg, workers)?;
        let value = label.clone().unwrap_or_else(|| NO_SWEEP.to_string());
        let rows: Vec<(String, SummaryRow)> = outcome.summary.iter().map(|r| (value.clone(), r.clone())).collect();

        let files = [
            ("trials", dir.join("trials.csv")),
            ("epochs", dir.join("epochs.csv")),
            ("summary", dir.join("summary.csv")),
            ("diagnostics", dir.join("diagnostics.csv")),
            ("config", dir.join("config.toml")),
        ];
        write_trials(&files[0].1, scenario, &outcome.trials)?;
        write_epochs(&files[1].1, scenario, &outcome.trials)?;
        write_summary(&files[2].1, scenario, &rows)?;
        write_diagnostics(&files[3].1, &outcome.trials)?;
        fs::write(&files[4].1, run_cfg.to_toml()).map_err(|e| io_error(&files[4].1, e))?;
        for (kind, path) in files {
            manifest.push([
                scenario.to_string(),
                param.clone().unwrap_or_default(),
                value.clone(),
                kind.to_string(),
                relative(&path, out),
            ]);
            written.push(path);
        }
        combined.extend(rows);
        runs.push(RunOutput { sweep_value: label, dir, outcome });
    }

    if param.is_some() {
        let path = out.join("summary.csv");
        write_summary(&path, scenario, &combined)?;
        manifest.push([
            scenario.to_string(),
            param.clone().unwrap_or_default(),
            String::new(),
            "summary_all".into(),
            relative(&path, out),
        ]);
        written.push(path);
    }

    let path = out.join("manifest.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(&path, e))?;
    for rec in &manifest {
        w.write_record(rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    written.push(path);
    Ok((runs, written))
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}
