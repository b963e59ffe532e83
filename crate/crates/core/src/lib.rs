//! Adversarially robust multitask adaptive LQR.
//!
//! A fleet of linear plants is grouped into clusters of similar dynamics.
//! Every epoch each plant collects data under its certainty-equivalent
//! controller, the fleet jointly re-identifies its models with clustered,
//! resilient-aggregation gradient steps, and the controllers are refreshed
//! from the new estimates. Some plants may be Byzantine and poison the
//! statistics they transmit.
//!
//! Module map:
//!
//! * [`control`]: Riccati/Lyapunov solvers, gains, costs, stability checks.
//! * [`plant`]: unicycle cluster models, fleet generation, closed-loop rollouts.
//! * [`identify`]: sufficient statistics, least squares, clustered identification.
//! * [`aggregate`]: resilient aggregation rules and the resilience probe.
//! * [`adversary`]: Byzantine selection and statistic poisoning.
//! * [`orchestrator`]: the epoch loop, exploration schedules, regret accounting.
//! * [`config`] and [`report`]: experiment configuration, presets, CSV output.

pub mod adversary;
pub mod aggregate;
pub mod config;
pub mod control;
pub mod identify;
pub mod mat;
pub mod orchestrator;
pub mod plant;
pub mod report;
pub mod rng;

pub use mat::Mat;

/// Top-level error for anything that runs an experiment end to end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Control(#[from] control::ControlError),
    #[error(transparent)]
    Identify(#[from] identify::IdentifyError),
    #[error(transparent)]
    Aggregate(#[from] aggregate::AggregateError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("initial controller for system {system} does not stabilize its plant (closed-loop spectral radius {radius:.6})")]
    InitNotStabilizing { system: usize, radius: f64 },
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
