//! Note-highway environment: maps, hit detection, the scripted expert,
//! observation features and closed-loop evaluation.

pub mod ablation;
pub mod game;
pub mod map;
pub mod observe;
pub mod oracle;
pub mod rollout;

use thiserror::Error;

pub use ablation::{run_ablation, AblationRow, AblationSpec, AblationTables};
pub use game::{rank, replay_log, GameState, HitRule, Judgement, Outcome, Rank, ScoreReport};
pub use map::{generate_map, preset_maps, Cut, Hand, Lane, MapSpec, NoteEvent, NoteMap, Profile};
pub use observe::observation_encode;
pub use oracle::{rest_frame, OraclePlan};
pub use rollout::{
    record_episode, run_closed_loop, run_repeated, Agent, AgentFactory, AveragedReport, IdentityAgent, Mode,
    ModelAgent, NoisyOracleAgent, OracleAgent, RunConfig, RunResult, StepContext, TraceRow,
};

/// Feature length with the default four note slots.
pub const DEFAULT_FEATURE_DIM: usize = 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("density {0} notes/s is not feasible (max {max})", max = map::MAX_DENSITY)]
    InfeasibleDensity(f64),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("agent used before reset")]
    NotReset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Ensemble(#[from] crate::ensembler::EnsembleError),
    #[error(transparent)]
    Horizon(#[from] crate::horizon::HorizonError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

#[cfg(test)]
mod tests;
