//! Exit-code classification.

use std::fmt;

use vragent_core::dataset::DatasetError;
use vragent_core::injection::InjectionError;
use vragent_core::policy::PolicyError;
use vragent_core::sim::SimError;
use vragent_core::training::TrainError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Failure::Internal(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn sim_code(e: &SimError) -> u8 {
    match e {
        SimError::InfeasibleDensity(_) | SimError::InvalidConfig(_) => EXIT_USAGE,
        SimError::InvalidMap(_) | SimError::Io(_) | SimError::Dataset(_) => EXIT_DATA,
        SimError::Policy(p) => policy_code(p),
        SimError::NotReset | SimError::Ensemble(_) | SimError::Horizon(_) => EXIT_INTERNAL,
    }
}

fn policy_code(e: &PolicyError) -> u8 {
    match e {
        PolicyError::InvalidConfig(_) => EXIT_USAGE,
        PolicyError::Corrupt(_) | PolicyError::VersionMismatch { .. } => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::InvalidConfig(_) => EXIT_USAGE,
        TrainError::Checkpoint(_) | TrainError::EmptyDataset => EXIT_DATA,
        TrainError::Policy(p) => policy_code(p),
        _ => EXIT_INTERNAL,
    }
}

fn injection_code(e: &InjectionError) -> u8 {
    match e {
        InjectionError::InvalidRate(_) | InjectionError::InvalidConfig(_) => EXIT_USAGE,
        InjectionError::Io(_) | InjectionError::SinkClosed => EXIT_DATA,
        InjectionError::Sim(s) => sim_code(s),
        _ => EXIT_INTERNAL,
    }
}

/// Exit code for an error: explicit `Failure`s first, then known library
/// errors; anything else is an internal fault.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code();
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            return sim_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PolicyError>() {
            return policy_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = cause.downcast_ref::<InjectionError>() {
            return injection_code(e);
        }
        if cause.downcast_ref::<DatasetError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}
