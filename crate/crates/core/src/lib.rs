//! Chunked action policies for a rhythm-game agent: the policy network and
//! its training loop, temporal ensembling of overlapping chunks, adaptive
//! window control, a note-highway simulator and the binary frame protocol.

pub mod action;
pub mod dataset;
pub mod ensembler;
pub mod geometry;
pub mod horizon;
pub mod injection;
pub mod nn;
pub mod policy;
pub mod sim;
pub mod training;

pub use action::{ActionChunk, ActionFrame, Button, Buttons, Observation, CONTINUOUS_DIM, DEFAULT_BUTTONS};
pub use dataset::{Dataset, Episode, SamplerKind};
pub use ensembler::{ChunkBuffer, EnsembleConfig};
pub use geometry::{Pose, UnitQuat, Vec3};
pub use horizon::{ControllerConfig, ControllerState, Signal};
pub use injection::{InjectionError, WireFrame};
pub use policy::{ActPolicy, BaselinePolicy, ChunkModel, PolicyConfig, PolicyOutput};
pub use sim::{MapSpec, Mode, NoteMap, RunConfig, ScoreReport};
pub use training::{TrainConfig, Trainer};
