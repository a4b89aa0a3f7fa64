//! Action-chunking policy with a conditional-VAE latent, and the single-step
//! baseline it is compared against.

mod act;
mod baseline;
pub mod blob;

use thiserror::Error;

use crate::action::Observation;
use crate::action::{unflatten, ActionChunk, ActionFrame, Unflattened, CONTINUOUS_DIM};
use crate::dataset::TrainingSample;
use crate::nn::{sigmoid, Real};

pub use act::{ActCache, ActPolicy};
pub use baseline::{BaselineCache, BaselinePolicy};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("unsupported parameter blob version {found}")]
    VersionMismatch { found: u32 },
    #[error("corrupt parameter blob: {0}")]
    Corrupt(String),
}

/// Sizes of the toy-scale policy. The single-step baseline reads `obs_dim`,
/// `width`, `num_buttons`, `history` and `seed` only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    /// Length `D` of one observation feature vector.
    pub obs_dim: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Chunk length `H`.
    pub horizon: usize,
    pub latent_dim: usize,
    pub num_buttons: usize,
    pub ffn_hidden: usize,
    /// Observation features are cut into tokens of this many values.
    pub obs_token_dim: usize,
    /// Number of stacked observations the encoder sees (1 = current only).
    pub history: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            obs_dim: crate::sim::DEFAULT_FEATURE_DIM,
            width: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            horizon: 16,
            latent_dim: 8,
            num_buttons: crate::action::DEFAULT_BUTTONS,
            ffn_hidden: 128,
            obs_token_dim: 6,
            history: 1,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("obs_dim", self.obs_dim),
            ("width", self.width),
            ("heads", self.heads),
            ("horizon", self.horizon),
            ("latent_dim", self.latent_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("obs_token_dim", self.obs_token_dim),
            ("history", self.history),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PolicyError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(PolicyError::InvalidConfig(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.num_buttons > crate::action::MAX_BUTTONS {
            return Err(PolicyError::InvalidConfig(format!(
                "too many buttons: {}",
                self.num_buttons
            )));
        }
        Ok(())
    }

    /// Length of the stacked feature vector the policy expects.
    pub fn input_feature_len(&self) -> usize {
        self.obs_dim * self.history
    }

    pub fn obs_tokens(&self) -> usize {
        self.input_feature_len().div_ceil(self.obs_token_dim)
    }

    /// Output values per predicted step.
    pub fn step_outputs(&self) -> usize {
        CONTINUOUS_DIM + self.num_buttons
    }
}

/// Diagonal Gaussian posterior over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDist {
    pub mu: Vec<f64>,
    /// Log-variance, clamped to `[-10, 10]`.
    pub logvar: Vec<f64>,
}

impl LatentDist {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }
}

/// Raw network output for one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub start_step: u64,
    /// Pre-normalization continuous predictions, one row per step.
    pub continuous: Vec<[f64; CONTINUOUS_DIM]>,
    /// Button logits, one row of `B` per step.
    pub bool_logits: Vec<Vec<f64>>,
}

impl PolicyOutput {
    pub fn len(&self) -> usize {
        self.continuous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.continuous.is_empty()
    }

    pub fn num_buttons(&self) -> usize {
        self.bool_logits.first().map_or(0, Vec::len)
    }

    /// Whether this output has a prediction for absolute step `step`.
    pub fn covers(&self, step: u64) -> bool {
        step >= self.start_step && step - self.start_step < self.len() as u64
    }

    pub fn bool_probs(&self, offset: usize) -> Vec<f64> {
        self.bool_logits[offset].iter().map(|&l| sigmoid(l)).collect()
    }

    /// Normalized frame at `offset` with buttons thresholded at 0.5.
    pub fn frame(&self, offset: usize) -> Unflattened {
        let bools: Vec<bool> = self.bool_logits[offset].iter().map(|&l| l >= 0.0).collect();
        unflatten(&self.continuous[offset], &bools).expect("policy output has canonical shape")
    }

    pub fn to_chunk(&self) -> ActionChunk {
        ActionChunk {
            start_step: self.start_step,
            frames: (0..self.len()).map(|i| self.frame(i).frame).collect(),
            bool_probs: (0..self.len()).map(|i| self.bool_probs(i)).collect(),
        }
    }

    /// Output that reproduces `frames` exactly, with saturated button logits.
    pub fn from_frames(start_step: u64, frames: &[ActionFrame]) -> Self {
        let mut continuous = Vec::with_capacity(frames.len());
        let mut bool_logits = Vec::with_capacity(frames.len());
        for f in frames {
            let flat = f.flatten();
            continuous.push(flat.continuous);
            bool_logits.push(flat.buttons.iter().map(|&b| if b { 30.0 } else { -30.0 }).collect());
        }
        Self {
            start_step,
            continuous,
            bool_logits,
        }
    }
}

/// Batched outputs of a training forward pass, in the model's precision.
#[derive(Debug, Clone)]
pub struct TrainOutputs<F> {
    pub batch: usize,
    pub horizon: usize,
    pub num_buttons: usize,
    /// `batch × horizon × 32`.
    pub continuous: Vec<F>,
    /// `batch × horizon × B`.
    pub logits: Vec<F>,
    /// `batch × Z` (empty for models without a latent).
    pub mu: Vec<F>,
    pub logvar: Vec<F>,
}

/// Loss gradients with respect to [`TrainOutputs`]. `d_mu`/`d_logvar` carry
/// only the direct (KL) terms; the model adds the reparameterization path.
#[derive(Debug, Clone)]
pub struct OutputGrads<F> {
    pub d_continuous: Vec<F>,
    pub d_logits: Vec<F>,
    pub d_mu: Vec<F>,
    pub d_logvar: Vec<F>,
}

/// A trainable chunk predictor (the chunking policy or the baseline).
pub trait ChunkModel<F: Real>: Send + Sync {
    type Cache;

    fn config(&self) -> &PolicyConfig;

    /// Steps predicted per call (1 for the baseline).
    fn horizon(&self) -> usize;

    /// Latent size (0 when there is no latent).
    fn latent_dim(&self) -> usize;

    fn params(&self) -> &[F];

    fn params_mut(&mut self) -> &mut [F];

    /// Forward pass over a batch; `eps` holds `batch × latent_dim` standard
    /// normal draws for the reparameterized latent sample.
    fn forward_train(&self, batch: &[TrainingSample], eps: &[F])
        -> Result<(TrainOutputs<F>, Self::Cache), PolicyError>;

    /// Parameter gradient for the given output gradients.
    fn backward_train(&self, cache: &Self::Cache, grads: &OutputGrads<F>) -> Vec<F>;

    /// Inference with the latent at the prior mean, decoding `len` steps.
    fn predict(&self, obs: &Observation, len: usize) -> Result<PolicyOutput, PolicyError>;

    fn to_blob(&self) -> Vec<u8>;
}

/// Continuous and boolean target arrays (`H × 32`, `H × B`) for a sample.
pub(crate) fn target_arrays(
    sample: &TrainingSample,
    horizon: usize,
    num_buttons: usize,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    let frames = &sample.target.frames;
    if frames.len() < horizon {
        return Err(PolicyError::ShapeMismatch {
            what: "target chunk length",
            expected: horizon,
            actual: frames.len(),
        });
    }
    let mut cont = Vec::with_capacity(horizon * CONTINUOUS_DIM);
    let mut bools = Vec::with_capacity(horizon * num_buttons);
    for f in &frames[..horizon] {
        if f.num_buttons() != num_buttons {
            return Err(PolicyError::ShapeMismatch {
                what: "target button count",
                expected: num_buttons,
                actual: f.num_buttons(),
            });
        }
        let flat = f.flatten();
        cont.extend_from_slice(&flat.continuous);
        bools.extend(flat.buttons.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok((cont, bools))
}

pub(crate) fn check_obs(cfg: &PolicyConfig, obs: &Observation) -> Result<(), PolicyError> {
    if obs.feature.len() != cfg.input_feature_len() {
        return Err(PolicyError::ShapeMismatch {
            what: "observation feature",
            expected: cfg.input_feature_len(),
            actual: obs.feature.len(),
        });
    }
    Ok(())
}

/// Stacks the last `history` observations (oldest first) into one
/// observation whose device state is the newest one's.
pub fn stack_history(window: &[Observation]) -> Observation {
    let newest = window.last().expect("non-empty history window");
    Observation {
        feature: window.iter().flat_map(|o| o.feature.iter().copied()).collect(),
        device_state: newest.device_state,
        step: newest.step,
    }
}
