//! Temporal ensembling of overlapping chunk predictions.

use std::collections::VecDeque;

use thiserror::Error;

use crate::action::{unflatten, ActionFrame, CONTINUOUS_DIM, QUAT_SLOTS};
use crate::policy::PolicyOutput;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("chunk emitted at step {got} pushed after step {last}")]
    NonMonotonicStep { last: u64, got: u64 },
    #[error("no buffered chunk covers step {0}")]
    NoCoverage(u64),
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    /// Blending window `W` (number of candidates).
    pub window: usize,
    /// Decay `m` in `w_i = exp(-m·i)`.
    pub decay: f64,
    pub threshold: f64,
}

impl EnsembleConfig {
    pub fn new(window: usize, decay: f64) -> Self {
        Self {
            window,
            decay,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.window == 0 {
            return Err(EnsembleError::InvalidConfig("window must be at least 1".into()));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(EnsembleError::InvalidConfig(format!(
                "decay must be >= 0, got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// One prediction for a given step from a past model call.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Steps since the chunk was emitted (= offset into the chunk).
    pub age: u64,
    /// Flattened normalized frame.
    pub continuous: [f64; CONTINUOUS_DIM],
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub frame: ActionFrame,
    /// Blended button probabilities before thresholding.
    pub probs: Vec<f64>,
    /// Number of candidates blended.
    pub used: usize,
}

/// Ring of recent chunk predictions keyed by emission step.
#[derive(Debug, Clone)]
pub struct ChunkBuffer {
    capacity: usize,
    chunks: VecDeque<PolicyOutput>,
}

impl ChunkBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            chunks: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn clear(&mut self) {
        self.chunks.clear();
    }

    pub fn push(&mut self, output: PolicyOutput) -> Result<(), EnsembleError> {
        if let Some(last) = self.chunks.back() {
            if output.start_step <= last.start_step {
                return Err(EnsembleError::NonMonotonicStep {
                    last: last.start_step,
                    got: output.start_step,
                });
            }
        }
        if self.chunks.len() == self.capacity {
            self.chunks.pop_front();
        }
        self.chunks.push_back(output);
        Ok(())
    }

    pub fn get(&self, start_step: u64) -> Option<&PolicyOutput> {
        self.chunks
            .binary_search_by_key(&start_step, |c| c.start_step)
            .ok()
            .map(|i| &self.chunks[i])
    }

    /// Most recent chunks first.
    pub fn iter_newest(&self) -> impl Iterator<Item = &PolicyOutput> {
        self.chunks.iter().rev()
    }

    pub fn newest(&self) -> Option<&PolicyOutput> {
        self.chunks.back()
    }

    /// Up to `window` chunks covering `t`, newest first, each evaluated at
    /// its offset for `t`.
    pub fn candidates(&self, t: u64, window: usize) -> Vec<Candidate> {
        self.iter_newest()
            .filter(|c| c.covers(t))
            .take(window)
            .map(|c| {
                let offset = (t - c.start_step) as usize;
                Candidate {
                    age: t - c.start_step,
                    continuous: c.frame(offset).frame.flatten().continuous,
                    probs: c.bool_probs(offset),
                }
            })
            .collect()
    }

    /// Exponentially weighted blend of the candidates for step `t`.
    pub fn aggregate(&self, t: u64, cfg: &EnsembleConfig) -> Result<Aggregate, EnsembleError> {
        cfg.validate()?;
        let cands = self.candidates(t, cfg.window);
        if cands.is_empty() {
            return Err(EnsembleError::NoCoverage(t));
        }
        Ok(blend(&cands, cfg.decay, cfg.threshold))
    }

    /// Open-loop execution: the chunk emitted at the latest multiple of
    /// `horizon` at or before `t`, indexed at `t mod horizon`.
    pub fn no_sw(&self, t: u64, horizon: usize) -> Result<Aggregate, EnsembleError> {
        let h = horizon as u64;
        let start = t - t % h;
        let chunk = self
            .get(start)
            .filter(|c| c.covers(t))
            .ok_or(EnsembleError::NoCoverage(t))?;
        let offset = (t - start) as usize;
        let probs = chunk.bool_probs(offset);
        Ok(Aggregate {
            frame: chunk.frame(offset).frame,
            probs,
            used: 1,
        })
    }
}

/// Weights `exp(-m·age)` normalized to sum to one.
pub fn weights(ages: &[u64], decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = ages.iter().map(|&a| (-decay * a as f64).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Blends candidates (newest first). Quaternions are aligned to the newest
/// candidate's hemisphere, averaged and renormalized.
pub fn blend(cands: &[Candidate], decay: f64, threshold: f64) -> Aggregate {
    let ages: Vec<u64> = cands.iter().map(|c| c.age).collect();
    let w = weights(&ages, decay);
    let newest = &cands[0].continuous;
    let mut out = [0.0; CONTINUOUS_DIM];
    for (c, &wi) in cands.iter().zip(&w) {
        let mut v = c.continuous;
        for &q in &QUAT_SLOTS {
            let dot: f64 = (0..4).map(|k| v[q + k] * newest[q + k]).sum();
            if dot < 0.0 {
                for x in &mut v[q..q + 4] {
                    *x = -*x;
                }
            }
        }
        for (o, x) in out.iter_mut().zip(&v) {
            *o += wi * x;
        }
    }
    let nb = cands[0].probs.len();
    let mut probs = vec![0.0; nb];
    for (c, &wi) in cands.iter().zip(&w) {
        for (p, x) in probs.iter_mut().zip(&c.probs) {
            *p += wi * x;
        }
    }
    let bools: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let frame = unflatten(&out, &bools).expect("candidate shape is canonical").frame;
    Aggregate {
        frame,
        probs,
        used: cands.len(),
    }
}
