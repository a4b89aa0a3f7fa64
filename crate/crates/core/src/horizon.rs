//! Adaptation signals and the controller that maps one of them to the
//! blending window and decay at run time.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::action::{ActionFrame, CONTINUOUS_DIM};
use crate::ensembler::{ChunkBuffer, EnsembleError};
use crate::policy::PolicyOutput;
use crate::training::PROB_EPS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HorizonError {
    #[error("insufficient history: need {needed}, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    MotionSpeed,
    Entropy,
    Variance,
    Consistency,
}

impl Signal {
    pub const ALL: [Signal; 4] = [
        Signal::MotionSpeed,
        Signal::Entropy,
        Signal::Variance,
        Signal::Consistency,
    ];
}

impl FromStr for Signal {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "motion" | "motion_speed" => Ok(Self::MotionSpeed),
            "entropy" => Ok(Self::Entropy),
            "variance" => Ok(Self::Variance),
            "consistency" => Ok(Self::Consistency),
            other => Err(format!(
                "unknown signal '{other}' (expected motion|entropy|variance|consistency)"
            )),
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MotionSpeed => "motion",
            Self::Entropy => "entropy",
            Self::Variance => "variance",
            Self::Consistency => "consistency",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SignalSnapshot {
    /// m/s.
    pub motion_speed: f64,
    /// nats.
    pub prediction_entropy: f64,
    pub action_variance: f64,
    /// In `[0, 1]`; 1 = consecutive chunks agree.
    pub historical_consistency: f64,
    pub step: u64,
}

impl SignalSnapshot {
    pub fn get(&self, s: Signal) -> f64 {
        match s {
            Signal::MotionSpeed => self.motion_speed,
            Signal::Entropy => self.prediction_entropy,
            Signal::Variance => self.action_variance,
            Signal::Consistency => self.historical_consistency,
        }
    }
}

/// Mean controller speed over the last `k` intervals of `frames`
/// (oldest first), averaging the two hands.
pub fn motion_speed(frames: &[ActionFrame], dt: f64, k: usize) -> Result<f64, HorizonError> {
    if frames.len() < 2 {
        return Err(HorizonError::InsufficientHistory {
            needed: 2,
            have: frames.len(),
        });
    }
    let intervals = k.min(frames.len() - 1).max(1);
    let tail = &frames[frames.len() - intervals - 1..];
    let total: f64 = tail
        .windows(2)
        .map(|w| {
            let l = w[1].left.position.distance(w[0].left.position);
            let r = w[1].right.position.distance(w[0].right.position);
            (l + r) / (2.0 * dt)
        })
        .sum();
    Ok(total / intervals as f64)
}

fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Mean binary entropy of the button probabilities of one output.
pub fn prediction_entropy(out: &PolicyOutput) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in &out.bool_logits {
        for &l in row {
            sum += binary_entropy(crate::nn::sigmoid(l));
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over continuous dims of the population variance across the
/// candidates blended for step `t`.
pub fn action_variance(buffer: &ChunkBuffer, t: u64, window: usize) -> Result<f64, HorizonError> {
    let cands = buffer.candidates(t, window);
    if cands.is_empty() {
        return Err(EnsembleError::NoCoverage(t).into());
    }
    let n = cands.len() as f64;
    let mut total = 0.0;
    for d in 0..CONTINUOUS_DIM {
        let mean = cands.iter().map(|c| c.continuous[d]).sum::<f64>() / n;
        total += cands.iter().map(|c| (c.continuous[d] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / CONTINUOUS_DIM as f64)
}

/// Agreement of the two newest chunks over their overlapping steps:
/// `1 − clamp(mean L1 / s_ref, 0, 1)`.
pub fn historical_consistency(buffer: &ChunkBuffer, s_ref: f64) -> Result<f64, HorizonError> {
    let mut it = buffer.iter_newest();
    let (Some(newer), Some(older)) = (it.next(), it.next()) else {
        return Err(HorizonError::InsufficientHistory {
            needed: 2,
            have: buffer.len(),
        });
    };
    let start = newer.start_step;
    let end = (older.start_step + older.len() as u64).min(newer.start_step + newer.len() as u64);
    if end <= start {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in start..end {
        let a = newer.frame((t - newer.start_step) as usize).frame.flatten().continuous;
        let b = older.frame((t - older.start_step) as usize).frame.flatten().continuous;
        sum += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / CONTINUOUS_DIM as f64;
    }
    let mean = sum / (end - start) as f64;
    Ok(1.0 - (mean / s_ref).clamp(0.0, 1.0))
}

/// Reference scales that map each raw signal onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalScales {
    pub motion: f64,
    pub entropy: f64,
    pub variance: f64,
    /// L1 distance at which consistency reaches 0.
    pub consistency: f64,
}

impl Default for SignalScales {
    fn default() -> Self {
        Self {
            motion: 2.0,
            entropy: std::f64::consts::LN_2,
            variance: 0.05,
            consistency: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub signal: Signal,
    pub w_min: usize,
    pub w_max: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub scales: SignalScales,
    /// EMA factor in `(0, 1]`.
    pub alpha: f64,
    /// Minimum change of the target window before `W` moves.
    pub hysteresis: usize,
    /// Per-step latency budget; `None` disables the deadline fallback.
    pub budget: Option<Duration>,
    /// Consecutive in-budget steps before one unit of fallback is undone.
    pub recovery_steps: usize,
}

impl ControllerConfig {
    pub fn new(signal: Signal, horizon: usize) -> Self {
        Self {
            signal,
            w_min: 1,
            w_max: horizon,
            m_min: 0.05,
            m_max: 1.0,
            scales: SignalScales::default(),
            alpha: 0.2,
            hysteresis: 2,
            budget: None,
            recovery_steps: 30,
        }
    }

    pub fn validate(&self) -> Result<(), HorizonError> {
        let bad = |m: String| Err(HorizonError::InvalidConfig(m));
        if self.w_min == 0 || self.w_min > self.w_max {
            return bad(format!("need 1 <= w_min <= w_max, got {}..{}", self.w_min, self.w_max));
        }
        if !(self.m_min >= 0.0 && self.m_min <= self.m_max && self.m_max.is_finite()) {
            return bad(format!("need 0 <= m_min <= m_max, got {}..{}", self.m_min, self.m_max));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        let s = self.scales;
        if [s.motion, s.entropy, s.variance, s.consistency]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return bad("signal scales must be positive".into());
        }
        Ok(())
    }

    /// Raw signal mapped to `[0, 1]` (high = shorten the window).
    pub fn normalized(&self, snap: &SignalSnapshot) -> f64 {
        let s = &self.scales;
        let v = match self.signal {
            Signal::MotionSpeed => snap.motion_speed / s.motion,
            Signal::Entropy => snap.prediction_entropy / s.entropy,
            Signal::Variance => snap.action_variance / s.variance,
            Signal::Consistency => 1.0 - snap.historical_consistency,
        };
        if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        }
    }

    /// Window target before hysteresis, rounded half away from zero.
    pub fn target_window(&self, s_hat: f64) -> usize {
        let span = (self.w_max - self.w_min) as f64;
        let w = (self.w_max as f64 - s_hat * span).round() as usize;
        w.clamp(self.w_min, self.w_max)
    }

    pub fn decay(&self, s_hat: f64) -> f64 {
        self.m_min + s_hat * (self.m_max - self.m_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub s_hat: Option<f64>,
    /// Window after hysteresis, before the deadline penalty.
    pub base_window: usize,
    /// Current fallback reduction.
    pub penalty: usize,
    pub in_budget_run: usize,
    /// Steps on which the fallback was (re)engaged.
    pub fallback_events: u64,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            s_hat: None,
            base_window: cfg.w_max,
            penalty: 0,
            in_budget_run: 0,
            fallback_events: 0,
        }
    }

    pub fn window(&self, cfg: &ControllerConfig) -> usize {
        self.base_window.saturating_sub(self.penalty).max(cfg.w_min)
    }
}

/// Advances the controller by one step. `last_latency` is the measured
/// duration of the previous control step, if any.
pub fn controller_update(
    snap: &SignalSnapshot,
    cfg: &ControllerConfig,
    state: &mut ControllerState,
    last_latency: Option<Duration>,
) -> (usize, f64) {
    let x = cfg.normalized(snap);
    let s_hat = match state.s_hat {
        None => x,
        Some(prev) => (1.0 - cfg.alpha) * prev + cfg.alpha * x,
    };
    state.s_hat = Some(s_hat);

    let target = cfg.target_window(s_hat);
    if target.abs_diff(state.base_window) >= cfg.hysteresis {
        state.base_window = target;
    }

    if let (Some(budget), Some(lat)) = (cfg.budget, last_latency) {
        if lat > budget {
            state.in_budget_run = 0;
            if state.window(cfg) > cfg.w_min {
                state.penalty += 1;
            }
            state.fallback_events += 1;
        } else {
            state.in_budget_run += 1;
            if state.penalty > 0 && state.in_budget_run >= cfg.recovery_steps {
                state.penalty -= 1;
                state.in_budget_run = 0;
            }
        }
    }
    (state.window(cfg), cfg.decay(s_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn snap_motion(v: f64) -> SignalSnapshot {
        SignalSnapshot {
            motion_speed: v,
            ..Default::default()
        }
    }

    #[test]
    fn motion_examples() {
        let rest = ActionFrame::rest(6).unwrap();
        assert_eq!(motion_speed(&[rest; 5], 1.0 / 30.0, 8).unwrap(), 0.0);
        let frames: Vec<ActionFrame> = (0..10)
            .map(|i| {
                let mut f = rest;
                f.right.position = Vec3::new(0.02 * i as f64, 1.0, 0.0);
                f
            })
            .collect();
        assert!((motion_speed(&frames, 1.0 / 30.0, 8).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(
            motion_speed(&[rest], 1.0 / 30.0, 8),
            Err(HorizonError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let f = ActionFrame::rest(3).unwrap();
        let mut out = PolicyOutput::from_frames(0, &[f, f]);
        for row in &mut out.bool_logits {
            row.iter_mut().for_each(|l| *l = 0.0);
        }
        assert!((prediction_entropy(&out) - std::f64::consts::LN_2).abs() < 1e-15);
        let saturated = PolicyOutput::from_frames(0, &[f, f]);
        assert!(prediction_entropy(&saturated) < 1e-5);

        let logits = [[-2.0, 0.3, 1.7], [4.0, -0.1, 0.0]];
        for (r, row) in out.bool_logits.iter_mut().enumerate() {
            row.copy_from_slice(&logits[r]);
        }
        let mut acc = 0.0;
        for row in logits {
            for l in row {
                let p: f64 = 1.0 / (1.0 + (-l).exp());
                acc += -(p * p.ln()) - (1.0 - p) * (1.0 - p).ln();
            }
        }
        assert!((prediction_entropy(&out) - acc / 6.0).abs() < 1e-12);
    }

    fn chunk(start: u64, len: usize, x: f64) -> PolicyOutput {
        let mut f = ActionFrame::rest(2).unwrap();
        f.origin.x = x;
        PolicyOutput::from_frames(start, &vec![f; len])
    }

    #[test]
    fn variance_examples() {
        let mut b = ChunkBuffer::new(8);
        b.push(chunk(0, 4, 0.5)).unwrap();
        assert_eq!(action_variance(&b, 1, 4).unwrap(), 0.0);
        b.push(chunk(1, 4, 0.5)).unwrap();
        assert_eq!(action_variance(&b, 1, 4).unwrap(), 0.0);
        let mut b = ChunkBuffer::new(8);
        b.push(chunk(0, 4, 0.0)).unwrap();
        b.push(chunk(1, 4, 2.0)).unwrap();
        assert!((action_variance(&b, 1, 4).unwrap() - 0.03125).abs() < 1e-15);
        assert!(action_variance(&b, 9, 4).is_err());
    }

    #[test]
    fn consistency_examples() {
        let mut b = ChunkBuffer::new(8);
        b.push(chunk(0, 4, 0.0)).unwrap();
        assert!(historical_consistency(&b, 0.1).is_err());
        b.push(chunk(1, 4, 0.0)).unwrap();
        assert_eq!(historical_consistency(&b, 0.1).unwrap(), 1.0);
        // One dim of 32 differing by 3.2 gives a mean L1 of 0.1.
        let mut b = ChunkBuffer::new(8);
        b.push(chunk(0, 4, 0.0)).unwrap();
        b.push(chunk(1, 4, 3.2)).unwrap();
        assert!(historical_consistency(&b, 0.1).unwrap().abs() < 1e-12);
        let mut b = ChunkBuffer::new(8);
        b.push(chunk(0, 4, 0.0)).unwrap();
        b.push(chunk(1, 4, 1.6)).unwrap();
        assert!((historical_consistency(&b, 0.1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn controller_extremes_and_midpoint() {
        let cfg = ControllerConfig::new(Signal::MotionSpeed, 16);
        let mut st = ControllerState::new(&cfg);
        let mut wm = (0, 0.0);
        for _ in 0..50 {
            wm = controller_update(&snap_motion(0.0), &cfg, &mut st, None);
        }
        assert_eq!(wm, (16, 0.05));
        let mut st = ControllerState::new(&cfg);
        for _ in 0..200 {
            wm = controller_update(&snap_motion(10.0), &cfg, &mut st, None);
        }
        assert_eq!(wm.0, 1);
        assert!((wm.1 - 1.0).abs() < 1e-12);
        let mut st = ControllerState::new(&cfg);
        let (w, m) = controller_update(&snap_motion(1.0), &cfg, &mut st, None);
        assert_eq!(w, 9);
        assert!((m - 0.525).abs() < 1e-12);
        assert_eq!(cfg.target_window(0.5), 9);
    }

    #[test]
    fn consistency_polarity() {
        let cfg = ControllerConfig {
            alpha: 1.0,
            hysteresis: 0,
            ..ControllerConfig::new(Signal::Consistency, 16)
        };
        let mut st = ControllerState::new(&cfg);
        let agree = SignalSnapshot {
            historical_consistency: 1.0,
            ..Default::default()
        };
        assert_eq!(controller_update(&agree, &cfg, &mut st, None).0, 16);
        let disagree = SignalSnapshot {
            historical_consistency: 0.0,
            ..Default::default()
        };
        assert_eq!(controller_update(&disagree, &cfg, &mut st, None).0, 1);
    }

    #[test]
    fn hysteresis_holds_small_changes() {
        let cfg = ControllerConfig {
            alpha: 1.0,
            ..ControllerConfig::new(Signal::MotionSpeed, 16)
        };
        let mut st = ControllerState::new(&cfg);
        // target 15 (|15 - 16| < 2) keeps 16
        let v = 2.0 * (1.0 / 15.0);
        assert_eq!(controller_update(&snap_motion(v), &cfg, &mut st, None).0, 16);
        // target 14 moves
        let v = 2.0 * (2.0 / 15.0);
        assert_eq!(controller_update(&snap_motion(v), &cfg, &mut st, None).0, 14);
    }

    #[test]
    fn deadline_fallback_shrinks_then_recovers() {
        let cfg = ControllerConfig {
            budget: Some(Duration::from_micros(16_600)),
            recovery_steps: 3,
            ..ControllerConfig::new(Signal::MotionSpeed, 8)
        };
        let mut st = ControllerState::new(&cfg);
        let slow = Some(Duration::from_millis(30));
        let fast = Some(Duration::from_millis(5));
        assert_eq!(controller_update(&snap_motion(0.0), &cfg, &mut st, None).0, 8);
        assert_eq!(controller_update(&snap_motion(0.0), &cfg, &mut st, slow).0, 7);
        assert_eq!(controller_update(&snap_motion(0.0), &cfg, &mut st, slow).0, 6);
        for _ in 0..20 {
            controller_update(&snap_motion(0.0), &cfg, &mut st, slow);
        }
        assert_eq!(st.window(&cfg), 1);
        assert_eq!(controller_update(&snap_motion(0.0), &cfg, &mut st, fast).0, 1);
        controller_update(&snap_motion(0.0), &cfg, &mut st, fast);
        assert_eq!(controller_update(&snap_motion(0.0), &cfg, &mut st, fast).0, 2);
        assert_eq!(st.fallback_events, 22);
    }

    #[test]
    fn config_validation() {
        let c = ControllerConfig::new(Signal::Entropy, 16);
        assert!(c.validate().is_ok());
        assert!(ControllerConfig { w_min: 0, ..c }.validate().is_err());
        assert!(ControllerConfig { w_min: 17, ..c }.validate().is_err());
        assert!(ControllerConfig { alpha: 0.0, ..c }.validate().is_err());
        assert!(ControllerConfig { m_min: 2.0, ..c }.validate().is_err());
        assert_eq!("motion".parse::<Signal>().unwrap(), Signal::MotionSpeed);
        assert!("speed".parse::<Signal>().is_err());
    }
}
