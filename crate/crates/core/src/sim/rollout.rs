//! Closed-loop play: agents, execution modes, traces and demo recording.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::game::{GameState, HitRule, Judgement, ScoreReport};
use super::map::NoteMap;
use super::observe::{observation_encode, DEFAULT_NOTE_SLOTS};
use super::oracle::{rest_frame, OraclePlan};
use super::SimError;
use crate::action::{ActionFrame, Observation};
use crate::dataset::{DemoFrame, Episode};
use crate::ensembler::{ChunkBuffer, EnsembleConfig};
use crate::geometry::Pose;
use crate::horizon::{
    action_variance, controller_update, historical_consistency, motion_speed, prediction_entropy, ControllerConfig,
    ControllerState, Signal, SignalSnapshot,
};
use crate::nn::Real;
use crate::policy::{stack_history, ChunkModel, PolicyOutput};

/// Policy steps per second (the demonstration capture rate).
pub const POLICY_RATE_HZ: f64 = 30.0;
pub const DEFAULT_PHYSICS_HZ: f64 = 60.0;
/// Intervals used for the motion-speed signal.
pub const MOTION_INTERVALS: usize = 8;

pub fn policy_dt() -> f64 {
    1.0 / POLICY_RATE_HZ
}

/// What an agent is told at each policy step.
#[derive(Debug)]
pub struct StepContext<'a> {
    pub step: u64,
    /// Game clock when the observation was taken.
    pub time: f64,
    pub obs: &'a Observation,
}

pub trait Agent {
    fn name(&self) -> String;

    /// Steps per full prediction.
    fn horizon(&self) -> usize;

    fn num_buttons(&self) -> usize;

    /// Called before each run.
    fn reset(&mut self, map: &NoteMap, rule: &HitRule, run_seed: u64);

    /// Predicts `len` steps starting at `ctx.step`.
    fn act(&mut self, ctx: &StepContext<'_>, len: usize) -> Result<PolicyOutput, SimError>;
}

/// Boxed agent constructor, for running cells concurrently.
pub type AgentFactory<'a> = dyn Fn() -> Box<dyn Agent + Send + 'a> + Sync + 'a;

/// Time at the end of policy step `step` (when its frame is fully shown).
fn frame_time(step: u64) -> f64 {
    (step + 1) as f64 * policy_dt()
}

/// The scripted expert, optionally with position noise.
#[derive(Debug, Clone)]
pub struct OracleAgent {
    pub sigma: f64,
    horizon: usize,
    num_buttons: usize,
    plan: Option<OraclePlan>,
    rng: ChaCha8Rng,
}

impl OracleAgent {
    pub fn new(sigma: f64, horizon: usize, num_buttons: usize) -> Self {
        Self {
            sigma,
            horizon,
            num_buttons,
            plan: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Agent for OracleAgent {
    fn name(&self) -> String {
        format!("oracle(sigma={})", self.sigma)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_buttons(&self) -> usize {
        self.num_buttons
    }

    fn reset(&mut self, map: &NoteMap, rule: &HitRule, run_seed: u64) {
        self.plan = Some(OraclePlan::new(map, *rule, self.num_buttons));
        self.rng = ChaCha8Rng::seed_from_u64(run_seed);
    }

    fn act(&mut self, ctx: &StepContext<'_>, len: usize) -> Result<PolicyOutput, SimError> {
        let plan = self.plan.as_ref().ok_or(SimError::NotReset)?;
        let frames: Vec<ActionFrame> = (0..len as u64)
            .map(|i| plan.noisy_frame(frame_time(ctx.step + i), self.sigma, &mut self.rng))
            .collect();
        Ok(PolicyOutput::from_frames(ctx.step, &frames))
    }
}

/// Expert whose chunks run at a per-chunk rate error and carry per-frame
/// jitter. Errors grow with a prediction's age, so fresh chunks are the
/// most accurate while blending several averages the jitter out.
#[derive(Debug, Clone)]
pub struct NoisyOracleAgent {
    /// Std of the relative playback-rate error of each chunk.
    pub rate_sigma: f64,
    /// Std of per-frame position jitter, meters.
    pub jitter: f64,
    horizon: usize,
    num_buttons: usize,
    plan: Option<OraclePlan>,
    rng: ChaCha8Rng,
}

impl NoisyOracleAgent {
    /// Places open-loop accuracy around 60% on the preset maps.
    pub const DEFAULT_RATE_SIGMA: f64 = 0.8;
    pub const DEFAULT_JITTER: f64 = 0.02;

    pub fn new(rate_sigma: f64, jitter: f64, horizon: usize, num_buttons: usize) -> Self {
        Self {
            rate_sigma,
            jitter,
            horizon,
            num_buttons,
            plan: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Agent for NoisyOracleAgent {
    fn name(&self) -> String {
        format!("noisy-oracle(rate={}, jitter={})", self.rate_sigma, self.jitter)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_buttons(&self) -> usize {
        self.num_buttons
    }

    fn reset(&mut self, map: &NoteMap, rule: &HitRule, run_seed: u64) {
        self.plan = Some(OraclePlan::new(map, *rule, self.num_buttons));
        self.rng = ChaCha8Rng::seed_from_u64(run_seed);
    }

    fn act(&mut self, ctx: &StepContext<'_>, len: usize) -> Result<PolicyOutput, SimError> {
        let plan = self.plan.as_ref().ok_or(SimError::NotReset)?;
        let rate = 1.0 + self.rate_sigma * self.rng.sample::<f64, _>(StandardNormal);
        let t0 = frame_time(ctx.step);
        let frames: Vec<ActionFrame> = (0..len)
            .map(|i| plan.noisy_frame(t0 + i as f64 * policy_dt() * rate, self.jitter, &mut self.rng))
            .collect();
        Ok(PolicyOutput::from_frames(ctx.step, &frames))
    }
}

/// Holds the rest pose. Does no work, so it bounds pipeline overhead.
#[derive(Debug, Clone)]
pub struct IdentityAgent {
    horizon: usize,
    frame: ActionFrame,
}

impl IdentityAgent {
    pub fn new(horizon: usize, num_buttons: usize) -> Self {
        Self {
            horizon,
            frame: rest_frame(num_buttons),
        }
    }
}

impl Agent for IdentityAgent {
    fn name(&self) -> String {
        "identity".into()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_buttons(&self) -> usize {
        self.frame.num_buttons()
    }

    fn reset(&mut self, _: &NoteMap, _: &HitRule, _: u64) {}

    fn act(&mut self, ctx: &StepContext<'_>, len: usize) -> Result<PolicyOutput, SimError> {
        Ok(PolicyOutput::from_frames(ctx.step, &vec![self.frame; len]))
    }
}

/// A trained (or randomly initialized) network.
pub struct ModelAgent<'m, F: Real, M: ChunkModel<F>> {
    model: &'m M,
    label: String,
    history: VecDeque<Observation>,
    _f: std::marker::PhantomData<F>,
}

impl<'m, F: Real, M: ChunkModel<F>> ModelAgent<'m, F, M> {
    pub fn new(model: &'m M, label: impl Into<String>) -> Self {
        Self {
            model,
            label: label.into(),
            history: VecDeque::new(),
            _f: std::marker::PhantomData,
        }
    }
}

impl<F: Real, M: ChunkModel<F>> Agent for ModelAgent<'_, F, M> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn num_buttons(&self) -> usize {
        self.model.config().num_buttons
    }

    fn reset(&mut self, _: &NoteMap, _: &HitRule, _: u64) {
        self.history.clear();
    }

    fn act(&mut self, ctx: &StepContext<'_>, len: usize) -> Result<PolicyOutput, SimError> {
        let h = self.model.config().history.max(1);
        if self.history.is_empty() {
            self.history.extend(std::iter::repeat_n(ctx.obs.clone(), h));
        } else {
            self.history.push_back(ctx.obs.clone());
        }
        while self.history.len() > h {
            self.history.pop_front();
        }
        let obs = if h == 1 {
            ctx.obs.clone()
        } else {
            stack_history(self.history.make_contiguous())
        };
        let mut out = self.model.predict(&obs, len)?;
        out.start_step = ctx.step;
        Ok(out)
    }
}

/// How predictions turn into executed frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Each chunk runs open loop to completion; one model call per `H` steps.
    NoSw,
    FixedSw {
        window: usize,
        decay: f64,
    },
    Adaptive(ControllerConfig),
}

impl Mode {
    pub fn adaptive(signal: Signal, horizon: usize) -> Self {
        Mode::Adaptive(ControllerConfig::new(signal, horizon))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::NoSw => write!(f, "nosw"),
            Mode::FixedSw { window, decay } => write!(f, "sw(W={window},m={decay})"),
            Mode::Adaptive(c) => write!(f, "adaptive({})", c.signal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// Physics tick rate; a positive multiple of the policy rate.
    pub physics_hz: f64,
    pub repeats: usize,
    /// Seed of the first repeat; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub rule: HitRule,
    pub note_slots: usize,
    /// Decode only as many steps as the current window needs (adaptive mode).
    pub decode_window: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            physics_hz: DEFAULT_PHYSICS_HZ,
            repeats: 3,
            seed: 0,
            rule: HitRule::default(),
            note_slots: DEFAULT_NOTE_SLOTS,
            decode_window: false,
        }
    }
}

impl RunConfig {
    pub fn substeps(&self) -> Result<usize, SimError> {
        let ratio = self.physics_hz / POLICY_RATE_HZ;
        let n = ratio.round();
        if !(n >= 1.0 && (ratio - n).abs() < 1e-9) {
            return Err(SimError::InvalidConfig(format!(
                "physics rate {} Hz is not a multiple of {POLICY_RATE_HZ} Hz",
                self.physics_hz
            )));
        }
        Ok(n as usize)
    }
}

/// One row of the per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub window: usize,
    pub decay: f64,
    /// Smoothed normalized signal (adaptive mode only, else 0).
    pub s_hat: f64,
    pub signals: SignalSnapshot,
    /// Candidates blended.
    pub used: usize,
    pub model_called: bool,
    pub good: u32,
    pub combo: u32,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: ScoreReport,
    pub trace: Vec<TraceRow>,
    pub log: Vec<Judgement>,
    /// Executed frame of every step.
    pub actions: Vec<ActionFrame>,
}

/// Positions lerped, orientations normalized-lerped; buttons switch at the
/// midpoint.
pub fn interpolate_frame(a: &ActionFrame, b: &ActionFrame, f: f64) -> ActionFrame {
    if f >= 1.0 {
        return *b;
    }
    let pose = |p: &Pose, q: &Pose| {
        let mut qc = q.orientation.components();
        let pc = p.orientation.components();
        let dot: f64 = pc.iter().zip(&qc).map(|(x, y)| x * y).sum();
        if dot < 0.0 {
            qc = qc.map(|c| -c);
        }
        let mixed: [f64; 4] = std::array::from_fn(|i| pc[i] + (qc[i] - pc[i]) * f);
        let orientation = crate::geometry::normalize_quaternion(mixed).unwrap_or(q.orientation);
        Pose::new(p.position.lerp(q.position, f), orientation)
    };
    let mix = |x: f64, y: f64| x + (y - x) * f;
    ActionFrame {
        head: pose(&a.head, &b.head),
        left: pose(&a.left, &b.left),
        right: pose(&a.right, &b.right),
        triggers: std::array::from_fn(|i| mix(a.triggers[i], b.triggers[i])),
        grips: std::array::from_fn(|i| mix(a.grips[i], b.grips[i])),
        joysticks: std::array::from_fn(|i| mix(a.joysticks[i], b.joysticks[i])),
        origin: a.origin.lerp(b.origin, f),
        buttons: if f < 0.5 { a.buttons } else { b.buttons },
    }
}

/// Runs the physics from `prev` to `next` over one policy step.
pub(crate) fn advance(game: &mut GameState, prev: &ActionFrame, next: &ActionFrame, substeps: usize) {
    let dt = policy_dt() / substeps as f64;
    for s in 1..=substeps {
        let f = interpolate_frame(prev, next, s as f64 / substeps as f64);
        game.step(&f, dt);
    }
}

fn num_steps(map: &NoteMap, rule: &HitRule) -> u64 {
    (map.end_time(rule.window) / policy_dt()).ceil() as u64
}

/// Plays `map` once with `agent` under `mode`.
pub fn run_closed_loop(
    agent: &mut dyn Agent,
    map: &NoteMap,
    mode: &Mode,
    cfg: &RunConfig,
    run_seed: u64,
) -> Result<RunResult, SimError> {
    let substeps = cfg.substeps()?;
    let horizon = agent.horizon();
    if horizon == 0 {
        return Err(SimError::InvalidConfig("agent horizon must be positive".into()));
    }
    let mut controller = match mode {
        Mode::Adaptive(c) => {
            c.validate()?;
            if c.w_max > horizon {
                return Err(SimError::InvalidConfig(format!(
                    "controller w_max {} exceeds horizon {horizon}",
                    c.w_max
                )));
            }
            Some((c, ControllerState::new(c)))
        }
        Mode::FixedSw { window, decay } => {
            EnsembleConfig::new(*window, *decay).validate()?;
            None
        }
        Mode::NoSw => None,
    };
    agent.reset(map, &cfg.rule, run_seed);
    let rest = rest_frame(agent.num_buttons());
    let mut game = GameState::new(map, cfg.rule, &rest);
    let mut prev = rest;
    let mut executed: VecDeque<ActionFrame> = VecDeque::from([rest]);
    let mut buffer = ChunkBuffer::new(horizon + 1);
    let steps = num_steps(map, &cfg.rule);
    let mut trace = Vec::with_capacity(steps as usize);
    let mut actions = Vec::with_capacity(steps as usize);
    for k in 0..steps {
        let obs = observation_encode(&game, &prev, k, cfg.note_slots);
        let call = match mode {
            Mode::NoSw => k % horizon as u64 == 0,
            _ => true,
        };
        if call {
            let len = match (&controller, cfg.decode_window) {
                (Some((c, st)), true) => st.window(c),
                _ => horizon,
            };
            let ctx = StepContext {
                step: k,
                time: game.clock,
                obs: &obs,
            };
            let out = agent.act(&ctx, len)?;
            if out.start_step != k || out.is_empty() || out.num_buttons() != agent.num_buttons() {
                return Err(SimError::InvalidConfig(format!(
                    "agent '{}' returned a malformed chunk at step {k}",
                    agent.name()
                )));
            }
            buffer.push(out)?;
        }

        let mut snap = SignalSnapshot {
            step: k,
            ..Default::default()
        };
        let (frame, window, decay, s_hat, used) = match (mode, &mut controller) {
            (Mode::Adaptive(_), Some((c, st))) => {
                let frames: Vec<ActionFrame> = executed.iter().copied().collect();
                snap.motion_speed = motion_speed(&frames, policy_dt(), MOTION_INTERVALS).unwrap_or(0.0);
                snap.prediction_entropy = buffer.newest().map_or(0.0, prediction_entropy);
                snap.action_variance = action_variance(&buffer, k, st.window(c))?;
                snap.historical_consistency = historical_consistency(&buffer, c.scales.consistency).unwrap_or(1.0);
                let (w, m) = controller_update(&snap, c, st, None);
                let agg = buffer.aggregate(k, &EnsembleConfig::new(w, m))?;
                (agg.frame, w, m, st.s_hat.unwrap_or(0.0), agg.used)
            }
            (Mode::FixedSw { window, decay }, _) => {
                let agg = buffer.aggregate(k, &EnsembleConfig::new(*window, *decay))?;
                (agg.frame, *window, *decay, 0.0, agg.used)
            }
            _ => (buffer.no_sw(k, horizon)?.frame, 1, 0.0, 0.0, 1),
        };

        advance(&mut game, &prev, &frame, substeps);
        prev = frame;
        actions.push(frame);
        executed.push_back(frame);
        if executed.len() > MOTION_INTERVALS + 1 {
            executed.pop_front();
        }
        trace.push(TraceRow {
            step: k,
            time: game.clock,
            window,
            decay,
            s_hat,
            signals: snap,
            used,
            model_called: call,
            good: game.good,
            combo: game.combo,
        });
    }
    Ok(RunResult {
        report: game.report(),
        trace,
        log: game.log,
        actions,
    })
}

/// Mean over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedReport {
    pub runs: Vec<ScoreReport>,
    pub total_notes: u32,
    pub accuracy: f64,
    pub max_combo: f64,
    pub good_hits: f64,
}

impl AveragedReport {
    pub fn from_runs(runs: Vec<ScoreReport>) -> Self {
        let n = runs.len().max(1) as f64;
        Self {
            total_notes: runs.first().map_or(0, |r| r.total_notes),
            accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / n,
            max_combo: runs.iter().map(|r| r.max_combo as f64).sum::<f64>() / n,
            good_hits: runs.iter().map(|r| r.good_hits as f64).sum::<f64>() / n,
            runs,
        }
    }

    pub fn rank(&self) -> super::game::Rank {
        super::game::rank(self.accuracy)
    }
}

/// `cfg.repeats` runs with seeds `cfg.seed ..`.
pub fn run_repeated(
    agent: &mut dyn Agent,
    map: &NoteMap,
    mode: &Mode,
    cfg: &RunConfig,
) -> Result<AveragedReport, SimError> {
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats.max(1) {
        runs.push(run_closed_loop(agent, map, mode, cfg, cfg.seed.wrapping_add(r as u64))?.report);
    }
    Ok(AveragedReport::from_runs(runs))
}

pub fn write_trace<W: Write>(trace: &[TraceRow], mut w: W) -> Result<(), SimError> {
    writeln!(
        w,
        "step,time,window,decay,s_hat,motion_speed,prediction_entropy,action_variance,historical_consistency,used,model_called,good,combo"
    )?;
    for r in trace {
        let s = &r.signals;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.time,
            r.window,
            r.decay,
            r.s_hat,
            s.motion_speed,
            s.prediction_entropy,
            s.action_variance,
            s.historical_consistency,
            r.used,
            u8::from(r.model_called),
            r.good,
            r.combo
        )?;
    }
    Ok(())
}

/// Records one expert episode on `map` at the policy rate.
pub fn record_episode(
    map: &NoteMap,
    id: u64,
    sigma: f64,
    num_buttons: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<Episode, SimError> {
    let substeps = cfg.substeps()?;
    let plan = OraclePlan::new(map, cfg.rule, num_buttons);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest = rest_frame(num_buttons);
    let mut game = GameState::new(map, cfg.rule, &rest);
    let mut prev = rest;
    let steps = num_steps(map, &cfg.rule);
    let mut frames = Vec::with_capacity(steps as usize);
    for k in 0..steps {
        let observation = observation_encode(&game, &prev, k, cfg.note_slots);
        let action = plan.noisy_frame(frame_time(k), sigma, &mut rng);
        frames.push(DemoFrame {
            observation,
            action,
            timestamp_ns: (k as f64 * policy_dt() * 1e9).round() as u64,
        });
        advance(&mut game, &prev, &action, substeps);
        prev = action;
    }
    Ok(Episode::new(id, frames, POLICY_RATE_HZ)?)
}

/// Draws a seed for cell `i` of a grid from a base seed.
pub fn cell_seed(base: u64, i: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(i);
    r.random()
}
