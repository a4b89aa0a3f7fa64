//! Device-injection boundary: the wire format, a fixed-rate pacer, a
//! validating stub consumer and the per-step pipeline bench.
//!
//! Wire frame layout (152 bytes, little endian):
//!
//! | bytes    | content                                  |
//! |----------|------------------------------------------|
//! | 0..4     | magic `VRSC`                             |
//! | 4..6     | version (1)                              |
//! | 6..8     | flags                                    |
//! | 8..16    | timestamp, nanoseconds                   |
//! | 16..144  | 32 × f32 in the canonical flat layout    |
//! | 144..148 | button bitmask, bit i = button i         |
//! | 148..152 | CRC-32 of bytes 0..148                   |

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::action::{
    ActionError, ActionFrame, Buttons, CONTINUOUS_DIM, GRIPS, HEAD_POS, HEAD_QUAT, JOYSTICKS, LEFT_POS, LEFT_QUAT,
    ORIGIN, QUAT_SLOTS, RIGHT_POS, RIGHT_QUAT, TRIGGERS,
};
use crate::ensembler::{ChunkBuffer, EnsembleConfig, EnsembleError};
use crate::geometry::{Pose, UnitQuat, Vec3};
use crate::horizon::{
    action_variance, controller_update, historical_consistency, motion_speed, prediction_entropy, ControllerConfig,
    ControllerState, HorizonError, Signal, SignalSnapshot,
};
use crate::sim::rollout::{advance, policy_dt, MOTION_INTERVALS};
use crate::sim::{observation_encode, rest_frame, Agent, GameState, HitRule, NoteMap, SimError, StepContext};

pub const MAGIC: [u8; 4] = *b"VRSC";
pub const WIRE_VERSION: u16 = 1;
pub const FRAME_SIZE: usize = 152;
const PAYLOAD_END: usize = 148;
const VALUES_START: usize = 16;
const MASK_START: usize = 144;
/// Largest accepted deviation of a quaternion slot's norm from 1.
pub const QUAT_TOLERANCE: f64 = 1e-5;
/// One frame at 60 Hz.
pub const DEFAULT_BUDGET: Duration = Duration::from_micros(16_667);

#[derive(Debug, Error)]
pub enum InjectionError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch: header says {stored:#010x}, payload hashes to {computed:#010x}")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("short read: need {needed} bytes, got {got}")]
    ShortRead { needed: usize, got: usize },
    #[error("sink closed")]
    SinkClosed,
    #[error("invalid rate {0} Hz")]
    InvalidRate(f64),
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Horizon(#[from] HorizonError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for InjectionError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::WriteZero => {
                InjectionError::SinkClosed
            }
            _ => InjectionError::Io(e),
        }
    }
}

/// One frame as it travels on the wire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireFrame {
    pub version: u16,
    pub flags: u16,
    pub timestamp_ns: u64,
    pub values: [f32; CONTINUOUS_DIM],
    pub buttons: u32,
}

impl WireFrame {
    pub fn from_action(frame: &ActionFrame, timestamp_ns: u64) -> Self {
        let flat = frame.flatten();
        let mut values = [0.0f32; CONTINUOUS_DIM];
        for (v, c) in values.iter_mut().zip(flat.continuous) {
            *v = c as f32;
        }
        Self {
            version: WIRE_VERSION,
            flags: 0,
            timestamp_ns,
            values,
            buttons: frame.buttons.mask(),
        }
    }

    pub fn to_bytes(&self) -> [u8; FRAME_SIZE] {
        let mut b = [0u8; FRAME_SIZE];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.flags.to_le_bytes());
        b[8..16].copy_from_slice(&self.timestamp_ns.to_le_bytes());
        for (i, v) in self.values.iter().enumerate() {
            let at = VALUES_START + 4 * i;
            b[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
        b[MASK_START..PAYLOAD_END].copy_from_slice(&self.buttons.to_le_bytes());
        let crc = crc32fast::hash(&b[..PAYLOAD_END]);
        b[PAYLOAD_END..].copy_from_slice(&crc.to_le_bytes());
        b
    }

    /// Parses and verifies one frame from the start of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InjectionError> {
        if bytes.len() < FRAME_SIZE {
            return Err(InjectionError::ShortRead {
                needed: FRAME_SIZE,
                got: bytes.len(),
            });
        }
        let b = &bytes[..FRAME_SIZE];
        let magic: [u8; 4] = b[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(InjectionError::BadMagic(magic));
        }
        let stored = u32::from_le_bytes(b[PAYLOAD_END..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&b[..PAYLOAD_END]);
        if stored != computed {
            return Err(InjectionError::BadChecksum { stored, computed });
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != WIRE_VERSION {
            return Err(InjectionError::UnsupportedVersion(version));
        }
        let mut values = [0.0f32; CONTINUOUS_DIM];
        for (i, v) in values.iter_mut().enumerate() {
            let at = VALUES_START + 4 * i;
            *v = f32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"));
        }
        Ok(Self {
            version,
            flags: u16::from_le_bytes([b[6], b[7]]),
            timestamp_ns: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            values,
            buttons: u32::from_le_bytes(b[MASK_START..PAYLOAD_END].try_into().expect("4 bytes")),
        })
    }

    /// Rebuilds the frame exactly as sent: no normalization or clamping, so
    /// re-encoding yields the same bytes.
    pub fn to_action(&self, num_buttons: usize) -> Result<ActionFrame, InjectionError> {
        let v: Vec<f64> = self.values.iter().map(|&x| f64::from(x)).collect();
        let vec3 = |r: std::ops::Range<usize>| Vec3::from_slice(&v[r]);
        let quat = |r: std::ops::Range<usize>| UnitQuat::from_unit_components(v[r].try_into().expect("4 slots"));
        Ok(ActionFrame {
            head: Pose::new(vec3(HEAD_POS), quat(HEAD_QUAT)),
            left: Pose::new(vec3(LEFT_POS), quat(LEFT_QUAT)),
            right: Pose::new(vec3(RIGHT_POS), quat(RIGHT_QUAT)),
            triggers: [v[TRIGGERS.start], v[TRIGGERS.start + 1]],
            grips: [v[GRIPS.start], v[GRIPS.start + 1]],
            joysticks: v[JOYSTICKS].try_into().expect("4 slots"),
            origin: vec3(ORIGIN),
            buttons: Buttons::from_mask(self.buttons, num_buttons)?,
        })
    }
}

pub fn encode(frame: &ActionFrame, timestamp_ns: u64) -> [u8; FRAME_SIZE] {
    WireFrame::from_action(frame, timestamp_ns).to_bytes()
}

pub fn decode(bytes: &[u8], num_buttons: usize) -> Result<(ActionFrame, u64), InjectionError> {
    let w = WireFrame::from_bytes(bytes)?;
    Ok((w.to_action(num_buttons)?, w.timestamp_ns))
}

/// Nearest-rank percentile of unsorted samples; 0 for an empty slice.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacerStats {
    pub frames: usize,
    pub duration: Duration,
    pub achieved_hz: f64,
    /// Emission interval minus the nominal period, seconds, one per gap.
    pub period_errors: Vec<f64>,
    /// Percentiles of the absolute period error, seconds.
    pub p50_error: f64,
    pub p99_error: f64,
    /// Frames that were not ready before their slot ended. Each one
    /// re-anchors the schedule to the next free slot on the same grid.
    pub deadline_misses: usize,
    /// Largest lateness of an emission relative to its slot, seconds.
    pub max_lateness: f64,
}

/// Writes every frame from `source` to `sink` at `rate_hz`, slot `k` at
/// `start + k/rate`. Timestamps are slot times since the stream started.
pub fn stream<I, W>(source: I, rate_hz: f64, sink: &mut W) -> Result<PacerStats, InjectionError>
where
    I: IntoIterator<Item = ActionFrame>,
    W: Write + ?Sized,
{
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(InjectionError::InvalidRate(rate_hz));
    }
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let start = Instant::now();
    let slot_time = |k: u64| period.mul_f64(k as f64);
    let mut slot = 0u64;
    let mut frames = 0usize;
    let mut misses = 0usize;
    let mut max_lateness = 0.0f64;
    let mut emitted: Vec<Instant> = Vec::new();
    for frame in source {
        let ready = start.elapsed();
        if ready > slot_time(slot + 1) {
            misses += 1;
            slot = (ready.as_secs_f64() / period.as_secs_f64()).ceil() as u64;
        }
        let due = start + slot_time(slot);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        let bytes = encode(&frame, slot_time(slot).as_nanos() as u64);
        sink.write_all(&bytes)?;
        let at = Instant::now();
        max_lateness = max_lateness.max(at.saturating_duration_since(due).as_secs_f64());
        emitted.push(at);
        frames += 1;
        slot += 1;
    }
    sink.flush()?;
    let end = start + slot_time(slot);
    let now = Instant::now();
    if end > now {
        std::thread::sleep(end - now);
    }
    let duration = start.elapsed();
    let period_errors: Vec<f64> = emitted
        .windows(2)
        .map(|w| (w[1] - w[0]).as_secs_f64() - period.as_secs_f64())
        .collect();
    let abs: Vec<f64> = period_errors.iter().map(|e| e.abs()).collect();
    Ok(PacerStats {
        frames,
        duration,
        achieved_hz: frames as f64 / duration.as_secs_f64(),
        p50_error: percentile(&abs, 50.0),
        p99_error: percentile(&abs, 99.0),
        period_errors,
        deadline_misses: misses,
        max_lateness,
    })
}

#[derive(Debug)]
struct QueueState {
    items: VecDeque<[u8; FRAME_SIZE]>,
    capacity: usize,
    dropped: u64,
    writer_closed: bool,
    reader_closed: bool,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Producer half of a bounded frame queue. Whole frames are queued; when
/// full, the oldest queued frame is dropped.
#[derive(Debug)]
pub struct QueueSink {
    shared: Arc<Shared>,
    partial: Vec<u8>,
}

/// Consumer half; reads as a byte stream and ends once the producer is
/// dropped and the queue drained.
#[derive(Debug)]
pub struct QueueSource {
    shared: Arc<Shared>,
    current: Option<([u8; FRAME_SIZE], usize)>,
}

pub const QUEUE_CAPACITY: usize = 2;

pub fn frame_queue(capacity: usize) -> (QueueSink, QueueSource) {
    assert!(capacity > 0, "queue capacity must be positive");
    let shared = Arc::new(Shared {
        state: Mutex::new(QueueState {
            items: VecDeque::with_capacity(capacity),
            capacity,
            dropped: 0,
            writer_closed: false,
            reader_closed: false,
        }),
        ready: Condvar::new(),
    });
    (
        QueueSink {
            shared: Arc::clone(&shared),
            partial: Vec::with_capacity(FRAME_SIZE),
        },
        QueueSource { shared, current: None },
    )
}

impl QueueSink {
    /// Queues one frame. Returns whether an older frame was dropped.
    pub fn push(&self, frame: [u8; FRAME_SIZE]) -> Result<bool, InjectionError> {
        let mut st = self.shared.lock();
        if st.reader_closed {
            return Err(InjectionError::SinkClosed);
        }
        let mut dropped = false;
        if st.items.len() == st.capacity {
            st.items.pop_front();
            st.dropped += 1;
            dropped = true;
        }
        st.items.push_back(frame);
        self.shared.ready.notify_one();
        Ok(dropped)
    }

    pub fn dropped(&self) -> u64 {
        self.shared.lock().dropped
    }
}

impl Write for QueueSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut rest = buf;
        while !rest.is_empty() {
            let take = (FRAME_SIZE - self.partial.len()).min(rest.len());
            self.partial.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if self.partial.len() == FRAME_SIZE {
                let frame: [u8; FRAME_SIZE] = self.partial[..].try_into().expect("full frame");
                self.partial.clear();
                self.push(frame)
                    .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "queue reader closed"))?;
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for QueueSink {
    fn drop(&mut self) {
        self.shared.lock().writer_closed = true;
        self.shared.ready.notify_all();
    }
}

impl QueueSource {
    /// Blocks for the next frame; `None` once the producer is gone and the
    /// queue is empty.
    pub fn pop(&self) -> Option<[u8; FRAME_SIZE]> {
        let mut st = self.shared.lock();
        loop {
            if let Some(f) = st.items.pop_front() {
                return Some(f);
            }
            if st.writer_closed {
                return None;
            }
            st = self.shared.ready.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn dropped(&self) -> u64 {
        self.shared.lock().dropped
    }
}

impl Read for QueueSource {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        if self.current.is_none() {
            self.current = self.pop().map(|f| (f, 0));
        }
        let Some((frame, pos)) = self.current.as_mut() else {
            return Ok(0);
        };
        let n = (FRAME_SIZE - *pos).min(buf.len());
        buf[..n].copy_from_slice(&frame[*pos..*pos + n]);
        *pos += n;
        if *pos == FRAME_SIZE {
            self.current = None;
        }
        Ok(n)
    }
}

impl Drop for QueueSource {
    fn drop(&mut self) {
        self.shared.lock().reader_closed = true;
    }
}

/// Violation counts seen by the stub consumer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub frames: u64,
    pub bad_magic: u64,
    pub bad_checksum: u64,
    pub bad_version: u64,
    /// Timestamps that did not strictly increase.
    pub non_monotonic: u64,
    /// Quaternion slots off unit norm by more than [`QUAT_TOLERANCE`].
    pub non_unit_quaternion: u64,
    /// Trigger, grip or joystick values outside their range.
    pub analog_range: u64,
    pub non_finite: u64,
    /// Bytes left over after the last whole frame.
    pub trailing_bytes: u64,
    pub io_error: Option<String>,
}

impl ValidationReport {
    pub fn violations(&self) -> u64 {
        self.bad_magic
            + self.bad_checksum
            + self.bad_version
            + self.non_monotonic
            + self.non_unit_quaternion
            + self.analog_range
            + self.non_finite
            + self.trailing_bytes
            + u64::from(self.io_error.is_some())
    }

    pub fn is_clean(&self) -> bool {
        self.violations() == 0
    }
}

/// Incremental checker for a byte stream of wire frames.
#[derive(Debug, Default)]
pub struct StreamValidator {
    report: ValidationReport,
    last_timestamp: Option<u64>,
    partial: Vec<u8>,
}

impl StreamValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, mut bytes: &[u8]) {
        while !bytes.is_empty() {
            let take = (FRAME_SIZE - self.partial.len()).min(bytes.len());
            self.partial.extend_from_slice(&bytes[..take]);
            bytes = &bytes[take..];
            if self.partial.len() == FRAME_SIZE {
                let frame = std::mem::take(&mut self.partial);
                self.check(&frame);
            }
        }
    }

    fn check(&mut self, bytes: &[u8]) {
        let r = &mut self.report;
        r.frames += 1;
        let w = match WireFrame::from_bytes(bytes) {
            Ok(w) => w,
            Err(InjectionError::BadMagic(_)) => {
                r.bad_magic += 1;
                return;
            }
            Err(InjectionError::BadChecksum { .. }) => {
                r.bad_checksum += 1;
                return;
            }
            Err(InjectionError::UnsupportedVersion(_)) => {
                r.bad_version += 1;
                return;
            }
            Err(_) => unreachable!("whole frames only"),
        };
        if self.last_timestamp.is_some_and(|t| w.timestamp_ns <= t) {
            r.non_monotonic += 1;
        }
        self.last_timestamp = Some(w.timestamp_ns);
        let v = &w.values;
        r.non_finite += v.iter().filter(|x| !x.is_finite()).count() as u64;
        for &q in &QUAT_SLOTS {
            let c = &v[q..q + 4];
            if c.iter().all(|x| x.is_finite()) {
                let n = c.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                if (n - 1.0).abs() > QUAT_TOLERANCE {
                    r.non_unit_quaternion += 1;
                }
            }
        }
        let out_of = |vals: &[f32], lo: f32, hi: f32| {
            vals.iter().filter(|x| x.is_finite() && !(lo..=hi).contains(*x)).count() as u64
        };
        r.analog_range +=
            out_of(&v[TRIGGERS], 0.0, 1.0) + out_of(&v[GRIPS], 0.0, 1.0) + out_of(&v[JOYSTICKS], -1.0, 1.0);
    }

    pub fn finish(mut self) -> ValidationReport {
        self.report.trailing_bytes = self.partial.len() as u64;
        self.report
    }
}

/// Reads `reader` to the end and checks every frame.
pub fn validate_stream<R: Read>(mut reader: R) -> ValidationReport {
    let mut v = StreamValidator::new();
    let mut buf = [0u8; 4096];
    loop {
        match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => v.feed(&buf[..n]),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => {
                let mut r = v.finish();
                r.io_error = Some(e.to_string());
                return r;
            }
        }
    }
    v.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub steps: usize,
    pub controller: ControllerConfig,
    /// Per-step deadline. Over-budget steps are always counted; they only
    /// shrink the window when `fallback` is set.
    pub budget: Duration,
    pub fallback: bool,
    pub rule: HitRule,
    pub note_slots: usize,
}

impl BenchConfig {
    pub fn new(signal: Signal, horizon: usize, steps: usize) -> Self {
        Self {
            steps,
            controller: ControllerConfig::new(signal, horizon),
            budget: DEFAULT_BUDGET,
            fallback: true,
            rule: HitRule::default(),
            note_slots: crate::sim::observe::DEFAULT_NOTE_SLOTS,
        }
    }
}

/// Latency percentiles of one stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageStats {
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

impl StageStats {
    fn of(samples: &[f64]) -> Self {
        let ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        Self {
            p50_ms: percentile(&ms, 50.0),
            p99_ms: percentile(&ms, 99.0),
            mean_ms: if ms.is_empty() {
                0.0
            } else {
                ms.iter().sum::<f64>() / ms.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub agent: String,
    pub steps: usize,
    pub model_calls: usize,
    /// Sum of per-step pipeline latencies (the game itself excluded).
    pub pipeline_time: Duration,
    pub steps_per_sec: f64,
    /// Over steps that called the model.
    pub inference: StageStats,
    pub aggregation: StageStats,
    pub controller: StageStats,
    pub encode: StageStats,
    pub step: StageStats,
    pub over_budget: u64,
    /// Steps on which the controller engaged the window reduction.
    pub fallback_events: u64,
    pub mean_window: f64,
    pub min_window: usize,
}

/// Drives `agent` through control, inference, aggregation and wire
/// encoding for `cfg.steps` steps against the note game on `map`
/// (restarted whenever it ends), timing each stage.
///
/// The model is called every step, except while the deadline fallback is
/// holding the window down: then it is called only when the buffer cannot
/// supply `W` candidates for the step, so a shorter window means fewer
/// calls.
pub fn bench(agent: &mut dyn Agent, map: &NoteMap, cfg: &BenchConfig) -> Result<BenchReport, InjectionError> {
    let horizon = agent.horizon();
    let mut ctl = cfg.controller;
    ctl.budget = cfg.fallback.then_some(cfg.budget);
    ctl.validate()?;
    if horizon == 0 || ctl.w_max > horizon {
        return Err(InjectionError::InvalidConfig(format!(
            "controller w_max {} does not fit horizon {horizon}",
            ctl.w_max
        )));
    }
    if cfg.steps == 0 {
        return Err(InjectionError::InvalidConfig("steps must be positive".into()));
    }
    agent.reset(map, &cfg.rule, 0);
    let rest = rest_frame(agent.num_buttons());
    let substeps = crate::sim::RunConfig::default().substeps()?;
    let mut game = GameState::new(map, cfg.rule, &rest);
    let mut prev = rest;
    let mut executed: VecDeque<ActionFrame> = VecDeque::from([rest]);
    let mut buffer = ChunkBuffer::new(horizon + 1);
    let mut state = ControllerState::new(&ctl);
    let mut wire = Vec::with_capacity(FRAME_SIZE);

    let n = cfg.steps;
    let (mut inf, mut agg, mut con, mut enc, mut tot) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut last_latency = None;
    let mut over_budget = 0;
    let mut calls = 0;
    let mut window_sum = 0usize;
    let mut min_window = usize::MAX;
    for k in 0..n as u64 {
        if game.is_finished() {
            game = GameState::new(map, cfg.rule, &rest);
        }
        let obs = observation_encode(&game, &prev, k, cfg.note_slots);

        let t0 = Instant::now();
        let snap = signal_snapshot(&ctl, &buffer, &executed, k, state.window(&ctl))?;
        let (w, m) = controller_update(&snap, &ctl, &mut state, last_latency);
        let t1 = Instant::now();
        let call = state.penalty == 0 || buffer.candidates(k, w).len() < w;
        if call {
            let ctx = StepContext {
                step: k,
                time: game.clock,
                obs: &obs,
            };
            let out = agent.act(&ctx, horizon)?;
            buffer.push(out)?;
            calls += 1;
        }
        let t2 = Instant::now();
        let frame = buffer.aggregate(k, &EnsembleConfig::new(w, m))?.frame;
        let t3 = Instant::now();
        wire.clear();
        wire.extend_from_slice(&encode(&frame, (k as f64 * policy_dt() * 1e9) as u64));
        std::hint::black_box(&wire);
        let t4 = Instant::now();

        let step = t4 - t0;
        con.push((t1 - t0).as_secs_f64());
        if call {
            inf.push((t2 - t1).as_secs_f64());
        }
        agg.push((t3 - t2).as_secs_f64());
        enc.push((t4 - t3).as_secs_f64());
        tot.push(step.as_secs_f64());
        if step > cfg.budget {
            over_budget += 1;
        }
        last_latency = Some(step);
        window_sum += w;
        min_window = min_window.min(w);

        advance(&mut game, &prev, &frame, substeps);
        prev = frame;
        executed.push_back(frame);
        if executed.len() > MOTION_INTERVALS + 1 {
            executed.pop_front();
        }
    }
    let pipeline_time = Duration::from_secs_f64(tot.iter().sum());
    Ok(BenchReport {
        agent: agent.name(),
        steps: n,
        model_calls: calls,
        pipeline_time,
        steps_per_sec: n as f64 / pipeline_time.as_secs_f64().max(f64::MIN_POSITIVE),
        inference: StageStats::of(&inf),
        aggregation: StageStats::of(&agg),
        controller: StageStats::of(&con),
        encode: StageStats::of(&enc),
        step: StageStats::of(&tot),
        over_budget,
        fallback_events: state.fallback_events,
        mean_window: window_sum as f64 / n as f64,
        min_window,
    })
}

/// Computes only the signal the controller reads, from the buffer as it
/// stands before this step's call.
fn signal_snapshot(
    ctl: &ControllerConfig,
    buffer: &ChunkBuffer,
    executed: &VecDeque<ActionFrame>,
    k: u64,
    window: usize,
) -> Result<SignalSnapshot, InjectionError> {
    let mut snap = SignalSnapshot {
        step: k,
        ..Default::default()
    };
    match ctl.signal {
        Signal::MotionSpeed => {
            let frames: Vec<ActionFrame> = executed.iter().copied().collect();
            snap.motion_speed = motion_speed(&frames, policy_dt(), MOTION_INTERVALS).unwrap_or(0.0);
        }
        Signal::Entropy => snap.prediction_entropy = buffer.newest().map_or(0.0, prediction_entropy),
        Signal::Variance => snap.action_variance = action_variance(buffer, k, window).unwrap_or(0.0),
        Signal::Consistency => {
            snap.historical_consistency = historical_consistency(buffer, ctl.scales.consistency).unwrap_or(1.0)
        }
    }
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::DEFAULT_BUTTONS;
    use crate::sim::oracle::rest_frame;

    fn sample_frame() -> ActionFrame {
        let mut f = rest_frame(DEFAULT_BUTTONS);
        f.triggers = [0.25, 1.0];
        f.joysticks = [-0.5, 0.0, 1.0, 0.3];
        f.buttons.set(2, true);
        f
    }

    #[test]
    fn layout_and_round_trip() {
        let bytes = encode(&sample_frame(), 42);
        assert_eq!(&bytes[0..4], b"VRSC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 42);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0.0);
        // Head quaternion w is slot 3.
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.0);
        assert_eq!(
            u32::from_le_bytes(bytes[144..148].try_into().unwrap()),
            sample_frame().buttons.mask()
        );
        let (f, ts) = decode(&bytes, DEFAULT_BUTTONS).unwrap();
        assert_eq!(ts, 42);
        assert_eq!(encode(&f, ts), bytes);
    }

    #[test]
    fn decode_errors() {
        let bytes = encode(&sample_frame(), 7);
        let mut flipped = bytes;
        flipped[40] ^= 0x10;
        assert!(matches!(decode(&flipped, 6), Err(InjectionError::BadChecksum { .. })));
        assert!(matches!(
            decode(&bytes[..100], 6),
            Err(InjectionError::ShortRead { needed: 152, got: 100 })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode(&magic, 6), Err(InjectionError::BadMagic(_))));
        let mut w = WireFrame::from_action(&sample_frame(), 7);
        w.version = 2;
        assert!(matches!(
            decode(&w.to_bytes(), 6),
            Err(InjectionError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn validator_counts() {
        let good: Vec<u8> = (0..5u64).flat_map(|t| encode(&sample_frame(), t * 10)).collect();
        assert!(validate_stream(&good[..]).is_clean());

        let mut w = WireFrame::from_action(&sample_frame(), 50);
        w.values[10] = 0.9;
        let mut s = good.clone();
        s.extend(w.to_bytes());
        let r = validate_stream(&s[..]);
        assert_eq!((r.non_unit_quaternion, r.violations()), (1, 1));

        let mut s = good.clone();
        s.extend(encode(&sample_frame(), 40));
        let r = validate_stream(&s[..]);
        assert_eq!((r.non_monotonic, r.violations()), (1, 1));

        let mut w = WireFrame::from_action(&sample_frame(), 60);
        w.values[TRIGGERS.start] = 1.5;
        let mut s = good.clone();
        s.extend(w.to_bytes());
        s.push(0);
        let r = validate_stream(&s[..]);
        assert_eq!((r.analog_range, r.trailing_bytes, r.frames), (1, 1, 6));
    }

    #[test]
    fn queue_drops_oldest() {
        let (sink, source) = frame_queue(QUEUE_CAPACITY);
        for t in 0..4u64 {
            sink.push(encode(&sample_frame(), t)).unwrap();
        }
        assert_eq!(sink.dropped(), 2);
        drop(sink);
        let ts: Vec<u64> = std::iter::from_fn(|| source.pop())
            .map(|b| decode(&b, 6).unwrap().1)
            .collect();
        assert_eq!(ts, vec![2, 3]);
    }

    #[test]
    fn closed_reader_is_sink_closed() {
        let (mut sink, source) = frame_queue(QUEUE_CAPACITY);
        drop(source);
        let r = stream(std::iter::repeat_n(sample_frame(), 3), 1000.0, &mut sink);
        assert!(matches!(r, Err(InjectionError::SinkClosed)));
    }

    #[test]
    fn pacing_through_queue() {
        let (mut sink, source) = frame_queue(QUEUE_CAPACITY);
        let consumer = std::thread::spawn(move || validate_stream(source));
        let stats = stream(std::iter::repeat_n(sample_frame(), 30), 100.0, &mut sink).unwrap();
        drop(sink);
        let report = consumer.join().unwrap();
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(report.frames, 30);
        assert!((stats.duration.as_secs_f64() - 0.3).abs() < 0.03, "{stats:?}");
        assert!(stats.p50_error <= stats.p99_error);
        assert_eq!(stats.period_errors.len(), 29);
    }

    #[test]
    fn slow_source_misses_deadlines() {
        let slow = (0..5).map(|_| {
            std::thread::sleep(Duration::from_millis(15));
            sample_frame()
        });
        let stats = stream(slow, 200.0, &mut io::sink()).unwrap();
        assert!(stats.deadline_misses >= 4, "{stats:?}");
        assert!(stats.deadline_misses <= stats.frames);
        assert!(stats.achieved_hz < 200.0);
    }

    #[test]
    fn identity_bench_shape() {
        let map = crate::sim::generate_map(&crate::sim::MapSpec::new("b", 3.27, 5.0, 1)).unwrap();
        let mut agent = crate::sim::IdentityAgent::new(16, 6);
        let cfg = BenchConfig::new(Signal::MotionSpeed, 16, 400);
        let r = bench(&mut agent, &map, &cfg).unwrap();
        assert_eq!(r.steps, 400);
        assert_eq!(r.over_budget, 0);
        assert!(r.inference.p50_ms <= r.inference.p99_ms);
        assert!(r.min_window >= 1 && r.mean_window <= 16.0);
    }
}
