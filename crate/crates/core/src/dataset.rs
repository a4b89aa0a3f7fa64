//! Demonstration storage, episode-level splitting, batch samplers and the
//! on-disk container.
//!
//! # File layout (all integers and floats little-endian)
//!
//! ```text
//! header   magic "VRDS" | version u32 (=1) | num_buttons u32 | episode_count u32
//! episode  id u64 | nominal_rate f32 | frame_count u32 | frame records...
//! frame    record_len u32 (bytes after this field)
//!          | timestamp_ns u64 | step u64
//!          | feature_len u32 | feature f32 × feature_len
//!          | device_state f32 × 32 | action f32 × 32 (canonical flat layout)
//!          | button mask u32
//! ```

use std::collections::HashSet;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::action::{unflatten, ActionChunk, ActionError, ActionFrame, Buttons, Observation, CONTINUOUS_DIM};

pub const MAGIC: &[u8; 4] = b"VRDS";
pub const VERSION: u32 = 1;
pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least 2 episodes to split, have {0}")]
    TooFewEpisodes(usize),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("episode {episode}: timestamps must be strictly increasing (frame {frame})")]
    NonMonotonicTimestamp { episode: u64, frame: usize },
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    pub observation: Observation,
    pub action: ActionFrame,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub frames: Vec<DemoFrame>,
    pub nominal_rate: f64,
}

impl Episode {
    pub fn new(id: u64, frames: Vec<DemoFrame>, nominal_rate: f64) -> Result<Self, DatasetError> {
        let ep = Self {
            id,
            frames,
            nominal_rate,
        };
        ep.check_timestamps()?;
        Ok(ep)
    }

    fn check_timestamps(&self) -> Result<(), DatasetError> {
        for (i, w) in self.frames.windows(2).enumerate() {
            if w[1].timestamp_ns <= w[0].timestamp_ns {
                return Err(DatasetError::NonMonotonicTimestamp {
                    episode: self.id,
                    frame: i + 1,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of chunk start positions `t` with a full target `t .. t+H`
    /// strictly inside the episode (an episode needs `H + 1` frames).
    pub fn valid_starts(&self, horizon: usize) -> usize {
        self.frames.len().saturating_sub(horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub num_buttons: usize,
}

/// One `(episode, t)` pair: the chunk start within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleIndex {
    /// Position of the episode inside the dataset it was drawn from.
    pub episode: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub episode: u64,
    pub step: usize,
    pub obs: Observation,
    pub target: ActionChunk,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>, num_buttons: usize) -> Self {
        Self { episodes, num_buttons }
    }

    pub fn total_frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn valid_pairs(&self, horizon: usize) -> usize {
        self.episodes.iter().map(|e| e.valid_starts(horizon)).sum()
    }

    /// Builds the training sample for `idx`. With `history > 1` the
    /// observation features of the preceding frames are stacked (oldest
    /// first), repeating the first frame at the episode start.
    pub fn sample(&self, idx: SampleIndex, horizon: usize, history: usize) -> TrainingSample {
        let ep = &self.episodes[idx.episode];
        let obs = if history <= 1 {
            ep.frames[idx.t].observation.clone()
        } else {
            let window: Vec<Observation> = (0..history)
                .map(|k| {
                    let back = history - 1 - k;
                    ep.frames[idx.t.saturating_sub(back)].observation.clone()
                })
                .collect();
            crate::policy::stack_history(&window)
        };
        let frames: Vec<ActionFrame> = ep.frames[idx.t..idx.t + horizon].iter().map(|f| f.action).collect();
        let bool_probs = frames
            .iter()
            .map(|f| {
                f.buttons
                    .to_bools()
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        TrainingSample {
            episode: ep.id,
            step: idx.t,
            obs,
            target: ActionChunk {
                start_step: idx.t as u64,
                frames,
                bool_probs,
            },
        }
    }

    /// Splits by whole episode into `(train, validation)`.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
        let n = self.episodes.len();
        if n < 2 {
            return Err(DatasetError::TooFewEpisodes(n));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
        let mut train_idx = order[..n_train].to_vec();
        let mut val_idx = order[n_train..].to_vec();
        // Keep original episode order inside each side.
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        let pick = |idx: &[usize]| Dataset {
            episodes: idx.iter().map(|&i| self.episodes[i].clone()).collect(),
            num_buttons: self.num_buttons,
        };
        Ok((pick(&train_idx), pick(&val_idx)))
    }
}

/// Uniform i.i.d. draws over every valid `(episode, t)` pair.
pub fn sample_fully_random<R: Rng + ?Sized>(
    train: &Dataset,
    horizon: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<SampleIndex> {
    let cumulative: Vec<usize> = train
        .episodes
        .iter()
        .scan(0, |acc, e| {
            *acc += e.valid_starts(horizon);
            Some(*acc)
        })
        .collect();
    let total = cumulative.last().copied().unwrap_or(0);
    if total == 0 {
        return Vec::new();
    }
    (0..batch_size)
        .map(|_| {
            let u = rng.random_range(0..total);
            let episode = cumulative.partition_point(|&c| c <= u);
            let before = if episode == 0 { 0 } else { cumulative[episode - 1] };
            SampleIndex { episode, t: u - before }
        })
        .collect()
}

/// Round-robin over a per-epoch shuffled episode order: no episode is drawn
/// twice before every episode has been drawn once.
#[derive(Debug, Clone)]
pub struct EpisodicSampler {
    num_episodes: usize,
    seed: u64,
    cursor: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl EpisodicSampler {
    pub fn new(num_episodes: usize, seed: u64) -> Self {
        Self {
            num_episodes,
            seed,
            cursor: 0,
            epoch: None,
        }
    }

    /// Starts drawing at global draw index `cursor`.
    pub fn with_cursor(mut self, cursor: u64) -> Self {
        self.cursor = cursor;
        self
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Episode served by global draw `i`.
    pub fn episode_for_draw(&mut self, i: u64) -> usize {
        let n = self.num_episodes as u64;
        let epoch = i / n;
        let fresh = !matches!(&self.epoch, Some((e, _)) if *e == epoch);
        if fresh {
            let mut order: Vec<usize> = (0..self.num_episodes).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        let (_, order) = self.epoch.as_ref().expect("epoch order initialized");
        order[(i % n) as usize]
    }

    /// Draws the next `batch_size` pairs; `t` is uniform within the episode.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        train: &Dataset,
        horizon: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Vec<SampleIndex> {
        if self.num_episodes == 0 {
            return Vec::new();
        }
        assert_eq!(
            self.num_episodes,
            train.episodes.len(),
            "sampler built for another dataset"
        );
        (0..batch_size)
            .map(|_| {
                let episode = self.episode_for_draw(self.cursor);
                self.cursor += 1;
                let starts = train.episodes[episode].valid_starts(horizon);
                assert!(starts > 0, "episode {episode} is shorter than horizon + 1");
                SampleIndex {
                    episode,
                    t: rng.random_range(0..starts),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    FullyRandom,
    Episodic,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" | "fully-random" | "fully_random" => Ok(Self::FullyRandom),
            "episodic" => Ok(Self::Episodic),
            other => Err(format!("unknown sampler '{other}' (expected random|episodic)")),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FullyRandom => "random",
            Self::Episodic => "episodic",
        })
    }
}

/// Deterministic batch schedule: batch `k` depends only on `(seed, k)`, so
/// batches can be assembled ahead of time or after a resume.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    pub kind: SamplerKind,
    pub seed: u64,
    pub horizon: usize,
    pub batch_size: usize,
}

impl BatchSchedule {
    pub fn batch(&self, train: &Dataset, k: u64) -> Vec<SampleIndex> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k.wrapping_add(1));
        match self.kind {
            SamplerKind::FullyRandom => sample_fully_random(train, self.horizon, self.batch_size, &mut rng),
            SamplerKind::Episodic => EpisodicSampler::new(train.episodes.len(), self.seed ^ 0x5EED_0F_E90C)
                .with_cursor(k * self.batch_size as u64)
                .sample(train, self.horizon, self.batch_size, &mut rng),
        }
    }
}

/// Fraction of valid `(episode, t)` pairs that appear at least once in
/// `visits`.
pub fn coverage(train: &Dataset, horizon: usize, visits: &[SampleIndex]) -> f64 {
    let total = train.valid_pairs(horizon);
    if total == 0 {
        return 0.0;
    }
    let distinct: HashSet<&SampleIndex> = visits
        .iter()
        .filter(|v| v.episode < train.episodes.len() && v.t < train.episodes[v.episode].valid_starts(horizon))
        .collect();
    distinct.len() as f64 / total as f64
}

/// Fraction of episodes visited at least once.
pub fn episode_coverage(train: &Dataset, visits: &[SampleIndex]) -> f64 {
    if train.episodes.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<usize> = visits.iter().map(|v| v.episode).collect();
    distinct.len() as f64 / train.episodes.len() as f64
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn f32s(values: &[f64], out: &mut Vec<u8>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.num_buttons as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.episodes.len() as u32).to_le_bytes());
    w.write_all(&buf)?;
    for ep in &ds.episodes {
        buf.clear();
        buf.extend_from_slice(&ep.id.to_le_bytes());
        buf.extend_from_slice(&(ep.nominal_rate as f32).to_le_bytes());
        buf.extend_from_slice(&(ep.frames.len() as u32).to_le_bytes());
        for f in &ep.frames {
            let feat = &f.observation.feature;
            let record_len = 8 + 8 + 4 + 4 * feat.len() + 4 * CONTINUOUS_DIM * 2 + 4;
            buf.extend_from_slice(&(record_len as u32).to_le_bytes());
            buf.extend_from_slice(&f.timestamp_ns.to_le_bytes());
            buf.extend_from_slice(&f.observation.step.to_le_bytes());
            buf.extend_from_slice(&(feat.len() as u32).to_le_bytes());
            f32s(feat, &mut buf);
            f32s(&f.observation.device_state, &mut buf);
            let flat = f.action.flatten();
            f32s(&flat.continuous, &mut buf);
            buf.extend_from_slice(&f.action.buttons.mask().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.data.len() {
            return Err(DatasetError::Format(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, DatasetError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(DatasetError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let num_buttons = c.u32()? as usize;
    Buttons::new(num_buttons)?;
    let n_episodes = c.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_episodes.min(1 << 16));
    for _ in 0..n_episodes {
        let id = c.u64()?;
        let rate = c.f32()? as f64;
        let n_frames = c.u32()? as usize;
        let mut frames = Vec::with_capacity(n_frames.min(1 << 20));
        for _ in 0..n_frames {
            let record_len = c.u32()? as usize;
            let start = c.pos;
            let timestamp_ns = c.u64()?;
            let step = c.u64()?;
            let feat_len = c.u32()? as usize;
            let feature = c.f32s(feat_len)?;
            let device_state: [f64; CONTINUOUS_DIM] = c.f32s(CONTINUOUS_DIM)?.try_into().unwrap();
            let cont = c.f32s(CONTINUOUS_DIM)?;
            let mask = c.u32()?;
            if c.pos - start != record_len {
                return Err(DatasetError::Format(format!(
                    "frame record length {record_len} does not match its contents ({})",
                    c.pos - start
                )));
            }
            let buttons = Buttons::from_mask(mask, num_buttons)?;
            let action = unflatten(&cont, &buttons.to_bools())?.frame;
            frames.push(DemoFrame {
                observation: Observation {
                    feature,
                    device_state,
                    step,
                },
                action,
                timestamp_ns,
            });
        }
        episodes.push(Episode::new(id, frames, rate)?);
    }
    if c.pos != data.len() {
        return Err(DatasetError::Format(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(Dataset { episodes, num_buttons })
}
