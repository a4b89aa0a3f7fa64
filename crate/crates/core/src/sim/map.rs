//! Note maps: generation, presets and the text map file.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SimError;
use crate::geometry::Vec3;

/// Seconds between a note becoming visible and its target time.
pub const SPAWN_LEAD: f64 = 1.0;
pub const MAX_DENSITY: f64 = 12.0;
pub const PRESET_DENSITIES: [f64; 5] = [3.27, 3.74, 5.35, 5.72, 6.90];

pub const LANE_COLUMNS: u8 = 4;
pub const LANE_ROWS: u8 = 3;
pub const LANE_SPACING: f64 = 0.3;
pub const LANE_BASE_HEIGHT: f64 = 0.8;
/// Depth of the plane notes are cut in.
pub const LANE_DEPTH: f64 = -0.9;

const MAP_MAGIC: &str = "VRMAP";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn index(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => 1,
        }
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }

    /// -1 for left, +1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Hand::Left => -1.0,
            Hand::Right => 1.0,
        }
    }
}

/// Required swing direction. Compass names are screen directions in the
/// x/y plane (up = +y, right = +x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cut {
    Up,
    Down,
    Left,
    Right,
    UpLeft,
    UpRight,
    DownLeft,
    DownRight,
    Any,
}

impl Cut {
    pub const ALL: [Cut; 9] = [
        Cut::Up,
        Cut::Down,
        Cut::Left,
        Cut::Right,
        Cut::UpLeft,
        Cut::UpRight,
        Cut::DownLeft,
        Cut::DownRight,
        Cut::Any,
    ];

    /// Unit direction in the x/y plane; `None` for [`Cut::Any`].
    pub fn direction(self) -> Option<(f64, f64)> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Some(match self {
            Cut::Up => (0.0, 1.0),
            Cut::Down => (0.0, -1.0),
            Cut::Left => (-1.0, 0.0),
            Cut::Right => (1.0, 0.0),
            Cut::UpLeft => (-h, h),
            Cut::UpRight => (h, h),
            Cut::DownLeft => (-h, -h),
            Cut::DownRight => (h, -h),
            Cut::Any => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Cut::Up => "up",
            Cut::Down => "down",
            Cut::Left => "left",
            Cut::Right => "right",
            Cut::UpLeft => "up_left",
            Cut::UpRight => "up_right",
            Cut::DownLeft => "down_left",
            Cut::DownRight => "down_right",
            Cut::Any => "any",
        }
    }
}

impl fmt::Display for Cut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cut {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Cut::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown cut '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lane {
    pub column: u8,
    pub row: u8,
}

impl Lane {
    pub fn new(column: u8, row: u8) -> Result<Self, SimError> {
        if column >= LANE_COLUMNS || row >= LANE_ROWS {
            return Err(SimError::InvalidMap(format!("lane ({column}, {row}) out of range")));
        }
        Ok(Self { column, row })
    }

    /// World position of the lane's hit point.
    pub fn anchor(self) -> Vec3 {
        Vec3::new(
            (self.column as f64 - 1.5) * LANE_SPACING,
            LANE_BASE_HEIGHT + LANE_SPACING * self.row as f64,
            LANE_DEPTH,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    /// Seconds from map start.
    pub target_time: f64,
    pub lane: Lane,
    pub cut: Cut,
    pub hand: Hand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    Uniform,
    /// Density swells and thins roughly every ten seconds.
    Burst,
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Profile::Uniform),
            "burst" => Ok(Profile::Burst),
            _ => Err(format!("unknown profile '{s}' (expected uniform|burst)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Uniform => "uniform",
            Profile::Burst => "burst",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub id: String,
    /// Seconds of note-bearing music after the spawn lead.
    pub duration: f64,
    /// Mean notes per second.
    pub density: f64,
    pub seed: u64,
    pub profile: Profile,
    /// Probability that a note goes to the other hand than the previous one.
    pub alternation: f64,
}

impl MapSpec {
    pub fn new(id: impl Into<String>, density: f64, duration: f64, seed: u64) -> Self {
        Self {
            id: id.into(),
            duration,
            density,
            seed,
            profile: Profile::Uniform,
            alternation: 0.8,
        }
    }
}

/// The five benchmark maps, easiest first.
pub fn preset_maps(duration: f64, seed: u64) -> Vec<MapSpec> {
    PRESET_DENSITIES
        .iter()
        .enumerate()
        .map(|(i, &d)| MapSpec::new(format!("preset-{d:.2}"), d, duration, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteMap {
    pub spec: MapSpec,
    /// Sorted by target time.
    pub notes: Vec<NoteEvent>,
}

impl NoteMap {
    pub fn realized_density(&self) -> f64 {
        if self.spec.duration <= 0.0 {
            return 0.0;
        }
        self.notes.len() as f64 / self.spec.duration
    }

    /// Time after which nothing can change the score.
    pub fn end_time(&self, hit_window: f64) -> f64 {
        let last = self.notes.last().map_or(SPAWN_LEAD, |n| n.target_time);
        last + hit_window + 0.5
    }
}

const CUT_WEIGHTS: [(Cut, f64); 9] = [
    (Cut::Down, 0.35),
    (Cut::Up, 0.20),
    (Cut::Left, 0.10),
    (Cut::Right, 0.10),
    (Cut::DownLeft, 0.05),
    (Cut::DownRight, 0.05),
    (Cut::UpLeft, 0.05),
    (Cut::UpRight, 0.05),
    (Cut::Any, 0.05),
];
const ROW_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
const LEFT_COLUMN_WEIGHTS: [f64; 4] = [0.45, 0.45, 0.10, 0.0];
/// Minimum same-hand spacing the generator tries to keep.
const SAME_HAND_GAP: f64 = 0.25;
const BURST_AMPLITUDE: f64 = 0.6;
const BURST_PERIOD: f64 = 10.0;
const TIME_JITTER: f64 = 0.35;

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
    }
    items.last().expect("non-empty choice").0
}

fn warp(u: f64, bursts: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI * bursts;
    u - BURST_AMPLITUDE * (k * u).sin() / k
}

pub fn generate_map(spec: &MapSpec) -> Result<NoteMap, SimError> {
    if !spec.density.is_finite() || spec.density < 0.0 || spec.density > MAX_DENSITY {
        return Err(SimError::InfeasibleDensity(spec.density));
    }
    if !(spec.duration.is_finite() && spec.duration >= 0.0) {
        return Err(SimError::InvalidMap(format!(
            "duration must be >= 0, got {}",
            spec.duration
        )));
    }
    if !(0.0..=1.0).contains(&spec.alternation) {
        return Err(SimError::InvalidMap(format!(
            "alternation must be in [0, 1], got {}",
            spec.alternation
        )));
    }
    let n = (spec.density * spec.duration).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slot = if n > 0 { spec.duration / n as f64 } else { 0.0 };
    let bursts = (spec.duration / BURST_PERIOD).round().max(1.0);
    let mut notes: Vec<NoteEvent> = Vec::with_capacity(n);
    let mut last_time = [f64::NEG_INFINITY; 2];
    let mut prev_hand = if rng.random::<bool>() { Hand::Left } else { Hand::Right };
    for i in 0..n {
        let jitter = rng.random_range(-TIME_JITTER..=TIME_JITTER);
        let u = (i as f64 + 0.5 + jitter) * slot;
        let offset = match spec.profile {
            Profile::Uniform => u,
            Profile::Burst => warp(u / spec.duration, bursts) * spec.duration,
        };
        let t = SPAWN_LEAD + offset;

        let mut hand = if rng.random::<f64>() < spec.alternation {
            prev_hand.other()
        } else {
            prev_hand
        };
        if t - last_time[hand.index()] < SAME_HAND_GAP && t - last_time[hand.other().index()] >= SAME_HAND_GAP {
            hand = hand.other();
        }
        let cols: Vec<(u8, f64)> = (0..LANE_COLUMNS)
            .map(|c| {
                let w = match hand {
                    Hand::Left => LEFT_COLUMN_WEIGHTS[c as usize],
                    Hand::Right => LEFT_COLUMN_WEIGHTS[(LANE_COLUMNS - 1 - c) as usize],
                };
                (c, w)
            })
            .collect();
        let rows: Vec<(u8, f64)> = (0..LANE_ROWS).map(|r| (r, ROW_WEIGHTS[r as usize])).collect();
        let column = pick(&mut rng, &cols);
        let row = pick(&mut rng, &rows);
        let cut = pick(&mut rng, &CUT_WEIGHTS);
        notes.push(NoteEvent {
            target_time: t,
            lane: Lane { column, row },
            cut,
            hand,
        });
        last_time[hand.index()] = t;
        prev_hand = hand;
    }
    notes.sort_by(|a, b| a.target_time.total_cmp(&b.target_time));
    Ok(NoteMap {
        spec: spec.clone(),
        notes,
    })
}

pub fn write_map<W: Write>(map: &NoteMap, mut w: W) -> Result<(), SimError> {
    let s = &map.spec;
    writeln!(w, "{MAP_MAGIC} {MAP_VERSION}")?;
    writeln!(w, "id={}", s.id)?;
    writeln!(w, "duration={}", s.duration)?;
    writeln!(w, "density={}", s.density)?;
    writeln!(w, "seed={}", s.seed)?;
    writeln!(w, "profile={}", s.profile)?;
    writeln!(w, "alternation={}", s.alternation)?;
    writeln!(w, "notes={}", map.notes.len())?;
    writeln!(w, "time,column,row,cut,hand")?;
    for n in &map.notes {
        let hand = match n.hand {
            Hand::Left => "left",
            Hand::Right => "right",
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            n.target_time, n.lane.column, n.lane.row, n.cut, hand
        )?;
    }
    Ok(())
}

pub fn read_map<R: BufRead>(r: R) -> Result<NoteMap, SimError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), SimError> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(SimError::InvalidMap(format!("unexpected end of file, expected {what}"))),
        }
    };
    let bad = |line: usize, msg: String| SimError::InvalidMap(format!("line {line}: {msg}"));

    let (ln, header) = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAP_MAGIC) {
        return Err(bad(ln, "not a map file".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(ln, "missing version".into()))?;
    if version != MAP_VERSION {
        return Err(bad(ln, format!("unsupported map version {version}")));
    }
    let mut field = |key: &str| -> Result<(usize, String), SimError> {
        let (ln, line) = next(key)?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((ln, v.trim().to_string())),
            _ => Err(bad(ln, format!("expected '{key}=...'"))),
        }
    };
    fn parse<T: FromStr>(ln: usize, v: &str, what: &str) -> Result<T, SimError> {
        v.parse()
            .map_err(|_| SimError::InvalidMap(format!("line {ln}: invalid {what} '{v}'")))
    }
    let (_, id) = field("id")?;
    let (l, v) = field("duration")?;
    let duration: f64 = parse(l, &v, "duration")?;
    let (l, v) = field("density")?;
    let density: f64 = parse(l, &v, "density")?;
    let (l, v) = field("seed")?;
    let seed: u64 = parse(l, &v, "seed")?;
    let (l, v) = field("profile")?;
    let profile: Profile = parse(l, &v, "profile")?;
    let (l, v) = field("alternation")?;
    let alternation: f64 = parse(l, &v, "alternation")?;
    let (l, v) = field("notes")?;
    let count: usize = parse(l, &v, "note count")?;
    next("column header")?;
    let mut notes = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = next("note row")?;
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(bad(ln, format!("expected 5 columns, got {}", cols.len())));
        }
        let target_time: f64 = parse(ln, cols[0], "time")?;
        let column: u8 = parse(ln, cols[1], "column")?;
        let row: u8 = parse(ln, cols[2], "row")?;
        let cut: Cut = cols[3].parse().map_err(|e| bad(ln, e))?;
        let hand = match cols[4] {
            "left" => Hand::Left,
            "right" => Hand::Right,
            other => return Err(bad(ln, format!("unknown hand '{other}'"))),
        };
        let lane = Lane::new(column, row).map_err(|e| bad(ln, e.to_string()))?;
        if let Some(prev) = notes.last().map(|n: &NoteEvent| n.target_time) {
            if target_time < prev {
                return Err(bad(ln, "notes are not sorted by time".into()));
            }
        }
        notes.push(NoteEvent {
            target_time,
            lane,
            cut,
            hand,
        });
    }
    Ok(NoteMap {
        spec: MapSpec {
            id,
            duration,
            density,
            seed,
            profile,
            alternation,
        },
        notes,
    })
}
