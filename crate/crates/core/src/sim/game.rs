//! Hit detection, scoring and the judgement log.

use std::fmt;

use super::map::{Hand, NoteEvent, NoteMap, SPAWN_LEAD};
use crate::action::ActionFrame;
use crate::geometry::Vec3;

/// Thresholds of the hit predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRule {
    /// Half-width of the timing window in seconds.
    pub window: f64,
    /// Max distance from the tip's path to the lane anchor, meters.
    pub radius: f64,
    /// Minimum tip speed, m/s.
    pub min_speed: f64,
    /// Max angle between the tip's x/y velocity and the cut, degrees.
    pub max_angle_deg: f64,
    /// Distance from controller to saber tip along its forward axis.
    pub saber_length: f64,
}

impl Default for HitRule {
    fn default() -> Self {
        Self {
            window: 0.15,
            radius: 0.35,
            min_speed: 0.8,
            max_angle_deg: 60.0,
            saber_length: 0.5,
        }
    }
}

impl HitRule {
    pub fn tip(&self, frame: &ActionFrame, hand: Hand) -> Vec3 {
        let pose = match hand {
            Hand::Left => &frame.left,
            Hand::Right => &frame.right,
        };
        ActionFrame::tip(pose, self.saber_length)
    }

    /// Whether a tip moving from `from` to `to` over `dt` enters the radius
    /// around `note` from outside at cutting speed.
    pub fn enters(&self, note: &NoteEvent, from: Vec3, to: Vec3, dt: f64) -> bool {
        let a = note.lane.anchor();
        (to - from).norm() / dt >= self.min_speed
            && from.distance(a) > self.radius
            && segment_distance(a, from, to) <= self.radius
    }

    /// Whether the motion `from → to` is within the angle limit of the cut.
    pub fn direction_ok(&self, note: &NoteEvent, from: Vec3, to: Vec3) -> bool {
        let Some((dx, dy)) = note.cut.direction() else {
            return true;
        };
        let delta = to - from;
        let planar = (delta.x * delta.x + delta.y * delta.y).sqrt();
        planar > 0.0 && (delta.x * dx + delta.y * dy) / planar >= self.max_angle_deg.to_radians().cos()
    }

    /// Entry in the right direction.
    pub fn qualifies(&self, note: &NoteEvent, from: Vec3, to: Vec3, dt: f64) -> bool {
        self.enters(note, from, to, dt) && self.direction_ok(note, from, to)
    }
}

/// Distance from `p` to the segment `a..b`.
pub fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(a + ab.scale(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Good,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub note: usize,
    /// Clock when the note was resolved.
    pub time: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct GameState {
    pub rule: HitRule,
    notes: Vec<NoteEvent>,
    resolved: Vec<bool>,
    /// Cut in the wrong direction; can no longer be hit.
    spent: Vec<bool>,
    /// Per hand: the note whose radius the tip is inside, and where it
    /// entered.
    engaged: [Option<(usize, Vec3)>; 2],
    /// First note that is not yet resolved.
    cursor: usize,
    pub clock: f64,
    /// Left and right saber tips.
    pub tips: [Vec3; 2],
    pub combo: u32,
    pub max_combo: u32,
    pub good: u32,
    pub log: Vec<Judgement>,
}

impl GameState {
    pub fn new(map: &NoteMap, rule: HitRule, start: &ActionFrame) -> Self {
        Self {
            rule,
            notes: map.notes.clone(),
            resolved: vec![false; map.notes.len()],
            spent: vec![false; map.notes.len()],
            engaged: [None; 2],
            cursor: 0,
            clock: 0.0,
            tips: [rule.tip(start, Hand::Left), rule.tip(start, Hand::Right)],
            combo: 0,
            max_combo: 0,
            good: 0,
            log: Vec::new(),
        }
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn is_finished(&self) -> bool {
        self.cursor == self.notes.len()
    }

    /// Unresolved notes already spawned at the current clock, earliest first.
    pub fn pending(&self) -> impl Iterator<Item = &NoteEvent> + '_ {
        let clock = self.clock;
        (self.cursor..self.notes.len())
            .filter(move |&i| !self.resolved[i])
            .map(move |i| &self.notes[i])
            .take_while(move |n| n.target_time - clock <= SPAWN_LEAD)
    }

    fn resolve(&mut self, i: usize, outcome: Outcome) {
        self.resolved[i] = true;
        match outcome {
            Outcome::Good => {
                self.good += 1;
                self.combo += 1;
                self.max_combo = self.max_combo.max(self.combo);
            }
            Outcome::Miss => self.combo = 0,
        }
        self.log.push(Judgement {
            note: i,
            time: self.clock,
            outcome,
        });
        while self.cursor < self.notes.len() && self.resolved[self.cursor] {
            self.cursor += 1;
        }
    }

    /// Advances the clock by `dt` with the devices at `frame`. Returns the
    /// judgements made during this tick.
    pub fn step(&mut self, frame: &ActionFrame, dt: f64) -> &[Judgement] {
        let first_new = self.log.len();
        self.clock += dt;
        let prev = self.tips;
        let mut now = prev;
        for hand in [Hand::Left, Hand::Right] {
            let tip = self.rule.tip(frame, hand);
            if tip.is_finite() {
                now[hand.index()] = tip;
            }
        }
        self.tips = now;

        let w = self.rule.window;
        for i in self.cursor..self.notes.len() {
            let n = self.notes[i];
            if n.target_time - self.clock > w {
                break;
            }
            if !self.resolved[i] && self.clock > n.target_time + w {
                let h = n.hand.index();
                match self.engaged[h] {
                    Some((j, entry)) if j == i => {
                        self.engaged[h] = None;
                        self.judge(i, entry, now[h], true);
                    }
                    _ => self.resolve(i, Outcome::Miss),
                }
            }
        }
        // A hand cuts only its earliest open note. The cut starts when the
        // tip enters the note's radius at speed and is judged on the chord
        // from entry to exit: a wrong direction spends the note, which
        // then misses at window expiry.
        for hand in [Hand::Left, Hand::Right] {
            let h = hand.index();
            if let Some((i, entry)) = self.engaged[h] {
                if now[h].distance(self.notes[i].lane.anchor()) > self.rule.radius {
                    self.engaged[h] = None;
                    self.judge(i, entry, now[h], false);
                }
                continue;
            }
            let Some(i) = (self.cursor..self.notes.len())
                .take_while(|&i| self.notes[i].target_time - self.clock <= w)
                .find(|&i| !self.resolved[i] && !self.spent[i] && self.notes[i].hand == hand)
            else {
                continue;
            };
            let n = &self.notes[i];
            if (self.clock - n.target_time).abs() > w || !self.rule.enters(n, prev[h], now[h], dt) {
                continue;
            }
            if now[h].distance(n.lane.anchor()) > self.rule.radius {
                self.judge(i, prev[h], now[h], false);
            } else {
                self.engaged[h] = Some((i, prev[h]));
            }
        }
        &self.log[first_new..]
    }

    fn judge(&mut self, i: usize, entry: Vec3, exit: Vec3, expired: bool) {
        if self.rule.direction_ok(&self.notes[i], entry, exit) {
            self.resolve(i, Outcome::Good);
        } else if expired {
            self.resolve(i, Outcome::Miss);
        } else {
            self.spent[i] = true;
        }
    }

    pub fn report(&self) -> ScoreReport {
        ScoreReport::new(self.notes.len() as u32, self.good, self.max_combo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rank {
    A,
    B,
    C,
    D,
    E,
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rank::A => "A",
            Rank::B => "B",
            Rank::C => "C",
            Rank::D => "D",
            Rank::E => "E",
        })
    }
}

/// Letter grade for an accuracy percentage.
pub fn rank(accuracy: f64) -> Rank {
    match accuracy {
        a if a >= 90.0 => Rank::A,
        a if a >= 80.0 => Rank::B,
        a if a >= 65.0 => Rank::C,
        a if a >= 50.0 => Rank::D,
        _ => Rank::E,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub total_notes: u32,
    pub good_hits: u32,
    /// Percent of notes hit.
    pub accuracy: f64,
    pub max_combo: u32,
    pub rank: Rank,
}

impl ScoreReport {
    pub fn new(total_notes: u32, good_hits: u32, max_combo: u32) -> Self {
        let accuracy = if total_notes == 0 {
            0.0
        } else {
            good_hits as f64 / total_notes as f64 * 100.0
        };
        Self {
            total_notes,
            good_hits,
            accuracy,
            max_combo,
            rank: rank(accuracy),
        }
    }
}

/// Recomputes hits and max combo from a judgement log.
pub fn replay_log(total_notes: u32, log: &[Judgement]) -> ScoreReport {
    let (mut good, mut combo, mut best) = (0, 0, 0);
    for j in log {
        if j.outcome == Outcome::Good {
            good += 1;
            combo += 1;
            best = u32::max(best, combo);
        } else {
            combo = 0;
        }
    }
    ScoreReport::new(total_notes, good, best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, UnitQuat};
    use crate::sim::map::{Cut, Lane, MapSpec};

    fn one_note(cut: Cut) -> NoteMap {
        NoteMap {
            spec: MapSpec::new("one", 0.0, 2.0, 0),
            notes: vec![NoteEvent {
                target_time: 1.5,
                lane: Lane::new(2, 1).unwrap(),
                cut,
                hand: Hand::Right,
            }],
        }
    }

    /// Right tip sweeping straight down through the note's anchor at
    /// `speed`, crossing it at the target time.
    fn sweep(map: &NoteMap, speed: f64, dt: f64, hand_offset: Vec3) -> ScoreReport {
        let rule = HitRule::default();
        let rest = ActionFrame::rest(6).unwrap();
        let mut g = GameState::new(map, rule, &rest);
        let anchor = map.notes[0].lane.anchor();
        let steps = (3.0 / dt) as usize;
        for k in 1..=steps {
            let t = k as f64 * dt;
            let tip = anchor + Vec3::new(0.0, -speed * (t - 1.5), 0.0) + hand_offset;
            let mut f = rest;
            f.right = Pose::new(tip + Vec3::new(0.0, 0.0, rule.saber_length), UnitQuat::IDENTITY);
            g.step(&f, dt);
        }
        g.report()
    }

    #[test]
    fn swing_speed_threshold() {
        let m = one_note(Cut::Down);
        assert_eq!(sweep(&m, 3.0, 1.0 / 60.0, Vec3::ZERO).good_hits, 1);
        assert_eq!(sweep(&m, 0.4, 1.0 / 60.0, Vec3::ZERO).good_hits, 0);
        assert_eq!(sweep(&m, 3.0, 1.0 / 60.0, Vec3::new(0.5, 0.0, 0.0)).good_hits, 0);
        // Upward cut required, downward swing.
        assert_eq!(sweep(&one_note(Cut::Up), 3.0, 1.0 / 60.0, Vec3::ZERO).good_hits, 0);
        assert_eq!(sweep(&one_note(Cut::Any), 3.0, 1.0 / 60.0, Vec3::ZERO).good_hits, 1);
        assert_eq!(
            sweep(&one_note(Cut::DownRight), 3.0, 1.0 / 60.0, Vec3::ZERO).good_hits,
            1
        );
    }

    #[test]
    fn stationary_scores_nothing() {
        let map = crate::sim::map::generate_map(&MapSpec::new("s", 3.27, 20.0, 1)).unwrap();
        let rest = ActionFrame::rest(6).unwrap();
        let mut g = GameState::new(&map, HitRule::default(), &rest);
        while !g.is_finished() {
            g.step(&rest, 1.0 / 60.0);
        }
        let r = g.report();
        assert_eq!((r.good_hits, r.max_combo, r.accuracy, r.rank), (0, 0, 0.0, Rank::E));
        assert_eq!(g.log.len(), map.notes.len());
        assert_eq!(replay_log(r.total_notes, &g.log), r);
    }

    #[test]
    fn ranks() {
        assert_eq!(rank(96.0), Rank::A);
        assert_eq!(rank(90.0), Rank::A);
        assert_eq!(rank(85.0), Rank::B);
        assert_eq!(rank(65.0), Rank::C);
        assert_eq!(rank(64.99), Rank::D);
        assert_eq!(rank(50.0), Rank::D);
        assert_eq!(rank(0.0), Rank::E);
    }

    #[test]
    fn segment_distance_cases() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(segment_distance(Vec3::new(0.5, 1.0, 0.0), a, b), 1.0);
        assert_eq!(segment_distance(Vec3::new(2.0, 0.0, 0.0), a, b), 1.0);
        assert_eq!(segment_distance(Vec3::new(3.0, 4.0, 0.0), a, a), 5.0);
    }

    #[test]
    fn non_finite_frame_is_stationary() {
        let m = one_note(Cut::Down);
        let rest = ActionFrame::rest(6).unwrap();
        let mut g = GameState::new(&m, HitRule::default(), &rest);
        let before = g.tips;
        let mut f = rest;
        f.right.position = Vec3::new(f64::NAN, 0.0, 0.0);
        g.step(&f, 1.0 / 60.0);
        assert_eq!(g.tips, before);
    }
}
