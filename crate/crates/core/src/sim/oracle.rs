//! Scripted expert: minimum-jerk saber paths through every note.

use rand::Rng;
use rand_distr::StandardNormal;

use super::game::HitRule;
use super::map::{Cut, Hand, NoteEvent, NoteMap};
use crate::action::{ActionFrame, Button};
use crate::geometry::{Pose, UnitQuat, Vec3};

/// Distance of wind-up and follow-through from the anchor along the cut.
pub const STRIKE_REACH: f64 = 0.15;
/// How far toward the player the saber is held between strikes. Larger
/// than the hit radius, so only the strike arc itself touches a note.
pub const STRIKE_RETREAT: f64 = 0.4;
/// Longest half-duration of a strike.
pub const STRIKE_HALF: f64 = 0.1;
/// Idle gaps longer than this go back to the rest pose.
pub const REST_GAP: f64 = 0.8;
pub const REST_TRAVEL: f64 = 0.35;
/// Upward tilt of both controllers, radians.
pub const CONTROLLER_PITCH: f64 = 0.15;

pub const HEAD_POSITION: Vec3 = Vec3::new(0.0, 1.6, 0.0);
pub const LEFT_REST: Vec3 = Vec3::new(-0.25, 1.0, 0.0);
pub const RIGHT_REST: Vec3 = Vec3::new(0.25, 1.0, 0.0);

pub fn controller_orientation() -> UnitQuat {
    UnitQuat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), CONTROLLER_PITCH).expect("unit axis")
}

/// Controller position that puts the saber tip at `tip`.
pub fn controller_for_tip(tip: Vec3, rule: &HitRule) -> Vec3 {
    tip - controller_orientation().rotate(Vec3::new(0.0, 0.0, -rule.saber_length))
}

/// Rest pose of both hands, grips held.
pub fn rest_frame(num_buttons: usize) -> ActionFrame {
    let q = controller_orientation();
    let mut f = ActionFrame::rest(num_buttons).expect("button count checked by caller");
    f.head = Pose::new(HEAD_POSITION, UnitQuat::IDENTITY);
    f.left = Pose::new(LEFT_REST, q);
    f.right = Pose::new(RIGHT_REST, q);
    f.grips = [1.0, 1.0];
    for b in [Button::LeftGripClick, Button::RightGripClick] {
        if (b as usize) < num_buttons {
            f.buttons.set(b as usize, true);
        }
    }
    f
}

/// `10u³ − 15u⁴ + 6u⁵`.
pub fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    t: f64,
    p: Vec3,
    /// Set when the segment starting here is a strike through this anchor
    /// with this reach vector.
    strike: Option<(Vec3, Vec3)>,
}

impl Key {
    fn at(t: f64, p: Vec3) -> Self {
        Self { t, p, strike: None }
    }
}

/// Point on a strike arc for `phi ∈ [-1, 1]`: the anchor at 0, pulled
/// back toward the player by `phi²·retreat` elsewhere.
fn arc(anchor: Vec3, reach: Vec3, phi: f64) -> Vec3 {
    anchor + reach.scale(phi) + Vec3::new(0.0, 0.0, STRIKE_RETREAT * phi * phi)
}

#[derive(Debug, Clone, PartialEq)]
struct HandPlan {
    keys: Vec<Key>,
    /// Intervals during which the trigger is held.
    strikes: Vec<(f64, f64)>,
}

impl HandPlan {
    fn build(notes: &[&NoteEvent], rest_tip: Vec3) -> Self {
        let mut keys = vec![Key::at(0.0, rest_tip)];
        let mut strikes = Vec::with_capacity(notes.len());
        for (j, n) in notes.iter().enumerate() {
            let gap_prev = if j > 0 {
                n.target_time - notes[j - 1].target_time
            } else {
                f64::INFINITY
            };
            let gap_next = notes
                .get(j + 1)
                .map_or(f64::INFINITY, |m| m.target_time - n.target_time);
            let tau = STRIKE_HALF.min(0.4 * gap_prev).min(0.4 * gap_next);
            let (dx, dy) = n
                .cut
                .direction()
                .or(Cut::Down.direction())
                .expect("down has a direction");
            let d = Vec3::new(dx, dy, 0.0).scale(STRIKE_REACH);
            let a = n.lane.anchor();
            let t_wind = n.target_time - tau;
            let last = keys.last().expect("starts with rest").t;
            if t_wind - last > REST_GAP {
                if j > 0 {
                    keys.push(Key::at(last + REST_TRAVEL, rest_tip));
                }
                keys.push(Key::at(t_wind - REST_TRAVEL, rest_tip));
            }
            keys.push(Key {
                t: t_wind,
                p: arc(a, d, -1.0),
                strike: Some((a, d)),
            });
            keys.push(Key::at(n.target_time + tau, arc(a, d, 1.0)));
            strikes.push((t_wind, n.target_time + tau));
        }
        if let Some(last) = keys.last().copied() {
            if !notes.is_empty() {
                keys.push(Key::at(last.t + REST_TRAVEL, rest_tip));
            }
        }
        Self { keys, strikes }
    }

    fn tip(&self, t: f64) -> Vec3 {
        let i = self.keys.partition_point(|k| k.t <= t);
        if i == 0 {
            return self.keys[0].p;
        }
        if i == self.keys.len() {
            return self.keys[i - 1].p;
        }
        let (a, b) = (self.keys[i - 1], self.keys[i]);
        let span = b.t - a.t;
        if span <= 0.0 {
            return b.p;
        }
        let u = min_jerk((t - a.t) / span);
        match a.strike {
            Some((anchor, reach)) => arc(anchor, reach, 2.0 * u - 1.0),
            None => a.p.lerp(b.p, u),
        }
    }

    fn striking(&self, t: f64) -> bool {
        let i = self.strikes.partition_point(|s| s.1 < t);
        self.strikes.get(i).is_some_and(|s| s.0 <= t)
    }
}

/// Precomputed expert trajectory for one map.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePlan {
    hands: [HandPlan; 2],
    rule: HitRule,
    num_buttons: usize,
}

impl OraclePlan {
    pub fn new(map: &NoteMap, rule: HitRule, num_buttons: usize) -> Self {
        let rest = rest_frame(num_buttons);
        let build = |hand: Hand| {
            let notes: Vec<&NoteEvent> = map.notes.iter().filter(|n| n.hand == hand).collect();
            HandPlan::build(&notes, rule.tip(&rest, hand))
        };
        Self {
            hands: [build(Hand::Left), build(Hand::Right)],
            rule,
            num_buttons,
        }
    }

    pub fn tip(&self, hand: Hand, t: f64) -> Vec3 {
        self.hands[hand.index()].tip(t)
    }

    /// Noise-free expert frame at time `t`.
    pub fn frame(&self, t: f64) -> ActionFrame {
        let mut f = rest_frame(self.num_buttons);
        f.left.position = controller_for_tip(self.tip(Hand::Left, t), &self.rule);
        f.right.position = controller_for_tip(self.tip(Hand::Right, t), &self.rule);
        for (hand, button) in [
            (Hand::Left, Button::LeftTriggerClick),
            (Hand::Right, Button::RightTriggerClick),
        ] {
            let on = self.hands[hand.index()].striking(t);
            f.triggers[hand.index()] = if on { 1.0 } else { 0.0 };
            if (button as usize) < self.num_buttons {
                f.buttons.set(button as usize, on);
            }
        }
        f
    }

    /// Expert frame with i.i.d. Gaussian noise of std `sigma` meters on
    /// each hand position coordinate.
    pub fn noisy_frame<R: Rng>(&self, t: f64, sigma: f64, rng: &mut R) -> ActionFrame {
        let mut f = self.frame(t);
        if sigma > 0.0 {
            for pose in [&mut f.left, &mut f.right] {
                let mut n = || sigma * rng.sample::<f64, _>(StandardNormal);
                pose.position = pose.position + Vec3::new(n(), n(), n());
            }
        }
        f
    }
}
