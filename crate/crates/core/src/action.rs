//! Action and observation vocabulary, plus the canonical flat layout shared by
//! the loss, the dataset file and the wire protocol.
//!
//! Continuous layout (32 slots):
//!
//! | slots  | content                          |
//! |--------|----------------------------------|
//! | 0..3   | head position                    |
//! | 3..7   | head quaternion (w, x, y, z)     |
//! | 7..10  | left controller position         |
//! | 10..14 | left controller quaternion       |
//! | 14..17 | right controller position        |
//! | 17..21 | right controller quaternion      |
//! | 21..23 | triggers L, R                    |
//! | 23..25 | grips L, R                       |
//! | 25..29 | joysticks Lx, Ly, Rx, Ry         |
//! | 29..32 | tracking origin                  |

use std::ops::Range;

use thiserror::Error;

use crate::geometry::{normalize_quaternion, Pose, UnitQuat, Vec3};

pub const CONTINUOUS_DIM: usize = 32;
pub const DEFAULT_BUTTONS: usize = 6;
pub const MAX_BUTTONS: usize = 32;

pub const HEAD_POS: Range<usize> = 0..3;
pub const HEAD_QUAT: Range<usize> = 3..7;
pub const LEFT_POS: Range<usize> = 7..10;
pub const LEFT_QUAT: Range<usize> = 10..14;
pub const RIGHT_POS: Range<usize> = 14..17;
pub const RIGHT_QUAT: Range<usize> = 17..21;
pub const TRIGGERS: Range<usize> = 21..23;
pub const GRIPS: Range<usize> = 23..25;
pub const JOYSTICKS: Range<usize> = 25..29;
pub const ORIGIN: Range<usize> = 29..32;

/// First slot of each quaternion (the `w` component).
pub const QUAT_SLOTS: [usize; 3] = [HEAD_QUAT.start, LEFT_QUAT.start, RIGHT_QUAT.start];

/// Tolerance under which an incoming quaternion is already considered unit
/// and is passed through untouched.
const UNIT_PASSTHROUGH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("at most {MAX_BUTTONS} buttons are supported, got {0}")]
    TooManyButtons(usize),
}

/// Named button indices for the default six-button layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Button {
    LeftTriggerClick = 0,
    RightTriggerClick = 1,
    LeftGripClick = 2,
    RightGripClick = 3,
    A = 4,
    B = 5,
}

/// Fixed-size set of boolean button states stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Buttons {
    bits: u32,
    count: u8,
}

impl Buttons {
    pub fn new(count: usize) -> Result<Self, ActionError> {
        if count > MAX_BUTTONS {
            return Err(ActionError::TooManyButtons(count));
        }
        Ok(Self {
            bits: 0,
            count: count as u8,
        })
    }

    /// Builds a set from a raw mask; bits at or above `count` are dropped.
    pub fn from_mask(mask: u32, count: usize) -> Result<Self, ActionError> {
        let mut b = Self::new(count)?;
        b.bits = mask & b.valid_mask();
        Ok(b)
    }

    pub fn from_bools(states: &[bool]) -> Result<Self, ActionError> {
        let mut b = Self::new(states.len())?;
        for (i, &s) in states.iter().enumerate() {
            b.set(i, s);
        }
        Ok(b)
    }

    fn valid_mask(&self) -> u32 {
        if self.count as usize == MAX_BUTTONS {
            u32::MAX
        } else {
            (1u32 << self.count) - 1
        }
    }

    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mask(&self) -> u32 {
        self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len() && self.bits & (1 << i) != 0
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < self.len(), "button {i} out of range for {} buttons", self.len());
        if on {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// One timestep of device state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionFrame {
    pub head: Pose,
    pub left: Pose,
    pub right: Pose,
    /// Analog trigger pull, left then right, in `[0, 1]`.
    pub triggers: [f64; 2],
    /// Analog grip squeeze, left then right, in `[0, 1]`.
    pub grips: [f64; 2],
    /// Left x, left y, right x, right y, each in `[-1, 1]`.
    pub joysticks: [f64; 4],
    pub origin: Vec3,
    pub buttons: Buttons,
}

impl ActionFrame {
    /// All devices at the origin with identity orientation and idle inputs.
    pub fn rest(num_buttons: usize) -> Result<Self, ActionError> {
        Ok(Self {
            head: Pose::default(),
            left: Pose::default(),
            right: Pose::default(),
            triggers: [0.0; 2],
            grips: [0.0; 2],
            joysticks: [0.0; 4],
            origin: Vec3::ZERO,
            buttons: Buttons::new(num_buttons)?,
        })
    }

    pub fn num_buttons(&self) -> usize {
        self.buttons.len()
    }

    /// Flattens into the canonical layout, clamping analogs into range.
    pub fn flatten(&self) -> Flattened {
        let mut c = [0.0; CONTINUOUS_DIM];
        let mut clamped = false;
        for (pose, pos, quat) in [
            (&self.head, HEAD_POS, HEAD_QUAT),
            (&self.left, LEFT_POS, LEFT_QUAT),
            (&self.right, RIGHT_POS, RIGHT_QUAT),
        ] {
            c[pos].copy_from_slice(&pose.position.to_array());
            c[quat].copy_from_slice(&pose.orientation.components());
        }
        let mut put = |range: Range<usize>, values: &[f64], lo: f64, hi: f64| {
            for (slot, &v) in c[range].iter_mut().zip(values) {
                let v2 = v.clamp(lo, hi);
                clamped |= v2 != v;
                *slot = v2;
            }
        };
        put(TRIGGERS, &self.triggers, 0.0, 1.0);
        put(GRIPS, &self.grips, 0.0, 1.0);
        put(JOYSTICKS, &self.joysticks, -1.0, 1.0);
        c[ORIGIN].copy_from_slice(&self.origin.to_array());
        Flattened {
            continuous: c,
            buttons: self.buttons.to_bools(),
            clamped,
        }
    }

    /// Position of a point `offset` meters along the controller's local
    /// forward axis (`-z`).
    pub fn tip(pose: &Pose, offset: f64) -> Vec3 {
        pose.transform_point(Vec3::new(0.0, 0.0, -offset))
    }
}

/// Result of [`ActionFrame::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct Flattened {
    pub continuous: [f64; CONTINUOUS_DIM],
    pub buttons: Vec<bool>,
    /// Set when any analog was outside its range and got clamped.
    pub clamped: bool,
}

/// Result of [`unflatten`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unflattened {
    pub frame: ActionFrame,
    /// A quaternion slot had zero norm (or a non-finite value) and was
    /// replaced by the identity, or a position was non-finite.
    pub degenerate: bool,
    pub clamped: bool,
}

/// Rebuilds a frame from the canonical layout.
///
/// Quaternion slots that are not already unit length are normalized; a
/// zero-norm slot becomes the identity and marks the frame degenerate.
pub fn unflatten(continuous: &[f64], bools: &[bool]) -> Result<Unflattened, ActionError> {
    if continuous.len() != CONTINUOUS_DIM {
        return Err(ActionError::LengthMismatch {
            expected: CONTINUOUS_DIM,
            actual: continuous.len(),
        });
    }
    let buttons = Buttons::from_bools(bools)?;
    let mut degenerate = false;
    let mut clamped = false;

    let mut vec3 = |range: Range<usize>| {
        let s = &continuous[range];
        let v = Vec3::from_slice(s);
        if v.is_finite() {
            v
        } else {
            degenerate = true;
            Vec3::ZERO
        }
    };
    let head_pos = vec3(HEAD_POS);
    let left_pos = vec3(LEFT_POS);
    let right_pos = vec3(RIGHT_POS);
    let origin = vec3(ORIGIN);

    let mut quat = |range: Range<usize>| {
        let raw: [f64; 4] = continuous[range].try_into().expect("4 slots");
        let n2: f64 = raw.iter().map(|c| c * c).sum();
        if (n2.sqrt() - 1.0).abs() <= UNIT_PASSTHROUGH_TOL {
            return UnitQuat::from_unit_components(raw);
        }
        match normalize_quaternion(raw) {
            Ok(q) => q,
            Err(_) => {
                degenerate = true;
                UnitQuat::IDENTITY
            }
        }
    };
    let head_q = quat(HEAD_QUAT);
    let left_q = quat(LEFT_QUAT);
    let right_q = quat(RIGHT_QUAT);

    let mut analog = |range: Range<usize>, lo: f64, hi: f64| -> Vec<f64> {
        continuous[range]
            .iter()
            .map(|&v| {
                if !v.is_finite() {
                    degenerate = true;
                    return 0.0;
                }
                let c = v.clamp(lo, hi);
                clamped |= c != v;
                c
            })
            .collect()
    };
    let triggers = analog(TRIGGERS, 0.0, 1.0);
    let grips = analog(GRIPS, 0.0, 1.0);
    let joysticks = analog(JOYSTICKS, -1.0, 1.0);

    Ok(Unflattened {
        frame: ActionFrame {
            head: Pose::new(head_pos, head_q),
            left: Pose::new(left_pos, left_q),
            right: Pose::new(right_pos, right_q),
            triggers: [triggers[0], triggers[1]],
            grips: [grips[0], grips[1]],
            joysticks: [joysticks[0], joysticks[1], joysticks[2], joysticks[3]],
            origin,
            buttons,
        },
        degenerate,
        clamped,
    })
}

/// `H` consecutive frames predicted for steps `start_step ..`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub start_step: u64,
    pub frames: Vec<ActionFrame>,
    /// Per-frame button probabilities before thresholding.
    pub bool_probs: Vec<Vec<f64>>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }

    /// Frame predicted for absolute step `step`, if the chunk covers it.
    pub fn frame_at(&self, step: u64) -> Option<&ActionFrame> {
        let off = step.checked_sub(self.start_step)?;
        self.frames.get(off as usize)
    }
}

/// What the policy sees at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Scene encoding (fixed length per run).
    pub feature: Vec<f64>,
    /// Flattened continuous state of the devices when the observation was
    /// taken.
    pub device_state: [f64; CONTINUOUS_DIM],
    pub step: u64,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.feature
            .iter()
            .chain(self.device_state.iter())
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_frame_layout() {
        let f = ActionFrame::rest(DEFAULT_BUTTONS).unwrap().flatten();
        for (i, v) in f.continuous.iter().enumerate() {
            let expected = if QUAT_SLOTS.contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(*v, expected, "slot {i}");
        }
        assert_eq!(QUAT_SLOTS, [3, 10, 17]);
        assert_eq!(f.buttons, vec![false; 6]);
        assert!(!f.clamped);
    }

    #[test]
    fn out_of_range_trigger_is_clamped_and_flagged() {
        let mut frame = ActionFrame::rest(DEFAULT_BUTTONS).unwrap();
        frame.triggers[1] = 1.3;
        frame.joysticks[0] = -2.0;
        let f = frame.flatten();
        assert_eq!(f.continuous[TRIGGERS.start + 1], 1.0);
        assert_eq!(f.continuous[JOYSTICKS.start], -1.0);
        assert!(f.clamped);
    }

    #[test]
    fn flatten_roundtrip_example() {
        let mut frame = ActionFrame::rest(DEFAULT_BUTTONS).unwrap();
        frame.left.position = Vec3::new(0.1, 1.2, -0.3);
        frame.right.orientation = UnitQuat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.3).unwrap();
        frame.grips = [0.25, 0.75];
        frame.buttons.set(Button::A as usize, true);
        let f = frame.flatten();
        let back = unflatten(&f.continuous, &f.buttons).unwrap();
        assert_eq!(back.frame, frame);
        assert!(!back.degenerate && !back.clamped);
    }

    #[test]
    fn zero_quaternion_falls_back_to_identity() {
        let mut c = ActionFrame::rest(DEFAULT_BUTTONS).unwrap().flatten().continuous;
        c[LEFT_QUAT].fill(0.0);
        let u = unflatten(&c, &[false; 6]).unwrap();
        assert!(u.degenerate);
        assert_eq!(u.frame.left.orientation, UnitQuat::IDENTITY);
    }

    #[test]
    fn non_unit_quaternion_is_normalized() {
        let mut c = ActionFrame::rest(DEFAULT_BUTTONS).unwrap().flatten().continuous;
        c[HEAD_QUAT].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let u = unflatten(&c, &[false; 6]).unwrap();
        assert!(!u.degenerate);
        assert_eq!(u.frame.head.orientation.components(), [0.5; 4]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert_eq!(
            unflatten(&[0.0; 31], &[]),
            Err(ActionError::LengthMismatch {
                expected: 32,
                actual: 31
            })
        );
        assert!(matches!(
            unflatten(&[0.0; 32], &[false; 33]),
            Err(ActionError::TooManyButtons(33))
        ));
    }

    #[test]
    fn button_count_does_not_change_continuous_layout() {
        let a = ActionFrame::rest(0).unwrap().flatten();
        let b = ActionFrame::rest(32).unwrap().flatten();
        assert_eq!(a.continuous, b.continuous);
        assert_eq!(b.buttons.len(), 32);
    }

    #[test]
    fn chunk_indexing() {
        let f = ActionFrame::rest(2).unwrap();
        let chunk = ActionChunk {
            start_step: 10,
            frames: vec![f; 4],
            bool_probs: vec![vec![0.0; 2]; 4],
        };
        assert!(chunk.frame_at(9).is_none());
        assert!(chunk.frame_at(13).is_some());
        assert!(chunk.frame_at(14).is_none());
    }

    #[test]
    fn tip_follows_controller_forward() {
        let pose = Pose::new(Vec3::new(0.0, 1.0, 0.0), UnitQuat::IDENTITY);
        assert_eq!(ActionFrame::tip(&pose, 0.5), Vec3::new(0.0, 1.0, -0.5));
    }
}
