//! Scene features the policy sees.
//!
//! Layout for `N` note slots (`D = 6·N + 6`, 30 by default):
//!
//! | offset        | values                                                    |
//! |---------------|-----------------------------------------------------------|
//! | `6·j .. 6·j+6`| note `j`: `Δt / lead`, anchor x, anchor y, cut x, cut y, hand (−1 left, +1 right) |
//! | `6·N .. 6·N+3`| left saber tip x, y, z                                    |
//! | `6·N+3 .. `   | right saber tip x, y, z                                   |
//!
//! Notes are the next `N` unresolved, already spawned notes, earliest first.
//! Missing slots are zero. A cut of "any" encodes as direction `(0, 0)`.

use super::game::GameState;
use super::map::SPAWN_LEAD;
use crate::action::{ActionFrame, Observation};

pub const DEFAULT_NOTE_SLOTS: usize = 4;
pub const NOTE_FEATURES: usize = 6;

pub fn feature_dim(slots: usize) -> usize {
    NOTE_FEATURES * slots + 6
}

/// Features for the state at its current clock; `last` is the most recently
/// executed frame (it becomes the observation's device state).
pub fn observation_encode(state: &GameState, last: &ActionFrame, step: u64, slots: usize) -> Observation {
    let mut feature = vec![0.0; feature_dim(slots)];
    for (j, n) in state.pending().take(slots).enumerate() {
        let a = n.lane.anchor();
        let (dx, dy) = n.cut.direction().unwrap_or((0.0, 0.0));
        let slot = &mut feature[j * NOTE_FEATURES..(j + 1) * NOTE_FEATURES];
        slot.copy_from_slice(&[
            (n.target_time - state.clock) / SPAWN_LEAD,
            a.x,
            a.y,
            dx,
            dy,
            n.hand.sign(),
        ]);
    }
    let tips = &mut feature[NOTE_FEATURES * slots..];
    tips[..3].copy_from_slice(&state.tips[0].to_array());
    tips[3..].copy_from_slice(&state.tips[1].to_array());
    Observation {
        feature,
        device_state: last.flatten().continuous,
        step,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::game::HitRule;
    use crate::sim::map::{generate_map, MapSpec, NoteMap};
    use crate::sim::oracle::rest_frame;

    #[test]
    fn padding_and_length() {
        let empty = NoteMap {
            spec: MapSpec::new("e", 0.0, 10.0, 0),
            notes: vec![],
        };
        let rest = rest_frame(6);
        let g = GameState::new(&empty, HitRule::default(), &rest);
        let o = observation_encode(&g, &rest, 0, 4);
        assert_eq!(o.feature.len(), crate::sim::DEFAULT_FEATURE_DIM);
        assert!(o.feature[..24].iter().all(|&v| v == 0.0));
        assert!(o.feature[24..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn relative_timing() {
        let map = generate_map(&MapSpec::new("r", 3.0, 10.0, 1)).unwrap();
        let mut shifted = map.clone();
        for n in &mut shifted.notes {
            n.target_time += 0.5;
        }
        let rest = rest_frame(6);
        let mut a = GameState::new(&map, HitRule::default(), &rest);
        let mut b = GameState::new(&shifted, HitRule::default(), &rest);
        a.clock = 1.0;
        b.clock = 1.5;
        let fa = observation_encode(&a, &rest, 3, 4).feature;
        let fb = observation_encode(&b, &rest, 3, 4).feature;
        assert!(fa.iter().zip(&fb).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut lens = Vec::new();
        for k in 0..300 {
            a.step(&rest, 1.0 / 30.0);
            lens.push(observation_encode(&a, &rest, k, 4).feature.len());
        }
        assert!(lens.iter().all(|&l| l == 30));
    }
}
