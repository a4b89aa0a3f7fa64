#![allow(dead_code)]

use proptest::prelude::*;
use vragent_core::geometry::{normalize_quaternion, Pose, UnitQuat, Vec3};
use vragent_core::{ActionFrame, Buttons};

pub fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

/// Raw 4-vectors away from zero.
pub fn raw_quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |c| c.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

pub fn unit_quat() -> impl Strategy<Value = UnitQuat> {
    raw_quat().prop_map(|c| normalize_quaternion(c).unwrap())
}

pub fn pose() -> impl Strategy<Value = Pose> {
    (vec3(2.0), unit_quat()).prop_map(|(p, q)| Pose::new(p, q))
}

pub fn frame(num_buttons: usize) -> impl Strategy<Value = ActionFrame> {
    (
        (pose(), pose(), pose()),
        prop::array::uniform2(0.0f64..=1.0),
        prop::array::uniform2(0.0f64..=1.0),
        prop::array::uniform4(-1.0f64..=1.0),
        vec3(3.0),
        any::<u32>(),
    )
        .prop_map(
            move |((head, left, right), triggers, grips, joysticks, origin, mask)| ActionFrame {
                head,
                left,
                right,
                triggers,
                grips,
                joysticks,
                origin,
                buttons: Buttons::from_mask(mask, num_buttons).unwrap(),
            },
        )
}

/// Frame with a random button count in `0..=32`.
pub fn any_frame() -> impl Strategy<Value = ActionFrame> {
    (0usize..=32).prop_flat_map(frame)
}

pub fn random_quat<R: rand::Rng>(rng: &mut R) -> UnitQuat {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if let Ok(q) = normalize_quaternion(c) {
            return q;
        }
    }
}

pub fn random_frame<R: rand::Rng>(rng: &mut R, num_buttons: usize) -> ActionFrame {
    let mut v = |r: f64| {
        Vec3::new(
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        )
    };
    let (hp, lp, rp, origin) = (v(2.0), v(2.0), v(2.0), v(3.0));
    ActionFrame {
        head: Pose::new(hp, random_quat(rng)),
        left: Pose::new(lp, random_quat(rng)),
        right: Pose::new(rp, random_quat(rng)),
        triggers: std::array::from_fn(|_| rng.random_range(0.0..=1.0)),
        grips: std::array::from_fn(|_| rng.random_range(0.0..=1.0)),
        joysticks: std::array::from_fn(|_| rng.random_range(-1.0..=1.0)),
        origin,
        buttons: Buttons::from_mask(rng.random(), num_buttons).unwrap(),
    }
}
