use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn of<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.range()]
    }

    pub fn of_mut<'a, F>(&self, params: &'a mut [F]) -> &'a mut [F] {
        &mut params[self.range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub slot: Slot,
    pub init: Init,
}

/// Ordered list of named parameter tensors. The order is the enumeration
/// order used by the parameter blob.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Draws initial values deterministically from `seed`.
    pub fn init<F: Real>(&self, seed: u64) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![F::zero(); self.total];
        for e in &self.entries {
            let dst = e.slot.of_mut(&mut out);
            match e.init {
                Init::Const(v) => dst.fill(F::of(v)),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    for d in dst {
                        *d = F::of(rng.random_range(-bound..bound));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: Layout,
    prefix: Vec<String>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.layout.total,
            rows,
            cols,
        };
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.layout.entries.push(ParamEntry { name: full, slot, init });
        self.layout.total += slot.len();
        slot
    }

    pub fn finish(self) -> Layout {
        self.layout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_contiguous_and_named() {
        let mut b = LayoutBuilder::new();
        b.push_scope("enc");
        let w = b.add("w", 3, 4, Init::FanIn(3));
        b.pop_scope();
        let g = b.add("gain", 1, 4, Init::Const(1.0));
        let layout = b.finish();
        assert_eq!(w.range(), 0..12);
        assert_eq!(g.range(), 12..16);
        assert_eq!(layout.total(), 16);
        assert_eq!(layout.entries()[0].name, "enc.w");
        assert_eq!(layout.entries()[1].name, "gain");
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut b = LayoutBuilder::new();
        b.add("w", 16, 8, Init::FanIn(16));
        b.add("g", 1, 8, Init::Const(1.0));
        let layout = b.finish();
        let a: Vec<f64> = layout.init(3);
        let again: Vec<f64> = layout.init(3);
        let other: Vec<f64> = layout.init(4);
        assert_eq!(a, again);
        assert_ne!(a, other);
        assert!(a[..128].iter().all(|v| v.abs() <= 0.25));
        assert!(a[128..].iter().all(|&v| v == 1.0));
    }
}
