//! Uniform access to named parameter arrays.
//!
//! Optimizers, gradient checks, checksums and snapshots all walk parameters
//! through this trait instead of knowing each struct's layout. Gradient
//! containers reuse the parameter type itself, zero-filled.

use sha2::{Digest, Sha256};

pub trait ParamSet {
    /// Visits every trainable array in a fixed order. Scalars appear as length-1 slices.
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, a| out.extend_from_slice(a));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |_, a| {
            a.copy_from_slice(&flat[at..at + a.len()]);
            at += a.len();
        });
        assert_eq!(at, flat.len(), "flat vector length does not match parameter layout");
    }

    fn names(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |n, a| out.push((n.to_string(), a.len())));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, a| a.iter_mut().for_each(|v| *v = value));
    }

    /// Hex SHA-256 over names and little-endian values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |n, a| {
            h.update(n.as_bytes());
            for v in a {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Returns a same-layout copy with every entry zero; the gradient accumulator shape.
pub fn zeros_like<P: ParamSet + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}

/// Accumulates `src` into `dst` (same layout).
pub fn accumulate<P: ParamSet>(dst: &mut P, src: &P) {
    let flat = src.to_flat();
    let mut at = 0;
    dst.visit_mut(&mut |_, a| {
        for v in a.iter_mut() {
            *v += flat[at];
            at += 1;
        }
    });
}

/// Named tensors as a parameter set, for ad-hoc gradient checks.
#[derive(Clone, Debug, Default)]
pub struct NamedTensors(pub Vec<(String, crate::Tensor)>);

impl ParamSet for NamedTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (n, t) in &self.0 {
            f(n, &t.data);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (n, t) in &mut self.0 {
            f(n, &mut t.data);
        }
    }
}
