//! Flat views over trainable parameter containers.

use sha2::{Digest, Sha256};

pub trait Params {
    /// Visits every parameter buffer in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn squared_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |s| acc += s.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |s| s.fill(value));
    }

    /// `self += other * scale`, element-wise over matching layouts.
    fn add_scaled(&mut self, other: &dyn Params, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (d, o) in s.iter_mut().zip(&flat[offset..offset + n]) {
                *d += o * scale;
            }
            offset += n;
        });
    }

    /// SHA-256 over the little-endian bytes of every buffer.
    fn bitwise_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |s| {
            for v in s {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) fn slice_of(a: &ndarray::Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_of_mut(a: &mut ndarray::Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
