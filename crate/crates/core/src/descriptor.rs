use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize};

/// Unit-norm embedding vector; the common currency of both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// Normalizes `v` to unit length.
    pub fn new(v: &[f64]) -> Result<Self> {
        Ok(Self(l2_normalize(v)?))
    }

    /// Wraps a vector that is already unit norm (checked to 1e-9).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = dot(&v, &v).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("descriptor norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Inner product, which equals cosine similarity for unit vectors.
    pub fn similarity(&self, other: &Descriptor) -> f64 {
        dot(&self.0, &other.0).clamp(-1.0, 1.0)
    }
}

impl AsRef<[f64]> for Descriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
