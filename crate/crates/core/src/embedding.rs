use serde::{Deserialize, Serialize};

/// Unit-length embedding.
///
/// Construction normalizes to L2 norm 1; a zero or non-finite vector is rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Option<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 || values.is_empty() {
            return None;
        }
        Some(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Cosine similarity. Both vectors are unit length, so this is the dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;

    /// Stored vectors that are already unit length are kept bit-for-bit.
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        let norm = l2_norm(&values);
        if norm.is_finite() && !values.is_empty() && (norm - 1.0).abs() <= 1e-9 {
            return Ok(Self(values));
        }
        EmbeddingVector::new(values).ok_or_else(|| "embedding must be nonzero and finite".to_string())
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes() {
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert!(EmbeddingVector::new(vec![0.0, 0.0]).is_none());
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_none());
        assert!(EmbeddingVector::new(vec![]).is_none());
    }

    #[test]
    fn serde_renormalizes_and_rejects_zero() {
        let v: EmbeddingVector = serde_json::from_str("[0.0, 2.0]").unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0]);
        assert!(serde_json::from_str::<EmbeddingVector>("[0.0, 0.0]").is_err());
    }
}
