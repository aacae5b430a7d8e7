use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization slack accepted by [`Distribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Option labels in question order.
    Labels(Vec<String>),
    /// Ordered real support points (integer grid or observed values).
    Points(Vec<f64>),
}

impl Support {
    pub fn len(&self) -> usize {
        match self {
            Support::Labels(l) => l.len(),
            Support::Points(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistributionError {
    #[error("support has {support} points but {mass} masses were given")]
    LengthMismatch { support: usize, mass: usize },
    #[error("negative or non-finite mass {0}")]
    InvalidMass(f64),
    #[error("total mass is zero")]
    ZeroMass,
    #[error("support points must be strictly increasing")]
    UnorderedSupport,
    #[error("empty support")]
    Empty,
}

/// Probability mass over an ordered support. Always normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    support: Support,
    mass: Vec<f64>,
}

impl Distribution {
    /// Validates and renormalizes `mass` to sum to one.
    pub fn new(support: Support, mass: Vec<f64>) -> Result<Self, DistributionError> {
        if support.is_empty() {
            return Err(DistributionError::Empty);
        }
        if support.len() != mass.len() {
            return Err(DistributionError::LengthMismatch {
                support: support.len(),
                mass: mass.len(),
            });
        }
        if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(DistributionError::InvalidMass(*bad));
        }
        if let Support::Points(p) = &support {
            if p.windows(2).any(|w| !(w[0] < w[1])) || p.iter().any(|x| !x.is_finite()) {
                return Err(DistributionError::UnorderedSupport);
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(DistributionError::ZeroMass);
        }
        let mass = mass.into_iter().map(|m| m / total).collect();
        Ok(Self { support, mass })
    }

    pub fn labels(labels: Vec<String>, mass: Vec<f64>) -> Result<Self, DistributionError> {
        Self::new(Support::Labels(labels), mass)
    }

    pub fn points(points: Vec<f64>, mass: Vec<f64>) -> Result<Self, DistributionError> {
        Self::new(Support::Points(points), mass)
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mass of the support point labelled `label`.
    pub fn mass_of(&self, label: &str) -> Option<f64> {
        match &self.support {
            Support::Labels(l) => l.iter().position(|x| x == label).map(|i| self.mass[i]),
            Support::Points(_) => None,
        }
    }

    /// Expectation under the given positions (one per support point).
    pub fn expectation(&self, positions: &[f64]) -> Option<f64> {
        (positions.len() == self.mass.len()).then(|| positions.iter().zip(&self.mass).map(|(x, m)| x * m).sum())
    }
}
