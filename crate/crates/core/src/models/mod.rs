//! Generator, mapping network, critic and classifier.

mod config;
mod critic;
mod gsgn;

pub use config::{CriticConfig, ModelConfig, NormMode};
pub use critic::{Classifier, Critic, PROB_CLAMP};
pub use gsgn::{count_parameters, Gsgn};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Style latent `z` and, once mapped, the intermediate latent `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStyle {
    pub z: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f32>>,
}

impl LatentStyle {
    pub fn one_hot(tasks: usize, index: usize) -> Result<Self> {
        if index >= tasks {
            return Err(Error::InvalidArgument(format!("task {index} out of {tasks}")));
        }
        let mut z = vec![0.0; tasks];
        z[index] = 1.0;
        Ok(Self { z, w: None })
    }

    pub fn from_weights(z: Vec<f32>) -> Result<Self> {
        if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("style weights must be finite and non-empty".into()));
        }
        Ok(Self { z, w: None })
    }

    /// `(1 - alpha) * a + alpha * b`.
    pub fn interpolate(a: &Self, b: &Self, alpha: f32) -> Result<Self> {
        if a.z.len() != b.z.len() {
            return Err(Error::InvalidArgument("styles have different task counts".into()));
        }
        let z = a.z.iter().zip(&b.z).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
        Self::from_weights(z)
    }

    pub fn is_one_hot(&self) -> bool {
        self.z.iter().filter(|&&v| v == 1.0).count() == 1 && self.z.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// The same `z` repeated for a batch of `n`: shape `(n, K)`.
    pub fn batch(&self, n: usize) -> Result<Tensor> {
        let data: Vec<f32> = (0..n).flat_map(|_| self.z.iter().copied()).collect();
        Tensor::new([n, self.z.len()], data)
    }
}
