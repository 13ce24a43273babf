//! One-vs-rest L2-regularized hinge-loss linear classifiers.

mod ovr;
mod solver;

pub use ovr::{select_cost, stratified_holdout, train_ovr, CostSelection, OvrOutput};
pub use solver::{dual_objective, kkt_violation, primal_objective, train_binary, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::PoolingSpec;
use crate::scalar::{dot, Scalar};

/// Feature space a model was trained in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTag {
    pub layer: String,
    pub spec: PoolingSpec,
    /// 0 for the global pooling step, `t` for the `t`-th refining stage.
    pub stage: usize,
}

impl Default for FeatureTag {
    fn default() -> Self {
        FeatureTag { layer: crate::pooling::SOFTMAX_LAYER.to_string(), spec: PoolingSpec::default(), stage: 0 }
    }
}

/// `h(x) = w . x + b` for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinearModel<T: Scalar> {
    pub category: String,
    pub weights: Vec<T>,
    pub bias: T,
    #[serde(default)]
    pub feature_tag: FeatureTag,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(category: impl Into<String>, weights: Vec<T>, bias: T) -> Self {
        LinearModel { category: category.into(), weights, bias, feature_tag: FeatureTag::default() }
    }

    pub fn with_tag(mut self, tag: FeatureTag) -> Self {
        self.feature_tag = tag;
        self
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidConfig(format!("model {} has no weights", self.category)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::InvalidConfig(format!("model {} has non-finite parameters", self.category)));
        }
        Ok(())
    }

    pub fn score(&self, x: &[T]) -> Result<T> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: x.len() });
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    pub fn predict(&self, x: &[T]) -> Result<bool> {
        Ok(self.score(x)? > T::zero())
    }

    /// Fraction of samples whose sign prediction matches the label.
    pub fn accuracy(&self, features: &[Vec<T>], labels: &[bool]) -> Result<f64> {
        if features.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (x, &y) in features.iter().zip(labels) {
            correct += usize::from(self.predict(x)? == y);
        }
        Ok(correct as f64 / features.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cost_grid: Vec<f64>,
    /// Stop once both the largest projected-gradient magnitude of a pass and
    /// the relative duality gap fall to this value.
    pub tolerance: f64,
    pub max_passes: usize,
    pub seed: u64,
    /// Multiplies the cost of positive samples.
    #[serde(default = "one")]
    pub positive_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cost_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            tolerance: 1e-4,
            max_passes: 5000,
            seed: 0,
            positive_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cost_grid.is_empty() {
            return Err(Error::InvalidConfig("cost grid is empty".into()));
        }
        if self.cost_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig("costs must be positive".into()));
        }
        if !(self.tolerance > 0.0) || self.max_passes == 0 {
            return Err(Error::InvalidConfig("tolerance and max_passes must be positive".into()));
        }
        if !(self.positive_weight > 0.0 && self.positive_weight.is_finite()) {
            return Err(Error::InvalidConfig("positive weight must be positive".into()));
        }
        Ok(())
    }
}
