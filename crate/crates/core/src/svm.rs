//! Linear SVM head trained by deterministic stochastic subgradient descent
//! on the L2-regularized hinge loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::keyed::KeyStream;

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    /// `η_t = 1 / (λ t)` with projection onto the `1/√λ` ball.
    #[default]
    InverseScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub schedule: LearningRate,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            schedule: LearningRate::InverseScaling,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be positive", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_config: TrainConfig,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn margin(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "feature has {} entries, model expects {}",
                values.len(),
                self.weights.len()
            )));
        }
        Ok(dot(&self.weights, values) + self.bias)
    }

    /// Regularized hinge objective on a labeled set.
    pub fn objective(&self, features: &[FeatureVector], labels: &[u8]) -> Result<f64> {
        let mut hinge = 0.0;
        for (f, &l) in features.iter().zip(labels) {
            let y = signed(l);
            hinge += (1.0 - y * self.margin(f.values())?).max(0.0);
        }
        let reg = dot(&self.weights, &self.weights) + self.bias * self.bias;
        Ok(0.5 * self.train_config.lambda * reg + hinge / features.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn signed(label: u8) -> f64 {
    if label == 1 { 1.0 } else { -1.0 }
}

/// `(label, margin)` with label 1 iff the margin is strictly positive.
pub fn predict(model: &SvmModel, feature: &FeatureVector) -> Result<(u8, f64)> {
    let margin = model.margin(feature.values())?;
    Ok((u8::from(margin > 0.0), margin))
}

pub fn train_svm(features: &[FeatureVector], labels: &[u8], config: &TrainConfig) -> Result<SvmModel> {
    train_svm_traced(features, labels, config).map(|(m, _)| m)
}

/// Trains and also returns the training objective after every epoch.
///
/// Each epoch visits the examples in a fresh SplitMix64 permutation. The
/// bias is handled as a weight on a constant input, so it is regularized
/// together with `w`. The returned weights are the running average of the
/// iterates, which is what makes the per-epoch objective settle smoothly.
pub fn train_svm_traced(
    features: &[FeatureVector],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<(SvmModel, Vec<f64>)> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Range("labels must be 0 or 1".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Degenerate("SVM training needs both classes".into()));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Shape(format!(
            "mixed feature dimensions {dim} and {}",
            bad.len()
        )));
    }

    let lambda = config.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; dim + 1];
    let mut avg = vec![0.0; dim + 1];
    let mut t: u64 = 0;
    let mut stream = KeyStream::new(config.shuffle_seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        stream.shuffle(&mut order);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = features[i].values();
            let y = signed(labels[i]);
            let margin = y * (dot(&w[..dim], x) + w[dim]);
            let shrink = 1.0 - eta * lambda;
            for wj in w.iter_mut() {
                *wj *= shrink;
            }
            if margin < 1.0 {
                for (wj, xj) in w[..dim].iter_mut().zip(x) {
                    *wj += eta * y * xj;
                }
                w[dim] += eta * y;
            }
            let norm = dot(&w, &w).sqrt();
            if norm > radius {
                let s = radius / norm;
                for wj in w.iter_mut() {
                    *wj *= s;
                }
            }
            let k = 1.0 / t as f64;
            for (a, wj) in avg.iter_mut().zip(&w) {
                *a += (wj - *a) * k;
            }
        }
        let snapshot = SvmModel {
            weights: avg[..dim].to_vec(),
            bias: avg[dim],
            train_config: *config,
        };
        trace.push(snapshot.objective(features, labels)?);
    }

    let model = SvmModel {
        weights: avg[..dim].to_vec(),
        bias: avg[dim],
        train_config: *config,
    };
    if model.weights.iter().any(|v| !v.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Stability("SVM weights diverged".into()));
    }
    Ok((model, trace))
}
