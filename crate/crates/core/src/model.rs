//! The deployable detector: selection plan, band layout, enhancement state
//! and SVM weights, persisted as a versioned JSON document.
//!
//! Floats are written as decimal strings with 17 significant digits so a
//! save/load cycle reproduces every weight bit for bit.

use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    partition_bands, BandPartition, EnhancementState, FeatureExtractor, FeatureVector,
    IntegrationMode,
};
use crate::image::Image;
use crate::keyed::SelectionPlan;
use crate::krawtchouk::{OrderMask, SpatialConfig};
use crate::svm::{predict, LearningRate, SvmModel, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub plan: SelectionPlan,
    pub partition: BandPartition,
    pub mode: IntegrationMode,
    pub enhancement: Option<EnhancementState>,
    pub svm: SvmModel,
}

/// Model plus cached bases, ready for repeated inference.
#[derive(Clone, Debug)]
pub struct Detector {
    model: DetectorModel,
    extractor: FeatureExtractor,
}

impl Detector {
    pub fn new(model: DetectorModel) -> Result<Self> {
        let extractor = FeatureExtractor::new(&model.plan, model.partition.clone(), model.mode)?;
        Ok(Self { model, extractor })
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn features(&self, image: &Image) -> Result<FeatureVector> {
        self.extractor.extract(image, self.model.enhancement.as_ref())
    }

    /// `(label, margin)`; label 1 means adversarial.
    pub fn detect(&self, image: &Image) -> Result<(u8, f64)> {
        predict(&self.model.svm, &self.features(image)?)
    }
}

impl DetectorModel {
    pub fn key_fingerprint(&self) -> u64 {
        self.plan.key_fingerprint()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.enhancement {
            e.validate()?;
        }
        let raw_dim = self.plan.retained_configs().len() * self.partition.num_bands();
        let expected = self
            .enhancement
            .as_ref()
            .map_or(Ok(raw_dim), |e| {
                if e.input_dim() == raw_dim {
                    Ok(e.output_dim())
                } else {
                    Err(Error::Shape(format!(
                        "enhancement expects {} inputs, plan yields {raw_dim}",
                        e.input_dim()
                    )))
                }
            })?;
        if self.svm.dim() != expected {
            return Err(Error::Shape(format!(
                "svm has {} weights, features have {expected} entries",
                self.svm.dim()
            )));
        }
        if self.svm.weights.iter().any(|w| !w.is_finite()) || !self.svm.bias.is_finite() {
            return Err(Error::Range("non-finite svm parameter".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc::from_model(self);
        serde_json::to_string_pretty(&doc)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model json: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("model json: missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: version.min(u32::MAX as u64) as u32,
                expected: FORMAT_VERSION,
            });
        }
        let doc: ModelDoc =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("model json: {e}")))?;
        doc.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Digest of the serialized document.
    pub fn fingerprint(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Ok(u64::from_be_bytes(head))
    }
}

/// Saves `model` to `path` and loads it back.
pub fn persist_roundtrip(model: &DetectorModel, path: impl AsRef<Path>) -> Result<DetectorModel> {
    model.save(path.as_ref())?;
    DetectorModel::load(path)
}

/// `f64` serialized as a 17-significant-digit decimal string.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:.16e}", self.0))
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<f64>()
            .map(Real)
            .map_err(|_| de::Error::custom(format!("not a decimal float: {s:?}")))
    }
}

fn reals(v: &[f64]) -> Vec<Real> {
    v.iter().copied().map(Real).collect()
}

fn unreal(v: Vec<Real>) -> Vec<f64> {
    v.into_iter().map(|r| r.0).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    key_fingerprint: String,
    plan: PlanDoc,
    partition: PartitionDoc,
    mode: IntegrationMode,
    enhancement: Option<EnhancementDoc>,
    svm: SvmDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    retained_configs: Vec<[Real; 2]>,
    order_mask: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDoc {
    width: usize,
    height: usize,
    num_bands: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnhancementDoc {
    weights: Option<Vec<Real>>,
    keep_mask: Option<Vec<bool>>,
    mean: Vec<Real>,
    std: Vec<Real>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfigDoc {
    lambda: Real,
    epochs: usize,
    schedule: LearningRate,
    shuffle_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvmDoc {
    weights: Vec<Real>,
    bias: Real,
    train_config: TrainConfigDoc,
}

fn parse_fingerprint(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Format(format!("bad fingerprint {s:?}")))
}

impl ModelDoc {
    fn from_model(m: &DetectorModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            key_fingerprint: format!("{:016x}", m.key_fingerprint()),
            plan: PlanDoc {
                retained_configs: m
                    .plan
                    .retained_configs()
                    .iter()
                    .map(|c| [Real(c.px()), Real(c.py())])
                    .collect(),
                order_mask: m.plan.order_mask().orders().iter().map(|&(n, k)| [n, k]).collect(),
            },
            partition: PartitionDoc {
                width: m.partition.width(),
                height: m.partition.height(),
                num_bands: m.partition.num_bands(),
            },
            mode: m.mode,
            enhancement: m.enhancement.as_ref().map(|e| EnhancementDoc {
                weights: e.weights.as_deref().map(reals),
                keep_mask: e.keep_mask.clone(),
                mean: reals(&e.mean),
                std: reals(&e.std),
            }),
            svm: SvmDoc {
                weights: reals(&m.svm.weights),
                bias: Real(m.svm.bias),
                train_config: TrainConfigDoc {
                    lambda: Real(m.svm.train_config.lambda),
                    epochs: m.svm.train_config.epochs,
                    schedule: m.svm.train_config.schedule,
                    shuffle_seed: m.svm.train_config.shuffle_seed,
                },
            },
        }
    }

    fn into_model(self) -> Result<DetectorModel> {
        let fingerprint = parse_fingerprint(&self.key_fingerprint)?;
        let configs = self
            .plan
            .retained_configs
            .iter()
            .map(|[px, py]| SpatialConfig::new(px.0, py.0))
            .collect::<Result<Vec<_>>>()?;
        let mask = OrderMask::from_orders(
            self.plan.order_mask.iter().map(|&[n, m]| (n, m)).collect(),
        )?;
        let plan = SelectionPlan::new(configs, mask, fingerprint)?;
        let partition = partition_bands(
            self.partition.width,
            self.partition.height,
            self.partition.num_bands,
        )?;
        let enhancement = self.enhancement.map(|e| EnhancementState {
            weights: e.weights.map(unreal),
            keep_mask: e.keep_mask,
            mean: unreal(e.mean),
            std: unreal(e.std),
        });
        let tc = self.svm.train_config;
        let svm = SvmModel {
            weights: unreal(self.svm.weights),
            bias: self.svm.bias.0,
            train_config: TrainConfig {
                lambda: tc.lambda.0,
                epochs: tc.epochs,
                schedule: tc.schedule,
                shuffle_seed: tc.shuffle_seed,
            },
        };
        let model = DetectorModel {
            plan,
            partition,
            mode: self.mode,
            enhancement,
            svm,
        };
        model.validate()?;
        Ok(model)
    }
}
