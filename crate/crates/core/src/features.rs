//! Frequency-band integration and feature enhancement.
//!
//! Coefficients of one spatial configuration are grouped into `#B` radial
//! shells of `(n, m)` space and summed, giving one feature per
//! (configuration, band). Optional enhancement standardizes, weights and
//! ranks those features on a labeled training set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::keyed::SelectionPlan;
use crate::krawtchouk::{CoefficientBlock, CoefficientSet, ConfigBasis, SpatialConfig};

pub const DEFAULT_NUM_BANDS: usize = 8;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.75;
/// Variance floor in the Fisher ratio.
pub const FISHER_EPSILON: f64 = 1e-12;

/// Equal-width radial bands over `(n, m)` under the ℓ2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPartition {
    num_bands: usize,
    width: usize,
    height: usize,
    thresholds: Vec<f64>,
}

impl BandPartition {
    pub fn num_bands(&self) -> usize {
        self.num_bands
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `#B + 1` radii from 0 to `‖(W, H)‖₂`.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Zero-based band of `(n, m)`; `None` past the outer radius.
    pub fn band_of(&self, n: usize, m: usize) -> Option<usize> {
        let r = (n as f64).hypot(m as f64);
        let t = &self.thresholds;
        if r > t[self.num_bands] {
            return None;
        }
        // half-open shells, the outermost one closed
        (0..self.num_bands)
            .find(|&i| t[i] <= r && r < t[i + 1])
            .or(Some(self.num_bands - 1))
    }
}

pub fn partition_bands(width: usize, height: usize, num_bands: usize) -> Result<BandPartition> {
    if num_bands < 1 {
        return Err(Error::Config("at least one band is required".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::Config("partition of an empty image".into()));
    }
    let radius = (width as f64).hypot(height as f64);
    let thresholds = (0..=num_bands)
        .map(|i| i as f64 / num_bands as f64 * radius)
        .collect();
    Ok(BandPartition {
        num_bands,
        width,
        height,
        thresholds,
    })
}

/// How coefficients inside a band are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    /// Signed sum of the coefficients (linear in the image).
    Raw,
    /// Sum of absolute values.
    #[default]
    Magnitude,
}

impl std::str::FromStr for IntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "magnitude" => Ok(Self::Magnitude),
            other => Err(Error::Config(format!("unknown integration mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Magnitude => "magnitude",
        })
    }
}

/// Origin of one feature entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSlot {
    pub config: SpatialConfig,
    pub band: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    layout: Vec<FeatureSlot>,
    standardized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, layout: Vec<FeatureSlot>, standardized: bool) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} values for {} layout slots",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self {
            values,
            layout,
            standardized,
        })
    }

    /// Unlabelled vector, for callers that only need values (e.g. the SVM).
    pub fn from_values(values: Vec<f64>) -> Self {
        let slot = FeatureSlot {
            config: SpatialConfig::new(0.5, 0.5).expect("valid"),
            band: 0,
        };
        Self {
            layout: vec![slot; values.len()],
            values,
            standardized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[FeatureSlot] {
        &self.layout
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Integrates each block of `coeffs` over the bands of `partition`; layout
/// is blocks outer, bands inner.
pub fn integrate_bands(
    coeffs: &CoefficientSet,
    partition: &BandPartition,
    mode: IntegrationMode,
) -> Result<FeatureVector> {
    if coeffs.width() != partition.width || coeffs.height() != partition.height {
        return Err(Error::Shape(format!(
            "coefficients of a {}x{} image, partition for {}x{}",
            coeffs.width(),
            coeffs.height(),
            partition.width,
            partition.height
        )));
    }
    let nb = partition.num_bands;
    let mut values = Vec::with_capacity(coeffs.blocks().len() * nb);
    let mut layout = Vec::with_capacity(values.capacity());
    for block in coeffs.blocks() {
        let bands: Vec<usize> = block
            .orders
            .iter()
            .map(|&(n, m)| partition.band_of(n, m).expect("orders lie inside the image"))
            .collect();
        values.extend(integrate_block(block, &bands, nb, mode));
        layout.extend((0..nb).map(|band| FeatureSlot {
            config: block.config,
            band,
        }));
    }
    FeatureVector::new(values, layout, false)
}

fn integrate_block(
    block: &CoefficientBlock,
    bands: &[usize],
    num_bands: usize,
    mode: IntegrationMode,
) -> Vec<f64> {
    let mut sums = vec![0.0; num_bands];
    for (&c, &b) in block.values.iter().zip(bands) {
        sums[b] += match mode {
            IntegrationMode::Raw => c,
            IntegrationMode::Magnitude => c.abs(),
        };
    }
    sums
}

/// Enhancement switches used when fitting an [`EnhancementState`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    pub weighting: bool,
    /// Fraction of (non-degenerate) entries kept by correlation ranking.
    pub keep_fraction: f64,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            weighting: true,
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }
}

/// Learned standardization, weights and ranking mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementState {
    pub weights: Option<Vec<f64>>,
    pub keep_mask: Option<Vec<bool>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl EnhancementState {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.keep_mask
            .as_ref()
            .map_or(self.mean.len(), |m| m.iter().filter(|k| **k).count())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.std.len() != d
            || self.weights.as_ref().is_some_and(|w| w.len() != d)
            || self.keep_mask.as_ref().is_some_and(|k| k.len() != d)
        {
            return Err(Error::Shape("enhancement vectors differ in length".into()));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Range("weights must be finite and non-negative".into()));
            }
        }
        let kept = |i: usize| self.keep_mask.as_ref().is_none_or(|k| k[i]);
        if self.output_dim() == 0 {
            return Err(Error::Degenerate("keep mask drops every entry".into()));
        }
        if (0..d).any(|i| kept(i) && !(self.std[i] > 0.0 && self.mean[i].is_finite())) {
            return Err(Error::Range("kept entry without positive std".into()));
        }
        Ok(())
    }

    /// z-score, then weight, then drop masked entries.
    pub fn apply(&self, fv: &FeatureVector) -> Result<FeatureVector> {
        if fv.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature has {} entries, enhancement expects {}",
                fv.len(),
                self.input_dim()
            )));
        }
        let mut values = Vec::with_capacity(self.output_dim());
        let mut layout = Vec::with_capacity(self.output_dim());
        for i in 0..fv.len() {
            if self.keep_mask.as_ref().is_some_and(|k| !k[i]) {
                continue;
            }
            let mut v = (fv.values[i] - self.mean[i]) / self.std[i];
            if let Some(w) = &self.weights {
                v *= w[i];
            }
            values.push(v);
            layout.push(fv.layout[i]);
        }
        FeatureVector::new(values, layout, true)
    }
}

/// Sum that does not depend on the order of `values`.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut buf = values.to_vec();
    let mean = ordered_sum(&mut buf) / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, ordered_sum(&mut sq) / n)
}

/// Fits standardization statistics plus optional Fisher weighting and
/// point-biserial ranking. Labels are 0 (clean) / 1 (adversarial).
pub fn fit_enhancement(
    train: &[FeatureVector],
    labels: &[u8],
    config: &EnhancementConfig,
) -> Result<EnhancementState> {
    if train.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            train.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Range("detector labels must be 0 or 1".into()));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Degenerate(
            "enhancement needs both clean and adversarial examples".into(),
        ));
    }
    if !(config.keep_fraction > 0.0 && config.keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction {} outside (0, 1]",
            config.keep_fraction
        )));
    }
    let layout = train[0].layout();
    if train.iter().any(|f| f.layout() != layout) {
        return Err(Error::Shape("training features use different layouts".into()));
    }
    let dim = layout.len();
    let total = labels.len() as f64;

    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    let mut fisher = vec![0.0; dim];
    let mut relevance = vec![0.0; dim];
    let mut degenerate = vec![false; dim];
    for j in 0..dim {
        let col: Vec<f64> = train.iter().map(|f| f.values[j]).collect();
        let (c0, c1): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::with_capacity(n0);
            let mut b = Vec::with_capacity(n1);
            for (v, &l) in col.iter().zip(labels) {
                if l == 1 { b.push(*v) } else { a.push(*v) }
            }
            (a, b)
        };
        let (mu, var) = mean_var(&col);
        let (mu0, var0) = mean_var(&c0);
        let (mu1, var1) = mean_var(&c1);
        mean[j] = mu;
        std[j] = var.sqrt();
        if !(std[j] > 0.0) || !std[j].is_finite() {
            degenerate[j] = true;
            continue;
        }
        let pooled = ((n0 as f64 * var0 + n1 as f64 * var1) / total).sqrt();
        fisher[j] = (mu1 - mu0).abs() / (pooled + FISHER_EPSILON);
        relevance[j] = ((mu1 - mu0) / std[j] * ((n0 * n1) as f64).sqrt() / total).abs();
    }
    if degenerate.iter().all(|d| *d) {
        return Err(Error::Degenerate("every feature column is constant".into()));
    }
    for j in 0..dim {
        if degenerate[j] {
            std[j] = 0.0;
        }
    }

    let live: Vec<usize> = (0..dim).filter(|&j| !degenerate[j]).collect();
    let keep_count = ((config.keep_fraction * live.len() as f64).ceil() as usize).clamp(1, live.len());
    let mut ranked = live.clone();
    // stable: ties keep the lower index
    ranked.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]));
    let mut keep_mask = vec![false; dim];
    for &j in &ranked[..keep_count] {
        keep_mask[j] = true;
    }

    let weights = config.weighting.then(|| {
        let mut live_w: Vec<f64> = live.iter().map(|&j| fisher[j]).collect();
        let avg = ordered_sum(&mut live_w) / live.len() as f64;
        (0..dim)
            .map(|j| {
                if degenerate[j] {
                    0.0
                } else if avg > 0.0 {
                    fisher[j] / avg
                } else {
                    1.0
                }
            })
            .collect()
    });

    let state = EnhancementState {
        weights,
        keep_mask: Some(keep_mask),
        mean,
        std,
    };
    state.validate()?;
    Ok(state)
}

/// Bases for every retained configuration of a plan at one image size.
#[derive(Clone, Debug)]
pub struct PlanBasis {
    plan: SelectionPlan,
    bases: Vec<ConfigBasis>,
    width: usize,
    height: usize,
}

impl PlanBasis {
    pub fn new(plan: &SelectionPlan, width: usize, height: usize) -> Result<Self> {
        let mask = plan.order_mask();
        if mask.max_n() >= width || mask.max_m() >= height {
            return Err(Error::Order(format!(
                "plan orders reach ({}, {}) on a {width}x{height} image",
                mask.max_n(),
                mask.max_m()
            )));
        }
        let bases = plan
            .retained_configs()
            .iter()
            .map(|&c| ConfigBasis::new(c, width, height, mask.max_n(), mask.max_m()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan: plan.clone(),
            bases,
            width,
            height,
        })
    }

    pub fn plan(&self) -> &SelectionPlan {
        &self.plan
    }

    pub fn bases(&self) -> &[ConfigBasis] {
        &self.bases
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Coefficients at the plan's orders for every retained configuration.
    pub fn decompose(&self, image: &Image) -> Result<CoefficientSet> {
        let mask = self.plan.order_mask();
        let blocks = self
            .bases
            .iter()
            .map(|b| b.decompose(image, mask))
            .collect::<Result<Vec<_>>>()?;
        CoefficientSet::new(self.width, self.height, blocks)
    }
}

/// Plan, bases and partition bundled for repeated extraction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    basis: PlanBasis,
    partition: BandPartition,
    mode: IntegrationMode,
}

impl FeatureExtractor {
    pub fn new(plan: &SelectionPlan, partition: BandPartition, mode: IntegrationMode) -> Result<Self> {
        let basis = PlanBasis::new(plan, partition.width, partition.height)?;
        Ok(Self {
            basis,
            partition,
            mode,
        })
    }

    pub fn basis(&self) -> &PlanBasis {
        &self.basis
    }

    pub fn partition(&self) -> &BandPartition {
        &self.partition
    }

    pub fn mode(&self) -> IntegrationMode {
        self.mode
    }

    /// Band-integrated features before enhancement.
    pub fn raw(&self, image: &Image) -> Result<FeatureVector> {
        if image.width() != self.partition.width || image.height() != self.partition.height {
            return Err(Error::Shape(format!(
                "image is {}x{}, partition expects {}x{}",
                image.width(),
                image.height(),
                self.partition.width,
                self.partition.height
            )));
        }
        integrate_bands(&self.basis.decompose(image)?, &self.partition, self.mode)
    }

    pub fn extract(&self, image: &Image, state: Option<&EnhancementState>) -> Result<FeatureVector> {
        let fv = self.raw(image)?;
        match state {
            Some(s) => s.apply(&fv),
            None => Ok(fv),
        }
    }

    /// Parallel extraction; output order follows `images`.
    pub fn extract_batch(
        &self,
        images: &[&Image],
        state: Option<&EnhancementState>,
    ) -> Result<Vec<FeatureVector>> {
        images
            .par_iter()
            .map(|img| self.extract(img, state))
            .collect()
    }
}

/// One-shot extraction: decompose under every retained configuration,
/// integrate bands, then apply `state` when given.
pub fn extract_feature_vector(
    image: &Image,
    plan: &SelectionPlan,
    partition: &BandPartition,
    state: Option<&EnhancementState>,
    mode: IntegrationMode,
) -> Result<FeatureVector> {
    FeatureExtractor::new(plan, partition.clone(), mode)?.extract(image, state)
}
