//! Desk-scale perturbation sources: a multinomial logistic surrogate victim,
//! sign-gradient attacks (FGSM, BIM, PGD), a defense-aware PGD variant that
//! penalizes perturbation energy on a chosen coefficient subset, and
//! harmless corruptions (noise, impulses, resampling).

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Dataset, Image};
use crate::keyed::{KeyStream, SelectionPlan};
use crate::krawtchouk::{ConfigBasis, OrderMask, SpatialConfig};

/// Rows per chunk in batched gradient sums; fixed so results do not depend
/// on the thread count.
const GRAD_CHUNK: usize = 64;

/// Linear softmax classifier `softmax(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    weights: Vec<f64>,
    biases: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Standard deviation of the seeded weight initialization; 0 starts
    /// from uniform logits.
    pub init_scale: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.5,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

impl SurrogateModel {
    pub fn new(num_classes: usize, dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("surrogate needs at least 2 classes".into()));
        }
        if weights.len() != num_classes * dim || biases.len() != num_classes {
            return Err(Error::Shape("surrogate parameter sizes".into()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite surrogate parameter".into()));
        }
        Ok(Self {
            weights,
            biases,
            num_classes,
            dim,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self::new(num_classes, dim, vec![0.0; num_classes * dim], vec![0.0; num_classes])
            .expect("valid shape")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[k]
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Arg-max class; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }

    pub fn cross_entropy(&self, x: &[f64], label: usize) -> f64 {
        let l = self.logits(x);
        log_sum_exp(&l) - l[label]
    }

    /// `∂ CE / ∂ x = Wᵀ (p − e_y)`.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Vec<f64> {
        let mut r = self.probabilities(x);
        r[label] -= 1.0;
        let mut g = vec![0.0; self.dim];
        for (k, rk) in r.iter().enumerate() {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            for (gi, w) in g.iter_mut().zip(row) {
                *gi += rk * w;
            }
        }
        g
    }

    /// Parameter gradient of the cross entropy at one example, as
    /// `(∂W, ∂b)` with `∂W` row-major by class.
    pub fn parameter_gradient(&self, x: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
        let mut r = self.probabilities(x);
        r[label] -= 1.0;
        let mut gw = vec![0.0; self.weights.len()];
        for (k, rk) in r.iter().enumerate() {
            for (g, v) in gw[k * self.dim..(k + 1) * self.dim].iter_mut().zip(x) {
                *g = rk * v;
            }
        }
        (gw, r)
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .examples()
            .iter()
            .filter(|e| self.predict(e.image.pixels()) == e.label)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Digest of the parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_be_bytes());
        h.update((self.dim as u64).to_be_bytes());
        for v in self.weights.iter().chain(&self.biases) {
            h.update(v.to_bits().to_be_bytes());
        }
        let d = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&d[..8]);
        u64::from_be_bytes(head)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Outcome of surrogate training.
#[derive(Clone, Debug)]
pub struct TrainedSurrogate {
    pub model: SurrogateModel,
    pub train_accuracy: f64,
}

/// Full-batch gradient descent on the mean cross entropy.
pub fn train_surrogate(dataset: &Dataset, config: &SurrogateConfig) -> Result<TrainedSurrogate> {
    let labels = dataset.labels();
    let distinct = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Degenerate("surrogate training needs at least 2 classes".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let (w, h) = dataset.image_size().expect("non-empty");
    let dim = w * h;
    let classes = dataset.num_classes();
    let mut model = SurrogateModel::zeros(classes, dim);
    if config.init_scale > 0.0 {
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| Error::Config(format!("init scale: {e}")))?;
        let mut rng = KeyStream::new(config.seed);
        for v in model.weights.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let n = dataset.len() as f64;
    let examples = dataset.examples();
    for _ in 0..config.epochs {
        let partials: Vec<(Vec<f64>, Vec<f64>)> = examples
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut gw = vec![0.0; classes * dim];
                let mut gb = vec![0.0; classes];
                for e in chunk {
                    let x = e.image.pixels();
                    let mut r = model.probabilities(x);
                    r[e.label] -= 1.0;
                    for (k, rk) in r.iter().enumerate() {
                        gb[k] += rk;
                        for (g, v) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                            *g += rk * v;
                        }
                    }
                }
                (gw, gb)
            })
            .collect();
        let step = config.learning_rate / n;
        for (gw, gb) in partials {
            for (p, g) in model.weights.iter_mut().zip(gw) {
                *p -= step * g;
            }
            for (p, g) in model.biases.iter_mut().zip(gb) {
                *p -= step * g;
            }
        }
    }
    if model.weights.iter().chain(&model.biases).any(|v| !v.is_finite()) {
        return Err(Error::Stability("surrogate training diverged".into()));
    }
    let train_accuracy = model.accuracy(dataset);
    Ok(TrainedSurrogate {
        model,
        train_accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "bim" => Ok(Self::Bim),
            "pgd" => Ok(Self::Pgd),
            other => Err(Error::Config(format!("unknown attack {other:?}"))),
        }
    }
}

/// ℓ∞-bounded sign-gradient attack parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub attack_kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub alpha: f64,
    pub rand_init: bool,
    pub seed: u64,
    /// Round `x + δ` to the 8-bit grid (kept inside the budget).
    #[serde(default)]
    pub quantize: bool,
}

impl PerturbationSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            attack_kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            alpha: epsilon,
            rand_init: false,
            seed: 0,
            quantize: false,
        }
    }

    pub fn bim(epsilon: f64, steps: usize) -> Self {
        Self {
            attack_kind: AttackKind::Bim,
            epsilon,
            steps,
            alpha: epsilon / steps.max(1) as f64 * 2.5,
            rand_init: false,
            seed: 0,
            quantize: false,
        }
        .clamp_alpha()
    }

    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        Self {
            attack_kind: AttackKind::Pgd,
            epsilon,
            steps,
            alpha: epsilon / 4.0,
            rand_init: true,
            seed,
            quantize: false,
        }
    }

    fn clamp_alpha(mut self) -> Self {
        self.alpha = self.alpha.min(self.epsilon);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Range(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Config(format!(
                "alpha {} must lie in [0, epsilon = {}]",
                self.alpha, self.epsilon
            )));
        }
        match self.attack_kind {
            AttackKind::Fgsm if self.steps != 1 => {
                Err(Error::Config("fgsm takes exactly one step".into()))
            }
            AttackKind::Bim if self.rand_init => {
                Err(Error::Config("bim starts from the clean image".into()))
            }
            AttackKind::Pgd if !self.rand_init => {
                Err(Error::Config("pgd starts from a random point".into()))
            }
            _ => Ok(()),
        }
    }

    /// Same spec with the seed mixed with an example index.
    pub fn for_index(&self, index: usize) -> Self {
        Self {
            seed: self.seed ^ index as u64,
            ..*self
        }
    }
}

fn check_label(model: &SurrogateModel, image: &Image, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::Range(format!(
            "label {label} with {} classes",
            model.num_classes()
        )));
    }
    if image.pixels().len() != model.dim() {
        return Err(Error::Shape(format!(
            "image has {} pixels, surrogate expects {}",
            image.pixels().len(),
            model.dim()
        )));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `delta` onto the ε-ball and the pixel box around `x`.
fn project(x: &[f64], delta: &mut [f64], eps: f64) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        *d = (xi + d.clamp(-eps, eps)).clamp(0.0, 1.0) - xi;
    }
}

fn quantize(x: &[f64], delta: &mut [f64], eps: f64) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let mut q = ((xi + *d) * 255.0).round() / 255.0;
        if q - xi > eps {
            q -= 1.0 / 255.0;
        } else if xi - q > eps {
            q += 1.0 / 255.0;
        }
        *d = q.clamp(0.0, 1.0) - xi;
    }
}

fn finish(image: &Image, mut delta: Vec<f64>, spec: &PerturbationSpec) -> Result<Image> {
    if spec.quantize {
        quantize(image.pixels(), &mut delta, spec.epsilon);
    }
    Image::new(image.width(), image.height(), delta)
}

/// One signed step of size ε: `δ = clip(x + ε·sign ∇CE) − x`.
pub fn attack_fgsm(
    model: &SurrogateModel,
    image: &Image,
    label: usize,
    spec: &PerturbationSpec,
) -> Result<Image> {
    check_label(model, image, label)?;
    if spec.attack_kind != AttackKind::Fgsm {
        return Err(Error::Config("attack_fgsm called with a non-fgsm spec".into()));
    }
    spec.validate()?;
    let x = image.pixels();
    let g = model.input_gradient(x, label);
    let delta = x
        .iter()
        .zip(&g)
        .map(|(&xi, &gi)| (xi + spec.epsilon * sign(gi)).clamp(0.0, 1.0) - xi)
        .collect();
    finish(image, delta, spec)
}

fn initial_delta(x: &[f64], spec: &PerturbationSpec) -> Vec<f64> {
    let mut delta = vec![0.0; x.len()];
    if spec.rand_init {
        let mut rng = KeyStream::new(spec.seed);
        for d in delta.iter_mut() {
            *d = (2.0 * rng.next_unit() - 1.0) * spec.epsilon;
        }
        project(x, &mut delta, spec.epsilon);
    }
    delta
}

/// Iterated sign steps with projection (BIM without, PGD with random start).
pub fn attack_pgd(
    model: &SurrogateModel,
    image: &Image,
    label: usize,
    spec: &PerturbationSpec,
) -> Result<Image> {
    pgd_trajectory(model, image, label, spec, |_| {}).map(|(d, _)| d)
}

/// PGD that also reports every iterate to `observe`.
pub fn pgd_trajectory(
    model: &SurrogateModel,
    image: &Image,
    label: usize,
    spec: &PerturbationSpec,
    mut observe: impl FnMut(&[f64]),
) -> Result<(Image, usize)> {
    check_label(model, image, label)?;
    if spec.attack_kind == AttackKind::Fgsm {
        return Err(Error::Config("attack_pgd needs a bim or pgd spec".into()));
    }
    spec.validate()?;
    let x = image.pixels();
    let mut delta = initial_delta(x, spec);
    let mut adv = vec![0.0; x.len()];
    for _ in 0..spec.steps {
        for ((a, xi), d) in adv.iter_mut().zip(x).zip(&delta) {
            *a = xi + d;
        }
        let g = model.input_gradient(&adv, label);
        for (d, gi) in delta.iter_mut().zip(&g) {
            *d += spec.alpha * sign(*gi);
        }
        project(x, &mut delta, spec.epsilon);
        observe(&delta);
    }
    Ok((finish(image, delta, spec)?, spec.steps))
}

/// Dispatches on `spec.attack_kind`.
pub fn attack(
    model: &SurrogateModel,
    image: &Image,
    label: usize,
    spec: &PerturbationSpec,
) -> Result<Image> {
    match spec.attack_kind {
        AttackKind::Fgsm => attack_fgsm(model, image, label, spec),
        AttackKind::Bim | AttackKind::Pgd => attack_pgd(model, image, label, spec),
    }
}

/// Random `±ε` sign noise, clipped to the pixel box; the reference point for
/// fooling-rate comparisons.
pub fn random_sign_noise(image: &Image, epsilon: f64, seed: u64) -> Image {
    let mut rng = KeyStream::new(seed);
    let delta = image
        .pixels()
        .iter()
        .map(|&x| {
            let s = if rng.next_value() >> 63 == 1 { 1.0 } else { -1.0 };
            (x + s * epsilon).clamp(0.0, 1.0) - x
        })
        .collect();
    Image::new(image.width(), image.height(), delta).expect("same shape")
}

/// Fraction of examples whose surrogate prediction changes under `deltas`.
pub fn fooling_rate(model: &SurrogateModel, images: &[&Image], deltas: &[Image]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let flips = images
        .iter()
        .zip(deltas)
        .filter(|(x, d)| model.predict(x.pixels()) != model.predict(x.add(d).pixels()))
        .count();
    flips as f64 / images.len() as f64
}

/// Coefficient identifiers `(n, m, config)` targeted by a defense-aware
/// adversary, grouped by spatial configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSubset {
    groups: Vec<(SpatialConfig, OrderMask)>,
}

impl FeatureSubset {
    pub fn new(groups: Vec<(SpatialConfig, OrderMask)>) -> Result<Self> {
        if groups.is_empty() || groups.iter().all(|(_, m)| m.is_empty()) {
            return Err(Error::Config("feature subset is empty".into()));
        }
        Ok(Self { groups })
    }

    /// Every coefficient a plan's detector looks at.
    pub fn from_plan(plan: &SelectionPlan) -> Self {
        Self {
            groups: plan
                .retained_configs()
                .iter()
                .map(|&c| (c, plan.order_mask().clone()))
                .collect(),
        }
    }

    pub fn groups(&self) -> &[(SpatialConfig, OrderMask)] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bases resolving a [`FeatureSubset`] at a fixed image size.
#[derive(Clone, Debug)]
pub struct SubsetBasis {
    groups: Vec<(ConfigBasis, OrderMask)>,
}

impl SubsetBasis {
    pub fn new(subset: &FeatureSubset, width: usize, height: usize) -> Result<Self> {
        let groups = subset
            .groups
            .iter()
            .map(|(c, mask)| {
                if mask.max_n() >= width || mask.max_m() >= height {
                    return Err(Error::Order(format!(
                        "subset orders reach ({}, {}) on a {width}x{height} image",
                        mask.max_n(),
                        mask.max_m()
                    )));
                }
                ConfigBasis::new(*c, width, height, mask.max_n(), mask.max_m())
                    .map(|b| (b, mask.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups })
    }

    /// `F_subset(δ)`, groups concatenated in order.
    pub fn coefficients(&self, delta: &Image) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (basis, mask) in &self.groups {
            out.extend(basis.decompose(delta, mask)?.values);
        }
        Ok(out)
    }

    pub fn energy(&self, delta: &Image) -> Result<f64> {
        Ok(self.coefficients(delta)?.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    /// `∇_δ ‖F_subset(δ)‖²  = 2 Σ_groups Fᵀ F δ`.
    fn energy_gradient(&self, delta: &Image) -> Result<Vec<f64>> {
        let mut g = vec![0.0; delta.pixels().len()];
        for (basis, mask) in &self.groups {
            let block = basis.decompose(delta, mask)?;
            let back = basis.synthesize(&block.orders, &block.values)?;
            for (gi, b) in g.iter_mut().zip(back.pixels()) {
                *gi += 2.0 * b;
            }
        }
        Ok(g)
    }
}

/// Defense-aware attack parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DefenseAwareSpec {
    pub base: PerturbationSpec,
    pub subset: FeatureSubset,
    /// Weight of the subset-energy penalty in the ascent objective.
    pub penalty_weight: f64,
    /// Energy threshold λ: success when `‖F_subset(δ)‖ < λ`.
    pub energy_threshold: f64,
    /// Correlation threshold η: success when `ρ(F(δ_old), F(δ_new)) < η`.
    pub correlation_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseAwareOutcome {
    pub delta: Image,
    pub subset_energy: f64,
    pub below_energy_threshold: bool,
}

/// PGD ascent on `CE(x + δ) − penalty · ‖F_subset(δ)‖²`.
///
/// With `penalty_weight == 0` the penalty is never evaluated, so the
/// trajectory is exactly that of [`attack_pgd`].
pub fn attack_defense_aware(
    model: &SurrogateModel,
    image: &Image,
    label: usize,
    spec: &DefenseAwareSpec,
    context: &SubsetBasis,
) -> Result<DefenseAwareOutcome> {
    check_label(model, image, label)?;
    if spec.subset.is_empty() {
        return Err(Error::Config("feature subset is empty".into()));
    }
    if !(spec.penalty_weight >= 0.0) {
        return Err(Error::Config("penalty weight must be non-negative".into()));
    }
    let base = &spec.base;
    if base.attack_kind == AttackKind::Fgsm {
        return Err(Error::Config("defense-aware attack iterates; use bim or pgd".into()));
    }
    base.validate()?;
    let x = image.pixels();
    let (w, h) = (image.width(), image.height());
    let mut delta = initial_delta(x, base);
    let mut adv = vec![0.0; x.len()];
    for _ in 0..base.steps {
        for ((a, xi), d) in adv.iter_mut().zip(x).zip(&delta) {
            *a = xi + d;
        }
        let mut g = model.input_gradient(&adv, label);
        if spec.penalty_weight > 0.0 {
            let pen = context.energy_gradient(&Image::new(w, h, delta.clone())?)?;
            for (gi, pi) in g.iter_mut().zip(pen) {
                *gi -= spec.penalty_weight * pi;
            }
        }
        for (d, gi) in delta.iter_mut().zip(&g) {
            *d += base.alpha * sign(*gi);
        }
        project(x, &mut delta, base.epsilon);
    }
    let delta = finish(image, delta, base)?;
    let subset_energy = context.energy(&delta)?;
    Ok(DefenseAwareOutcome {
        below_energy_threshold: subset_energy < spec.energy_threshold,
        subset_energy,
        delta,
    })
}

/// Correlation report comparing a plain and a defense-aware perturbation on
/// the subset coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationReport {
    pub rho: f64,
    pub below_threshold: bool,
}

pub fn correlation_report(
    context: &SubsetBasis,
    delta_old: &Image,
    delta_new: &Image,
    eta: f64,
) -> Result<CorrelationReport> {
    let rho = feature_correlation(
        &context.coefficients(delta_old)?,
        &context.coefficients(delta_new)?,
    )?;
    Ok(CorrelationReport {
        rho,
        below_threshold: rho < eta,
    })
}

/// Pearson correlation of two coefficient vectors.
pub fn feature_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "correlation of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmlessKind {
    Gaussian,
    SaltPepper,
    Resample,
}

impl HarmlessKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::SaltPepper => "salt_pepper",
            Self::Resample => "resample",
        }
    }
}

/// Noise-like corruption that should not be flagged. `magnitude` is σ for
/// Gaussian noise, the impulse probability for salt-and-pepper, and the
/// integer block factor for resampling.
pub fn perturb_harmless(image: &Image, kind: HarmlessKind, magnitude: f64, seed: u64) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let x = image.pixels();
    let mut rng = KeyStream::new(seed);
    let out: Vec<f64> = match kind {
        HarmlessKind::Gaussian => {
            if !(magnitude >= 0.0 && magnitude.is_finite()) {
                return Err(Error::Range(format!("sigma {magnitude} must be >= 0")));
            }
            if magnitude == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, magnitude).expect("valid sigma");
            x.iter()
                .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        }
        HarmlessKind::SaltPepper => {
            if !(0.0..=1.0).contains(&magnitude) {
                return Err(Error::Range(format!("probability {magnitude} outside [0, 1]")));
            }
            x.iter()
                .map(|&v| {
                    let u = rng.next_unit();
                    if u < magnitude / 2.0 {
                        0.0
                    } else if u < magnitude {
                        1.0
                    } else {
                        v
                    }
                })
                .collect()
        }
        HarmlessKind::Resample => {
            if !(magnitude >= 1.0 && magnitude.fract() == 0.0) {
                return Err(Error::Range(format!(
                    "resample factor {magnitude} must be an integer >= 1"
                )));
            }
            let f = magnitude as usize;
            if f == 1 {
                return Ok(image.clone());
            }
            let (bw, bh) = (w.div_ceil(f), h.div_ceil(f));
            let mut means = vec![0.0; bw * bh];
            for by in 0..bh {
                for bx in 0..bw {
                    let (mut s, mut c) = (0.0, 0usize);
                    for y in by * f..((by + 1) * f).min(h) {
                        for xx in bx * f..((bx + 1) * f).min(w) {
                            s += x[y * w + xx];
                            c += 1;
                        }
                    }
                    means[by * bw + bx] = s / c as f64;
                }
            }
            (0..w * h)
                .map(|i| means[(i / w / f) * bw + (i % w) / f].clamp(0.0, 1.0))
                .collect()
        }
    };
    Image::new(w, h, out)
}
