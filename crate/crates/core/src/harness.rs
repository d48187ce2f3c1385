//! Experiment protocols: paired clean/adversarial pools, detector training,
//! evaluation, and CSV/JSON reports.
//!
//! Every random choice is seeded and every parallel stage collects in input
//! order, so a report depends on the configuration alone and never on the
//! worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack, fooling_rate, perturb_harmless, random_sign_noise, train_surrogate, HarmlessKind,
    PerturbationSpec, SurrogateConfig, SurrogateModel,
};
use crate::error::{Error, Result};
use crate::features::{
    fit_enhancement, partition_bands, EnhancementConfig, FeatureExtractor, IntegrationMode,
    DEFAULT_NUM_BANDS,
};
use crate::image::{load_idx_pair, Dataset, Image};
use crate::keyed::{
    sample_plan, CandidateGrid, DetectorKey, KeyStream, DEFAULT_BLOCKING_PROB,
    DEFAULT_MIN_RETAINED_CONFIGS, DEFAULT_SPATIAL_VALUES,
};
use crate::model::{Detector, DetectorModel};
use crate::svm::{predict, train_svm, TrainConfig};
use crate::synth::synthetic_digits;

pub const REPORT_NOTES: &str =
    "metrics with a zero denominator are reported as 0; label 1 = adversarial";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Benchmark,
    CrossingAttack,
    CrossingSurrogate,
    Challenging,
    Harmless,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Benchmark => "benchmark",
            Self::CrossingAttack => "crossing_attack",
            Self::CrossingSurrogate => "crossing_surrogate",
            Self::Challenging => "challenging",
            Self::Harmless => "harmless",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown protocol {s:?}")))
    }
}

/// Where the clean images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic { count: usize, seed: u64 },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            count: 2000,
            seed: 0x5EED,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Idx { images, labels } => load_idx_pair(images, labels),
            Self::Synthetic { count, seed } => synthetic_digits(*count, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub name: String,
    pub spec: PerturbationSpec,
}

impl AttackEntry {
    pub fn new(name: impl Into<String>, spec: PerturbationSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmlessEntry {
    pub kind: HarmlessKind,
    pub magnitude: f64,
}

pub fn default_harmless() -> Vec<HarmlessEntry> {
    vec![
        HarmlessEntry {
            kind: HarmlessKind::Gaussian,
            magnitude: 0.05,
        },
        HarmlessEntry {
            kind: HarmlessKind::SaltPepper,
            magnitude: 0.02,
        },
        HarmlessEntry {
            kind: HarmlessKind::Resample,
            magnitude: 2.0,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Spatial parameter values; the grid is their square product.
    pub values: Vec<f64>,
    pub blocking_prob: f64,
    pub min_retained_configs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            values: DEFAULT_SPATIAL_VALUES.to_vec(),
            blocking_prob: DEFAULT_BLOCKING_PROB,
            min_retained_configs: DEFAULT_MIN_RETAINED_CONFIGS,
        }
    }
}

impl GridConfig {
    pub fn build(&self, width: usize, height: usize) -> Result<CandidateGrid> {
        CandidateGrid::square(
            &self.values,
            width,
            height,
            self.blocking_prob,
            self.min_retained_configs,
        )
    }
}

fn default_enhancement() -> Option<EnhancementConfig> {
    Some(EnhancementConfig::default())
}

/// Everything needed to train a detector besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Secret key seed; never serialized, so echoed configs cannot leak it.
    #[serde(skip)]
    pub key_seed: u64,
    pub grid: GridConfig,
    pub num_bands: usize,
    pub mode: IntegrationMode,
    #[serde(default = "default_enhancement")]
    pub enhancement: Option<EnhancementConfig>,
    pub svm: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            key_seed: 1,
            grid: GridConfig::default(),
            num_bands: DEFAULT_NUM_BANDS,
            mode: IntegrationMode::default(),
            enhancement: default_enhancement(),
            svm: TrainConfig::default(),
        }
    }
}

fn default_surrogate() -> SurrogateConfig {
    SurrogateConfig {
        init_scale: 0.01,
        ..SurrogateConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub data: DataSource,
    pub attacks: Vec<AttackEntry>,
    pub harmless: Vec<HarmlessEntry>,
    pub split_fraction: f64,
    /// Caps the number of clean source images used (all when absent).
    pub max_examples: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_surrogate")]
    pub surrogate: SurrogateConfig,
    /// Surrogate seeds; the first drives every protocol, the second is the
    /// held-out victim of `crossing_surrogate`.
    pub surrogate_seeds: [u64; 2],
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Benchmark,
            data: DataSource::default(),
            attacks: vec![AttackEntry::new("fgsm", PerturbationSpec::fgsm(0.2))],
            harmless: default_harmless(),
            split_fraction: 0.5,
            max_examples: None,
            seed: 0,
            surrogate: default_surrogate(),
            surrogate_seeds: [11, 22],
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("attack list is empty".into()));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attacks {
            a.spec.validate()?;
            if !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate attack name {:?}", a.name)));
            }
        }
        if self.protocol == Protocol::Harmless && self.harmless.is_empty() {
            return Err(Error::Config("harmless protocol needs harmless entries".into()));
        }
        if self.protocol == Protocol::CrossingSurrogate
            && self.surrogate_seeds[0] == self.surrogate_seeds[1]
        {
            return Err(Error::Config("crossing_surrogate needs two distinct seeds".into()));
        }
        if self.detector.num_bands == 0 {
            return Err(Error::Config("num_bands must be at least 1".into()));
        }
        self.detector.svm.validate()
    }
}

/// Binary confusion counts; positive = adversarial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: u8, predicted: u8) {
        match (truth, predicted) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (0, _) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::Degenerate("no evaluated examples".into()));
    }
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        recall,
        precision,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub protocol: Protocol,
    pub train_attack: String,
    pub test_attack: String,
    pub counts: ConfusionCounts,
    pub seed: u64,
    pub model_fingerprint: String,
}

impl ReportRow {
    pub fn metrics(&self) -> Metrics {
        compute_metrics(&self.counts).unwrap_or(Metrics {
            recall: 0.0,
            precision: 0.0,
            f1: 0.0,
            accuracy: 0.0,
        })
    }

    pub fn n_test(&self) -> u64 {
        self.counts.total()
    }
}

/// Fooling rates of one attack and of matched random sign noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackStat {
    pub attack: String,
    pub surrogate_fingerprint: String,
    pub fooling_rate: f64,
    pub noise_fooling_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub attack_stats: Vec<AttackStat>,
    pub key_fingerprint: String,
    /// Effective configuration, echoed verbatim.
    pub config: serde_json::Value,
    /// Left empty by default so reports are reproducible byte for byte.
    pub created_at: Option<String>,
}

impl Report {
    pub fn row(&self, train_attack: &str, test_attack: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.train_attack == train_attack && r.test_attack == test_attack)
    }
}

/// A report plus the detectors behind its rows, keyed by training label.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: Report,
    pub models: BTreeMap<String, DetectorModel>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn hex64(v: u64) -> String {
    format!("{v:016x}")
}

/// Seeded split of `0..n` into sorted train and test index lists.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Data(format!(
            "{n} examples cannot be split {fraction} / {}",
            1.0 - fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    KeyStream::new(seed).shuffle(&mut order);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// `x + δ` for every example; example `i` attacks with seed `spec.seed ⊕ i`.
pub fn adversarial_images(
    model: &SurrogateModel,
    data: &Dataset,
    spec: &PerturbationSpec,
) -> Result<Vec<Image>> {
    data.examples()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let delta = attack(model, &e.image, e.label, &spec.for_index(i))?;
            Ok(e.image.add(&delta))
        })
        .collect()
}

fn harmless_seed(seed: u64, kind: usize, index: usize) -> u64 {
    seed ^ ((kind as u64 + 1) << 48) ^ index as u64
}

/// Harmless variant of every example under `entry`.
pub fn harmless_images(data: &Dataset, entry: &HarmlessEntry, kind_index: usize, seed: u64) -> Result<Vec<Image>> {
    data.examples()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            perturb_harmless(&e.image, entry.kind, entry.magnitude, harmless_seed(seed, kind_index, i))
        })
        .collect()
}

/// Fits the full pipeline: keyed plan, band features, enhancement, SVM.
pub fn train_detector(config: &DetectorConfig, images: &[&Image], labels: &[u8]) -> Result<DetectorModel> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("no training images".into()))?;
    let (w, h) = (first.width(), first.height());
    let grid = config.grid.build(w, h)?;
    let plan = sample_plan(DetectorKey::new(config.key_seed), &grid)?;
    let partition = partition_bands(w, h, config.num_bands)?;
    let extractor = FeatureExtractor::new(&plan, partition.clone(), config.mode)?;
    let raw = extractor.extract_batch(images, None)?;
    let (enhancement, features) = match &config.enhancement {
        Some(cfg) => {
            let state = fit_enhancement(&raw, labels, cfg)?;
            let f = raw.iter().map(|v| state.apply(v)).collect::<Result<Vec<_>>>()?;
            (Some(state), f)
        }
        None => (None, raw),
    };
    let svm = train_svm(&features, labels, &config.svm)?;
    let model = DetectorModel {
        plan,
        partition,
        mode: config.mode,
        enhancement,
        svm,
    };
    model.validate()?;
    Ok(model)
}

/// Predicted labels in input order.
pub fn detect_batch(detector: &Detector, images: &[&Image]) -> Result<Vec<u8>> {
    let features = detector
        .extractor()
        .extract_batch(images, detector.model().enhancement.as_ref())?;
    features
        .iter()
        .map(|f| predict(&detector.model().svm, f).map(|(l, _)| l))
        .collect()
}

pub fn evaluate_detector(detector: &Detector, images: &[&Image], labels: &[u8]) -> Result<ConfusionCounts> {
    let predicted = detect_batch(detector, images)?;
    let mut c = ConfusionCounts::default();
    for (&t, p) in labels.iter().zip(predicted) {
        c.record(t, p);
    }
    Ok(c)
}

/// Fraction of adversarial images the detector labels clean.
pub fn evasion_rate(detector: &Detector, adversarial: &[&Image]) -> Result<f64> {
    if adversarial.is_empty() {
        return Err(Error::Data("no adversarial images".into()));
    }
    let predicted = detect_batch(detector, adversarial)?;
    Ok(predicted.iter().filter(|&&l| l == 0).count() as f64 / adversarial.len() as f64)
}

/// Labeled pool; images borrowed from clean, adversarial or harmless sets.
struct Pool<'a> {
    images: Vec<&'a Image>,
    labels: Vec<u8>,
}

impl<'a> Pool<'a> {
    fn new() -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push(&mut self, image: &'a Image, label: u8) {
        self.images.push(image);
        self.labels.push(label);
    }
}

struct Context {
    config: ExperimentConfig,
    data: Dataset,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Context {
    fn clean(&self, i: usize) -> &Image {
        &self.data.examples()[i].image
    }

    fn paired_pool<'a>(&'a self, indices: &[usize], adv: &'a [Image]) -> Pool<'a> {
        let mut pool = Pool::new();
        for &i in indices {
            pool.push(self.clean(i), 0);
            pool.push(&adv[i], 1);
        }
        pool
    }

    fn surrogate(&self, seed: u64) -> Result<SurrogateModel> {
        let cfg = SurrogateConfig {
            seed,
            ..self.config.surrogate
        };
        Ok(train_surrogate(&self.data, &cfg)?.model)
    }

    fn attack_stat(&self, name: &str, model: &SurrogateModel, adv: &[Image]) -> AttackStat {
        let sources: Vec<&Image> = self.test.iter().map(|&i| self.clean(i)).collect();
        let deltas: Vec<Image> = self.test.iter().map(|&i| adv[i].sub(self.clean(i))).collect();
        let eps = self
            .config
            .attacks
            .iter()
            .find(|a| a.name == name)
            .map_or(0.0, |a| a.spec.epsilon);
        let noise: Vec<Image> = self
            .test
            .iter()
            .map(|&i| random_sign_noise(self.clean(i), eps, self.config.seed ^ i as u64))
            .collect();
        AttackStat {
            attack: name.to_owned(),
            surrogate_fingerprint: hex64(model.fingerprint()),
            fooling_rate: round4(fooling_rate(model, &sources, &deltas)),
            noise_fooling_rate: round4(fooling_rate(model, &sources, &noise)),
        }
    }

    fn row(&self, train: &str, test: &str, model: &DetectorModel, counts: ConfusionCounts) -> Result<ReportRow> {
        Ok(ReportRow {
            protocol: self.config.protocol,
            train_attack: train.to_owned(),
            test_attack: test.to_owned(),
            counts,
            seed: self.config.seed,
            model_fingerprint: hex64(model.fingerprint()?),
        })
    }
}

/// Loads the configured data and runs the protocol on `workers` threads.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = config.data.load()?;
    run_experiment_on(config, data, workers)
}

/// Runs the protocol on an already loaded clean dataset.
pub fn run_experiment_on(config: &ExperimentConfig, data: Dataset, workers: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(config, data))
}

fn run_inner(config: &ExperimentConfig, data: Dataset) -> Result<ExperimentOutcome> {
    let data = match config.max_examples {
        Some(cap) if cap < data.len() => Dataset::new(
            data.name().to_owned(),
            data.num_classes(),
            data.examples()[..cap].to_vec(),
        )?,
        _ => data,
    };
    if data.len() < 2 {
        return Err(Error::Data(format!("{} examples cannot be split", data.len())));
    }
    let (train, test) = split_indices(data.len(), config.split_fraction, config.seed)?;
    let ctx = Context {
        config: config.clone(),
        data,
        train,
        test,
    };
    let mut models = BTreeMap::new();
    let mut rows = Vec::new();
    let mut stats = Vec::new();

    let s1 = ctx.surrogate(config.surrogate_seeds[0])?;
    let adv: Vec<Vec<Image>> = config
        .attacks
        .iter()
        .map(|a| adversarial_images(&s1, &ctx.data, &a.spec))
        .collect::<Result<_>>()?;
    for (a, imgs) in config.attacks.iter().zip(&adv) {
        stats.push(ctx.attack_stat(&a.name, &s1, imgs));
    }

    match config.protocol {
        Protocol::Benchmark => {
            for (a, imgs) in config.attacks.iter().zip(&adv) {
                let tr = ctx.paired_pool(&ctx.train, imgs);
                let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
                let det = Detector::new(model.clone())?;
                let te = ctx.paired_pool(&ctx.test, imgs);
                let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                rows.push(ctx.row(&a.name, &a.name, &model, counts)?);
                models.insert(a.name.clone(), model);
            }
        }
        Protocol::CrossingAttack => {
            for (a, train_imgs) in config.attacks.iter().zip(&adv) {
                let tr = ctx.paired_pool(&ctx.train, train_imgs);
                let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
                let det = Detector::new(model.clone())?;
                for (b, test_imgs) in config.attacks.iter().zip(&adv) {
                    let te = ctx.paired_pool(&ctx.test, test_imgs);
                    let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                    rows.push(ctx.row(&a.name, &b.name, &model, counts)?);
                }
                models.insert(a.name.clone(), model);
            }
        }
        Protocol::CrossingSurrogate => {
            let [seed1, seed2] = config.surrogate_seeds;
            let s2 = ctx.surrogate(seed2)?;
            for (a, imgs1) in config.attacks.iter().zip(&adv) {
                let imgs2 = adversarial_images(&s2, &ctx.data, &a.spec)?;
                let tag1 = format!("{}@{seed1}", a.name);
                let tag2 = format!("{}@{seed2}", a.name);
                stats.push(ctx.attack_stat(&a.name, &s2, &imgs2));
                let tr = ctx.paired_pool(&ctx.train, imgs1);
                let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
                let det = Detector::new(model.clone())?;
                for (tag, imgs) in [(&tag1, imgs1), (&tag2, &imgs2)] {
                    let te = ctx.paired_pool(&ctx.test, imgs);
                    let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                    rows.push(ctx.row(&tag1, tag, &model, counts)?);
                }
                models.insert(tag1, model);
            }
        }
        Protocol::Challenging => {
            let parts = config.attacks.len();
            let n = ctx.train.len();
            if n < parts {
                return Err(Error::Data(format!(
                    "{n} training images cannot be divided among {parts} attacks"
                )));
            }
            let mut tr = Pool::new();
            for (j, &i) in ctx.train.iter().enumerate() {
                // contiguous equal parts, one per attack
                let part = j * parts / n;
                tr.push(ctx.clean(i), 0);
                tr.push(&adv[part][i], 1);
            }
            let label = config
                .attacks
                .iter()
                .map(|a| a.name.as_str())
                .collect::<Vec<_>>()
                .join("+");
            let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
            let det = Detector::new(model.clone())?;
            for (b, imgs) in config.attacks.iter().zip(&adv) {
                let te = ctx.paired_pool(&ctx.test, imgs);
                let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                rows.push(ctx.row(&label, &b.name, &model, counts)?);
            }
            models.insert(label, model);
        }
        Protocol::Harmless => {
            for (a, imgs) in config.attacks.iter().zip(&adv) {
                // baseline detector without harmless examples
                let tr = ctx.paired_pool(&ctx.train, imgs);
                let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
                let det = Detector::new(model.clone())?;
                let te = ctx.paired_pool(&ctx.test, imgs);
                let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                rows.push(ctx.row(&a.name, &a.name, &model, counts)?);
                models.insert(a.name.clone(), model);

                for (k, entry) in config.harmless.iter().enumerate() {
                    let harmless = harmless_images(&ctx.data, entry, k, config.seed)?;
                    let mut tr = ctx.paired_pool(&ctx.train, imgs);
                    for &i in &ctx.train {
                        tr.push(&harmless[i], 0);
                    }
                    let tag = format!("{}+{}", a.name, entry.kind.name());
                    let model = train_detector(&config.detector, &tr.images, &tr.labels)?;
                    let det = Detector::new(model.clone())?;
                    let mut te = Pool::new();
                    for &i in &ctx.test {
                        te.push(&harmless[i], 0);
                        te.push(&imgs[i], 1);
                    }
                    let counts = evaluate_detector(&det, &te.images, &te.labels)?;
                    rows.push(ctx.row(&tag, &format!("{}/{}", a.name, entry.kind.name()), &model, counts)?);
                    models.insert(tag, model);
                }
            }
        }
    }

    let config_echo =
        serde_json::to_value(config).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    Ok(ExperimentOutcome {
        report: Report {
            rows,
            attack_stats: stats,
            key_fingerprint: hex64(DetectorKey::new(config.detector.key_seed).fingerprint()),
            config: config_echo,
            created_at: None,
        },
        models,
    })
}

pub const CSV_HEADER: [&str; 10] = [
    "protocol",
    "train_attack",
    "test_attack",
    "recall",
    "precision",
    "f1",
    "accuracy",
    "n_test",
    "seed",
    "model_fingerprint",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn report_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in &report.rows {
        let m = r.metrics();
        w.write_record([
            r.protocol.name().to_owned(),
            r.train_attack.clone(),
            r.test_attack.clone(),
            format!("{:.4}", m.recall),
            format!("{:.4}", m.precision),
            format!("{:.4}", m.f1),
            format!("{:.4}", m.accuracy),
            r.n_test().to_string(),
            r.seed.to_string(),
            r.model_fingerprint.clone(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowDoc {
    protocol: Protocol,
    train_attack: String,
    test_attack: String,
    tp: u64,
    fp: u64,
    tn: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    recall: f64,
    precision: f64,
    f1: f64,
    accuracy: f64,
    n_test: u64,
    seed: u64,
    model_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDoc {
    rows: Vec<RowDoc>,
    attack_stats: Vec<AttackStat>,
    key_fingerprint: String,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
    notes: String,
}

pub fn report_json(report: &Report) -> Result<String> {
    let doc = ReportDoc {
        rows: report
            .rows
            .iter()
            .map(|r| {
                let m = r.metrics();
                RowDoc {
                    protocol: r.protocol,
                    train_attack: r.train_attack.clone(),
                    test_attack: r.test_attack.clone(),
                    tp: r.counts.tp,
                    fp: r.counts.fp,
                    tn: r.counts.tn,
                    fn_: r.counts.fn_,
                    recall: round4(m.recall),
                    precision: round4(m.precision),
                    f1: round4(m.f1),
                    accuracy: round4(m.accuracy),
                    n_test: r.n_test(),
                    seed: r.seed,
                    model_fingerprint: r.model_fingerprint.clone(),
                }
            })
            .collect(),
        attack_stats: report.attack_stats.clone(),
        key_fingerprint: report.key_fingerprint.clone(),
        config: report.config.clone(),
        created_at: report.created_at.clone(),
        notes: REPORT_NOTES.to_owned(),
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses a report written by [`report_json`]. Metrics are re-derived from
/// the stored counts.
pub fn parse_report_json(text: &str) -> Result<Report> {
    let doc: ReportDoc =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report json: {e}")))?;
    Ok(Report {
        rows: doc
            .rows
            .into_iter()
            .map(|r| ReportRow {
                protocol: r.protocol,
                train_attack: r.train_attack,
                test_attack: r.test_attack,
                counts: ConfusionCounts {
                    tp: r.tp,
                    fp: r.fp,
                    tn: r.tn,
                    fn_: r.fn_,
                },
                seed: r.seed,
                model_fingerprint: r.model_fingerprint,
            })
            .collect(),
        attack_stats: doc.attack_stats,
        key_fingerprint: doc.key_fingerprint,
        config: doc.config,
        created_at: doc.created_at,
    })
}

pub fn emit_report(report: &Report, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Json => report_json(report)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
