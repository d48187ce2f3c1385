//! On-disk configuration for the command-line tool. Every section is
//! optional; missing keys take the documented defaults and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use krawdetect::attacks::{AttackKind, PerturbationSpec, SurrogateConfig};
use krawdetect::features::{EnhancementConfig, IntegrationMode, DEFAULT_NUM_BANDS};
use krawdetect::harness::{
    AttackEntry, DataSource, DetectorConfig, ExperimentConfig, GridConfig, HarmlessEntry, Protocol,
};
use krawdetect::svm::TrainConfig;
use krawdetect::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub protocol: Protocol,
    pub split_fraction: f64,
    pub max_examples: Option<usize>,
    pub harmless: Vec<HarmlessEntry>,
    pub surrogate: SurrogateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub experiment: u64,
    pub surrogate: [u64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Any of "csv", "json".
    pub formats: Vec<String>,
    pub save_models: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("krawdetect-out"),
            formats: vec!["csv".into(), "json".into()],
            save_models: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub data: DataSource,
    pub grid: GridConfig,
    pub bands: usize,
    pub integration_mode: IntegrationMode,
    pub enhancement: Option<EnhancementConfig>,
    pub svm: TrainConfig,
    pub attacks: Vec<AttackEntry>,
    pub experiment: ExperimentSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            data: e.data,
            grid: e.detector.grid,
            bands: DEFAULT_NUM_BANDS,
            integration_mode: e.detector.mode,
            enhancement: e.detector.enhancement,
            svm: e.detector.svm,
            attacks: e.attacks,
            experiment: ExperimentSection {
                protocol: e.protocol,
                split_fraction: e.split_fraction,
                max_examples: e.max_examples,
                harmless: e.harmless,
                surrogate: e.surrogate,
            },
            seeds: SeedSection {
                experiment: e.seed,
                surrogate: e.surrogate_seeds,
            },
            output: OutputSection::default(),
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        CliConfig::default().experiment
    }
}

impl Default for SeedSection {
    fn default() -> Self {
        CliConfig::default().seeds
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub attack: Option<AttackKind>,
    pub mode: Option<IntegrationMode>,
    pub bands: Option<usize>,
    pub blocking_prob: Option<f64>,
    pub protocol: Option<Protocol>,
    pub out: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seeds.experiment = s;
        }
        if let Some(kind) = o.attack {
            let eps = o.epsilon.unwrap_or(0.2);
            let spec = default_spec(kind, eps, self.seeds.experiment);
            self.attacks = vec![AttackEntry::new(kind.name(), spec)];
        } else if let Some(eps) = o.epsilon {
            for a in &mut self.attacks {
                a.spec = rescale(&a.spec, eps);
            }
        }
        if let Some(m) = o.mode {
            self.integration_mode = m;
        }
        if let Some(b) = o.bands {
            self.bands = b;
        }
        if let Some(p) = o.blocking_prob {
            self.grid.blocking_prob = p;
        }
        if let Some(p) = o.protocol {
            self.experiment.protocol = p;
        }
        if let Some(dir) = &o.out {
            self.output.dir = dir.clone();
        }
        for f in &self.output.formats {
            f.parse::<krawdetect::harness::ReportFormat>()?;
        }
        self.experiment().validate()
    }

    pub fn detector(&self, key_seed: u64) -> DetectorConfig {
        DetectorConfig {
            key_seed,
            grid: self.grid.clone(),
            num_bands: self.bands,
            mode: self.integration_mode,
            enhancement: self.enhancement,
            svm: self.svm,
        }
    }

    /// Harness configuration; the key seed stays at its default until the
    /// caller sets it.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            protocol: self.experiment.protocol,
            data: self.data.clone(),
            attacks: self.attacks.clone(),
            harmless: self.experiment.harmless.clone(),
            split_fraction: self.experiment.split_fraction,
            max_examples: self.experiment.max_examples,
            seed: self.seeds.experiment,
            surrogate: self.experiment.surrogate,
            surrogate_seeds: self.seeds.surrogate,
            detector: self.detector(DetectorConfig::default().key_seed),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Spec for `kind` at budget `eps` with the tool's standard step settings.
pub fn default_spec(kind: AttackKind, eps: f64, seed: u64) -> PerturbationSpec {
    match kind {
        AttackKind::Fgsm => PerturbationSpec::fgsm(eps),
        AttackKind::Bim => PerturbationSpec::bim(eps, 10),
        AttackKind::Pgd => PerturbationSpec::pgd(eps, 10, seed),
    }
}

/// Changes the budget, keeping the step size proportional.
fn rescale(spec: &PerturbationSpec, eps: f64) -> PerturbationSpec {
    let ratio = if spec.epsilon > 0.0 {
        spec.alpha / spec.epsilon
    } else {
        1.0
    };
    PerturbationSpec {
        epsilon: eps,
        alpha: ratio * eps,
        ..*spec
    }
}
