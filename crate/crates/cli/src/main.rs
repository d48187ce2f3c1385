mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use krawdetect::attacks::{attack, train_surrogate, AttackKind};
use krawdetect::features::IntegrationMode;
use krawdetect::harness::{emit_report, report_csv, run_experiment, train_detector, Protocol, ReportFormat};
use krawdetect::image::{
    load_idx_images, load_idx_pair, load_pgm, write_idx_pair, Dataset, Image, LabeledExample,
};
use krawdetect::keyed::DetectorKey;
use krawdetect::model::{Detector, DetectorModel};
use krawdetect::selftest;
use krawdetect::synth::synthetic_digits;
use krawdetect::Error;
use serde::Serialize;

use crate::config::{CliConfig, Overrides};

const KEY_ENV: &str = "KRAWDETECT_KEYFILE";

#[derive(Parser)]
#[command(name = "krawdetect", version, about = "Keyed Krawtchouk detector for adversarial images")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a fresh detector key drawn from OS entropy.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing key file.
        #[arg(long)]
        force: bool,
    },
    /// Write a seeded synthetic digit dataset as an IDX pair.
    Synth {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0x5EED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a labeled dataset with a freshly trained surrogate.
    AttackGen(AttackGenArgs),
    /// Train a detector on clean and adversarial images.
    Train(TrainArgs),
    /// Label images as clean (0) or adversarial (1), one JSON line each.
    Detect(DetectArgs),
    /// Run an experiment protocol and write reports.
    Evaluate(EvaluateArgs),
    /// Run the numerical self-checks.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Perturbation budget (L-infinity, pixel scale [0, 1]).
    #[arg(long)]
    epsilon: Option<f64>,
    /// fgsm, bim or pgd; replaces the configured attack list.
    #[arg(long)]
    attack: Option<AttackKind>,
    /// Band integration: magnitude or raw.
    #[arg(long)]
    mode: Option<IntegrationMode>,
    /// Number of radial frequency bands.
    #[arg(long)]
    bands: Option<usize>,
    /// Probability of blocking each keyed candidate.
    #[arg(long)]
    blocking_prob: Option<f64>,
}

#[derive(Args)]
struct AttackGenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Detector key file.
    #[arg(long, env = KEY_ENV)]
    key: Option<PathBuf>,
    /// IDX images of clean examples (label 0).
    #[arg(long)]
    clean: PathBuf,
    /// IDX images of adversarial examples (label 1).
    #[arg(long)]
    adversarial: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// A single binary PGM image.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    image: Option<PathBuf>,
    /// An IDX image file.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Detector key file.
    #[arg(long, env = KEY_ENV)]
    key: Option<PathBuf>,
    /// benchmark, crossing_attack, crossing_surrogate, challenging or harmless.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Output directory for reports and models.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Range(_) | Error::Order(_) => 2,
                Error::Stability(_) | Error::Degenerate(_) => 4,
                _ => 3,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => format!("usage error: {m}"),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("krawdetect: usage error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        // only fails if a global pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("krawdetect: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Keygen { out, force } => keygen(&out, force),
        Command::Synth { count, seed, out } => synth(count, seed, &out),
        Command::AttackGen(a) => attack_gen(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a, cli.workers.unwrap_or_else(rayon::current_num_threads)),
        Command::Selftest => run_selftest(),
    }
}

fn load_config(common: &Common, protocol: Option<Protocol>, out: Option<PathBuf>) -> Result<CliConfig, Failure> {
    let mut cfg = CliConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        epsilon: common.epsilon,
        attack: common.attack,
        mode: common.mode,
        bands: common.bands,
        blocking_prob: common.blocking_prob,
        protocol,
        out,
    })?;
    Ok(cfg)
}

fn require_key(path: Option<PathBuf>) -> Result<DetectorKey, Failure> {
    let path = path.ok_or_else(|| {
        Failure::Usage(format!("a key file is required (--key or {KEY_ENV})"))
    })?;
    Ok(DetectorKey::load(path)?)
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn keygen(out: &Path, force: bool) -> Outcome {
    if out.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} exists; pass --force to replace it",
            out.display()
        )));
    }
    let seed = getrandom::u64().map_err(|e| Failure::Usage(format!("OS entropy unavailable: {e}")))?;
    let key = DetectorKey::new(seed);
    key.save(out)?;
    println!("{{\"key_fingerprint\":\"{:016x}\"}}", key.fingerprint());
    Ok(())
}

fn synth(count: usize, seed: u64, out: &Path) -> Outcome {
    let data = synthetic_digits(count, seed)?;
    create_dir(out)?;
    write_idx_pair(
        &data,
        out.join("images.idx3-ubyte"),
        out.join("labels.idx1-ubyte"),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    attack_kind: AttackKind,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    seed: u64,
    surrogate_fingerprint: String,
    surrogate_train_accuracy: f64,
    quantized: bool,
    count: usize,
    source_images: String,
    effective_config: CliConfig,
}

fn attack_gen(a: AttackGenArgs) -> Outcome {
    let cfg = load_config(&a.common, None, None)?;
    let entry = match a.common.attack {
        Some(_) => cfg.attacks[0].clone(),
        None if cfg.attacks.len() == 1 => cfg.attacks[0].clone(),
        None => {
            return Err(Failure::Usage(
                "config lists several attacks; choose one with --attack".into(),
            ))
        }
    };
    let mut spec = entry.spec;
    // attacked images are stored as bytes, so keep δ on the 8-bit grid
    spec.quantize = true;
    let data = load_idx_pair(&a.images, &a.labels)?;
    let surrogate_cfg = krawdetect::attacks::SurrogateConfig {
        seed: cfg.seeds.surrogate[0],
        ..cfg.experiment.surrogate
    };
    let trained = train_surrogate(&data, &surrogate_cfg)?;
    let attacked: Vec<Image> = {
        use rayon::prelude::*;
        data.examples()
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                attack(&trained.model, &e.image, e.label, &spec.for_index(i)).map(|d| e.image.add(&d))
            })
            .collect::<krawdetect::Result<_>>()?
    };
    create_dir(&a.out)?;
    let examples = attacked
        .into_iter()
        .zip(data.examples())
        .map(|(image, e)| LabeledExample { image, label: e.label })
        .collect();
    let attacked = Dataset::new(format!("{}-{}", data.name(), spec.attack_kind.name()), data.num_classes(), examples)?;
    write_idx_pair(
        &attacked,
        a.out.join("images.idx3-ubyte"),
        a.out.join("labels.idx1-ubyte"),
    )?;
    let manifest = Manifest {
        attack_kind: spec.attack_kind,
        epsilon: spec.epsilon,
        steps: spec.steps,
        alpha: spec.alpha,
        seed: spec.seed,
        surrogate_fingerprint: format!("{:016x}", trained.model.fingerprint()),
        surrogate_train_accuracy: trained.train_accuracy,
        quantized: true,
        count: attacked.len(),
        source_images: a.images.display().to_string(),
        effective_config: cfg,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&a.out.join("manifest.json"), &text)
}

fn train(a: TrainArgs) -> Outcome {
    let key = require_key(a.key)?;
    let cfg = load_config(&a.common, None, None)?;
    let clean = load_idx_images(&a.clean)?;
    let adv = load_idx_images(&a.adversarial)?;
    if clean.is_empty() || adv.is_empty() {
        return Err(Error::Data("training needs clean and adversarial images".into()).into());
    }
    let mut detector_cfg = cfg.detector(key.seed());
    if let Some(s) = a.common.seed {
        detector_cfg.svm.shuffle_seed = s;
    }
    let images: Vec<&Image> = clean.iter().chain(&adv).collect();
    let labels: Vec<u8> = std::iter::repeat_n(0, clean.len())
        .chain(std::iter::repeat_n(1, adv.len()))
        .collect();
    let model = train_detector(&detector_cfg, &images, &labels)?;
    model.save(&a.out)?;
    let echo = a.out.with_extension("config.json");
    write_file(&echo, &cfg.to_json())?;
    println!(
        "{{\"model\":{:?},\"model_fingerprint\":\"{:016x}\",\"key_fingerprint\":\"{:016x}\"}}",
        a.out.display().to_string(),
        model.fingerprint()?,
        key.fingerprint()
    );
    Ok(())
}

#[derive(Serialize)]
struct Detection {
    index: usize,
    label: u8,
    margin: f64,
}

fn detect(a: DetectArgs) -> Outcome {
    let model = DetectorModel::load(&a.model)?;
    let detector = Detector::new(model)?;
    let images = match (&a.image, &a.images) {
        (Some(p), _) => vec![load_pgm(p)?],
        (None, Some(p)) => load_idx_images(p)?,
        (None, None) => return Err(Failure::Usage("pass --image or --images".into())),
    };
    let results: Vec<(u8, f64)> = {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|img| detector.detect(img))
            .collect::<krawdetect::Result<_>>()?
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (index, (label, margin)) in results.into_iter().enumerate() {
        let line = serde_json::to_string(&Detection { index, label, margin }).expect("plain struct");
        match writeln!(out, "{line}") {
            Ok(()) => {}
            // reader went away (e.g. piped into `head`)
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => return Err(Error::io("<stdout>", e).into()),
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, workers: usize) -> Outcome {
    let key = require_key(a.key)?;
    let cfg = load_config(&a.common, a.protocol, a.out)?;
    let mut experiment = cfg.experiment();
    experiment.detector.key_seed = key.seed();
    let outcome = run_experiment(&experiment, workers)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    write_file(&dir.join("effective_config.json"), &cfg.to_json())?;
    for f in &cfg.output.formats {
        let format: ReportFormat = f.parse()?;
        let name = match format {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
        };
        emit_report(&outcome.report, dir.join(name), format)?;
    }
    if cfg.output.save_models {
        let models = dir.join("models");
        create_dir(&models)?;
        for (name, model) in &outcome.models {
            let file: String = name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            model.save(models.join(format!("{file}.json")))?;
        }
    }
    print!("{}", report_csv(&outcome.report)?);
    Ok(())
}

fn run_selftest() -> Outcome {
    let suites = selftest::run_all()?;
    let mut passed = 0;
    for s in &suites {
        println!(
            "{:<15} {}  worst {:.3e} (tolerance {:.0e})",
            s.name,
            if s.passed { "PASS" } else { "FAIL" },
            s.worst,
            s.tolerance
        );
        passed += usize::from(s.passed);
    }
    let names: Vec<&str> = suites.iter().map(|s| s.name).collect();
    println!("selftest: {passed}/{} suites passed ({})", suites.len(), names.join(", "));
    if passed == suites.len() {
        Ok(())
    } else {
        Err(Error::Stability("self-checks failed".into()).into())
    }
}
