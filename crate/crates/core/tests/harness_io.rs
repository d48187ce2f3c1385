//! Experiment protocols, report output and dataset files.

use krawdetect::attacks::PerturbationSpec;
use krawdetect::harness::{
    compute_metrics, emit_report, parse_report_json, report_csv, run_experiment,
    run_experiment_on, split_indices, AttackEntry, ConfusionCounts, DataSource,
    ExperimentConfig, Protocol, Report, ReportFormat, CSV_HEADER,
};
use krawdetect::image::{load_idx_pair, write_idx_pair, Dataset, Image, LabeledExample};
use krawdetect::synth::synthetic_digits;
use krawdetect::Error;
use proptest::prelude::*;

fn small(protocol: Protocol, attacks: Vec<AttackEntry>) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        protocol,
        attacks,
        data: DataSource::Synthetic { count: 200, seed: 3 },
        ..ExperimentConfig::default()
    };
    c.surrogate.epochs = 30;
    c.detector.svm.epochs = 10;
    c
}

fn fgsm() -> AttackEntry {
    AttackEntry::new("fgsm", PerturbationSpec::fgsm(0.2))
}

#[test]
fn single_part_challenging_equals_benchmark() {
    let bench = run_experiment(&small(Protocol::Benchmark, vec![fgsm()]), 2).unwrap();
    let chal = run_experiment(&small(Protocol::Challenging, vec![fgsm()]), 2).unwrap();
    let (a, b) = (&bench.report.rows[0], &chal.report.rows[0]);
    assert_eq!((a.protocol, b.protocol), (Protocol::Benchmark, Protocol::Challenging));
    assert_eq!(a.train_attack, b.train_attack);
    assert_eq!(a.test_attack, b.test_attack);
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.model_fingerprint, b.model_fingerprint);
    assert_eq!(bench.models["fgsm"], chal.models["fgsm"]);
}

#[test]
fn reports_cover_every_cell_and_test_pools_are_paired() {
    let attacks = vec![fgsm(), AttackEntry::new("bim", PerturbationSpec::bim(0.2, 5))];
    let cfg = small(Protocol::CrossingAttack, attacks);
    let out = run_experiment(&cfg, 2).unwrap();
    let (_, test) = split_indices(200, 0.5, cfg.seed).unwrap();
    let mut cells: Vec<_> = out
        .report
        .rows
        .iter()
        .map(|r| (r.train_attack.as_str(), r.test_attack.as_str()))
        .collect();
    cells.sort();
    assert_eq!(cells, [("bim", "bim"), ("bim", "fgsm"), ("fgsm", "bim"), ("fgsm", "fgsm")]);
    for r in &out.report.rows {
        // every clean test image appears once, next to its own attacked copy
        assert_eq!(r.n_test(), 2 * test.len() as u64);
        assert_eq!(r.counts.tp + r.counts.fn_, test.len() as u64);
        let m = r.metrics();
        for v in [m.recall, m.precision, m.f1, m.accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(out.report.attack_stats.len(), 2);
}

#[test]
fn harmless_and_surrogate_protocols_name_their_rows() {
    let out = run_experiment(&small(Protocol::Harmless, vec![fgsm()]), 2).unwrap();
    let names: Vec<_> = out.report.rows.iter().map(|r| r.test_attack.as_str()).collect();
    assert_eq!(names, ["fgsm", "fgsm/gaussian", "fgsm/salt_pepper", "fgsm/resample"]);
    assert_eq!(out.models.len(), 4);

    let out = run_experiment(&small(Protocol::CrossingSurrogate, vec![fgsm()]), 2).unwrap();
    let names: Vec<_> = out
        .report
        .rows
        .iter()
        .map(|r| (r.train_attack.as_str(), r.test_attack.as_str()))
        .collect();
    assert_eq!(names, [("fgsm@11", "fgsm@11"), ("fgsm@11", "fgsm@22")]);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = small(Protocol::Benchmark, vec![AttackEntry::new("pgd", PerturbationSpec::pgd(0.2, 5, 9))]);
    let data = synthetic_digits(200, 3).unwrap();
    let one = run_experiment_on(&cfg, data.clone(), 1).unwrap();
    let many = run_experiment_on(&cfg, data, 6).unwrap();
    assert_eq!(report_csv(&one.report).unwrap(), report_csv(&many.report).unwrap());
    assert_eq!(one.models["pgd"].to_json().unwrap(), many.models["pgd"].to_json().unwrap());
}

#[test]
fn too_little_data_is_a_data_error() {
    let mut cfg = small(Protocol::Benchmark, vec![fgsm()]);
    cfg.max_examples = Some(1);
    assert!(matches!(run_experiment(&cfg, 1), Err(Error::Data(_))));
}

#[test]
fn report_files() {
    let out = run_experiment(&small(Protocol::Benchmark, vec![fgsm()]), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("r.csv");
    emit_report(&out.report, &csv_path, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "benchmark");
    for metric in &fields[3..7] {
        assert_eq!(metric.split('.').nth(1).map(str::len), Some(4), "{metric}");
    }

    let json_path = dir.path().join("r.json");
    emit_report(&out.report, &json_path, ReportFormat::Json).unwrap();
    let back = parse_report_json(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(back, out.report);

    let empty = Report {
        rows: Vec::new(),
        ..out.report.clone()
    };
    assert_eq!(report_csv(&empty).unwrap().lines().count(), 1);

    let bad = dir.path().join("missing-dir").join("r.csv");
    assert!(matches!(
        emit_report(&out.report, &bad, ReportFormat::Csv),
        Err(Error::Io { .. })
    ));
}

#[test]
fn metric_examples() {
    let c = |tp, fp, tn, fn_| ConfusionCounts { tp, fp, tn, fn_ };
    let m = compute_metrics(&c(90, 10, 90, 10)).unwrap();
    for v in [m.recall, m.precision, m.f1, m.accuracy] {
        assert!((v - 0.9).abs() < 1e-12);
    }
    let m = compute_metrics(&c(0, 0, 100, 0)).unwrap();
    assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
    assert!(matches!(compute_metrics(&c(0, 0, 0, 0)), Err(Error::Degenerate(_))));
}

proptest! {
    #[test]
    fn metrics_are_bounded(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = compute_metrics(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
        for v in [m.recall, m.precision, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn splits_partition_the_indices(n in 2usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = match split_indices(n, frac, seed) {
            Ok(s) => s,
            // a fraction that leaves one side empty is refused
            Err(e) => {
                prop_assert!(matches!(e, Error::Data(_)));
                return Ok(());
            }
        };
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!train.is_empty() && !test.is_empty());
    }

    #[test]
    fn idx_files_roundtrip(
        bytes in prop::collection::vec(any::<u8>(), 1..6)
            .prop_flat_map(|v| prop::collection::vec(any::<u8>(), v.len() * 12)),
    ) {
        let count = bytes.len() / 12;
        let examples: Vec<LabeledExample> = bytes
            .chunks(12)
            .enumerate()
            .map(|(i, c)| LabeledExample {
                image: Image::content(4, 3, c.iter().map(|&b| b as f64 / 255.0).collect()).unwrap(),
                label: i % 10,
            })
            .collect();
        let data = Dataset::new("t", 10, examples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_pair(&data, &ip, &lp).unwrap();
        let back = load_idx_pair(&ip, &lp).unwrap();
        prop_assert_eq!(back.len(), count);
        for (a, b) in back.examples().iter().zip(data.examples()) {
            prop_assert_eq!(a.label, b.label);
            prop_assert!(a.image.pixels().iter().zip(b.image.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(a.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
