//! Linear SVM behaviour and detector persistence.

use krawdetect::attacks::random_sign_noise;
use krawdetect::features::FeatureVector;
use krawdetect::harness::{train_detector, DetectorConfig};
use krawdetect::image::Image;
use krawdetect::keyed::KeyStream;
use krawdetect::model::{persist_roundtrip, Detector, DetectorModel};
use krawdetect::svm::{predict, train_svm, train_svm_traced, SvmModel, TrainConfig};
use krawdetect::synth::synthetic_digits;
use krawdetect::Error;
use proptest::prelude::*;

/// Two blobs either side of the line x + 2y = 0.5, at least 0.5 away.
fn blobs(n: usize, seed: u64) -> (Vec<FeatureVector>, Vec<u8>) {
    let mut rng = KeyStream::new(seed);
    let norm = 5f64.sqrt();
    let mut f = Vec::new();
    let mut l = Vec::new();
    while f.len() < n {
        let x = rng.next_unit() * 6.0 - 3.0;
        let y = rng.next_unit() * 6.0 - 3.0;
        let d = (x + 2.0 * y - 0.5) / norm;
        if d.abs() < 0.5 {
            continue;
        }
        f.push(FeatureVector::from_values(vec![x, y]));
        l.push(u8::from(d > 0.0));
    }
    (f, l)
}

#[test]
fn separable_blobs_are_learned() {
    let (f, l) = blobs(200, 17);
    let cfg = TrainConfig {
        lambda: 1e-3,
        epochs: 200,
        ..TrainConfig::default()
    };
    let model = train_svm(&f, &l, &cfg).unwrap();
    let correct = f
        .iter()
        .zip(&l)
        .filter(|(v, &y)| predict(&model, v).unwrap().0 == y)
        .count();
    assert_eq!(correct, 200);
}

#[test]
fn objective_mostly_decreases() {
    let (f, l) = blobs(200, 3);
    let (_, trace) = train_svm_traced(&f, &l, &TrainConfig::default()).unwrap();
    let down = trace.windows(2).filter(|w| w[1] <= w[0] + 1e-6).count();
    let transitions = trace.len() - 1;
    assert!(
        down as f64 >= 0.8 * transitions as f64,
        "{down}/{transitions} non-increasing"
    );
}

#[test]
fn training_is_bit_reproducible() {
    let (f, l) = blobs(120, 5);
    let cfg = TrainConfig::default();
    assert_eq!(train_svm(&f, &l, &cfg).unwrap(), train_svm(&f, &l, &cfg).unwrap());
}

#[test]
fn training_errors() {
    let (f, _) = blobs(10, 1);
    assert!(matches!(
        train_svm(&f, &[0; 10], &TrainConfig::default()),
        Err(Error::Degenerate(_))
    ));
    let mixed = vec![
        FeatureVector::from_values(vec![1.0]),
        FeatureVector::from_values(vec![1.0, 2.0]),
    ];
    assert!(matches!(
        train_svm(&mixed, &[0, 1], &TrainConfig::default()),
        Err(Error::Shape(_))
    ));
}

proptest! {
    #[test]
    fn labels_are_scale_invariant(
        w in prop::collection::vec(-5.0f64..5.0, 4),
        b in -5.0f64..5.0,
        v in prop::collection::vec(-5.0f64..5.0, 4),
        c in 1e-3f64..1e3,
    ) {
        let base = SvmModel { weights: w.clone(), bias: b, train_config: TrainConfig::default() };
        let scaled = SvmModel {
            weights: w.iter().map(|x| x * c).collect(),
            bias: b * c,
            train_config: TrainConfig::default(),
        };
        let fv = FeatureVector::from_values(v);
        prop_assert_eq!(predict(&base, &fv).unwrap().0, predict(&scaled, &fv).unwrap().0);
    }
}

fn small_model() -> (DetectorModel, Vec<Image>) {
    let data = synthetic_digits(60, 4).unwrap();
    let noisy: Vec<Image> = data
        .images()
        .enumerate()
        .map(|(i, img)| img.add(&random_sign_noise(img, 0.2, i as u64)))
        .collect();
    let mut images: Vec<&Image> = data.images().collect();
    images.extend(noisy.iter());
    let labels: Vec<u8> = (0..120).map(|i| u8::from(i >= 60)).collect();
    let model = train_detector(&DetectorConfig::default(), &images, &labels).unwrap();
    (model, images.into_iter().cloned().collect())
}

#[test]
fn persisted_model_predicts_identically() {
    let (model, images) = small_model();
    let dir = tempfile::tempdir().unwrap();
    let back = persist_roundtrip(&model, dir.path().join("m.json")).unwrap();
    assert_eq!(back, model);
    let mut rng = KeyStream::new(77);
    for _ in 0..100 {
        let v: Vec<f64> = (0..model.svm.dim()).map(|_| rng.next_unit() * 8.0 - 4.0).collect();
        let fv = FeatureVector::from_values(v);
        let a = predict(&model.svm, &fv).unwrap();
        let b = predict(&back.svm, &fv).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
    let d1 = Detector::new(model).unwrap();
    let d2 = Detector::new(back).unwrap();
    for img in images.iter().step_by(7) {
        let (l1, m1) = d1.detect(img).unwrap();
        let (l2, m2) = d2.detect(img).unwrap();
        assert_eq!((l1, m1.to_bits()), (l2, m2.to_bits()));
    }
}

#[test]
fn damaged_files_are_rejected() {
    let (model, _) = small_model();
    let dir = tempfile::tempdir().unwrap();
    let text = model.to_json().unwrap();

    let wrong = dir.path().join("v999.json");
    std::fs::write(&wrong, text.replacen("\"format_version\": 1", "\"format_version\": 999", 1)).unwrap();
    assert!(matches!(
        DetectorModel::load(&wrong),
        Err(Error::Version { found: 999, .. })
    ));

    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert!(matches!(DetectorModel::load(&cut), Err(Error::Format(_))));

    assert!(matches!(
        DetectorModel::load(dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}
