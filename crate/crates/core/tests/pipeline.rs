use std::path::{Path, PathBuf};

use iconokit::catalog::{build_labeling, image_to_statue, write_catalog_csv, Style, TaskId};
use iconokit::evalharness::{majority_baseline_f1, run_task, EvalConfig, TaskData};
use iconokit::features::iconometry_features;
use iconokit::iconometry::{aggregate_by_style, measure_landmarks, write_proportions_csv};
use iconokit::kgraph::{build_kg, node2vec, Node2VecConfig};
use iconokit::landmarks::{bundled_template, load_landmarks, write_landmarks};
use iconokit::learn::{load_model, save_model, train, Classifier, TrainConfig};
use iconokit::synth::{disjoint_cohorts, generate_dataset, SyntheticConfig};

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

#[test]
fn bundled_dataset_matches_regeneration() {
    let ds = generate_dataset(&SyntheticConfig::default());
    let mut catalog = Vec::new();
    write_catalog_csv(&ds.records, &mut catalog).unwrap();
    let mut landmarks = Vec::new();
    write_landmarks(&ds.landmarks, &mut landmarks).unwrap();
    let mut truth = Vec::new();
    write_proportions_csv(&ds.truth, &mut truth).unwrap();
    for (file, bytes) in [("catalog.csv", catalog), ("landmarks.json", landmarks), ("truth.csv", truth)] {
        let on_disk = std::fs::read(bundled().join(file)).unwrap();
        assert!(on_disk == bytes, "{file} is stale; regenerate with `iconokit synth --out-dir data/synthetic`");
    }
}

/// Images of statues with identical attributes are two hops apart through
/// every shared value; images of the other cohort share none.
#[test]
fn shared_attributes_embed_closer_than_disjoint_ones() {
    let records = disjoint_cohorts(6, 1);
    let kg = build_kg(&records, false);
    let images: Vec<usize> = (0..12).collect();
    let cohort = |i: usize| i / 6;
    for seed in 0..5 {
        let cfg = Node2VecConfig {
            seed,
            walks_per_node: 5,
            walk_length: 40,
            ..Default::default()
        };
        let emb = node2vec(&kg, &cfg).unwrap();
        let (mut same, mut other) = (Vec::new(), Vec::new());
        for &a in &images {
            for &b in images.iter().filter(|&&b| b > a) {
                let c = emb.cosine(a, b);
                if cohort(a) == cohort(b) {
                    same.push(c);
                } else {
                    other.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (s, o) = (mean(&same), mean(&other));
        assert!(s > o + 0.2, "seed {seed}: shared {s:.3} vs disjoint {o:.3}");
    }
}

#[test]
fn landmarks_to_style_classifier() {
    let (sets, rejected) = load_landmarks(&bundled().join("landmarks.json")).unwrap();
    assert!(rejected.is_empty());
    let template = bundled_template();
    let vectors: Vec<_> = sets
        .iter()
        .map(|s| measure_landmarks(s, &template).unwrap().1)
        .collect();
    let ds = generate_dataset(&SyntheticConfig::default());
    let i2s = image_to_statue(&ds.records);

    let style_of = |id: &str| {
        let statue = &i2s[id];
        ds.records.iter().find(|r| &r.statue_id == statue).unwrap().style
    };
    let tagged: Vec<_> = vectors.iter().map(|v| (style_of(&v.image_id), v.clone())).collect();
    let stats = aggregate_by_style(&tagged);
    let n = |s: Style| stats[&s].components[4].mean;
    for other in [Style::Heian, Style::Kamakura] {
        let gap = n(Style::China) - n(other);
        assert!((gap - 0.05).abs() < 0.01, "{other}: {gap}");
    }

    let features = iconometry_features(&vectors).unwrap();
    let labeling = build_labeling(&ds.records, TaskId::T1Style);
    let data = TaskData::new(&labeling, &features, &i2s).unwrap();
    let result = run_task(&data, Classifier::Svm, &EvalConfig::default()).unwrap();
    let baseline = majority_baseline_f1(&data.labels).unwrap();
    assert!(result.mean.f1 > baseline + 0.3, "{} vs majority {baseline}", result.mean.f1);
    assert_eq!(result.folds.len(), 5);

    let cfg = TrainConfig::default();
    let model = train(Classifier::Svm, &data.x, &data.labels, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&model, &cfg, std::fs::File::create(&path).unwrap()).unwrap();
    let saved = load_model(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(saved.model.predict(&data.x).unwrap(), model.predict(&data.x).unwrap());
}
