use std::collections::HashSet;

use attrprior::data::{generate, SyntheticSpec};
use attrprior::evaluation::{
    aggregate_video_prediction, block_metrics_csv, build_blocks, compute_metrics,
    kfold_split, kfold_split_stratified, percent_difference, run_experiment, subset_partition,
    subset_sensitivity_experiment, summary_table, write_experiment, ConfusionMatrix,
    ExperimentConfig, METRICS_HEADER, SENSITIVITY_HEADER,
};
use attrprior::models::ModelSpec;
use attrprior::training::{TrainingConfig, TrainingMode};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:03}")).collect()
}

fn tiny_experiment(seed: u64) -> (attrprior::data::Dataset, ExperimentConfig) {
    let ds = generate(&SyntheticSpec::sliding_line(9, 12, 6, 10, 0.3, 40 + seed)).unwrap();
    let mode = |m| {
        let mut c = TrainingConfig::new(m);
        c.epochs = 2;
        c.learning_rate = 0.01;
        c.attribution.samples = 2;
        c.attribution.steps = 2;
        c.background_size = 8;
        c
    };
    let cfg = ExperimentConfig {
        model: ModelSpec::cnn([5, 12, 6], vec![2], 3, vec![4]),
        modes: TrainingMode::ALL.iter().map(|&m| mode(m)).collect(),
        folds: 3,
        stride: 5,
        seed,
        stratified: false,
        local_accuracy_reference: Default::default(),
        parallel_folds: false,
        evaluation_attribution: None,
    };
    (ds, cfg)
}

#[test]
fn experiments_are_deterministic_and_parallel_folds_agree() {
    let (ds, cfg) = tiny_experiment(1);
    let a = run_experiment(&ds, &cfg).unwrap();
    let mut par = cfg.clone();
    par.parallel_folds = true;
    let b = run_experiment(&ds, &par).unwrap();
    assert_eq!(block_metrics_csv(&a), block_metrics_csv(&b));
    assert_eq!(a, b);
}

#[test]
fn experiment_outputs_have_the_documented_layout() {
    let (ds, cfg) = tiny_experiment(2);
    let result = run_experiment(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_experiment(dir.path(), &result).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    // three folds plus a mean row per mode
    assert_eq!(lines.len(), 1 + 3 * 4);
    for m in TrainingMode::ALL {
        let mean = lines
            .iter()
            .find(|l| l.starts_with(&format!("{m},mean,,")))
            .expect("mean row");
        let cells: Vec<f64> = mean.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
        let folds: Vec<Vec<f64>> = lines
            .iter()
            .filter(|l| l.starts_with(&format!("{m},")) && !l.contains(",mean,"))
            .map(|l| l.split(',').skip(3).map(|c| c.parse().unwrap()).collect())
            .collect();
        for (j, &c) in cells.iter().enumerate() {
            let avg = folds.iter().map(|f| f[j]).sum::<f64>() / folds.len() as f64;
            assert!((avg - c).abs() < 1e-12);
        }
        for f in 0..3 {
            assert!(dir.path().join(format!("loss_curves/{m}_fold{f}.csv")).exists());
        }
    }
    assert!(dir.path().join("video_metrics.csv").exists());
    let summary = summary_table(&result);
    let ba = result.mode(TrainingMode::Base).unwrap().mean_block.ba;
    assert!(summary.contains(&format!("{ba:.4}")));
    assert!(summary.lines().any(|l| l.starts_with("diff")));
}

#[test]
fn sensitivity_rows_cover_full_set_and_subsets() {
    let (ds, mut cfg) = tiny_experiment(3);
    cfg.folds = 2;
    let rep = subset_sensitivity_experiment(&ds, 3, &cfg).unwrap();
    let csv = rep.to_csv();
    assert_eq!(csv.lines().next(), Some(SENSITIVITY_HEADER));
    // four metrics for the full set and each of three subsets
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    let single = subset_sensitivity_experiment(&ds, 1, &cfg).unwrap();
    assert!(single.rows.iter().all(|r| r.subset == "full"));
    assert!(single.subsets.is_empty());
}

#[test]
fn subsets_follow_uneven_frame_budgets() {
    let parts = subset_partition(&ids(2423), 3, 11).unwrap();
    let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![722, 907, 794]);
    let even = subset_partition(&ids(10), 4, 11).unwrap();
    assert_eq!(even.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
}

#[test]
fn video_prediction_ties_round_up() {
    assert_eq!(aggregate_video_prediction(&[0.4, 0.6]).unwrap(), 1);
    assert_eq!(aggregate_video_prediction(&[0.2, 0.7]).unwrap(), 0);
    assert!(aggregate_video_prediction(&[]).is_err());
}

#[test]
fn known_confusion_matrix() {
    let cm = ConfusionMatrix { tp: 3, tn: 5, fp: 1, fn_: 2 };
    let r = compute_metrics(&cm).unwrap();
    assert_eq!(r.aa, 8.0 / 11.0);
    assert_eq!(r.sensitivity, 3.0 / 5.0);
    assert_eq!(r.specificity, 5.0 / 6.0);
    assert_eq!(r.precision, 3.0 / 4.0);
    let f1 = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
    assert!((r.f1 - f1).abs() < 1e-15);
    assert!(!r.degenerate.any());
    assert!(percent_difference(0.0, 0.5).is_err());
}

#[test]
fn blocks_are_built_per_video() {
    let ds = generate(&SyntheticSpec::sliding_line(2, 14, 4, 12, 0.1, 5)).unwrap();
    let set = build_blocks(&ds, &[0, 1], 3).unwrap();
    // centers 2, 5, 8 fit inside twelve frames
    assert_eq!(set.centers, vec![2, 5, 8, 2, 5, 8]);
    assert_eq!(set.owners, vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(set.samples.features.shape(), &[6, 5, 14, 4]);
    assert_eq!(set.samples.labels[3], ds.labels[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_folds_balance_each_class(n in 6usize..40, k in 2usize..6, seed in any::<u64>()) {
        let video_ids = ids(n);
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        prop_assume!(labels.iter().filter(|&&y| y == 1).count() >= k);
        prop_assume!(labels.iter().filter(|&&y| y == 0).count() >= k);
        let split = kfold_split_stratified(&video_ids, &labels, k, seed).unwrap();
        let mut seen = HashSet::new();
        let mut positives = Vec::new();
        for f in &split.folds {
            positives.push(f.iter().filter(|id| {
                let i: usize = id[1..].parse().unwrap();
                labels[i] == 1
            }).count());
            for id in f {
                prop_assert!(seen.insert(id.clone()));
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(positives.iter().max().unwrap() - positives.iter().min().unwrap() <= 1);
    }

    #[test]
    fn remainder_goes_to_the_first_folds(n in 5usize..50, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let split = kfold_split(&ids(n), k, seed).unwrap();
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        let want: Vec<usize> = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
        prop_assert_eq!(sizes, want);
        prop_assert_eq!(split.clone(), kfold_split(&ids(n), k, seed).unwrap());
    }
}
