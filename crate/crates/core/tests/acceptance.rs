//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::HashSet;
use std::time::Instant;

use attrprior::attribution::{
    attribution_nodes, expected_gradients, integrated_gradients, AttributionConfig,
    AttributionPlan, BackgroundSet,
};
use attrprior::autodiff::{finite_difference_gradient, Graph, Tensor};
use attrprior::data::{generate, Dataset, DatasetKind, SyntheticSpec};
use attrprior::evaluation::{
    block_centers, block_metrics_csv, compute_metrics, extract_frame_blocks, fold_blocks,
    fold_setup, experiment_split, kfold_split, percent_difference, run_experiment,
    subset_sensitivity_experiment, ConfusionMatrix, ExperimentConfig, ExperimentResult,
};
use attrprior::models::{
    forward, init_model, l2_penalty, predict_logits, Activation, Mode, ModelParameters, ModelSpec,
};
use attrprior::training::{
    bce_loss, combined_loss, shap_loss, train, TrainingConfig, TrainingMode,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Which objective a gradient check differentiates.
#[derive(Clone, Copy)]
enum Objective {
    Bce,
    L2,
    L2Regularized(f64),
    Combined(f64),
}

struct GradCase {
    params: ModelParameters,
    xs: Tensor,
    labels: Vec<u8>,
    background: BackgroundSet,
    plan: AttributionPlan,
}

fn grad_case(rng: &mut ChaCha8Rng, index: u64) -> GradCase {
    let d = rng.gen_range(2..=5);
    let depth = rng.gen_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=5)).collect();
    let act = if rng.gen_bool(0.5) {
        Activation::Sigmoid
    } else {
        Activation::Tanh
    };
    let spec = ModelSpec::mlp(d, hidden).with_activation(act);
    let mut params = init_model(&spec, 100 + index).unwrap();
    // non-zero biases so every parameter matters
    for t in &mut params.tensors {
        if !t.is_weight {
            for v in t.value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let n = rng.gen_range(2..=4);
    let xs = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let k = rng.gen_range(2..=4);
    let background = BackgroundSet::from_tensor(Tensor::new(
        vec![k, d],
        (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let cfg = AttributionConfig {
        steps: rng.gen_range(2..=5),
        samples: rng.gen_range(1..=k),
        seed: index,
        ..AttributionConfig::default()
    };
    let plan = AttributionPlan::new(n, k, &cfg).unwrap();
    GradCase {
        params,
        xs,
        labels,
        background,
        plan,
    }
}

fn objective_graph(case: &GradCase, params: &ModelParameters, obj: Objective) -> (Graph, attrprior::autodiff::NodeId, Vec<attrprior::autodiff::NodeId>) {
    let mut g = Graph::new(0);
    let bound = params.bind(&mut g);
    let x = g.constant(case.xs.clone());
    let logits = forward(&mut g, &params.spec, &bound, x, Mode::Eval).unwrap();
    let p = g.sigmoid(logits).unwrap();
    let cls = bce_loss(&mut g, p, &case.labels).unwrap();
    let loss = match obj {
        Objective::Bce => cls,
        Objective::L2 => l2_penalty(&mut g, params, &bound).unwrap(),
        Objective::L2Regularized(c) => {
            let pen = l2_penalty(&mut g, params, &bound).unwrap();
            let w = g.scale(pen, c).unwrap();
            g.add(cls, w).unwrap()
        }
        Objective::Combined(lambda) => {
            let d = params.spec.input_len();
            let rows: Vec<&[f64]> = case.xs.data().chunks(d).collect();
            let attr = attribution_nodes(
                &mut g,
                &params.spec,
                &bound,
                &rows,
                &case.background,
                &case.plan,
            )
            .unwrap();
            let prior = shap_loss(&mut g, attr.g_sum, &case.labels).unwrap();
            combined_loss(&mut g, cls, prior, lambda).unwrap()
        }
    };
    (g, loss, bound.nodes)
}

fn check_gradient(case: &GradCase, obj: Objective) -> f64 {
    let (mut g, loss, nodes) = objective_graph(case, &case.params, obj);
    let grads = g.gradient(loss, &nodes).unwrap();
    let analytic: Vec<f64> = nodes
        .iter()
        .flat_map(|&n| g.value(grads[n]).data().to_vec())
        .collect();
    let flat = case.params.flatten();
    let numeric = finite_difference_gradient(
        |theta| {
            let p = case.params.with_flat(theta);
            let (g, loss, _) = objective_graph(case, &p, obj);
            g.scalar_value(loss).unwrap()
        },
        &flat,
        1e-5,
    )
    .unwrap();
    rel_err(&analytic, &numeric)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let configs = 24;
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for i in 0..configs {
        let case = grad_case(&mut rng, i);
        let lambda = rng.gen_range(0.25..2.0);
        first = first
            .max(check_gradient(&case, Objective::Bce))
            .max(check_gradient(&case, Objective::L2))
            .max(check_gradient(&case, Objective::L2Regularized(1e-2)));
        second = second.max(check_gradient(&case, Objective::Combined(lambda)));
    }
    outcome(
        first < 1e-6 && second < 1e-5,
        format!(
            "{configs} MLPs: max rel err first-order {first:.2e} (< 1e-6), through attribution {second:.2e} (< 1e-5)"
        ),
    )
}

fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::vector((0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // linear models: exact for any step count
    let mut linear_err = 0.0f64;
    for i in 0..20 {
        let d = rng.gen_range(1..=8);
        let mut p = init_model(&ModelSpec::mlp(d, vec![]), i).unwrap();
        p.tensors[1].value.data_mut()[0] = rng.gen_range(-1.0..1.0);
        let (x, xp) = (random_point(&mut rng, d), random_point(&mut rng, d));
        for m in [1, 2, 3, 7, 50] {
            let r = integrated_gradients(&p, &x, &xp, m).unwrap();
            let fx = predict_logits(&p, &x.clone().reshaped(vec![1, d]).unwrap()).unwrap()[0];
            let fxp = predict_logits(&p, &xp.clone().reshaped(vec![1, d]).unwrap()).unwrap()[0];
            linear_err = linear_err.max((r.g_sum - (fx - fxp)).abs());
            let w = p.tensors[0].value.data();
            for j in 0..d {
                let want = w[j] * (x.data()[j] - xp.data()[j]);
                linear_err = linear_err.max((r.phi.data()[j] - want).abs());
            }
        }
    }

    // completeness on sigmoid networks with 300 steps
    let mut completeness = 0.0f64;
    let mut cases = 0;
    for i in 0..20 {
        let d = rng.gen_range(2..=8);
        let hidden = if i % 2 == 0 { vec![8] } else { vec![8, 6] };
        let spec = ModelSpec::mlp(d, hidden).with_activation(Activation::Sigmoid);
        let p = init_model(&spec, 500 + i).unwrap();
        let (x, xp) = (random_point(&mut rng, d), random_point(&mut rng, d));
        let r = integrated_gradients(&p, &x, &xp, 300).unwrap();
        let fx = predict_logits(&p, &x.clone().reshaped(vec![1, d]).unwrap()).unwrap()[0];
        let fxp = predict_logits(&p, &xp.clone().reshaped(vec![1, d]).unwrap()).unwrap()[0];
        let delta = fx - fxp;
        completeness = completeness.max((r.g_sum - delta).abs() / delta.abs());
        cases += 1;
    }

    // singleton background reproduces integrated gradients bit for bit
    let mut bitwise = true;
    for i in 0..10 {
        let spec = if i % 2 == 0 {
            ModelSpec::mlp(6, vec![5]).with_activation(Activation::Tanh)
        } else {
            ModelSpec::cnn([2, 5, 5], vec![2], 3, vec![4])
        };
        let p = init_model(&spec, 900 + i).unwrap();
        let n = spec.input_len();
        let x = Tensor::new(spec.input_shape.clone(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
        let xp = Tensor::new(spec.input_shape.clone(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect());
        let ig = integrated_gradients(&p, &x, &xp, 17).unwrap();
        let mut shape = vec![1];
        shape.extend(&spec.input_shape);
        let bg = BackgroundSet::from_tensor(xp.clone().reshaped(shape).unwrap());
        let cfg = AttributionConfig {
            steps: 17,
            samples: 5,
            seed: i,
            ..AttributionConfig::default()
        };
        let eg = expected_gradients(&p, &x, &bg, &cfg).unwrap();
        bitwise &= eg.phi == ig.phi && eg.g_sum.to_bits() == ig.g_sum.to_bits();
    }

    outcome(
        linear_err < 1e-12 && completeness < 1e-3 && bitwise,
        format!(
            "linear IG max err {linear_err:.1e} (< 1e-12); sigmoid completeness max rel err {completeness:.2e} over {cases} nets (< 1e-3); singleton EG == IG bitwise: {bitwise}"
        ),
    )
}

fn small_video_config(seed: u64, lambda: f64) -> (Dataset, ExperimentConfig) {
    let mut spec = SyntheticSpec::sliding_line(15, 12, 12, 10, 0.3, 3000 + seed);
    spec.motion_amplitude = 1;
    let ds = generate(&spec).unwrap();
    let model = ModelSpec::cnn([5, 12, 12], vec![2], 3, vec![6]).with_dropout(0.25);
    let mode = |m| {
        let mut c = TrainingConfig::new(m);
        c.epochs = 3;
        c.learning_rate = 0.01;
        c.attribution.samples = 3;
        c.attribution.steps = 3;
        c.background_size = 12;
        c.lambda = lambda;
        c
    };
    let cfg = ExperimentConfig {
        model,
        modes: vec![mode(TrainingMode::Base), mode(TrainingMode::Xaiaug)],
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

fn mode_rows(csv: &str, mode: &str) -> Vec<String> {
    csv.lines()
        .filter_map(|l| l.strip_prefix(&format!("{mode},")))
        .map(str::to_string)
        .collect()
}

fn criterion_3() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let (ds, cfg) = small_video_config(seed, 0.0);
        let split = experiment_split(&ds, &cfg).unwrap();
        let mut same_traj = true;
        for fold in 0..cfg.folds {
            let (tr, te) = fold_blocks(&ds, &split, fold, cfg.stride).unwrap();
            let run = |mc: &TrainingConfig| {
                let (tc, init) = fold_setup(&cfg, mc, fold).unwrap();
                train(init, &tr.samples, &te.samples, &tc).unwrap()
            };
            let (b, x) = (run(&cfg.modes[0]), run(&cfg.modes[1]));
            same_traj &= b.trajectory == x.trajectory && b.record == x.record;
        }
        let result = run_experiment(&ds, &cfg).unwrap();
        let csv = block_metrics_csv(&result);
        let same_csv = mode_rows(&csv, "base") == mode_rows(&csv, "xaiaug");
        ok &= same_traj && same_csv;
        notes.push(format!("seed {seed}: trajectory {same_traj}, metrics {same_csv}"));
    }
    outcome(ok, notes.join("; "))
}

fn criterion_4() -> Outcome {
    let cells = [(0.543, 0.592, 9.02), (0.500, 0.572, 14.40), (0.291, 0.457, 57.04)];
    let mut ok = true;
    let mut notes = Vec::new();
    for (base, x, want) in cells {
        let got = percent_difference(base, x).unwrap();
        ok &= (got - want).abs() <= 0.01;
        notes.push(format!("({base}, {x}) -> {got:.4}% vs {want}%"));
    }
    outcome(ok, notes.join("; "))
}

/// The scarce-data comparison: 50 videos of 16x16 frames, so every fold
/// trains on 40 videos.
fn scarce_config(seed: u64, videos: usize, modes: &[TrainingMode]) -> (Dataset, ExperimentConfig) {
    let spec = SyntheticSpec::sliding_line(videos, 16, 16, 10, 0.3, 1000 + seed);
    let ds = generate(&spec).unwrap();
    let model = ModelSpec::cnn([5, 16, 16], vec![4], 3, vec![16]);
    let mode = |m| {
        let mut c = TrainingConfig::new(m);
        c.epochs = 30;
        c.learning_rate = 0.01;
        c.attribution.samples = 4;
        c.attribution.steps = 4;
        c.track_shap_loss = false;
        c
    };
    let cfg = ExperimentConfig {
        model,
        modes: modes.iter().map(|&m| mode(m)).collect(),
        folds: 5,
        stride: 5,
        seed,
        stratified: false,
        local_accuracy_reference: Default::default(),
        parallel_folds: false,
        evaluation_attribution: Some(AttributionConfig {
            samples: 32,
            steps: 16,
            ..AttributionConfig::default()
        }),
    };
    (ds, cfg)
}

fn criteria_5_6_8() -> (Outcome, Outcome, Outcome) {
    let mut ba_f1_wins = 0;
    let mut la_wins = 0;
    let mut fold_wins = 0;
    let mut folds = 0;
    let mut n5 = Vec::new();
    let mut n6 = Vec::new();
    for seed in 0..5 {
        let (ds, cfg) = scarce_config(
            seed,
            50,
            &[TrainingMode::Base, TrainingMode::Xaiaug, TrainingMode::L2],
        );
        let r: ExperimentResult = run_experiment(&ds, &cfg).unwrap();
        let b = &r.mode(TrainingMode::Base).unwrap().mean_block;
        let x = &r.mode(TrainingMode::Xaiaug).unwrap().mean_block;
        if x.ba > b.ba && x.f1 > b.f1 {
            ba_f1_wins += 1;
        }
        if x.local_accuracy >= b.local_accuracy {
            la_wins += 1;
        }
        n5.push(format!(
            "s{seed} BA {:.3}->{:.3} F1 {:.3}->{:.3}",
            b.ba, x.ba, b.f1, x.f1
        ));
        n6.push(format!("s{seed} {:.3}->{:.3}", b.local_accuracy, x.local_accuracy));
        let xf = &r.mode(TrainingMode::Xaiaug).unwrap().folds;
        let lf = &r.mode(TrainingMode::L2).unwrap().folds;
        for (a, l) in xf.iter().zip(lf) {
            let la = a.record.epochs.last().unwrap().test_classification_loss;
            let ll = l.record.epochs.last().unwrap().test_classification_loss;
            folds += 1;
            if la < ll {
                fold_wins += 1;
            }
        }
    }
    (
        outcome(
            ba_f1_wins >= 4,
            format!("xaiaug beats base on BA and F1 in {ba_f1_wins}/5 seeds (need 4): {}", n5.join(", ")),
        ),
        outcome(
            la_wins >= 4,
            format!("xaiaug local accuracy >= base in {la_wins}/5 seeds (need 4): {}", n6.join(", ")),
        ),
        outcome(
            2 * fold_wins > folds,
            format!("final-epoch test loss xaiaug < l2 in {fold_wins}/{folds} folds (need a majority)"),
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let (ds, cfg) = scarce_config(seed, 120, &[TrainingMode::Base, TrainingMode::Xaiaug]);
        let rep = subset_sensitivity_experiment(&ds, 3, &cfg).unwrap();
        let full = rep.diff("full", "ba").unwrap_or(f64::NAN);
        let subs: Vec<f64> = (1..=3)
            .map(|i| rep.diff(&i.to_string(), "ba").unwrap_or(f64::NAN))
            .collect();
        let mean = subs.iter().sum::<f64>() / 3.0;
        if mean > full {
            wins += 1;
        }
        notes.push(format!("s{seed} subsets {mean:+.2}% vs full {full:+.2}%"));
    }
    outcome(
        wins >= 3,
        format!("mean subset BA gain exceeds full-set gain in {wins}/5 seeds (need 3): {}", notes.join(", ")),
    )
}

fn criterion_9() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // block counts, exhaustively
    let mut block_ok = true;
    for frames in 0..=60usize {
        for stride in 1..=12usize {
            let want = if frames >= 5 { (frames - 5) / stride + 1 } else { 0 };
            let video = Tensor::zeros(&[frames, 1, 1]);
            let blocks = extract_frame_blocks(&video, "v", 0, stride).unwrap();
            block_ok &= block_centers(frames, stride).len() == want && blocks.len() == want;
            block_ok &= blocks.iter().all(|b| b.frames.shape()[0] == 5);
        }
    }
    ok &= block_ok;
    notes.push(format!("block count closed form {block_ok}"));

    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let folds = runner.run(&(6usize..40, 2usize..7, any::<u64>()), |(n, k, seed)| {
        let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let split = kfold_split(&ids, k, seed).unwrap();
        let mut seen = HashSet::new();
        for f in &split.folds {
            for id in f {
                prop_assert!(seen.insert(id.clone()), "{id} in two folds");
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        Ok(())
    });
    ok &= folds.is_ok();
    notes.push(format!("fold partition {}", folds.is_ok()));

    let leakage = runner.run(
        &(5usize..15, 1usize..4, any::<u64>()),
        |(videos, per_video, seed)| {
            // several items per video id
            let mut instances = Vec::new();
            let mut ids = Vec::new();
            let mut labels = Vec::new();
            for v in 0..videos {
                for j in 0..per_video {
                    instances.push(Tensor::vector(vec![v as f64, j as f64]));
                    ids.push(format!("vid{v}"));
                    labels.push((v % 2) as u8);
                }
            }
            let ds = Dataset::new(DatasetKind::Vectors, instances, labels, ids, "test").unwrap();
            let cfg = ExperimentConfig {
                model: ModelSpec::mlp(2, vec![]),
                modes: vec![TrainingConfig::new(TrainingMode::Base)],
                folds: 5,
                stride: 1,
                seed,
                stratified: seed % 2 == 0,
                local_accuracy_reference: Default::default(),
                parallel_folds: false,
                evaluation_attribution: None,
            };
            let split = experiment_split(&ds, &cfg).unwrap();
            for fold in 0..5 {
                let (tr, te) = fold_blocks(&ds, &split, fold, 1).unwrap();
                let train_ids: HashSet<&str> =
                    tr.owners.iter().map(|&o| ds.video_ids[o].as_str()).collect();
                for &o in &te.owners {
                    prop_assert!(!train_ids.contains(ds.video_ids[o].as_str()));
                }
                prop_assert_eq!(tr.samples.len() + te.samples.len(), ds.len());
            }
            Ok(())
        },
    );
    ok &= leakage.is_ok();
    notes.push(format!("no video leakage {}", leakage.is_ok()));

    let metrics = runner.run(&(0usize..6, 0usize..6, 0usize..6, 0usize..6), |(tp, tn, fp, fn_)| {
        let cm = ConfusionMatrix { tp, tn, fp, fn_ };
        match compute_metrics(&cm) {
            Err(_) => prop_assert_eq!(cm.total(), 0),
            Ok(r) => {
                prop_assert_eq!(r.degenerate.precision, tp + fp == 0);
                prop_assert_eq!(r.degenerate.sensitivity, tp + fn_ == 0);
                prop_assert_eq!(r.degenerate.specificity, tn + fp == 0);
                prop_assert_eq!(r.degenerate.f1, r.precision + r.sensitivity == 0.0);
                for v in [r.aa, r.ba, r.f1, r.sensitivity, r.specificity, r.precision] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert_eq!(r.ba, (r.sensitivity + r.specificity) / 2.0);
                if tp + fn_ == tn + fp {
                    prop_assert!((r.ba - r.aa).abs() < 1e-15);
                }
            }
        }
        Ok(())
    });
    ok &= metrics.is_ok();
    notes.push(format!("degenerate flags and ranges {}", metrics.is_ok()));

    outcome(ok, notes.join("; "))
}

fn main() {
    // ACCEPTANCE_ONLY=1,2,9 restricts the run to the listed criteria
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |labels: &[&str]| {
        only.as_ref()
            .map_or(true, |o| labels.iter().any(|l| o.iter().any(|x| x == l)))
    };
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |labels: &[&'static str], f: &mut dyn FnMut() -> Vec<(&'static str, Outcome)>| {
        if !wanted(labels) {
            return;
        }
        let start = Instant::now();
        let outs = f();
        let secs = start.elapsed().as_secs_f64();
        for (label, o) in outs {
            println!(
                "criterion {label}: {} ({secs:.1}s) {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((label, o));
        }
    };
    run(&["1"], &mut || vec![("1", criterion_1())]);
    run(&["2"], &mut || vec![("2", criterion_2())]);
    run(&["3"], &mut || vec![("3", criterion_3())]);
    run(&["4"], &mut || vec![("4", criterion_4())]);
    run(&["9"], &mut || vec![("9", criterion_9())]);
    run(&["5", "6", "8"], &mut || {
        let (c5, c6, c8) = criteria_5_6_8();
        vec![("5", c5), ("6", c6), ("8", c8)]
    });
    run(&["7"], &mut || vec![("7", criterion_7())]);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(l, _)| *l).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
