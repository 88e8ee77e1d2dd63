use std::collections::BTreeMap;

use osrkd::data::{DatasetSplit, LabeledSample, PointCloud, Provenance};
use osrkd::models::{build_model, Arch};
use osrkd::trainer::{evaluate, grid_search, train_with_teacher, Objective, Regime, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const N: usize = 16;

fn sphere_point(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| (x / n) as f32)
}

fn cube_point(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut p: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let axis = rng.random_range(0..3);
    p[axis] = if rng.random_bool(0.5) { 0.6 } else { -0.6 };
    p
}

fn segment_point(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(-1.0..1.0), 0.0, 0.0]
}

fn samples(kind: u32, label: u32, count: usize, provenance: Provenance, rng: &mut ChaCha8Rng) -> Vec<LabeledSample> {
    (0..count)
        .map(|i| {
            let points = (0..N)
                .map(|_| match kind {
                    0 => sphere_point(rng),
                    1 => cube_point(rng),
                    _ => segment_point(rng),
                })
                .collect();
            LabeledSample {
                id: format!("{kind}/{label}/{i}"),
                cloud: PointCloud::new(points).unwrap(),
                label,
                provenance,
            }
        })
        .collect()
}

/// Spheres against cubes, with line segments as the open set.
fn toy_split(per_class: usize) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut closed_train = samples(0, 0, per_class, Provenance::Real, &mut rng);
    closed_train.extend(samples(1, 1, per_class, Provenance::Real, &mut rng));
    let mut closed_test = samples(0, 0, 20, Provenance::Real, &mut rng);
    closed_test.extend(samples(1, 1, 20, Provenance::Real, &mut rng));
    let open_test = samples(2, 2, 10, Provenance::OpenTest, &mut rng);
    let pseudo_open_train = samples(2, 2, per_class / 2, Provenance::PseudoOpen, &mut rng);
    DatasetSplit {
        closed_train,
        closed_test,
        open_test,
        pseudo_open_train,
        class_names: vec!["sphere".into(), "cube".into()],
    }
}

fn config(regime: Regime, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk_scale(regime, 0);
    c.epochs = epochs;
    c.batch_size = 16;
    c.loss.n_negatives = Some(8);
    c
}

#[test]
fn scratch_student_learns_spheres_versus_cubes() {
    let split = toy_split(48);
    let outcome = train_with_teacher(&config(Regime::StudentCe, 20), &split, None, None).unwrap();
    assert!(outcome.report.closed_accuracy >= 0.95, "accuracy {}", outcome.report.closed_accuracy);
    assert_eq!(outcome.report.loss_curves.len(), 20);
    let first = outcome.report.loss_curves[0].ce;
    let last = outcome.report.loss_curves[19].ce;
    assert!(last < first, "loss did not fall: {first} -> {last}");
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let split = toy_split(16);
    let teacher = build_model(Arch::Teacher, 2, 5).unwrap();
    let before = teacher.snapshot().unwrap();
    for regime in [Regime::StudentKdCrdCe, Regime::StudentJointKdOsr] {
        train_with_teacher(&config(regime, 1), &split, Some(&teacher), None).unwrap();
        let after = teacher.snapshot().unwrap();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{regime}: {name} changed");
        }
    }
}

#[test]
fn zero_crd_weight_reduces_to_ce_plus_kd() {
    let split = toy_split(16);
    let teacher = build_model(Arch::Teacher, 2, 5).unwrap();
    let mut with_crd = config(Regime::StudentKdCrdCe, 2);
    with_crd.loss.beta = 0.0;
    let a = train_with_teacher(&with_crd, &split, Some(&teacher), None).unwrap();
    let b = train_with_teacher(&config(Regime::StudentCeKd, 2), &split, Some(&teacher), None).unwrap();
    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert!((x.total - y.total).abs() <= 1e-6 * y.total.abs().max(1.0), "{} vs {}", x.total, y.total);
    }
}

#[test]
fn joint_regime_reports_every_component() {
    let split = toy_split(16);
    let teacher = build_model(Arch::Teacher, 2, 5).unwrap();
    let out = train_with_teacher(&config(Regime::StudentJointKdOsr, 1), &split, Some(&teacher), None).unwrap();
    assert_eq!(out.report.num_classes, 3);
    for s in &out.step_losses {
        assert!(s.ce > 0.0 && s.kd > 0.0 && s.crd > 0.0, "{s:?}");
        let cfg = &out.report.config_echo.loss;
        assert!((s.total - (cfg.alpha * s.kd + cfg.beta * s.crd + cfg.gamma * s.ce)).abs() < 1e-3 * s.total);
    }
    assert!(out.report.osr_metrics.is_some());
}

#[test]
fn training_is_deterministic() {
    let split = toy_split(16);
    let cfg = config(Regime::StudentOpenset, 2);
    let a = train_with_teacher(&cfg, &split, None, None).unwrap();
    let b = train_with_teacher(&cfg, &split, None, None).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.model.snapshot().unwrap(), b.model.snapshot().unwrap());
    let ea = evaluate(&a.model, &split, 0.5).unwrap();
    assert_eq!(ea.predictions, evaluate(&b.model, &split, 0.5).unwrap().predictions);
}

#[test]
fn grid_search_enumerates_and_picks_the_first_best() {
    let split = toy_split(8);
    let base = config(Regime::StudentCe, 1);
    let mut grid = BTreeMap::new();
    grid.insert("learning_rate".to_string(), vec![1e-3, 1e-2]);
    grid.insert("batch_size".to_string(), vec![4.0, 8.0, 16.0]);
    let result = grid_search(&base, &grid, &split, Objective::ClosedAcc, None, 10).unwrap();
    assert_eq!(result.rows.len(), 6);
    let best = result.rows.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
    let first = result.rows.iter().position(|r| r.objective == best).unwrap();
    assert_eq!(result.best_index, first);
    let first_params: BTreeMap<String, f64> = [("batch_size".to_string(), 4.0), ("learning_rate".to_string(), 1e-3)].into();
    assert_eq!(result.rows[0].params, first_params);
    assert_eq!(result.rows[1].params["learning_rate"], 1e-2);
    assert_eq!(result.rows[2].params["batch_size"], 8.0);

    assert!(grid_search(&base, &grid, &split, Objective::ClosedAcc, None, 5).is_err());
    assert!(grid_search(&base, &BTreeMap::new(), &split, Objective::ClosedAcc, None, 5).is_err());
    let mut empty = BTreeMap::new();
    empty.insert("alpha".to_string(), Vec::new());
    assert!(grid_search(&base, &empty, &split, Objective::ClosedAcc, None, 5).is_err());
    let mut unknown = BTreeMap::new();
    unknown.insert("colour".to_string(), vec![1.0]);
    assert!(grid_search(&base, &unknown, &split, Objective::ClosedAcc, None, 5).is_err());
}

#[test]
fn single_point_grid_returns_that_point() {
    let split = toy_split(8);
    let mut grid = BTreeMap::new();
    grid.insert("learning_rate".to_string(), vec![2e-3]);
    let result = grid_search(&config(Regime::StudentCe, 1), &grid, &split, Objective::FMeasure, None, 1).unwrap();
    assert_eq!(result.rows.len(), 1);
    assert_eq!(result.best_index, 0);
    assert_eq!(result.best.learning_rate, 2e-3);
}

#[test]
fn grid_over_openset_weights_maximises_f_measure() {
    let split = toy_split(8);
    let mut grid = BTreeMap::new();
    grid.insert("alpha".to_string(), vec![0.5, 1.0]);
    let teacher = build_model(Arch::Teacher, 2, 5).unwrap();
    let result = grid_search(
        &config(Regime::StudentJointKdOsr, 1),
        &grid,
        &split,
        Objective::FMeasure,
        Some(&teacher),
        2,
    )
    .unwrap();
    assert_eq!(result.rows.len(), 2);
    let f: Vec<f64> = result.rows.iter().map(|r| r.f_measure.unwrap()).collect();
    let best = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(f[result.best_index], best);
    assert_eq!(result.best.loss.alpha, [0.5, 1.0][result.best_index]);
}

/// Distilling a trained student into a fresh one with KD alone drives the
/// KD term down to the entropy of the teacher's softened outputs.
#[test]
fn self_distillation_reaches_the_entropy_floor() {
    let split = toy_split(32);
    let teacher = train_with_teacher(&config(Regime::StudentCe, 5), &split, None, None).unwrap().model;
    let mut cfg = config(Regime::StudentKd, 30);
    cfg.loss.tau_kd = 4.0;
    cfg.learning_rate = 3e-3;
    let out = train_with_teacher(&cfg, &split, Some(&teacher), None).unwrap();

    let train: Vec<&LabeledSample> = split.closed_train.iter().collect();
    let tau = cfg.loss.tau_kd;
    let floor = predict_logits(&teacher, &train)
        .iter()
        .map(|z| {
            let p = osrkd::losses::soft_softmax(z, tau).unwrap();
            -p.iter().map(|q| q * q.ln()).sum::<f64>() * tau * tau
        })
        .sum::<f64>()
        / train.len() as f64;
    let curves = &out.report.loss_curves;
    let (first, last) = (curves[0].kd, curves[curves.len() - 1].kd);
    assert!(last >= floor - 1e-3, "KD {last} below the floor {floor}");
    assert!(last - floor < 0.05 * (first - floor), "first {first}, last {last}, floor {floor}");
}

fn predict_logits(model: &osrkd::models::ModelHandle, samples: &[&LabeledSample]) -> Vec<Vec<f64>> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let out = model.forward_clouds(&clouds, false).unwrap();
    out.logits.to_dtype(candle_core::DType::F64).unwrap().to_vec2::<f64>().unwrap()
}
