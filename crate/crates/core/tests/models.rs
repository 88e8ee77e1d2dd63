use candle_core::{DType, Device, Tensor};
use osrkd::losses::cross_entropy;
use osrkd::models::{build_model, build_model_with, Arch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Vec<f64> {
    (0..b * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn parameter_counts_for_ten_classes() {
    assert_eq!(build_model(Arch::Teacher, 10, 0).unwrap().parameter_count(), 3_463_763);
    assert_eq!(build_model(Arch::Student, 10, 0).unwrap().parameter_count(), 666_378);
}

#[test]
fn eval_forward_is_invariant_to_point_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, n) = (3, 24);
    let x = cloud(&mut rng, b, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let permuted: Vec<f64> = (0..b)
        .flat_map(|i| perm.iter().flat_map(move |&j| (0..3).map(move |c| (i, j, c))))
        .map(|(i, j, c)| x[(i * n + j) * 3 + c])
        .collect();
    for arch in [Arch::Teacher, Arch::Student] {
        let model = build_model_with(arch, 5, 1, DType::F64).unwrap();
        let run = |v: &[f64]| {
            let t = Tensor::from_vec(v.to_vec(), (b, n, 3), &Device::Cpu).unwrap();
            model.forward(&t, false).unwrap().logits.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let (a, c) = (run(&x), run(&permuted));
        for (p, q) in a.iter().zip(&c) {
            assert!((p - q).abs() < 1e-9, "{arch:?}: {p} vs {q}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, n) = (4, 16);
    let x = Tensor::from_vec(cloud(&mut rng, b, n), (b, n, 3), &Device::Cpu).unwrap();
    for arch in [Arch::Teacher, Arch::Student] {
        let model = build_model_with(arch, 4, 3, DType::F64).unwrap();
        let out = model.forward(&x, true).unwrap();
        let loss = cross_entropy(&out.logits, &[0, 1, 2, 3]).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in model.named_parameters() {
            let norm = grads
                .get(var)
                .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
                .unwrap_or(0.0);
            assert!(norm.is_finite(), "{arch:?} {name}");
            // Biases feeding batch norm cancel out of the normalised output.
            let feeds_bn = name.ends_with(".bias") && !name.contains(".bn") && !name.contains("fc3");
            // A T-Net's last layer starts at zero, so only it moves first.
            let frozen_tnet = (name.starts_with("stn.") || name.starts_with("fstn.")) && !name.contains("fc3");
            if !feeds_bn && !frozen_tnet {
                assert!(norm > 0.0, "{arch:?} {name} has zero gradient");
            }
        }
    }
}
