use osrkd::osr::threshold_predict;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

#[test]
fn raising_the_threshold_never_accepts_more() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let table = random_table(&mut rng, 50, k);
        let truths: Vec<usize> = (0..50).map(|_| rng.random_range(0..k)).collect();
        let mut last_accuracy = f64::INFINITY;
        let mut last_rejected = vec![false; table.len()];
        for &t in &thresholds {
            let mut correct = 0;
            for (i, probs) in table.iter().enumerate() {
                let p = threshold_predict(probs, t).unwrap();
                let rejected = p.predicted_class as usize == k;
                assert!(!(last_rejected[i] && !rejected), "threshold {t} accepted a rejected sample");
                last_rejected[i] = rejected;
                if !rejected {
                    let argmax = probs.iter().enumerate().fold(0, |b, (j, v)| if *v > probs[b] { j } else { b });
                    assert_eq!(p.predicted_class as usize, argmax);
                    correct += usize::from(argmax == truths[i]);
                }
            }
            let accuracy = correct as f64 / table.len() as f64;
            assert!(accuracy <= last_accuracy);
            last_accuracy = accuracy;
        }
    }
}

#[test]
fn threshold_is_strict() {
    assert_eq!(threshold_predict(&[0.5, 0.3, 0.2], 0.5).unwrap().predicted_class, 0);
    assert_eq!(threshold_predict(&[0.49, 0.31, 0.2], 0.5).unwrap().predicted_class, 3);
    assert_eq!(threshold_predict(&[0.6, 0.4], 0.6).unwrap().predicted_class, 0);
}
