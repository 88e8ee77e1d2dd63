//! Helpers shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use osrkd::losses::{CrdBatch, CrdHead, CrdMemory, Negatives};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest of the vector-norm relative error and the per-component relative
/// error (components below 1e-3 are compared against 1e-3).
pub fn grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3))
        .fold(diff / scale, f64::max)
}

pub fn grad_of(loss: &Tensor, var: &Var) -> Vec<f64> {
    let g = loss.backward().unwrap();
    g.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Four samples, six bank rows, two negatives each, 3-D embeddings.
pub struct CrdToy {
    pub head: CrdHead,
    pub memory: CrdMemory,
    pub indices: Vec<u32>,
    pub negatives: Negatives,
    pub teacher: Tensor,
}

impl CrdToy {
    pub fn new(b: usize, feat: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let memory = CrdMemory::new(6, 3, 2, 0.5, 4).unwrap();
        let indices: Vec<u32> = (0..b as u32).collect();
        let negatives = memory.sample_negatives(&indices, &mut rng).unwrap();
        Self {
            head: CrdHead::new(feat, feat + 1, 3, 2, DType::F64).unwrap(),
            memory,
            indices,
            negatives,
            teacher: tensor(&random(&mut rng, b * (feat + 1)), &[b, feat + 1]),
        }
    }

    pub fn batch(&self) -> CrdBatch<'_> {
        CrdBatch {
            head: &self.head,
            memory: &self.memory,
            indices: &self.indices,
            negatives: &self.negatives,
        }
    }
}
