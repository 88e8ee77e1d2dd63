//! Pseudo-open-set synthesis.
//!
//! `n` clouds from pairwise-distinct known classes are stacked, their points
//! shuffled, and the shuffled stack is cut into `n` equal chunks. Each chunk
//! becomes a training sample of the unknown class `k`.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_cloud, DatasetSplit, LabeledSample, PointCloud, Provenance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Mixing order `n` → number of samples to generate for that order.
    /// Orders are processed in ascending order.
    pub counts_per_order: BTreeMap<usize, usize>,
    pub rng_seed: u64,
    /// Re-centre and re-scale mixed clouds to the unit sphere.
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_true() -> bool {
    true
}

impl MixConfig {
    /// Orders {2, 3, 4} with `ceil(closed_train_size / 9)` samples each, so
    /// the unknown class is about as large as a known one on ModelNet10.
    pub fn default_for(closed_train_size: usize, rng_seed: u64) -> Self {
        let per_order = closed_train_size.div_ceil(9);
        Self {
            counts_per_order: [2, 3, 4].into_iter().map(|n| (n, per_order)).collect(),
            rng_seed,
            renormalize: true,
        }
    }

    pub fn total(&self) -> usize {
        self.counts_per_order.values().sum()
    }

    pub fn validate(&self, k: u32) -> Result<()> {
        for &n in self.counts_per_order.keys() {
            if n < 2 || n > k as usize {
                return Err(Error::config(format!(
                    "mix order {n} must lie in 2..={k}"
                )));
            }
        }
        Ok(())
    }
}

/// Mixes `sources` (pairwise-distinct labels, equal point counts) into
/// `sources.len()` new samples labelled `unknown_label`. Points are moved,
/// never altered: the output point multiset equals the input multiset.
pub fn mix_clouds(
    sources: &[&LabeledSample],
    unknown_label: u32,
    rng_seed: u64,
) -> Result<Vec<LabeledSample>> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::invalid("mixing needs at least two source clouds"));
    }
    let n0 = sources[0].cloud.len();
    for (i, s) in sources.iter().enumerate() {
        if s.cloud.len() != n0 {
            return Err(Error::invalid(format!(
                "source {i} has {} points, expected {n0}",
                s.cloud.len()
            )));
        }
        if s.label >= unknown_label {
            return Err(Error::invalid(format!(
                "source {i} has label {} which is not a known class",
                s.label
            )));
        }
        if sources[..i].iter().any(|o| o.label == s.label) {
            return Err(Error::invalid(format!(
                "duplicate source label {}",
                s.label
            )));
        }
    }

    let mut stacked: Vec<[f32; 3]> = sources
        .iter()
        .flat_map(|s| s.cloud.points().iter().copied())
        .collect();
    stacked.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));

    stacked
        .chunks_exact(n0)
        .enumerate()
        .map(|(i, chunk)| {
            Ok(LabeledSample {
                id: format!("mix{n}/{rng_seed:016x}/{i}"),
                cloud: PointCloud::new(chunk.to_vec())?,
                label: unknown_label,
                provenance: Provenance::PseudoOpen,
            })
        })
        .collect()
}

/// Generates `Σ N_n` pseudo-open samples from `split.closed_train`.
pub fn generate_pseudo_open_set(split: &DatasetSplit, cfg: &MixConfig) -> Result<Vec<LabeledSample>> {
    let k = split.k();
    cfg.validate(k)?;

    let mut by_class: Vec<Vec<&LabeledSample>> = vec![Vec::new(); k as usize];
    for s in &split.closed_train {
        by_class
            .get_mut(s.label as usize)
            .ok_or_else(|| Error::invalid(format!("closed sample {} has label {}", s.id, s.label)))?
            .push(s);
    }
    let populated: Vec<usize> = (0..k as usize).filter(|&c| !by_class[c].is_empty()).collect();

    let mut out = Vec::with_capacity(cfg.total());
    for (&n, &count) in &cfg.counts_per_order {
        if count == 0 {
            continue;
        }
        if populated.len() < n {
            return Err(Error::invalid(format!(
                "mix order {n} needs {n} populated classes, closed_train has {}",
                populated.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(n as u64));
        let mut made = 0;
        while made < count {
            let classes: Vec<usize> = populated.choose_multiple(&mut rng, n).copied().collect();
            let sources: Vec<&LabeledSample> = classes
                .iter()
                .map(|&c| *by_class[c].choose(&mut rng).expect("populated class"))
                .collect();
            let mixed = mix_clouds(&sources, k, rng.random())?;
            for mut s in mixed.into_iter().take(count - made) {
                s.id = format!("pseudo/n{n}/{made:06}");
                if cfg.renormalize {
                    s.cloud = normalize_cloud(&s.cloud);
                }
                out.push(s);
                made += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: u32, pts: Vec<[f32; 3]>) -> LabeledSample {
        LabeledSample {
            id: format!("s{label}"),
            cloud: PointCloud::new(pts).unwrap(),
            label,
            provenance: Provenance::Real,
        }
    }

    fn distinct_cloud(label: u32, n: usize) -> LabeledSample {
        sample(
            label,
            (0..n).map(|i| [label as f32 * 100.0 + i as f32, 0.5, -(i as f32)]).collect(),
        )
    }

    fn sorted_bits(samples: &[&LabeledSample]) -> Vec<[u32; 3]> {
        let mut v: Vec<[u32; 3]> = samples
            .iter()
            .flat_map(|s| s.cloud.points().iter().map(|p| p.map(f32::to_bits)))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn conserves_points() {
        let a = distinct_cloud(0, 4);
        let b = distinct_cloud(1, 4);
        let out = mix_clouds(&[&a, &b], 2, 9).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.cloud.len() == 4 && s.label == 2 && s.provenance == Provenance::PseudoOpen));
        let outs: Vec<&LabeledSample> = out.iter().collect();
        assert_eq!(sorted_bits(&outs), sorted_bits(&[&a, &b]));
    }

    #[test]
    fn order_four_preserves_size() {
        let srcs: Vec<LabeledSample> = (0..4).map(|l| distinct_cloud(l, 1024)).collect();
        let refs: Vec<&LabeledSample> = srcs.iter().collect();
        let out = mix_clouds(&refs, 10, 1).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| s.cloud.len() == 1024));
    }

    #[test]
    fn rejects_bad_sources() {
        let a = distinct_cloud(0, 4);
        let a2 = distinct_cloud(0, 4);
        let short = distinct_cloud(1, 3);
        assert!(mix_clouds(&[&a, &a2], 2, 0).is_err());
        assert!(mix_clouds(&[&a, &short], 2, 0).is_err());
        assert!(mix_clouds(&[&a], 2, 0).is_err());
    }

    fn toy_split(k: u32, per_class: usize) -> DatasetSplit {
        DatasetSplit {
            closed_train: (0..k)
                .flat_map(|l| (0..per_class).map(move |_| l))
                .map(|l| distinct_cloud(l, 8))
                .collect(),
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn count_contract_and_determinism() {
        let split = toy_split(4, 3);
        let cfg = MixConfig {
            counts_per_order: [(2, 10), (3, 0), (4, 0)].into_iter().collect(),
            rng_seed: 5,
            renormalize: true,
        };
        let a = generate_pseudo_open_set(&split, &cfg).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|s| s.label == 4 && s.cloud.len() == 8));
        assert_eq!(a, generate_pseudo_open_set(&split, &cfg).unwrap());

        let d = MixConfig::default_for(split.closed_train.len(), 1);
        assert_eq!(generate_pseudo_open_set(&split, &d).unwrap().len(), d.total());
    }

    #[test]
    fn default_counts_for_modelnet10() {
        let d = MixConfig::default_for(3991, 0);
        assert_eq!(d.counts_per_order.values().copied().collect::<Vec<_>>(), vec![444, 444, 444]);
        assert_eq!(d.total(), 1332);
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let split = toy_split(3, 2);
        let cfg = MixConfig {
            counts_per_order: [(4, 1)].into_iter().collect(),
            rng_seed: 0,
            renormalize: false,
        };
        assert!(generate_pseudo_open_set(&split, &cfg).is_err());
        let mut sparse = toy_split(4, 1);
        sparse.closed_train.retain(|s| s.label < 2);
        let cfg = MixConfig {
            counts_per_order: [(3, 1)].into_iter().collect(),
            rng_seed: 0,
            renormalize: false,
        };
        assert!(generate_pseudo_open_set(&sparse, &cfg).is_err());
    }
}
