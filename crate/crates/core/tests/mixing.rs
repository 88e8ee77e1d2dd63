use osrkd::data::{LabeledSample, PointCloud, Provenance};
use osrkd::pseudo_open::mix_clouds;

fn source(label: u32, n0: usize) -> LabeledSample {
    let points = (0..n0).map(|i| [label as f32, i as f32, 0.0]).collect();
    LabeledSample {
        id: format!("s{label}"),
        cloud: PointCloud::new(points).unwrap(),
        label,
        provenance: Provenance::Real,
    }
}

fn sorted(points: impl Iterator<Item = [f32; 3]>) -> Vec<[u32; 3]> {
    let mut v: Vec<[u32; 3]> = points.map(|p| p.map(f32::to_bits)).collect();
    v.sort_unstable();
    v
}

#[test]
fn mixing_conserves_the_point_multiset() {
    for n in 2..=4u32 {
        let sources: Vec<LabeledSample> = (0..n).map(|l| source(l, 16)).collect();
        let refs: Vec<&LabeledSample> = sources.iter().collect();
        let out = mix_clouds(&refs, 10, 42).unwrap();
        assert_eq!(out.len(), n as usize);
        assert!(out.iter().all(|s| s.cloud.len() == 16 && s.label == 10 && s.provenance == Provenance::PseudoOpen));
        let before = sorted(sources.iter().flat_map(|s| s.cloud.points().iter().copied()));
        let after = sorted(out.iter().flat_map(|s| s.cloud.points().iter().copied()));
        assert_eq!(before, after);
        assert_eq!(out, mix_clouds(&refs, 10, 42).unwrap());
    }
}

/// Two 4-point sources shuffled into two chunks: a chunk drawn from one
/// source only has probability 2 / C(8, 4) = 1/35.
#[test]
fn single_source_chunk_probability() {
    let sources = [source(0, 4), source(1, 4)];
    let refs: Vec<&LabeledSample> = sources.iter().collect();
    let trials = 10_000u64;
    let hits = (0..trials)
        .filter(|&seed| {
            let out = mix_clouds(&refs, 2, seed).unwrap();
            let first = out[0].cloud.points()[0][0];
            out[0].cloud.points().iter().all(|p| p[0] == first)
        })
        .count() as f64;
    let p = 1.0 / 35.0;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let observed = hits / trials as f64;
    assert!((observed - p).abs() <= 3.0 * sigma, "observed {observed}, expected {p} ± {}", 3.0 * sigma);
}
