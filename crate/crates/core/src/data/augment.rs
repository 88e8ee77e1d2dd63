//! Train-time augmentation: random rotation about the vertical (y) axis and
//! clipped Gaussian jitter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub rotate: bool,
    pub jitter_sigma: f32,
    pub jitter_clip: f32,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            rotate: true,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl Augmentation {
    /// Augments one cloud stored as row-major `n × 3` coordinates, in place.
    pub fn apply<R: Rng>(&self, xyz: &mut [f32], rng: &mut R) {
        if self.rotate {
            let theta = rng.random::<f32>() * std::f32::consts::TAU;
            let (s, c) = theta.sin_cos();
            for p in xyz.chunks_exact_mut(3) {
                let (x, z) = (p[0], p[2]);
                p[0] = c * x + s * z;
                p[2] = -s * x + c * z;
            }
        }
        if self.jitter_sigma > 0.0 {
            let normal = Normal::new(0.0, self.jitter_sigma).expect("finite sigma");
            for v in xyz.iter_mut() {
                let j: f32 = normal.sample(rng);
                *v += j.clamp(-self.jitter_clip, self.jitter_clip);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rotation_preserves_height_and_radius() {
        let aug = Augmentation {
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let orig = [1.0f32, 2.0, 0.5, -0.3, -1.0, 0.8];
        let mut xyz = orig;
        aug.apply(&mut xyz, &mut rng);
        for (p, q) in orig.chunks(3).zip(xyz.chunks(3)) {
            assert_eq!(p[1], q[1]);
            let r = |v: &[f32]| (v[0] * v[0] + v[2] * v[2]).sqrt();
            assert!((r(p) - r(q)).abs() < 1e-5);
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let aug = Augmentation {
            rotate: false,
            jitter_sigma: 1.0,
            jitter_clip: 0.05,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut xyz = vec![0.0f32; 3000];
        aug.apply(&mut xyz, &mut rng);
        assert!(xyz.iter().all(|v| v.abs() <= 0.05));
    }
}
