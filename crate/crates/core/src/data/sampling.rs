//! Area-weighted surface sampling and cloud normalisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mesh, PointCloud};
use crate::{Error, Result};

fn triangle(mesh: &Mesh, f: &[u32; 3]) -> [[f64; 3]; 3] {
    f.map(|i| mesh.vertices[i as usize])
}

fn area(t: &[[f64; 3]; 3]) -> f64 {
    let u = sub(t[1], t[0]);
    let v = sub(t[2], t[0]);
    let c = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Draws `n_points` surface points, returning the face each one came from.
pub(crate) fn sample_faces(
    mesh: &Mesh,
    n_points: usize,
    rng_seed: u64,
) -> Result<Vec<(usize, [f64; 3])>> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += area(&triangle(mesh, f));
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::ZeroArea);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let out = (0..n_points)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            // first face whose cumulative area exceeds r; zero-area faces are never hit
            let fi = cumulative
                .partition_point(|&c| c <= r)
                .min(mesh.faces.len() - 1);
            let t = triangle(mesh, &mesh.faces[fi]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (a, b, c) = (1.0 - s, s * (1.0 - r2), s * r2);
            let p = [0, 1, 2].map(|d| a * t[0][d] + b * t[1][d] + c * t[2][d]);
            (fi, p)
        })
        .collect();
    Ok(out)
}

/// Uniform surface sampling: faces are picked with probability proportional
/// to their area, then a point is drawn uniformly inside the face.
pub fn sample_point_cloud(mesh: &Mesh, n_points: usize, rng_seed: u64) -> Result<PointCloud> {
    let pts = sample_faces(mesh, n_points, rng_seed)?
        .into_iter()
        .map(|(_, p)| p.map(|c| c as f32))
        .collect();
    PointCloud::new(pts)
}

/// Centres the cloud on its centroid and scales the farthest point to unit
/// distance. A cloud whose points all coincide maps to all zeros.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in pts {
        for d in 0..3 {
            centroid[d] += p[d] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);

    let centred: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| [0, 1, 2].map(|d| p[d] as f64 - centroid[d]))
        .collect();
    let max_norm = centred
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_norm > 1e-12 { 1.0 / max_norm } else { 0.0 };
    let out = centred
        .iter()
        .map(|p| p.map(|c| (c * scale) as f32))
        .collect();
    PointCloud { points: out }
}
