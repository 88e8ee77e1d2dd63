//! Synthetic primitive shapes written as a ModelNet-style OFF tree, used for
//! desk-scale runs where the real dataset is unavailable.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mesh::{to_off, Mesh};
use super::split::mix_seed;
use crate::Result;

pub const KNOWN_SHAPES: [&str; 4] = ["sphere", "cube", "cylinder", "torus"];
pub const OPEN_SHAPES: [&str; 2] = ["cone", "octahedron"];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub open_test_per_class: usize,
    pub seed: u64,
    #[serde(default = "default_tilt")]
    pub max_tilt_deg: f64,
}

fn default_tilt() -> f64 {
    45.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        // 4 known classes × 500 = 2000 training meshes
        Self {
            train_per_class: 500,
            test_per_class: 100,
            open_test_per_class: 100,
            seed: 0,
            max_tilt_deg: default_tilt(),
        }
    }
}

/// Builds a mesh from a `rows × cols` grid of vertices produced by `f(u, v)`
/// with `u, v ∈ [0, 1]`; `wrap_u` closes the grid along u.
fn grid_mesh(rows: usize, cols: usize, wrap_u: bool, f: impl Fn(f64, f64) -> [f64; 3]) -> Mesh {
    let ucount = if wrap_u { cols } else { cols + 1 };
    let mut vertices = Vec::with_capacity(ucount * (rows + 1));
    for r in 0..=rows {
        for c in 0..ucount {
            vertices.push(f(c as f64 / cols as f64, r as f64 / rows as f64));
        }
    }
    let id = |r: usize, c: usize| (r * ucount + c % ucount) as u32;
    let mut faces = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (a, b, cc, d) = (id(r, c), id(r, c + 1), id(r + 1, c + 1), id(r + 1, c));
            faces.push([a, b, cc]);
            faces.push([a, cc, d]);
        }
    }
    Mesh { vertices, faces }
}

fn merge(parts: Vec<Mesh>) -> Mesh {
    let mut out = Mesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for m in parts {
        let base = out.vertices.len() as u32;
        out.vertices.extend(m.vertices);
        out.faces.extend(m.faces.iter().map(|f| f.map(|i| i + base)));
    }
    out
}

fn disc(y: f64, radius: f64, segments: usize) -> Mesh {
    grid_mesh(1, segments, true, |u, v| {
        let r = radius * (1.0 - v);
        [r * (TAU * u).cos(), y, r * (TAU * u).sin()]
    })
}

/// Unit-scale primitive by class name, with shape parameters drawn from `rng`.
pub fn primitive<R: Rng>(name: &str, rng: &mut R) -> Mesh {
    match name {
        "sphere" => grid_mesh(8, 12, true, |u, v| {
            let (th, ph) = (TAU * u, PI * v);
            [ph.sin() * th.cos(), ph.cos(), ph.sin() * th.sin()]
        }),
        "cube" => {
            let vertices = (0..8)
                .map(|i| [0, 1, 2].map(|b| if i >> b & 1 == 1 { 1.0 } else { -1.0 }))
                .collect();
            let quads = [
                [0, 1, 3, 2],
                [4, 6, 7, 5],
                [0, 4, 5, 1],
                [2, 3, 7, 6],
                [0, 2, 6, 4],
                [1, 5, 7, 3],
            ];
            let faces = quads
                .iter()
                .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
                .collect();
            Mesh { vertices, faces }
        }
        "cylinder" => {
            let h = rng.random_range(0.8..1.6);
            merge(vec![
                grid_mesh(1, 16, true, |u, v| {
                    [(TAU * u).cos(), h * (2.0 * v - 1.0), (TAU * u).sin()]
                }),
                disc(h, 1.0, 16),
                disc(-h, 1.0, 16),
            ])
        }
        "torus" => {
            let minor = rng.random_range(0.25..0.45);
            grid_mesh(10, 20, true, move |u, v| {
                let (th, ph) = (TAU * u, TAU * v);
                let r = 1.0 + minor * ph.cos();
                [r * th.cos(), minor * ph.sin(), r * th.sin()]
            })
        }
        "cone" => {
            let h = rng.random_range(1.2..2.0);
            merge(vec![
                grid_mesh(1, 16, true, |u, v| {
                    let r = 1.0 - v;
                    [r * (TAU * u).cos(), h * v, r * (TAU * u).sin()]
                }),
                disc(0.0, 1.0, 16),
            ])
        }
        "octahedron" => Mesh {
            vertices: vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ],
            faces: vec![
                [0, 2, 4],
                [2, 1, 4],
                [1, 3, 4],
                [3, 0, 4],
                [2, 0, 5],
                [1, 2, 5],
                [3, 1, 5],
                [0, 3, 5],
            ],
        },
        other => panic!("unknown primitive {other}"),
    }
}

/// Random instance: primitive, anisotropic scaling in [0.8, 1.2] per axis,
/// a tilt of up to `max_tilt_deg` about the depth axis, then a rotation about
/// the vertical axis.
pub fn random_instance<R: Rng>(name: &str, max_tilt_deg: f64, rng: &mut R) -> Mesh {
    let mut m = primitive(name, rng);
    let s: [f64; 3] = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
    let (sin, cos) = rng.random_range(0.0..TAU).sin_cos();
    let tilt = max_tilt_deg.to_radians();
    let (ts, tc) = if tilt > 0.0 { rng.random_range(-tilt..tilt).sin_cos() } else { (0.0, 1.0) };
    for v in &mut m.vertices {
        let (x, y, z) = (v[0] * s[0], v[1] * s[1], v[2] * s[2]);
        let (x, y) = (tc * x - ts * y, ts * x + tc * y);
        *v = [cos * x + sin * z, y, -sin * x + cos * z];
    }
    m
}

/// Writes `<root>/<shape>/{train,test}/<shape>_NNNN.off` for every known
/// shape and `<root>/<shape>/test/...` for every open shape.
pub fn write_synthetic_dataset(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    let plan = KNOWN_SHAPES
        .iter()
        .flat_map(|&s| [(s, "train", cfg.train_per_class), (s, "test", cfg.test_per_class)])
        .chain(OPEN_SHAPES.iter().map(|&s| (s, "test", cfg.open_test_per_class)));
    for (ci, (shape, part, count)) in plan.enumerate() {
        let dir = root.join(shape).join(part);
        fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ci as u64 + 1));
        for i in 0..count {
            let mesh = random_instance(shape, cfg.max_tilt_deg, &mut rng);
            fs::write(dir.join(format!("{shape}_{i:04}.off")), to_off(&mesh))?;
        }
    }
    Ok(())
}

pub fn known_class_names() -> Vec<String> {
    KNOWN_SHAPES.iter().map(|s| s.to_string()).collect()
}
