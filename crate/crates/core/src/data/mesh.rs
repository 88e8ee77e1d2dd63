//! OFF mesh parsing.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Triangle mesh with polygon faces fanned into triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

pub fn parse_mesh_file(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    parse_off(&text, path)
}

/// Parses OFF text. `path` is only used in error messages.
///
/// Accepts the ModelNet quirk where the counts follow the `OFF` keyword on
/// the same line (`OFF490 312 0`).
pub fn parse_off(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    // (1-based line number, trimmed content) with comments and blanks dropped
    let mut lines = text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    });

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(hline, format!("expected OFF header, found {header:?}")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| err(hline + 1, "missing vertex/face counts".into()))?
    } else {
        (hline, rest)
    };

    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| err(cline, format!("invalid count {t:?}")))
        })
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(err(cline, "expected vertex and face counts".into()));
    }
    let (n_vertices, n_faces) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(0, format!("file ends after {} of {n_vertices} vertices", vertices.len())))?;
        let mut v = [0.0f64; 3];
        let mut toks = l.split_whitespace();
        for c in &mut v {
            let t = toks
                .next()
                .ok_or_else(|| err(ln, "vertex needs three coordinates".into()))?;
            *c = t
                .parse()
                .map_err(|_| err(ln, format!("invalid coordinate {t:?}")))?;
            if !c.is_finite() {
                return Err(err(ln, format!("non-finite coordinate {t:?}")));
            }
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(n_faces);
    for f in 0..n_faces {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(0, format!("file ends after {f} of {n_faces} faces")))?;
        let mut toks = l.split_whitespace();
        let arity: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(ln, "invalid face vertex count".into()))?;
        if arity < 3 {
            return Err(err(ln, format!("face has {arity} vertices, need at least 3")));
        }
        let idx: Vec<u32> = (0..arity)
            .map(|_| {
                let t = toks
                    .next()
                    .ok_or_else(|| err(ln, format!("face declares {arity} vertices")))?;
                let i: u32 = t
                    .parse()
                    .map_err(|_| err(ln, format!("invalid vertex index {t:?}")))?;
                if i as usize >= n_vertices {
                    return Err(err(
                        ln,
                        format!("vertex index {i} out of range for {n_vertices} vertices"),
                    ));
                }
                Ok(i)
            })
            .collect::<Result<_>>()?;
        // trailing tokens (per-face colours) are ignored
        for w in idx[1..].windows(2) {
            faces.push([idx[0], w[0], w[1]]);
        }
    }

    Ok(Mesh { vertices, faces })
}

/// Serialises a triangle mesh as OFF text.
pub fn to_off(mesh: &Mesh) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(32 * (mesh.vertices.len() + mesh.faces.len()));
    writeln!(s, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len()).unwrap();
    for v in &mesh.vertices {
        writeln!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}
