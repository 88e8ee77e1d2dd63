//! Closed/open split construction over a ModelNet-style directory tree
//! (`<root>/<class>/{train,test}/*.off`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use super::{mesh, normalize_cloud, sample_point_cloud, DatasetSplit, LabeledSample, Provenance};
use crate::{Error, Result};

/// splitmix64 finaliser, used to derive independent per-file seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn off_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("off"))
        })
        .collect();
    files.sort();
    Ok(files)
}

struct Job {
    path: PathBuf,
    id: String,
    label: u32,
    provenance: Provenance,
    seed: u64,
}

fn load(job: &Job, n_points: usize) -> Result<LabeledSample> {
    let mesh = mesh::parse_mesh_file(&job.path)?;
    let cloud = sample_point_cloud(&mesh, n_points, job.seed).map_err(|e| match e {
        Error::ZeroArea => Error::invalid(format!("{}: mesh has zero surface area", job.path.display())),
        e => e,
    })?;
    Ok(LabeledSample {
        id: job.id.clone(),
        cloud: normalize_cloud(&cloud),
        label: job.label,
        provenance: job.provenance,
    })
}

/// Builds the closed/open split: `known_class_names` (in order) become labels
/// `0..k`, every other class directory under `dataset_root` contributes its
/// test meshes to `open_test` with label `k`.
pub fn build_splits(
    dataset_root: &Path,
    known_class_names: &[String],
    n_points: usize,
    rng_seed: u64,
) -> Result<DatasetSplit> {
    if !dataset_root.is_dir() {
        return Err(Error::MissingClass(dataset_root.to_path_buf()));
    }
    if known_class_names.is_empty() {
        return Err(Error::invalid("at least one known class is required"));
    }
    let k = known_class_names.len() as u32;
    let known: BTreeSet<&str> = known_class_names.iter().map(String::as_str).collect();
    if known.len() != known_class_names.len() {
        return Err(Error::invalid("duplicate known class names"));
    }

    let mut all_classes: Vec<String> = fs::read_dir(dataset_root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    all_classes.sort();

    let mut jobs: [Vec<Job>; 3] = Default::default();
    let mut empty = Vec::new();
    let mut salt = 0u64;
    let mut push = |dst: &mut Vec<Job>, class: &str, part: &str, path: PathBuf, label, prov| {
        let id = format!(
            "{class}/{part}/{}",
            path.file_name().unwrap_or_default().to_string_lossy()
        );
        salt += 1;
        dst.push(Job {
            path,
            id,
            label,
            provenance: prov,
            seed: mix_seed(rng_seed, salt),
        });
    };

    for (label, class) in known_class_names.iter().enumerate() {
        let dir = dataset_root.join(class);
        if !dir.is_dir() {
            return Err(Error::MissingClass(dir));
        }
        let train = off_files(&dir.join("train"))?;
        let test = off_files(&dir.join("test"))?;
        if train.is_empty() || test.is_empty() {
            empty.push(class.clone());
        }
        for p in train {
            push(&mut jobs[0], class, "train", p, label as u32, Provenance::Real);
        }
        for p in test {
            push(&mut jobs[1], class, "test", p, label as u32, Provenance::Real);
        }
    }
    for class in all_classes.iter().filter(|c| !known.contains(c.as_str())) {
        let test = off_files(&dataset_root.join(class).join("test"))?;
        if test.is_empty() {
            empty.push(class.clone());
        }
        for p in test {
            push(&mut jobs[2], class, "test", p, k, Provenance::OpenTest);
        }
    }
    if !empty.is_empty() {
        return Err(Error::EmptyClasses(empty));
    }

    let [train, test, open] = jobs.map(|js| {
        js.par_iter()
            .map(|j| load(j, n_points))
            .collect::<Result<Vec<_>>>()
    });
    let split = DatasetSplit {
        closed_train: train?,
        closed_test: test?,
        open_test: open?,
        pseudo_open_train: Vec::new(),
        class_names: known_class_names.to_vec(),
    };
    info!(
        "split: {} closed train, {} closed test, {} open test",
        split.closed_train.len(),
        split.closed_test.len(),
        split.open_test.len()
    );
    Ok(split)
}
