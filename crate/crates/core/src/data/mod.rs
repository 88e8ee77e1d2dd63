//! Point-cloud datasets: mesh parsing, surface sampling, closed/open splits.

pub mod augment;
pub mod cache;
pub mod mesh;
pub mod sampling;
pub mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use cache::{read_cache, write_cache};
pub use mesh::{parse_mesh_file, parse_off, Mesh};
pub use sampling::{normalize_cloud, sample_point_cloud};
pub use split::build_splits;

/// Default number of points per cloud.
pub const DEFAULT_POINTS: usize = 1024;

/// A fixed-size set of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<[f32; 3]> {
        self.points
    }

    /// Row-major `len × 3` coordinates.
    pub fn flat(&self) -> impl Iterator<Item = f32> + '_ {
        self.points.iter().flat_map(|p| p.iter().copied())
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    PseudoOpen,
    OpenTest,
}

impl Provenance {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Provenance::Real => 0,
            Provenance::PseudoOpen => 1,
            Provenance::OpenTest => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Provenance::Real),
            1 => Some(Provenance::PseudoOpen),
            2 => Some(Provenance::OpenTest),
            _ => None,
        }
    }

    pub fn is_open(self) -> bool {
        !matches!(self, Provenance::Real)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Stable identifier, e.g. the mesh path relative to the dataset root.
    pub id: String,
    pub cloud: PointCloud,
    pub label: u32,
    pub provenance: Provenance,
}

impl LabeledSample {
    /// Checks the label/provenance contract against `k` known classes.
    pub fn validate(&self, k: u32) -> Result<()> {
        if self.label > k {
            return Err(Error::invalid(format!(
                "sample {} has label {} outside 0..={k}",
                self.id, self.label
            )));
        }
        if (self.label == k) != self.provenance.is_open() {
            return Err(Error::invalid(format!(
                "sample {} has label {} inconsistent with provenance {:?}",
                self.id, self.label, self.provenance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub closed_train: Vec<LabeledSample>,
    pub closed_test: Vec<LabeledSample>,
    pub open_test: Vec<LabeledSample>,
    pub pseudo_open_train: Vec<LabeledSample>,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    /// Number of known classes.
    pub fn k(&self) -> u32 {
        self.class_names.len() as u32
    }

    /// Point count shared by every cloud, if the split is non-empty.
    pub fn n_points(&self) -> Option<usize> {
        self.all_samples().next().map(|s| s.cloud.len())
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &LabeledSample> {
        self.closed_train
            .iter()
            .chain(&self.closed_test)
            .chain(&self.open_test)
            .chain(&self.pseudo_open_train)
    }

    /// Closed test followed by open test, the evaluation order used everywhere.
    pub fn test_samples(&self) -> impl Iterator<Item = &LabeledSample> {
        self.closed_test.iter().chain(&self.open_test)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let n = self.n_points();
        for s in self.all_samples() {
            s.validate(k)?;
            if Some(s.cloud.len()) != n {
                return Err(Error::invalid(format!(
                    "sample {} has {} points, expected {:?}",
                    s.id,
                    s.cloud.len(),
                    n
                )));
            }
        }
        for (name, part, want_open) in [
            ("closed_train", &self.closed_train, false),
            ("closed_test", &self.closed_test, false),
            ("open_test", &self.open_test, true),
            ("pseudo_open_train", &self.pseudo_open_train, true),
        ] {
            if let Some(s) = part.iter().find(|s| (s.label == k) != want_open) {
                return Err(Error::invalid(format!(
                    "{name} contains sample {} with label {}",
                    s.id, s.label
                )));
            }
        }
        let train_ids: std::collections::HashSet<&str> = self
            .closed_train
            .iter()
            .chain(&self.pseudo_open_train)
            .map(|s| s.id.as_str())
            .collect();
        if let Some(s) = self.test_samples().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::invalid(format!(
                "sample {} appears in both train and test partitions",
                s.id
            )));
        }
        Ok(())
    }
}
