//! Open-set prediction.
//!
//! A `k`-way classifier rejects an input (predicts class `k`) when its
//! largest softmax probability is strictly below a threshold; a `(k+1)`-way
//! classifier predicts the unknown class directly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Threshold,
    NativeKPlus1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrPrediction {
    pub predicted_class: u32,
    pub max_prob: f64,
    pub mode: PredictionMode,
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if probs.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// First index of the maximum.
fn argmax(probs: &[f64]) -> (usize, f64) {
    probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// `probs` has one entry per known class; the unknown class is `probs.len()`.
pub fn threshold_predict(probs: &[f64], threshold: f64) -> Result<OsrPrediction> {
    check_probs(probs)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let (i, max_prob) = argmax(probs);
    let predicted_class = if max_prob < threshold { probs.len() } else { i } as u32;
    Ok(OsrPrediction {
        predicted_class,
        max_prob,
        mode: PredictionMode::Threshold,
    })
}

/// `probs` has `k + 1` entries, the last being the unknown class.
pub fn native_predict(probs: &[f64]) -> Result<OsrPrediction> {
    check_probs(probs)?;
    if probs.len() < 2 {
        return Err(Error::invalid("native prediction needs at least one known class plus unknown"));
    }
    let (i, max_prob) = argmax(probs);
    Ok(OsrPrediction {
        predicted_class: i as u32,
        max_prob,
        mode: PredictionMode::NativeKPlus1,
    })
}

/// Predicts with the rule matching the width of `probs` relative to `k`.
pub fn predict(probs: &[f64], k: usize, threshold: f64) -> Result<OsrPrediction> {
    match probs.len() {
        n if n == k => threshold_predict(probs, threshold),
        n if n == k + 1 => native_predict(probs),
        n => Err(Error::Shape(format!("{n} probabilities for {k} known classes"))),
    }
}

/// One row of a batch prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub true_label: u32,
    pub predicted_class: u32,
    pub max_prob: f64,
}

pub fn write_prediction_table(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prediction_table(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
