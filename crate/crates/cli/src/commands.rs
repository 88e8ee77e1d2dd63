//! The five CLI verbs. Each returns the result record it wrote.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use log::info;
use osrkd::data::synthetic::write_synthetic_dataset;
use osrkd::data::{build_splits, read_cache, write_cache, DatasetSplit, LabeledSample};
use osrkd::eval::{embed_2d, render_reports, threshold_sweep, LatentScatter, OsrMetrics};
use osrkd::models::ModelHandle;
use osrkd::osr::write_prediction_table;
use osrkd::pseudo_open::generate_pseudo_open_set;
use osrkd::trainer::{self, evaluate, extract_features, RunOutput, SweepPoint, TrainReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::Manifest;

/// Options shared by every verb.
#[derive(Debug, Clone)]
pub struct CommandContext {
    pub manifest_path: PathBuf,
    pub force: bool,
}

/// Serialises commands on one output directory.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir).with_context(|| format!("cannot create {}", output_dir.display()))?;
        let path = output_dir.join(".osrkd.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another osrkd command; delete {} if no command is running",
                output_dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot create {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One line of a `*.jsonl` record file. `record` is deterministic given
/// seeds and inputs; the wall-clock time lives only in `timestamp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordLine {
    pub command: String,
    pub record: Value,
    pub timestamp: u64,
}

fn write_record(path: &Path, command: &str, record: Value) -> Result<RecordLine> {
    let line = RecordLine {
        command: command.into(),
        record,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let text = serde_json::to_string(&line)?;
    fs::write(path, format!("{text}\n")).with_context(|| format!("cannot write {}", path.display()))?;
    println!("{text}");
    Ok(line)
}

pub fn read_record(path: &Path) -> Result<RecordLine> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let line = text.lines().next().with_context(|| format!("{} is empty", path.display()))?;
    serde_json::from_str(line).with_context(|| format!("malformed record in {}", path.display()))
}

fn manifest_hint(ctx: &CommandContext) -> String {
    ctx.manifest_path.display().to_string()
}

fn load_split(m: &Manifest, ctx: &CommandContext, with_pseudo_open: bool) -> Result<DatasetSplit> {
    let path = m.split_cache();
    if !path.exists() {
        bail!(
            "dataset cache {} not found; run `osrkd prepare --manifest {}` first",
            path.display(),
            manifest_hint(ctx)
        );
    }
    let mut split = read_cache(&path).with_context(|| format!("cannot load {}", path.display()))?;
    if with_pseudo_open {
        let p = m.pseudo_open_cache();
        if !p.exists() {
            bail!(
                "pseudo-open cache {} not found; enable [mix] and rerun `osrkd prepare --manifest {} --force`",
                p.display(),
                manifest_hint(ctx)
            );
        }
        split.pseudo_open_train = read_cache(&p)?.pseudo_open_train;
    }
    Ok(split)
}

pub fn prepare(m: &Manifest, ctx: &CommandContext) -> Result<RecordLine> {
    let dir = m.cache_dir();
    if m.split_cache().exists() && !ctx.force {
        bail!("dataset cache {} already exists; pass --force to rebuild it", dir.display());
    }
    let root = match &m.dataset.synthetic {
        Some(cfg) => {
            let root = dir.join("meshes");
            if root.exists() {
                fs::remove_dir_all(&root)?;
            }
            write_synthetic_dataset(&root, cfg)?;
            root
        }
        None => {
            let root = m.dataset_root()?;
            if !root.is_dir() {
                bail!("dataset root {} does not exist", root.display());
            }
            root
        }
    };
    let split = build_splits(&root, &m.dataset.known_classes, m.dataset.n_points, m.dataset.seed)
        .with_context(|| format!("cannot build splits from {}", root.display()))?;
    fs::create_dir_all(&dir)?;
    write_cache(&split, &m.split_cache())?;
    let mut pseudo_open = 0;
    if m.mix.enabled {
        let cfg = m.mix.to_config(split.closed_train.len());
        let samples = generate_pseudo_open_set(&split, &cfg)?;
        pseudo_open = samples.len();
        let holder = DatasetSplit {
            pseudo_open_train: samples,
            class_names: split.class_names.clone(),
            ..DatasetSplit::default()
        };
        write_cache(&holder, &m.pseudo_open_cache())?;
    } else if m.pseudo_open_cache().exists() {
        fs::remove_file(m.pseudo_open_cache())?;
    }
    write_record(
        &dir.join("prepare.jsonl"),
        "prepare",
        json!({
            "dataset": m.dataset.name,
            "class_names": split.class_names,
            "n_points": m.dataset.n_points,
            "closed_train": split.closed_train.len(),
            "closed_test": split.closed_test.len(),
            "open_test": split.open_test.len(),
            "pseudo_open_train": pseudo_open,
        }),
    )
}

fn teacher_checkpoint(m: &Manifest) -> Result<Option<PathBuf>> {
    if !m.train.regime.needs_teacher() {
        return Ok(None);
    }
    let path = match (&m.train.teacher_checkpoint, &m.teacher_run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => m.runs_dir().join(run).join("checkpoint.safetensors"),
        (None, None) => bail!(
            "regime {} distils from a teacher; set teacher_run or train.teacher_checkpoint in the manifest",
            m.train.regime
        ),
    };
    if !path.exists() {
        bail!(
            "teacher checkpoint {} not found; train the teacher first with `osrkd train` on its manifest",
            path.display()
        );
    }
    Ok(Some(path))
}

fn train_run(m: &Manifest, ctx: &CommandContext, run_name: &str, sweep: Option<SweepPoint>) -> Result<(TrainReport, RecordLine)> {
    let run_dir = m.runs_dir().join(run_name);
    let record_path = run_dir.join("train.jsonl");
    if record_path.exists() && !ctx.force {
        bail!("run {} already exists in {}; pass --force to overwrite it", run_name, run_dir.display());
    }
    let split = load_split(m, ctx, m.train.regime.is_openset())?;
    let mut cfg = m.train.clone();
    cfg.teacher_checkpoint = teacher_checkpoint(m)?;
    info!("training {run_name} ({})", cfg.regime);
    let outcome = trainer::train(
        &cfg,
        &split,
        Some(&RunOutput {
            dir: run_dir.clone(),
            name: run_name.to_string(),
        }),
    )?;
    let mut report = outcome.report;
    report.sweep = sweep;
    let line = write_record(&record_path, "train", serde_json::to_value(&report)?)?;
    Ok((report, line))
}

pub fn train(m: &Manifest, ctx: &CommandContext) -> Result<RecordLine> {
    Ok(train_run(m, ctx, &m.run_name(), None)?.1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub regime: String,
    pub seed: u64,
    pub threshold: f64,
    pub closed_accuracy: f64,
    pub osr_metrics: Option<OsrMetrics>,
    pub threshold_sweep: Vec<(f64, OsrMetrics)>,
    pub predictions: PathBuf,
}

pub fn eval(m: &Manifest, ctx: &CommandContext) -> Result<RecordLine> {
    let run_name = m.run_name();
    let run_dir = m.runs_dir().join(&run_name);
    let ckpt = run_dir.join("checkpoint.safetensors");
    if !ckpt.exists() {
        bail!(
            "checkpoint {} not found; run `osrkd train --manifest {}` first",
            ckpt.display(),
            manifest_hint(ctx)
        );
    }
    let (model, meta) = ModelHandle::load(&ckpt)?;
    let split = load_split(m, ctx, m.eval.latent)?;
    let k = split.k() as usize;
    let ev = evaluate(&model, &split, m.eval.threshold)?;
    let predictions = run_dir.join("predictions.csv");
    write_prediction_table(&predictions, &ev.predictions)?;

    let sweep = if m.eval.sweep_thresholds.is_empty() || model.num_classes() != k {
        Vec::new()
    } else {
        let truths: Vec<u32> = ev.predictions.iter().map(|p| p.true_label).collect();
        threshold_sweep(&ev.probabilities, &truths, &m.eval.sweep_thresholds)?
    };

    if m.eval.latent {
        let latent = latent_scatter(&model, &split, &run_name, m.eval.latent_max_samples, m.train.rng_seed)?;
        let points: Vec<Value> = latent.points.iter().map(|p| json!(p)).collect();
        fs::write(
            run_dir.join("latent.json"),
            serde_json::to_string(&json!({"name": latent.name, "points": points, "labels": latent.labels}))?,
        )?;
    }

    let rec = EvalRecord {
        name: run_name,
        regime: meta.regime,
        seed: model.seed(),
        threshold: m.eval.threshold,
        closed_accuracy: ev.closed_accuracy,
        osr_metrics: ev.osr_metrics,
        threshold_sweep: sweep,
        predictions,
    };
    write_record(&run_dir.join("eval.jsonl"), "eval", serde_json::to_value(rec)?)
}

/// t-SNE of penultimate features over closed test, open test and pseudo-open
/// samples (the last two labelled `k`), evenly subsampled to `max`.
fn latent_scatter(model: &ModelHandle, split: &DatasetSplit, name: &str, max: usize, seed: u64) -> Result<LatentScatter> {
    let pool: Vec<&LabeledSample> = split.test_samples().chain(&split.pseudo_open_train).collect();
    let stride = pool.len().div_ceil(max.max(2)).max(1);
    let chosen: Vec<&LabeledSample> = pool.into_iter().step_by(stride).collect();
    let features = extract_features(model, &chosen)?;
    Ok(LatentScatter {
        name: name.to_string(),
        points: embed_2d(&features, seed)?,
        labels: chosen.iter().map(|s| s.label).collect(),
    })
}

pub fn sweep(m: &Manifest, ctx: &CommandContext, parameter: Option<&str>, values: Option<&[f64]>) -> Result<Vec<RecordLine>> {
    let (parameter, values) = match (parameter, values, &m.sweep) {
        (Some(p), Some(v), _) => (p.to_string(), v.to_vec()),
        (p, v, Some(s)) => (p.unwrap_or(&s.parameter).to_string(), v.map_or(s.values.clone(), <[f64]>::to_vec)),
        _ => bail!("no sweep given: add a [sweep] section to the manifest or pass --parameter and --values"),
    };
    if values.is_empty() {
        bail!("sweep over {parameter} has no values");
    }
    let mut reports = Vec::new();
    let mut lines = Vec::new();
    for &v in &values {
        let mut run = m.clone();
        run.train.set_param(&parameter, v)?;
        let name = format!("{}_{}_{}_seed{}", m.name, parameter, v, run.train.rng_seed);
        let (report, line) = train_run(
            &run,
            ctx,
            &name,
            Some(SweepPoint {
                parameter: parameter.clone(),
                value: v,
            }),
        )?;
        reports.push(report);
        lines.push(line);
    }
    let dir = m.output_dir.join("sweeps").join(&m.name);
    for p in render_reports(&reports, &[], &dir)? {
        info!("wrote {}", p.display());
    }
    Ok(lines)
}

pub fn report(m: &Manifest) -> Result<Vec<PathBuf>> {
    let runs_dir = m.runs_dir();
    let mut entries: Vec<PathBuf> = match fs::read_dir(&runs_dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => Vec::new(),
    };
    entries.sort();
    let mut runs = Vec::new();
    let mut latents = Vec::new();
    for dir in entries {
        let rec = dir.join("train.jsonl");
        if rec.exists() {
            let line = read_record(&rec)?;
            runs.push(serde_json::from_value::<TrainReport>(line.record).with_context(|| format!("malformed {}", rec.display()))?);
        }
        let lat = dir.join("latent.json");
        if lat.exists() {
            let v: Value = serde_json::from_str(&fs::read_to_string(&lat)?)?;
            latents.push(LatentScatter {
                name: v["name"].as_str().unwrap_or_default().to_string(),
                points: serde_json::from_value(v["points"].clone())?,
                labels: serde_json::from_value(v["labels"].clone())?,
            });
        }
    }
    if runs.is_empty() {
        bail!("no train records under {}; run `osrkd train` first", runs_dir.display());
    }
    let files = render_reports(&runs, &latents, &m.output_dir.join("report"))?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(files)
}
