use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use osrkd_cli::commands::read_record;
use osrkd_cli::manifest::Manifest;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_osrkd");

fn manifest(dir: &Path, name: &str, regime: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"name = "{name}"
output_dir = "{out}"
teacher_run = "teacher_seed0"

[dataset]
name = "tiny"
known_classes = ["sphere", "cube", "cylinder", "torus"]
n_points = 16
seed = 3

[dataset.synthetic]
train_per_class = 6
test_per_class = 3
open_test_per_class = 3
seed = 5

[mix]
per_order = 2

[train]
regime = "{regime}"
epochs = 1
batch_size = 8
augmentation = false
rng_seed = 0

[train.loss]
n_negatives = 8
{extra}"#,
        out = dir.join("out").display()
    );
    let path = dir.join(format!("{name}.manifest"));
    fs::write(&path, text).unwrap();
    path
}

fn osrkd(args: &[&str], manifest: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--manifest")
        .arg(manifest)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn prepare_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "teacher", "teacher_ce", "");
    let first = osrkd(&["prepare"], &m);
    ok(&first);
    let line: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(line["record"]["closed_train"], 24);
    assert_eq!(line["record"]["closed_test"], 12);
    assert_eq!(line["record"]["open_test"], 6);
    assert_eq!(line["record"]["pseudo_open_train"], 6);

    let again = osrkd(&["prepare"], &m);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    ok(&osrkd(&["prepare", "--force"], &m));
}

#[test]
fn missing_dataset_root_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.manifest");
    let root = dir.path().join("no_such_root");
    fs::write(
        &path,
        format!(
            "name = \"x\"\noutput_dir = \"{}\"\n[dataset]\nroot = \"{}\"\n",
            dir.path().join("out").display(),
            root.display()
        ),
    )
    .unwrap();
    let out = Command::new(BIN)
        .args(["prepare", "--manifest"])
        .arg(&path)
        .env_remove("OSRKD_DATA_ROOT")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no_such_root"), "{}", stderr(&out));
}

#[test]
fn train_requires_prepared_cache() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "teacher", "teacher_ce", "");
    let out = osrkd(&["train"], &m);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("split.osrkd") && err.contains("osrkd prepare"), "{err}");
}

#[test]
fn eval_without_checkpoint_suggests_train() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "teacher", "teacher_ce", "");
    ok(&osrkd(&["prepare"], &m));
    let out = osrkd(&["eval"], &m);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("checkpoint.safetensors") && err.contains("osrkd train"), "{err}");
}

#[test]
fn lock_file_excludes_concurrent_commands() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "teacher", "teacher_ce", "");
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".osrkd.lock"), "1\n").unwrap();
    let out = osrkd(&["prepare"], &m);
    assert!(!out.status.success());
    assert!(stderr(&out).contains(".osrkd.lock"), "{}", stderr(&out));
    fs::remove_file(out_dir.join(".osrkd.lock")).unwrap();
    ok(&osrkd(&["prepare"], &m));
    assert!(!out_dir.join(".osrkd.lock").exists());
}

#[test]
fn distillation_without_teacher_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "kd", "student_kd_crd_ce", "");
    ok(&osrkd(&["prepare"], &m));
    let out = osrkd(&["train"], &m);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("teacher_seed0") && err.contains("osrkd train"), "{err}");
}

/// Teacher, distilled student, evaluation, a sweep and the report, in one
/// output directory.
#[test]
fn full_pipeline_produces_records_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = manifest(dir.path(), "teacher", "teacher_ce", "");
    let student = manifest(dir.path(), "kd", "student_kd_crd_ce", "");
    ok(&osrkd(&["prepare"], &teacher));
    ok(&osrkd(&["train"], &teacher));

    let trained = osrkd(&["train"], &student);
    ok(&trained);
    let run = dir.path().join("out/runs/kd_seed0");
    let rec = read_record(&run.join("train.jsonl")).unwrap();
    assert_eq!(rec.command, "train");
    assert_eq!(rec.record["regime"], "student_kd_crd_ce");
    assert_eq!(rec.record["num_classes"], 4);
    assert!(rec.record["closed_accuracy"].as_f64().unwrap() >= 0.0);
    assert!(run.join("checkpoint.safetensors").exists());
    assert!(run.join("train_log.jsonl").exists());

    let refused = osrkd(&["train"], &student);
    assert!(!refused.status.success());
    assert!(stderr(&refused).contains("--force"));

    ok(&osrkd(&["eval"], &student));
    let ev = read_record(&run.join("eval.jsonl")).unwrap();
    assert_eq!(ev.command, "eval");
    assert!(ev.record["osr_metrics"]["f_measure"].is_number(), "{}", ev.record);
    let table = fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 12 + 6);

    let sweep = osrkd(&["sweep", "--parameter", "tau_kd", "--values", "1,10,50"], &student);
    ok(&sweep);
    for v in ["1", "10", "50"] {
        let rec = read_record(&dir.path().join(format!("out/runs/kd_tau_kd_{v}_seed0/train.jsonl"))).unwrap();
        assert_eq!(rec.record["sweep"]["parameter"], "tau_kd");
        assert_eq!(rec.record["config_echo"]["loss"]["tau_kd"].as_f64(), v.parse::<f64>().ok());
    }
    let plots: Vec<_> = fs::read_dir(dir.path().join("out/sweeps/kd"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".svg") && e.file_name().to_string_lossy().starts_with("sweep_"))
        .collect();
    assert_eq!(plots.len(), 1);

    let report = osrkd(&["report"], &teacher);
    ok(&report);
    let t1 = fs::read_to_string(dir.path().join("out/report/table1.txt")).unwrap();
    assert!(t1.contains("kd_seed0") && t1.contains("teacher_seed0"), "{t1}");
}

#[test]
fn records_are_reproducible_modulo_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "scratch", "student_openset", "");
    ok(&osrkd(&["prepare"], &m));
    ok(&osrkd(&["train"], &m));
    ok(&osrkd(&["eval"], &m));
    let run = dir.path().join("out/runs/scratch_seed0");
    let first_train = read_record(&run.join("train.jsonl")).unwrap();
    let first_eval = read_record(&run.join("eval.jsonl")).unwrap();
    let first_ckpt = fs::read(run.join("checkpoint.safetensors")).unwrap();

    ok(&osrkd(&["prepare", "--force"], &m));
    ok(&osrkd(&["train", "--force"], &m));
    ok(&osrkd(&["eval"], &m));
    let train = read_record(&run.join("train.jsonl")).unwrap();
    let eval = read_record(&run.join("eval.jsonl")).unwrap();
    assert_eq!(
        serde_json::to_string(&first_train.record).unwrap(),
        serde_json::to_string(&train.record).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&first_eval.record).unwrap(),
        serde_json::to_string(&eval.record).unwrap()
    );
    assert_eq!(first_ckpt, fs::read(run.join("checkpoint.safetensors")).unwrap());
    assert_eq!(train.record["num_classes"], 5);
}

#[test]
fn seed_flag_overrides_manifest_seed() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "scratch", "student_ce", "");
    ok(&osrkd(&["prepare"], &m));
    ok(&osrkd(&["train", "--seed", "7"], &m));
    let rec = read_record(&dir.path().join("out/runs/scratch_seed7/train.jsonl")).unwrap();
    assert_eq!(rec.record["seed"], 7);
}

#[test]
fn checked_in_manifests_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests");
    let mut names = Vec::new();
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let m = Manifest::load(&path).unwrap();
        m.train.loss.validate().unwrap();
        if m.name.contains("sweep") {
            assert!(m.sweep.is_some());
        }
        names.push(m.name);
    }
    names.sort();
    assert_eq!(names.len(), 10);
    assert!(names.contains(&"table1_student_kd_crd_ce".to_string()));
    assert!(names.contains(&"fig4_sweep".to_string()));
}
