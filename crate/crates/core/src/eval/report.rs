//! Result tables (CSV plus aligned text), temperature-sweep plots and latent
//! scatter plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::svg::{labelled_scatter, line_panels, Panel};
use crate::trainer::{Regime, TrainReport};
use crate::{Error, Result};

/// 2-D embedding of one model's latent space.
#[derive(Debug, Clone)]
pub struct LatentScatter {
    pub name: String,
    pub points: Vec<[f64; 2]>,
    /// `0..k` for known classes, `k` for open or pseudo-open samples.
    pub labels: Vec<u32>,
}

fn table1_row(r: Regime) -> Option<(&'static str, &'static str)> {
    Some(match r {
        Regime::TeacherCe => ("Teacher", "CE"),
        Regime::StudentCe => ("Original Student", "CE"),
        Regime::StudentCrdCe => ("Distilled Student", "CRD+CE"),
        Regime::StudentKd => ("Distilled Student", "KD"),
        Regime::StudentCeKd => ("Distilled Student", "CE+KD"),
        Regime::StudentKdCrdCe => ("Distilled Student", "KD+CRD+CE"),
        Regime::StudentOpenset | Regime::StudentJointKdOsr => return None,
    })
}

fn table2_name(r: Regime) -> &'static str {
    match r {
        Regime::TeacherCe => "Teacher",
        Regime::StudentCe => "Scratch Student",
        Regime::StudentKdCrdCe => "Proposed Distilled Student",
        Regime::StudentOpenset => "Proposed Open Set Student",
        Regime::StudentJointKdOsr => "Distilled Open Set Student",
        Regime::StudentCrdCe => "Distilled Student (CRD+CE)",
        Regime::StudentKd => "Distilled Student (KD)",
        Regime::StudentCeKd => "Distilled Student (CE+KD)",
    }
}

fn write_table(dir: &Path, stem: &str, header: &[&str], rows: &[Vec<String>], out: &mut Vec<PathBuf>) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    out.push(csv_path);

    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut text = line(header.to_vec());
    text.push_str(&format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for r in rows {
        text.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    let txt_path = dir.join(format!("{stem}.txt"));
    fs::write(&txt_path, text)?;
    out.push(txt_path);
    Ok(())
}

/// Writes `table1`/`table2` (CSV and text), one two-panel plot per swept
/// parameter and one scatter per latent embedding. Returns the files written.
pub fn render_reports(runs: &[TrainReport], latents: &[LatentScatter], output_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to report"));
    }
    fs::create_dir_all(output_dir)?;
    let mut written = Vec::new();

    let t1: Vec<Vec<String>> = runs
        .iter()
        .filter_map(|r| {
            table1_row(r.regime).map(|(m, l)| {
                vec![m.to_string(), l.to_string(), format!("{:.2}", r.closed_accuracy * 100.0), r.name.clone(), r.seed.to_string()]
            })
        })
        .collect();
    write_table(output_dir, "table1", &["Models", "Loss term", "Accuracy", "Run", "Seed"], &t1, &mut written)?;

    let t2: Vec<Vec<String>> = runs
        .iter()
        .filter_map(|r| {
            r.osr_metrics.map(|m| {
                let [f, t, c, o] = m.percent();
                vec![
                    table2_name(r.regime).to_string(),
                    format!("{f:.2}"),
                    format!("{t:.2}"),
                    format!("{c:.2}"),
                    format!("{o:.2}"),
                    format!("{:.2}", m.f_measure_binary * 100.0),
                    r.name.clone(),
                    r.seed.to_string(),
                ]
            })
        })
        .collect();
    write_table(
        output_dir,
        "table2",
        &["Model", "F-measure", "Total Accuracy", "Acc closed set", "Acc open set", "F-measure (binary)", "Run", "Seed"],
        &t2,
        &mut written,
    )?;

    let mut sweeps: BTreeMap<(String, String), Vec<&TrainReport>> = BTreeMap::new();
    for r in runs {
        if let Some(sp) = &r.sweep {
            sweeps.entry((sp.parameter.clone(), r.regime.to_string())).or_default().push(r);
        }
    }
    for ((param, regime), mut group) in sweeps {
        group.sort_by(|a, b| {
            let v = |r: &TrainReport| r.sweep.as_ref().map(|s| s.value).unwrap_or(0.0);
            v(a).total_cmp(&v(b))
        });
        let pts = |f: &dyn Fn(&TrainReport) -> f64| -> Vec<(String, f64)> {
            group
                .iter()
                .map(|r| (format!("{}", r.sweep.as_ref().map(|s| s.value).unwrap_or(0.0)), f(r) * 100.0))
                .collect()
        };
        let panels = [
            Panel {
                title: format!("Closed set ({regime})"),
                x_label: param.clone(),
                y_label: "accuracy (%)".into(),
                points: pts(&|r| r.closed_accuracy),
            },
            Panel {
                title: format!("Open set ({regime})"),
                x_label: param.clone(),
                y_label: "open-set accuracy (%)".into(),
                points: pts(&|r| r.osr_metrics.map(|m| m.open_accuracy).unwrap_or(0.0)),
            },
        ];
        let p = output_dir.join(format!("sweep_{param}_{regime}.svg"));
        fs::write(&p, line_panels(&panels))?;
        written.push(p);
    }

    for l in latents {
        let p = output_dir.join(format!("latent_{}.svg", l.name));
        fs::write(&p, labelled_scatter(&l.name, &l.points, &l.labels))?;
        written.push(p);
    }
    Ok(written)
}
