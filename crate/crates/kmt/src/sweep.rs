//! Sweeps: run the full pipeline once per value of a single axis
//! (training-set size, augmentation recipe, or QA mixing ratio), collect the
//! per-cell evaluation reports, and render a consolidated CSV plus one SVG
//! chart per task.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use kmt_core::error::{Error, Result};
use kmt_core::eval::EvalReport;

use crate::chart::{line_chart, Series};
use crate::config::ExperimentConfig;
use crate::manifest::{now_unix, record_for};
use crate::stages::RunContext;

pub const CELLS_FILE: &str = "cells.json";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    TrainSetSize,
    Augmentation,
    QaRatio,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TrainSetSize => "train_set_size",
            SweepAxis::Augmentation => "augmentation",
            SweepAxis::QaRatio => "qa_ratio",
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            SweepAxis::TrainSetSize => "training persons |P_train|",
            SweepAxis::Augmentation => "augmentation",
            SweepAxis::QaRatio => "QA mixing ratio",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepAxis> {
        match s {
            "train_set_size" => Ok(SweepAxis::TrainSetSize),
            "augmentation" => Ok(SweepAxis::Augmentation),
            "qa_ratio" => Ok(SweepAxis::QaRatio),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected train_set_size, augmentation, \
                 or qa_ratio)"
            ))),
        }
    }
}

/// One pipeline run at a single axis value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    /// Human-readable axis value ("500", "multi5+permute", "0.8").
    pub value: String,
    /// Numeric x coordinate for charts, when the axis is numeric.
    pub numeric: Option<f64>,
    /// Cell directory, relative to the sweep directory.
    pub dir: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCells {
    pub axis: String,
    pub pipeline: String,
    pub cells: Vec<CellRecord>,
}

enum CellValue {
    Size(u32),
    Aug(String),
    Ratio(f64),
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '+') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Run every cell of the axis, tolerating per-cell failures, then write
/// cells.json and render the consolidated outputs.
pub fn run_sweep(ctx: &mut RunContext, axis: SweepAxis) -> Result<PathBuf> {
    let t0 = Instant::now();
    let started = now_unix();
    let sweep_cfg = ctx
        .cfg
        .sweep
        .clone()
        .ok_or_else(|| {
            Error::Config(
                "config has no [sweep] section; add one with the axis values to sweep".into(),
            )
        })?;
    let mut pipeline = sweep_cfg.pipeline.clone();
    if axis == SweepAxis::QaRatio && pipeline != "mixed" {
        eprintln!("note: qa_ratio axis only affects mixed training; using the mixed pipeline");
        pipeline = "mixed".to_string();
    }

    let specs: Vec<(String, Option<f64>, CellValue)> = match axis {
        SweepAxis::TrainSetSize => sweep_cfg
            .train_set_sizes
            .iter()
            .map(|&v| (v.to_string(), Some(v as f64), CellValue::Size(v)))
            .collect(),
        SweepAxis::Augmentation => sweep_cfg
            .augmentations
            .iter()
            .map(|s| (s.clone(), None, CellValue::Aug(s.clone())))
            .collect(),
        SweepAxis::QaRatio => sweep_cfg
            .qa_ratios
            .iter()
            .map(|&v| (format!("{v}"), Some(v), CellValue::Ratio(v)))
            .collect(),
    };

    let sweep_rel = format!("sweep-{}", axis.name());
    let sweep_dir = ctx.out_dir().join(&sweep_rel);
    std::fs::create_dir_all(&sweep_dir)?;

    let n = specs.len();
    let mut cells = Vec::with_capacity(n);
    for (i, (label, numeric, value)) in specs.into_iter().enumerate() {
        let dir_name = format!("{:02}-{}", i, sanitize(&label));
        let cell_dir = sweep_dir.join(&dir_name);
        let mut cell_cfg = ctx.cfg.clone();
        cell_cfg.sweep = None;
        cell_cfg.out_dir = cell_dir;
        match value {
            CellValue::Size(v) => cell_cfg.corpus.n_persons = v.saturating_mul(2),
            CellValue::Aug(l) => cell_cfg.corpus.augmentation = l,
            CellValue::Ratio(v) => cell_cfg.train.mixed.qa_ratio = Some(v),
        }
        eprintln!("sweep[{axis}]: cell {}/{} ({label})", i + 1, n);
        match run_cell(cell_cfg, &pipeline, ctx.deterministic) {
            Ok(()) => cells.push(CellRecord {
                value: label,
                numeric,
                dir: dir_name,
                ok: true,
                error: None,
            }),
            Err(e) => {
                eprintln!("sweep[{axis}]: cell {label} FAILED: {e}");
                cells.push(CellRecord {
                    value: label,
                    numeric,
                    dir: dir_name,
                    ok: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let doc = SweepCells { axis: axis.name().to_string(), pipeline, cells };
    std::fs::write(
        sweep_dir.join(CELLS_FILE),
        serde_json::to_string_pretty(&doc)?,
    )?;
    let rendered = render_sweep_outputs(&sweep_dir)?;

    let mut outputs = vec![record_for(ctx.out_dir(), &format!("{sweep_rel}/{CELLS_FILE}"))?];
    for rel in rendered {
        outputs.push(record_for(ctx.out_dir(), &format!("{sweep_rel}/{rel}"))?);
    }
    ctx.record_stage(&format!("sweep-{}", axis.name()), t0, started, vec![], outputs)?;
    Ok(sweep_dir)
}

fn run_cell(cfg: ExperimentConfig, pipeline: &str, deterministic: bool) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut ctx = RunContext::open(cfg, deterministic)?;
    ctx.gen_corpus()?;
    ctx.gen_tasks()?;
    match pipeline {
        "mixed" => {
            ctx.mixed_train()?;
            ctx.evaluate(Some("mixed"))?;
        }
        "pretrain_finetune" => {
            ctx.pretrain()?;
            ctx.finetune()?;
            ctx.evaluate(Some("finetune"))?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep pipeline {other:?} (expected mixed or pretrain_finetune)"
            )))
        }
    }
    Ok(())
}

fn find_cell_report(cell_dir: &Path) -> Result<EvalReport> {
    for stage in ["finetune", "mixed", "pretrain"] {
        let path = cell_dir.join(format!("eval-{stage}/report.json"));
        if path.exists() {
            let report = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            return Ok(report);
        }
    }
    Err(Error::DataFile(format!(
        "{}: cell has no evaluation report",
        cell_dir.display()
    )))
}

/// Build sweep.csv and per-task charts from cells.json. Returns the paths
/// written, relative to the sweep directory.
pub fn render_sweep_outputs(sweep_dir: &Path) -> Result<Vec<String>> {
    let doc: SweepCells =
        serde_json::from_str(&std::fs::read_to_string(sweep_dir.join(CELLS_FILE))?)?;
    let mut loaded: Vec<(&CellRecord, EvalReport)> = Vec::new();
    for cell in doc.cells.iter().filter(|c| c.ok) {
        loaded.push((cell, find_cell_report(&sweep_dir.join(&cell.dir))?));
    }

    let mut rows = String::from(
        "axis,value,task,n,test_acc,acc_with_hint,acc_without_hint,hint_acc,baseline,\
         consistency_prediction\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (cell, report) in &loaded {
        for t in &report.tasks {
            rows.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                doc.axis,
                cell.value,
                t.task.name(),
                t.n_examples,
                t.test_acc,
                opt(t.test_acc_with_hint),
                opt(t.test_acc_without_hint),
                opt(t.hint_acc),
                t.baseline,
                opt(t.consistency_prediction),
            ));
        }
    }

    // Ordered task list across all cells (first appearance wins).
    let mut task_names: Vec<String> = Vec::new();
    for (_, report) in &loaded {
        for t in &report.tasks {
            let name = t.task.name();
            if !task_names.contains(&name) {
                task_names.push(name);
            }
        }
    }

    // For the QA-ratio axis, also report the best accuracy per task across
    // all ratios (the headline "tune the mixing ratio" number).
    if doc.axis == "qa_ratio" {
        for task in &task_names {
            let best = loaded
                .iter()
                .flat_map(|(_, r)| r.tasks.iter())
                .filter(|t| t.task.name() == *task)
                .map(|t| t.test_acc)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                rows.push_str(&format!("{},best,{task},,{best},,,,,\n", doc.axis));
            }
        }
    }
    std::fs::write(sweep_dir.join(SWEEP_CSV), rows)?;
    let mut written = vec![SWEEP_CSV.to_string()];

    if loaded.is_empty() {
        return Ok(written);
    }

    // One chart per task: accuracy vs axis value, baseline dashed.
    let charts_dir = sweep_dir.join("charts");
    std::fs::create_dir_all(&charts_dir)?;
    let all_numeric = loaded.iter().all(|(c, _)| c.numeric.is_some());
    let xs: Vec<f64> = loaded
        .iter()
        .enumerate()
        .map(|(i, (c, _))| if all_numeric { c.numeric.unwrap() } else { i as f64 })
        .collect();
    let ticks: Vec<(f64, String)> = loaded
        .iter()
        .zip(&xs)
        .map(|((c, _), &x)| (x, c.value.clone()))
        .collect();

    for task in &task_names {
        let mut acc = Vec::new();
        let mut with_hint = Vec::new();
        let mut without_hint = Vec::new();
        let mut baseline = Vec::new();
        for ((_, report), &x) in loaded.iter().zip(&xs) {
            if let Some(t) = report.tasks.iter().find(|t| t.task.name() == *task) {
                acc.push((x, t.test_acc));
                if let Some(v) = t.test_acc_with_hint {
                    with_hint.push((x, v));
                }
                if let Some(v) = t.test_acc_without_hint {
                    without_hint.push((x, v));
                }
                baseline.push((x, t.baseline));
            }
        }
        let mut series = vec![Series {
            label: "accuracy".to_string(),
            points: acc,
            dashed: false,
        }];
        if !with_hint.is_empty() {
            series.push(Series {
                label: "with hint".to_string(),
                points: with_hint,
                dashed: false,
            });
        }
        if !without_hint.is_empty() {
            series.push(Series {
                label: "without hint".to_string(),
                points: without_hint,
                dashed: false,
            });
        }
        series.push(Series {
            label: "baseline".to_string(),
            points: baseline,
            dashed: true,
        });
        let svg = line_chart(
            &format!("{task} vs {}", doc.axis),
            SweepAxis::from_str_label(&doc.axis),
            &ticks,
            &series,
        );
        let rel = format!("charts/{}.svg", sanitize(task));
        std::fs::write(sweep_dir.join(&rel), svg)?;
        written.push(rel);
    }
    Ok(written)
}

impl SweepAxis {
    /// Axis label for chart rendering from a stored axis name; falls back to
    /// the raw name for forward compatibility.
    fn from_str_label(name: &str) -> &str {
        match name.parse::<SweepAxis>() {
            Ok(axis) => axis.axis_label(),
            Err(_) => name,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kmt_core::eval::{DecodeSettings, EvalMode, TaskReport};
    use kmt_core::tasks::TaskSpec;

    fn tiny_report(acc: f64, baseline: f64) -> EvalReport {
        EvalReport {
            decode: DecodeSettings {
                beam_width: 1,
                max_new_tokens: 4,
                mode: EvalMode::AsEmitted,
            },
            tasks: vec![TaskReport {
                task: "extract.bdate".parse::<TaskSpec>().unwrap(),
                n_examples: 10,
                n_with_hint: 0,
                n_without_hint: 10,
                test_acc: acc,
                test_acc_with_hint: None,
                test_acc_without_hint: Some(acc),
                hint_acc: None,
                baseline,
                consistency_prediction: None,
                dual_slot_acc: None,
            }],
        }
    }

    #[test]
    fn axis_names_parse_and_reject() {
        assert_eq!("train_set_size".parse::<SweepAxis>().unwrap(), SweepAxis::TrainSetSize);
        assert_eq!("augmentation".parse::<SweepAxis>().unwrap(), SweepAxis::Augmentation);
        assert_eq!("qa_ratio".parse::<SweepAxis>().unwrap(), SweepAxis::QaRatio);
        assert!("batch_size".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn render_consolidates_cells_and_draws_charts() {
        let dir = tempfile::tempdir().unwrap();
        let sweep_dir = dir.path().join("sweep-train_set_size");
        for (i, (label, acc)) in [("250", 0.4), ("500", 0.7)].iter().enumerate() {
            let cell = sweep_dir.join(format!("{i:02}-{label}")).join("eval-mixed");
            std::fs::create_dir_all(&cell).unwrap();
            tiny_report(*acc, 0.1).write_json(&cell.join("report.json")).unwrap();
        }
        let doc = SweepCells {
            axis: "train_set_size".into(),
            pipeline: "mixed".into(),
            cells: vec![
                CellRecord {
                    value: "250".into(),
                    numeric: Some(250.0),
                    dir: "00-250".into(),
                    ok: true,
                    error: None,
                },
                CellRecord {
                    value: "500".into(),
                    numeric: Some(500.0),
                    dir: "01-500".into(),
                    ok: true,
                    error: None,
                },
                CellRecord {
                    value: "1000".into(),
                    numeric: Some(1000.0),
                    dir: "02-1000".into(),
                    ok: false,
                    error: Some("boom".into()),
                },
            ],
        };
        std::fs::create_dir_all(&sweep_dir).unwrap();
        std::fs::write(
            sweep_dir.join(CELLS_FILE),
            serde_json::to_string_pretty(&doc).unwrap(),
        )
        .unwrap();

        let written = render_sweep_outputs(&sweep_dir).unwrap();
        assert!(written.contains(&SWEEP_CSV.to_string()));
        let csv = std::fs::read_to_string(sweep_dir.join(SWEEP_CSV)).unwrap();
        assert!(csv.contains("train_set_size,250,extract.bdate,10,0.4"));
        assert!(csv.contains("train_set_size,500,extract.bdate,10,0.7"));
        // The failed cell contributes no row.
        assert_eq!(csv.lines().count(), 3);
        let svg =
            std::fs::read_to_string(sweep_dir.join("charts/extract.bdate.svg")).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("baseline"));
    }

    #[test]
    fn empty_axis_renders_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let sweep_dir = dir.path().join("sweep-qa_ratio");
        std::fs::create_dir_all(&sweep_dir).unwrap();
        let doc = SweepCells { axis: "qa_ratio".into(), pipeline: "mixed".into(), cells: vec![] };
        std::fs::write(
            sweep_dir.join(CELLS_FILE),
            serde_json::to_string(&doc).unwrap(),
        )
        .unwrap();
        let written = render_sweep_outputs(&sweep_dir).unwrap();
        assert_eq!(written, vec![SWEEP_CSV.to_string()]);
        let csv = std::fs::read_to_string(sweep_dir.join(SWEEP_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn qa_ratio_axis_appends_best_rows() {
        let dir = tempfile::tempdir().unwrap();
        let sweep_dir = dir.path().join("sweep-qa_ratio");
        for (i, (label, acc)) in [("0.2", 0.3), ("0.8", 0.9)].iter().enumerate() {
            let cell = sweep_dir.join(format!("{i:02}-{}", sanitize(label))).join("eval-mixed");
            std::fs::create_dir_all(&cell).unwrap();
            tiny_report(*acc, 0.1).write_json(&cell.join("report.json")).unwrap();
        }
        let doc = SweepCells {
            axis: "qa_ratio".into(),
            pipeline: "mixed".into(),
            cells: vec![
                CellRecord {
                    value: "0.2".into(),
                    numeric: Some(0.2),
                    dir: "00-0.2".into(),
                    ok: true,
                    error: None,
                },
                CellRecord {
                    value: "0.8".into(),
                    numeric: Some(0.8),
                    dir: "01-0.8".into(),
                    ok: true,
                    error: None,
                },
            ],
        };
        std::fs::write(
            sweep_dir.join(CELLS_FILE),
            serde_json::to_string(&doc).unwrap(),
        )
        .unwrap();
        let csv_path = sweep_dir.join(SWEEP_CSV);
        render_sweep_outputs(&sweep_dir).unwrap();
        let csv = std::fs::read_to_string(csv_path).unwrap();
        assert!(csv.contains("qa_ratio,best,extract.bdate,,0.9"));
    }
}
