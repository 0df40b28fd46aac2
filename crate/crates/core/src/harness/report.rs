//! Reports over completed run directories: per-run SVG curves, the std(κ)
//! table, and steps-to-loss-threshold comparisons.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{line_chart, Series};
use super::{RunMeta, COLUMNS, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::metrics::BalanceRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    /// Inclusive step window for std(κ).
    pub kappa_window: [u64; 2],
    /// Trailing-mean window applied to the loss before thresholding.
    pub loss_smoothing: usize,
    /// Fraction of the gap between the step-0 loss and the best loss.
    pub threshold_fraction: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            kappa_window: [100, 2000],
            loss_smoothing: 25,
            threshold_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunData {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub records: Vec<BalanceRecord>,
}

impl RunData {
    pub fn label(&self) -> String {
        format!("{}-seed{}", self.meta.name, self.meta.seed)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect()
    }

    pub fn method(&self) -> &str {
        &self.meta.method
    }
}

fn parse_f(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("metrics.csv line {line}: bad number `{s}`")))
}

/// Parses `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<Vec<BalanceRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != COLUMNS {
        return Err(Error::Format(format!("unexpected metrics columns {header:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let line = i + 2;
        let f = |j: usize| parse_f(&row[j], line);
        out.push(BalanceRecord {
            step: row[0]
                .parse()
                .map_err(|_| Error::Format(format!("metrics.csv line {line}: bad step")))?,
            loss: f(1)?,
            kappa: f(2)?,
            kappa_ma: f(3)?,
            d_t: f(4)?,
            d_s: f(5)?,
            d_joint: f(6)?,
            h_s: f(7)?,
            h_t: f(8)?,
            bound_t: f(9)?,
            bound_s: f(10)?,
            gnorm_s: f(11)?,
            gnorm_t: f(12)?,
            lr_s: f(13)?,
            lr_t: f(14)?,
            reg_ds: f(15)?,
            reg_dt: f(16)?,
            eval_acc: if row[17].is_empty() { None } else { Some(f(17)?) },
        });
    }
    for w in out.windows(2) {
        if w[1].step <= w[0].step {
            return Err(Error::Format("metrics.csv steps are not strictly increasing".into()));
        }
    }
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let meta: RunMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: log schema version {} is not the supported version {SCHEMA_VERSION}",
            dir.display(),
            meta.schema_version
        )));
    }
    let records = read_metrics(&dir.join("metrics.csv"))?;
    Ok(RunData {
        dir: dir.to_path_buf(),
        meta,
        records,
    })
}

/// Run directories under `paths`: each path that holds `meta.json`, or
/// every such directory below it.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.join("meta.json").is_file() {
            out.push(p.to_path_buf());
            return Ok(());
        }
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            entries.sort();
            for e in entries {
                walk(&e, out)?;
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::config(format!("run path {} does not exist", p.display())));
        }
        walk(p, &mut out)?;
    }
    Ok(out)
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// std of `κ_t` over the inclusive step window, with the sample count.
pub fn kappa_std(records: &[BalanceRecord], window: [u64; 2]) -> (usize, f64) {
    let ks: Vec<f64> = records
        .iter()
        .filter(|r| r.step >= window[0] && r.step <= window[1])
        .map(|r| r.kappa)
        .collect();
    (ks.len(), std_dev(&ks))
}

/// Trailing mean over up to `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// First step whose smoothed loss reaches `threshold`.
pub fn steps_to_threshold(records: &[BalanceRecord], threshold: f64, smoothing: usize) -> Option<u64> {
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    smooth(&losses, smoothing)
        .iter()
        .zip(records)
        .find(|(l, _)| **l <= threshold)
        .map(|(_, r)| r.step)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub name: String,
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub final_step: u64,
    pub final_loss: f64,
    pub final_eval_acc: Option<f64>,
    pub kappa_count: usize,
    pub kappa_std: f64,
    pub threshold: f64,
    pub steps_to_threshold: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    /// Per task: the loss threshold.
    pub thresholds: BTreeMap<String, f64>,
}

impl Report {
    pub fn find(&self, method: &str, task: &str, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.method == method && r.task == task && r.seed == seed)
    }
}

const SERIES: [(&str, fn(&BalanceRecord) -> f64); 9] = [
    ("loss", |r| r.loss),
    ("kappa", |r| r.kappa),
    ("kappa_ma", |r| r.kappa_ma),
    ("HS", |r| r.h_s),
    ("HT", |r| r.h_t),
    ("gnormS", |r| r.gnorm_s),
    ("gnormT", |r| r.gnorm_t),
    ("lrS", |r| r.lr_s),
    ("lrT", |r| r.lr_t),
];

/// Statistics only; nothing is written.
pub fn summarize(runs: &[RunData], opts: &ReportOptions) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::config("report needs at least one completed run"));
    }
    let mut thresholds = BTreeMap::new();
    let mut by_task: BTreeMap<String, Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        if r.records.is_empty() {
            return Err(Error::Format(format!("{} has no metric rows", r.dir.display())));
        }
        by_task.entry(r.meta.task.name().to_string()).or_default().push(r);
    }
    for (task, group) in &by_task {
        let l0 = group.iter().map(|r| r.records[0].loss).sum::<f64>() / group.len() as f64;
        let best = group
            .iter()
            .flat_map(|r| smooth(&r.records.iter().map(|x| x.loss).collect::<Vec<_>>(), opts.loss_smoothing))
            .fold(f64::INFINITY, f64::min);
        thresholds.insert(task.clone(), l0 - opts.threshold_fraction * (l0 - best));
    }
    let summaries = runs
        .iter()
        .map(|r| {
            let task = r.meta.task.name().to_string();
            let threshold = thresholds[&task];
            let last = r.records.last().expect("non-empty");
            let (kappa_count, kstd) = kappa_std(&r.records, opts.kappa_window);
            RunSummary {
                label: r.label(),
                name: r.meta.name.clone(),
                method: r.meta.method.clone(),
                task,
                seed: r.meta.seed,
                final_step: last.step,
                final_loss: last.loss,
                final_eval_acc: r.records.iter().rev().find_map(|x| x.eval_acc),
                kappa_count,
                kappa_std: kstd,
                threshold,
                steps_to_threshold: steps_to_threshold(&r.records, threshold, opts.loss_smoothing),
            }
        })
        .collect();
    Ok(Report {
        runs: summaries,
        thresholds,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Loads `dirs`, writes CSV tables and SVG charts into `out`.
pub fn emit_report(dirs: &[PathBuf], out: &Path, opts: &ReportOptions) -> Result<Report> {
    let runs = discover_runs(dirs)?
        .iter()
        .filter(|d| !d.join("trajectory.json").exists())
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&runs, opts)?;
    std::fs::create_dir_all(out)?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());

    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(csv_err)?;
    w.write_record([
        "label",
        "name",
        "method",
        "task",
        "seed",
        "finalStep",
        "finalLoss",
        "finalEvalAcc",
        "kappaCount",
        "kappaStd",
        "threshold",
        "stepsToThreshold",
    ])
    .map_err(csv_err)?;
    for r in &report.runs {
        w.write_record([
            r.label.clone(),
            r.name.clone(),
            r.method.clone(),
            r.task.clone(),
            r.seed.to_string(),
            r.final_step.to_string(),
            r.final_loss.to_string(),
            opt(r.final_eval_acc),
            r.kappa_count.to_string(),
            r.kappa_std.to_string(),
            r.threshold.to_string(),
            opt(r.steps_to_threshold),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("kappa_std.csv")).map_err(csv_err)?;
    w.write_record(["method", "task", "runs", "meanKappaStd", "perSeed"]).map_err(csv_err)?;
    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in &report.runs {
        groups.entry((r.task.clone(), r.method.clone())).or_default().push(r);
    }
    for ((task, method), rs) in &groups {
        let per: Vec<String> = rs.iter().map(|r| format!("{}:{}", r.seed, r.kappa_std)).collect();
        let mean = rs.iter().map(|r| r.kappa_std).sum::<f64>() / rs.len() as f64;
        w.write_record([
            method.clone(),
            task.clone(),
            rs.len().to_string(),
            mean.to_string(),
            per.join(" "),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("steps_to_threshold.csv")).map_err(csv_err)?;
    w.write_record(["task", "threshold", "method", "seed", "steps"]).map_err(csv_err)?;
    for ((task, method), rs) in &groups {
        for r in rs {
            w.write_record([
                task.clone(),
                report.thresholds[task].to_string(),
                method.clone(),
                r.seed.to_string(),
                opt(r.steps_to_threshold),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    for run in &runs {
        let dir = out.join("runs").join(run.label());
        std::fs::create_dir_all(&dir)?;
        for (name, get) in SERIES {
            let s = Series {
                label: name,
                points: run.records.iter().map(|r| (r.step as f64, get(r))).collect(),
            };
            let svg = line_chart(&format!("{} {name}", run.label()), "step", name, &[s]);
            std::fs::write(dir.join(format!("{name}.svg")), svg)?;
        }
    }

    // method means per task
    for task in report.thresholds.keys() {
        for (name, get, smoothing) in [
            ("loss", SERIES[0].1, opts.loss_smoothing),
            ("kappa", SERIES[1].1, 1),
        ] {
            let mut curves: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
            let mut steps: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
            for run in runs.iter().filter(|r| r.meta.task.name() == task) {
                let vals: Vec<f64> = run.records.iter().map(get).collect();
                curves.entry(run.method()).or_default().push(smooth(&vals, smoothing));
                steps.entry(run.method()).or_insert_with(|| run.records.iter().map(|r| r.step).collect());
            }
            let series: Vec<Series<'_>> = curves
                .iter()
                .map(|(m, cs)| {
                    let len = cs.iter().map(Vec::len).min().unwrap_or(0);
                    let pts = (0..len)
                        .map(|i| (steps[m][i] as f64, cs.iter().map(|c| c[i]).sum::<f64>() / cs.len() as f64))
                        .collect();
                    Series { label: m, points: pts }
                })
                .collect();
            let svg = line_chart(&format!("{task}: mean {name} by method"), "step", name, &series);
            std::fs::write(out.join(format!("{name}_{task}.svg")), svg)?;
        }
    }
    Ok(report)
}
