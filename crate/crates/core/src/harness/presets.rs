//! Named experiment suites.

use std::path::Path;

use super::{ExperimentConfig, Task};
use crate::error::{Error, Result};
use crate::schedulers::Strategy;

pub const PRESETS: [&str; 4] = ["study-4.1", "study-4.2", "bench-6", "bound-check"];

pub const BENCH_METHODS: [&str; 5] = ["constant", "feature-cd", "language-cd", "commit-clr", "commit"];

pub const STUDY_METHODS: [&str; 3] = ["synced", "language-up", "vision-up"];

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Config of one method on one task and seed.
pub fn method_config(method: &str, task: Task, seed: u64, root: &Path) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig {
        name: format!("{method}-{}-s{seed}", task.name()),
        method: method.to_string(),
        task,
        seeds: vec![seed],
        ..Default::default()
    };
    c.out_dir = root.join(&c.name);
    let up = c.scheduler.up_lr;
    match method {
        "constant" | "synced" => {}
        "language-up" => c.scheduler.lr_t = up,
        "vision-up" => c.scheduler.lr_s = up,
        "feature-cd" => c.scheduler.strategy = Strategy::FeatureCd,
        "language-cd" => c.scheduler.strategy = Strategy::LanguageCd,
        "commit-clr" => c.scheduler.strategy = Strategy::Coordinated,
        "commit" => {
            c.scheduler.strategy = Strategy::Coordinated;
            c.optimizer.reg.enabled = true;
        }
        other => return Err(Error::config(format!("unknown method `{other}`"))),
    }
    Ok(c)
}

/// Expands a preset into its configs, with run directories under `root`.
pub fn preset(name: &str, root: &Path) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    match name {
        "study-4.1" | "study-4.2" => {
            let root = root.join(name);
            for seed in SEEDS {
                for m in STUDY_METHODS {
                    let mut c = method_config(m, Task::ToyQa, seed, &root)?;
                    c.name = format!("{name}-{}", c.name);
                    c.out_dir = root.join(&c.name);
                    out.push(c);
                }
            }
        }
        "bench-6" => {
            let root = root.join(name);
            for task in [Task::ToyQa, Task::ToyCaption] {
                for m in BENCH_METHODS {
                    for seed in SEEDS {
                        out.push(method_config(m, task, seed, &root)?);
                    }
                }
            }
        }
        "bound-check" => {
            let c = ExperimentConfig {
                name: "bound-check".into(),
                method: "adam".into(),
                task: Task::SyntheticLogistic,
                seeds: (0..20).collect(),
                steps: 500,
                out_dir: root.join("bound-check"),
                ..Default::default()
            };
            out.push(c);
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    }
    for c in &out {
        c.validate()?;
    }
    Ok(out)
}

/// Writes each config of a preset as `<name>.toml` into `dir`.
pub fn write_preset(name: &str, dir: &Path, runs_root: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    preset(name, runs_root)?
        .iter()
        .map(|c| {
            let p = dir.join(format!("{}.toml", c.name));
            std::fs::write(&p, c.to_toml()?)?;
            Ok(p)
        })
        .collect()
}
