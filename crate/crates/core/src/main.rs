use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use cotune::harness::presets::write_preset;
use cotune::harness::report::{emit_report, ReportOptions};
use cotune::harness::{load_dataset, prepare_model, run_experiment, ExperimentConfig};
use cotune::tasks::{generate_dataset, TaskSpec};
use cotune::theory::{estimate_constants, verify_trajectory, BoundInputs, LogisticProblem, Trajectory};
use cotune::{checkpoint, Component, Error, Result};

#[derive(Parser)]
#[command(name = "cotune", version, about = "Coordinated two-component instruction tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset from a task spec file or preset name.
    GenData {
        /// TOML task spec, or `toy-qa` / `toy-caption`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed for preset specs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a human-readable dump next to the output.
        #[arg(long)]
        dump: bool,
    },
    /// Pretrain and freeze the backbone of a run config (first seed).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the step count.
        #[arg(long)]
        steps: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Summaries and charts over run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TOML report options.
        #[arg(long)]
        options: Option<PathBuf>,
    },
    /// Check a bound-check run against the convergence bound.
    VerifyBound {
        #[arg(long)]
        run: PathBuf,
        /// TOML: either full bound inputs, or `mode = "empirical"`.
        #[arg(long)]
        constants: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configs of a named preset.
    Preset {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Root of the run directories the configs point at.
        #[arg(long, default_value = "runs")]
        runs_root: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Constants {
    Strict(BoundInputs),
    Empirical {
        mode: String,
        #[serde(default)]
        slack: f64,
    },
}

fn read_spec(arg: &str, seed: u64) -> Result<TaskSpec> {
    let p = Path::new(arg);
    if p.is_file() {
        let text = std::fs::read_to_string(p)?;
        Ok(toml::from_str(&text)?)
    } else {
        TaskSpec::preset(arg, seed)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out, seed, dump } => {
            let spec = read_spec(&spec, seed)?;
            let ds = generate_dataset(&spec)?;
            ds.save(&out)?;
            if dump {
                std::fs::write(out.with_extension("txt"), ds.text_dump())?;
            }
            println!("wrote {} ({} train, {} eval, content {})", out.display(), ds.train.len(), ds.eval.len(), ds.content_hash());
        }
        Cmd::Pretrain { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset(&cfg)?;
            let seed = cfg.seeds[0];
            let (model, loss) = prepare_model(&cfg, &dataset, seed)?;
            let entries: Vec<(String, &cotune::Tensor)> = model
                .params(Component::Backbone)
                .iter()
                .map(|(k, v)| (k.clone(), v))
                .collect();
            checkpoint::save(&out, &entries)?;
            println!(
                "wrote {} (backbone {}, final pretrain loss {})",
                out.display(),
                &model.backbone_checksum()[..12],
                loss.map_or("n/a".into(), |l| l.to_string())
            );
        }
        Cmd::Train { config, steps, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            for out in run_experiment(&cfg)? {
                let dir = out.dir.as_deref().map(|d| d.display().to_string()).unwrap_or_default();
                match (&out.bound, out.log.records.last()) {
                    (Some((_, v)), _) => println!(
                        "seed {}: bound {} vs min |grad|^2 {} -> satisfied={} ({dir})",
                        out.seed, v.bound, v.min_grad_norm_sq, v.satisfied
                    ),
                    (None, Some(r)) => println!(
                        "seed {}: step {} loss {} eval {} ({dir})",
                        out.seed,
                        r.step,
                        r.loss,
                        r.eval_acc.map_or("-".into(), |a| a.to_string())
                    ),
                    _ => {}
                }
            }
        }
        Cmd::Report { runs, out, options } => {
            let opts = match options {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
                None => ReportOptions::default(),
            };
            let report = emit_report(&runs, &out, &opts)?;
            println!("{} runs summarized into {}", report.runs.len(), out.display());
        }
        Cmd::VerifyBound { run, constants, out } => {
            let traj_path = run.join("trajectory.json");
            if !traj_path.is_file() {
                return Err(Error::config(format!(
                    "{} has no trajectory.json (bound-check runs record one)",
                    run.display()
                )));
            }
            let traj: Trajectory = serde_json::from_slice(&std::fs::read(traj_path)?)?;
            let consts: Constants = toml::from_str(&std::fs::read_to_string(&constants)?)?;
            let (inputs, proxy) = match consts {
                Constants::Strict(b) => (b, None),
                Constants::Empirical { mode, slack } if mode == "empirical" => {
                    let problem: LogisticProblem = serde_json::from_slice(&std::fs::read(run.join("problem.json"))?)?;
                    let est = estimate_constants(&traj, |x| Ok(problem.grad(x)), slack)?;
                    (est.inputs.clone(), Some(est))
                }
                Constants::Empirical { mode, .. } => {
                    return Err(Error::config(format!("unknown constants mode `{mode}`")))
                }
            };
            let v = verify_trajectory(&traj, &inputs)?;
            let mut doc = serde_json::to_value(&v)?;
            if let Some(est) = proxy {
                doc["estimate"] = serde_json::to_value(est)?;
            }
            let out = out.unwrap_or_else(|| run.join("verification.json"));
            std::fs::write(&out, serde_json::to_vec_pretty(&doc)?)?;
            println!("satisfied={} bound={} min={} -> {}", v.satisfied, v.bound, v.min_grad_norm_sq, out.display());
        }
        Cmd::Preset { name, out_dir, runs_root } => {
            let paths = write_preset(&name, &out_dir, &runs_root)?;
            println!("wrote {} configs into {}", paths.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
