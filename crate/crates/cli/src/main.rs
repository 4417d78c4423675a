use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use involute::harness::{self, ExperimentConfig, HarnessError, Task};
use involute::nn::Activation;

#[derive(Parser)]
#[command(name = "involute", version, about = "Train and check networks with exact involutory symmetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); fields not given keep the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides INVOLUTE_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; repeat i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit cos x (or sin x for odd parity) and measure the violation.
    Toy1d(Common),
    /// Fit sin x + sin y and write a prediction grid.
    Toy2d(Common),
    /// Hamiltonian network on the ideal spring.
    Hnn(Common),
    /// Small CNN with or without reflection-invariant kernels.
    Cnn(Common),
    /// Classify vectors from stdin into S0, S+ or S-.
    PidCheck {
        #[command(flatten)]
        common: Common,
        /// Spec as a JSON file path or inline JSON, e.g. '{"A": [[-1]], "parity": 1}'.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Search for biases that freeze a symmetrized first layer.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Audit only this activation.
        #[arg(long)]
        activation: Option<String>,
        /// Parity to audit for (1 or -1).
        #[arg(long, allow_negative_numbers = true)]
        parity: Option<i64>,
    },
    /// Evaluate a saved model on vectors from stdin.
    Eval {
        /// Model JSON written by a training command.
        #[arg(long)]
        model: PathBuf,
    },
}

fn read_json(arg: &str) -> Result<Value, HarnessError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| HarnessError::Config(format!("{arg}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{arg}: {e}")))
}

fn load(task: Task, common: &Common, extra: impl FnOnce(&mut Value) -> Result<(), HarnessError>) -> Result<ExperimentConfig, HarnessError> {
    let mut user = match &common.config {
        Some(p) => read_json(&p.to_string_lossy())?,
        None => Value::Object(Default::default()),
    };
    if let Some(t) = user.get("task") {
        let given: Task = serde_json::from_value(t.clone()).map_err(|e| HarnessError::Config(format!("task: {e}")))?;
        if given != task {
            return Err(HarnessError::Config(format!(
                "config is for task {}, not {}",
                given.name(),
                task.name()
            )));
        }
    }
    if let Some(seed) = common.seed {
        user["seed"] = seed.into();
    }
    extra(&mut user)?;
    ExperimentConfig::from_json_for(task, &user)
}

fn out_dir(cfg: &ExperimentConfig, common: &Common) -> PathBuf {
    harness::resolve_out_dir(cfg, common.out.as_deref())
}

fn report(outcome: &harness::Outcome, dir: &Path, print_summary: bool) {
    if print_summary {
        for line in &outcome.summary {
            println!("{line}");
        }
    }
    eprintln!("wrote {} artifacts to {}", outcome.artifacts.len(), dir.display());
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let stdout = io::stdout();
    match cli.command {
        Command::Toy1d(c) => train(Task::Toy1d, c),
        Command::Toy2d(c) => train(Task::Toy2d, c),
        Command::Hnn(c) => train(Task::Hnn, c),
        Command::Cnn(c) => train(Task::Cnn, c),
        Command::PidCheck { common, spec } => {
            let cfg = load(Task::PidCheck, &common, |v| {
                if let Some(s) = &spec {
                    v["spec"] = read_json(s)?;
                }
                Ok(())
            })?;
            let vectors = harness::parse_vectors(io::stdin().lock())?;
            let dir = out_dir(&cfg, &common);
            let o = harness::cmd_pid_check(&cfg, &vectors, &dir, &mut stdout.lock())?;
            report(&o, &dir, false);
            Ok(())
        }
        Command::Audit {
            common,
            activation,
            parity,
        } => {
            let cfg = load(Task::Audit, &common, |v| {
                if let Some(a) = &activation {
                    let act = Activation::from_name(a).ok_or_else(|| HarnessError::Config(format!("unknown activation {a}")))?;
                    v["audit"]["activations"] = serde_json::json!([act]);
                }
                if let Some(p) = parity {
                    v["audit"]["parity"] = p.into();
                }
                Ok(())
            })?;
            let dir = out_dir(&cfg, &common);
            let o = harness::cmd_audit(&cfg, &dir, &mut stdout.lock())?;
            report(&o, &dir, false);
            Ok(())
        }
        Command::Eval { model } => {
            let json = fs::read_to_string(&model).map_err(|e| HarnessError::Config(format!("{}: {e}", model.display())))?;
            let vectors = harness::parse_vectors(io::stdin().lock())?;
            harness::eval_model(&json, &vectors, &mut stdout.lock())
        }
    }
}

fn train(task: Task, common: Common) -> Result<(), HarnessError> {
    let cfg = load(task, &common, |_| Ok(()))?;
    let dir = out_dir(&cfg, &common);
    let o = match task {
        Task::Toy1d => harness::cmd_toy1d(&cfg, &dir)?,
        Task::Toy2d => harness::cmd_toy2d(&cfg, &dir)?,
        Task::Hnn => harness::cmd_hnn(&cfg, &dir)?,
        Task::Cnn => harness::cmd_cnn(&cfg, &dir)?,
        Task::PidCheck | Task::Audit => unreachable!("not a training task"),
    };
    report(&o, &dir, true);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
