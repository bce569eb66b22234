use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdmoe_core::harness::gradcheck::{end_to_end, tiny_config};
use sdmoe_core::harness::train::{
    ablate, ablation_table, datasets, evaluate, load_model, prepare_all, train_model, write_run,
};
use sdmoe_core::harness::{RunConfig, TrackerModel};
use sdmoe_core::Error;

const GRADCHECK_TOL: f64 = 1e-3;
const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "sdmoe",
    version,
    about = "Sparse-dense MoE adapters and Gram-aligned hypergraph fusion on a synthetic two-modality tracker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tracker and write config, metrics and checkpoint to --out.
    Train(Common),
    /// Evaluate a trained run directory on its held-out split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every trainable parameter on a tiny model.
    Gradcheck(Common),
    /// Train the baseline, +SDMoE, +SDMoE+MFF and full variants.
    Ablate(Common),
    /// Write the training and held-out datasets as checkpoints.
    GenData(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    reduction_g: Option<usize>,
    #[arg(long)]
    shared_m: Option<usize>,
    /// `auto` or `fixed`.
    #[arg(long)]
    epsilon_mode: Option<String>,
    /// Ball radius; implies `--epsilon-mode fixed`.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda_iou: Option<f64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// on|off
    #[arg(long)]
    toggle_sdmoe: Option<String>,
    #[arg(long)]
    toggle_mff: Option<String>,
    #[arg(long)]
    toggle_gram: Option<String>,
    #[arg(long)]
    toggle_mhg: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("n_experts", self.n_experts.map(|v| v.to_string()));
        push("top_k", self.top_k.map(|v| v.to_string()));
        push("reduction_g", self.reduction_g.map(|v| v.to_string()));
        push("shared_m", self.shared_m.map(|v| v.to_string()));
        push("epsilon_value", self.epsilon.map(|v| v.to_string()));
        push("epsilon_mode", self.epsilon_mode.clone());
        push("lambda_iou", self.lambda_iou.map(|v| v.to_string()));
        push("lambda_l1", self.lambda_l1.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("toggle_sdmoe", self.toggle_sdmoe.clone());
        push("toggle_mff", self.toggle_mff.clone());
        push("toggle_gram", self.toggle_gram.clone());
        push("toggle_mhg", self.toggle_mhg.clone());
        kv
    }

    fn resolve(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, Error> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out <dir> is required".into()))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve(RunConfig::default())?;
            let out = common.out_dir()?;
            let model = TrackerModel::new(&cfg)?;
            let (train, test) = datasets(&cfg)?;
            let (train, test) = (prepare_all(&model, &train)?, prepare_all(&model, &test)?);
            println!("{}", sdmoe_core::harness::MetricsRecord::HEADER);
            let outcome = train_model(model, &train, &test, |r| println!("{}", r.to_line()))?;
            write_run(out, &outcome.model, &outcome.records)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { model, common } => {
            let saved = std::fs::read_to_string(model.join("config.txt"))
                .map_err(|e| Error::Config(format!("cannot read run config in {}: {e}", model.display())))?;
            let cfg = common.resolve(RunConfig::from_text(&saved)?)?;
            let m = load_model(&cfg, &model)?;
            let (_, test) = datasets(&cfg)?;
            let rec = evaluate(&m, &prepare_all(&m, &test)?, cfg.optim.steps)?;
            println!("{}", sdmoe_core::harness::MetricsRecord::HEADER);
            println!("{}", rec.to_line());
        }
        Command::Gradcheck(common) => {
            let cfg = common.resolve(tiny_config())?;
            let checks = end_to_end(&cfg, GRADCHECK_STEP)?;
            let mut worst: f64 = 0.0;
            for c in &checks {
                println!("{}\t{:.3e}\t{:.3e}", c.name, c.rel_error, c.grad_scale);
                worst = worst.max(c.rel_error);
            }
            println!("worst\t{worst:.3e}\t{} parameters", checks.len());
            if worst > GRADCHECK_TOL {
                return Err(Error::Numeric(format!(
                    "gradient check failed: worst relative error {worst:.3e} > {GRADCHECK_TOL:e}"
                )));
            }
        }
        Command::Ablate(common) => {
            let cfg = common.resolve(RunConfig::default())?;
            let table = ablation_table(&ablate(&cfg)?);
            print!("{table}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("ablation.tsv"), table)?;
            }
        }
        Command::GenData(common) => {
            let cfg = common.resolve(RunConfig::default())?;
            let out = common.out_dir()?;
            let (train, test) = datasets(&cfg)?;
            std::fs::create_dir_all(out)?;
            train.to_checkpoint()?.write(out, "train")?;
            test.to_checkpoint()?.write(out, "test")?;
            eprintln!(
                "wrote {} training and {} held-out samples to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Degenerate(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
