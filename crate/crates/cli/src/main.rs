//! Command-line experiment runner.

mod runner;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser)]
#[command(name = "feddg", version, about = "Federated domain generalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more leave-one-domain-out experiments.
    Run(RunArgs),
}

/// Every option is also a config-file key with the same name.
#[derive(Args, Default)]
struct RunArgs {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synth4` or the path of a dataset directory.
    #[arg(long)]
    task: Option<String>,
    /// Image side of the generated suite.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    n_train: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    /// Held-out domains, comma separated (`A,C`), or `all`.
    #[arg(long)]
    hold_out: Option<String>,
    /// `elcfs`, `fedavg` or an ablation label; comma separated for several.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_cfsi: bool,
    #[arg(long)]
    no_bel: bool,
    #[arg(long)]
    no_boundary_loss: bool,
    /// `fixed:V` or `uniform:LO,HI`; repeat for a sweep.
    #[arg(long)]
    lambda_mode: Vec<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Inner (meta) step size.
    #[arg(long)]
    beta: Option<String>,
    /// Put the positive pair in the InfoNCE denominator too.
    #[arg(long)]
    infonce_standard: bool,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    local_epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Seeds, comma separated.
    #[arg(long)]
    seed: Option<String>,
    /// Source-client count or inclusive range (`1..3`) for a sweep.
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    base_width: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    /// Evaluate the global model every N rounds; 0 for the end only.
    #[arg(long)]
    eval_interval: Option<String>,
    /// Report the 95th-percentile Hausdorff distance.
    #[arg(long)]
    hd95: bool,
    /// Train the clients of a round on separate threads.
    #[arg(long)]
    parallel_clients: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Validate and print the resolved settings without training.
    #[arg(long)]
    dry_run: bool,
}

impl RunArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let values = [
            ("task", &self.task),
            ("size", &self.size),
            ("n-train", &self.n_train),
            ("n-test", &self.n_test),
            ("data-seed", &self.data_seed),
            ("hold-out", &self.hold_out),
            ("mode", &self.mode),
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("tau", &self.tau),
            ("beta", &self.beta),
            ("lr", &self.lr),
            ("rounds", &self.rounds),
            ("local-epochs", &self.local_epochs),
            ("batch", &self.batch),
            ("seed", &self.seed),
            ("clients", &self.clients),
            ("base-width", &self.base_width),
            ("depth", &self.depth),
            ("eval-interval", &self.eval_interval),
            ("out", &self.out),
        ];
        for (k, v) in values {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        }
        if !self.lambda_mode.is_empty() {
            out.push(("lambda-mode", self.lambda_mode.join(" ")));
        }
        let switches = [
            ("no-cfsi", self.no_cfsi),
            ("no-bel", self.no_bel),
            ("no-boundary-loss", self.no_boundary_loss),
            ("infonce-standard", self.infonce_standard),
            ("hd95", self.hd95),
            ("parallel-clients", self.parallel_clients),
        ];
        for (k, on) in switches {
            if on {
                out.push((k, "true".into()));
            }
        }
        out
    }

    fn resolve(&self) -> anyhow::Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for (k, v) in self.pairs() {
            s.set(k, &v).map_err(|e| anyhow::anyhow!("--{k}: {e}"))?;
        }
        Ok(s)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => args.resolve().and_then(|s| runner::run(&s, args.dry_run)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
