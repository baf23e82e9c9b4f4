//! `fcan`: generate the glyph task, train, evaluate, run ablations, draw
//! attention maps and run the gradient-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod outdir;

#[derive(Parser, Debug)]
#[command(name = "fcan", version, about = "Fully convolutional attention networks on synthetic glyph images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic glyph dataset.
    Generate(Common),
    /// Train a model on a dataset.
    Train(Common),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Common),
    /// Train and compare the ablation arms.
    Ablate(Common),
    /// Draw attention heat maps for one image.
    Visualize(Common),
    /// Run the gradient and oracle checks.
    Gradcheck(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Overrides the `reward` key.
    #[arg(long, value_enum)]
    reward: Option<Reward>,
    /// Overrides the `parts` key (number of attention steps).
    #[arg(long)]
    parts: Option<usize>,
    /// Perturbs one backward rule before running the checks.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    /// Further `key=value` overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Reward {
    Greedy,
    Delayed,
}

/// Command failure, carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }

    pub fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
        move |e| Failure::Data(format!("{}: {e}", path.display()))
    }
}

impl From<fcan::Error> for Failure {
    fn from(e: fcan::Error) -> Self {
        match e {
            fcan::Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl Common {
    /// The config file with command-line overrides applied.
    pub fn load_config(&self) -> Result<fcan::config::Config, Failure> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?;
                fcan::config::Config::parse(&text)?
            }
            None => fcan::config::Config::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got `{o}`")))?;
            c.set(k.trim(), v.trim());
        }
        if let Some(s) = self.seed {
            c.set("seed", s);
        }
        if let Some(r) = self.reward {
            c.set("reward", if matches!(r, Reward::Greedy) { "greedy" } else { "delayed" });
        }
        if let Some(t) = self.parts {
            c.set("parts", t);
        }
        Ok(c)
    }

    pub fn require_out(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| Failure::Usage("--out is required".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Visualize(a) => commands::visualize(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fcan: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
