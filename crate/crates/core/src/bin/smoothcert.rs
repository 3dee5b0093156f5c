use clap::{Parser, ValueEnum};
use smoothcert::harness::{run, Command, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Pretrain,
    Finetune,
    Certify,
    Predict,
    SpsaTrain,
    Report,
    Sweep,
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Finetune => Command::Finetune,
            Cmd::Certify => Command::Certify,
            Cmd::Predict => Command::Predict,
            Cmd::SpsaTrain => Command::SpsaTrain,
            Cmd::Report => Command::Report,
            Cmd::Sweep => Command::Sweep,
            Cmd::Compare => Command::Compare,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Peft {
    Lora,
    Adapter,
    Prompt,
    Full,
    None,
}

/// Noise-augmented fine-tuning and randomized-smoothing certification of a
/// small Vision Transformer.
#[derive(Debug, Parser)]
#[command(name = "smoothcert", version)]
struct Cli {
    command: Cmd,
    /// Curve files to compare (compare only).
    inputs: Vec<PathBuf>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise level for both training and certification.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n0: Option<u64>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    peft: Option<Peft>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Certify every skip-th test example.
    #[arg(long)]
    skip: Option<usize>,
    /// Only certify test indices below this bound.
    #[arg(long)]
    max: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, String> {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    let s = |v: Option<f64>| v.map(|x| x.to_string());
    put("train.sigma", s(cli.sigma));
    put("smoothing.sigma", s(cli.sigma));
    put("smoothing.n0", cli.n0.map(|v| v.to_string()));
    put("smoothing.n", cli.n.map(|v| v.to_string()));
    put("smoothing.alpha", s(cli.alpha));
    let method = cli.peft.map(|p| format!("{p:?}").to_lowercase());
    put("peft.method", method);
    put("peft.rank", cli.rank.map(|v| v.to_string()));
    put("peft.prompt_length", cli.prompt_len.map(|v| v.to_string()));
    put("seed", cli.seed.map(|v| v.to_string()));
    put("certify.skip", cli.skip.map(|v| v.to_string()));
    put("certify.max", cli.max.map(|v| v.to_string()));
    put("certify.workers", cli.workers.map(|v| v.to_string()));
    put("out", cli.out.as_ref().map(|p| p.display().to_string()));
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(o)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let o = match overrides(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = ExperimentConfig::load(cli.config.as_deref(), &o).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_text());
            return Ok(Default::default());
        }
        run(cli.command.into(), &cfg, &cli.inputs)
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
