use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradleak::defense::DefenseConfig;
use gradleak::experiment::{self, parse_list, parse_seeds, ArchKind, Command, ExperimentConfig};
use gradleak::init::RandomScheme;
use gradleak::Result;

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Input reconstruction from federated gradient updates")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extraction from randomly initialized models (one row per init scheme and seed)
    Passive(Opts),
    /// Trap-weight attack at a single scale s
    Active(Opts),
    /// Trap-weight attack over a grid of s
    SweepS(Opts),
    /// Grid over first-layer width N and batch size B
    SweepBn(Opts),
    /// Grid over the number of local mini-batches k
    Averaging(Opts),
    /// Clipping, noise and DPSGD variants against the trap attack
    Defend(Opts),
    /// Optimization baseline against analytic extraction on B = 1 updates
    Dlg(Opts),
    /// Token-level extraction through an embedding model
    Text(Opts),
}

#[derive(Args)]
struct Opts {
    /// JSON config; missing keys take the subcommand's defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed list: `7`, `1,2,3` or `0..10`
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trap scale(s), comma separated
    #[arg(long)]
    s: Option<String>,
    /// Gaussian init sigma(s); for `defend`, the noise multiplier
    #[arg(long)]
    sigma: Option<String>,
    /// Batch size(s)
    #[arg(long)]
    batch: Option<String>,
    /// First dense width(s)
    #[arg(long)]
    neurons: Option<String>,
    /// Local mini-batches per update
    #[arg(long)]
    k: Option<String>,
    /// `mnist`, `mnist:<dir>`, `image:HxWxC`, `tabular:D`, `tokens:SEQxVOCAB`
    #[arg(long)]
    dataset: Option<String>,
    /// fcnn, cnn, text or mlp
    #[arg(long)]
    arch: Option<String>,
    /// Width multiplier for the hidden layers
    #[arg(long)]
    width: Option<f64>,
    /// Write reconstruction grids for the first seed
    #[arg(long)]
    grids: bool,
    /// Print the effective config and exit
    #[arg(long)]
    print_config: bool,
}

fn build(command: Command, o: &Opts) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::from_json(command, &std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::preset(command),
    };
    if let Some(s) = &o.seed {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(p) = &o.out {
        cfg.out = p.clone();
    }
    if let Some(s) = &o.s {
        let v: Vec<f64> = parse_list(s)?;
        cfg.trap.s = v[0];
        cfg.s_grid = v;
    }
    if let Some(s) = &o.sigma {
        let v: Vec<f64> = parse_list(s)?;
        if command == Command::Defend {
            for case in &mut cfg.defenses {
                if let Some(d) = case.defense.as_mut().filter(|d: &&mut DefenseConfig| d.noise_sigma > 0.0) {
                    d.noise_sigma = v[0];
                }
            }
        } else {
            cfg.schemes = v.iter().map(|&sigma| RandomScheme::Gaussian { sigma }).collect();
            cfg.init = cfg.schemes[0];
        }
    }
    if let Some(s) = &o.batch {
        let v: Vec<usize> = parse_list(s)?;
        cfg.round.batch_size = v[0];
        cfg.batch_grid = v;
    }
    if let Some(s) = &o.neurons {
        let v: Vec<usize> = parse_list(s)?;
        cfg.arch.neurons = v[0];
        cfg.neurons_grid = v;
    }
    if let Some(s) = &o.k {
        let v: Vec<usize> = parse_list(s)?;
        cfg.round.local_batches = v[0];
        cfg.k_grid = v;
    }
    if let Some(d) = &o.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(a) = &o.arch {
        cfg.arch.kind = a.parse::<ArchKind>()?;
    }
    if let Some(w) = o.width {
        cfg.arch.width = w;
    }
    cfg.grids |= o.grids;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, opts) = match &cli.cmd {
        Cmd::Passive(o) => (Command::Passive, o),
        Cmd::Active(o) => (Command::Active, o),
        Cmd::SweepS(o) => (Command::SweepS, o),
        Cmd::SweepBn(o) => (Command::SweepBn, o),
        Cmd::Averaging(o) => (Command::Averaging, o),
        Cmd::Defend(o) => (Command::Defend, o),
        Cmd::Dlg(o) => (Command::Dlg, o),
        Cmd::Text(o) => (Command::Text, o),
    };
    let result = build(command, opts).and_then(|cfg| {
        if opts.print_config {
            println!("{}", cfg.to_json()?);
            return Ok(());
        }
        let report = experiment::run(&cfg)?;
        for v in &report.variants {
            let s = v.summary();
            println!(
                "{:<28} seeds={:<3} A={:.3} P={:.3} R={:.3}",
                s.variant,
                s.seeds.len(),
                s.mean_a,
                s.mean_p,
                s.mean_r
            );
        }
        for c in &report.dlg {
            println!(
                "seed={:<3} analytic_err={:.2e} ({:.3} ms) dlg_err={:.3} ({:.1} ms, {} it)",
                c.seed, c.analytic_err, c.analytic_ms, c.dlg_err, c.dlg_ms, c.dlg_iterations
            );
        }
        println!("outputs in {}", cfg.out.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
