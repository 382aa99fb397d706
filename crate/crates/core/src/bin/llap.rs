//! Experiment driver. Every subcommand reads one TOML config; command-line
//! flags override the corresponding config fields. LLAP_THREADS caps
//! seed-level parallelism.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use llap_core::config::{ExperimentKind, RunConfig};
use llap_core::io::{read_metrics, write_checkpoint, write_metrics};
use llap_core::pipeline::{predict_curves, run_pipeline, summarise, train_and_checkpoint};
use llap_core::Result;

#[derive(Parser)]
#[command(name = "llap", about = "Linearised-Laplace experiment driver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides out-dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evidence objective: naive | star-full | star-simple
    #[arg(long)]
    objective: Option<String>,
    /// Precision tying: single | per-group
    #[arg(long)]
    tying: Option<String>,
    /// Include bias parameters in the linearised subspace
    #[arg(long)]
    include_biases: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Train networks and write parameter checkpoints
    Train(Common),
    /// Run the configured experiment and write evidence metrics
    Evidence(Common),
    /// Emit predictive curves (CSV: x, mean, std) over the test grid
    Predict(Common),
    /// Sweep the normalised-weight scale k under both tying modes
    Kscan(Common),
    /// Compare objectives across training checkpoints
    Earlystop(Common),
    /// Run the scaling-invariance certificate suite
    Verify(Common),
    /// Aggregate a metrics file: mean and std of test NLL per configuration
    Report(Common),
}

fn load(common: &Common, kind: Option<ExperimentKind>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(k) = kind {
        cfg.kind = k;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(obj) = &common.objective {
        cfg.objective = obj.clone();
    }
    if let Some(tying) = &common.tying {
        cfg.tying = tying.clone();
    }
    if let Some(ib) = common.include_biases {
        cfg.include_biases = ib;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg)
}

fn run_and_write(cfg: &RunConfig, name: &str) -> Result<()> {
    let records = run_pipeline(cfg)?;
    let path = cfg.out_dir.join(name);
    write_metrics(&records, &path)?;
    let failed = records.iter().filter(|r| r.kind == "error").count();
    println!("wrote {} records to {}", records.len(), path.display());
    if failed > 0 {
        eprintln!("{failed} seed(s) failed; see error records");
    }
    for (key, n, mean, std) in summarise(&records) {
        println!("{key}: n={n} test-nll mean={mean:.6} std={std:.6}");
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load(common, None)?;
    for &seed in &cfg.seeds {
        let (final_params, checkpoints) = train_and_checkpoint(&cfg, seed)?;
        for (epoch, params) in &checkpoints {
            let path = cfg.out_dir.join(format!("seed{seed}-epoch{epoch}.ckpt"));
            write_checkpoint(params, &path)?;
        }
        let path = cfg.out_dir.join(format!("seed{seed}-final.ckpt"));
        write_checkpoint(&final_params, &path)?;
        println!("seed {seed}: wrote {} checkpoint(s)", checkpoints.len() + 1);
    }
    Ok(())
}

fn cmd_predict(common: &Common) -> Result<()> {
    let cfg = load(common, None)?;
    for &seed in &cfg.seeds {
        for (tag, rows) in predict_curves(&cfg, seed)? {
            let path = cfg.out_dir.join(format!("predict-seed{seed}-{tag}.csv"));
            let mut text = String::from("x,mean,std\n");
            for (x, mean, std) in rows {
                text.push_str(&format!("{x},{mean},{std}\n"));
            }
            std::fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    let cfg = load(common, None)?;
    let path = cfg.out_dir.join("metrics.ndjson");
    let records = read_metrics(&path)?;
    println!("{} records in {}", records.len(), path.display());
    for (key, n, mean, std) in summarise(&records) {
        println!("{key}: n={n} test-nll mean={mean:.6} std={std:.6}");
    }
    let checks: Vec<_> = records
        .iter()
        .filter(|r| r.objective.starts_with("check:"))
        .collect();
    if !checks.is_empty() {
        let passed = checks.iter().filter(|r| r.converged).count();
        println!("checks passed: {passed}/{}", checks.len());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Evidence(c) => load(c, None).and_then(|cfg| run_and_write(&cfg, "metrics.ndjson")),
        Command::Predict(c) => cmd_predict(c),
        Command::Kscan(c) => {
            load(c, Some(ExperimentKind::KScan)).and_then(|cfg| run_and_write(&cfg, "metrics.ndjson"))
        }
        Command::Earlystop(c) => load(c, Some(ExperimentKind::EarlyStop))
            .and_then(|cfg| run_and_write(&cfg, "metrics.ndjson")),
        Command::Verify(c) => {
            load(c, Some(ExperimentKind::Verify)).and_then(|cfg| run_and_write(&cfg, "metrics.ndjson"))
        }
        Command::Report(c) => cmd_report(c),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
