use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cap_core::checkpoint::Checkpoint;
use cap_core::compress::CompressionPlan;
use cap_core::harness::{self, RunConfig};
use cap_core::train;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cap", version, about = "Cascaded projection compression for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (key = value). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Compression plan (key = value).
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent jobs (ablation arms).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Where artifacts are written (and checkpoints read by default).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network; writes checkpoint.bin and metrics.csv.
    Train,
    /// Compress a checkpoint with a plan; writes compressed.bin and report.json.
    Compress {
        /// Defaults to <out-dir>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Single-layer compression sweep over keep ratios; writes sweep.csv.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; writes gradcheck.csv.
    Gradcheck,
    /// Ablation arms over several seeds; writes ablation.csv.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> AnyResult<()> {
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_plan(path: Option<&Path>) -> AnyResult<CompressionPlan> {
    match path {
        Some(p) => Ok(CompressionPlan::parse(&fs::read_to_string(p)?)
            .map_err(|e| format!("{}: {e}", p.display()))?),
        None => Err("this command needs --plan".into()),
    }
}

fn run(cli: Cli) -> AnyResult<bool> {
    let c = &cli.common;
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p, c.seed).map_err(|e| format!("{}: {e}", p.display()))?,
        None => RunConfig::parse("", c.seed)?,
    };
    fs::create_dir_all(&c.out_dir)?;
    let out = c.out_dir.as_path();
    let checkpoint_path = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| out.join("checkpoint.bin"));

    match &cli.command {
        Command::Train => {
            let t = harness::run_train(&cfg)?;
            write(out, "checkpoint.bin", t.checkpoint.to_bytes()?)?;
            write(out, "metrics.csv", train::metrics_csv(&t.metrics)?)?;
            if let Some(last) = t.metrics.last() {
                println!("epoch {}: train acc {:.4}, test acc {:.4}", last.epoch, last.train_acc, last.test_acc);
            }
        }
        Command::Compress { checkpoint } => {
            let base = Checkpoint::load(&checkpoint_path(checkpoint))?;
            let mut plan = load_plan(c.plan.as_deref())?;
            if let Some(s) = c.seed {
                plan.seed = s;
            }
            let r = harness::run_compress(&cfg, &base, &plan)?;
            write(out, "compressed.bin", r.checkpoint.to_bytes()?)?;
            write(out, "report.json", harness::to_json(&r.summary)?)?;
            let s = &r.summary;
            println!(
                "flops {:.2}%  params {:.2}%  peak memory {:.2}%  acc {:.4} (no ft) / {:.4} (ft) / {:.4} (base)",
                s.flops_pct, s.param_pct, s.peak_mem_pct, s.acc_no_ft, s.acc_ft, s.base_acc
            );
        }
        Command::Eval { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint_path(checkpoint))?;
            let r = harness::run_eval(&cfg, &ck.network)?;
            write(out, "eval.json", harness::to_json(&r)?)?;
            println!("loss {:.6}  accuracy {:.4}  ({} samples)", r.loss, r.accuracy, r.samples);
        }
        Command::Sweep { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint_path(checkpoint))?;
            let plan = match &c.plan {
                Some(_) => load_plan(c.plan.as_deref())?,
                None => CompressionPlan::default(),
            };
            let rows = harness::run_sweep(&cfg, &ck.network, &plan)?;
            write(out, "sweep.csv", harness::to_csv(harness::SWEEP_HEADER, &rows)?)?;
            for (layer, rho) in harness::sweep_trends(&rows) {
                println!("layer {layer}: spearman(compression, recon error) = {rho:.3}");
            }
        }
        Command::Gradcheck => {
            let results = harness::run_gradcheck(&cfg.gradcheck)?;
            write(out, "gradcheck.csv", harness::to_csv(harness::GRADCHECK_HEADER, &results)?)?;
            print!("{}", harness::gradcheck_table(&results));
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::Ablate { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint_path(checkpoint))?;
            let plan = load_plan(c.plan.as_deref())?;
            let a = harness::run_ablate(&cfg, &ck.network, &plan, c.threads)?;
            write(out, "ablation.csv", harness::to_csv(harness::ABLATION_HEADER, &a.rows)?)?;
            for r in &a.rows {
                println!("{:<18} {:.4} ± {:.4}", r.arm, r.mean_acc, r.std_acc);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
