use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lisa_harness::config::{output_root, RunConfig};
use lisa_harness::error::{HarnessError, EXIT_CONFIG};
use lisa_harness::estimate::{estimate, human_bytes, parse_precision, EstimateRequest};
use lisa_harness::plot::plot_data;
use lisa_harness::quad::quad_check_file;
use lisa_harness::runner::run_file;
use lisa_harness::sweep::{parse_values, sweep, Axis};

/// Desk-scale fine-tuning experiments: full-parameter AdamW, LoRA and
/// layerwise importance sampling (LISA).
///
/// Outputs are written below $LISA_OUTPUT_ROOT (default: the current
/// directory). Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O
/// error.
#[derive(Debug, Parser)]
#[command(name = "lisa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run { config: PathBuf },
    /// Run a configuration once per value of one axis and summarise.
    Sweep {
        config: PathBuf,
        /// gamma, K, seed or rank.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 2,4,8.
        #[arg(long)]
        values: String,
    },
    /// Convergence check of sampled AdamW on a convex quadratic.
    QuadCheck { config: PathBuf },
    /// Merge run directories into plot-ready loss and norm tables.
    PlotData {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-form training-memory estimate for a named architecture.
    EstimateMemory {
        #[arg(long)]
        preset: String,
        /// full, lora or lisa.
        #[arg(long)]
        method: String,
        #[arg(long, conflicts_with = "gamma")]
        rank: Option<usize>,
        #[arg(long)]
        gamma: Option<usize>,
        /// Adapt the output projection too (lora).
        #[arg(long)]
        include_head: bool,
        /// f64, mixed16 or a uniform byte width.
        #[arg(long, default_value = "mixed16")]
        precision: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Sequence length; defaults to the preset's context length.
        #[arg(long)]
        seq: Option<usize>,
    },
}

fn dispatch(command: Command) -> Result<i32, HarnessError> {
    match command {
        Command::Run { config } => {
            let out = run_file(&config)?;
            println!(
                "{} run complete: {} steps, final loss {}, logs in {}",
                out.log.method,
                out.log.steps.len(),
                out.log.final_loss().map(|l| l.to_string()).unwrap_or_default(),
                out.dir.display()
            );
            Ok(0)
        }
        Command::Sweep { config, axis, values } => {
            let axis: Axis = axis.parse()?;
            let values = parse_values(&values)?;
            let base = RunConfig::load(&config)?;
            let out = sweep(&base, axis, &values, &output_root())?;
            for r in &out.rows {
                println!(
                    "{}={}: {} {}",
                    axis.as_str(),
                    r.axis_value,
                    r.status,
                    r.final_loss.map(|l| format!("final loss {l}")).unwrap_or_else(|| r.detail.clone())
                );
            }
            println!("summary: {}", out.summary.display());
            Ok(out.exit_code())
        }
        Command::QuadCheck { config } => {
            let (rows, table) = quad_check_file(&config)?;
            println!("T,avg_suboptimality,scaled");
            for r in &rows {
                println!("{},{},{}", r.steps, r.avg_suboptimality, r.scaled);
            }
            println!("table: {}", table.display());
            Ok(0)
        }
        Command::PlotData { dirs, out } => {
            let res = plot_data(&dirs, &out)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            for f in &res.files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::EstimateMemory {
            preset,
            method,
            rank,
            gamma,
            include_head,
            precision,
            batch,
            seq,
        } => {
            let req = EstimateRequest {
                preset,
                method,
                rank,
                gamma,
                include_head,
                precision: parse_precision(&precision)?,
                batch,
                seq,
            };
            let (arch, est) = estimate(&req)?;
            println!("{} ({} parameters), method {}", arch.name, arch.param_count(), req.method);
            for (name, v) in [
                ("weights", est.weights),
                ("gradients", est.gradients),
                ("moments", est.moments),
                ("adapters", est.adapters),
                ("activations", est.activations),
                ("total", est.total),
            ] {
                println!("  {name:<12} {v:>16}  {}", human_bytes(v));
            }
            println!("  trainable parameters: {}", est.trainable_params);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
