use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfx_cli::ablate::{ablate, LAMBDA_GRID};
use cfx_cli::bundle::{explain, find_bundles, verify};
use cfx_cli::eval_table::{report_text, summary_table};
use cfx_cli::output::to_json;
use cfx_cli::pipeline::train;
use cfx_cli::{CliError, RunConfig, Settings};

#[derive(Parser)]
#[command(
    name = "cfx",
    version,
    about = "Local, group-wise and global counterfactual explanations"
)]
struct Cli {
    /// Log progress to stderr (-vv for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and the conditional flow on the training folds.
    Train(RunArgs),
    /// Generate counterfactuals and write a report bundle.
    Explain(RunArgs),
    /// Recompute the metrics of report bundles and check them against the stored values.
    Evaluate(EvaluateArgs),
    /// Sweep the diversity weight on a group-wise problem.
    AblateDiversity(AblateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML file with the same keys as the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        self.settings.over(file).resolve()
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Bundle directories written by `explain`.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
    /// Print the recomputed metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Diversity weights to try.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

fn run(command: Command, out: &mut String) -> Result<(), CliError> {
    match command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = train(&cfg)?;
            let _ = writeln!(
                out,
                "classifier accuracy: train {:.4}, test {:.4} ({} epochs)",
                s.classifier_train_accuracy, s.classifier_test_accuracy, s.classifier_epochs
            );
            let _ = writeln!(
                out,
                "flow log density: train {:.4}, test {:.4} ({} epochs)",
                s.flow_train_log_density, s.flow_test_log_density, s.flow_epochs
            );
            let _ = writeln!(
                out,
                "models written to {} in {:.1}s",
                cfg.model_dir.display(),
                s.seconds
            );
        }
        Command::Explain(args) => {
            let cfg = args.resolve()?;
            for outcome in explain(&cfg)? {
                let m = &outcome.metrics;
                let origin = m.origin_class.as_deref().unwrap_or("other classes");
                let _ = writeln!(
                    out,
                    "{} mode, {origin} -> {}: {} iterations, hard/soft gap {:.3e}",
                    m.mode, m.target_class, m.iterations, m.hard_soft_gap
                );
                out.push_str(&report_text(&m.metrics));
                let _ = writeln!(
                    out,
                    "bundle written to {} ({:.1}s optimizing)",
                    outcome.out.display(),
                    outcome.timing.optimize_seconds
                );
            }
        }
        Command::Evaluate(args) => {
            let mut bundles = Vec::new();
            for path in &args.bundles {
                bundles.extend(find_bundles(path)?);
            }
            let mut reports = Vec::new();
            let mut failed = Vec::new();
            for bundle in &bundles {
                let v = verify(bundle)?;
                let status = if v.mismatches.is_empty() { "PASS" } else { "FAIL" };
                let _ = writeln!(out, "{status} {}", bundle.display());
                for m in &v.mismatches {
                    let _ = writeln!(out, "  {m}");
                }
                if !v.mismatches.is_empty() {
                    failed.push(bundle.display().to_string());
                }
                reports.push(v.metrics);
            }
            if args.json {
                out.push_str(&to_json(&reports)?);
            } else {
                out.push_str(&summary_table(&bundles, &reports));
            }
            if !failed.is_empty() {
                return Err(CliError::Data(format!(
                    "bundles disagree with their recomputation: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::AblateDiversity(args) => {
            let cfg = args.run.resolve()?;
            let grid = args.grid.unwrap_or_else(|| LAMBDA_GRID.to_vec());
            let rows = ablate(&cfg, &grid)?;
            let _ = writeln!(
                out,
                "{:>10} {:>8} {:>9} {:>8} {:>8} {:>6} {:>10} {:>10}",
                "lambda_d", "valid", "l2", "plaus", "cover", "groups", "min_cos", "centroid"
            );
            for r in rows {
                let cos = r
                    .min_pairwise_cosine
                    .map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
                let _ = writeln!(
                    out,
                    "{:>10} {:>8.3} {:>9.3} {:>8.3} {:>8.3} {:>6} {:>10} {:>10.3}",
                    r.lambda_diversity,
                    r.validity,
                    r.proximity,
                    r.prob_plausibility,
                    r.coverage,
                    r.active_groups,
                    cos,
                    r.mean_centroid_distance
                );
            }
            let _ = writeln!(out, "sweep written to {}", cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut out = String::new();
    let result = run(cli.command, &mut out);
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
