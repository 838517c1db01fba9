use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use varembed_cli::error::CliError;
use varembed_cli::run::{self, Artifacts};

#[derive(Parser)]
#[command(name = "varembed", version, about = "Variational embeddings of densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an embedding and report diagnostics.
    Fit(Common),
    /// Conservation and EL residual diagnostics for a fitted result or an
    /// unfit config.
    Diagnose(Common),
    /// Integrate the EL equation or compare against the score limit.
    Dynamics(Common),
    /// Fit a Gaussian density and compare with the closed-form solution.
    PcaCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Config file, preset name or (for diagnose) a result.json.
    input: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("VAREMBED_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("VAREMBED_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(CliError::Config("VAREMBED_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(Artifacts, PathBuf, bool, String), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Fit(c) => {
            let cfg = run::load_config(&c.input, &c.overrides, c.seed)?;
            cfg.validate()?;
            let r = run::fit(&cfg)?;
            let o = &r.result;
            let line = format!(
                "J = {:.6} ± {:.1e} nats, |grad| = {:.2e}, converged = {}, finite = {}",
                o.objective.value,
                o.objective.tolerance,
                o.optimizer.final_gradient_norm,
                o.optimizer.converged,
                !(o.finiteness.volume_exceeds_ceiling || o.finiteness.norm_exceeds_ceiling)
            );
            Ok((r.artifacts, c.out, c.quiet, line))
        }
        Command::Diagnose(c) => {
            let (cfg, model) = run::load_diagnose_input(&c.input, &c.overrides, c.seed)?;
            cfg.validate()?;
            let r = run::diagnose(&cfg, model)?;
            let mut line = format!("diagnose ({}): all_pass = {}", r.summary.source, r.summary.all_pass);
            for ch in &r.summary.checks {
                line.push_str(&format!(
                    "\n  {:<28} {:>11.3e} <= {:<9.1e} {}",
                    ch.name,
                    ch.value,
                    ch.threshold,
                    if ch.pass { "ok" } else { "FAIL" }
                ));
            }
            Ok((r.artifacts, c.out, c.quiet, line))
        }
        Command::Dynamics(c) => {
            let cfg = run::load_config(&c.input, &c.overrides, c.seed)?;
            cfg.validate()?;
            let r = run::dynamics(&cfg)?;
            let s = &r.summary;
            let mut line = format!("dynamics ({}): {} steps", s.mode, s.steps_taken);
            if let Some(h) = &s.halt {
                line.push_str(&format!(", halted: {h}"));
            }
            if let Some(o) = &s.order_check {
                line.push_str(&format!(", order ratio = {:?}", o.ratio));
            }
            if let Some(l) = &s.limit {
                line.push_str(&format!(
                    ", post-transient momentum gap = {:.3e} (threshold {})",
                    l.max_post_transient_momentum_gap, l.threshold
                ));
            }
            Ok((r.artifacts, c.out, c.quiet, line))
        }
        Command::PcaCheck(c) => {
            let cfg = run::load_config(&c.input, &c.overrides, c.seed)?;
            cfg.validate()?;
            let r = run::pca_check(&cfg)?;
            let v = &r.verdict;
            let line = format!(
                "pca-check: pass = {}, J fitted = {:.6}, closed form = {:.6}, formula = {:.6}",
                v.pass, v.fitted_objective, v.closed_form_objective, v.formula_objective
            );
            Ok((r.artifacts, c.out, c.quiet, line))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = execute(cli).and_then(|(artifacts, out, quiet, line)| {
        artifacts.write_to(&out)?;
        if !quiet {
            println!("{line}");
            println!("wrote {} files to {}", artifacts.files.len(), out.display());
        }
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
