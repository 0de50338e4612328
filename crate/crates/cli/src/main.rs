use std::error::Error as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scenario_truncation::config::{RunConfig, SampleCount};
use scenario_truncation::optimization::NormChoice;
use scenario_truncation::pipeline::{self, RunSummary};
use scenario_truncation::Result;

#[derive(Parser)]
#[command(name = "sctrunc", version, about = "Scenario truncation for disturbance-feedback trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the decision-variable count and the required number of scenarios.
    SampleCount(Overrides),
    /// Draw the design scenarios.
    Generate(Overrides),
    /// Map and truncate the scenarios, writing buffers and the error curve.
    Truncate(Overrides),
    /// Solve the buffered program on the selected scenarios.
    Solve(Overrides),
    /// Containment check and Monte Carlo rates for the solved policy.
    Validate(Overrides),
    /// Run every stage in order.
    Pipeline(Overrides),
    /// Run the built-in double-integrator example.
    Demo {
        #[command(flatten)]
        overrides: Overrides,
        /// Print the embedded configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    One,
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Run configuration (TOML). Required except for `demo`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Design seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenarios to keep.
    #[arg(long, conflicts_with = "target_eps")]
    nhat: Option<usize>,
    /// Keep scenarios until d_H is at or below this value.
    #[arg(long)]
    target_eps: Option<f64>,
    /// Explicit scenario count.
    #[arg(long)]
    n: Option<usize>,
    /// Norm bounding the gain entries.
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Prune structurally zero rows of the truncation mapping.
    #[arg(long, value_enum)]
    prune: Option<Switch>,
    /// Monte Carlo validation samples.
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self, demo: bool) -> Result<RunConfig> {
        let mut cfg = match (&self.config, demo) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, true) => RunConfig::demo(),
            (None, false) => {
                return Err(scenario_truncation::Error::Config {
                    field: "--config".into(),
                    message: "a configuration file is required".into(),
                })
            }
        };
        if let Some(s) = self.seed {
            cfg.seeds.design = s;
        }
        if let Some(k) = self.nhat {
            cfg.truncation.nhat = Some(k);
            cfg.truncation.target_eps = None;
        }
        if let Some(e) = self.target_eps {
            cfg.truncation.target_eps = Some(e);
            cfg.truncation.nhat = None;
        }
        if let Some(n) = self.n {
            cfg.samples.n = Some(n);
        }
        if let Some(n) = self.norm {
            cfg.solver.norm = match n {
                NormArg::One => NormChoice::One,
                NormArg::Two => NormChoice::Two,
            };
        }
        if let Some(p) = self.prune {
            cfg.truncation.prune = matches!(p, Switch::On);
        }
        if let Some(m) = self.mc_samples {
            cfg.validation.samples = m;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SampleCount(o) => sample_count(&o.load(false)?),
        Command::Generate(o) => {
            let run = o.load(false)?.resolve()?;
            let dir = run.config.output.dir.clone();
            let set = pipeline::stage_generate(&run, &dir)?;
            println!("wrote {} scenarios to {}", set.len(), dir.join(pipeline::SCENARIO_FILE).display());
            Ok(())
        }
        Command::Truncate(o) => {
            let run = o.load(false)?.resolve()?;
            let rec = pipeline::stage_truncate(&run, &run.config.output.dir)?;
            let r = &rec.result;
            println!("selected {} scenarios: {:?}", r.selected.len(), r.selected);
            println!("d_H = {:.6}  eps_cl = {:.6}  eps_u = {:.6}", r.d_h, r.eps_cl, r.eps_u);
            Ok(())
        }
        Command::Solve(o) => {
            let run = o.load(false)?.resolve()?;
            let rec = pipeline::stage_solve(&run, &run.config.output.dir)?;
            println!("status {:?}, objective {:.6}", rec.policy.solver_status, rec.policy.objective_value);
            Ok(())
        }
        Command::Validate(o) => {
            let run = o.load(false)?.resolve()?;
            let rec = pipeline::stage_validate(&run, &run.config.output.dir)?;
            let c = &rec.containment;
            println!(
                "containment {} over {} scenarios (max residual state {:+.3e}, input {:+.3e})",
                if c.all_satisfied() { "pass" } else { "FAIL" },
                c.checked,
                c.max_state_excess,
                c.max_input_excess
            );
            let m = &rec.monte_carlo;
            println!(
                "joint violation rate {:.5} [{:.5}, {:.5}] over {} samples",
                m.joint.rate, m.joint.lower, m.joint.upper, m.samples
            );
            Ok(())
        }
        Command::Pipeline(o) => full_run(o.load(false)?),
        Command::Demo { overrides, print_config } => {
            if print_config {
                print!("{}", scenario_truncation::config::DEMO_CONFIG);
                return Ok(());
            }
            full_run(overrides.load(true)?)
        }
    }
}

fn sample_count(cfg: &RunConfig) -> Result<()> {
    let n_theta = cfg.n_theta()?;
    let count = cfg.sample_count()?;
    println!("n_theta = {n_theta}");
    match count {
        SampleCount::Bound { n } => println!("N = {n}"),
        SampleCount::Override { n, bound } => {
            println!("N = {n}");
            match bound {
                Some(b) => eprintln!("warning: explicit samples.n = {n} bypasses the (delta, beta) bound, which asks for N = {b}"),
                None => eprintln!("warning: explicit samples.n = {n} is used without a (delta, beta) bound"),
            }
        }
    }
    Ok(())
}

fn full_run(cfg: RunConfig) -> Result<()> {
    let run = cfg.resolve()?;
    if let SampleCount::Override { n, bound: Some(b) } = run.count {
        eprintln!("warning: explicit samples.n = {n} bypasses the (delta, beta) bound, which asks for N = {b}");
    }
    let dir = run.config.output.dir.clone();
    let summary = pipeline::run_pipeline(&run, &dir)?;
    write_summary(&summary, &dir)?;
    print!("{summary}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn write_summary(summary: &RunSummary, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}
