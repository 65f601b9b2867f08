use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use aqueduct_cli::{instance_or_demo, service, EXIT_FAILURE, EXIT_INVALID, EXIT_OK, EXIT_USAGE};
use aqueduct_core::demo::{self, DEMO_SEED};
use aqueduct_core::engine::STAGE_YEARS;
use aqueduct_core::{
    evaluate, load_plan, read_kpi_inputs, run_stage, validate_plan, write_run_dir, EngineError, InstanceError,
    Masterplan, RunConfig, SimMode, Slice,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aqueduct", version, about = "Staged masterplan simulator for regional water transport networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Rep,
}

impl From<Mode> for SimMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => SimMode::Full,
            Mode::Rep => SimMode::Representative,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check an instance and, optionally, a plan against it.
    Validate {
        /// Instance JSON; the bundled demo when omitted.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Simulate one stage and write a run directory.
    Simulate {
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Masterplan JSON; no interventions when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = DEMO_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value = "rep")]
        mode: Mode,
        #[arg(long, default_value_t = STAGE_YEARS)]
        years: u32,
        /// Skip the per-hour table.
        #[arg(long)]
        no_hours: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the scenario trace of an instance and seed.
    Trace {
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = DEMO_SEED)]
        seed: u64,
        #[arg(long, default_value_t = STAGE_YEARS)]
        years: u32,
        /// Output file; `.tsv` writes the columnar form.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute KPIs of a run directory for a slice.
    Kpi {
        rundir: PathBuf,
        /// e.g. `national`, `utility:U1`, `municipality:M03,years:2030-2034`
        #[arg(long, default_value = "national")]
        slice: String,
        #[arg(long)]
        json: bool,
    },
    /// Serve the planning API.
    Serve {
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = DEMO_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Generate a synthetic instance.
    GenInstance {
        #[arg(long, default_value_t = 12)]
        munis: usize,
        #[arg(long, default_value_t = DEMO_SEED)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error with the exit code it maps to.
struct Failure(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let code = match e.downcast_ref::<InstanceError>() {
            Some(InstanceError::Invalid(_) | InstanceError::Parse { .. }) => EXIT_INVALID,
            _ => match e.downcast_ref::<EngineError>() {
                Some(EngineError::PlanInvalid(_)) => EXIT_INVALID,
                _ => EXIT_FAILURE,
            },
        };
        Failure(code, e)
    }
}

fn plan_for(path: Option<&Path>, start_year: i32) -> anyhow::Result<Masterplan> {
    match path {
        Some(p) => Ok(load_plan(p)?),
        None => Ok(Masterplan::empty(start_year)),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { instance, plan } => {
            let inst = instance_or_demo(instance.as_deref())?;
            let s = inst.summary();
            println!(
                "instance {}: {} utilities, {} municipalities, {} sources, {} sites, {} connections",
                s.name, s.utilities, s.municipalities, s.sources, s.sites, s.connections
            );
            if let Some(p) = plan {
                let plan = load_plan(&p)?;
                let trace = inst.trace(DEMO_SEED, plan.horizon_years.max(STAGE_YEARS))?;
                let violations = validate_plan(&plan, &inst, &inst.initial_state(&trace));
                if !violations.is_empty() {
                    for v in &violations {
                        eprintln!("{v}");
                    }
                    return Err(Failure(EXIT_INVALID, anyhow::anyhow!("plan {} has {} violations", p.display(), violations.len())));
                }
                println!("plan {}: {} interventions, valid", plan.name, plan.interventions.len());
            }
        }
        Command::Simulate { instance, plan, seed, mode, years, no_hours, out } => {
            let inst = instance_or_demo(instance.as_deref())?;
            let plan = plan_for(plan.as_deref(), inst.start_year)?;
            let trace = inst.trace(seed, years.max(plan.horizon_years).max(STAGE_YEARS))?;
            let state = inst.initial_state(&trace);
            let cfg = RunConfig { mode: mode.into(), years, record_hours: !no_hours, ..Default::default() };
            let output = run_stage(&inst, state, &plan, &trace, &cfg, &mut |p| eprintln!("year {} ({}/{})", p.year, p.done, p.total))?;
            write_run_dir(&out, &inst, &plan, &trace, &output).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", output.kpi.summary());
        }
        Command::Trace { instance, seed, years, out } => {
            let inst = instance_or_demo(instance.as_deref())?;
            let trace = inst.trace(seed, years)?;
            let text = if out.extension().is_some_and(|e| e == "tsv") {
                trace.to_columns()
            } else {
                serde_json::to_string_pretty(&trace)? + "\n"
            };
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Kpi { rundir, slice, json } => {
            let slice = Slice::parse(&slice).map_err(|e| Failure(EXIT_USAGE, e.into()))?;
            let inputs = read_kpi_inputs(&rundir)?;
            let report = evaluate(&inputs, &slice);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_columns());
            }
        }
        Command::Serve { instance, seed, port } => {
            let inst = instance_or_demo(instance.as_deref())?;
            let app = service::router(service::AppState::new(inst, seed)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app).await
            })?;
        }
        Command::GenInstance { munis, seed, out } => {
            if munis < 2 {
                return Err(Failure(EXIT_USAGE, anyhow::anyhow!("need at least 2 municipalities")));
            }
            let text = demo::generate(munis, seed).to_canonical_json();
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Error chain joined with ": ", skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(Failure(code, e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(code)
        }
    }
}
