use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sprc_core::harness::{self, ControllerKind, LoadCase, RunRecord};
use sprc_core::Error;

/// Load-case runner for constrained SPRC, MBC-IPC and the collective baseline.
#[derive(Parser)]
#[command(name = "sprc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file of [[case]] tables; the built-in presets when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for wind, noise and probe; the case's own seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; each run writes to <out>/<case>-seed<seed>/<controller>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one load case.
    Run {
        #[command(flatten)]
        common: Common,
        /// Case id, e.g. LC3.
        #[arg(long = "case")]
        case: String,
        /// Controller(s) to run; repeatable. Defaults to the case's own.
        #[arg(long = "controller")]
        controllers: Vec<ControllerKind>,
    },
    /// Run every case with all three controllers and write table.csv.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 if the closed-loop checks fail.
        #[arg(long)]
        check: bool,
        /// Parallel runs (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the chosen cases and controllers and write table.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "case", required = true)]
        cases: Vec<String>,
        #[arg(long = "controller")]
        controllers: Vec<ControllerKind>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Json(_) => 2,
        Error::Aborted(_) => 3,
        _ => 1,
    }
}

fn load_cases(common: &Common) -> Result<Vec<LoadCase>, Error> {
    let mut cases = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            harness::parse_cases(&text)?
        }
        None => harness::presets(),
    };
    if let Some(seed) = common.seed {
        for c in &mut cases {
            c.seed = seed;
        }
    }
    Ok(cases)
}

/// Runs cases on worker threads; results keep the input order.
fn run_all(cases: Vec<LoadCase>, jobs: Option<usize>) -> Vec<Result<RunRecord, Error>> {
    let jobs = jobs.or_else(|| std::thread::available_parallelism().ok().map(|n| n.get())).unwrap_or(1).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<RunRecord, Error>>>> =
        cases.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cases.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(case) = cases.get(i) else { break };
                log::info!("running {} / {}", case.id, case.controller);
                let result = harness::run_case(case);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("result slot").expect("every case ran")).collect()
}

fn persist(records: &[RunRecord], out: &Path) -> Result<(), Error> {
    for r in records {
        let dir = harness::write_run(r, out)?;
        println!("{}: {} -> {}", r.case.id, r.case.controller, dir.display());
    }
    Ok(())
}

fn write_table(records: &[RunRecord], out: &Path) -> Result<harness::ComparisonTable, Error> {
    let refs: Vec<&RunRecord> = records.iter().collect();
    let table = harness::compare(&refs);
    fs::create_dir_all(out)?;
    let path = out.join("table.csv");
    table.write_csv(fs::File::create(&path)?)?;
    println!("table: {}", path.display());
    Ok(table)
}

/// Completed runs, or the first failure. Aborted runs are reported, the
/// rest are still written.
fn collect(results: Vec<Result<RunRecord, Error>>) -> (Vec<RunRecord>, Option<Error>) {
    let mut ok = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(rec) => ok.push(rec),
            Err(e) => {
                eprintln!("error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    (ok, first_err)
}

fn cross(cases: &[LoadCase], controllers: &[ControllerKind]) -> Vec<LoadCase> {
    cases.iter().flat_map(|c| controllers.iter().map(|k| c.with_controller(*k))).collect()
}

fn execute(cli: Cli) -> Result<(), (Error, Option<u8>)> {
    let wrap = |e: Error| (e, None);
    match cli.command {
        Command::Run { common, case, controllers } => {
            let cases = load_cases(&common).map_err(wrap)?;
            let case = harness::find_case(&cases, &case).map_err(wrap)?;
            let controllers = if controllers.is_empty() { vec![case.controller] } else { controllers };
            let (records, err) = collect(run_all(cross(&[case], &controllers), Some(1)));
            persist(&records, &common.out).map_err(wrap)?;
            for r in &records {
                let m = &r.metrics;
                println!(
                    "{} {}: ADC {:.2}%, 1P {:.1} kN·m, violations {} angle / {} rate",
                    r.case.id,
                    r.case.controller,
                    m.adc.mean(),
                    m.one_p_constrained.iter().sum::<f64>() / m.one_p_constrained.len() as f64,
                    m.audit.angle_violations,
                    m.audit.rate_violations
                );
            }
            err.map_or(Ok(()), |e| Err(wrap(e)))
        }
        Command::Suite { common, check, jobs } => {
            let cases = load_cases(&common).map_err(wrap)?;
            let (records, err) = collect(run_all(cross(&cases, &ControllerKind::ALL), jobs));
            persist(&records, &common.out).map_err(wrap)?;
            write_table(&records, &common.out).map_err(wrap)?;
            if let Some(e) = err {
                return Err(wrap(e));
            }
            if check {
                let refs: Vec<&RunRecord> = records.iter().collect();
                let checks = harness::suite_checks(&refs);
                let mut failed = false;
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                    failed |= !c.passed;
                }
                if failed {
                    return Err((Error::Aborted("suite checks failed".into()), Some(4)));
                }
            }
            Ok(())
        }
        Command::Compare { common, cases, controllers, jobs } => {
            let all = load_cases(&common).map_err(wrap)?;
            let chosen =
                cases.iter().map(|id| harness::find_case(&all, id)).collect::<Result<Vec<_>, _>>().map_err(wrap)?;
            let (records, err) = collect(run_all(cross(&chosen, &controllers), jobs));
            persist(&records, &common.out).map_err(wrap)?;
            write_table(&records, &common.out).map_err(wrap)?;
            err.map_or(Ok(()), |e| Err(wrap(e)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, code)) => {
            eprintln!("error: {e}");
            ExitCode::from(code.unwrap_or_else(|| exit_code(&e)))
        }
    }
}
