//! Command-line entry point tying the pipeline together.
//!
//! Exit codes: 0 success, 1 data errors, 2 usage errors. Reports go to
//! standard output, warnings to standard error.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::backend::{BackendKind, ReplayTrace, SyntheticModel};
use crate::error::{Error, Result};
use crate::meter::{RankContext, Sampler, SamplerConfig};
use crate::model::Topology;
use crate::synthload::{self, RunOptions, WorkloadConfig};
use crate::tracefmt::{self, RunHeader};

#[derive(Parser)]
#[command(
    name = "emeter",
    version,
    about = "Region-based energy profiling: measure, merge, and analyze per-rank energy traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PeriodArg {
    /// Sampling period in milliseconds (overrides EMETER_PERIOD_MS).
    #[arg(long)]
    period_ms: Option<u64>,
}

impl PeriodArg {
    fn resolve(&self) -> Result<SamplerConfig> {
        match self.period_ms {
            Some(ms) => SamplerConfig::new(ms),
            None => SamplerConfig::from_env(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic workload and write one record file per rank.
    Simulate {
        /// Workload config file.
        #[arg(long)]
        workload: PathBuf,
        /// Synthetic power model file.
        #[arg(long)]
        model: PathBuf,
        /// Topology file.
        #[arg(long)]
        topology: PathBuf,
        /// Directory for rank record files.
        #[arg(long)]
        out_dir: PathBuf,
        /// GPU frequency in MHz (defaults to the model's current frequency).
        #[arg(long)]
        freq: Option<f64>,
        /// Run identifier stamped into the record files.
        #[arg(long, default_value = "run")]
        run_id: String,
        #[command(flatten)]
        period: PeriodArg,
    },
    /// Drive regions from a script against a counter-file or replay backend.
    Record {
        /// Backend: counters:DIR or replay:TRACE.
        #[arg(long)]
        backend: String,
        /// Topology file.
        #[arg(long)]
        topology: PathBuf,
        /// Region script: lines `begin <name> <t_us>` / `end <name> <t_us>`.
        #[arg(long)]
        script: PathBuf,
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
        /// Run identifier stamped into the record file.
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Rank to record as.
        #[arg(long, default_value_t = 0)]
        rank: u32,
        #[command(flatten)]
        period: PeriodArg,
    },
    /// Merge per-rank record files into one run file.
    Merge {
        /// Rank record files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output run file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-device energy breakdown of a run.
    ReportDevices {
        /// Merged run file.
        run: PathBuf,
        /// Topology file.
        #[arg(long)]
        topology: PathBuf,
    },
    /// Per-function, per-device energy breakdown of a run.
    ReportFunctions {
        /// Merged run file.
        run: PathBuf,
        /// Topology file.
        #[arg(long)]
        topology: PathBuf,
        /// How many top regions to flag.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Energy-delay product across runs at different GPU frequencies.
    Edp {
        /// Run files, one per frequency.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Baseline frequency in MHz.
        #[arg(long)]
        baseline: f64,
        /// Also report per-function EDP.
        #[arg(long)]
        per_function: bool,
    },
    /// Compare tool-measured energy against job-level accounting.
    Validate {
        /// Merged run file.
        run: PathBuf,
        /// Job energy in joules, as reported by the scheduler.
        #[arg(long)]
        job_energy: f64,
        /// Job window as start_us,end_us.
        #[arg(long)]
        job_window: String,
        /// Node power trace covering the job window.
        #[arg(long)]
        node_trace: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Topology::parse(&text).map_err(|e| match e {
        Error::Syntax { line, msg } => {
            Error::data(format!("{}:{line}: syntax error: {msg}", path.display()))
        }
        other => other,
    })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            workload,
            model,
            topology,
            out_dir,
            freq,
            run_id,
            period,
        } => {
            let cfg = WorkloadConfig::from_file(&workload)?;
            let model = SyntheticModel::from_file(&model)?;
            let topo = load_topology(&topology)?;
            let run = synthload::run_workload(
                &cfg,
                &model,
                &topo,
                &RunOptions {
                    out_dir,
                    run_id,
                    freq_mhz: freq,
                    sampler: period.resolve()?,
                },
            )?;
            warn_all(&run.warnings);
            for path in &run.rank_files {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Record {
            backend,
            topology,
            script,
            out,
            run_id,
            rank,
            period,
        } => {
            let kind = BackendKind::parse_cli(&backend)?;
            let topo = load_topology(&topology)?;
            let script = RegionScript::from_file(&script)?;
            let cfg = period.resolve()?;
            record_run(&kind, &topo, &script, &out, &run_id, rank, cfg)
        }
        Command::Merge { inputs, out } => {
            let merged = tracefmt::merge(&inputs)?;
            tracefmt::write_run_file(&merged, &out)?;
            println!("{} records -> {}", merged.records.len(), out.display());
            Ok(())
        }
        Command::ReportDevices { run, topology } => {
            let topo = load_topology(&topology)?;
            let run = tracefmt::read_run_file(&run)?;
            let breakdown = analysis::report_devices(&run, &topo)?;
            warn_all(&breakdown.warnings);
            print!("{}", analysis::render_device_report(&run, &breakdown));
            Ok(())
        }
        Command::ReportFunctions { run, topology, top } => {
            let topo = load_topology(&topology)?;
            let run = tracefmt::read_run_file(&run)?;
            let fb = analysis::report_functions(&run, &topo)?;
            warn_all(&fb.warnings);
            print!("{}", analysis::render_function_report(&run, &fb, top));
            Ok(())
        }
        Command::Edp {
            runs,
            baseline,
            per_function,
        } => {
            let runs = runs
                .iter()
                .map(|p| tracefmt::read_run_file(p))
                .collect::<Result<Vec<_>>>()?;
            let total = analysis::edp_table(&runs, baseline)?;
            let pf = if per_function {
                let pf = analysis::edp_per_function(&runs, baseline)?;
                warn_all(&pf.warnings);
                Some(pf)
            } else {
                None
            };
            print!(
                "{}",
                analysis::render_edp_report(&total, pf.as_ref(), baseline)
            );
            Ok(())
        }
        Command::Validate {
            run,
            job_energy,
            job_window,
            node_trace,
        } => {
            let run = tracefmt::read_run_file(&run)?;
            let window = parse_window(&job_window)?;
            let trace = ReplayTrace::from_file(&node_trace)?;
            let v = analysis::validate_against_job(&run, job_energy, window, &trace)?;
            warn_all(&v.warnings);
            print!("{}", analysis::render_validation_report(&v));
            Ok(())
        }
    }
}

fn parse_window(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::data(format!("bad job window '{s}' (want start_us,end_us)")))?;
    let parse = |t: &str| -> Result<u64> {
        t.trim()
            .parse()
            .map_err(|_| Error::data(format!("bad job window timestamp '{t}'")))
    };
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScriptOp {
    Begin,
    End,
}

struct RegionScript {
    events: Vec<(ScriptOp, String, u64)>,
}

impl RegionScript {
    fn from_file(path: &Path) -> Result<RegionScript> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut events = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            if tokens.len() != 3 {
                return Err(Error::syntax(
                    lineno,
                    "expected '<begin|end> <name> <t_us>'",
                ));
            }
            let op = match tokens[0] {
                "begin" => ScriptOp::Begin,
                "end" => ScriptOp::End,
                other => return Err(Error::syntax(lineno, format!("unknown op '{other}'"))),
            };
            let t_us: u64 = tokens[2]
                .parse()
                .map_err(|_| Error::syntax(lineno, format!("bad timestamp '{}'", tokens[2])))?;
            if let Some((_, _, prev)) = events.last() {
                if t_us < *prev {
                    return Err(Error::syntax(
                        lineno,
                        "script timestamps must be non-decreasing",
                    ));
                }
            }
            events.push((op, tokens[1].to_string(), t_us));
        }
        if events.is_empty() {
            return Err(Error::data("region script has no events"));
        }
        Ok(RegionScript { events })
    }
}

fn record_run(
    kind: &BackendKind,
    topo: &Topology,
    script: &RegionScript,
    out: &Path,
    run_id: &str,
    rank: u32,
    cfg: SamplerConfig,
) -> Result<()> {
    let backend = kind.build()?;
    let label = backend.label();

    let realtime = matches!(kind, BackendKind::CounterFiles(_));
    let sampler = if realtime {
        Sampler::start(backend, topo, cfg)?
    } else {
        // Replay runs on the virtual clock at script speed: deterministic
        // and as fast as the script.
        Sampler::manual(backend, topo, cfg, script.events[0].2)?
    };
    let mut ctx = RankContext::new(run_id, rank, topo, sampler.clone())?;

    let started = Instant::now();
    for (op, region, t_us) in &script.events {
        if realtime {
            let target = Duration::from_micros(*t_us);
            if let Some(remaining) = target.checked_sub(started.elapsed()) {
                std::thread::sleep(remaining);
            }
        }
        match op {
            ScriptOp::Begin => ctx.region_begin(region, *t_us),
            ScriptOp::End => {
                ctx.region_end(region, *t_us)?;
            }
        }
    }
    let records = ctx.flush()?;
    sampler.stop();
    warn_all(&sampler.take_warnings());
    if let Some(err) = sampler.error_state() {
        eprintln!("warning: sampler ended in error state: {err}");
    }

    let header = RunHeader::new(run_id, topo.digest(), &label, cfg.period_ms);
    tracefmt::write_rank_file(&records, &header, out)?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}
