use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use retroheap::harness::explore::{explore, ExploreConfig};
use retroheap::harness::report::{write_csv, write_histogram, write_json, CsvRow};
use retroheap::harness::workloads::{run_workload, Workload, WorkloadSpec};
use retroheap::protocol::ProtocolFaults;
use retroheap::MinorVariant;

#[derive(Parser)]
#[command(name = "retroheap", version, about = "Parallel heap workloads and protocol explorer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and report collector statistics.
    Run(RunArgs),
    /// Enumerate interleavings of the major-slice protocol.
    Explore(ExploreArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    workload: Workload,
    #[arg(long, default_value_t = 1)]
    domains: usize,
    #[arg(long, value_enum, default_value_t = MinorVariant::Stw)]
    minor: MinorVariant,
    #[arg(long, default_value_t = 256 * 1024)]
    arena_words: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Cap on the work done by one major slice, in words.
    #[arg(long)]
    max_slice: Option<usize>,
    #[arg(long)]
    min_slice: Option<usize>,
    #[arg(long)]
    pacing: Option<f64>,
    /// Defaults to a per-workload value.
    #[arg(long)]
    iterations: Option<usize>,
    /// Objects in the ephecache retained graph.
    #[arg(long, default_value_t = 1_000_000)]
    retained: usize,
    /// Report pauses in work units instead of nanoseconds.
    #[arg(long)]
    logical_clock: bool,
    /// Check the heap against a full trace at every stop-the-world point.
    #[arg(long)]
    debug_oracle: bool,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Pause histogram for gnuplot.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    None,
    SkipBarrierRecheck,
    DecrementWithoutFlag,
    SkipRoundCompare,
}

#[derive(clap::Args)]
struct ExploreArgs {
    #[arg(long, default_value_t = 2)]
    domains: usize,
    #[arg(long, default_value_t = 1)]
    revivals: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_states: usize,
    /// Inject a protocol bug to check that it is found.
    #[arg(long, value_enum, default_value_t = Fault::None)]
    fault: Fault,
}

fn run(a: RunArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = WorkloadSpec::new(a.workload, a.domains);
    spec.minor = a.minor;
    spec.arena_words = a.arena_words;
    spec.seed = a.seed;
    spec.max_slice = a.max_slice;
    spec.min_slice = a.min_slice;
    spec.pacing = a.pacing;
    spec.iterations = a.iterations.unwrap_or(spec.iterations);
    spec.retained = a.retained;
    spec.logical_clock = a.logical_clock;
    spec.debug_oracle |= a.debug_oracle;
    let r = run_workload(&spec)?;
    let rows = [CsvRow::from_result(&r)];
    match &a.out {
        Some(p) => write_csv(BufWriter::new(File::create(p)?), &rows)?,
        None => write_csv(io::stdout().lock(), &rows)?,
    }
    if let Some(p) = &a.json {
        let mut w = BufWriter::new(File::create(p)?);
        write_json(&mut w, &r)?;
        w.flush()?;
    }
    if let Some(p) = &a.histogram {
        let mut w = BufWriter::new(File::create(p)?);
        write_histogram(&mut w, &r.report.pauses)?;
        w.flush()?;
    }
    if !r.report.oracle_violations.is_empty() {
        for v in &r.report.oracle_violations {
            eprintln!("oracle: {v}");
        }
        return Err("heap oracle reported violations".into());
    }
    eprintln!("elapsed {:.3}s checksum {}", r.elapsed_ns as f64 / 1e9, r.checksum);
    Ok(())
}

fn run_explore(a: ExploreArgs) -> Result<bool, Box<dyn std::error::Error>> {
    if !(1..=3).contains(&a.domains) {
        return Err("explore supports 1 to 3 domains".into());
    }
    if a.revivals > 2 {
        return Err("explore supports at most 2 revivals".into());
    }
    let faults = match a.fault {
        Fault::None => ProtocolFaults::NONE,
        Fault::SkipBarrierRecheck => ProtocolFaults { skip_barrier_recheck: true, ..ProtocolFaults::NONE },
        Fault::DecrementWithoutFlag => ProtocolFaults { decrement_without_flag: true, ..ProtocolFaults::NONE },
        Fault::SkipRoundCompare => ProtocolFaults { skip_round_compare: true, ..ProtocolFaults::NONE },
    };
    let cfg = ExploreConfig { domains: a.domains, revivals: a.revivals, max_states: a.max_states, faults, ..Default::default() };
    let v = explore(&cfg);
    println!(
        "states {} transitions {} {} completed-cycle states {}",
        v.states,
        v.transitions,
        if v.complete { "(exhaustive)" } else { "(state bound reached)" },
        v.cycled_states
    );
    for viol in &v.violations {
        println!("violation: {}", viol.what);
        for (i, s) in viol.schedule.iter().enumerate() {
            println!("  {i:4}  {s}");
        }
    }
    if v.ok() {
        println!("no violations");
    }
    Ok(v.ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run(a) => run(a).map(|()| true),
        Cmd::Explore(a) => run_explore(a),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
