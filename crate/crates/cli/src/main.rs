use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rtmw_core::explore::{best_point, write_sweep_csv};
use rtmw_core::time::{format_duration, parse_duration};
use rtmw_core::{
    run_latency, run_simulation, run_sweep, Horizon, LatencySpec, MappingScheme,
    PriorityAssignment, RunReport, SweepSpec, TaskSetDocument, VersionFilter,
};

#[derive(Parser)]
#[command(name = "rtmw", version, about = "Real-time middleware explorer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a task-set document without running it.
    Validate {
        file: PathBuf,
        /// Print diagnostics as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a document on the simulator.
    Simulate {
        file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Trace CSV output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report JSON output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Simulate the cross product of policies over one or more documents.
    Sweep {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Mapping schemes: GLOBAL, PARTITIONED, OFFLINE.
        #[arg(long, value_delimiter = ',', default_value = "GLOBAL,PARTITIONED")]
        mappings: Vec<String>,
        /// Priority assignments: RM, DM, EDF, USER.
        #[arg(long, value_delimiter = ',', default_value = "EDF,DM")]
        priorities: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "true,false")]
        preemptive: Vec<bool>,
        /// Version restrictions: cpu, gpu, both.
        #[arg(long, value_delimiter = ',', default_value = "both")]
        versions: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        /// Output directory for sweep.csv and per-point reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand the document's SDF section into a DAG document.
    ExpandSdf {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Periodic wake-up latency on the threaded backend.
    Latency {
        #[arg(long, short = 't', default_value_t = 1)]
        threads: usize,
        /// Interval in microseconds.
        #[arg(long, short = 'i', default_value_t = 10_000)]
        interval: u64,
        #[arg(long, short = 'l', default_value_t = 1000)]
        loops: u64,
        /// Policy as MAPPING-PRIORITY, e.g. P-EDF or G-DM.
        #[arg(long, default_value = "P-EDF")]
        policy: String,
        #[arg(long)]
        non_preemptive: bool,
        /// Run with fewer processors than contexts.
        #[arg(long)]
        oversubscribe: bool,
        #[arg(long)]
        no_mlock: bool,
        #[arg(long)]
        no_pin: bool,
        /// Report JSON output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Duration (`30ms`, `2s`, ns) or hyperperiod count (`3hp`); one
    /// hyperperiod by default.
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long, env = "RT_YASMIN_SEED", default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn horizon(&self) -> Result<Option<Horizon>> {
        let Some(h) = &self.horizon else { return Ok(None) };
        if let Some(k) = h.strip_suffix("hp") {
            let k: u64 = k.trim().parse().with_context(|| format!("invalid horizon `{h}`"))?;
            if k == 0 {
                bail!("horizon must be positive");
            }
            return Ok(Some(Horizon::Hyperperiods(k)));
        }
        let ns = parse_duration(h).map_err(|e| anyhow!(e))?;
        if ns == 0 {
            bail!("horizon must be positive");
        }
        Ok(Some(Horizon::Nanos(ns)))
    }
}

fn load(path: &Path) -> Result<TaskSetDocument> {
    TaskSetDocument::load(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_mapping(s: &str) -> Result<MappingScheme> {
    Ok(match s.to_ascii_uppercase().as_str() {
        "G" | "GLOBAL" => MappingScheme::Global,
        "P" | "PARTITIONED" => MappingScheme::Partitioned,
        "OFF" | "OFFLINE" => MappingScheme::Offline,
        _ => bail!("unknown mapping scheme `{s}`"),
    })
}

fn parse_priority(s: &str) -> Result<PriorityAssignment> {
    Ok(match s.to_ascii_uppercase().as_str() {
        "RM" => PriorityAssignment::Rm,
        "DM" => PriorityAssignment::Dm,
        "EDF" => PriorityAssignment::Edf,
        "USER" => PriorityAssignment::User,
        _ => bail!("unknown priority assignment `{s}`"),
    })
}

fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), report)?;
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!(
        "{} ({}{}, {} workers, versions {}), horizon {}",
        report.policy,
        if report.preemptive { "P" } else { "NP" },
        report.seed.map(|s| format!(", seed {s}")).unwrap_or_default(),
        report.workers,
        report.version_filter,
        format_duration(report.horizon_ns)
    );
    println!(
        "{:<16} {:>8} {:>9} {:>7} {:>12} {:>12} {:>12}",
        "task", "released", "completed", "misses", "resp min", "resp avg", "resp max"
    );
    for t in &report.tasks {
        println!(
            "{:<16} {:>8} {:>9} {:>7} {:>12} {:>12} {:>12}",
            t.name,
            t.released,
            t.completed,
            t.misses,
            format_duration(t.response.min),
            format_duration(t.response.mean.round() as u64),
            format_duration(t.response.max)
        );
    }
    println!(
        "total: {} released, {} completed, {} misses (ratio {:.4})",
        report.released, report.completed, report.misses, report.miss_ratio
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
}

fn validate(file: &Path, json: bool) -> Result<bool> {
    let outcome = load(file).and_then(|doc| doc.compile().map_err(Into::into));
    match (outcome, json) {
        (Ok(ts), false) => {
            println!("{}", TaskSetDocument::summary(&ts));
            for w in &ts.warnings {
                println!("warning: {w}");
            }
            Ok(true)
        }
        (Ok(ts), true) => {
            let diag = serde_json::json!({
                "ok": true,
                "summary": TaskSetDocument::summary(&ts),
                "errors": [],
                "warnings": ts.warnings,
            });
            println!("{}", serde_json::to_string_pretty(&diag)?);
            Ok(true)
        }
        (Err(e), false) => {
            eprintln!("error: {e:#}");
            Ok(false)
        }
        (Err(e), true) => {
            let diag = serde_json::json!({"ok": false, "errors": [format!("{e:#}")], "warnings": []});
            println!("{}", serde_json::to_string_pretty(&diag)?);
            Ok(false)
        }
    }
}

fn simulate(file: &Path, run: &RunArgs, trace: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let doc = load(file)?;
    let ts = doc.compile()?;
    let out = run_simulation(&ts, &doc.resolved()?.sim_model, run.horizon()?, run.seed)?;
    if let Some(p) = trace {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        out.trace.write_csv(BufWriter::new(f))?;
    }
    if let Some(p) = report {
        write_report(p, &out.report)?;
    }
    print_summary(&out.report);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    files: &[PathBuf],
    run: &RunArgs,
    mappings: &[String],
    priorities: &[String],
    preemptive: &[bool],
    versions: &[String],
    repetitions: u32,
    out: &Path,
) -> Result<()> {
    let spec = SweepSpec {
        mappings: mappings.iter().map(|m| parse_mapping(m)).collect::<Result<_>>()?,
        priorities: priorities.iter().map(|p| parse_priority(p)).collect::<Result<_>>()?,
        preemptive: preemptive.to_vec(),
        version_filters: versions
            .iter()
            .map(|v| VersionFilter::parse(v).ok_or_else(|| anyhow!("unknown version mode `{v}`")))
            .collect::<Result<_>>()?,
        repetitions,
        horizon: run.horizon()?,
        seed: run.seed,
    };
    let mut docs = Vec::new();
    for f in files {
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        docs.push((name, load(f)?));
    }
    let runs = run_sweep(&docs, &spec)?;
    let points_dir = out.join("points");
    std::fs::create_dir_all(&points_dir).with_context(|| format!("creating {}", points_dir.display()))?;
    let csv_path = out.join("sweep.csv");
    let f = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_sweep_csv(&runs, BufWriter::new(f))?;
    for r in &runs {
        let name = format!("{}_{}_r{}.json", r.document, r.point.label(), r.repetition);
        write_report(&points_dir.join(name), &r.report)?;
    }
    println!(
        "{} runs ({} documents × {} points × {} repetitions) -> {}",
        runs.len(),
        docs.len(),
        spec.points()?.len(),
        repetitions,
        csv_path.display()
    );
    if let Some((doc, point, misses, resp)) = best_point(&runs) {
        println!(
            "best: {} {} on {doc}: {misses} misses, mean response {}",
            point.label(),
            if point.preemptive { "(preemptive)" } else { "(non-preemptive)" },
            format_duration(resp.round() as u64)
        );
    }
    Ok(())
}

fn expand(file: &Path, out: &Path) -> Result<()> {
    let doc = load(file)?;
    let (dag, exp) = doc.expand_sdf()?;
    dag.compile().context("expanded document does not validate")?;
    let mut f = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(f, "{}", dag.to_json()?)?;
    println!("{}", exp.repetition_line());
    println!("{} nodes, {} edges -> {}", exp.nodes.len(), exp.edges.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Validate { file, json } => validate(file, *json),
        Cmd::Simulate {
            file,
            run,
            trace,
            report,
        } => simulate(file, run, trace.as_deref(), report.as_deref()).map(|()| true),
        Cmd::Sweep {
            files,
            run,
            mappings,
            priorities,
            preemptive,
            versions,
            repetitions,
            out,
        } => sweep(files, run, mappings, priorities, preemptive, versions, *repetitions, out).map(|()| true),
        Cmd::ExpandSdf { file, out } => expand(file, out).map(|()| true),
        Cmd::Latency {
            threads,
            interval,
            loops,
            policy,
            non_preemptive,
            oversubscribe,
            no_mlock,
            no_pin,
            report,
        } => (|| {
            let (m, p) = policy
                .split_once('-')
                .ok_or_else(|| anyhow!("policy must look like P-EDF, got `{policy}`"))?;
            let mut spec = LatencySpec::new(*threads, *interval, *loops);
            spec.mapping = parse_mapping(m)?;
            spec.priority = parse_priority(p)?;
            spec.preemptive = !non_preemptive;
            spec.options.oversubscribe = *oversubscribe;
            spec.options.lock_memory = !no_mlock;
            spec.options.pin_threads = !no_pin;
            let r = run_latency(&spec)?;
            println!("{r}");
            for w in &r.warnings {
                println!("warning: {w}");
            }
            if let Some(path) = report {
                let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                serde_json::to_writer_pretty(BufWriter::new(f), &r)?;
            }
            Ok(true)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
