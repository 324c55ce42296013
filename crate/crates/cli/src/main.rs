//! `mergeforge`: merge checkpoints, sample merge subsets, and summarize
//! evaluation results.
//!
//! Exit codes: 0 success, 1 I/O or format error, 2 schema mismatch,
//! 3 numerical failure, 4 invalid input, 5 missing evaluation results.

mod job;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use mergeforge::experiment::norms::{delta_norm, norm_curve, norm_stats_csv};
use mergeforge::experiment::{
    discover_methods, interference_report, sample_subsets, EvalResults, Reference, SamplingPlan,
};
use mergeforge::pipeline::{run_merge, run_sweep, write_atomic, SweepParameter, TensorProgress};
use mergeforge::{Checkpoint, Error, ErrorKind, Result};
use serde::Deserialize;

use crate::job::MergeArgs;

pub const THREADS_ENV: &str = "MERGEFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mergeforge",
    version,
    about = "Merge fine-tuned checkpoints that share a base model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge fine-tuned checkpoints into one
    Merge(MergeArgs),
    /// Merge once per value of a hyperparameter grid; --out names a directory
    Sweep {
        #[command(flatten)]
        merge: MergeArgs,
        /// lambda, density or beta
        #[arg(long)]
        sweep: SweepParameter,
        /// Comma-separated values
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        grid: Vec<f64>,
    },
    /// Sample checkpoint subsets to merge
    Plan {
        /// Comma-separated checkpoint ids
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "pool",
            required_unless_present = "pool"
        )]
        ids: Vec<String>,
        /// Pool size P; ids become ft01..ftP
        #[arg(long)]
        pool: Option<usize>,
        /// Comma-separated merge sizes
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Subsets per size
        #[arg(long, default_value_t = 15)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the plan here instead of standard output
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Success rate and mean delta of merged models against a reference
    Report {
        /// Directory of per-model JSON results and/or CSV files
        #[arg(long, value_name = "DIR")]
        results_dir: PathBuf,
        #[arg(long, value_name = "PATH")]
        plan: PathBuf,
        #[arg(long, default_value = "base")]
        base_id: String,
        /// base or best-ft
        #[arg(long, default_value = "base")]
        mode: Reference,
        /// Methods to report; default is every `method:` prefix in the results
        #[arg(long = "method")]
        methods: Vec<String>,
        /// JSON and CSV are written to PREFIX.json and PREFIX.csv;
        /// default is next to the plan
        #[arg(long, value_name = "PREFIX")]
        out_prefix: Option<PathBuf>,
    },
    /// Distance of merged checkpoints from the base
    Norm {
        #[arg(long, value_name = "PATH")]
        base: PathBuf,
        /// Merged checkpoint; repeatable
        #[arg(
            long = "model",
            value_name = "PATH",
            required_unless_present = "manifest"
        )]
        models: Vec<PathBuf>,
        /// JSON list of {"method", "subset", "path"}; prints mean and std per (method, size)
        #[arg(long, value_name = "FILE", conflicts_with = "models")]
        manifest: Option<PathBuf>,
        /// Also write the CSV here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Schema => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::InvalidInput => 4,
        ErrorKind::MissingResults => 5,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(4),
            };
        }
    };
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidArgument(format!("{THREADS_ENV}={raw} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Merge(args) => cmd_merge(&args),
        Command::Sweep { merge, sweep, grid } => cmd_sweep(&merge, sweep, &grid),
        Command::Plan {
            ids,
            pool,
            sizes,
            samples,
            seed,
            out,
        } => cmd_plan(ids, pool, &sizes, samples, seed, out.as_deref()),
        Command::Report {
            results_dir,
            plan,
            base_id,
            mode,
            methods,
            out_prefix,
        } => cmd_report(&results_dir, &plan, &base_id, mode, methods, out_prefix),
        Command::Norm {
            base,
            models,
            manifest,
            out,
        } => cmd_norm(&base, &models, manifest.as_deref(), out.as_deref()),
    }
}

fn print_progress(p: TensorProgress<'_>) {
    eprintln!("[{}/{}] {} {:?}", p.index, p.total, p.name, p.shape);
}

fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let job = args.resolve()?;
    let quiet = args.quiet;
    let summary = run_merge(&job, |p| {
        if !quiet {
            print_progress(p)
        }
    })?;
    println!(
        "wrote {} ({} tensors)",
        summary.output.display(),
        summary.tensors
    );
    println!("delta_norm {:.6}", summary.delta_norm);
    Ok(())
}

fn cmd_sweep(args: &MergeArgs, parameter: SweepParameter, grid: &[f64]) -> Result<()> {
    let job = args.resolve()?;
    let out_dir = job.out.clone();
    let quiet = args.quiet;
    let manifest = run_sweep(&job, parameter, grid, &out_dir, |value, p| {
        if !quiet {
            eprint!("{parameter}={value} ");
            print_progress(p);
        }
    })?;
    for e in &manifest.entries {
        println!(
            "{parameter}={}\t{}\tdelta_norm {:.6}",
            e.value,
            e.path.display(),
            e.delta_norm
        );
    }
    Ok(())
}

fn cmd_plan(
    ids: Vec<String>,
    pool: Option<usize>,
    sizes: &[usize],
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let ids = match pool {
        Some(p) => (1..=p).map(|i| format!("ft{i:02}")).collect(),
        None => ids,
    };
    let plan = sample_subsets(&ids, sizes, samples, seed)?;
    let text = plan.to_json();
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            }),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_report(
    results_dir: &Path,
    plan_path: &Path,
    base_id: &str,
    mode: Reference,
    methods: Vec<String>,
    out_prefix: Option<PathBuf>,
) -> Result<()> {
    let plan = SamplingPlan::from_json(&read_text(plan_path)?).map_err(|e| match e {
        Error::Parse { reason, .. } => Error::Parse {
            path: plan_path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    let results = EvalResults::load_dir(results_dir)?;
    let methods = if methods.is_empty() {
        discover_methods(&results)
    } else {
        methods
    };
    let report = interference_report(&results, base_id, &plan, &methods, mode)?;
    print!("{}", report.to_text());

    let mode_tag = match mode {
        Reference::Base => "base",
        Reference::BestFinetuned => "best-ft",
    };
    let prefix = out_prefix.unwrap_or_else(|| {
        let stem = plan_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("plan");
        plan_path.with_file_name(format!("{stem}.report-{mode_tag}"))
    });
    let with_ext = |ext: &str| {
        let mut p = prefix.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_atomic(&with_ext(".json"), report.to_json().as_bytes())?;
    write_atomic(&with_ext(".csv"), report.to_csv().as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NormEntry {
    method: String,
    subset: Vec<String>,
    path: PathBuf,
}

fn cmd_norm(
    base_path: &Path,
    models: &[PathBuf],
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let base = Checkpoint::open(base_path)?;
    let csv = match manifest {
        Some(path) => {
            let entries: Vec<NormEntry> =
                serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            let mut merged = BTreeMap::new();
            for e in entries {
                let mut subset = e.subset;
                subset.sort();
                let ckpt = Checkpoint::open(&e.path)?;
                if merged
                    .insert((e.method.clone(), subset.clone()), ckpt)
                    .is_some()
                {
                    return Err(Error::InvalidArgument(format!(
                        "manifest lists {} {:?} twice",
                        e.method, subset
                    )));
                }
            }
            norm_stats_csv(&norm_curve(&base, &merged)?)
        }
        None => {
            let mut s = String::from("path,delta_norm\n");
            for m in models {
                let norm = delta_norm(&Checkpoint::open(m)?, &base)?;
                s.push_str(&format!("{},{}\n", m.display(), norm));
            }
            s
        }
    };
    print!("{csv}");
    if let Some(path) = out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}
