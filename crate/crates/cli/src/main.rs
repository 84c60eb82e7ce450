use clap::{Parser, ValueEnum};
use hpadapt::adaptivity::{adapt_loop_with, write_history_csv, AdaptConfig, StepView};
use hpadapt::predictor::{write_predictions_csv, PVariant};
use hpadapt::problems::{problem_by_name, RunReport};
use hpadapt::Error;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Problem {
    Sp1d,
    Sing1d,
    Poisson2d,
}

impl Problem {
    fn name(self) -> &'static str {
        match self {
            Problem::Sp1d => "sp1d",
            Problem::Sing1d => "sing1d",
            Problem::Poisson2d => "poisson2d",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    Surplus,
}

/// hp-adaptive convergence studies on the stock model problems.
#[derive(Debug, Parser)]
#[command(name = "hpadapt", version)]
struct Args {
    #[arg(long, value_enum)]
    problem: Problem,
    /// Diffusion coefficient of sp1d.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Marking parameter; defaults to 0.5 in 1D and 0.25 in 2D.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
    #[arg(long)]
    max_dof: Option<usize>,
    #[arg(long, default_value_t = 20)]
    p_cap: usize,
    #[arg(long, value_enum, default_value_t = Variant::Full)]
    p_variant: Variant,
    /// History CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-iteration mesh dumps (JSON lines).
    #[arg(long)]
    dump_meshes: Option<PathBuf>,
    /// Directory for per-iteration candidate predictions (CSV).
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// Run report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Usage(String),
    Solver(Error),
    Io(io::Error),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

fn io_err(e: io::Error) -> Error {
    Error::Internal(format!("i/o: {e}"))
}

fn run(args: Args) -> Result<(), Failure> {
    let problem = problem_by_name(args.problem.name(), args.epsilon)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let config = AdaptConfig {
        theta: args.theta.unwrap_or(problem.default_theta),
        max_iterations: args.max_iter,
        max_dofs: args.max_dof.unwrap_or(usize::MAX),
        p_cap: args.p_cap,
        p_variant: match args.p_variant {
            Variant::Full => PVariant::Full,
            Variant::Surplus => PVariant::Surplus,
        },
        threads: args.threads,
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    for dir in [&args.dump_meshes, &args.dump_predictions]
        .into_iter()
        .flatten()
    {
        fs::create_dir_all(dir)?;
    }

    let start = Instant::now();
    let mut observer = |view: &StepView| -> hpadapt::Result<()> {
        if let Some(dir) = &args.dump_meshes {
            let f = File::create(dir.join(format!("mesh_{:03}.jsonl", view.iteration)))
                .map_err(io_err)?;
            let mut w = BufWriter::new(f);
            view.space
                .mesh
                .write_leaves(&view.space.degrees, &mut w)
                .map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        if let (Some(dir), Some(preds)) = (&args.dump_predictions, view.predictions) {
            let f = File::create(dir.join(format!("predictions_{:03}.csv", view.iteration)))
                .map_err(io_err)?;
            let mut w = BufWriter::new(f);
            write_predictions_csv(preds, &mut w).map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        Ok(())
    };
    let outcome = adapt_loop_with(&problem, &config, &mut observer).map_err(Failure::Solver)?;
    let wall = start.elapsed().as_secs_f64();

    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            write_history_csv(&outcome.history, &mut w)?;
            w.flush()?;
        }
        None => write_history_csv(&outcome.history, &mut io::stdout().lock())?,
    }
    if let Some(path) = &args.report {
        let report = RunReport::new(&problem, &config, &outcome, wall);
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &report).map_err(io::Error::other)?;
        writeln!(w)?;
        w.flush()?;
    }
    let err = outcome
        .final_error_sq
        .map_or("n/a".to_string(), |e| format!("{e:.6e}"));
    eprintln!(
        "{}: {} iterations, N = {}, {} elements, error_sq = {}, {:.2}s",
        problem.name,
        outcome.history.len(),
        outcome.space.n_dofs(),
        outcome.space.leaves().len(),
        err,
        wall
    );
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::from(1)
        }
    }
}
