//! `mxquant` command-line driver.
//!
//! Exit status:
//!
//! - 0: success
//! - 1: usage error, such as a bad flag or a missing input
//! - 2: runtime failure
//!
//! Every output file is written to a temp file and renamed into place.

mod config;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mxquant::calibrate::draw_samples;
use mxquant::harness::{
    csv_string, load_corpus, load_model, model_size_bits, pareto_frontier, perplexity, quantize_model, read_csv,
    save_model, EvalPoint, GptModel, QuantPlan,
};
use mxquant::tensor::write_atomic;
use mxquant::{Exec, Rng};

use config::{Inputs, RunFields};
use sweep::{label, SweepPlan};

#[derive(Parser, Debug)]
#[command(
    name = "mxquant",
    version,
    about = "Post-training quantization of GPT-2 family models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a model and write model.nwt and model.json into --out
    Quantize(RunArgs),
    /// Report perplexity and size of a model, optionally quantizing it first
    Eval(RunArgs),
    /// Evaluate every cell of a sweep plan and write one CSV row per cell
    Sweep(SweepArgs),
    /// Reduce a results CSV to its Pareto frontier over size and perplexity
    Pareto(ParetoArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON file with run settings; flags take precedence over it
    #[arg(long)]
    run_config: Option<PathBuf>,
    #[command(flatten)]
    fields: RunFields,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Sweep plan JSON (layout in the README)
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    fields: RunFields,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    /// Results CSV produced by `sweep` or `eval --out`
    csv: PathBuf,
    /// Output CSV; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mxquant::Error> for Failure {
    fn from(e: mxquant::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Quantize(a) => quantize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Pareto(a) => pareto_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn merged(args: RunArgs) -> Result<RunFields, Failure> {
    match &args.run_config {
        Some(path) => Ok(args.fields.over(RunFields::from_file(path)?)),
        None => Ok(args.fields),
    }
}

/// True when the plan leaves the model untouched.
fn is_identity(plan: &QuantPlan) -> bool {
    let fp = QuantPlan::full_precision();
    plan.linear == fp.linear && plan.qk == fp.qk && plan.pv == fp.pv && !plan.sq_aw && !plan.sq_aa
}

fn read_model(inputs: &Inputs) -> Result<GptModel, Failure> {
    Ok(load_model(&inputs.model, &inputs.config)
        .with_context(|| format!("loading model {}", inputs.model.display()))?)
}

fn read_tokens(inputs: &Inputs, path: &Path) -> Result<Vec<u32>, Failure> {
    Ok(load_corpus(path, inputs.format_of(path)).with_context(|| format!("reading corpus {}", path.display()))?)
}

fn seq_len(inputs: &Inputs, model: &GptModel) -> Result<usize, Failure> {
    let max = model.config.max_seq_len;
    match inputs.seq_len {
        Some(n) if n > max => Err(Failure::usage(format!(
            "--seq-len {n} exceeds the model context of {max}"
        ))),
        Some(n) => Ok(n),
        None => Ok(max),
    }
}

/// Seeded calibration windows from the calibration corpus.
fn calibration(inputs: &Inputs, seq_len: usize) -> Result<Vec<Vec<u32>>, Failure> {
    let path = inputs.calib_path()?;
    let tokens = read_tokens(inputs, path)?;
    let mut rng = Rng::new(inputs.seed);
    Ok(draw_samples(&tokens, inputs.samples, seq_len, &mut rng).context("drawing calibration windows")?)
}

fn require_unquantized(model: &GptModel) -> Result<(), Failure> {
    match model.plan {
        Some(_) => Err(Failure::usage("the input model is already quantized")),
        None => Ok(()),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn quantize_cmd(args: RunArgs) -> Result<(), Failure> {
    let fields = merged(args)?;
    let inputs = Inputs::resolve(&fields)?;
    let plan = fields.plan()?;
    let out = fields
        .out
        .clone()
        .ok_or_else(|| Failure::usage("--out directory is required"))?;
    let model = read_model(&inputs)?;
    require_unquantized(&model)?;
    let samples = calibration(&inputs, seq_len(&inputs, &model)?)?;
    let q = quantize_model(&model, &plan, &samples, Exec::default()).context("quantizing")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_model(&q, out.join("model.nwt"), out.join("model.json")).context("saving model")?;
    println!("size_bits={}", model_size_bits(&q)?);
    Ok(())
}

fn eval_cmd(args: RunArgs) -> Result<(), Failure> {
    let fields = merged(args)?;
    let inputs = Inputs::resolve(&fields)?;
    let corpus = inputs.require_corpus()?.to_path_buf();
    let requested = fields.plan()?;
    let model = read_model(&inputs)?;
    let seq_len = seq_len(&inputs, &model)?;
    let model = if is_identity(&requested) {
        model
    } else {
        require_unquantized(&model)?;
        let samples = calibration(&inputs, seq_len)?;
        quantize_model(&model, &requested, &samples, Exec::default()).context("quantizing")?
    };
    let tokens = read_tokens(&inputs, &corpus)?;
    let ppl = perplexity(&model, &tokens, seq_len, Exec::default()).context("evaluating perplexity")?;
    let size = model_size_bits(&model)?;
    println!("ppl={ppl}");
    println!("size_bits={size}");
    if let Some(out) = &fields.out {
        let plan = model.plan.clone().unwrap_or_else(QuantPlan::full_precision);
        let point = EvalPoint::new(label(&plan), &plan, size, ppl);
        write_output(Some(out), &csv_string(&[point])?)?;
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<(), Failure> {
    let text = std::fs::read(&args.plan)
        .map_err(|e| Failure::usage(format!("cannot read sweep plan {}: {e}", args.plan.display())))?;
    let plan: SweepPlan = serde_json::from_slice(&text)
        .map_err(|e| Failure::usage(format!("invalid sweep plan {}: {e}", args.plan.display())))?;
    let base_dir = args.plan.parent().unwrap_or(Path::new("."));
    let fields = args.fields.over(plan.base.clone().rebase(base_dir));
    let inputs = Inputs::resolve(&fields)?;
    let corpus = inputs.require_corpus()?.to_path_buf();
    let cells = plan.cells(&fields.plan()?)?;

    let model = read_model(&inputs)?;
    require_unquantized(&model)?;
    let seq_len = seq_len(&inputs, &model)?;
    let samples = if cells.iter().all(is_identity) {
        Vec::new()
    } else {
        calibration(&inputs, seq_len)?
    };
    let tokens = read_tokens(&inputs, &corpus)?;

    let run_cell = |plan: &QuantPlan| -> Result<EvalPoint, Failure> {
        let what = label(plan);
        let q;
        let evaluated = if is_identity(plan) {
            &model
        } else {
            q = quantize_model(&model, plan, &samples, Exec::default())
                .with_context(|| format!("quantizing {what}"))?;
            &q
        };
        let ppl =
            perplexity(evaluated, &tokens, seq_len, Exec::default()).with_context(|| format!("evaluating {what}"))?;
        let size = model_size_bits(evaluated).with_context(|| format!("sizing {what}"))?;
        eprintln!("{what}: ppl={ppl} size_bits={size}");
        Ok(EvalPoint::new(what, plan, size, ppl))
    };
    let points = run_cells(&cells, fields.jobs, run_cell)?;
    write_output(fields.out.as_deref(), &csv_string(&points)?)
}

/// Evaluates cells on up to `jobs` workers, returning results in cell order.
#[cfg(feature = "parallel")]
fn run_cells<F>(cells: &[QuantPlan], jobs: Option<usize>, f: F) -> Result<Vec<EvalPoint>, Failure>
where
    F: Fn(&QuantPlan) -> Result<EvalPoint, Failure> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs == Some(0) {
        return Err(Failure::usage("--jobs must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("starting worker pool")?;
    pool.install(|| cells.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_cells<F>(cells: &[QuantPlan], jobs: Option<usize>, f: F) -> Result<Vec<EvalPoint>, Failure>
where
    F: Fn(&QuantPlan) -> Result<EvalPoint, Failure>,
{
    if jobs == Some(0) {
        return Err(Failure::usage("--jobs must be positive"));
    }
    cells.iter().map(f).collect()
}

fn pareto_cmd(args: ParetoArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&args.csv)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", args.csv.display())))?;
    let points = read_csv(file).with_context(|| format!("reading {}", args.csv.display()))?;
    write_output(args.out.as_deref(), &csv_string(&pareto_frontier(&points))?)
}
