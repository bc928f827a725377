//! Command-line entry point: verification suites, a chain-of-thought demo,
//! block serialization and block evaluation.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use weightsmith::cot::{
    build_filtering_transformer, condition_profile, iterations_for, run_cot, CotPrompt,
    FilterConfig, FilterMode, GdConfig, MlpTask,
};
use weightsmith::error::Error as CoreError;
use weightsmith::functions::{build_sigmoid_block, FunctionTable, SigmoidAtom, SigmoidLayout};
use weightsmith::linalg::{
    build_matmul_block, build_transpose_block, LinearizationConfig, MatmulLayout, TransposeConfig,
    TransposeLayout,
};
use weightsmith::numerics::LeakyAlpha;
use weightsmith::primitives::{
    build_adder_network, build_bit_creation_layer, build_bit_filter_layer, build_copy_block,
    lambda_for, BitFilterLayout, BitRow, CopyLayout, RegionSpec,
};
use weightsmith::transformer::block_forward;
use weightsmith_cli::schema;
use weightsmith_cli::suites::{run_suite, HarnessConfig, SuiteReport, ALL_SUITES};

#[derive(Parser)]
#[command(
    name = "weightsmith",
    about = "Constructs explicit transformer weight programs and verifies them against numeric oracles",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run verification suites against their oracles.
    Verify {
        /// Suite to run: copy | adder | matmul | transpose | sigmoid |
        /// bits | filter | filter-internals | cot | subspace | all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Error target used by the temperature helper of the copy suite.
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        /// Base seed of every suite's generator.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory receiving one JSON report per suite.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        /// Run independent suites on worker threads.
        #[arg(long, default_value_t = false)]
        parallel: bool,
    },
    /// Generate a random MLP task and learn it layer by layer in context.
    DemoCot {
        #[arg(short = 'L', long, default_value_t = 2)]
        layers: usize,
        #[arg(short = 'd', long, default_value_t = 4)]
        input_dim: usize,
        #[arg(short = 'k', long, default_value_t = 3)]
        hidden_dim: usize,
        #[arg(short = 'n', long, default_value_t = 20)]
        chains: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for the error-trace CSV.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        /// Load the task from a file instead of generating it; requires
        /// --prompt.
        #[arg(long, requires = "prompt")]
        task: Option<PathBuf>,
        /// Load the prompt from a file instead of generating it; requires
        /// --task.
        #[arg(long, requires = "task")]
        prompt: Option<PathBuf>,
        /// Write the task that was run to a file.
        #[arg(long)]
        save_task: Option<PathBuf>,
        /// Write the prompt that was run to a file.
        #[arg(long)]
        save_prompt: Option<PathBuf>,
    },
    /// Serialize a named block with default parameters.
    Build {
        /// Block name: copy | adder | transpose | matmul | sigmoid |
        /// filter | bit-filter | bit-creation
        #[arg(long)]
        block: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a serialized block and input matrix, print the forward output.
    Eval {
        #[arg(long)]
        block: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Optional file for the output matrix; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn effective_seed(flag: u64) -> u64 {
    match std::env::var("WEIGHTSMITH_SEED") {
        Ok(v) => v.parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

fn write_report(dir: &Path, report: &SuiteReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", report.suite));
    std::fs::write(&path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn cmd_verify(
    suite: &str,
    epsilon: f64,
    seed: u64,
    out: &Path,
    parallel: bool,
) -> anyhow::Result<ExitCode> {
    let cfg = HarnessConfig {
        seed: effective_seed(seed),
        epsilon,
        ..HarnessConfig::default()
    };
    if let Err(msg) = cfg.validate() {
        bail!("invalid configuration: {msg}");
    }
    let names: Vec<&str> = if suite == "all" {
        ALL_SUITES.to_vec()
    } else {
        if run_suite(suite, &cfg).is_none() {
            eprintln!(
                "unknown suite `{suite}`; expected one of: {}, all",
                ALL_SUITES.join(", ")
            );
            return Ok(ExitCode::from(2));
        }
        vec![suite]
    };
    let reports: Vec<SuiteReport> = if parallel && names.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = names
                .iter()
                .map(|name| {
                    let cfg = cfg.clone();
                    scope.spawn(move || run_suite(name, &cfg).expect("suite name checked"))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    } else {
        names
            .iter()
            .map(|name| run_suite(name, &cfg).expect("suite name checked"))
            .collect()
    };
    let mut all_pass = true;
    for report in &reports {
        println!(
            "{:18} {:5} cases  max error {:>12}  budget {:>12}  {}",
            report.suite,
            report.cases,
            shorten(&report.max_error),
            shorten(&report.budget),
            if report.pass { "PASS" } else { "FAIL" }
        );
        for note in &report.notes {
            println!("    {note}");
        }
        write_report(out, report)?;
        all_pass &= report.pass;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn shorten(encoded: &str) -> String {
    encoded
        .parse::<f64>()
        .map(|v| format!("{v:.3e}"))
        .unwrap_or_else(|_| encoded.to_string())
}

struct DemoFiles<'a> {
    task: Option<&'a Path>,
    prompt: Option<&'a Path>,
    save_task: Option<&'a Path>,
    save_prompt: Option<&'a Path>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_demo_cot(
    layers: usize,
    input_dim: usize,
    hidden_dim: usize,
    chains: usize,
    alpha: f64,
    eps: f64,
    seed: u64,
    out: &Path,
    files: DemoFiles<'_>,
) -> anyhow::Result<ExitCode> {
    if layers == 0 || input_dim == 0 || hidden_dim == 0 || chains == 0 || !(eps > 0.0) {
        bail!("all demo parameters must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(effective_seed(seed));
    let (task, prompt) = match (files.task, files.prompt) {
        (Some(task_path), Some(prompt_path)) => {
            let task = schema::task_from_json(
                &std::fs::read_to_string(task_path)
                    .with_context(|| format!("reading {}", task_path.display()))?,
            )?;
            let prompt = schema::prompt_from_json(
                &std::fs::read_to_string(prompt_path)
                    .with_context(|| format!("reading {}", prompt_path.display()))?,
            )?;
            (task, prompt)
        }
        _ => {
            let mut dims = vec![input_dim];
            dims.extend(std::iter::repeat_n(hidden_dim, layers));
            let task = MlpTask::random(&dims, LeakyAlpha::new(alpha)?, &mut rng)?;
            let n_max = ((chains + 1) * (layers + 1)).next_power_of_two().max(64);
            let prompt = CotPrompt::generate(&task, chains, n_max, &mut rng)?;
            (task, prompt)
        }
    };
    let layers = task.depth();
    if let Some(path) = files.save_task {
        std::fs::write(path, schema::task_to_json(&task))?;
    }
    if let Some(path) = files.save_prompt {
        std::fs::write(path, schema::prompt_to_json(&prompt))?;
    }
    let profile = condition_profile(&task, &prompt);
    if !profile.all_finite() {
        eprintln!(
            "{}",
            CoreError::UnderdeterminedLayer {
                layer: profile
                    .kappas
                    .iter()
                    .position(|k| !k.is_finite())
                    .unwrap_or(0)
                    + 1
            }
        );
        return Ok(ExitCode::FAILURE);
    }
    let t = iterations_for(eps / layers as f64, profile.kappa_max())?;
    let gd = GdConfig {
        step_size: None,
        iterations: t,
        epsilon: eps,
        delta: eps / layers as f64,
    };
    let outcome = run_cot(
        &task,
        &prompt,
        &gd,
        FilterMode::Constructed,
        &FilterConfig::default(),
    )?;
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("cot_trace.csv");
    let mut csv = String::from("ell,step_error,cumulative_bound,pass\n");
    for row in &outcome.trace {
        csv.push_str(&format!(
            "{},{:.16e},{:.16e},{}\n",
            row.ell, row.step_error, row.cumulative_bound, row.pass
        ));
    }
    std::fs::write(&csv_path, csv).context("writing trace csv")?;
    let truth = task.forward_chain(prompt.test_input())?;
    let final_err: f64 = outcome
        .prediction
        .iter()
        .zip(&truth[layers])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    println!(
        "learned a {layers}-layer leaky-ReLU MLP (dims {:?}) from {} chains",
        task.dims(),
        prompt.n_chains()
    );
    println!(
        "condition numbers: {:?}, gd iterations per neuron: {t}",
        profile
            .kappas
            .iter()
            .map(|k| format!("{k:.2}"))
            .collect::<Vec<_>>()
    );
    for row in &outcome.trace {
        println!(
            "  step {}: error {:.3e} (bound {:.3e}) {}",
            row.ell,
            row.step_error,
            row.cumulative_bound,
            if row.pass { "ok" } else { "OVER" }
        );
    }
    println!(
        "final error {final_err:.3e} against target {eps:.1e}; trace at {}",
        csv_path.display()
    );
    Ok(
        if final_err <= eps && outcome.trace.iter().all(|r| r.pass) {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        },
    )
}

fn named_block(name: &str) -> anyhow::Result<weightsmith::transformer::FunctionBlock> {
    match name {
        "copy" => {
            let layout = CopyLayout::new(4, 6);
            let src = RegionSpec::new(0, 2, 3, 2);
            let dst = RegionSpec::new(2, 2, 0, 2);
            let lambda = lambda_for(1e-8, 1.0, 2.0, layout.total_cols())?;
            Ok(build_copy_block(&layout, &src, &dst, lambda)?)
        }
        "adder" => Ok(build_adder_network(4, 8)?),
        "transpose" => Ok(build_transpose_block(
            &TransposeLayout::new(3),
            &TransposeConfig::default(),
        )?),
        "matmul" => {
            let cfg = LinearizationConfig::default();
            Ok(build_matmul_block(
                &MatmulLayout::new(3, 3, 3, cfg.denom_block),
                &cfg,
                8,
            )?)
        }
        "sigmoid" => {
            let d = 3;
            let atom = SigmoidAtom::new(1.0, vec![0.25, 0.25, 0.0], 0.1, 2.0, 1.0, 1.0)?;
            let table = FunctionTable::from_atoms(&[vec![atom]], d, 1.0, 1.0)?;
            let layout = SigmoidLayout::new(d, 1)?;
            Ok(build_sigmoid_block(&table, &layout)?)
        }
        "filter" => {
            let layout = weightsmith::encodings::PromptLayout::new(3, 2, 3, 1, 64)?;
            Ok(build_filtering_transformer(&layout, &FilterConfig::default())?)
        }
        "bit-filter" => {
            let layout = BitFilterLayout { d_data: 3, n_cols: 6 };
            let bits = [
                BitRow { row: layout.bit_row(), tolerance: 1e-9 },
                BitRow { row: layout.bit_prime_row(), tolerance: 1e-9 },
            ];
            Ok(build_bit_filter_layer(&layout, &bits, 1e6)?)
        }
        "bit-creation" => Ok(build_bit_creation_layer(4, 8, &[2, 3])?),
        _ => bail!(
            "unknown block `{name}`; expected copy | adder | transpose | matmul | sigmoid | filter | bit-filter | bit-creation"
        ),
    }
}

fn cmd_build(block: &str, out: &Path) -> anyhow::Result<ExitCode> {
    let built = named_block(block)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, schema::block_to_json(&built))?;
    println!(
        "wrote `{}` ({} layers, {}x{} input) to {}",
        built.name,
        built.layers.len(),
        built.input_rows,
        built.input_cols,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(block_path: &Path, input_path: &Path, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let block = schema::block_from_json(
        &std::fs::read_to_string(block_path)
            .with_context(|| format!("reading {}", block_path.display()))?,
    )?;
    let input = schema::matrix_from_json(
        &std::fs::read_to_string(input_path)
            .with_context(|| format!("reading {}", input_path.display()))?,
    )?;
    let output = block_forward(&block, &input)?;
    let text = schema::matrix_to_json(&output);
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote output matrix to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify {
            suite,
            epsilon,
            seed,
            out,
            parallel,
        } => cmd_verify(suite, *epsilon, *seed, out, *parallel),
        Command::DemoCot {
            layers,
            input_dim,
            hidden_dim,
            chains,
            alpha,
            eps,
            seed,
            out,
            task,
            prompt,
            save_task,
            save_prompt,
        } => cmd_demo_cot(
            *layers,
            *input_dim,
            *hidden_dim,
            *chains,
            *alpha,
            *eps,
            *seed,
            out,
            DemoFiles {
                task: task.as_deref(),
                prompt: prompt.as_deref(),
                save_task: save_task.as_deref(),
                save_prompt: save_prompt.as_deref(),
            },
        ),
        Command::Build { block, out } => cmd_build(block, out),
        Command::Eval { block, input, out } => cmd_eval(block, input, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
