//! Command-line front end: parameter audits, forward-pass inspection dumps,
//! verification suites, benchmarks, and the toy trainer.
//!
//! Exit codes: 0 success, 1 verification/training failure, 2 usage error,
//! 3 i/o error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use osn_core::bench::{self, BenchConfig, Precision, Variant};
use osn_core::engine::{SeededRng, Tape, RNG_ALGORITHM};
use osn_core::model::{count_params, init_params, osn_block_forward, BlockConfig, Mode};
use osn_core::ssa::collect_artifacts;
use osn_core::verify::{gradbias, initstructure, oracle_suite, sparsity, toytrain, universality, SuiteReport};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "osn",
    version,
    about = "Selective Synchronization Attention: audits, inspection, verification, benchmarks"
)]
struct Cli {
    /// Seed for all randomness.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print exact parameter counts for both block variants.
    Params {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        ffn_mult: usize,
    },
    /// Run one forward pass and dump per-head synchronization artifacts.
    Inspect {
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// Restrict dumps to one head.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
    },
    /// Run verification suites and write JSON reports.
    Verify {
        /// all | sparsity | universality | gradbias | init-structure | oracle
        #[arg(long, default_value = "all")]
        suite: String,
        /// Directory for the JSON reports (stdout only when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training steps for the gradient-bias experiment.
        #[arg(long, default_value_t = 500)]
        train_steps: usize,
        /// Input samples for the init-structure characterization.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Benchmark the block variants and write a CSV plus manifest.
    Bench {
        /// JSON file with a full benchmark config (flags override it).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence lengths.
        #[arg(long)]
        lens: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// f32 | f64
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        /// Top-k for the sparse variant.
        #[arg(long)]
        sparsity_k: Option<usize>,
        /// Fixed batch size for every cell (defaults to the halving schedule).
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Train the toy masked-reconstruction model and log the frequency-
    /// distance correlation.
    TrainDemo {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
    },
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: Value,
    seed: u64,
    artifact_version: String,
    rng_algorithm: String,
    timestamp_unix: u64,
    /// Effective compute threads (the engine runs single-threaded for
    /// determinism); any env override is echoed for the record.
    thread_count: usize,
    thread_env_override: Option<String>,
    precision: Option<String>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(subcommand: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            thread_count: 1,
            thread_env_override: std::env::var("OSN_THREADS").ok(),
            precision: None,
            outputs: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> osn_core::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn group_digits(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                osn_core::Error::Config(_) | osn_core::Error::DimMismatch { .. } => EXIT_USAGE,
                osn_core::Error::Io(_) | osn_core::Error::Json(_) => EXIT_IO,
                osn_core::Error::Diverged { .. } => EXIT_FAILURE,
                _ => EXIT_FAILURE,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> osn_core::Result<ExitCode> {
    match cli.command {
        Command::Params { dim, heads, ffn_mult } => cmd_params(dim, heads, ffn_mult),
        Command::Inspect {
            seq_len,
            head,
            out,
            dim,
            heads,
        } => cmd_inspect(seq_len, head, &out, dim, heads, cli.seed),
        Command::Verify {
            suite,
            out,
            train_steps,
            samples,
        } => cmd_verify(&suite, out.as_deref(), train_steps, samples, cli.seed),
        Command::Bench {
            config,
            out,
            lens,
            trials,
            warmup,
            precision,
            dim,
            heads,
            sparsity_k,
            batch,
        } => {
            let overrides = BenchOverrides {
                lens,
                trials,
                warmup,
                precision,
                dim,
                heads,
                sparsity_k,
                batch,
            };
            cmd_bench(config.as_deref(), &out, overrides, cli.seed)
        }
        Command::TrainDemo { steps, out, lr } => cmd_train_demo(steps, &out, lr, cli.seed),
    }
}

fn cmd_params(dim: usize, heads: usize, ffn_mult: usize) -> osn_core::Result<ExitCode> {
    let mut tf = BlockConfig::transformer(dim, heads);
    tf.ffn_mult = ffn_mult;
    let mut osn = BlockConfig::osn(dim, heads);
    osn.ffn_mult = ffn_mult;
    let tf_count = count_params(&tf)?;
    let osn_count = count_params(&osn)?;
    let diff = osn_count - tf_count;

    println!("block        parameters");
    println!("transformer  {:>12}", group_digits(tf_count));
    println!("osn          {:>12}", group_digits(osn_count));
    println!("difference   {:>12}", group_digits(diff));
    let js = json!({
        "dim": dim,
        "heads": heads,
        "ffn_mult": ffn_mult,
        "transformer": tf_count,
        "osn": osn_count,
        "difference": diff,
    });
    println!("{}", serde_json::to_string(&js)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(
    seq_len: usize,
    head: Option<usize>,
    out: &Path,
    dim: usize,
    heads: usize,
    seed: u64,
) -> osn_core::Result<ExitCode> {
    let config = BlockConfig::osn(dim, heads);
    config.validate()?;
    if let Some(h) = head {
        if h >= heads {
            return Err(osn_core::Error::Config(format!(
                "head {h} out of range for {heads} heads"
            )));
        }
    }
    fs::create_dir_all(out)?;

    let mut init_rng = SeededRng::new(seed);
    let params = init_params::<f64>(&config, &mut init_rng)?;
    let mut data_rng = SeededRng::new(seed ^ 0x5EED_1234);
    let x = data_rng.gaussian_matrix::<f64>(&[seq_len, dim], 0.0, 1.0);

    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false);
    let xn = tape.constant(x);
    let (_, trace) = osn_block_forward(&mut tape, xn, &nodes, &config, &mut Mode::Eval)?;
    let artifacts = collect_artifacts(&tape, &trace)?;

    let selected: Vec<usize> = match head {
        Some(h) => vec![h],
        None => (0..heads).collect(),
    };
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    let mut diagonal_unit = true;
    for &h in &selected {
        let path = out.join(format!("head_{h}.csv"));
        fs::write(&path, artifacts.head_csv(h))?;
        outputs.push(path.display().to_string());
        summaries.push(artifacts.head_summary(h));
        let s = artifacts.s.index_axis0(h)?;
        for i in 0..seq_len {
            diagonal_unit &= (s.get2(i, i) - 1.0).abs() < 1e-9;
        }
    }
    let overall: f64 = selected.iter().map(|&h| artifacts.nonzero_fraction(h)).sum::<f64>()
        / selected.len() as f64;
    let summary = json!({
        "seq_len": seq_len,
        "dim": dim,
        "heads": heads,
        "selected_heads": selected,
        "per_head": summaries,
        "diagonal_unit": diagonal_unit,
        "nonzero_fraction_overall": overall,
    });
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    outputs.push(summary_path.display().to_string());

    let mut manifest = RunManifest::new(
        "inspect",
        json!({"seq_len": seq_len, "dim": dim, "heads": heads, "head": head}),
        seed,
    );
    manifest.outputs = outputs;
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;
    println!("wrote {} artifact files to {}", selected.len() + 1, out.display());
    Ok(ExitCode::SUCCESS)
}

const SUITES: [&str; 5] = ["sparsity", "universality", "gradbias", "init-structure", "oracle"];

fn cmd_verify(
    suite: &str,
    out: Option<&Path>,
    train_steps: usize,
    samples: usize,
    seed: u64,
) -> osn_core::Result<ExitCode> {
    let selected: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(osn_core::Error::Config(format!(
            "unknown suite {suite:?}; expected all|{}",
            SUITES.join("|")
        )));
    };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut reports: Vec<SuiteReport> = Vec::new();
    for name in &selected {
        match *name {
            "sparsity" => reports.push(sparsity::run_suite(seed)?),
            "universality" => reports.push(universality::run_suite(seed)?),
            "gradbias" => {
                reports.push(gradbias::run_suite(seed)?);
                reports.push(toytrain::run_suite(seed, train_steps)?);
            }
            "init-structure" => reports.push(initstructure::run_suite(seed, samples)?),
            "oracle" => reports.push(oracle_suite::run_suite(seed)?),
            _ => unreachable!("suite names validated above"),
        }
    }

    let mut outputs = Vec::new();
    let mut all_pass = true;
    for report in &reports {
        all_pass &= report.pass;
        let line = serde_json::to_string(report)?;
        println!("{line}");
        if !report.pass {
            for (key, value) in &report.metrics {
                if key.ends_with("_pass") && value == &Value::Bool(false) {
                    eprintln!("suite {} failed check: {}", report.suite, key);
                }
            }
        }
        if let Some(dir) = out {
            let path = dir.join(format!("report_{}.json", report.suite));
            fs::write(&path, serde_json::to_string_pretty(report)?)?;
            outputs.push(path.display().to_string());
        }
    }
    if let Some(dir) = out {
        let mut manifest = RunManifest::new(
            "verify",
            json!({"suite": suite, "train_steps": train_steps, "samples": samples}),
            seed,
        );
        manifest.outputs = outputs;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    })
}

struct BenchOverrides {
    lens: Option<String>,
    trials: Option<usize>,
    warmup: Option<usize>,
    precision: Option<String>,
    dim: Option<usize>,
    heads: Option<usize>,
    sparsity_k: Option<usize>,
    batch: Option<usize>,
}

fn cmd_bench(
    config_path: Option<&Path>,
    out: &Path,
    overrides: BenchOverrides,
    seed: u64,
) -> osn_core::Result<ExitCode> {
    // precedence: flags > config file > defaults
    let mut config = match config_path {
        Some(path) => serde_json::from_str::<BenchConfig>(&fs::read_to_string(path)?)?,
        None => BenchConfig::default(),
    };
    config.seed = seed;
    if let Some(lens) = &overrides.lens {
        config.lens = lens
            .split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    osn_core::Error::Config(format!("invalid sequence length {tok:?}"))
                })
            })
            .collect::<osn_core::Result<Vec<_>>>()?;
    }
    if let Some(trials) = overrides.trials {
        config.trials = trials;
    }
    if let Some(warmup) = overrides.warmup {
        config.warmup = warmup;
    }
    if let Some(precision) = &overrides.precision {
        config.precision = match precision.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(osn_core::Error::Config(format!(
                    "invalid precision {other:?}; expected f32|f64"
                )))
            }
        };
    }
    if let Some(dim) = overrides.dim {
        config.dim = dim;
    }
    if let Some(heads) = overrides.heads {
        config.heads = heads;
    }
    if let Some(k) = overrides.sparsity_k {
        for variant in &mut config.variants {
            if let Variant::OsnSparse(slot) = variant {
                *slot = k;
            }
        }
    }
    if let Some(b) = overrides.batch {
        config.batch_override = Some(b);
    }

    let cells = bench::run_bench(&config)?;
    for cell in cells.iter().filter(|c| c.skipped) {
        eprintln!(
            "warning: skipped {} at N = {} (estimated working set above cap)",
            cell.record.variant, cell.record.n
        );
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, bench::records_csv(&cells))?;

    let fits = bench::fit_all(&cells).ok();
    let memory = bench::memory_model_check(&cells, &config).ok();
    let mut manifest = RunManifest::new("bench", serde_json::to_value(&config)?, seed);
    manifest.precision = Some(match config.precision {
        Precision::F32 => "f32".into(),
        Precision::F64 => "f64".into(),
    });
    manifest.outputs = vec![out.display().to_string()];
    let manifest_path = out.with_extension("manifest.json");
    let mut manifest_value = serde_json::to_value(&manifest)?;
    manifest_value["cells"] = serde_json::to_value(&cells)?;
    manifest_value["scaling_fits"] = serde_json::to_value(&fits)?;
    manifest_value["memory_model"] = serde_json::to_value(&memory)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest_value)?)?;
    println!(
        "wrote {} cells to {} (manifest {})",
        cells.iter().filter(|c| !c.skipped).count(),
        out.display(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_demo(steps: usize, out: &Path, lr: f64, seed: u64) -> osn_core::Result<ExitCode> {
    fs::create_dir_all(out)?;
    let task = toytrain::default_task(seed);
    let block = toytrain::default_block();
    let train = toytrain::TrainConfig {
        steps,
        lr,
        seed,
        ..toytrain::TrainConfig::default()
    };
    let outcome = toytrain::toy_train(&task, &block, &train, Some(out))?;

    let log_path = out.join("train_log.csv");
    fs::write(&log_path, outcome.to_csv())?;
    let mut manifest = RunManifest::new(
        "train-demo",
        json!({
            "steps": steps,
            "lr": lr,
            "vocab": task.vocab,
            "seq_len": task.seq_len,
            "radius": task.radius,
            "dim": block.dim,
            "heads": block.heads,
        }),
        seed,
    );
    manifest.outputs = vec![
        log_path.display().to_string(),
        out.join("toy_model.json").display().to_string(),
        out.join("toy_model.bin").display().to_string(),
    ];
    manifest.write(&out.join("manifest.json"))?;

    println!(
        "trained {} steps: loss {:.4} -> {:.4}, rho {:.4} -> {:.4}{}",
        steps,
        outcome.init_loss,
        outcome.final_loss,
        outcome.init_rho.unwrap_or(f64::NAN),
        outcome.final_rho.unwrap_or(f64::NAN),
        if outcome.diverged { " (diverged)" } else { "" }
    );
    if outcome.diverged {
        eprintln!("training diverged; partial log kept at {}", log_path.display());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}
