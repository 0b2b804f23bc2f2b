use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xclass_cli::checkpoint::load_checkpoint;
use xclass_cli::config::ExperimentConfig;
use xclass_cli::dataset::{read_dataset, write_synthetic};
use xclass_cli::deploy::{classify_retrieval, evaluate};
use xclass_cli::train::{load_data, plan_steps, train, write_outputs};
use xclass_core::knn::{build_graph_bruteforce, build_graph_ring_with_stats, write_graph, ShardLayout};
use xclass_core::math::{l2_normalize_rows, NORM_EPSILON};
use xclass_core::sparsify::{default_chunks, topk_divide_conquer};

/// Overrides the output directory of every subcommand that writes files.
const OUT_DIR_ENV: &str = "XCLASS_OUT_DIR";

#[derive(Parser)]
#[command(name = "xclass", version, about = "Extreme classification experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A config file plus `--key value` overrides for any config key.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides such as `--epochs 5 --mode knn`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test sets to the output directory.
    Gen(ConfigArgs),
    /// Train a model; writes a checkpoint, metrics and communication logs.
    Train(ConfigArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write one prediction per line here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Nearest-class-embedding predictions for the samples of a dataset file.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build the class neighbor graph of a checkpoint's classifier.
    BuildGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 12)]
        k: usize,
        /// Candidates kept per class during the ring build.
        #[arg(long)]
        kprime: Option<usize>,
        /// Shards; 1 uses the brute-force build.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the per-step schedule as `step,t,lr,batch_size`.
    DumpSchedule(ConfigArgs),
    /// Time chunked top-k selection against a full sort.
    BenchTopk {
        #[arg(long, default_value_t = 1_000_000)]
        len: usize,
        /// Kept fraction of the tensor.
        #[arg(long, default_value_t = 0.01)]
        keep: f64,
        #[arg(long)]
        chunks: Option<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected `--key value`, got `{flag}`");
        };
        match key.split_once('=') {
            Some((k, v)) => cfg.set(k, v)?,
            None => {
                let v = it.next().with_context(|| format!("missing value for `--{key}`"))?;
                cfg.set(key, v)?;
            }
        }
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = load_config(&args)?;
            let spec = xclass_cli::train::synthetic_spec(&cfg);
            let (train, test) = write_synthetic(&cfg.out_dir, &spec, cfg.data_seed)?;
            println!("train={}", train.display());
            println!("test={}", test.display());
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            cfg.validate()?;
            let (train_set, test_set) = load_data(&cfg)?;
            let t0 = Instant::now();
            let out = train(&cfg, &train_set, &test_set)?;
            let files = write_outputs(&cfg.out_dir, &cfg, &out)?;
            println!("steps={}", out.metrics.steps.len());
            println!("test_accuracy={:.6}", out.metrics.final_accuracy().unwrap_or(0.0));
            println!("seconds={:.1}", t0.elapsed().as_secs_f64());
            println!("checkpoint={}", files.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            predictions,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = read_dataset(&data)?;
            let (acc, preds) = evaluate(&ck.model, &ds)?;
            if let Some(p) = predictions {
                fs::write(&p, lines(&preds))?;
            }
            println!("samples={}", ds.len());
            println!("accuracy={acc:.6}");
        }
        Command::Classify {
            checkpoint,
            queries,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = read_dataset(&queries)?;
            let preds = classify_retrieval(&ck.model, &ds.features)?;
            match output {
                Some(p) => fs::write(&p, lines(&preds))?,
                None => std::io::stdout().write_all(lines(&preds).as_bytes())?,
            }
        }
        Command::BuildGraph {
            checkpoint,
            k,
            kprime,
            workers,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let w = l2_normalize_rows(&ck.model.classifier, NORM_EPSILON)?;
            let t0 = Instant::now();
            let graph = if workers <= 1 {
                build_graph_bruteforce(&w, k)?
            } else {
                let shards = ShardLayout::new(w.rows(), workers)?.split_rows(&w)?;
                let (g, stats) = build_graph_ring_with_stats(&shards, k, kprime.unwrap_or(2 * k))?;
                println!("peak_entries={:?}", stats.peak_entries);
                g
            };
            println!("build_ms={:.3}", t0.elapsed().as_secs_f64() * 1e3);
            let f = fs::File::create(&output).with_context(|| format!("cannot create {}", output.display()))?;
            write_graph(&graph, std::io::BufWriter::new(f))?;
            println!("classes={} k={}", graph.num_classes(), graph.k());
        }
        Command::DumpSchedule(args) => {
            let cfg = load_config(&args)?;
            cfg.validate()?;
            let train_size = match &cfg.train_data {
                Some(p) => read_dataset(p)?.len(),
                None => cfg.classes * cfg.train_per_class,
            };
            let mut out = String::from("step,t,lr,batch_size\n");
            for r in plan_steps(&cfg, train_size)? {
                out.push_str(&format!("{},{},{},{}\n", r.step, r.t, r.lr, r.batch_size));
            }
            std::io::stdout().write_all(out.as_bytes())?;
        }
        Command::BenchTopk {
            len,
            keep,
            chunks,
            reps,
            seed,
        } => {
            ensure!(len > 0 && reps > 0, "`len` and `reps` must be positive");
            ensure!(keep > 0.0 && keep <= 1.0, "`keep` must lie in (0, 1]");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let k = ((len as f64 * keep).ceil() as usize).clamp(1, len);
            let m = chunks.unwrap_or_else(|| default_chunks(len));
            let (dc, sort) = bench_topk(&t, k, m, reps)?;
            println!("len={len} k={k} chunks={m}");
            println!("divide_conquer_ms={:.3}", dc * 1e3);
            println!("full_sort_ms={:.3}", sort * 1e3);
        }
    }
    Ok(())
}

/// Best-of-`reps` seconds for chunked selection and for a full sort.
fn bench_topk(t: &[f32], k: usize, m: usize, reps: usize) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for _ in 0..reps {
        let t0 = Instant::now();
        let (idx, _) = topk_divide_conquer(t, k, m)?;
        best.0 = best.0.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(idx);
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by(|&a, &b| t[b].abs().total_cmp(&t[a].abs()).then(a.cmp(&b)));
        order.truncate(k);
        best.1 = best.1.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(order);
    }
    Ok(best)
}

fn lines(v: &[usize]) -> String {
    v.iter().map(|p| format!("{p}\n")).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line so callers can grep for it
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
