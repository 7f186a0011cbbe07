//! `mml`: pretraining, comparison and utility commands over run directories.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or
//! incomplete run, 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mml_core::mml::{MergeStrategy, MetricEvent, MmlError, RunManifest};
use mml_core::model::SceneSetup;
use mml_core::pipeline;
use mml_core::registry::Registry;
use mml_core::train::gradient_suite;
use mml_core::world::{export_sequences, generate_stream, BENCHMARK_STREAM, PRETRAIN_STREAM};
use mml_service::{JobConfig, ServiceConfig};

#[derive(Parser)]
#[command(name = "mml", version, about = "Multi-module learning for decoupled BEV perception")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, global = true, env = "MML_RUN_DIR", default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain every assembly with multi-module learning (and the baseline).
    Pretrain(PretrainArgs),
    /// Fine-tune and evaluate the final checkpoints of one or more runs.
    Compare(CompareArgs),
    /// Finite-difference check of the loss gradient of every assembly.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
}

#[derive(Args)]
struct PretrainArgs {
    /// average, softmax or greedy.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<MergeStrategy>,
    /// JSON file with `strategy`, `train`, `data`, `head-layers`, `baseline`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    mini_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences in the pretraining pool.
    #[arg(long)]
    pretrain_seqs: Option<usize>,
    /// Sequences in the fine-tune/test benchmark.
    #[arg(long)]
    benchmark_seqs: Option<usize>,
    #[arg(long)]
    head_layers: Option<usize>,
    /// Skip training the per-assembly baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Restrict to these assemblies (repeatable).
    #[arg(long = "assembly")]
    assemblies: Vec<String>,
    /// Print only the run directory.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directory (repeatable); all runs must share their settings.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    finetune_fraction: f64,
    /// Override the fine-tune pass count; 0 evaluates the pretrained weights.
    #[arg(long)]
    passes: Option<usize>,
    /// Report directory, by default `eval-<fraction>` in the first run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8787")]
    listen: String,
    /// Static UI files served at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render seeded sequences to `<out>/seq-<id>/`.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// benchmark or pretrain.
        #[arg(long, default_value = BENCHMARK_STREAM)]
        stream: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<MergeStrategy, String> {
    MergeStrategy::parse(s).ok_or_else(|| format!("unknown strategy {s:?}, expected average, softmax or greedy"))
}

/// Marks errors that map to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(m) = e.downcast_ref::<MmlError>() {
        if m.is_divergence() {
            return 3;
        }
        if m.is_config() {
            return 2;
        }
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<JobConfig> {
    let Some(p) = path else {
        return Ok(JobConfig::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())).into())
}

fn pretrain(root: &Path, a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(r) = a.rounds {
        cfg.train.rounds = r;
    }
    if let Some(m) = a.mini_epoch {
        cfg.train.mini_epoch = m;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(n) = a.pretrain_seqs {
        cfg.data.pretrain = n;
    }
    if let Some(n) = a.benchmark_seqs {
        cfg.data.benchmark = n;
    }
    if let Some(h) = a.head_layers {
        cfg.head_layers = h;
    }
    if a.no_baseline {
        cfg.baseline = false;
    }
    if cfg.run_id.is_some() {
        return Err(ConfigError("run-id is derived from the configuration and cannot be set".into()).into());
    }
    let assemblies = (!a.assemblies.is_empty()).then(|| {
        let mut ids = a.assemblies.clone();
        ids.sort();
        ids.dedup();
        ids
    });
    let manifest = RunManifest::new(cfg.strategy, cfg.train, cfg.data, cfg.head_layers, cfg.baseline, assemblies);
    let quiet = a.quiet;
    let mut on_event = |e: &MetricEvent| {
        if quiet || !e.scalars.contains_key("post-val-mAP") {
            return;
        }
        eprintln!(
            "round {} {}: val mAP {:.4} -> {:.4}",
            e.round,
            e.model,
            e.scalars.get("pre-val-mAP").copied().unwrap_or(f64::NAN),
            e.scalars["post-val-mAP"]
        );
    };
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let dir = pipeline::pretrain(root, &manifest, &mut on_event)?;
    println!("{}", dir.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let (report, out) = pipeline::compare_runs(&a.runs, a.finetune_fraction, a.passes, a.out.as_deref())?;
    println!("{}", report.to_markdown());
    print!("{}", pipeline::delta_summary(&report));
    eprintln!("reports written to {}", out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let setup = SceneSetup::toy();
    let registry = Registry::toy(setup.dims());
    let suite = gradient_suite(&registry, &setup, a.eps, a.tol, a.coords, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&suite)?);
    } else {
        for e in &suite {
            println!(
                "{} {:<28} max-rel-err {:.2e} ({} tensors, {} refined)",
                if e.report.pass() { "PASS" } else { "FAIL" },
                e.target,
                e.report.max_rel_err(),
                e.report.params.len(),
                e.report.params.iter().map(|p| p.refined).sum::<usize>()
            );
        }
    }
    Ok(suite.iter().all(|e| e.report.pass()))
}

fn serve(root: PathBuf, a: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.listen)
            .await
            .with_context(|| format!("binding {}", a.listen))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        mml_service::serve(
            listener,
            ServiceConfig {
                run_root: root,
                ui_dir: a.ui,
            },
        )
        .await?;
        Ok(())
    })
}

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Generate {
            seed,
            count,
            stream,
            out,
        } => {
            if stream != BENCHMARK_STREAM && stream != PRETRAIN_STREAM {
                bail!(ConfigError(format!("unknown stream {stream:?}")));
            }
            let setup = SceneSetup::toy();
            let seqs = generate_stream(seed, &stream, count, &setup.grid).map_err(MmlError::from)?;
            export_sequences(&out, &seqs, &setup.rig).map_err(MmlError::from)?;
            println!("{} sequences written to {}", seqs.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Pretrain(a) => pretrain(&cli.run_root, a),
        Cmd::Compare(a) => compare(a),
        Cmd::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Cmd::Serve(a) => serve(cli.run_root, a),
        Cmd::Dataset { cmd } => dataset(cmd),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
