use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sparsealign::checkpoint::load_checkpoint;
use sparsealign::config::ExperimentConfig;
use sparsealign::data::{generate_dataset, read_manifest, write_dataset, Bag, DatasetIndex, MANIFEST_FILE};
use sparsealign::eval::{evaluate, export_traces};
use sparsealign::model::Term;
use sparsealign::tensor::GradCheckOptions;
use sparsealign::train::{gradcheck_model, micro_batch, RunDir, Split, CHECKPOINT_FILE, CONFIG_FILE, SPLIT_FILE};

const GEN_CONFIG_FILE: &str = "gen.toml";
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_T: usize = 32;

/// Synthetic multimodal event detection: data generation, training,
/// evaluation and gradient self-checks.
///
/// Set RUST_LOG=info (or debug) for progress output.
#[derive(Parser)]
#[command(name = "sparsealign", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to anything not set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.adam.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (manifest plus feature files).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the dataset files in a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset and write a run directory.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Drop a loss term; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<TermArg>,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained run and export per-bag score traces.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate every bag instead of the run's held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference check of the full training loss on a two-bag batch.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Components sampled per parameter tensor.
        #[arg(long, default_value_t = 3)]
        components: usize,
        /// Route the fused features through an op with a wrong gradient.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TermArg {
    Umil,
    Ma,
    Mmil,
    Triplet,
}

impl From<TermArg> for Term {
    fn from(t: TermArg) -> Self {
        match t {
            TermArg::Umil => Term::Umil,
            TermArg::Ma => Term::Ma,
            TermArg::Mmil => Term::Mmil,
            TermArg::Triplet => Term::Triplet,
        }
    }
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    Ok(ExperimentConfig::load(args.config.as_deref(), &overrides)?)
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    match fs::read_dir(p) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e).with_context(|| format!("reading {}", p.display())),
    }
}

fn open_dataset(data: &Path) -> Result<DatasetIndex> {
    let manifest = if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    };
    Ok(read_manifest(&manifest)?)
}

fn cmd_gen(cfg: &ConfigArgs, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let extra = seed.map(|s| vec![format!("gen.seed={s}")]).unwrap_or_default();
    let cfg = load_config(cfg, extra)?;
    if is_nonempty_dir(out)? {
        if !force {
            bail!("{} is not empty (use --force to replace the dataset)", out.display());
        }
        for name in ["features", "labels"] {
            let p = out.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let dir = RunDir::acquire(out)?;
    let bags = generate_dataset(&cfg.gen)?;
    write_dataset(out, &bags)?;
    dir.write(GEN_CONFIG_FILE, &cfg.to_toml())?;
    let anomalous = bags.iter().filter(|b| b.label == 1).count();
    println!(
        "wrote {} bags to {}: {} normal, {} anomalous",
        bags.len(),
        out.display(),
        bags.len() - anomalous,
        anomalous
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    cfg: &ConfigArgs,
    out: &Path,
    seed: Option<u64>,
    iterations: Option<usize>,
    ablate: &[TermArg],
    force: bool,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = seed {
        extra.push(format!("train.seed={s}"));
    }
    if let Some(n) = iterations {
        extra.push(format!("train.iterations={n}"));
    }
    let mut cfg = load_config(cfg, extra)?;
    for &t in ablate {
        let t = Term::from(t);
        if !cfg.train.loss.ablate.contains(&t) {
            cfg.train.loss.ablate.push(t);
        }
    }
    cfg.validate()?;
    if is_nonempty_dir(out)? && !force {
        bail!("{} is not empty (use --force to reuse it)", out.display());
    }
    let index = open_dataset(data)?;
    let bags = index.load_bags()?;
    let run = RunDir::acquire(out)?;
    let outcome = cfg.run(index.dims, &bags, Some(&run)).context("training aborted")?;
    let e = outcome.eval;
    println!(
        "trained {} iterations; held-out AP fused {:.4} rgb {:.4} audio {:.4} flow {:.4}",
        outcome.log.len(),
        e.ap_fused,
        e.ap_rgb,
        e.ap_audio,
        e.ap_flow
    );
    Ok(())
}

fn cmd_eval(run: &Path, data: &Path, out: &Path, all: bool) -> Result<()> {
    let ckpt_path = run.join(CHECKPOINT_FILE);
    if !ckpt_path.is_file() {
        bail!("no checkpoint at {}", ckpt_path.display());
    }
    let cfg_path = run.join(CONFIG_FILE);
    let cfg = ExperimentConfig::load(Some(&cfg_path), &[])?;
    let index = open_dataset(data)?;
    let mut model = cfg.build_model(index.dims)?;
    let params = load_checkpoint(&ckpt_path)?;
    model
        .load_params(&params)
        .with_context(|| format!("checkpoint {} does not fit the dataset dims", ckpt_path.display()))?;
    let bags = index.load_bags()?;
    let bags: Vec<Bag> = if all {
        bags
    } else {
        let p = run.join(SPLIT_FILE);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let split: Split = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let chosen: Vec<Bag> = bags.into_iter().filter(|b| split.holdout.contains(&b.id)).collect();
        if chosen.len() != split.holdout.len() {
            bail!(
                "dataset holds {} of the {} held-out bags of this run",
                chosen.len(),
                split.holdout.len()
            );
        }
        chosen
    };
    let report = evaluate(&model, &bags)?;
    let _lock = RunDir::acquire(out)?;
    export_traces(&report, out)?;
    let s = report.summary;
    println!(
        "{} bags, {} frames: AP fused {:.4} rgb {:.4} audio {:.4} flow {:.4}",
        s.bags, s.frames, s.ap_fused, s.ap_rgb, s.ap_audio, s.ap_flow
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &ConfigArgs, seed: u64, components: usize, inject_fault: bool) -> Result<bool> {
    let cfg = load_config(cfg, vec![format!("train.seed={seed}")])?;
    let batch = micro_batch(&cfg.gen, GRADCHECK_T, seed)?;
    let model = cfg.build_model(cfg.raw_dims())?;
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_components_per_leaf: Some(components.max(1)),
    };
    let check = gradcheck_model(&model, &batch, &cfg.train.loss, opts, inject_fault)?;
    println!(
        "{:<36} {:>7} {:>10} {:>12}",
        "group", "tensors", "components", "max_rel_err"
    );
    for g in &check.groups {
        println!(
            "{:<36} {:>7} {:>10} {:>12.3e}",
            g.name, g.tensors, g.components, g.max_relative_error
        );
    }
    let ok = check.report.passed(GRADCHECK_TOL);
    println!(
        "{}: max relative error {:.3e} (tolerance {GRADCHECK_TOL:e}) over {} groups",
        if ok { "PASS" } else { "FAIL" },
        check.report.max_relative_error,
        check.groups.len()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen { cfg, out, seed, force } => cmd_gen(cfg, out, *seed, *force).map(|_| true),
        Cmd::Train {
            data,
            cfg,
            out,
            seed,
            iterations,
            ablate,
            force,
        } => cmd_train(data, cfg, out, *seed, *iterations, ablate, *force).map(|_| true),
        Cmd::Eval { run, data, out, all } => cmd_eval(run, data, out, *all).map(|_| true),
        Cmd::Gradcheck {
            cfg,
            seed,
            components,
            inject_fault,
        } => cmd_gradcheck(cfg, *seed, *components, *inject_fault),
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
