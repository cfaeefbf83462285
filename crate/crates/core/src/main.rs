use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pscbm::data::PipelineConfig;
use pscbm::error::{Error, Result};
use pscbm::exemplars::SelectionMode;
use pscbm::pipeline::stages::{
    index_lines, run_pipeline, run_stage, Stage, StageContext, StageFailure,
};
use pscbm::pipeline::{subsample_indices, sweep, sweep_csv, Inputs, SweepParam};
use pscbm::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(
    name = "pscbm",
    version,
    about = "Partially shared concept bottleneck models"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides a config field, e.g. `--set fcl.lambda=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Record per-stage wall-clock time in the manifest.
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write a manifest.
    Pipeline,
    /// Class scores for the input concepts.
    Affinity {
        /// Also dump the full affinity matrix as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Diverse few-shot exemplars per class.
    SelectExemplars {
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SelectionMode>,
    },
    /// Filter, merge, prune and label concepts.
    Pscs,
    /// Train the concept bottleneck layer.
    TrainCbl,
    /// Fit normalization and train the sparse final layer.
    TrainFcl,
    /// Accuracy, CEA and alignment on the test split.
    Eval,
    /// Per-image concept contributions.
    Explain {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Concept to class map as JSON and DOT.
    ConceptMap,
    /// Write a synthetic task and a matching config.
    Synth(SynthArgs),
    /// Re-run the pipeline over values of one parameter.
    Sweep {
        /// One of k_exclusive, tau_conf, tau_merge.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Seeded row subsample for the merge correlation.
    Subsample {
        #[arg(long)]
        fraction: f64,
        /// Row count; read from the configured training embeddings if omitted.
        #[arg(long)]
        rows: Option<usize>,
        /// Output index file (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    shared: usize,
    #[arg(long, default_value_t = 2)]
    exclusive: usize,
    #[arg(long, default_value_t = 3)]
    classes_per_shared: usize,
    #[arg(long, default_value_t = 0)]
    duplicates: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 50)]
    n_test_per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
}

fn parse_mode(s: &str) -> std::result::Result<SelectionMode, String> {
    match s {
        "fps" => Ok(SelectionMode::Fps),
        "random" => Ok(SelectionMode::Random),
        _ => Err(format!("unknown mode {s:?} (expected fps or random)")),
    }
}

fn overrides(global: &Global) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for item in &global.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set {item:?}: expected KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = global.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn load_config(global: &Global, extra: &[(String, String)]) -> Result<PipelineConfig> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::Invalid("--config is required".into()))?;
    let mut all = extra.to_vec();
    all.extend(overrides(global)?);
    PipelineConfig::load(path, &all)
}

fn context(global: &Global, extra: &[(String, String)]) -> Result<StageContext> {
    let cfg = load_config(global, extra)?;
    StageContext::new(cfg, global.out_dir.clone(), global.timing)
}

fn fail(stage: &'static str) -> impl Fn(Error) -> StageFailure {
    move |error| StageFailure { stage, error }
}

fn stage(
    global: &Global,
    stage: Stage,
    extra: &[(String, String)],
) -> std::result::Result<(), StageFailure> {
    let ctx = context(global, extra).map_err(fail("config"))?;
    run_stage(stage, &ctx)?;
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), StageFailure> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("--threads: {e}")))
            .map_err(fail("config"))?;
    }
    match cli.command {
        Command::Pipeline => {
            let ctx = context(g, &[]).map_err(fail("config"))?;
            let manifest = run_pipeline(&ctx)?;
            println!(
                "wrote {} ({} stages)",
                ctx.out_dir.display(),
                manifest.stages.len()
            );
            Ok(())
        }
        Command::Affinity { csv } => {
            let extra = if csv {
                vec![("dump_affinity".to_string(), "true".to_string())]
            } else {
                Vec::new()
            };
            stage(g, Stage::Affinity, &extra)
        }
        Command::SelectExemplars { shots, mode } => {
            let mut extra = Vec::new();
            if let Some(s) = shots {
                extra.push(("exemplars.shots".to_string(), s.to_string()));
            }
            if let Some(m) = mode {
                let name = match m {
                    SelectionMode::Fps => "fps",
                    SelectionMode::Random => "random",
                };
                extra.push(("exemplars.mode".to_string(), format!("\"{name}\"")));
            }
            stage(g, Stage::SelectExemplars, &extra)
        }
        Command::Pscs => stage(g, Stage::Pscs, &[]),
        Command::TrainCbl => stage(g, Stage::TrainCbl, &[]),
        Command::TrainFcl => stage(g, Stage::TrainFcl, &[]),
        Command::Eval => stage(g, Stage::Eval, &[]),
        Command::Explain { count, top_k } => {
            let mut extra = Vec::new();
            if let Some(c) = count {
                extra.push(("explain.count".to_string(), c.to_string()));
            }
            if let Some(k) = top_k {
                extra.push(("explain.top_k".to_string(), k.to_string()));
            }
            stage(g, Stage::Explain, &extra)
        }
        Command::ConceptMap => stage(g, Stage::ConceptMap, &[]),
        Command::Synth(args) => synth(g, &args).map_err(fail("synth")),
        Command::Sweep { param, values } => {
            let ctx = context(g, &[]).map_err(fail("config"))?;
            let param = SweepParam::parse(&param).map_err(fail("config"))?;
            if values.is_empty() {
                return Err(fail("config")(Error::Invalid("--values is empty".into())));
            }
            let inputs = Inputs::load(&ctx.cfg.inputs).map_err(fail("inputs"))?;
            let rows = sweep(&ctx.cfg, &inputs, param, &values).map_err(fail("sweep"))?;
            let csv = sweep_csv(param, &rows);
            let dir = &ctx.out_dir;
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir, e))
                .map_err(fail("sweep"))?;
            let path = dir.join(format!("sweep_{}.csv", param.as_str()));
            std::fs::write(&path, &csv)
                .map_err(|e| Error::io(&path, e))
                .map_err(fail("sweep"))?;
            print!("{csv}");
            Ok(())
        }
        Command::Subsample {
            fraction,
            rows,
            output,
        } => {
            let (n, seed) = match rows {
                Some(n) => {
                    let seed = match &g.config {
                        Some(_) => load_config(g, &[]).map_err(fail("config"))?.seed,
                        None => g.seed.unwrap_or(0),
                    };
                    (n, seed)
                }
                None => {
                    let cfg = load_config(g, &[]).map_err(fail("config"))?;
                    let m = pscbm::data::load_embeddings(&cfg.inputs.train_embeddings)
                        .map_err(fail("subsample"))?;
                    (m.rows(), cfg.seed)
                }
            };
            let picked = subsample_indices(n, fraction, seed).map_err(fail("subsample"))?;
            write_or_print(output.as_deref(), &index_lines(&picked)).map_err(fail("subsample"))
        }
    }
}

fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let dir = g
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Invalid("synth needs --out-dir".into()))?;
    let spec = SynthSpec {
        num_classes: a.classes,
        shared_concepts: a.shared,
        exclusive_per_class: a.exclusive,
        classes_per_shared: a.classes_per_shared,
        duplicates_per_exclusive: a.duplicates,
        dim: a.dim,
        n_per_class: a.n_per_class,
        n_test_per_class: a.n_test_per_class,
        noise_sigma: a.sigma,
        seed: g.seed.unwrap_or(0),
    };
    let data = generate(&spec)?;
    let mut cfg = PipelineConfig {
        seed: spec.seed,
        ..PipelineConfig::default()
    };
    if !g.set.is_empty() {
        let base = serde_json::to_string(&cfg).expect("config serializes");
        cfg =
            PipelineConfig::from_json_with_overrides(&base, Path::new("<synth>"), &overrides(g)?)?;
        cfg.validate()?;
    }
    data.write_dir(dir, &cfg)?;
    println!("wrote synthetic task to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pscbm: {f}");
            ExitCode::from(f.error.kind().exit_code() as u8)
        }
    }
}
