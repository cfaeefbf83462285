//! Stages that read their inputs from disk and materialize their outputs,
//! so each one can be re-run alone on a previous run's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    check_text_rows, config_echo, evaluate, explain_samples, fit_final_layer, load_normalized,
    run_pscs, Split,
};
use crate::affinity::{class_scores, compute_affinity};
use crate::data::{
    load_concepts, load_embeddings, save_concepts, save_embeddings, ConceptBank, LabeledDataset,
    PipelineConfig,
};
use crate::error::{Error, Result};
use crate::exemplars::select_exemplars;
use crate::explain::export_concept_map;
use crate::metrics::EvalReport;
use crate::training::model::HeadBlob;
use crate::training::{train_cbl, LinearHead, TrainedModel};

pub const CONCEPTS_INPUT: &str = "concepts_input.json";
pub const CONCEPTS_FILTERED: &str = "concepts_filtered.json";
pub const CONCEPTS_MERGED: &str = "concepts_merged.json";
pub const CONCEPTS_FINAL: &str = "concepts_final.json";
pub const MERGE_REPORT: &str = "merge_report.json";
pub const MERGE_ROWS: &str = "merge_rows.txt";
pub const CONCEPT_LABELS: &str = "concept_labels.emb";
pub const PSCS_SUMMARY: &str = "pscs_summary.json";
pub const AFFINITY_SUMMARY: &str = "affinity_summary.json";
pub const CLASS_SCORES: &str = "class_scores.csv";
pub const AFFINITY_CSV: &str = "affinity.csv";
pub const EXEMPLARS: &str = "exemplars.json";
pub const CBL: &str = "cbl.json";
pub const CBL_LOG: &str = "cbl_log.csv";
pub const MODEL: &str = "model.json";
pub const FCL_LOG: &str = "fcl_log.csv";
pub const FCL_SUMMARY: &str = "fcl_summary.json";
pub const EVAL: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval_table.csv";
pub const PREDICTIONS: &str = "predictions.txt";
pub const EXPLANATIONS: &str = "explanations.json";
pub const EXPLANATIONS_TXT: &str = "explanations.txt";
pub const CONCEPT_MAP: &str = "concept_map.json";
pub const CONCEPT_MAP_DOT: &str = "concept_map.dot";
pub const MANIFEST: &str = "manifest.json";

const CBL_FORMAT: &str = "pscbm-cbl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Affinity,
    SelectExemplars,
    Pscs,
    TrainCbl,
    TrainFcl,
    Eval,
    Explain,
    ConceptMap,
}

impl Stage {
    /// Stages run by `pipeline`, in order.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Affinity,
        Stage::Pscs,
        Stage::TrainCbl,
        Stage::TrainFcl,
        Stage::Eval,
        Stage::Explain,
        Stage::ConceptMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Affinity => "affinity",
            Stage::SelectExemplars => "select-exemplars",
            Stage::Pscs => "pscs",
            Stage::TrainCbl => "train-cbl",
            Stage::TrainFcl => "train-fcl",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::ConceptMap => "concept-map",
        }
    }

    /// Runs the stage and returns the file names it wrote.
    pub fn run(self, ctx: &StageContext) -> Result<Vec<&'static str>> {
        std::fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
        match self {
            Stage::Affinity => affinity(ctx),
            Stage::SelectExemplars => exemplars(ctx),
            Stage::Pscs => pscs(ctx),
            Stage::TrainCbl => cbl(ctx),
            Stage::TrainFcl => fcl(ctx),
            Stage::Eval => eval(ctx),
            Stage::Explain => explain(ctx),
            Stage::ConceptMap => concept_map(ctx),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageContext {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
    /// Record wall-clock seconds per stage in the manifest.
    pub timing: bool,
}

impl StageContext {
    pub fn new(cfg: PipelineConfig, out_dir: Option<PathBuf>, timing: bool) -> Result<Self> {
        let out_dir = out_dir.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
            Error::Invalid("no output directory (set out_dir or --out-dir)".into())
        })?;
        Ok(Self {
            cfg,
            out_dir,
            timing,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, pretty(value))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    fn input_bank(&self) -> Result<ConceptBank> {
        load_concepts(&self.cfg.inputs.concepts)
    }

    fn train_split(&self, num_classes: usize) -> Result<Split> {
        let p = &self.cfg.inputs;
        Split::load(
            &p.train_embeddings,
            p.affinity_embeddings.as_deref(),
            &p.train_labels,
            num_classes,
        )
    }

    fn test_split(&self, num_classes: usize) -> Result<Split> {
        let p = &self.cfg.inputs;
        Split::load(
            &p.test_embeddings,
            p.test_affinity_embeddings.as_deref(),
            &p.test_labels,
            num_classes,
        )
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
struct AffinitySummary {
    images: usize,
    concepts: usize,
    min: f64,
    max: f64,
    mean: f64,
}

fn affinity(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let bank = ctx.input_bank()?;
    let texts = load_normalized(&ctx.cfg.inputs.text_embeddings)?;
    check_text_rows(&bank, &texts)?;
    let train = ctx.train_split(bank.num_classes())?;
    let a = compute_affinity(&train.affinity_images, &texts)?.for_bank(&bank)?;
    let scores = class_scores(&a, &bank, &train.labels)?;
    let data = a.data();
    ctx.write_json(
        AFFINITY_SUMMARY,
        &AffinitySummary {
            images: a.n(),
            concepts: a.m(),
            min: data.iter().copied().fold(f64::INFINITY, f64::min),
            max: data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: data.iter().sum::<f64>() / data.len().max(1) as f64,
        },
    )?;
    let mut csv = String::from("concept,class,score\n");
    for ((j, y), s) in scores.iter() {
        csv.push_str(&format!("{j},{y},{s}\n"));
    }
    ctx.write(CLASS_SCORES, csv)?;
    let mut written = vec![AFFINITY_SUMMARY, CLASS_SCORES];
    if ctx.cfg.dump_affinity {
        ctx.write(AFFINITY_CSV, a.to_csv(&bank.texts()))?;
        written.push(AFFINITY_CSV);
    }
    Ok(written)
}

fn exemplars(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let bank = ctx.input_bank()?;
    let train = ctx.train_split(bank.num_classes())?;
    let ex = &ctx.cfg.exemplars;
    let set = select_exemplars(
        ex.mode,
        &train.affinity_images,
        &train.labels,
        ex.shots,
        ctx.cfg.seed,
    )?;
    ctx.write(EXEMPLARS, set.to_json_string())?;
    Ok(vec![EXEMPLARS])
}

#[derive(Debug, Serialize)]
struct PscsSummary {
    mode: &'static str,
    input: usize,
    filtered: usize,
    merged: usize,
    final_concepts: usize,
    shared: usize,
    exclusive: usize,
    merge_rows: Option<usize>,
    positive_labels: usize,
}

fn pscs(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let cfg = &ctx.cfg;
    let bank = ctx.input_bank()?;
    let texts = load_normalized(&cfg.inputs.text_embeddings)?;
    let train = ctx.train_split(bank.num_classes())?;
    let out = run_pscs(cfg, &bank, &texts, &train)?;

    save_concepts(&bank, ctx.path(CONCEPTS_INPUT))?;
    save_concepts(&out.filtered, ctx.path(CONCEPTS_FILTERED))?;
    save_concepts(&out.merged, ctx.path(CONCEPTS_MERGED))?;
    save_concepts(&out.final_bank, ctx.path(CONCEPTS_FINAL))?;
    ctx.write_json(MERGE_REPORT, &out.merge_report)?;
    save_embeddings(
        &out.dataset.concept_label_matrix()?,
        ctx.path(CONCEPT_LABELS),
    )?;
    let exclusive = out
        .final_bank
        .concepts()
        .iter()
        .filter(|c| c.is_exclusive())
        .count();
    ctx.write_json(
        PSCS_SUMMARY,
        &PscsSummary {
            mode: cfg.mode.as_str(),
            input: bank.len(),
            filtered: out.filtered.len(),
            merged: out.merged.len(),
            final_concepts: out.final_bank.len(),
            shared: out.final_bank.len() - exclusive,
            exclusive,
            merge_rows: out.merge_rows.as_ref().map(Vec::len),
            positive_labels: out.dataset.concept_labels.iter().map(|&s| s as usize).sum(),
        },
    )?;
    let mut written = vec![
        CONCEPTS_INPUT,
        CONCEPTS_FILTERED,
        CONCEPTS_MERGED,
        CONCEPTS_FINAL,
        MERGE_REPORT,
        CONCEPT_LABELS,
        PSCS_SUMMARY,
    ];
    if let Some(rows) = &out.merge_rows {
        ctx.write(MERGE_ROWS, index_lines(rows))?;
        written.push(MERGE_ROWS);
    }
    Ok(written)
}

pub fn index_lines(rows: &[usize]) -> String {
    rows.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CblFile {
    format: String,
    version: u32,
    num_classes: usize,
    concepts: Vec<String>,
    head: HeadBlob,
}

fn cbl(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let bank = load_concepts(ctx.path(CONCEPTS_FINAL))?;
    let train = ctx.train_split(bank.num_classes())?;
    let labels_path = ctx.path(CONCEPT_LABELS);
    let s = load_embeddings(&labels_path)?;
    if s.cols() != bank.len() || s.rows() != train.labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} is {}x{}, expected {}x{}",
            labels_path.display(),
            s.rows(),
            s.cols(),
            train.labels.len(),
            bank.len()
        )));
    }
    let concept_labels = s
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            _ => Err(Error::Invalid(format!(
                "{}: non-binary label {v}",
                labels_path.display()
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let dataset = LabeledDataset::new(train.images, concept_labels, bank.len(), train.labels)?;
    let out = train_cbl(&dataset, &ctx.cfg.cbl, ctx.cfg.seed)?;
    ctx.write_json(
        CBL,
        &CblFile {
            format: CBL_FORMAT.into(),
            version: 1,
            num_classes: bank.num_classes(),
            concepts: bank.texts(),
            head: HeadBlob::encode(&out.head),
        },
    )?;
    ctx.write(CBL_LOG, log_csv("step,loss", &out.log))?;
    Ok(vec![CBL, CBL_LOG])
}

fn log_csv(header: &str, log: &[(usize, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (step, v) in log {
        out.push_str(&format!("{step},{v}\n"));
    }
    out
}

#[derive(Debug, Serialize)]
struct FclSummary {
    iterations: usize,
    converged: bool,
    residual: f64,
    step_size: f64,
    nnz: usize,
    weights: usize,
}

fn load_cbl(ctx: &StageContext) -> Result<(CblFile, LinearHead)> {
    let file: CblFile = ctx.read_json(CBL)?;
    if file.format != CBL_FORMAT || file.version != 1 {
        return Err(Error::Invalid(format!(
            "{}: not a version-1 {CBL_FORMAT} file",
            ctx.path(CBL).display()
        )));
    }
    let head = file.head.decode("head")?;
    Ok((file, head))
}

fn fcl(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let (file, head) = load_cbl(ctx)?;
    let train = ctx.train_split(file.num_classes)?;
    let (model, out) = fit_final_layer(&ctx.cfg, head, &train, file.concepts)?;
    model.save(ctx.path(MODEL))?;
    ctx.write(FCL_LOG, log_csv("iteration,objective", &out.log))?;
    ctx.write_json(
        FCL_SUMMARY,
        &FclSummary {
            iterations: out.iterations,
            converged: out.converged,
            residual: out.residual,
            step_size: out.step_size,
            nnz: model.classifier.nnz(),
            weights: model.classifier.head.w.len(),
        },
    )?;
    Ok(vec![MODEL, FCL_LOG, FCL_SUMMARY])
}

fn eval(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let model = TrainedModel::load(ctx.path(MODEL))?;
    let bank = load_concepts(ctx.path(CONCEPTS_FINAL))?;
    if bank.len() != model.concepts.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} concepts, {} lists {}",
            model.concepts.len(),
            CONCEPTS_FINAL,
            bank.len()
        )));
    }
    let texts = load_normalized(&ctx.cfg.inputs.text_embeddings)?;
    let test = ctx.test_split(bank.num_classes())?;
    let (report, pred) = evaluate(&ctx.cfg, &model, &bank, &texts, &test)?;
    ctx.write_json(EVAL, &report)?;
    ctx.write(
        EVAL_TABLE,
        EvalReport::table_csv(&[(ctx.cfg.mode.as_str().to_string(), &report)]),
    )?;
    ctx.write(PREDICTIONS, pred.to_text())?;
    Ok(vec![EVAL, EVAL_TABLE, PREDICTIONS])
}

fn explain(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let model = TrainedModel::load(ctx.path(MODEL))?;
    let test = ctx.test_split(model.classifier.num_classes())?;
    let samples = explain_samples(&ctx.cfg, &model, &test)?;
    ctx.write_json(EXPLANATIONS, &samples)?;
    let mut text = String::new();
    for s in &samples {
        text.push_str(&format!(
            "image {} (true class {})\n",
            s.index, s.true_class
        ));
        text.push_str(&s.explanation.render_bars(30));
        text.push('\n');
    }
    ctx.write(EXPLANATIONS_TXT, text)?;
    Ok(vec![EXPLANATIONS, EXPLANATIONS_TXT])
}

fn concept_map(ctx: &StageContext) -> Result<Vec<&'static str>> {
    let bank = load_concepts(ctx.path(CONCEPTS_FINAL))?;
    let map = export_concept_map(&bank);
    ctx.write(CONCEPT_MAP, map.to_json_string())?;
    ctx.write(CONCEPT_MAP_DOT, map.to_dot(None))?;
    Ok(vec![CONCEPT_MAP, CONCEPT_MAP_DOT])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<FileHash>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub stages: Vec<StageRecord>,
}

/// A stage error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn tag(stage: &'static str) -> impl Fn(Error) -> StageFailure {
    move |error| StageFailure { stage, error }
}

/// Runs one stage and returns its manifest record.
pub fn run_stage(
    stage: Stage,
    ctx: &StageContext,
) -> std::result::Result<StageRecord, StageFailure> {
    let start = Instant::now();
    let written = stage.run(ctx).map_err(tag(stage.name()))?;
    let seconds = ctx.timing.then(|| start.elapsed().as_secs_f64());
    let outputs = written
        .iter()
        .map(|name| {
            Ok(FileHash {
                path: (*name).to_string(),
                sha256: sha256_file(&ctx.path(name))?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(tag(stage.name()))?;
    Ok(StageRecord {
        name: stage.name().to_string(),
        outputs,
        seconds,
    })
}

/// Every pipeline stage in order, then `manifest.json`.
pub fn run_pipeline(ctx: &StageContext) -> std::result::Result<RunManifest, StageFailure> {
    let inputs = ctx
        .cfg
        .inputs
        .all()
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(tag("inputs"))?;
    let mut stages = Vec::new();
    for stage in Stage::PIPELINE {
        stages.push(run_stage(stage, ctx)?);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_echo(&ctx.cfg),
        inputs,
        stages,
    };
    ctx.write_json(MANIFEST, &manifest)
        .map_err(tag("manifest"))?;
    Ok(manifest)
}
