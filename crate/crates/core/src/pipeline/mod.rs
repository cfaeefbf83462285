//! Pipeline orchestration over in-memory data.
//!
//! [`stages`] wraps these functions with on-disk inputs and outputs.

pub mod stages;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::affinity::{class_scores, compute_affinity, AffinityMatrix};
use crate::data::{
    load_concepts, load_embeddings, load_labels, ConceptBank, EmbeddingMatrix, InputPaths,
    LabelVector, LabeledDataset, PipelineConfig,
};
use crate::error::{Error, Result};
use crate::explain::{explain_prediction, Explanation};
use crate::metrics::{accuracy, alignment_score, EvalReport};
use crate::pscs::{
    concept_correlation, filter_concepts, label_dataset, merge_concepts, prune_exclusive,
    MergeReport, StrategyMode,
};
use crate::rng::SplitMix64;
use crate::training::{
    fit_norm_stats, train_cbl, train_fcl, CblOutcome, FclOutcome, LinearHead, TrainedModel,
};

/// RNG stream id for the merge subsample.
const SUBSAMPLE_STREAM: u64 = 0x5B5;

/// Loads and row-normalizes an embedding file.
pub fn load_normalized(path: &std::path::Path) -> Result<EmbeddingMatrix> {
    let m = load_embeddings(path)?;
    if m.is_normalized() {
        Ok(m)
    } else {
        m.normalize_rows()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    /// Classification backbone embeddings.
    pub images: EmbeddingMatrix,
    /// Affinity encoder embeddings (same rows as `images`).
    pub affinity_images: EmbeddingMatrix,
    pub labels: LabelVector,
}

impl Split {
    pub fn load(
        images: &std::path::Path,
        affinity: Option<&std::path::Path>,
        labels_path: &std::path::Path,
        num_classes: usize,
    ) -> Result<Self> {
        let images_m = load_normalized(images)?;
        let affinity_images = match affinity {
            Some(p) => load_normalized(p)?,
            None => images_m.clone(),
        };
        let labels = load_labels(labels_path, num_classes)?;
        if images_m.rows() != labels.len() || affinity_images.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} has {} rows but {} has {} labels",
                images.display(),
                images_m.rows(),
                labels_path.display(),
                labels.len()
            )));
        }
        Ok(Self {
            images: images_m,
            affinity_images,
            labels,
        })
    }
}

/// Everything a pipeline run reads.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub bank: ConceptBank,
    pub texts: EmbeddingMatrix,
    pub train: Split,
    pub test: Split,
}

impl Inputs {
    pub fn load(paths: &InputPaths) -> Result<Self> {
        let bank = load_concepts(&paths.concepts)?;
        let texts = load_normalized(&paths.text_embeddings)?;
        check_text_rows(&bank, &texts)?;
        let l = bank.num_classes();
        let train = Split::load(
            &paths.train_embeddings,
            paths.affinity_embeddings.as_deref(),
            &paths.train_labels,
            l,
        )?;
        let test = Split::load(
            &paths.test_embeddings,
            paths.test_affinity_embeddings.as_deref(),
            &paths.test_labels,
            l,
        )?;
        Ok(Self {
            bank,
            texts,
            train,
            test,
        })
    }
}

pub fn check_text_rows(bank: &ConceptBank, texts: &EmbeddingMatrix) -> Result<()> {
    if let Some(row) = bank
        .embedding_rows()
        .into_iter()
        .find(|&r| r >= texts.rows())
    {
        return Err(Error::DimensionMismatch(format!(
            "concept embedding row {row} but text embeddings have {} rows",
            texts.rows()
        )));
    }
    Ok(())
}

/// Seeded uniform subsample of `round(fraction * n)` (at least one) row
/// indices, sorted ascending.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::out_of_range("fraction", fraction, "(0, 1]"));
    }
    if n == 0 {
        return Err(Error::Invalid("cannot subsample zero rows".into()));
    }
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    let all: Vec<usize> = (0..n).collect();
    let mut picked = SplitMix64::stream(seed, SUBSAMPLE_STREAM).sample(&all, count);
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct PscsResult {
    pub filtered: ConceptBank,
    pub merged: ConceptBank,
    pub merge_report: MergeReport,
    pub final_bank: ConceptBank,
    pub dataset: LabeledDataset,
    /// Rows used for the merge correlation, when subsampled.
    pub merge_rows: Option<Vec<usize>>,
}

/// Filter, merge, prune and label. In independent mode shared concepts are
/// split into one exclusive copy per class and neither merged nor pruned.
pub fn run_pscs(
    cfg: &PipelineConfig,
    bank: &ConceptBank,
    texts: &EmbeddingMatrix,
    train: &Split,
) -> Result<PscsResult> {
    check_text_rows(bank, texts)?;
    let full = compute_affinity(&train.affinity_images, texts)?;
    let scores = class_scores(&full.for_bank(bank)?, bank, &train.labels)?;
    let filtered = filter_concepts(bank, &scores, cfg.tau_conf)?;
    if filtered.is_empty() {
        return Err(Error::NoConcepts(format!(
            "none passes tau_conf = {}",
            cfg.tau_conf
        )));
    }

    let (merged, merge_report, final_bank, merge_rows) = if cfg.mode == StrategyMode::Independent {
        let report = MergeReport {
            kept: (0..filtered.len()).collect(),
            merged_into: Default::default(),
            q_stats: None,
        };
        let split = filtered.split_per_class()?;
        (filtered.clone(), report, split, None)
    } else {
        let columns = full.for_bank(&filtered)?;
        let merge_rows = match cfg.merge_subsample {
            Some(f) => Some(subsample_indices(columns.n(), f, cfg.seed)?),
            None => None,
        };
        let q_input = match &merge_rows {
            Some(rows) => columns.select_rows(rows)?,
            None => columns,
        };
        let q = concept_correlation(&q_input)?;
        let (merged, report) = merge_concepts(&filtered, &q, cfg.tau_merge)?;
        let merged_scores = class_scores(&full.for_bank(&merged)?, &merged, &train.labels)?;
        let pruned = prune_exclusive(&merged, &merged_scores, cfg.k_exclusive)?;
        (merged, report, pruned, merge_rows)
    };
    if final_bank.is_empty() {
        return Err(Error::NoConcepts("all pruned".into()));
    }
    let dataset = label_dataset(
        &train.images,
        &train.labels,
        &final_bank,
        &full.for_bank(&final_bank)?,
        cfg.tau_conf,
        cfg.mode,
    )?;
    Ok(PscsResult {
        filtered,
        merged,
        merge_report,
        final_bank,
        dataset,
        merge_rows,
    })
}

/// Fits normalization statistics on the bottleneck outputs and trains the
/// final layer on the normalized activations.
pub fn fit_final_layer(
    cfg: &PipelineConfig,
    head: LinearHead,
    train: &Split,
    concepts: Vec<String>,
) -> Result<(TrainedModel, FclOutcome)> {
    let stats = fit_norm_stats(&head, &train.images)?;
    let features = stats.normalize_rows(&head.apply_rows(&train.images)?)?;
    let fcl = train_fcl(&features, &train.labels, &cfg.fcl, cfg.seed)?;
    let model = TrainedModel::new(
        head,
        stats,
        fcl.classifier.clone(),
        concepts,
        config_echo(cfg),
    )?;
    Ok((model, fcl))
}

/// Test accuracy, CEA and alignment, plus the predictions.
pub fn evaluate(
    cfg: &PipelineConfig,
    model: &TrainedModel,
    bank: &ConceptBank,
    texts: &EmbeddingMatrix,
    test: &Split,
) -> Result<(EvalReport, LabelVector)> {
    let pred = model.predict(&test.images)?;
    let acc = accuracy(&pred, &test.labels)?;
    let mut report = EvalReport::new(acc, bank.len(), bank.num_classes(), cfg.beta)?;
    let affinity: AffinityMatrix =
        compute_affinity(&test.affinity_images, texts)?.for_bank(bank)?;
    report.alignment_score = match alignment_score(&affinity, bank, &test.labels) {
        Ok(s) => Some(s),
        Err(Error::NoAlignedClass) => None,
        Err(e) => return Err(e),
    };
    Ok((report, pred))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleExplanation {
    pub index: usize,
    pub true_class: usize,
    #[serde(flatten)]
    pub explanation: Explanation,
}

/// Explanations for the first `cfg.explain.count` test images.
pub fn explain_samples(
    cfg: &PipelineConfig,
    model: &TrainedModel,
    test: &Split,
) -> Result<Vec<SampleExplanation>> {
    (0..cfg.explain.count.min(test.images.rows()))
        .map(|i| {
            Ok(SampleExplanation {
                index: i,
                true_class: test.labels.get(i),
                explanation: explain_prediction(model, test.images.row(i), cfg.explain.top_k)?,
            })
        })
        .collect()
}

/// Configuration as recorded in artifacts: the output directory is left out
/// so runs into different directories stay comparable.
pub fn config_echo(cfg: &PipelineConfig) -> Value {
    let mut echo = cfg.clone();
    echo.out_dir = None;
    serde_json::to_value(echo).expect("config serializes")
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub pscs: PscsResult,
    pub cbl: CblOutcome,
    pub fcl: FclOutcome,
    pub model: TrainedModel,
    pub report: EvalReport,
    pub predictions: LabelVector,
}

/// Full pipeline without touching the filesystem.
pub fn run_in_memory(cfg: &PipelineConfig, inputs: &Inputs) -> Result<RunResult> {
    cfg.validate()?;
    let pscs = run_pscs(cfg, &inputs.bank, &inputs.texts, &inputs.train)?;
    let cbl = train_cbl(&pscs.dataset, &cfg.cbl, cfg.seed)?;
    let (model, fcl) = fit_final_layer(
        cfg,
        cbl.head.clone(),
        &inputs.train,
        pscs.final_bank.texts(),
    )?;
    let (report, predictions) =
        evaluate(cfg, &model, &pscs.final_bank, &inputs.texts, &inputs.test)?;
    Ok(RunResult {
        pscs,
        cbl,
        fcl,
        model,
        report,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    KExclusive,
    TauConf,
    TauMerge,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::KExclusive => "k_exclusive",
            SweepParam::TauConf => "tau_conf",
            SweepParam::TauMerge => "tau_merge",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "k_exclusive" => Ok(SweepParam::KExclusive),
            "tau_conf" => Ok(SweepParam::TauConf),
            "tau_merge" => Ok(SweepParam::TauMerge),
            other => Err(Error::Invalid(format!(
                "unknown sweep parameter {other:?} (expected k_exclusive, tau_conf or tau_merge)"
            ))),
        }
    }

    pub fn apply(self, cfg: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::KExclusive => {
                if !(value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(Error::out_of_range(
                        "k_exclusive",
                        value,
                        "a non-negative integer",
                    ));
                }
                out.k_exclusive = value as usize;
            }
            SweepParam::TauConf => out.tau_conf = value,
            SweepParam::TauMerge => out.tau_merge = value,
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub acc: f64,
    pub num_concepts: usize,
    pub cea: f64,
}

/// Re-runs the pipeline once per value of `param`.
pub fn sweep(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&configs)
        .map(|(&value, c)| {
            let run = run_in_memory(c, inputs)?;
            Ok(SweepRow {
                value,
                acc: run.report.acc,
                num_concepts: run.report.num_concepts,
                cea: run.report.cea,
            })
        })
        .collect()
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},acc,num_concepts,cea\n", param.as_str());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.value, r.acc, r.num_concepts, r.cea
        ));
    }
    out
}
