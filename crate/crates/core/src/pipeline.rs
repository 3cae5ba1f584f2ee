//! The full procedure in memory: gap estimate → projector → word filtering
//! → text-based last-layer retraining → evaluation.

use serde::{Deserialize, Serialize};

use crate::bank::TextEmbeddingBank;
use crate::dataset::{build_dataset, GroupSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, LabeledFeatures, WeightMode};
use crate::head::LinearHead;
use crate::projector::{estimate_gap, search_lambda, GapEstimate, LambdaScore, Projector, RidgeConfig};
use crate::store::EmbeddingMatrix;
use crate::synth::SynthBundle;
use crate::train::{retrain, TrainConfig, TrainHistory};
use crate::vocab::{run_filter_pipeline, FilterOptions, FilteredVocabulary, Vocabulary};

pub struct PipelineInputs<'a> {
    pub gap_images: &'a EmbeddingMatrix,
    pub gap_texts: &'a EmbeddingMatrix,
    /// joint-space image embeddings paired with classifier features
    pub fit_x: &'a EmbeddingMatrix,
    pub fit_y: &'a EmbeddingMatrix,
    pub select_x: &'a EmbeddingMatrix,
    pub select_y: &'a EmbeddingMatrix,
    pub bank: &'a TextEmbeddingBank,
    pub vocabulary: &'a Vocabulary,
    pub head_init: &'a LinearHead,
    pub spec: &'a GroupSpec,
    pub val: &'a LabeledFeatures,
    pub test: &'a LabeledFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub lambda_grid: Vec<f64>,
    /// Number of gap pairs to use (the first ones); 0 fits without the
    /// orthogonality constraint.
    pub gap_pairs: usize,
    pub filter: FilterOptions,
    pub train: TrainConfig,
    pub weights: WeightMode,
}

pub struct PipelineResult {
    pub gap: Option<GapEstimate>,
    pub projector: Projector,
    pub lambda_table: Vec<LambdaScore>,
    pub filtered: FilteredVocabulary,
    pub head: LinearHead,
    pub history: TrainHistory,
    pub report: EvalReport,
}

pub fn run_pipeline(inp: &PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let gap = if cfg.gap_pairs == 0 {
        None
    } else {
        if cfg.gap_pairs > inp.gap_images.count() {
            return Err(Error::Data(format!(
                "asked for {} gap pairs, only {} available",
                cfg.gap_pairs,
                inp.gap_images.count()
            )));
        }
        let rows: Vec<usize> = (0..cfg.gap_pairs).collect();
        Some(estimate_gap(&inp.gap_images.select(&rows), &inp.gap_texts.select(&rows))?)
    };
    let ridge = RidgeConfig::new(cfg.lambda_grid.clone(), gap.is_some())?;
    let (projector, lambda_table) =
        search_lambda(inp.fit_x, inp.fit_y, inp.select_x, inp.select_y, gap.as_ref().map(|g| &g.gap), &ridge)?;
    let mut filter = cfg.filter.clone();
    filter.relu = cfg.train.relu_on_projection;
    if filter.groups.is_none() {
        filter.groups = Some(inp.spec.groups.clone());
    }
    let filtered = run_filter_pipeline(inp.vocabulary, inp.bank, &projector, inp.head_init, &filter)?;
    let ds = build_dataset(&filtered, inp.spec, inp.bank)?;
    let (head, history) = retrain(inp.head_init, &ds, &projector, inp.val, inp.spec, &cfg.train)?;
    let report = evaluate(&head, inp.test, inp.spec, cfg.weights)?;
    Ok(PipelineResult { gap, projector, lambda_table, filtered, head, history, report })
}

/// Borrowed inputs from a synthetic bundle: the projector is fitted on the
/// train split and λ is chosen on the validation split.
pub struct BundleData {
    pub bank: TextEmbeddingBank,
    pub val: LabeledFeatures,
    pub test: LabeledFeatures,
}

impl BundleData {
    pub fn new(b: &SynthBundle) -> Self {
        Self { bank: b.bank(), val: b.val.labeled_features(), test: b.test.labeled_features() }
    }

    pub fn inputs<'a>(&'a self, b: &'a SynthBundle) -> PipelineInputs<'a> {
        PipelineInputs {
            gap_images: &b.gap_pairs.0,
            gap_texts: &b.gap_pairs.1,
            fit_x: &b.train.clip_image,
            fit_y: &b.train.features,
            select_x: &b.val.clip_image,
            select_y: &b.val.features,
            bank: &self.bank,
            vocabulary: &b.vocabulary,
            head_init: &b.head_init,
            spec: &b.spec,
            val: &self.val,
            test: &self.test,
        }
    }
}
