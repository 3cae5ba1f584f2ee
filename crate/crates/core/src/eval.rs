//! Per-group accuracy, worst-group accuracy and weighted mean accuracy.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::GroupSpec;
use crate::error::{Error, Result};
use crate::head::{strict_argmax, LinearHead};
use crate::projector::{read_json, write_json};
use crate::store::{self, EmbeddingMatrix, Manifest};

/// Feature vectors with class labels and group annotations.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub features: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub groups: Vec<(usize, usize)>,
}

impl LabeledFeatures {
    pub fn new(features: EmbeddingMatrix, labels: Vec<usize>, groups: Vec<(usize, usize)>) -> Result<Self> {
        if labels.len() != features.count() || groups.len() != features.count() {
            return Err(Error::Pairing(format!(
                "{} feature rows, {} labels, {} groups",
                features.count(),
                labels.len(),
                groups.len()
            )));
        }
        if let Some(i) = (0..labels.len()).find(|&i| groups[i].0 != labels[i]) {
            return Err(Error::Schema(format!("row {i}: group class {} differs from label {}", groups[i].0, labels[i])));
        }
        Ok(Self { features, labels, groups })
    }

    /// Loads a feature matrix and its manifest, which must carry labels and groups.
    pub fn load(matrix: &Path, manifest: &Path) -> Result<Self> {
        let m = store::load_matrix(matrix)?;
        let man = store::load_manifest(manifest)?;
        store::validate_pairing(&m, &man).map_err(|e| match e {
            Error::Pairing(msg) => Error::Pairing(format!("{} vs {}: {msg}", matrix.display(), manifest.display())),
            other => other,
        })?;
        Self::from_manifest(m, &man)
    }

    pub fn from_manifest(m: EmbeddingMatrix, man: &Manifest) -> Result<Self> {
        let labels = man.labels.clone().ok_or_else(|| Error::Schema("manifest has no labels".into()))?;
        let groups = man.groups.clone().ok_or_else(|| Error::Schema("manifest has no groups".into()))?;
        Self::new(m, labels, groups)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    pub fn group_counts(&self, spec: &GroupSpec) -> Vec<usize> {
        let mut counts = vec![0; spec.groups.len()];
        for g in &self.groups {
            if let Some(k) = spec.position(*g) {
                counts[k] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    pub a: usize,
    pub n: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_group: Vec<GroupAccuracy>,
    pub wga: f64,
    pub mean_acc: f64,
    /// Weights used for `mean_acc`, aligned with `per_group`.
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_groups: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_meta: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Uniform,
    /// Proportions of the evaluated set.
    Test,
    /// The weights stored in the group spec (training proportions).
    #[default]
    Train,
}

impl std::str::FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "test" => Ok(Self::Test),
            "train" => Ok(Self::Train),
            _ => Err(format!("unknown weight mode {s:?} (expected uniform, test or train)")),
        }
    }
}

/// Predictions by strict argmax; `None` marks a tie.
pub fn predict(head: &LinearHead, features: &EmbeddingMatrix) -> Result<Vec<Option<usize>>> {
    head.check_input(features.dim())?;
    let logits = head.logits_batch(features.data());
    Ok((0..logits.nrows()).into_par_iter().map(|i| strict_argmax(&logits.row(i))).collect())
}

/// Evaluates a head. Groups with no samples are left out of the minimum and
/// the mean (remaining weights are renormalized) and listed as missing.
pub fn evaluate(head: &LinearHead, data: &LabeledFeatures, spec: &GroupSpec, mode: WeightMode) -> Result<EvalReport> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set has no samples".into()));
    }
    let preds = predict(head, &data.features)?;
    let mut n = vec![0usize; spec.groups.len()];
    let mut correct = vec![0usize; spec.groups.len()];
    for (i, pred) in preds.iter().enumerate() {
        let g = spec
            .position(data.groups[i])
            .ok_or_else(|| Error::Schema(format!("row {i} has group {:?}, not in the group spec", data.groups[i])))?;
        n[g] += 1;
        if *pred == Some(data.labels[i]) {
            correct[g] += 1;
        }
    }
    let base = match mode {
        WeightMode::Train => spec.weights.clone(),
        WeightMode::Uniform => spec.uniform().weights,
        WeightMode::Test => spec.with_count_weights(&n)?.weights,
    };
    let mut per_group = Vec::new();
    let mut raw_weights = Vec::new();
    let mut missing = Vec::new();
    for (k, &(y, a)) in spec.groups.iter().enumerate() {
        if n[k] == 0 {
            missing.push((y, a));
            continue;
        }
        per_group.push(GroupAccuracy { y, a, n: n[k], acc: correct[k] as f64 / n[k] as f64 });
        raw_weights.push(base[k]);
    }
    if !missing.is_empty() {
        log::warn!("groups absent from evaluation set: {missing:?}");
    }
    let total: f64 = raw_weights.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        raw_weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / per_group.len() as f64; per_group.len()]
    };
    let wga = per_group.iter().map(|g| g.acc).fold(f64::INFINITY, f64::min);
    let mean_acc = per_group.iter().zip(&weights).map(|(g, w)| g.acc * w).sum();
    Ok(EvalReport { per_group, wga, mean_acc, weights, missing_groups: missing, head_meta: None })
}

pub fn worst_group_accuracy(head: &LinearHead, data: &LabeledFeatures, spec: &GroupSpec) -> Result<f64> {
    Ok(evaluate(head, data, spec, WeightMode::Uniform)?.wga)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub y: usize,
    pub a: usize,
    pub delta_acc: f64,
}

/// Differences `b − a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub per_group: Vec<GroupDelta>,
    pub wga: f64,
    pub mean_acc: f64,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    let keys = |r: &EvalReport| r.per_group.iter().map(|g| (g.y, g.a)).collect::<Vec<_>>();
    if keys(a) != keys(b) {
        return Err(Error::Schema(format!("reports cover different groups: {:?} vs {:?}", keys(a), keys(b))));
    }
    let per_group = a
        .per_group
        .iter()
        .zip(&b.per_group)
        .map(|(ga, gb)| GroupDelta { y: ga.y, a: ga.a, delta_acc: gb.acc - ga.acc })
        .collect();
    Ok(ReportDelta { per_group, wga: b.wga - a.wga, mean_acc: b.mean_acc - a.mean_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    /// Head predicting class = argmax of the raw two-dim feature.
    fn identity_head() -> LinearHead {
        LinearHead::new(Array2::eye(2), Array1::zeros(2)).unwrap()
    }

    fn data(rows: &[[f64; 2]], labels: &[usize], groups: &[(usize, usize)]) -> LabeledFeatures {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        LabeledFeatures::new(EmbeddingMatrix::from_rows(&rows, 2).unwrap(), labels.to_vec(), groups.to_vec()).unwrap()
    }

    #[test]
    fn all_correct_and_one_group_wrong() {
        let spec = GroupSpec::full(2, 1);
        let d = data(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1], &[(0, 0), (1, 0)]);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Train).unwrap();
        assert_eq!(r.wga, 1.0);
        assert_eq!(r.mean_acc, 1.0);
        let d = data(&[[1.0, 0.0], [1.0, 0.0]], &[0, 1], &[(0, 0), (1, 0)]);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Train).unwrap();
        assert_eq!(r.wga, 0.0);
    }

    #[test]
    fn weighted_mean_arithmetic() {
        let spec = GroupSpec::new(2, 1, vec![(0, 0), (1, 0)], vec![0.25, 0.75]).unwrap();
        let d = data(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], &[0, 0, 1, 1], &[(0, 0), (0, 0), (1, 0), (1, 0)]);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Train).unwrap();
        assert_eq!(r.wga, 0.5);
        assert_eq!(r.mean_acc, 0.875);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Uniform).unwrap();
        assert_eq!(r.mean_acc, 0.75);
    }

    #[test]
    fn ties_count_as_wrong() {
        let spec = GroupSpec::full(2, 1);
        let d = data(&[[1.0, 1.0]], &[0], &[(0, 0)]);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Train).unwrap();
        assert_eq!(r.per_group[0].acc, 0.0);
        assert_eq!(r.missing_groups, vec![(1, 0)]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn empty_and_unknown_groups() {
        let spec = GroupSpec::full(2, 1);
        let empty = LabeledFeatures::new(EmbeddingMatrix::empty(2).unwrap(), vec![], vec![]).unwrap();
        assert!(matches!(evaluate(&identity_head(), &empty, &spec, WeightMode::Train), Err(Error::EmptyInput(_))));
        let spec = GroupSpec::new(2, 1, vec![(0, 0)], vec![1.0]).unwrap();
        let d = data(&[[0.0, 1.0]], &[1], &[(1, 0)]);
        assert!(matches!(evaluate(&identity_head(), &d, &spec, WeightMode::Train), Err(Error::Schema(_))));
    }

    #[test]
    fn compare_identical_and_mismatched() {
        let spec = GroupSpec::full(2, 1);
        let d = data(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1], &[(0, 0), (1, 0)]);
        let r = evaluate(&identity_head(), &d, &spec, WeightMode::Train).unwrap();
        let delta = compare_reports(&r, &r).unwrap();
        assert!(delta.per_group.iter().all(|g| g.delta_acc == 0.0));
        assert_eq!(delta.wga, 0.0);
        let mut other = r.clone();
        other.per_group.pop();
        assert!(matches!(compare_reports(&r, &other), Err(Error::Schema(_))));
    }

    #[test]
    fn report_json_shape() {
        let r = EvalReport {
            per_group: vec![GroupAccuracy { y: 0, a: 1, n: 3, acc: 0.5 }],
            wga: 0.5,
            mean_acc: 0.5,
            weights: vec![1.0],
            missing_groups: vec![],
            head_meta: None,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v, serde_json::json!({"per_group":[{"y":0,"a":1,"n":3,"acc":0.5}],"wga":0.5,"mean_acc":0.5,"weights":[1.0]}));
    }
}
