//! Last-layer retraining: softmax cross-entropy, SGD/AdamW, cosine decay and
//! early stopping on validation worst-group accuracy.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupSpec, Item, TextPairDataset};
use crate::error::{Error, Result};
use crate::eval::{worst_group_accuracy, LabeledFeatures};
use crate::head::LinearHead;
use crate::projector::Projector;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    None,
    Cosine,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::Adamw),
            _ => Err(format!("unknown optimizer {s:?} (expected sgd or adamw)")),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!("unknown schedule {s:?} (expected none or cosine)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: Schedule,
    pub relu_on_projection: bool,
    pub seed: u64,
    /// Project every bank row once up front instead of per batch.
    #[serde(default)]
    pub cache_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            weight_decay: 0.0,
            momentum: 0.0,
            batch_size: 128,
            epochs: 20,
            scheduler: Schedule::None,
            relu_on_projection: false,
            seed: 0,
            cache_projection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and ≥ 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be finite and ≥ 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Schedule::None => self.lr,
            Schedule::Cosine => cosine_lr(self.lr, epoch, self.epochs),
        }
    }
}

/// `lr · ½(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Mean softmax cross-entropy of a batch and its exact gradients with
/// respect to the head weight and bias.
pub fn forward_loss(head: &LinearHead, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let b = x.nrows();
    if b == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} rows but {} labels", labels.len())));
    }
    head.check_input(x.ncols())?;
    let c = head.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("label {y} outside {c} classes")));
    }
    let logits = head.logits_batch(&x);
    let mut probs = Array2::<f64>::zeros((b, c));
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        for k in 0..c {
            probs[[i, k]] = (row[k] - lse).exp();
        }
        probs[[i, labels[i]]] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    let grad_w = x.t().dot(&probs) * scale;
    let grad_b = probs.sum_axis(Axis(0)) * scale;
    Ok((loss * scale, grad_w, grad_b))
}

pub fn apply_relu(z: &EmbeddingMatrix) -> EmbeddingMatrix {
    EmbeddingMatrix::new(z.data().mapv(|v| v.max(0.0))).expect("relu keeps values finite")
}

/// Optimizer state for one head.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    step: i32,
    m_w: Array2<f64>,
    m_b: Array1<f64>,
    v_w: Array2<f64>,
    v_b: Array1<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: &TrainConfig, head: &LinearHead) -> Self {
        let (d, c) = head.weight.dim();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            step: 0,
            m_w: Array2::zeros((d, c)),
            m_b: Array1::zeros(c),
            v_w: Array2::zeros((d, c)),
            v_b: Array1::zeros(c),
        }
    }

    /// SGD adds decay to the gradient (bias included); AdamW decays the
    /// parameters directly before the Adam update.
    pub fn step(&mut self, head: &mut LinearHead, mut grad_w: Array2<f64>, mut grad_b: Array1<f64>, lr: f64) {
        self.step += 1;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                if wd != 0.0 {
                    grad_w.scaled_add(wd, &head.weight);
                    grad_b.scaled_add(wd, &head.bias);
                }
                if self.momentum != 0.0 {
                    self.m_w.mapv_inplace(|v| v * self.momentum);
                    self.m_w += &grad_w;
                    self.m_b.mapv_inplace(|v| v * self.momentum);
                    self.m_b += &grad_b;
                    head.weight.scaled_add(-lr, &self.m_w);
                    head.bias.scaled_add(-lr, &self.m_b);
                } else {
                    head.weight.scaled_add(-lr, &grad_w);
                    head.bias.scaled_add(-lr, &grad_b);
                }
            }
            OptimizerKind::Adamw => {
                if wd != 0.0 {
                    let f = 1.0 - lr * wd;
                    head.weight.mapv_inplace(|v| v * f);
                    head.bias.mapv_inplace(|v| v * f);
                }
                let bc1 = 1.0 - ADAM_B1.powi(self.step);
                let bc2 = 1.0 - ADAM_B2.powi(self.step);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
                    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                };
                ndarray::Zip::from(&mut head.weight)
                    .and(&mut self.m_w)
                    .and(&mut self.v_w)
                    .and(&grad_w)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
                ndarray::Zip::from(&mut head.bias)
                    .and(&mut self.m_b)
                    .and(&mut self.v_b)
                    .and(&grad_b)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
}

/// Where training batches come from. `plan_epoch` lists the epoch's items in
/// order; `materialize` turns a slice of them into head inputs and labels.
pub trait TrainingSource {
    type Item: Copy;

    fn plan_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Self::Item>;

    fn materialize(&self, items: &[Self::Item], rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<usize>)>;
}

/// Averaged text-pair embeddings pushed through the projector.
pub struct TextSource<'a, 'b> {
    ds: &'a TextPairDataset<'b>,
    projector: &'a Projector,
    relu: bool,
    /// projected bank rows, when caching
    cache: Option<Array2<f64>>,
}

impl<'a, 'b> TextSource<'a, 'b> {
    pub fn new(ds: &'a TextPairDataset<'b>, projector: &'a Projector, relu: bool, cache: bool) -> Result<Self> {
        if ds.bank().dim() != projector.d_clip() {
            return Err(Error::Shape(format!(
                "bank dim {} vs projector input dim {}",
                ds.bank().dim(),
                projector.d_clip()
            )));
        }
        let cache = cache.then(|| {
            let m = ds.bank().matrix().data();
            m.dot(&projector.weight) + projector.bias.view().insert_axis(Axis(0))
        });
        Ok(Self { ds, projector, relu, cache })
    }
}

impl TrainingSource for TextSource<'_, '_> {
    type Item = Item;

    fn plan_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Item> {
        self.ds.sample_epoch(rng)
    }

    fn materialize(&self, items: &[Item], rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<usize>)> {
        let labels = items.iter().map(|&(g, _)| self.ds.label(g)).collect();
        let mut x = match &self.cache {
            None => {
                let mut z = Array2::zeros((items.len(), self.projector.d_clip()));
                for (i, &(g, p)) in items.iter().enumerate() {
                    z.row_mut(i).assign(&self.ds.fetch(g, p, rng)?);
                }
                z.dot(&self.projector.weight) + self.projector.bias.view().insert_axis(Axis(0))
            }
            Some(cache) => {
                let bank = self.ds.bank();
                let k_count = self.ds.template_count();
                let mut x = Array2::zeros((items.len(), cache.ncols()));
                for (i, &(g, p)) in items.iter().enumerate() {
                    let gp = &self.ds.groups()[g];
                    let (cw, aw) = gp.pair(p).ok_or_else(|| Error::Shape(format!("pair ({g}, {p}) out of range")))?;
                    let k = rng.random_range(0..k_count);
                    let rc = bank.row_index(cw, k)?;
                    let ra = bank.row_index(aw, k)?;
                    // the projector is affine, so projecting the midpoint
                    // equals the midpoint of the projections
                    x.row_mut(i).assign(&((&cache.row(rc) + &cache.row(ra)) * 0.5));
                }
                x
            }
        };
        if self.relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
        Ok((x, labels))
    }
}

/// Real feature vectors, either all rows (plain ERM) or a group-balanced
/// subsample redrawn every epoch.
pub struct FeatureSource<'a> {
    data: &'a LabeledFeatures,
    /// row indices per group; `None` means every row every epoch
    balanced: Option<Vec<Vec<usize>>>,
}

impl<'a> FeatureSource<'a> {
    pub fn erm(data: &'a LabeledFeatures) -> Self {
        Self { data, balanced: None }
    }

    pub fn group_balanced(data: &'a LabeledFeatures, spec: &GroupSpec) -> Result<Self> {
        let mut rows = vec![Vec::new(); spec.groups.len()];
        for (i, g) in data.groups.iter().enumerate() {
            let k = spec.position(*g).ok_or_else(|| Error::Schema(format!("row {i} has group {g:?}, not in the group spec")))?;
            rows[k].push(i);
        }
        if let Some(k) = rows.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("group {:?} has no training rows", spec.groups[k])));
        }
        Ok(Self { data, balanced: Some(rows) })
    }
}

impl TrainingSource for FeatureSource<'_> {
    type Item = usize;

    fn plan_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut items: Vec<usize> = match &self.balanced {
            None => (0..self.data.len()).collect(),
            Some(groups) => {
                let n_min = groups.iter().map(Vec::len).min().unwrap_or(0);
                groups
                    .iter()
                    .flat_map(|rows| index::sample(rng, rows.len(), n_min).into_iter().map(|j| rows[j]).collect::<Vec<_>>())
                    .collect()
            }
        };
        items.shuffle(rng);
        items
    }

    fn materialize(&self, items: &[usize], _rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<usize>)> {
        let x = self.data.features.data().select(Axis(0), items);
        Ok((x, items.iter().map(|&i| self.data.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub loss: f64,
    pub val_wga: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_wga: Option<f64>,
}

impl TrainHistory {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.epochs {
            serde_json::to_writer(&mut out, rec).expect("serializable");
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Validation data for early stopping.
pub struct Validation<'a> {
    pub data: &'a LabeledFeatures,
    pub spec: &'a GroupSpec,
}

/// Trains `head_init` on batches from `source`. With validation, returns the
/// head of the first epoch reaching the highest worst-group accuracy;
/// without, the head after the last epoch.
pub fn train_head<S: TrainingSource>(
    head_init: &LinearHead,
    source: &S,
    val: Option<&Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<(LinearHead, TrainHistory)> {
    cfg.validate()?;
    if let Some(v) = val {
        if v.data.is_empty() {
            return Err(Error::EmptyInput("validation set is empty".into()));
        }
        head_init.check_input(v.data.features.dim())?;
        let counts = v.data.group_counts(v.spec);
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("validation set has no rows of group {:?}", v.spec.groups[k])));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = head_init.clone();
    let mut opt = Optimizer::new(cfg, &head);
    let mut best: Option<(usize, f64, LinearHead)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let plan = source.plan_epoch(&mut rng);
        if plan.is_empty() {
            return Err(Error::EmptyInput("training epoch has no items".into()));
        }
        let mut loss_sum = 0.0;
        for (batch, items) in plan.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = source.materialize(items, &mut rng)?;
            let (loss, gw, gb) = forward_loss(&head, x.view(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, batch, loss });
            }
            loss_sum += loss * items.len() as f64;
            opt.step(&mut head, gw, gb, lr);
        }
        if head.weight.iter().chain(head.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch: epoch + 1, batch: plan.len().div_ceil(cfg.batch_size) - 1, loss: f64::NAN });
        }
        let loss = loss_sum / plan.len() as f64;
        let val_wga = match val {
            Some(v) => Some(worst_group_accuracy(&head, v.data, v.spec)?),
            None => None,
        };
        log::debug!("epoch {} loss {loss:.6} lr {lr:.3e} val_wga {val_wga:?}", epoch + 1);
        records.push(EpochRecord { epoch: epoch + 1, loss, val_wga, lr });
        let score = val_wga.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val.is_none() || score > *b,
        };
        if improved {
            best = Some((epoch + 1, score, head.clone()));
        }
    }
    let (best_epoch, best_score, best_head) = best.expect("at least one epoch");
    let history = TrainHistory {
        epochs: records,
        best_epoch,
        best_val_wga: val.map(|_| best_score),
    };
    Ok((best_head, history))
}

/// Retrains on projected averaged text embeddings with early stopping on
/// validation worst-group accuracy.
pub fn retrain(
    head_init: &LinearHead,
    ds: &TextPairDataset<'_>,
    p: &Projector,
    val: &LabeledFeatures,
    spec: &GroupSpec,
    cfg: &TrainConfig,
) -> Result<(LinearHead, TrainHistory)> {
    head_init.check_input(p.d_feat())?;
    let source = TextSource::new(ds, p, cfg.relu_on_projection, cfg.cache_projection)?;
    train_head(head_init, &source, Some(&Validation { data: val, spec }), cfg)
}
