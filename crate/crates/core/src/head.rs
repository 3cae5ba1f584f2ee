//! The classifier's last linear layer.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayBase, Axis, Data, Ix1, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{read_json, write_json};
use crate::store;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// d_feat × classes
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if bias.len() != weight.ncols() {
            return Err(Error::Shape(format!(
                "head bias has {} entries for {} classes",
                bias.len(),
                weight.ncols()
            )));
        }
        if weight.ncols() == 0 {
            return Err(Error::Shape("head has zero classes".into()));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("head contains non-finite entries".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(d_feat: usize, classes: usize) -> Self {
        Self { weight: Array2::zeros((d_feat, classes)), bias: Array1::zeros(classes) }
    }

    pub fn d_feat(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits<S: Data<Elem = f64>>(&self, x: &ArrayBase<S, Ix1>) -> Array1<f64> {
        self.weight.t().dot(x) + &self.bias
    }

    /// Row-wise logits for a batch (rows are samples).
    pub fn logits_batch<S: Data<Elem = f64>>(&self, x: &ArrayBase<S, Ix2>) -> Array2<f64> {
        x.dot(&self.weight) + self.bias.view().insert_axis(Axis(0))
    }

    pub fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.d_feat() {
            return Err(Error::Shape(format!("head expects {}-dim features, got {dim}", self.d_feat())));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, meta: &HeadMeta) -> Result<()> {
        store::save_array2(&self.weight, dir.join("W_head.npy"))?;
        store::save_vector(&self.bias, dir.join("b_head.npy"))?;
        write_json(&dir.join("meta.json"), meta)
    }

    /// Loads `W_head.npy` and `b_head.npy`; `meta.json` is optional so heads
    /// exported by the feature extractor load as well.
    pub fn load(dir: &Path) -> Result<(Self, Option<HeadMeta>)> {
        let weight = store::load_array2(dir.join("W_head.npy"))?;
        let bias = store::load_vector(dir.join("b_head.npy"))?;
        let head = Self::new(weight, bias)?;
        let meta_path = dir.join("meta.json");
        let meta = if meta_path.exists() { Some(read_json(&meta_path)?) } else { None };
        Ok((head, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub best_epoch: usize,
    pub best_val_wga: f64,
    pub config: serde_json::Value,
}

/// Index of the unique strict maximum; `None` on ties.
pub fn strict_argmax<S: Data<Elem = f64>>(v: &ArrayBase<S, Ix1>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, &x) in v.iter().enumerate() {
        match best {
            None => best = Some((i, x)),
            Some((_, b)) if x > b => {
                best = Some((i, x));
                tied = false;
            }
            Some((_, b)) if x == b => tied = true,
            _ => {}
        }
    }
    if tied { None } else { best.map(|(i, _)| i) }
}

/// Numerically stable softmax.
pub fn softmax<S: Data<Elem = f64>>(v: &ArrayBase<S, Ix1>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

pub fn relu_inplace(v: &mut Array1<f64>) {
    v.mapv_inplace(|x| x.max(0.0));
}
