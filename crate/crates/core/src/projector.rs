//! Cross-space linear projector `z ↦ Wᵀz + b` from the joint vision-language
//! space into the classifier's feature space, fitted by ridge regression with
//! the optional equality constraint `Wᵀg = 0` against the modality gap `g`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayBase, Axis, Data, Ix1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::store::{self, EmbeddingMatrix};

/// Gaps with a smaller l2 norm are rejected as a constraint direction.
pub const MIN_GAP_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Averaged modality gap plus the spread of the per-pair gaps around it.
#[derive(Debug, Clone, PartialEq)]
pub struct GapEstimate {
    pub gap: Array1<f64>,
    pub pair_count: usize,
    /// Norms of the per-pair differences.
    pub magnitude: MeanStd,
    /// Cosine between each per-pair difference and the averaged gap.
    pub direction: MeanStd,
}

/// Averages `image_i − text_i` over row-paired embeddings.
///
/// Embeddings are used exactly as given; no normalization happens here.
pub fn estimate_gap(clip_images: &EmbeddingMatrix, clip_texts: &EmbeddingMatrix) -> Result<GapEstimate> {
    if clip_images.count() != clip_texts.count() || clip_images.dim() != clip_texts.dim() {
        return Err(Error::Pairing(format!(
            "image embeddings are {}x{}, text embeddings are {}x{}",
            clip_images.count(),
            clip_images.dim(),
            clip_texts.count(),
            clip_texts.dim()
        )));
    }
    let n = clip_images.count();
    if n == 0 {
        return Err(Error::EmptyInput("no image-text pairs to estimate the gap from".into()));
    }
    let diffs = clip_images.data() - clip_texts.data();
    let gap = diffs.mean_axis(Axis(0)).expect("n > 0");
    let gap_norm = gap.dot(&gap).sqrt();

    let norms: Vec<f64> = diffs.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let cosines: Vec<f64> = diffs
        .rows()
        .into_iter()
        .zip(&norms)
        .map(|(r, &nr)| if nr > 0.0 && gap_norm > 0.0 { r.dot(&gap) / (nr * gap_norm) } else { 0.0 })
        .collect();

    Ok(GapEstimate {
        gap,
        pair_count: n,
        magnitude: MeanStd::of(&norms),
        direction: MeanStd::of(&cosines),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapStats {
    pub pair_count: usize,
    pub magnitude: MeanStd,
    pub direction: MeanStd,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_ids: Vec<String>,
}

/// Writes `gap.npy` and `gap_stats.json` into `dir`.
pub fn save_gap(est: &GapEstimate, pair_ids: &[String], normalized: bool, dir: &Path) -> Result<()> {
    store::save_vector(&est.gap, dir.join("gap.npy"))?;
    let stats = GapStats {
        pair_count: est.pair_count,
        magnitude: est.magnitude,
        direction: est.direction,
        normalized,
        pair_ids: pair_ids.to_vec(),
    };
    write_json(&dir.join("gap_stats.json"), &stats)
}

/// Hex SHA-256 of the little-endian f64 encoding of `v`.
pub fn vector_digest(v: &Array1<f64>) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// d_clip × d_feat
    pub weight: Array2<f64>,
    /// d_feat
    pub bias: Array1<f64>,
    pub lambda: f64,
    /// Gap the weight was constrained against; `None` for unconstrained fits.
    pub gap_used: Option<Array1<f64>>,
    /// ‖Wᵀg‖₁ / d_feat at fit time (0 when unconstrained and no gap known).
    pub ortho_residual: f64,
}

impl Projector {
    pub fn d_clip(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.weight.ncols()
    }

    pub fn is_constrained(&self) -> bool {
        self.gap_used.is_some()
    }

    /// Projects one joint-space vector.
    pub fn apply<S: Data<Elem = f64>>(&self, z: &ArrayBase<S, Ix1>) -> Array1<f64> {
        self.weight.t().dot(z) + &self.bias
    }
}

/// Ridge regression of `y` on `x` with closed-form solution, optionally
/// constrained so that the gap lies in the null space of `Wᵀ`.
///
/// With `A = XᵀX + λI` and `W̃ = A⁻¹XᵀY`, the constrained weight is
/// `W̃ − A⁻¹g (gᵀA⁻¹g)⁻¹ gᵀW̃`; the bias is the mean residual.
pub fn fit_projector(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    gap: Option<&Array1<f64>>,
    lambda: f64,
) -> Result<Projector> {
    if x.count() != y.count() {
        return Err(Error::Pairing(format!(
            "{} joint-space rows but {} feature rows",
            x.count(),
            y.count()
        )));
    }
    if x.count() == 0 {
        return Err(Error::EmptyInput("projector fitting needs at least one pair".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    let (xd, yd) = (x.data(), y.data());
    let d_clip = x.dim();

    let mut gram = xd.t().dot(xd);
    for i in 0..d_clip {
        gram[[i, i]] += lambda;
    }
    let chol = Cholesky::factor(gram.view()).map_err(|e| match e {
        Error::SingularMatrix(msg) => Error::SingularMatrix(format!("XᵀX + {lambda}·I: {msg}")),
        other => other,
    })?;
    let unconstrained = chol.solve_mat(&xd.t().dot(yd));

    let weight = match gap {
        None => unconstrained,
        Some(g) => {
            if g.len() != d_clip {
                return Err(Error::Shape(format!("gap has dim {}, embeddings have {d_clip}", g.len())));
            }
            let norm = g.dot(g).sqrt();
            if !(norm > MIN_GAP_NORM) {
                return Err(Error::DegenerateGap(norm));
            }
            let h = chol.solve_vec(g);
            let pivot = g.dot(&h);
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::DegenerateGap(norm));
            }
            let mut w = remove_gap_component(unconstrained, &h, g, pivot);
            // The correction is exact in exact arithmetic; a second pass
            // removes what rounding left behind when W̃ is large along g.
            w = remove_gap_component(w, &h, g, pivot);
            w
        }
    };

    let residual = yd - &xd.dot(&weight);
    let bias = residual.mean_axis(Axis(0)).expect("n > 0");
    let ortho_residual = gap.map_or(0.0, |g| weight.t().dot(g).iter().map(|v| v.abs()).sum::<f64>() / weight.ncols() as f64);

    Ok(Projector {
        weight,
        bias,
        lambda,
        gap_used: gap.cloned(),
        ortho_residual,
    })
}

fn remove_gap_component(w: Array2<f64>, h: &Array1<f64>, g: &Array1<f64>, pivot: f64) -> Array2<f64> {
    let gtw = w.t().dot(g) / pivot;
    let outer = h
        .view()
        .insert_axis(Axis(1))
        .dot(&gtw.view().insert_axis(Axis(0)));
    w - outer
}

/// ‖z − ẑ‖² / ‖z‖².
pub fn nmse(z: &Array1<f64>, z_hat: &Array1<f64>) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::Shape(format!("nmse of vectors with dims {} and {}", z.len(), z_hat.len())));
    }
    let denom = z.dot(z);
    if denom == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let diff = z - z_hat;
    Ok(diff.dot(&diff) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    lambda_grid: Vec<f64>,
    pub constrained: bool,
}

impl RidgeConfig {
    pub fn new(lambda_grid: Vec<f64>, constrained: bool) -> Result<Self> {
        if lambda_grid.is_empty() {
            return Err(Error::Domain("lambda grid is empty".into()));
        }
        if lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain("lambda grid values must be finite and non-negative".into()));
        }
        if lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("lambda grid must be strictly increasing".into()));
        }
        Ok(Self { lambda_grid, constrained })
    }

    pub fn lambda_grid(&self) -> &[f64] {
        &self.lambda_grid
    }

    /// Parses `"0.1,1,10"` or an inclusive `"lo:hi:step"` range.
    pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
        let bad = |s: &str| Error::Domain(format!("cannot parse lambda grid {s:?}"));
        let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
        match parts.as_slice() {
            [lo, hi, step] => {
                let (lo, hi, step): (f64, f64, f64) = (
                    lo.parse().map_err(|_| bad(spec))?,
                    hi.parse().map_err(|_| bad(spec))?,
                    step.parse().map_err(|_| bad(spec))?,
                );
                if !(step > 0.0) || hi < lo {
                    return Err(bad(spec));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                Ok((0..=n).map(|i| lo + i as f64 * step).collect())
            }
            [list] => list
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad(spec)))
                .collect(),
            _ => Err(bad(spec)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Mean row-wise validation NMSE; `None` when the fit failed.
    pub val_nmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean row-wise NMSE of `targets` against the projection of `inputs`.
pub fn mean_nmse(p: &Projector, inputs: &EmbeddingMatrix, targets: &EmbeddingMatrix) -> Result<f64> {
    let pred = project(p, inputs)?;
    if pred.count() != targets.count() || pred.dim() != targets.dim() {
        return Err(Error::Pairing("validation inputs and targets disagree".into()));
    }
    let mut total = 0.0;
    for (z, zh) in targets.data().rows().into_iter().zip(pred.data().rows()) {
        total += nmse(&z.to_owned(), &zh.to_owned())?;
    }
    Ok(total / targets.count() as f64)
}

/// Fits one projector per grid value and keeps the one with the smallest
/// validation NMSE. Ties go to the larger λ. Grid points are evaluated in
/// parallel but the table and the choice follow grid order.
pub fn search_lambda(
    train_x: &EmbeddingMatrix,
    train_y: &EmbeddingMatrix,
    val_x: &EmbeddingMatrix,
    val_y: &EmbeddingMatrix,
    gap: Option<&Array1<f64>>,
    cfg: &RidgeConfig,
) -> Result<(Projector, Vec<LambdaScore>)> {
    if val_x.count() == 0 || val_y.count() == 0 {
        return Err(Error::EmptyInput("validation split is empty".into()));
    }
    let gap = if cfg.constrained {
        Some(gap.ok_or_else(|| Error::Domain("constrained search needs a gap vector".into()))?)
    } else {
        None
    };
    let fits: Vec<Result<(Projector, f64)>> = cfg
        .lambda_grid
        .par_iter()
        .map(|&lambda| {
            let p = fit_projector(train_x, train_y, gap, lambda)?;
            let score = mean_nmse(&p, val_x, val_y)?;
            Ok((p, score))
        })
        .collect();

    let mut table = Vec::with_capacity(fits.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, (fit, &lambda)) in fits.iter().zip(&cfg.lambda_grid).enumerate() {
        match fit {
            Ok((_, score)) => {
                table.push(LambdaScore { lambda, val_nmse: Some(*score), error: None });
                if best.is_none_or(|(_, s)| *score <= s) {
                    best = Some((i, *score));
                }
            }
            Err(e) => table.push(LambdaScore { lambda, val_nmse: None, error: Some(e.to_string()) }),
        }
    }
    let Some((idx, _)) = best else {
        let reasons: Vec<String> = table.iter().filter_map(|r| r.error.clone()).collect();
        return Err(Error::SearchFailed(reasons.join("; ")));
    };
    let projector = fits.into_iter().nth(idx).expect("index in range").expect("best fit is ok").0;
    Ok((projector, table))
}

/// Maps each row `z` to `Wᵀz + b`. No activation is applied.
pub fn project(p: &Projector, z: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if z.dim() != p.d_clip() {
        return Err(Error::Shape(format!(
            "projector expects dim {}, embeddings have dim {}",
            p.d_clip(),
            z.dim()
        )));
    }
    let out = z.data().dot(&p.weight) + &p.bias;
    EmbeddingMatrix::new(out)
}

/// Returns `(‖Wᵀg‖₁ / d_feat, ‖Wᵀg‖∞)`.
pub fn ortho_diagnostics(p: &Projector, g: &Array1<f64>) -> Result<(f64, f64)> {
    if g.len() != p.d_clip() {
        return Err(Error::Shape(format!("gap has dim {}, projector expects {}", g.len(), p.d_clip())));
    }
    let wg = p.weight.t().dot(g);
    let l1 = wg.iter().map(|v| v.abs()).sum::<f64>() / p.d_feat() as f64;
    let linf = wg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((l1, linf))
}

/// Mean over rows of `‖a_i − b_i‖₁ / dim`.
pub fn mean_l1_distance(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    if a.count() != b.count() || a.dim() != b.dim() {
        return Err(Error::Pairing("distance between matrices of different shapes".into()));
    }
    if a.count() == 0 {
        return Err(Error::EmptyInput("distance over zero rows".into()));
    }
    let total: f64 = (a.data() - b.data()).iter().map(|v| v.abs()).sum();
    Ok(total / (a.count() * a.dim()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorMeta {
    pub lambda: f64,
    pub constrained: bool,
    pub ortho_l1_per_dim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_sha256: Option<String>,
}

/// Writes `W.npy`, `b.npy` and `meta.json` into `dir`.
pub fn save_projector(p: &Projector, dir: &Path) -> Result<()> {
    store::save_array2(&p.weight, dir.join("W.npy"))?;
    store::save_vector(&p.bias, dir.join("b.npy"))?;
    let meta = ProjectorMeta {
        lambda: p.lambda,
        constrained: p.is_constrained(),
        ortho_l1_per_dim: p.ortho_residual,
        gap_sha256: p.gap_used.as_ref().map(vector_digest),
    };
    write_json(&dir.join("meta.json"), &meta)
}

/// Loads a projector written by [`save_projector`]. The gap vector itself is
/// not stored, so `gap_used` is `None`; the metadata records whether the fit
/// was constrained.
pub fn load_projector(dir: &Path) -> Result<(Projector, ProjectorMeta)> {
    let weight = store::load_array2(dir.join("W.npy"))?;
    let bias = store::load_vector(dir.join("b.npy"))?;
    if bias.len() != weight.ncols() {
        return Err(Error::Shape(format!(
            "projector bias has dim {}, weight has {} columns",
            bias.len(),
            weight.ncols()
        )));
    }
    let meta: ProjectorMeta = read_json(&dir.join("meta.json"))?;
    let p = Projector {
        weight,
        bias,
        lambda: meta.lambda,
        gap_used: None,
        ortho_residual: meta.ortho_l1_per_dim,
    };
    Ok((p, meta))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
