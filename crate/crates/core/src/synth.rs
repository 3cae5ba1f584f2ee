//! Synthetic worlds with a planted modality gap, a known joint-to-feature
//! map and a spurious attribute, plus reference solvers used as oracles.
//!
//! Joint space is split into a shared mean direction, the gap direction and
//! a "content" subspace that holds class directions, attribute directions
//! and the remaining noise dimensions:
//!
//! ```text
//! image  = mean + gap + c_y·u_y + c_a·v_a + noise
//! text   = image − gap + jitter
//! feature = relu(W_trueᵀ image + b_true + map noise)
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::{BankIndex, TextEmbeddingBank};
use crate::dataset::GroupSpec;
use crate::error::{Error, Result};
use crate::eval::LabeledFeatures;
use crate::head::{HeadMeta, LinearHead};
use crate::projector::{write_json, Projector};
use crate::store::{self, EmbeddingMatrix, Manifest, Role};
use crate::templates::PromptTemplateSet;
use crate::train::{train_head, FeatureSource, TrainConfig, Validation};
use crate::vocab::{Category, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub seed: u64,
    pub d_clip: usize,
    pub d_feat: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub partitions: Vec<Vec<usize>>,
    /// Majority attribute of each class; must lie in the class's partition.
    pub majority: Vec<usize>,
    /// Attribute partition each class draws from.
    pub class_partition: Vec<usize>,
    pub mean_norm: f64,
    pub gap_norm: f64,
    pub class_scale: f64,
    pub attr_scale: f64,
    /// Per-dimension instance noise inside the content subspace.
    pub content_noise: f64,
    /// Per-dimension instance noise in every direction, including the mean
    /// and gap directions. Zero makes the mean and gap coordinates constant.
    pub isotropic_noise: f64,
    /// Joint-space jitter between paired image and text embeddings.
    pub joint_noise: f64,
    /// Noise added to features before the activation.
    pub map_noise: f64,
    /// Pre-activation offset carried by the mean direction.
    pub feature_offset: f64,
    pub feature_scale: f64,
    pub relu_features: bool,
    /// Train fraction of minority groups.
    pub rho: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_gap_pairs: usize,
    pub words_per_category: usize,
    pub template_count: usize,
    pub word_jitter: f64,
    pub template_jitter: f64,
    pub word_template_jitter: f64,
    /// Planted words per category of each kind.
    pub planted_per_category: usize,
    /// Strength of the rival-attribute component in logit-bad class words.
    pub logit_plant_scale: f64,
    /// Strength of the class component in class-leaking attribute words.
    pub leak_scale: f64,
    pub erm: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    WaterbirdsLike,
    SpucoLike,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "waterbirds-like" => Ok(Self::WaterbirdsLike),
            "spuco-like" => Ok(Self::SpucoLike),
            _ => Err(format!("unknown preset {s:?} (expected tiny, waterbirds-like or spuco-like)")),
        }
    }
}

impl SynthWorld {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let erm = TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        let base = Self {
            seed,
            d_clip: 16,
            d_feat: 8,
            num_classes: 2,
            num_attributes: 2,
            partitions: vec![vec![0, 1]],
            majority: vec![0, 1],
            class_partition: vec![0, 0],
            mean_norm: 3.0,
            gap_norm: 6.0,
            class_scale: 1.0,
            attr_scale: 3.0,
            content_noise: 0.6,
            isotropic_noise: 0.0,
            joint_noise: 0.05,
            map_noise: 0.05,
            feature_offset: 6.0,
            feature_scale: 1.0,
            relu_features: true,
            rho: 0.05,
            n_train: 1000,
            n_val: 200,
            n_test: 400,
            n_gap_pairs: 1000,
            words_per_category: 24,
            template_count: 80,
            word_jitter: 0.3,
            template_jitter: 0.1,
            word_template_jitter: 0.05,
            planted_per_category: 2,
            logit_plant_scale: 25.0,
            leak_scale: 4.0,
            erm,
        };
        match preset {
            Preset::Tiny => base,
            Preset::WaterbirdsLike => Self { d_clip: 32, d_feat: 16, n_train: 2000, n_val: 2000, n_test: 4000, ..base },
            Preset::SpucoLike => Self {
                d_clip: 32,
                d_feat: 16,
                num_classes: 4,
                num_attributes: 4,
                partitions: vec![vec![0, 1], vec![2, 3]],
                majority: vec![0, 1, 2, 3],
                class_partition: vec![0, 0, 1, 1],
                n_train: 4000,
                n_val: 2000,
                n_test: 4000,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(format!("synthetic world: {m}")));
        if self.num_classes < 2 || self.num_attributes < 1 {
            return bad("need at least two classes and one attribute");
        }
        if self.num_classes + self.num_attributes > self.d_feat {
            return bad("classes + attributes must fit in the feature dimension");
        }
        if self.d_feat + 2 > self.d_clip {
            return bad("joint dimension must exceed feature dimension by at least two");
        }
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return bad("rho must lie in (0, 0.5)");
        }
        if self.majority.len() != self.num_classes || self.class_partition.len() != self.num_classes {
            return bad("majority and class_partition need one entry per class");
        }
        for y in 0..self.num_classes {
            let part = self.partitions.get(self.class_partition[y]);
            match part {
                Some(p) if p.contains(&self.majority[y]) && p.len() >= 2 => {}
                _ => return bad("each class needs a partition of ≥ 2 attributes containing its majority attribute"),
            }
        }
        if let Err(e) = check_partitions(&self.partitions, self.num_attributes) {
            return bad(&e);
        }
        if self.words_per_category < 2 || self.template_count == 0 {
            return bad("need at least two words per category and one template");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("splits must be non-empty");
        }
        for v in [
            self.mean_norm,
            self.gap_norm,
            self.content_noise,
            self.isotropic_noise,
            self.joint_noise,
            self.map_noise,
            self.word_jitter,
            self.template_jitter,
            self.word_template_jitter,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("scales must be finite and non-negative");
            }
        }
        if self.gap_norm == 0.0 || self.mean_norm == 0.0 {
            return bad("mean and gap must be non-zero");
        }
        self.erm.validate()
    }

    pub fn groups(&self) -> Vec<(usize, usize)> {
        (0..self.num_classes)
            .flat_map(|y| self.partitions[self.class_partition[y]].iter().map(move |&a| (y, a)))
            .collect()
    }

    /// Groups in the train split that carry the majority share.
    pub fn is_majority(&self, group: (usize, usize)) -> bool {
        self.majority[group.0] == group.1
    }
}

fn check_partitions(partitions: &[Vec<usize>], num_attributes: usize) -> Result<(), String> {
    let mut seen = vec![false; num_attributes];
    for &a in partitions.iter().flatten() {
        match seen.get_mut(a) {
            Some(s) if !*s => *s = true,
            _ => return Err(format!("attribute {a} missing or repeated in partitions")),
        }
    }
    if seen.iter().any(|s| !s) {
        return Err("partitions do not cover every attribute".into());
    }
    Ok(())
}

pub fn class_name(y: usize) -> String {
    format!("class{y}")
}

pub fn attr_name(a: usize) -> String {
    format!("attr{a}")
}

/// Orthonormal directions of a world.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub mean: Array1<f64>,
    pub gap: Array1<f64>,
    /// unit class directions (rows)
    pub class_dirs: Array2<f64>,
    /// unit attribute directions (rows)
    pub attr_dirs: Array2<f64>,
    /// orthonormal basis of the content subspace (rows)
    pub content: Array2<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn gaussian_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

/// Gram–Schmidt on random vectors: a random orthonormal basis (rows).
fn random_basis(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((d, d));
    let mut i = 0;
    while i < d {
        let mut v = gaussian_vec(rng, d);
        for _ in 0..2 {
            for j in 0..i {
                let b = basis.row(j);
                let proj = v.dot(&b);
                v.scaled_add(-proj, &b);
            }
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-6 {
            continue;
        }
        basis.row_mut(i).assign(&(v / n));
        i += 1;
    }
    basis
}

impl Geometry {
    fn sample(w: &SynthWorld, rng: &mut ChaCha8Rng) -> Self {
        let b = random_basis(rng, w.d_clip);
        let (c, a) = (w.num_classes, w.num_attributes);
        Self {
            mean: b.row(0).to_owned() * w.mean_norm,
            gap: b.row(1).to_owned() * w.gap_norm,
            class_dirs: b.slice(s![2..2 + c, ..]).to_owned(),
            attr_dirs: b.slice(s![2 + c..2 + c + a, ..]).to_owned(),
            content: b.slice(s![2.., ..]).to_owned(),
        }
    }

    fn content_noise(&self, rng: &mut ChaCha8Rng, sigma: f64) -> Array1<f64> {
        let coeffs = gaussian_vec(rng, self.content.nrows()) * sigma;
        self.content.t().dot(&coeffs)
    }

    /// Text-side concept point of a group: mean + c_y·u_y + c_a·v_a.
    fn concept(&self, w: &SynthWorld, y: usize, a: usize) -> Array1<f64> {
        &self.mean + &(&self.class_dirs.row(y) * w.class_scale) + &(&self.attr_dirs.row(a) * w.attr_scale)
    }
}

/// Image/text pairs with classifier features for one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub clip_image: EmbeddingMatrix,
    pub clip_text: EmbeddingMatrix,
    pub features: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub groups: Vec<(usize, usize)>,
}

impl Split {
    pub fn labeled_features(&self) -> LabeledFeatures {
        LabeledFeatures::new(self.features.clone(), self.labels.clone(), self.groups.clone()).expect("consistent split")
    }

    fn manifest(&self, role: Role, prefix: &str, w: &SynthWorld) -> Manifest {
        Manifest {
            count: self.labels.len(),
            dim: match role {
                Role::ImageFeatures => self.features.dim(),
                _ => self.clip_image.dim(),
            },
            role,
            ids: (0..self.labels.len()).map(|i| format!("{prefix}-{i:05}")).collect(),
            labels: Some(self.labels.clone()),
            groups: Some(self.groups.clone()),
            num_classes: Some(w.num_classes),
            num_attributes: Some(w.num_attributes),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantedWords {
    /// embedded as a different category of the same kind
    pub semantic: Vec<String>,
    /// class words pushed toward another class's majority attribute
    pub logit: Vec<String>,
    /// case/whitespace variants of earlier words
    pub duplicate: Vec<String>,
    /// attribute words carrying a class component
    pub leaking: Vec<String>,
}

impl PlantedWords {
    /// Words the dedup, semantic and logit stages should remove.
    pub fn removable(&self) -> Vec<String> {
        let mut v: Vec<String> = self.semantic.iter().chain(&self.logit).chain(&self.duplicate).cloned().collect();
        v.sort();
        v
    }
}

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub world: SynthWorld,
    pub geometry: Geometry,
    pub w_true: Array2<f64>,
    pub b_true: Array1<f64>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Unlabeled image/text pairs for gap estimation.
    pub gap_pairs: (EmbeddingMatrix, EmbeddingMatrix),
    pub templates: PromptTemplateSet,
    pub bank_index: BankIndex,
    pub bank_matrix: EmbeddingMatrix,
    pub vocabulary: Vocabulary,
    pub planted: PlantedWords,
    pub spec: GroupSpec,
    pub head_init: LinearHead,
}

impl SynthBundle {
    pub fn bank(&self) -> TextEmbeddingBank {
        TextEmbeddingBank::new(self.bank_matrix.clone(), &self.bank_index).expect("generated bank is consistent")
    }
}

/// Random map projected onto `Wᵀgap = 0`, with the feature offset carried
/// by the mean direction.
fn true_map(w: &SynthWorld, geo: &Geometry, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // content coordinates → features through a random rotation so the
    // concept directions survive the map
    let rot = random_basis(rng, w.d_feat);
    let q = geo.content.slice(s![..w.d_feat, ..]);
    let mut map = q.t().dot(&rot) * w.feature_scale;
    let mean_unit = &geo.mean / w.mean_norm;
    for mut col in map.columns_mut() {
        col.scaled_add(w.feature_offset / w.mean_norm, &mean_unit);
    }
    // plus a small random part, then enforce the constraint by projection
    map += &(gaussian_mat(rng, w.d_clip, w.d_feat) * (0.05 / (w.d_clip as f64).sqrt()));
    remove_direction(&mut map, &geo.gap);
    map
}

/// `M ← M − ĝĝᵀM`.
pub fn remove_direction(m: &mut Array2<f64>, g: &Array1<f64>) {
    let gg = g.dot(g);
    let coef = g.dot(m) / gg;
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        row.scaled_add(-g[i], &coef);
    }
}

fn sample_pair(
    w: &SynthWorld,
    geo: &Geometry,
    map: &Array2<f64>,
    bias: &Array1<f64>,
    y: usize,
    a: usize,
    rng: &mut ChaCha8Rng,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let mut img = geo.concept(w, y, a) + &geo.gap + geo.content_noise(rng, w.content_noise);
    if w.isotropic_noise > 0.0 {
        img += &(gaussian_vec(rng, w.d_clip) * w.isotropic_noise);
    }
    let mut txt = &img - &geo.gap;
    if w.joint_noise > 0.0 {
        txt += &(gaussian_vec(rng, w.d_clip) * w.joint_noise);
    }
    let mut feat = map.t().dot(&img) + bias;
    if w.map_noise > 0.0 {
        feat += &(gaussian_vec(rng, w.d_feat) * w.map_noise);
    }
    if w.relu_features {
        feat.mapv_inplace(|v| v.max(0.0));
    }
    (img, txt, feat)
}

fn draw_group(w: &SynthWorld, balanced: bool, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let y = rng.random_range(0..w.num_classes);
    let part = &w.partitions[w.class_partition[y]];
    if balanced {
        return (y, part[rng.random_range(0..part.len())]);
    }
    if rng.random::<f64>() < 1.0 - w.rho {
        (y, w.majority[y])
    } else {
        let minority: Vec<usize> = part.iter().copied().filter(|&a| a != w.majority[y]).collect();
        (y, minority[rng.random_range(0..minority.len())])
    }
}

fn make_split(
    w: &SynthWorld,
    geo: &Geometry,
    map: &Array2<f64>,
    bias: &Array1<f64>,
    n: usize,
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Split {
    let groups_all = w.groups();
    let mut groups = Vec::with_capacity(n);
    if balanced {
        // equal counts per group, remainder spread over the first groups
        for i in 0..n {
            groups.push(groups_all[i % groups_all.len()]);
        }
        groups.shuffle(rng);
    } else {
        for _ in 0..n {
            groups.push(draw_group(w, false, rng));
        }
    }
    let mut img = Array2::zeros((n, w.d_clip));
    let mut txt = Array2::zeros((n, w.d_clip));
    let mut feat = Array2::zeros((n, w.d_feat));
    for (i, &(y, a)) in groups.iter().enumerate() {
        let (zi, zt, f) = sample_pair(w, geo, map, bias, y, a, rng);
        img.row_mut(i).assign(&zi);
        txt.row_mut(i).assign(&zt);
        feat.row_mut(i).assign(&f);
    }
    Split {
        clip_image: EmbeddingMatrix::new(img).expect("finite"),
        clip_text: EmbeddingMatrix::new(txt).expect("finite"),
        features: EmbeddingMatrix::new(feat).expect("finite"),
        labels: groups.iter().map(|g| g.0).collect(),
        groups,
    }
}

struct WordPlan {
    name: String,
    base: Array1<f64>,
}

fn build_vocabulary(
    w: &SynthWorld,
    geo: &Geometry,
    rng: &mut ChaCha8Rng,
) -> (Vocabulary, Vec<WordPlan>, PlantedWords) {
    let mut planted = PlantedWords::default();
    let mut plans: Vec<WordPlan> = Vec::new();
    let class_point = |y: usize| &geo.mean + &(&geo.class_dirs.row(y) * (3.0 * w.class_scale));
    let attr_point = |a: usize| &geo.mean + &(&geo.attr_dirs.row(a) * (2.0 * w.attr_scale));

    for y in 0..w.num_classes {
        plans.push(WordPlan { name: class_name(y), base: class_point(y) });
    }
    for a in 0..w.num_attributes {
        plans.push(WordPlan { name: attr_name(a), base: attr_point(a) });
    }

    let mut counter = 0usize;
    let mut fresh = |prefix: &str| {
        counter += 1;
        format!("{prefix}-{counter:03}")
    };

    let mut classes = Vec::new();
    for y in 0..w.num_classes {
        let mut words = Vec::new();
        for _ in 0..w.words_per_category {
            let name = fresh(&format!("c{y}"));
            plans.push(WordPlan { name: name.clone(), base: class_point(y) + geo.content_noise(rng, w.word_jitter) });
            words.push(name);
        }
        let other = (y + 1) % w.num_classes;
        for _ in 0..w.planted_per_category {
            let name = fresh(&format!("c{y}"));
            plans.push(WordPlan { name: name.clone(), base: class_point(other) + geo.content_noise(rng, w.word_jitter) });
            planted.semantic.push(name.clone());
            words.push(name);

            // pushed from this class's majority attribute towards the rival's
            let toward = &geo.attr_dirs.row(w.majority[other]) - &geo.attr_dirs.row(w.majority[y]);
            let name = fresh(&format!("c{y}"));
            let base = class_point(y)
                + &(&toward * (w.logit_plant_scale / std::f64::consts::SQRT_2))
                + geo.content_noise(rng, w.word_jitter);
            plans.push(WordPlan { name: name.clone(), base });
            planted.logit.push(name.clone());
            words.push(name);
        }
        words.shuffle(rng);
        for k in 0..w.planted_per_category {
            let dup = format!(" {} ", words[k].to_uppercase());
            planted.duplicate.push(dup.clone());
            words.push(dup);
        }
        classes.push(Category { name: class_name(y), words });
    }

    let mut attributes = Vec::new();
    for a in 0..w.num_attributes {
        let part = w.partitions.iter().find(|p| p.contains(&a)).expect("validated partitions");
        let sibling = part[(part.iter().position(|&x| x == a).unwrap() + 1) % part.len()];
        let classes_here: Vec<usize> =
            (0..w.num_classes).filter(|&y| w.partitions[w.class_partition[y]].contains(&a)).collect();
        let mut words = Vec::new();
        for _ in 0..w.words_per_category {
            let name = fresh(&format!("a{a}"));
            plans.push(WordPlan { name: name.clone(), base: attr_point(a) + geo.content_noise(rng, w.word_jitter) });
            words.push(name);
        }
        for k in 0..w.planted_per_category {
            let name = fresh(&format!("a{a}"));
            plans.push(WordPlan { name: name.clone(), base: attr_point(sibling) + geo.content_noise(rng, w.word_jitter) });
            planted.semantic.push(name.clone());
            words.push(name);

            if !classes_here.is_empty() {
                let y = classes_here[k % classes_here.len()];
                let name = fresh(&format!("a{a}"));
                let base = attr_point(a)
                    + &(&geo.class_dirs.row(y) * (w.leak_scale * w.class_scale))
                    + geo.content_noise(rng, w.word_jitter);
                plans.push(WordPlan { name: name.clone(), base });
                planted.leaking.push(name.clone());
                words.push(name);
            }
        }
        words.shuffle(rng);
        for k in 0..w.planted_per_category {
            let dup = words[k].to_uppercase();
            planted.duplicate.push(dup.clone());
            words.push(dup);
        }
        attributes.push(Category { name: attr_name(a), words });
    }
    let vocab = Vocabulary { classes, attributes, partitions: w.partitions.clone() };
    (vocab, plans, planted)
}

fn build_bank(
    w: &SynthWorld,
    geo: &Geometry,
    plans: &[WordPlan],
    rng: &mut ChaCha8Rng,
) -> (PromptTemplateSet, BankIndex, EmbeddingMatrix) {
    let templates = if w.template_count == 80 {
        PromptTemplateSet::openai_80()
    } else {
        PromptTemplateSet::new((0..w.template_count).map(|k| format!("template {k} of a {{c}}.")).collect())
            .expect("well-formed")
    };
    let template_shift: Vec<Array1<f64>> =
        (0..w.template_count).map(|_| geo.content_noise(rng, w.template_jitter)).collect();
    let names: Vec<String> = plans.iter().map(|p| p.name.clone()).collect();
    let index = BankIndex::word_major(&names, &templates);
    let mut m = Array2::zeros((index.entries.len(), w.d_clip));
    for (i, plan) in plans.iter().enumerate() {
        for (k, shift) in template_shift.iter().enumerate() {
            let mut z = &plan.base + shift;
            if w.word_template_jitter > 0.0 {
                z += &geo.content_noise(rng, w.word_template_jitter);
            }
            m.row_mut(i * w.template_count + k).assign(&z);
        }
    }
    (templates, index, EmbeddingMatrix::new(m).expect("finite"))
}

/// Draws a complete world: splits, gap pairs, text bank, vocabulary with
/// planted bad words, and a biased head from plain ERM on the train split.
pub fn generate(w: &SynthWorld) -> Result<SynthBundle> {
    w.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let geo = Geometry::sample(w, &mut rng);
    let w_true = true_map(w, &geo, &mut rng);
    let b_true = Array1::zeros(w.d_feat);

    let train = make_split(w, &geo, &w_true, &b_true, w.n_train, false, &mut rng);
    let val = make_split(w, &geo, &w_true, &b_true, w.n_val, true, &mut rng);
    let test = make_split(w, &geo, &w_true, &b_true, w.n_test, true, &mut rng);
    let gap_split = make_split(w, &geo, &w_true, &b_true, w.n_gap_pairs, true, &mut rng);
    let gap_pairs = (gap_split.clip_image, gap_split.clip_text);

    let (vocabulary, plans, planted) = build_vocabulary(w, &geo, &mut rng);
    let (templates, bank_index, bank_matrix) = build_bank(w, &geo, &plans, &mut rng);

    let groups = w.groups();
    let train_lf = train.labeled_features();
    let counts: Vec<usize> = groups.iter().map(|g| train.groups.iter().filter(|x| *x == g).count()).collect();
    let uniform = vec![1.0 / groups.len() as f64; groups.len()];
    let spec = GroupSpec::new(w.num_classes, w.num_attributes, groups, uniform)?;
    let spec = spec.with_count_weights(&counts)?;

    let (head_init, _) = train_head(&LinearHead::zeros(w.d_feat, w.num_classes), &FeatureSource::erm(&train_lf), None, &w.erm)?;

    Ok(SynthBundle {
        world: w.clone(),
        geometry: geo,
        w_true,
        b_true,
        train,
        val,
        test,
        gap_pairs,
        templates,
        bank_index,
        bank_matrix,
        vocabulary,
        planted,
        spec,
        head_init,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: PlantedWords,
    pub train_group_counts: Vec<usize>,
}

/// Writes a pipeline-ready directory:
///
/// ```text
/// world.json  vocab.json  groups.json  templates.json  ground_truth.json
/// bank.npy  bank_index.json
/// gap/{image,text}.npy  gap/{image,text}.manifest.json
/// {train,val,test}/{clip_image,clip_text,features}.npy (+ .manifest.json)
/// head_init/{W_head,b_head}.npy  head_init/meta.json
/// truth/{W_true,b_true,gap}.npy
/// ```
pub fn write_bundle(b: &SynthBundle, dir: &Path) -> Result<()> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(dir)?;
    write_json(&dir.join("world.json"), &b.world)?;
    b.vocabulary.save(&dir.join("vocab.json"))?;
    b.spec.save(&dir.join("groups.json"))?;
    let templates: Vec<&str> = b.templates.iter().collect();
    write_json(&dir.join("templates.json"), &templates)?;
    b.bank_index.save(&dir.join("bank_index.json"))?;
    store::save_matrix(&b.bank_matrix, dir.join("bank.npy"))?;

    let gap = dir.join("gap");
    mk(&gap)?;
    let n = b.gap_pairs.0.count();
    let ids: Vec<String> = (0..n).map(|i| format!("pair-{i:05}")).collect();
    for (name, m, role) in [("image", &b.gap_pairs.0, Role::ClipImage), ("text", &b.gap_pairs.1, Role::ClipText)] {
        store::save_matrix(m, gap.join(format!("{name}.npy")))?;
        let man = Manifest {
            count: n,
            dim: m.dim(),
            role,
            ids: ids.clone(),
            labels: None,
            groups: None,
            num_classes: None,
            num_attributes: None,
        };
        store::save_manifest(&man, gap.join(format!("{name}.manifest.json")))?;
    }

    for (name, split) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
        let d = dir.join(name);
        mk(&d)?;
        for (file, m, role) in [
            ("clip_image", &split.clip_image, Role::ClipImage),
            ("clip_text", &split.clip_text, Role::ClipText),
            ("features", &split.features, Role::ImageFeatures),
        ] {
            store::save_matrix(m, d.join(format!("{file}.npy")))?;
            store::save_manifest(&split.manifest(role, name, &b.world), d.join(format!("{file}.manifest.json")))?;
        }
    }

    let h = dir.join("head_init");
    mk(&h)?;
    let meta = HeadMeta {
        best_epoch: b.world.erm.epochs,
        best_val_wga: 0.0,
        config: serde_json::to_value(&b.world.erm).expect("serializable"),
    };
    b.head_init.save(&h, &meta)?;

    let t = dir.join("truth");
    mk(&t)?;
    store::save_array2(&b.w_true, t.join("W_true.npy"))?;
    store::save_vector(&b.b_true, t.join("b_true.npy"))?;
    store::save_vector(&b.geometry.gap, t.join("gap.npy"))?;
    let counts = b.train.labeled_features().group_counts(&b.spec);
    write_json(&dir.join("ground_truth.json"), &GroundTruth { planted: b.planted.clone(), train_group_counts: counts })
}

/// Equality-constrained ridge regression solved through its KKT system, one
/// output column at a time with a dense LU factorization:
///
/// ```text
/// [2(XᵀX + λI)  g] [w_j]   [2Xᵀy_j]
/// [gᵀ           0] [ν_j] = [0     ]
/// ```
///
/// Returns the weight, the bias (mean residual) and the multipliers.
pub fn kkt_oracle(x: &Array2<f64>, y: &Array2<f64>, g: &Array1<f64>, lambda: f64) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    let (n, d) = x.dim();
    if y.nrows() != n || g.len() != d {
        return Err(Error::Shape("kkt oracle: inconsistent shapes".into()));
    }
    let k = y.ncols();
    let xm = DMatrix::from_fn(n, d, |i, j| x[[i, j]]);
    let ym = DMatrix::from_fn(n, k, |i, j| y[[i, j]]);
    let gram = xm.transpose() * &xm;
    let xty = xm.transpose() * &ym;
    let mut kkt = DMatrix::<f64>::zeros(d + 1, d + 1);
    for i in 0..d {
        for j in 0..d {
            kkt[(i, j)] = 2.0 * gram[(i, j)];
        }
        kkt[(i, i)] += 2.0 * lambda;
        kkt[(i, d)] = g[i];
        kkt[(d, i)] = g[i];
    }
    let lu = kkt.lu();
    let mut w = Array2::zeros((d, k));
    let mut nu = Array1::zeros(k);
    for j in 0..k {
        let mut rhs = DVector::<f64>::zeros(d + 1);
        for i in 0..d {
            rhs[i] = 2.0 * xty[(i, j)];
        }
        let sol = lu.solve(&rhs).ok_or_else(|| Error::SingularMatrix("KKT system is singular".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix("KKT solve produced non-finite values".into()));
        }
        for i in 0..d {
            w[[i, j]] = sol[i];
        }
        nu[j] = sol[d];
    }
    let b = (y - &x.dot(&w)).mean_axis(Axis(0)).expect("non-empty");
    Ok((w, b, nu))
}

/// Last-layer retraining on group-balanced real features, the reference
/// ceiling for text-based retraining.
pub fn balanced_retrain_oracle(
    train: &LabeledFeatures,
    spec: &GroupSpec,
    val: &LabeledFeatures,
    head_init: &LinearHead,
    cfg: &TrainConfig,
) -> Result<LinearHead> {
    let source = FeatureSource::group_balanced(train, spec)?;
    let (head, _) = train_head(head_init, &source, Some(&Validation { data: val, spec }), cfg)?;
    Ok(head)
}

/// The planted map as a projector, for comparisons.
pub fn true_projector(b: &SynthBundle) -> Projector {
    Projector {
        weight: b.w_true.clone(),
        bias: b.b_true.clone(),
        lambda: 0.0,
        gap_used: Some(b.geometry.gap.clone()),
        ortho_residual: 0.0,
    }
}
