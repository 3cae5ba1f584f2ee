//! Group-keyed training set of averaged (class word, attribute word) text
//! embeddings, fetched lazily with a random prompt template per pair.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::TextEmbeddingBank;
use crate::error::{Error, Result};
use crate::projector::{read_json, write_json};
use crate::vocab::FilteredVocabulary;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub groups: Vec<(usize, usize)>,
    /// Per-group weights for mean accuracy, same order as `groups`.
    pub weights: Vec<f64>,
}

impl GroupSpec {
    /// Every (class, attribute) combination with uniform weights.
    pub fn full(num_classes: usize, num_attributes: usize) -> Self {
        let groups: Vec<_> = (0..num_classes).flat_map(|y| (0..num_attributes).map(move |a| (y, a))).collect();
        let w = 1.0 / groups.len().max(1) as f64;
        Self { num_classes, num_attributes, weights: vec![w; groups.len()], groups }
    }

    pub fn new(num_classes: usize, num_attributes: usize, groups: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        let spec = Self { num_classes, num_attributes, groups, weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Schema("group spec lists no groups".into()));
        }
        let mut seen = HashSet::new();
        for &(y, a) in &self.groups {
            if y >= self.num_classes || a >= self.num_attributes {
                return Err(Error::Schema(format!(
                    "group ({y}, {a}) outside {} classes × {} attributes",
                    self.num_classes, self.num_attributes
                )));
            }
            if !seen.insert((y, a)) {
                return Err(Error::Schema(format!("group ({y}, {a}) listed twice")));
            }
        }
        if self.weights.len() != self.groups.len() {
            return Err(Error::Schema(format!("{} weights for {} groups", self.weights.len(), self.groups.len())));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Schema("group weights must be finite and non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Schema(format!("group weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn position(&self, group: (usize, usize)) -> Option<usize> {
        self.groups.iter().position(|&g| g == group)
    }

    /// Same groups with weights proportional to `counts` (uniform if all zero).
    pub fn with_count_weights(&self, counts: &[usize]) -> Result<Self> {
        if counts.len() != self.groups.len() {
            return Err(Error::Schema(format!("{} counts for {} groups", counts.len(), self.groups.len())));
        }
        let total: usize = counts.iter().sum();
        let weights = if total == 0 {
            vec![1.0 / counts.len() as f64; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Ok(Self { weights, ..self.clone() })
    }

    pub fn uniform(&self) -> Self {
        Self { weights: vec![1.0 / self.groups.len() as f64; self.groups.len()], ..self.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPairs {
    pub group: (usize, usize),
    /// bank word ids
    pub class_words: Vec<usize>,
    pub attr_words: Vec<usize>,
}

impl GroupPairs {
    pub fn len(&self) -> usize {
        self.class_words.len() * self.attr_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair index `p` ↔ (class word `p / |attr|`, attribute word `p % |attr|`).
    pub fn pair(&self, p: usize) -> Option<(usize, usize)> {
        (p < self.len()).then(|| {
            let n = self.attr_words.len();
            (self.class_words[p / n], self.attr_words[p % n])
        })
    }
}

/// One epoch item: (index into the spec's groups, pair index within group).
pub type Item = (usize, usize);

#[derive(Debug, Clone)]
pub struct TextPairDataset<'b> {
    bank: &'b TextEmbeddingBank,
    groups: Vec<GroupPairs>,
}

pub fn build_dataset<'b>(
    fv: &FilteredVocabulary,
    spec: &GroupSpec,
    bank: &'b TextEmbeddingBank,
) -> Result<TextPairDataset<'b>> {
    spec.validate()?;
    if spec.num_classes != fv.classes.len() || spec.num_attributes != fv.attributes.len() {
        return Err(Error::Schema(format!(
            "group spec has {}×{} categories, vocabulary has {}×{}",
            spec.num_classes,
            spec.num_attributes,
            fv.classes.len(),
            fv.attributes.len()
        )));
    }
    let ids = |words: &[String]| -> Result<Vec<usize>> { words.iter().map(|w| bank.check_complete(w)).collect() };
    let class_ids: Vec<Vec<usize>> = fv.classes.iter().map(|c| ids(&c.words)).collect::<Result<_>>()?;
    let attr_ids: Vec<Vec<usize>> = fv.attributes.iter().map(|c| ids(&c.words)).collect::<Result<_>>()?;
    let mut groups = Vec::with_capacity(spec.groups.len());
    for &(y, a) in &spec.groups {
        if class_ids[y].is_empty() {
            return Err(Error::EmptyCategory(fv.classes[y].name.clone()));
        }
        if attr_ids[a].is_empty() {
            return Err(Error::EmptyCategory(fv.attributes[a].name.clone()));
        }
        groups.push(GroupPairs { group: (y, a), class_words: class_ids[y].clone(), attr_words: attr_ids[a].clone() });
    }
    Ok(TextPairDataset { bank, groups })
}

impl<'b> TextPairDataset<'b> {
    pub fn groups(&self) -> &[GroupPairs] {
        &self.groups
    }

    pub fn bank(&self) -> &'b TextEmbeddingBank {
        self.bank
    }

    pub fn template_count(&self) -> usize {
        self.bank.template_count()
    }

    /// Class label of the group at position `g`.
    pub fn label(&self, g: usize) -> usize {
        self.groups[g].group.0
    }

    fn locate(&self, g: usize, p: usize) -> Result<(usize, usize)> {
        self.groups
            .get(g)
            .and_then(|gp| gp.pair(p))
            .ok_or_else(|| Error::Shape(format!("pair ({g}, {p}) out of range")))
    }

    /// Averaged embedding of a pair under a given template.
    pub fn embed(&self, g: usize, p: usize, template: usize) -> Result<Array1<f64>> {
        let (cw, aw) = self.locate(g, p)?;
        let zc = self.bank.row(cw, template)?;
        let za = self.bank.row(aw, template)?;
        Ok((&zc + &za) * 0.5)
    }

    /// Draws one template uniformly and returns the averaged embedding of
    /// the pair under it. Both words share the template.
    pub fn fetch<R: Rng + ?Sized>(&self, g: usize, p: usize, rng: &mut R) -> Result<Array1<f64>> {
        self.locate(g, p)?;
        let k = rng.random_range(0..self.template_count());
        self.embed(g, p, k)
    }

    /// Draws `n_min` pairs per group without replacement, where `n_min` is
    /// the smallest group size, and shuffles them together.
    pub fn sample_epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Item> {
        let n_min = self.groups.iter().map(GroupPairs::len).min().unwrap_or(0);
        let mut items = Vec::with_capacity(n_min * self.groups.len());
        for (g, gp) in self.groups.iter().enumerate() {
            items.extend(index::sample(rng, gp.len(), n_min).into_iter().map(|p| (g, p)));
        }
        items.shuffle(rng);
        items
    }
}
