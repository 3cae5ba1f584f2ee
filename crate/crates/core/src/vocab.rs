//! Generated vocabularies and the filters that clean them: deduplication,
//! semantic (nearest-anchor) filtering, logit filtering through the frozen
//! head, and an optional paired t-test with Benjamini–Hochberg control.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::TextEmbeddingBank;
use crate::error::{Error, Result};
use crate::head::{relu_inplace, softmax, strict_argmax, LinearHead};
use crate::projector::{read_json, write_json, Projector};
use crate::stats::{bh_correct, paired_t_test, PairedTTest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<Category>,
    pub attributes: Vec<Category>,
    /// Disjoint attribute-index sets; empty means one partition holding all.
    #[serde(default)]
    pub partitions: Vec<Vec<usize>>,
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for c in self.classes.iter().chain(&self.attributes) {
            let name = c.name.trim();
            if name.is_empty() {
                return Err(Error::Schema("category with empty name".into()));
            }
            if !names.insert(name) {
                return Err(Error::Schema(format!("category name {name:?} used twice")));
            }
        }
        if self.classes.is_empty() || self.attributes.is_empty() {
            return Err(Error::Schema("vocabulary needs at least one class and one attribute".into()));
        }
        if !self.partitions.is_empty() {
            let mut seen = vec![false; self.attributes.len()];
            for part in &self.partitions {
                for &a in part {
                    match seen.get_mut(a) {
                        None => return Err(Error::Schema(format!("partition names attribute {a}, which does not exist"))),
                        Some(true) => return Err(Error::Schema(format!("attribute {a} appears in two partitions"))),
                        Some(s) => *s = true,
                    }
                }
            }
            if let Some(a) = seen.iter().position(|s| !s) {
                return Err(Error::Schema(format!("attribute {a} is in no partition")));
            }
        }
        Ok(())
    }

    pub fn effective_partitions(&self) -> Vec<Vec<usize>> {
        if self.partitions.is_empty() {
            vec![(0..self.attributes.len()).collect()]
        } else {
            self.partitions.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Self = read_json(path)?;
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    Kept,
    Duplicate,
    Semantic,
    Logit,
    TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub word: String,
    pub category: String,
    pub kept: bool,
    pub reason: Reason,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredVocabulary {
    pub classes: Vec<Category>,
    pub attributes: Vec<Category>,
    pub partitions: Vec<Vec<usize>>,
    pub audit: Vec<AuditRecord>,
}

impl FilteredVocabulary {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Dropped words, optionally restricted to one reason.
    pub fn dropped(&self, reason: Option<Reason>) -> Vec<&str> {
        self.audit
            .iter()
            .filter(|r| !r.kept && reason.is_none_or(|x| r.reason == x))
            .map(|r| r.word.as_str())
            .collect()
    }
}

/// Per-word filter outcome. `score` is the decision margin (or p-value for
/// the t-test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub kept: bool,
    pub score: f64,
}

fn dedup_key(w: &str) -> String {
    w.trim().to_lowercase()
}

/// Indices of first occurrences under case-insensitive, trimmed comparison.
pub fn dedup_indices(words: &[String]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..words.len()).filter(|&i| seen.insert(dedup_key(&words[i]))).collect()
}

pub fn dedup_words(words: &[String]) -> Vec<String> {
    dedup_indices(words).into_iter().map(|i| words[i].clone()).collect()
}

pub fn dedup(v: &Vocabulary) -> Vocabulary {
    let clean = |cs: &[Category]| {
        cs.iter().map(|c| Category { name: c.name.clone(), words: dedup_words(&c.words) }).collect()
    };
    Vocabulary { classes: clean(&v.classes), attributes: clean(&v.attributes), partitions: v.partitions.clone() }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Keeps a word iff its embedding is strictly closer (cosine) to
/// `anchors[own]` than to every other anchor. Score is the cosine margin over
/// the runner-up.
pub fn semantic_filter(
    words: &[String],
    anchors: &[Array1<f64>],
    own: usize,
    bank: &TextEmbeddingBank,
    template: usize,
) -> Result<Vec<Verdict>> {
    if own >= anchors.len() {
        return Err(Error::Shape(format!("own index {own} outside {} anchors", anchors.len())));
    }
    if let Some(a) = anchors.iter().find(|a| a.len() != bank.dim()) {
        return Err(Error::Shape(format!("anchor dim {} vs bank dim {}", a.len(), bank.dim())));
    }
    words
        .par_iter()
        .map(|w| {
            let z = bank.get(w, template)?.to_owned();
            let cos: Vec<f64> = anchors.iter().map(|a| cosine(&z, a)).collect();
            let rival = cos
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != own)
                .map(|(_, &c)| c)
                .fold(f64::NEG_INFINITY, f64::max);
            if rival == f64::NEG_INFINITY {
                return Ok(Verdict { kept: true, score: cos[own] });
            }
            Ok(Verdict { kept: cos[own] > rival, score: cos[own] - rival })
        })
        .collect()
}

/// Head input for a joint-space vector: `Π(z)`, then ReLU if requested.
pub fn head_input(p: &Projector, z: &Array1<f64>, relu: bool) -> Array1<f64> {
    let mut f = p.apply(z);
    if relu {
        relu_inplace(&mut f);
    }
    f
}

fn check_dims(bank: &TextEmbeddingBank, p: &Projector, head: &LinearHead) -> Result<()> {
    if bank.dim() != p.d_clip() {
        return Err(Error::Shape(format!("bank dim {} vs projector input dim {}", bank.dim(), p.d_clip())));
    }
    head.check_input(p.d_feat())
}

/// Keeps a class-`y` word iff the head's unique argmax on its projected
/// embedding is `y`. Score is the logit margin of `y` over the best rival.
pub fn logit_filter(
    words: &[String],
    bank: &TextEmbeddingBank,
    p: &Projector,
    head: &LinearHead,
    y: usize,
    relu: bool,
    template: usize,
) -> Result<Vec<Verdict>> {
    check_dims(bank, p, head)?;
    if y >= head.num_classes() {
        return Err(Error::Shape(format!("class {y} outside head with {} classes", head.num_classes())));
    }
    words
        .par_iter()
        .map(|w| {
            let z = bank.get(w, template)?.to_owned();
            let logits = head.logits(&head_input(p, &z, relu));
            let rival = logits
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let kept = strict_argmax(&logits) == Some(y);
            let score = if rival == f64::NEG_INFINITY { 0.0 } else { logits[y] - rival };
            Ok(Verdict { kept, score })
        })
        .collect()
}

/// Paired t-tests of P(y) on class words alone versus class words averaged
/// with each attribute word. One result per attribute word.
#[allow(clippy::too_many_arguments)]
pub fn ttest_pvalues(
    class_words: &[String],
    attr_words: &[String],
    bank: &TextEmbeddingBank,
    p: &Projector,
    head: &LinearHead,
    y: usize,
    relu: bool,
    template: usize,
) -> Result<Vec<PairedTTest>> {
    check_dims(bank, p, head)?;
    if class_words.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: class_words.len() });
    }
    if y >= head.num_classes() {
        return Err(Error::Shape(format!("class {y} outside head with {} classes", head.num_classes())));
    }
    let class_emb: Vec<Array1<f64>> =
        class_words.iter().map(|w| Ok(bank.get(w, template)?.to_owned())).collect::<Result<_>>()?;
    let prob = |z: &Array1<f64>| softmax(&head.logits(&head_input(p, z, relu)))[y];
    let x: Vec<f64> = class_emb.iter().map(prob).collect();
    attr_words
        .par_iter()
        .map(|w| {
            let za = bank.get(w, template)?.to_owned();
            let z: Vec<f64> = class_emb.iter().map(|zc| prob(&((zc + &za) * 0.5))).collect();
            paired_t_test(&x, &z)
        })
        .collect()
}

/// Removes attribute words whose effect on P(y) is significant after BH
/// correction across `attr_words`. Score is the raw p-value.
#[allow(clippy::too_many_arguments)]
pub fn ttest_filter(
    class_words: &[String],
    attr_words: &[String],
    bank: &TextEmbeddingBank,
    p: &Projector,
    head: &LinearHead,
    y: usize,
    fdr_q: f64,
    relu: bool,
    template: usize,
) -> Result<Vec<Verdict>> {
    let tests = ttest_pvalues(class_words, attr_words, bank, p, head, y, relu, template)?;
    let pv: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let reject = bh_correct(&pv, fdr_q)?;
    Ok(pv.iter().zip(reject).map(|(&p, r)| Verdict { kept: !r, score: p }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Apply ReLU to projected embeddings before the head.
    pub relu: bool,
    pub ttest: bool,
    pub fdr_q: f64,
    /// Template used for single-prompt embeddings of words and anchors.
    pub template: usize,
    /// Valid (class, attribute) groups; `None` pairs every class with every
    /// attribute. Only used to choose which classes test each attribute.
    pub groups: Option<Vec<(usize, usize)>>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { relu: false, ttest: false, fdr_q: 0.05, template: 0, groups: None }
    }
}

struct Tracker {
    name: String,
    words: Vec<String>,
    /// indices into `words` still alive
    alive: Vec<usize>,
    fate: Vec<Option<(Reason, f64)>>,
    last_score: Vec<f64>,
}

impl Tracker {
    fn new(c: &Category) -> Self {
        let n = c.words.len();
        let mut fate = vec![None; n];
        let alive = dedup_indices(&c.words);
        let keep: HashSet<usize> = alive.iter().copied().collect();
        for (i, f) in fate.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *f = Some((Reason::Duplicate, 0.0));
            }
        }
        Self { name: c.name.clone(), words: c.words.clone(), alive, fate, last_score: vec![0.0; n] }
    }

    fn alive_words(&self) -> Vec<String> {
        self.alive.iter().map(|&i| self.words[i].clone()).collect()
    }

    fn apply(&mut self, verdicts: &[Verdict], reason: Reason) {
        let mut next = Vec::with_capacity(self.alive.len());
        for (&i, v) in self.alive.iter().zip(verdicts) {
            self.last_score[i] = v.score;
            if v.kept {
                next.push(i);
            } else {
                self.fate[i] = Some((reason, v.score));
            }
        }
        self.alive = next;
    }

    fn finish(&self, audit: &mut Vec<AuditRecord>) -> Result<Category> {
        if self.alive.is_empty() {
            return Err(Error::EmptyCategory(self.name.clone()));
        }
        for (i, w) in self.words.iter().enumerate() {
            let (kept, reason, score) = match self.fate[i] {
                Some((r, s)) => (false, r, s),
                None => (true, Reason::Kept, self.last_score[i]),
            };
            audit.push(AuditRecord { word: w.clone(), category: self.name.clone(), kept, reason, score });
        }
        Ok(Category { name: self.name.clone(), words: self.alive_words() })
    }
}

/// Dedup, semantic filter (classes against every class, attributes within
/// their partition), logit filter on classes, then the optional t-test on
/// attributes. Every input word gets exactly one audit record.
pub fn run_filter_pipeline(
    v: &Vocabulary,
    bank: &TextEmbeddingBank,
    p: &Projector,
    head: &LinearHead,
    opts: &FilterOptions,
) -> Result<FilteredVocabulary> {
    run_filter_pipeline_with(v, bank, p, head, None, opts)
}

/// As [`run_filter_pipeline`], optionally scoring the t-test with a
/// different head than the logit filter.
pub fn run_filter_pipeline_with(
    v: &Vocabulary,
    bank: &TextEmbeddingBank,
    p: &Projector,
    head: &LinearHead,
    ttest_head: Option<&LinearHead>,
    opts: &FilterOptions,
) -> Result<FilteredVocabulary> {
    v.validate()?;
    let ttest_head = ttest_head.unwrap_or(head);
    check_dims(bank, p, ttest_head)?;
    check_dims(bank, p, head)?;
    if head.num_classes() != v.classes.len() {
        return Err(Error::Shape(format!(
            "head has {} classes, vocabulary has {}",
            head.num_classes(),
            v.classes.len()
        )));
    }
    let t = opts.template;
    let anchor = |name: &str| -> Result<Array1<f64>> { Ok(bank.get(name, t)?.to_owned()) };

    let mut classes: Vec<Tracker> = v.classes.iter().map(Tracker::new).collect();
    let mut attrs: Vec<Tracker> = v.attributes.iter().map(Tracker::new).collect();

    let class_anchors: Vec<Array1<f64>> = v.classes.iter().map(|c| anchor(&c.name)).collect::<Result<_>>()?;
    for (y, tr) in classes.iter_mut().enumerate() {
        let verdicts = semantic_filter(&tr.alive_words(), &class_anchors, y, bank, t)?;
        tr.apply(&verdicts, Reason::Semantic);
    }
    for part in v.effective_partitions() {
        let anchors: Vec<Array1<f64>> =
            part.iter().map(|&a| anchor(&v.attributes[a].name)).collect::<Result<_>>()?;
        for (own, &a) in part.iter().enumerate() {
            let tr = &mut attrs[a];
            let verdicts = semantic_filter(&tr.alive_words(), &anchors, own, bank, t)?;
            tr.apply(&verdicts, Reason::Semantic);
        }
    }
    for (y, tr) in classes.iter_mut().enumerate() {
        let verdicts = logit_filter(&tr.alive_words(), bank, p, head, y, opts.relu, t)?;
        tr.apply(&verdicts, Reason::Logit);
    }
    if let Some(tr) = classes.iter().chain(&attrs).find(|tr| tr.alive.is_empty()) {
        return Err(Error::EmptyCategory(tr.name.clone()));
    }

    if opts.ttest {
        for (a, tr) in attrs.iter_mut().enumerate() {
            let ys: Vec<usize> = match &opts.groups {
                Some(g) => (0..v.classes.len()).filter(|&y| g.contains(&(y, a))).collect(),
                None => (0..v.classes.len()).collect(),
            };
            let words = tr.alive_words();
            // one BH family per attribute over every (word, class) hypothesis
            let mut pv = Vec::with_capacity(words.len() * ys.len());
            for &y in &ys {
                let tests = ttest_pvalues(&classes[y].alive_words(), &words, bank, p, ttest_head, y, opts.relu, t)?;
                pv.extend(tests.iter().map(|r| r.p_value));
            }
            let reject = bh_correct(&pv, opts.fdr_q)?;
            let verdicts: Vec<Verdict> = (0..words.len())
                .map(|j| {
                    let idx = (0..ys.len()).map(|k| k * words.len() + j);
                    let min_p = idx.clone().map(|i| pv[i]).fold(1.0, f64::min);
                    Verdict { kept: !idx.into_iter().any(|i| reject[i]), score: min_p }
                })
                .collect();
            tr.apply(&verdicts, Reason::TTest);
        }
    }

    let mut audit = Vec::new();
    let classes = classes.iter().map(|tr| tr.finish(&mut audit)).collect::<Result<Vec<_>>>()?;
    let attributes = attrs.iter().map(|tr| tr.finish(&mut audit)).collect::<Result<Vec<_>>>()?;
    Ok(FilteredVocabulary { classes, attributes, partitions: v.effective_partitions(), audit })
}
