//! Text embeddings of every (word, prompt template) combination.

use std::collections::HashMap;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{read_json, write_json};
use crate::store::{self, EmbeddingMatrix};
use crate::templates::PromptTemplateSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub word: String,
    pub template: usize,
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

/// JSON index mapping `(word, template)` to a row of the bank matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankIndex {
    pub template_count: usize,
    pub entries: Vec<BankEntry>,
}

impl BankIndex {
    /// Word-major layout: row = word_position · K + template.
    pub fn word_major(words: &[String], templates: &PromptTemplateSet) -> Self {
        let k = templates.len();
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(words.len() * k);
        for w in words {
            let w = w.trim();
            if !seen.insert(w.to_string()) {
                continue;
            }
            let base = (seen.len() - 1) * k;
            for t in 0..k {
                entries.push(BankEntry {
                    word: w.to_string(),
                    template: t,
                    row: base + t,
                    prompt: templates.render(t, w),
                });
            }
        }
        Self { template_count: k, entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone)]
pub struct TextEmbeddingBank {
    matrix: EmbeddingMatrix,
    template_count: usize,
    words: HashMap<String, usize>,
    /// word id → row per template
    rows: Vec<Vec<Option<usize>>>,
}

impl TextEmbeddingBank {
    pub fn new(matrix: EmbeddingMatrix, index: &BankIndex) -> Result<Self> {
        let k = index.template_count;
        if k == 0 {
            return Err(Error::Schema("bank index declares zero templates".into()));
        }
        let mut words = HashMap::new();
        let mut rows: Vec<Vec<Option<usize>>> = Vec::new();
        for e in &index.entries {
            if e.template >= k {
                return Err(Error::Schema(format!(
                    "entry ({:?}, {}) exceeds template count {k}",
                    e.word, e.template
                )));
            }
            if e.row >= matrix.count() {
                return Err(Error::Pairing(format!(
                    "entry ({:?}, {}) points at row {} of a {}-row bank",
                    e.word,
                    e.template,
                    e.row,
                    matrix.count()
                )));
            }
            let id = *words.entry(e.word.trim().to_string()).or_insert_with(|| {
                rows.push(vec![None; k]);
                rows.len() - 1
            });
            if rows[id][e.template].replace(e.row).is_some() {
                return Err(Error::Schema(format!("duplicate entry ({:?}, {})", e.word, e.template)));
            }
        }
        Ok(Self { matrix, template_count: k, words, rows })
    }

    pub fn load(matrix_path: &Path, index_path: &Path) -> Result<Self> {
        Self::new(store::load_matrix(matrix_path)?, &BankIndex::load(index_path)?)
    }

    pub fn template_count(&self) -> usize {
        self.template_count
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.words
            .get(word.trim())
            .copied()
            .ok_or_else(|| Error::MissingEmbedding(word.trim().to_string()))
    }

    /// Matrix row holding `template` applied to the word with id `id`.
    pub fn row_index(&self, id: usize, template: usize) -> Result<usize> {
        self.rows.get(id).and_then(|r| r.get(template).copied().flatten()).ok_or_else(|| {
            let word = self.words.iter().find(|(_, &v)| v == id).map_or("?", |(w, _)| w.as_str());
            Error::MissingEmbedding(format!("{word} (template {template})"))
        })
    }

    /// Embedding of `template` applied to the word with id `id`.
    pub fn row(&self, id: usize, template: usize) -> Result<ArrayView1<'_, f64>> {
        Ok(self.matrix.row(self.row_index(id, template)?))
    }

    pub fn get(&self, word: &str, template: usize) -> Result<ArrayView1<'_, f64>> {
        self.row(self.word_id(word)?, template)
    }

    /// Errors unless every template of `word` is present.
    pub fn check_complete(&self, word: &str) -> Result<usize> {
        let id = self.word_id(word)?;
        for k in 0..self.template_count {
            self.row(id, k)?;
        }
        Ok(id)
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }
}
