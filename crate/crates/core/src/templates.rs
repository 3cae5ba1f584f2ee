//! Prompt templates used to embed words. The bundled set is the standard
//! 80-template ImageNet zero-shot ensemble.

use std::path::Path;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{c}";
pub const TEMPLATES_ENV: &str = "TLDR_TEMPLATES";

const OPENAI_80: &str = include_str!("../templates/openai_80.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Schema("template set is empty".into()));
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Schema(format!("template {t:?} must contain {PLACEHOLDER} exactly once")));
            }
        }
        Ok(Self { templates })
    }

    pub fn openai_80() -> Self {
        let templates: Vec<String> = serde_json::from_str(OPENAI_80).expect("bundled template asset is valid JSON");
        Self::new(templates).expect("bundled templates are well-formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let templates: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(templates)
    }

    /// Explicit path, then `$TLDR_TEMPLATES`, then the bundled set.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(TEMPLATES_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::openai_80()),
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<&str> {
        self.templates.get(k).map(String::as_str)
    }

    pub fn render(&self, k: usize, word: &str) -> Option<String> {
        self.get(k).map(|t| t.replacen(PLACEHOLDER, word, 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(String::as_str)
    }
}
