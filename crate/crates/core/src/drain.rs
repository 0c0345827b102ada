//! Fixed-depth parse-tree template mining (Drain).
//!
//! The first tree level is keyed by token count, the next `tree_depth - 2`
//! levels by leading tokens; leaves hold template groups of equal length.
//! An event joins the most similar group in its leaf when the fraction of
//! positions matching a non-wildcard template token reaches the threshold,
//! otherwise it founds a new group. Joining turns every mismatching position
//! into [`WILDCARD`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrainConfig {
    pub tree_depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        Self {
            tree_depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_depth < 3 {
            return Err(Error::Config(format!("tree_depth must be ≥ 3, got {}", self.tree_depth)));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(Error::Config(format!(
                "similarity_threshold must lie in (0, 1), got {}",
                self.similarity_threshold
            )));
        }
        if self.max_children < 1 {
            return Err(Error::Config("max_children must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    #[serde(rename = "id")]
    pub template_id: usize,
    pub tokens: Vec<String>,
    #[serde(rename = "support")]
    pub support_count: usize,
}

impl LogTemplate {
    /// Non-wildcard tokens.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str).filter(|t| *t != WILDCARD)
    }
}

#[derive(Debug, Default, Clone)]
struct Node {
    children: HashMap<String, Node>,
    groups: Vec<usize>,
}

/// Parse tree plus the template table it indexes.
#[derive(Debug, Clone)]
pub struct ParseTree {
    cfg: DrainConfig,
    by_length: HashMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

impl ParseTree {
    pub fn new(cfg: DrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            by_length: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.cfg
    }

    /// Assigns `tokens` to a template, creating or generalizing one.
    ///
    /// # Panics
    /// If `tokens` is empty.
    pub fn mine_template<S: AsRef<str>>(&mut self, tokens: &[S]) -> usize {
        assert!(!tokens.is_empty(), "cannot mine an empty token list");
        let max_children = self.cfg.max_children;
        let token_levels = self.cfg.tree_depth - 2;
        let mut node = self.by_length.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(token_levels) {
            let tok = tok.as_ref();
            let key = if tok.chars().any(|c| c.is_ascii_digit()) {
                WILDCARD
            } else if node.children.contains_key(tok) || node.children.len() + 1 < max_children {
                tok
            } else {
                WILDCARD
            };
            node = node.children.entry(key.to_string()).or_default();
        }

        let mut best: Option<(usize, f64)> = None;
        for &gid in &node.groups {
            let sim = similarity(&self.templates[gid].tokens, tokens);
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((gid, sim));
            }
        }
        match best {
            Some((gid, sim)) if sim >= self.cfg.similarity_threshold => {
                let t = &mut self.templates[gid];
                for (slot, tok) in t.tokens.iter_mut().zip(tokens) {
                    if slot != tok.as_ref() {
                        *slot = WILDCARD.to_string();
                    }
                }
                t.support_count += 1;
                gid
            }
            _ => {
                let gid = self.templates.len();
                self.templates.push(LogTemplate {
                    template_id: gid,
                    tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
                    support_count: 1,
                });
                node.groups.push(gid);
                gid
            }
        }
    }

    pub fn get_template(&self, id: i64) -> Result<&LogTemplate> {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.templates.get(i))
            .ok_or(Error::UnknownTemplate(id))
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.templates).expect("templates serialize")
    }
}

/// Fraction of positions where the template holds the same non-wildcard token.
fn similarity<S: AsRef<str>>(template: &[String], tokens: &[S]) -> f64 {
    debug_assert_eq!(template.len(), tokens.len());
    let same = template
        .iter()
        .zip(tokens)
        .filter(|(t, e)| t.as_str() != WILDCARD && t.as_str() == e.as_ref())
        .count();
    same as f64 / tokens.len() as f64
}
