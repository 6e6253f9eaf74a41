//! Gazetteer-based entity recognition and linking.
//!
//! Surface forms are split on whitespace and stored in a token trie. Linking
//! scans a sentence left to right, takes the longest match starting at each
//! position and resumes after it.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KbSnapshot;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Exact,
    CaseFold,
}

impl Normalization {
    pub fn apply(self, token: &str) -> String {
        match self {
            Normalization::Exact => token.to_string(),
            Normalization::CaseFold => token.to_lowercase(),
        }
    }
}

/// A sentence-level token span resolved to an entity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkedSpan {
    #[serde(rename = "sent")]
    pub sentence_index: usize,
    #[serde(rename = "start")]
    pub token_start: usize,
    #[serde(rename = "end")]
    pub token_end: usize,
    #[serde(rename = "id")]
    pub entity_id: String,
    #[serde(rename = "surface")]
    pub matched_surface: String,
}

impl LinkedSpan {
    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_end <= self.token_start
    }
}

/// One line of a linked-corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSegment {
    pub segment_id: String,
    pub spans: Vec<LinkedSpan>,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: HashMap<String, usize>,
    // Set when a surface form ends here: (normalized surface, entity ids).
    terminal: Option<(String, BTreeSet<String>)>,
}

#[derive(Debug, Clone)]
pub struct Gazetteer {
    language: String,
    policy: Normalization,
    nodes: Vec<Node>,
}

impl Gazetteer {
    pub fn build(kb: &KbSnapshot, lang: &str, policy: Normalization) -> Result<Self> {
        let index = kb
            .index(lang)
            .ok_or_else(|| Error::LanguageNotIndexed(lang.to_string()))?;
        let mut gaz = Gazetteer {
            language: lang.to_string(),
            policy,
            nodes: vec![Node::default()],
        };
        for (form, ids) in index {
            gaz.insert(form, ids);
        }
        Ok(gaz)
    }

    fn insert(&mut self, form: &str, ids: &BTreeSet<String>) {
        let tokens: Vec<String> = form.split_whitespace().map(|t| self.policy.apply(t)).collect();
        if tokens.is_empty() {
            return;
        }
        let mut node = 0;
        for tok in &tokens {
            node = match self.nodes[node].children.get(tok) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(tok.clone(), next);
                    next
                }
            };
        }
        let entry = self.nodes[node]
            .terminal
            .get_or_insert_with(|| (tokens.join(" "), BTreeSet::new()));
        entry.1.extend(ids.iter().cloned());
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn policy(&self) -> Normalization {
        self.policy
    }

    /// Every accepted (normalized) surface form with its entity ids, sorted.
    pub fn forms(&self) -> Vec<(String, BTreeSet<String>)> {
        let mut out: Vec<_> = self.nodes.iter().filter_map(|n| n.terminal.clone()).collect();
        out.sort();
        out
    }

    /// Entity ids for an exact token sequence, if it is a complete form.
    pub fn ids_for<S: AsRef<str>>(&self, tokens: &[S]) -> Option<&BTreeSet<String>> {
        let mut node = 0;
        for tok in tokens {
            node = *self.nodes[node].children.get(&self.policy.apply(tok.as_ref()))?;
        }
        self.nodes[node].terminal.as_ref().map(|(_, ids)| ids)
    }

    /// Longest form starting at `start`: (end, surface, ids).
    fn longest_at<S: AsRef<str>>(&self, tokens: &[S], start: usize) -> Option<(usize, &str, &BTreeSet<String>)> {
        let mut node = 0;
        let mut best = None;
        for (i, tok) in tokens.iter().enumerate().skip(start) {
            let key = self.policy.apply(tok.as_ref());
            match self.nodes[node].children.get(&key) {
                Some(&next) => node = next,
                None => break,
            }
            if let Some((surface, ids)) = &self.nodes[node].terminal {
                best = Some((i + 1, surface.as_str(), ids));
            }
        }
        best
    }

    /// Links one sentence. Spans are non-overlapping and sorted by start;
    /// ambiguous forms resolve to the smallest entity id.
    pub fn link<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<LinkedSpan> {
        self.link_sentence(tokens, 0)
    }

    pub fn link_sentence<S: AsRef<str>>(&self, tokens: &[S], sentence_index: usize) -> Vec<LinkedSpan> {
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            match self.longest_at(tokens, pos) {
                Some((end, surface, ids)) => {
                    let entity_id = ids.iter().next().expect("terminal nodes carry ids").clone();
                    spans.push(LinkedSpan {
                        sentence_index,
                        token_start: pos,
                        token_end: end,
                        entity_id,
                        matched_surface: surface.to_string(),
                    });
                    pos = end;
                }
                None => pos += 1,
            }
        }
        spans
    }

    /// Links every sentence of a multi-sentence unit.
    pub fn link_sentences<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> Vec<LinkedSpan> {
        sentences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| self.link_sentence(s, i))
            .collect()
    }
}
