//! Multilingual knowledge-base snapshots.
//!
//! A snapshot maps entity ids to per-language surface forms and keeps, for
//! every loaded language, an inverted index from surface form to entity ids.
//! Matching at this layer is exact; normalization belongs to the linker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language code to ordered surface forms. The first form is canonical.
pub type Surfaces = BTreeMap<String, Vec<String>>;

/// Surface form to the ids of every entity carrying it.
pub type InvertedIndex = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub surfaces: Surfaces,
}

impl EntityRecord {
    pub fn new(id: impl Into<String>) -> Self {
        EntityRecord {
            id: id.into(),
            surfaces: Surfaces::new(),
        }
    }

    pub fn with(mut self, lang: &str, forms: &[&str]) -> Self {
        self.surfaces
            .entry(lang.to_string())
            .or_default()
            .extend(forms.iter().map(|s| s.to_string()));
        self
    }

    /// Drops empty languages and duplicate forms (first occurrence wins).
    fn normalize(&mut self) {
        for forms in self.surfaces.values_mut() {
            let mut seen = BTreeSet::new();
            forms.retain(|f| seen.insert(f.clone()));
        }
        self.surfaces.retain(|_, forms| !forms.is_empty());
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("entity id must be non-empty".into());
        }
        for (lang, forms) in &self.surfaces {
            if forms.iter().any(|f| f.is_empty()) {
                return Err(format!("entity `{}` has an empty `{lang}` surface form", self.id));
            }
        }
        Ok(())
    }
}

/// An immutable, indexed knowledge-base snapshot.
#[derive(Debug, Clone, Default)]
pub struct KbSnapshot {
    languages: BTreeSet<String>,
    records: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
    index: BTreeMap<String, InvertedIndex>,
}

impl KbSnapshot {
    /// Builds a snapshot restricted to `languages` from in-memory records.
    pub fn from_records<I, S>(records: I, languages: &[S]) -> Result<Self>
    where
        I: IntoIterator<Item = EntityRecord>,
        S: AsRef<str>,
    {
        let mut builder = Builder::new(languages)?;
        for (i, record) in records.into_iter().enumerate() {
            builder.push(record, i + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn from_reader<R: BufRead, S: AsRef<str>>(reader: R, languages: &[S]) -> Result<Self> {
        let mut builder = Builder::new(languages)?;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EntityRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            builder.push(record, i + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn languages(&self) -> &BTreeSet<String> {
        &self.languages
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// All surface forms of `id`; empty when the entity is unknown.
    pub fn surface(&self, id: &str) -> Surfaces {
        self.get(id).map(|r| r.surfaces.clone()).unwrap_or_default()
    }

    /// Canonical surface form of `id` in `lang`.
    pub fn lookup(&self, id: &str, lang: &str) -> Option<&str> {
        self.get(id)?
            .surfaces
            .get(lang)
            .and_then(|forms| forms.first())
            .map(String::as_str)
    }

    /// Inverted index for `lang`, or `None` if the language was not loaded.
    pub fn index(&self, lang: &str) -> Option<&InvertedIndex> {
        self.index.get(lang)
    }

    /// Recomputes the inverted indices from the records alone.
    pub fn rebuild_index(&self) -> BTreeMap<String, InvertedIndex> {
        build_index(&self.languages, &self.records)
    }

    /// Serializes the snapshot back to JSON lines, records in load order.
    pub fn to_jsonl(&self) -> Result<String> {
        crate::jsonl::to_jsonl_string(&self.records)
    }
}

pub fn load_kb<S: AsRef<str>>(path: &Path, languages: &[S]) -> Result<KbSnapshot> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    KbSnapshot::from_reader(BufReader::new(file), languages)
}

struct Builder {
    languages: BTreeSet<String>,
    seen: HashMap<String, usize>,
    records: Vec<EntityRecord>,
}

impl Builder {
    fn new<S: AsRef<str>>(languages: &[S]) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::NoLanguages);
        }
        Ok(Builder {
            languages: languages.iter().map(|s| s.as_ref().to_string()).collect(),
            seen: HashMap::new(),
            records: Vec::new(),
        })
    }

    fn push(&mut self, mut record: EntityRecord, line: usize) -> Result<()> {
        record.check().map_err(|message| Error::Malformed { line, message })?;
        if self.seen.insert(record.id.clone(), line).is_some() {
            return Err(Error::DuplicateId(record.id));
        }
        record.surfaces.retain(|lang, _| self.languages.contains(lang));
        record.normalize();
        if !record.surfaces.is_empty() {
            self.records.push(record);
        }
        Ok(())
    }

    fn finish(self) -> KbSnapshot {
        let index = build_index(&self.languages, &self.records);
        let by_id = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        KbSnapshot {
            languages: self.languages,
            records: self.records,
            by_id,
            index,
        }
    }
}

fn build_index(languages: &BTreeSet<String>, records: &[EntityRecord]) -> BTreeMap<String, InvertedIndex> {
    let mut index: BTreeMap<String, InvertedIndex> =
        languages.iter().map(|l| (l.clone(), InvertedIndex::new())).collect();
    for record in records {
        for (lang, forms) in &record.surfaces {
            if let Some(inv) = index.get_mut(lang) {
                for form in forms {
                    inv.entry(form.clone()).or_default().insert(record.id.clone());
                }
            }
        }
    }
    index
}

/// Converts `id<TAB>lang<TAB>form` rows into records, keeping first-seen order
/// of ids and forms.
pub fn records_from_tsv<R: BufRead>(reader: R) -> Result<Vec<EntityRecord>> {
    let mut order: Vec<EntityRecord> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, lang, form] = fields[..] else {
            return Err(Error::Malformed {
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        if id.is_empty() || lang.is_empty() || form.is_empty() {
            return Err(Error::Malformed {
                line: i + 1,
                message: "empty field".into(),
            });
        }
        let slot = *pos.entry(id.to_string()).or_insert_with(|| {
            order.push(EntityRecord::new(id));
            order.len() - 1
        });
        let forms = order[slot].surfaces.entry(lang.to_string()).or_default();
        if !forms.iter().any(|f| f == form) {
            forms.push(form.to_string());
        }
    }
    Ok(order)
}
