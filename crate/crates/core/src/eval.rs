//! MT evaluation: corpus BLEU, entity translation accuracy and the
//! frequency/coverage analyses built on top of it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::{Gazetteer, LinkedSpan};
use crate::subword::Segment;

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to matches and totals for n-gram orders above 1.
    AddOne,
}

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_NGRAM],
    pub totals: [usize; MAX_NGRAM],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_sentence<S: AsRef<str>, T: AsRef<str>>(&mut self, hyp: &[S], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    /// BLEU on a 0-100 scale.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_NGRAM {
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (self.matches[n] + 1, self.totals[n] + 1),
                _ => (self.matches[n], self.totals[n]),
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / MAX_NGRAM as f64).exp()
    }
}

/// Corpus BLEU-4 on caller-provided tokenization.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<T>],
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add_sentence(h, r);
    }
    Ok(stats.score(smoothing))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "PFT")]
    Pft,
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "other")]
    Other,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Pft, Group::Pt, Group::Ft, Group::Other];

    pub fn label(self) -> &'static str {
        match self {
            Group::Pft => "PFT",
            Group::Pt => "PT",
            Group::Ft => "FT",
            Group::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub ref_occurrences: usize,
    pub matched: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCell {
    pub n_entities: usize,
    pub accuracy: f64,
}

/// Rows are pre-training frequency bins, columns finetuning frequency bins,
/// both in ascending order (row 0 / column 0 hold frequency 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMatrix<C> {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `None` marks buckets with no entities.
    pub cells: Vec<Vec<Option<C>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAccuracyReport {
    pub per_entity: BTreeMap<String, EntityScore>,
    pub macro_accuracy: f64,
    #[serde(default)]
    pub group: BTreeMap<String, Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<BinMatrix<BinCell>>,
}

impl EntityAccuracyReport {
    /// Builds a report from per-entity (reference occurrences, matches).
    pub fn from_counts(counts: BTreeMap<String, (usize, usize)>) -> Self {
        let per_entity: BTreeMap<String, EntityScore> = counts
            .into_iter()
            .filter(|(_, (r, _))| *r > 0)
            .map(|(id, (r, m))| {
                (
                    id,
                    EntityScore {
                        ref_occurrences: r,
                        matched: m,
                        accuracy: m as f64 / r as f64,
                    },
                )
            })
            .collect();
        let macro_accuracy = mean(per_entity.values().map(|s| s.accuracy));
        EntityAccuracyReport {
            per_entity,
            macro_accuracy,
            group: BTreeMap::new(),
            bins: None,
        }
    }

    /// Macro accuracy over the entities of one group.
    pub fn group_accuracy(&self, group: Group) -> Option<f64> {
        let accs: Vec<f64> = self
            .per_entity
            .iter()
            .filter(|(id, _)| self.group.get(*id) == Some(&group))
            .map(|(_, s)| s.accuracy)
            .collect();
        (!accs.is_empty()).then(|| mean(accs.into_iter()))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn id_counts(spans: &[LinkedSpan]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for s in spans {
        *m.entry(s.entity_id.as_str()).or_insert(0) += 1;
    }
    m
}

/// Links both sides of every sentence pair and scores each reference entity
/// occurrence; `k` reference mentions need `k` hypothesis mentions.
pub fn entity_accuracy<S: AsRef<str>, T: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<T>],
    gazetteer: &Gazetteer,
) -> Result<EntityAccuracyReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (h, r) in hypotheses.iter().zip(references) {
        let hyp_spans = gazetteer.link(h);
        let ref_spans = gazetteer.link(r);
        let hyp_ids = id_counts(&hyp_spans);
        for (id, k) in id_counts(&ref_spans) {
            let entry = counts.entry(id.to_string()).or_insert((0, 0));
            entry.0 += k;
            entry.1 += k.min(hyp_ids.get(id).copied().unwrap_or(0));
        }
    }
    Ok(EntityAccuracyReport::from_counts(counts))
}

/// Assigns each test entity to PFT, PT, FT or other (test only).
pub fn partition_entities(
    pretrain: &BTreeSet<String>,
    finetune: &BTreeSet<String>,
    test: &BTreeSet<String>,
) -> BTreeMap<String, Group> {
    test.iter()
        .map(|id| {
            let group = match (pretrain.contains(id), finetune.contains(id)) {
                (true, true) => Group::Pft,
                (true, false) => Group::Pt,
                (false, true) => Group::Ft,
                (false, false) => Group::Other,
            };
            (id.clone(), group)
        })
        .collect()
}

/// Lower edges of frequency bins; the last bin is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BinEdges(Vec<usize>);

impl Default for BinEdges {
    fn default() -> Self {
        BinEdges(vec![0, 1, 4, 16, 64])
    }
}

impl TryFrom<Vec<usize>> for BinEdges {
    type Error = Error;

    fn try_from(edges: Vec<usize>) -> Result<Self> {
        if edges.first() != Some(&0) {
            return Err(Error::BinEdges("edges must start at 0".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BinEdges("edges must be strictly increasing".into()));
        }
        Ok(BinEdges(edges))
    }
}

impl From<BinEdges> for Vec<usize> {
    fn from(e: BinEdges) -> Self {
        e.0
    }
}

impl BinEdges {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn edges(&self) -> &[usize] {
        &self.0
    }

    pub fn bin(&self, freq: usize) -> usize {
        self.0.partition_point(|&e| e <= freq) - 1
    }

    pub fn labels(&self) -> Vec<String> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &lo)| match self.0.get(i + 1) {
                Some(&next) if next == lo + 1 => lo.to_string(),
                Some(&next) => format!("{lo}-{}", next - 1),
                None => format!("{lo}+"),
            })
            .collect()
    }
}

fn bucket_entities<'a>(
    ids: impl Iterator<Item = &'a String>,
    pretrain_freqs: &BTreeMap<String, usize>,
    finetune_freqs: &BTreeMap<String, usize>,
    edges: &BinEdges,
) -> Vec<Vec<Vec<&'a String>>> {
    let mut buckets = vec![vec![Vec::new(); edges.len()]; edges.len()];
    for id in ids {
        let p = edges.bin(pretrain_freqs.get(id).copied().unwrap_or(0));
        let f = edges.bin(finetune_freqs.get(id).copied().unwrap_or(0));
        buckets[p][f].push(id);
    }
    buckets
}

/// Macro accuracy of one report per (pre-training bin, finetuning bin).
pub fn accuracy_bins(
    report: &EntityAccuracyReport,
    pretrain_freqs: &BTreeMap<String, usize>,
    finetune_freqs: &BTreeMap<String, usize>,
    edges: &BinEdges,
) -> BinMatrix<BinCell> {
    let buckets = bucket_entities(report.per_entity.keys(), pretrain_freqs, finetune_freqs, edges);
    let cells = buckets
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|ids| {
                    (!ids.is_empty()).then(|| BinCell {
                        n_entities: ids.len(),
                        accuracy: mean(ids.iter().map(|id| report.per_entity[*id].accuracy)),
                    })
                })
                .collect()
        })
        .collect();
    BinMatrix {
        row_labels: edges.labels(),
        col_labels: edges.labels(),
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCell {
    pub n_entities: usize,
    pub entities: Vec<String>,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_b - accuracy_a`.
    pub delta: f64,
}

pub type GainMatrix = BinMatrix<GainCell>;

/// Per-bucket macro accuracy gain of `report_b` over `report_a`.
pub fn frequency_gain_matrix(
    report_a: &EntityAccuracyReport,
    report_b: &EntityAccuracyReport,
    pretrain_freqs: &BTreeMap<String, usize>,
    finetune_freqs: &BTreeMap<String, usize>,
    edges: &BinEdges,
) -> Result<GainMatrix> {
    if report_a.per_entity.len() != report_b.per_entity.len() {
        return Err(Error::ReportMismatch(format!(
            "{} vs {} test entities",
            report_a.per_entity.len(),
            report_b.per_entity.len()
        )));
    }
    for (id, a) in &report_a.per_entity {
        match report_b.per_entity.get(id) {
            Some(b) if b.ref_occurrences == a.ref_occurrences => {}
            Some(_) => return Err(Error::ReportMismatch(format!("reference counts differ for `{id}`"))),
            None => return Err(Error::ReportMismatch(format!("`{id}` missing from second report"))),
        }
    }
    let buckets = bucket_entities(report_a.per_entity.keys(), pretrain_freqs, finetune_freqs, edges);
    let cells = buckets
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|ids| {
                    (!ids.is_empty()).then(|| {
                        let a = mean(ids.iter().map(|id| report_a.per_entity[*id].accuracy));
                        let b = mean(ids.iter().map(|id| report_b.per_entity[*id].accuracy));
                        GainCell {
                            n_entities: ids.len(),
                            entities: ids.iter().map(|s| s.to_string()).collect(),
                            accuracy_a: a,
                            accuracy_b: b,
                            delta: b - a,
                        }
                    })
                })
                .collect()
        })
        .collect();
    Ok(BinMatrix {
        row_labels: edges.labels(),
        col_labels: edges.labels(),
        cells,
    })
}

impl<C> BinMatrix<C> {
    /// CSV with pre-training bins as rows; empty buckets are left blank.
    pub fn to_csv(&self, value: impl Fn(&C) -> f64) -> String {
        let mut out = String::from("pretrain\\finetune");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.cells) {
            out.push_str(label);
            for cell in row {
                out.push(',');
                if let Some(c) = cell {
                    let _ = write!(out, "{:.6}", value(c));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = &C> {
        self.cells.iter().filter_map(move |row| row.get(col).and_then(Option::as_ref))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub types: usize,
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub pretrain: EntityCounts,
    pub finetune: EntityCounts,
    pub test: EntityCounts,
    /// Share of finetuning entity types also seen in pre-training.
    pub pf_type_pct: f64,
    pub pf_count_pct: f64,
    pub pt_type_pct: f64,
    pub pt_count_pct: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn covered<S: AsRef<str>>(base: &BTreeSet<&str>, corpus: &[S]) -> (f64, f64, EntityCounts) {
    let types: BTreeSet<&str> = corpus.iter().map(AsRef::as_ref).collect();
    let type_hits = types.iter().filter(|t| base.contains(*t)).count();
    let count_hits = corpus.iter().filter(|t| base.contains(t.as_ref())).count();
    (
        pct(type_hits, types.len()),
        pct(count_hits, corpus.len()),
        EntityCounts {
            types: types.len(),
            occurrences: corpus.len(),
        },
    )
}

/// Coverage of finetuning and test entity mentions by the pre-training data.
/// Each argument lists one entity id per mention. Empty corpora report 0%.
pub fn coverage_stats<P: AsRef<str>, F: AsRef<str>, T: AsRef<str>>(
    pretrain: &[P],
    finetune: &[F],
    test: &[T],
) -> CoverageStats {
    let base: BTreeSet<&str> = pretrain.iter().map(AsRef::as_ref).collect();
    let (pf_type_pct, pf_count_pct, finetune_counts) = covered(&base, finetune);
    let (pt_type_pct, pt_count_pct, test_counts) = covered(&base, test);
    CoverageStats {
        pretrain: EntityCounts {
            types: base.len(),
            occurrences: pretrain.len(),
        },
        finetune: finetune_counts,
        test: test_counts,
        pf_type_pct,
        pf_count_pct,
        pt_type_pct,
        pt_count_pct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub segments: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub subwords: usize,
    pub entity_types: usize,
    pub entity_occurrences: usize,
    /// Mean per segment of the subword count covered by entity spans.
    pub avg_entity_subwords: f64,
}

/// Corpus totals for packed, linked segments; `links[i]` belongs to `segments[i]`.
pub fn corpus_stats(segments: &[Segment], links: &[Vec<LinkedSpan>]) -> Result<CorpusStats> {
    if segments.len() != links.len() {
        return Err(Error::InvalidParam(format!(
            "{} link rows for {} segments",
            links.len(),
            segments.len()
        )));
    }
    let mut types = BTreeSet::new();
    let mut occurrences = 0;
    let mut entity_subwords = 0usize;
    for (seg, spans) in segments.iter().zip(links) {
        for s in spans {
            types.insert(s.entity_id.as_str());
            occurrences += 1;
            let counts = seg
                .word_subwords
                .get(s.sentence_index)
                .ok_or(Error::SpanOutOfBounds {
                    sentence: s.sentence_index,
                    start: s.token_start,
                    end: s.token_end,
                })?;
            entity_subwords += counts
                .get(s.token_start..s.token_end)
                .ok_or(Error::SpanOutOfBounds {
                    sentence: s.sentence_index,
                    start: s.token_start,
                    end: s.token_end,
                })?
                .iter()
                .sum::<usize>();
        }
    }
    Ok(CorpusStats {
        segments: segments.len(),
        sentences: segments.iter().map(|s| s.sentences.len()).sum(),
        tokens: segments.iter().map(Segment::word_count).sum(),
        subwords: segments.iter().map(|s| s.total_subwords).sum(),
        entity_types: types.len(),
        entity_occurrences: occurrences,
        avg_entity_subwords: if segments.is_empty() {
            0.0
        } else {
            entity_subwords as f64 / segments.len() as f64
        },
    })
}
