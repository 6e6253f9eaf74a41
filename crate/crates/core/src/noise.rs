//! Denoising noise functions.
//!
//! `g_dae` masks Poisson-length spans until a fraction of the segment is
//! covered, then permutes sentences. `f_deep` first swaps linked entity spans
//! for their source-language surface forms, tops up with span masking on
//! non-entity words when the swap alone covers too little, and permutes.
//!
//! All positions recorded in [`NoiseMeta`] are offsets into the flattened
//! target (`tgt`) or source (`src`) token lists.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KbSnapshot;
use crate::linker::LinkedSpan;
use crate::seed;
use crate::subword::{Segment, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Mt,
    Dae,
    Deep,
}

impl Task {
    pub fn token(self) -> &'static str {
        match self {
            Task::Mt => crate::subword::TASK_MT,
            Task::Dae => crate::subword::TASK_DAE,
            Task::Deep => crate::subword::TASK_DEEP,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Mt => "MT",
            Task::Dae => "DAE",
            Task::Deep => "DEEP",
        })
    }
}

/// Unit in which noise budgets are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetUnit {
    #[default]
    Words,
    Subwords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Poisson mean of the span length (lengths below 1 are raised to 1).
    pub lambda: f64,
    pub mask_ratio: f64,
    pub permute_prob: f64,
    pub seed: u64,
    pub budget_unit: BudgetUnit,
    /// Sampling attempts allowed per budget unit before giving up.
    pub attempt_factor: usize,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            lambda: 3.5,
            mask_ratio: 0.35,
            permute_prob: 1.0,
            seed: 0,
            budget_unit: BudgetUnit::Words,
            attempt_factor: 100,
        }
    }
}

impl NoiseParams {
    pub fn with_seed(seed: u64) -> Self {
        NoiseParams {
            seed,
            ..Default::default()
        }
    }

    /// Field-level constraint violations, empty when the parameters are usable.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            out.push(("mask_ratio", "mask_ratio must be in (0,1]".to_string()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            out.push(("lambda", "lambda must be a positive finite number".to_string()));
        }
        if !(0.0..=1.0).contains(&self.permute_prob) {
            out.push(("permute_prob", "permute_prob must be in [0,1]".to_string()));
        }
        if self.attempt_factor == 0 {
            out.push(("attempt_factor", "attempt_factor must be at least 1".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some((_, msg)) => Err(Error::InvalidParam(msg)),
            None => Ok(()),
        }
    }
}

/// Smallest budget whose share of `total` is at least `ratio`.
pub fn budget_for(ratio: f64, total: usize) -> usize {
    let raw = ratio * total as f64;
    // Absorb float noise such as 0.35 * 20 = 7.000000000000001.
    let rounded = raw.round();
    let b = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (b.max(0.0) as usize).min(total)
}

/// Flattened word positions of a segment.
#[derive(Debug, Clone)]
struct Grid {
    /// Start offset of each sentence in the flat word list.
    starts: Vec<usize>,
    total: usize,
}

impl Grid {
    fn new(sentences: &[Vec<String>]) -> Self {
        let mut starts = Vec::with_capacity(sentences.len());
        let mut total = 0;
        for s in sentences {
            starts.push(total);
            total += s.len();
        }
        Grid { starts, total }
    }

    fn sentence_of(&self, pos: usize) -> usize {
        self.starts.partition_point(|&s| s <= pos) - 1
    }

    fn sentence_end(&self, sentence: usize, sentences: &[Vec<String>]) -> usize {
        self.starts[sentence] + sentences[sentence].len()
    }
}

fn unit_weights(segment: &Segment, unit: BudgetUnit) -> Vec<usize> {
    match unit {
        BudgetUnit::Words => vec![1; segment.word_count()],
        BudgetUnit::Subwords => {
            let flat: Vec<usize> = segment.word_subwords.iter().flatten().copied().collect();
            if flat.len() == segment.word_count() {
                flat
            } else {
                vec![1; segment.word_count()]
            }
        }
    }
}

/// Result of span masking over a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOutcome {
    /// Sentences with each masked span collapsed to one MASK token.
    pub sentences: Vec<Vec<String>>,
    /// Masked spans as half-open flat word ranges, sorted.
    pub spans: Vec<(usize, usize)>,
    /// Masked budget units (words or subwords).
    pub masked_units: usize,
    /// True when the attempt limit ran out before the budget was met.
    pub exhausted: bool,
}

impl MaskOutcome {
    pub fn masked_positions(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|&(s, e)| s..e).collect()
    }

    pub fn max_span(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s).max().unwrap_or(0)
    }
}

/// Chosen spans, masked units, and whether the attempt limit ran out.
type MaskPlan = (Vec<(usize, usize)>, usize, bool);

fn plan_masks<R: Rng + ?Sized>(
    sentences: &[Vec<String>],
    weights: &[usize],
    budget: usize,
    protected: &BTreeSet<usize>,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<MaskPlan> {
    let grid = Grid::new(sentences);
    if budget == 0 {
        return Ok((Vec::new(), 0, false));
    }
    let maskable: usize = (0..grid.total).filter(|p| !protected.contains(p)).map(|p| weights[p]).sum();
    if maskable == 0 {
        return Ok((Vec::new(), 0, true));
    }
    let poisson = Poisson::new(params.lambda).map_err(|e| Error::InvalidParam(format!("lambda: {e}")))?;
    let mut taken = vec![false; grid.total];
    for &p in protected {
        if p < grid.total {
            taken[p] = true;
        }
    }
    let limit = params.attempt_factor.saturating_mul(budget);
    let mut spans = Vec::new();
    let mut masked = 0;
    let mut attempts = 0;
    while masked < budget && attempts < limit {
        attempts += 1;
        let len = (poisson.sample(rng) as usize).max(1);
        let start = rng.random_range(0..grid.total);
        // Spans never cross a sentence boundary.
        let end = (start + len).min(grid.sentence_end(grid.sentence_of(start), sentences));
        if taken[start..end].iter().any(|&t| t) {
            continue;
        }
        taken[start..end].iter_mut().for_each(|t| *t = true);
        masked += weights[start..end].iter().sum::<usize>();
        spans.push((start, end));
    }
    spans.sort_unstable();
    Ok((spans, masked, masked < budget))
}

/// Masks Poisson-length spans until `budget` units are covered, never
/// touching `protected` flat positions.
pub fn mask_spans<R: Rng + ?Sized>(
    segment: &Segment,
    budget: usize,
    protected: &BTreeSet<usize>,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<MaskOutcome> {
    let weights = unit_weights(segment, params.budget_unit);
    let (spans, masked_units, exhausted) =
        plan_masks(&segment.sentences, &weights, budget, protected, params, rng)?;
    let rendered = render(&segment.sentences, &spans, &[]);
    Ok(MaskOutcome {
        sentences: rendered.sentences,
        spans,
        masked_units,
        exhausted,
    })
}

/// Permutes sentence order with probability `prob`. Returns the new sentences
/// and, for each output slot, the index of the original sentence.
pub fn permute_sentences<T: Clone, R: Rng + ?Sized>(
    sentences: &[T],
    prob: f64,
    rng: &mut R,
) -> (Vec<T>, Vec<usize>) {
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    if sentences.len() > 1 && prob > 0.0 && rng.random_bool(prob.min(1.0)) {
        order.shuffle(rng);
    }
    (order.iter().map(|&i| sentences[i].clone()).collect(), order)
}

/// An entity span swapped for its source-language surface form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Swap {
    pub entity_id: String,
    pub sentence: usize,
    /// Sentence-local target token range that was replaced.
    pub start: usize,
    pub end: usize,
    pub source_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replacement {
    /// Code-switched sentences.
    pub sentences: Vec<Vec<String>>,
    pub swaps: Vec<Swap>,
    /// Spans whose entity has no surface form in the source language.
    pub skipped: Vec<LinkedSpan>,
}

fn check_spans(sentences: &[Vec<String>], spans: &[LinkedSpan]) -> Result<()> {
    let mut sorted: Vec<&LinkedSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.sentence_index, s.token_start));
    for s in &sorted {
        let oob = Error::SpanOutOfBounds {
            sentence: s.sentence_index,
            start: s.token_start,
            end: s.token_end,
        };
        match sentences.get(s.sentence_index) {
            Some(sent) if s.token_start < s.token_end && s.token_end <= sent.len() => {}
            _ => return Err(oob),
        }
    }
    for w in sorted.windows(2) {
        if w[0].sentence_index == w[1].sentence_index && w[1].token_start < w[0].token_end {
            return Err(Error::InvalidParam(format!(
                "overlapping spans in sentence {}: {}..{} and {}..{}",
                w[0].sentence_index, w[0].token_start, w[0].token_end, w[1].token_start, w[1].token_end
            )));
        }
    }
    Ok(())
}

/// Swaps every span whose entity has a `src_lang` surface form.
pub fn replace_entities(
    segment: &Segment,
    spans: &[LinkedSpan],
    kb: &KbSnapshot,
    src_lang: &str,
) -> Result<Replacement> {
    check_spans(&segment.sentences, spans)?;
    let mut swaps = Vec::new();
    let mut skipped = Vec::new();
    for span in spans {
        match kb.lookup(&span.entity_id, src_lang) {
            Some(form) => swaps.push(Swap {
                entity_id: span.entity_id.clone(),
                sentence: span.sentence_index,
                start: span.token_start,
                end: span.token_end,
                source_tokens: form.split_whitespace().map(str::to_string).collect(),
            }),
            None => skipped.push(span.clone()),
        }
    }
    swaps.sort_by_key(|s| (s.sentence, s.start));
    let rendered = render(&segment.sentences, &[], &swaps);
    Ok(Replacement {
        sentences: rendered.sentences,
        swaps,
        skipped,
    })
}

struct Rendered {
    sentences: Vec<Vec<String>>,
    /// For each swap: (sentence, local offset of its source tokens).
    swap_offsets: Vec<(usize, usize)>,
}

/// Applies masks (flat ranges) and swaps (sentence-local, sorted) together.
/// The two must not overlap.
fn render(sentences: &[Vec<String>], masks: &[(usize, usize)], swaps: &[Swap]) -> Rendered {
    let grid = Grid::new(sentences);
    let mut out = Vec::with_capacity(sentences.len());
    let mut swap_offsets = Vec::with_capacity(swaps.len());
    let mut next_mask = masks.iter().peekable();
    let mut next_swap = swaps.iter().peekable();
    for (si, sent) in sentences.iter().enumerate() {
        let base = grid.starts[si];
        let mut rendered = Vec::with_capacity(sent.len());
        let mut i = 0;
        while i < sent.len() {
            if let Some(sw) = next_swap.next_if(|sw| sw.sentence == si && sw.start == i) {
                swap_offsets.push((si, rendered.len()));
                rendered.extend(sw.source_tokens.iter().cloned());
                i = sw.end;
            } else if let Some(&(_, end)) = next_mask.next_if(|&&(s, _)| s == base + i) {
                rendered.push(MASK.to_string());
                i = end - base;
            } else {
                rendered.push(sent[i].clone());
                i += 1;
            }
        }
        out.push(rendered);
    }
    Rendered {
        sentences: out,
        swap_offsets,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacedMeta {
    pub id: String,
    pub tgt_start: usize,
    pub tgt_end: usize,
    pub src_start: usize,
    pub src_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseMeta {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub segment_id: String,
    /// Masked target word positions.
    pub masked: Vec<usize>,
    /// Masked spans as half-open target ranges.
    #[serde(default)]
    pub spans: Vec<(usize, usize)>,
    /// Present only for DEEP examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<Vec<ReplacedMeta>>,
    pub skipped_spans: usize,
    /// Original sentence index for each output sentence.
    #[serde(default)]
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exhausted: bool,
}

/// One training pair: noised source, original target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisedExample {
    pub task: Task,
    #[serde(rename = "src")]
    pub source_tokens: Vec<String>,
    #[serde(rename = "tgt")]
    pub target_tokens: Vec<String>,
    pub meta: NoiseMeta,
}

impl NoisedExample {
    pub fn masked_words(&self) -> usize {
        self.meta.masked.len()
    }

    pub fn replaced_words(&self) -> usize {
        self.meta
            .replaced
            .iter()
            .flatten()
            .map(|r| r.tgt_end - r.tgt_start)
            .sum()
    }

    pub fn max_span(&self) -> usize {
        self.meta.spans.iter().map(|(s, e)| e - s).max().unwrap_or(0)
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble<R: Rng + ?Sized>(
    task: Task,
    segment: &Segment,
    masks: Vec<(usize, usize)>,
    swaps: Option<&[Swap]>,
    skipped: usize,
    exhausted: bool,
    params: &NoiseParams,
    rng: &mut R,
) -> NoisedExample {
    let grid = Grid::new(&segment.sentences);
    let rendered = render(&segment.sentences, &masks, swaps.unwrap_or(&[]));
    let (permuted, order) = permute_sentences(&rendered.sentences, params.permute_prob, rng);

    let mut out_start = vec![0; order.len()];
    let mut acc = 0;
    for (slot, &orig) in order.iter().enumerate() {
        out_start[orig] = acc;
        acc += permuted[slot].len();
    }

    let replaced = swaps.map(|swaps| {
        swaps
            .iter()
            .zip(&rendered.swap_offsets)
            .map(|(sw, &(si, local))| {
                let src_start = out_start[si] + local;
                ReplacedMeta {
                    id: sw.entity_id.clone(),
                    tgt_start: grid.starts[sw.sentence] + sw.start,
                    tgt_end: grid.starts[sw.sentence] + sw.end,
                    src_start,
                    src_end: src_start + sw.source_tokens.len(),
                }
            })
            .collect()
    });

    NoisedExample {
        task,
        source_tokens: permuted.into_iter().flatten().collect(),
        target_tokens: segment.tokens(),
        meta: NoiseMeta {
            segment_id: segment.segment_id.clone(),
            masked: masks.iter().flat_map(|&(s, e)| s..e).collect(),
            spans: masks,
            replaced,
            skipped_spans: skipped,
            order,
            exhausted,
        },
    }
}

/// DAE noise: mask `mask_ratio` of the segment, then permute sentences.
pub fn g_dae<R: Rng + ?Sized>(segment: &Segment, params: &NoiseParams, rng: &mut R) -> Result<NoisedExample> {
    params.validate()?;
    let weights = unit_weights(segment, params.budget_unit);
    let budget = budget_for(params.mask_ratio, weights.iter().sum());
    let (masks, _, exhausted) = plan_masks(&segment.sentences, &weights, budget, &BTreeSet::new(), params, rng)?;
    Ok(assemble(Task::Dae, segment, masks, None, 0, exhausted, params, rng))
}

/// DEEP noise: entity swap, top-up masking of non-entity words, permutation.
pub fn f_deep<R: Rng + ?Sized>(
    segment: &Segment,
    spans: &[LinkedSpan],
    kb: &KbSnapshot,
    src_lang: &str,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<NoisedExample> {
    params.validate()?;
    let replacement = replace_entities(segment, spans, kb, src_lang)?;
    let grid = Grid::new(&segment.sentences);
    let weights = unit_weights(segment, params.budget_unit);

    let replaced_units: usize = replacement
        .swaps
        .iter()
        .flat_map(|sw| (grid.starts[sw.sentence] + sw.start)..(grid.starts[sw.sentence] + sw.end))
        .map(|p| weights[p])
        .sum();
    let target = budget_for(params.mask_ratio, weights.iter().sum());
    let protected: BTreeSet<usize> = spans
        .iter()
        .flat_map(|s| (grid.starts[s.sentence_index] + s.token_start)..(grid.starts[s.sentence_index] + s.token_end))
        .collect();
    let (masks, _, exhausted) = if replaced_units < target {
        plan_masks(
            &segment.sentences,
            &weights,
            target - replaced_units,
            &protected,
            params,
            rng,
        )?
    } else {
        (Vec::new(), 0, false)
    };
    Ok(assemble(
        Task::Deep,
        segment,
        masks,
        Some(&replacement.swaps),
        replacement.skipped.len(),
        exhausted,
        params,
        rng,
    ))
}

/// Which noise function to apply to monolingual segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dae,
    Deep,
}

impl Objective {
    pub fn task(self) -> Task {
        match self {
            Objective::Dae => Task::Dae,
            Objective::Deep => Task::Deep,
        }
    }
}

/// Noises one segment with an RNG derived from `(params.seed, label)`, so the
/// result does not depend on the order in which segments are processed.
pub fn noise_segment(
    objective: Objective,
    segment: &Segment,
    spans: &[LinkedSpan],
    kb: &KbSnapshot,
    src_lang: &str,
    params: &NoiseParams,
    label: &str,
) -> Result<NoisedExample> {
    let mut rng = seed::rng_for(params.seed, label);
    match objective {
        Objective::Dae => g_dae(segment, params, &mut rng),
        Objective::Deep => f_deep(segment, spans, kb, src_lang, params, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::EntityRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(words_per_sentence: &[usize]) -> Segment {
        let mut k = 0;
        let sentences = words_per_sentence
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        k += 1;
                        format!("w{k}")
                    })
                    .collect()
            })
            .collect();
        Segment::from_tokens("s0", sentences)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(budget_for(0.35, 20), 7);
        assert_eq!(budget_for(0.35, 100), 35);
        assert_eq!(budget_for(0.35, 21), 8);
        assert_eq!(budget_for(1e-9, 10), 1);
        assert_eq!(budget_for(0.35, 0), 0);
    }

    #[test]
    fn budget_zero_is_identity() {
        let s = seg(&[10, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = mask_spans(&s, 0, &BTreeSet::new(), &NoiseParams::default(), &mut rng).unwrap();
        assert_eq!(out.sentences, s.sentences);
        assert!(out.spans.is_empty());
        assert!(!out.exhausted);
    }

    #[test]
    fn all_protected_warns() {
        let s = seg(&[5]);
        let protected: BTreeSet<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = mask_spans(&s, 2, &protected, &NoiseParams::default(), &mut rng).unwrap();
        assert_eq!(out.sentences, s.sentences);
        assert!(out.exhausted);
    }

    #[test]
    fn twenty_words_budget_seven_over_many_seeds() {
        let s = seg(&[20]);
        let params = NoiseParams::default();
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mask_spans(&s, 7, &BTreeSet::new(), &params, &mut rng).unwrap();
            assert!(!out.exhausted, "seed {seed}");
            let masked = out.masked_positions().len();
            assert!(masked >= 7 && masked <= 7 + out.max_span() - 1, "seed {seed}: {masked}");
            assert!(masked as f64 / 20.0 >= 0.35);
            // One MASK per span.
            let masks = out.sentences[0].iter().filter(|t| *t == MASK).count();
            assert_eq!(masks, out.spans.len());
            assert_eq!(out.sentences[0].len(), 20 - masked + masks);
        }
    }

    #[test]
    fn spans_stay_inside_sentences() {
        let s = seg(&[3, 4, 2, 6]);
        let grid = Grid::new(&s.sentences);
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mask_spans(&s, 5, &BTreeSet::new(), &NoiseParams::default(), &mut rng).unwrap();
            for &(a, b) in &out.spans {
                assert_eq!(grid.sentence_of(a), grid.sentence_of(b - 1));
            }
        }
    }

    #[test]
    fn permutation_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = vec!["a"];
        assert_eq!(permute_sentences(&one, 1.0, &mut rng).0, one);
        let four = vec!["a", "b", "c", "d"];
        for _ in 0..20 {
            assert_eq!(permute_sentences(&four, 0.0, &mut rng).0, four);
        }
        let (p, order) = permute_sentences(&four, 1.0, &mut rng);
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, four);
        assert_eq!(order.iter().map(|&i| four[i]).collect::<Vec<_>>(), p);
    }

    fn krasnodar() -> (Segment, Vec<LinkedSpan>, KbSnapshot) {
        let kb = KbSnapshot::from_records(
            vec![
                EntityRecord::new("Q3646").with("en", &["Krasnodar"]).with("ru", &["Краснодаре"]),
                EntityRecord::new("Q5332").with("en", &["Saratov"]).with("ru", &["Саратове"]),
                EntityRecord::new("Q5627").with("en", &["Ulyanovsk"]).with("ru", &["Ульяновске"]),
            ],
            &["en", "ru"],
        )
        .unwrap();
        let segment = Segment::from_tokens(
            "krasnodar",
            vec![
                toks("Самые высокие цены на бензин зафиксированы в Краснодаре , Саратове и Ульяновске ."),
                toks("Об этом сообщает агентство ."),
            ],
        );
        let gaz = crate::linker::Gazetteer::build(&kb, "ru", crate::linker::Normalization::Exact).unwrap();
        let spans = gaz.link_sentences(&segment.sentences);
        assert_eq!(spans.len(), 3);
        (segment, spans, kb)
    }

    #[test]
    fn replace_krasnodar() {
        let (segment, spans, kb) = krasnodar();
        let r = replace_entities(&segment, &spans, &kb, "en").unwrap();
        assert_eq!(
            r.sentences[0],
            toks("Самые высокие цены на бензин зафиксированы в Krasnodar , Saratov и Ulyanovsk .")
        );
        assert_eq!(r.sentences[1], segment.sentences[1]);
        assert!(r.skipped.is_empty());

        let none = replace_entities(&segment, &[], &kb, "en").unwrap();
        assert_eq!(none.sentences, segment.sentences);
    }

    #[test]
    fn replace_skips_entities_without_source_form() {
        let kb = KbSnapshot::from_records(
            vec![
                EntityRecord::new("Q1").with("ru", &["Москва"]),
                EntityRecord::new("Q2").with("en", &["Kyiv"]).with("ru", &["Киев"]),
            ],
            &["en", "ru"],
        )
        .unwrap();
        let segment = Segment::from_tokens("x", vec![toks("Москва и Киев")]);
        let gaz = crate::linker::Gazetteer::build(&kb, "ru", crate::linker::Normalization::Exact).unwrap();
        let spans = gaz.link(&segment.sentences[0]);
        let r = replace_entities(&segment, &spans, &kb, "en").unwrap();
        assert_eq!(r.sentences[0], toks("Москва и Kyiv"));
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].entity_id, "Q1");
    }

    #[test]
    fn replace_multi_token_changes_length() {
        let kb = KbSnapshot::from_records(
            vec![EntityRecord::new("Q1").with("en", &["New York City"]).with("xx", &["Нью-Йорк"])],
            &["en", "xx"],
        )
        .unwrap();
        let segment = Segment::from_tokens("x", vec![toks("в Нью-Йорк и Нью-Йорк")]);
        let gaz = crate::linker::Gazetteer::build(&kb, "xx", crate::linker::Normalization::Exact).unwrap();
        let spans = gaz.link(&segment.sentences[0]);
        let r = replace_entities(&segment, &spans, &kb, "en").unwrap();
        assert_eq!(r.sentences[0], toks("в New York City и New York City"));
    }

    #[test]
    fn replace_rejects_bad_spans() {
        let (segment, mut spans, kb) = krasnodar();
        spans[0].token_end = 99;
        assert!(matches!(
            replace_entities(&segment, &spans, &kb, "en"),
            Err(Error::SpanOutOfBounds { .. })
        ));
        let (segment, mut spans, kb) = krasnodar();
        spans[0].sentence_index = 7;
        assert!(replace_entities(&segment, &spans, &kb, "en").is_err());
    }

    #[test]
    fn f_deep_krasnodar() {
        let (segment, spans, kb) = krasnodar();
        let params = NoiseParams::with_seed(11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ex = f_deep(&segment, &spans, &kb, "en", &params, &mut rng).unwrap();
        assert_eq!(ex.task, Task::Deep);
        assert_eq!(ex.target_tokens, segment.tokens());
        for w in ["Krasnodar", "Saratov", "Ulyanovsk"] {
            assert!(ex.source_tokens.iter().any(|t| t == w), "{w} missing");
        }
        for w in ["Краснодаре", "Саратове", "Ульяновске"] {
            assert!(!ex.source_tokens.iter().any(|t| t == w));
        }
        assert!(ex.source_tokens.iter().any(|t| t == MASK));
        let replaced = ex.meta.replaced.as_ref().unwrap();
        assert_eq!(replaced.len(), 3);
        for r in replaced {
            assert!(!ex.meta.masked.iter().any(|&p| (r.tgt_start..r.tgt_end).contains(&p)));
            let src = &ex.source_tokens[r.src_start..r.src_end];
            assert_eq!(kb.lookup(&r.id, "en").unwrap(), src.join(" "));
        }
        let total = ex.target_tokens.len();
        assert!(ex.masked_words() + ex.replaced_words() >= budget_for(0.35, total));
    }

    #[test]
    fn f_deep_dense_entities_skip_masking() {
        let kb = KbSnapshot::from_records(
            (0..4)
                .map(|i| EntityRecord::new(format!("Q{i}")).with("en", &[&format!("E{i}")]).with("xx", &[&format!("Э{i}")]))
                .collect::<Vec<_>>(),
            &["en", "xx"],
        )
        .unwrap();
        // 4 entity words out of 10 = 40%.
        let segment = Segment::from_tokens("d", vec![toks("Э0 а Э1 б в Э2 г Э3 д е")]);
        let gaz = crate::linker::Gazetteer::build(&kb, "xx", crate::linker::Normalization::Exact).unwrap();
        let spans = gaz.link(&segment.sentences[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = f_deep(&segment, &spans, &kb, "en", &NoiseParams::default(), &mut rng).unwrap();
        assert_eq!(ex.masked_words(), 0);
        assert_eq!(ex.replaced_words(), 4);
        assert_eq!(ex.source_tokens, toks("E0 а E1 б в E2 г E3 д е"));
    }

    #[test]
    fn f_deep_without_entities_matches_dae() {
        let segment = seg(&[12, 8]);
        let kb = KbSnapshot::from_records(Vec::new(), &["en"]).unwrap();
        let params = NoiseParams::with_seed(9);
        let deep = f_deep(&segment, &[], &kb, "en", &params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dae = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(deep.source_tokens, dae.source_tokens);
        assert_eq!(deep.meta.masked, dae.meta.masked);
        assert_eq!(deep.meta.replaced, Some(vec![]));
        assert_eq!(dae.meta.replaced, None);
    }

    #[test]
    fn g_dae_hundred_words() {
        let segment = seg(&[30, 25, 45]);
        let params = NoiseParams::default();
        for s in 0..2000 {
            let ex = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let m = ex.masked_words();
            assert!(m >= 35 && m <= 35 + ex.max_span() - 1, "seed {s}: {m}");
            assert_eq!(ex.target_tokens, segment.tokens());
        }
    }

    #[test]
    fn g_dae_tiny_ratio() {
        let segment = seg(&[10]);
        let params = NoiseParams {
            mask_ratio: 1e-6,
            ..Default::default()
        };
        let ex = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ex.masked_words() >= 1);
    }

    #[test]
    fn g_dae_replays_from_seed() {
        let segment = seg(&[40]);
        let params = NoiseParams {
            lambda: 1e-9,
            permute_prob: 0.0,
            ..Default::default()
        };
        let a = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.masked_words(), 14);
        assert!(a.meta.spans.iter().all(|(s, e)| e - s == 1));
    }

    #[test]
    fn subword_budget_unit() {
        let mut segment = seg(&[10]);
        segment.word_subwords = vec![vec![3, 1, 1, 1, 1, 1, 1, 1, 1, 1]];
        segment.total_subwords = 12;
        let params = NoiseParams {
            budget_unit: BudgetUnit::Subwords,
            lambda: 1e-9,
            ..Default::default()
        };
        for s in 0..200 {
            let ex = g_dae(&segment, &params, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let units: usize = ex.meta.masked.iter().map(|&p| segment.word_subwords[0][p]).sum();
            // budget = ceil(0.35 * 12) = 5; single-word spans overshoot by at most 2.
            assert!((5..=7).contains(&units), "{units}");
        }
    }

    #[test]
    fn invalid_params() {
        let p = NoiseParams {
            mask_ratio: 1.5,
            ..Default::default()
        };
        assert_eq!(p.problems()[0].1, "mask_ratio must be in (0,1]");
        assert!(g_dae(&seg(&[3]), &p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn pair_json_shape() {
        let (segment, spans, kb) = krasnodar();
        let ex = noise_segment(Objective::Deep, &segment, &spans, &kb, "en", &NoiseParams::default(), "krasnodar").unwrap();
        let v: serde_json::Value = serde_json::to_value(&ex).unwrap();
        assert_eq!(v["task"], "DEEP");
        assert!(v["src"].is_array() && v["tgt"].is_array());
        assert!(v["meta"]["masked"].is_array());
        assert!(v["meta"]["replaced"].is_array());
        assert_eq!(v["meta"]["skipped_spans"], 0);
        let back: NoisedExample = serde_json::from_value(v).unwrap();
        assert_eq!(back, ex);
    }
}
