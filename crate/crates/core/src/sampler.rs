//! Single-task and multi-task finetuning mixtures.
//!
//! In multi-task mode every epoch draws a fresh subset of monolingual
//! segments whose subword total matches the parallel budget
//! `sum(max(|x|, |y|))`, noises them, and mixes them with the full parallel
//! set. Each source sequence starts with its task token.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KbSnapshot;
use crate::linker::LinkedSpan;
use crate::noise::{noise_segment, NoiseParams, Objective, Task};
use crate::seed;
use crate::subword::{Segment, SubwordVocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    #[serde(rename = "src")]
    pub src_tokens: Vec<String>,
    #[serde(rename = "tgt")]
    pub tgt_tokens: Vec<String>,
    pub src_subwords: usize,
    pub tgt_subwords: usize,
}

impl ParallelPair {
    pub fn new(src_tokens: Vec<String>, tgt_tokens: Vec<String>, vocab: &SubwordVocab) -> Result<Self> {
        if src_tokens.is_empty() || tgt_tokens.is_empty() {
            return Err(Error::InvalidParam("parallel pair sides must be non-empty".into()));
        }
        let count = |toks: &[String]| toks.iter().map(|t| vocab.count(t)).sum();
        Ok(ParallelPair {
            src_subwords: count(&src_tokens),
            tgt_subwords: count(&tgt_tokens),
            src_tokens,
            tgt_tokens,
        })
    }

    /// Pair with explicit subword counts.
    pub fn with_counts(src_subwords: usize, tgt_subwords: usize) -> Self {
        ParallelPair {
            src_tokens: vec!["x".into(); src_subwords.max(1)],
            tgt_tokens: vec!["y".into(); tgt_subwords.max(1)],
            src_subwords,
            tgt_subwords,
        }
    }
}

pub fn parallel_budget(pairs: &[ParallelPair]) -> usize {
    pairs.iter().map(|p| p.src_subwords.max(p.tgt_subwords)).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonoSample {
    /// Indices into the pool, in draw order.
    pub indices: Vec<usize>,
    pub subwords: usize,
    /// The whole pool was taken and still fell short of the budget.
    pub shortfall: bool,
}

/// Draws segments uniformly without replacement until their subword total
/// reaches `budget`.
pub fn sample_mono_subset(sizes: &[usize], budget: usize, seed: u64, epoch: usize) -> MonoSample {
    let mut indices = Vec::new();
    let mut subwords = 0;
    if budget > 0 {
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.shuffle(&mut seed::rng_for(seed, &format!("epoch{epoch}/mono-subset")));
        for i in order {
            if subwords >= budget {
                break;
            }
            indices.push(i);
            subwords += sizes[i];
        }
    }
    MonoSample {
        shortfall: subwords < budget,
        indices,
        subwords,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multitask,
}

/// Monolingual segments available for the denoising task.
#[derive(Debug, Clone, Copy)]
pub struct MonoPool<'a> {
    pub segments: &'a [Segment],
    /// Per-segment entity links, required for the DEEP objective.
    pub links: Option<&'a [Vec<LinkedSpan>]>,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSetup<'a> {
    pub kb: &'a KbSnapshot,
    pub src_lang: &'a str,
    pub params: NoiseParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub task: Task,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// `p:<index>` for parallel pairs, `m:<segment id>` for segments.
    pub origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub parallel_subwords: usize,
    pub mono_subwords: usize,
    pub mono_segments: usize,
    pub max_segment_subwords: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub entries: Vec<PlanEntry>,
    pub budget: BudgetReport,
}

#[derive(Serialize)]
struct PlanHeader<'a> {
    epoch: usize,
    budget: &'a BudgetReport,
}

impl EpochPlan {
    /// Header line with the budget report, then one line per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&PlanHeader {
            epoch: self.epoch,
            budget: &self.budget,
        })?;
        out.push('\n');
        out.push_str(&crate::jsonl::to_jsonl_string(&self.entries)?);
        Ok(out)
    }

    pub fn entries_for(&self, task: Task) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(move |e| e.task == task)
    }
}

fn prefixed(task: Task, tokens: &[String]) -> Vec<String> {
    let mut src = Vec::with_capacity(tokens.len() + 1);
    src.push(task.token().to_string());
    src.extend(tokens.iter().cloned());
    src
}

/// Builds one epoch's training plan. Parallel pairs appear in both modes;
/// multi-task mode adds noised segments drawn to match their subword budget.
pub fn build_epoch(
    pairs: &[ParallelPair],
    pool: MonoPool<'_>,
    mode: Mode,
    objective: Objective,
    noise: &NoiseSetup<'_>,
    seed: u64,
    epoch: usize,
) -> Result<EpochPlan> {
    if mode == Mode::Multitask && objective == Objective::Deep && pool.links.is_none() {
        return Err(Error::MissingLinks);
    }
    if let Some(links) = pool.links {
        if links.len() != pool.segments.len() {
            return Err(Error::InvalidParam(format!(
                "{} link rows for {} segments",
                links.len(),
                pool.segments.len()
            )));
        }
    }

    let mut entries: Vec<PlanEntry> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PlanEntry {
            task: Task::Mt,
            src: prefixed(Task::Mt, &p.src_tokens),
            tgt: p.tgt_tokens.clone(),
            origin: format!("p:{i}"),
        })
        .collect();

    let parallel_subwords = parallel_budget(pairs);
    let mut budget = BudgetReport {
        parallel_subwords,
        mono_subwords: 0,
        mono_segments: 0,
        max_segment_subwords: pool.segments.iter().map(|s| s.total_subwords).max().unwrap_or(0),
        shortfall: false,
    };

    if mode == Mode::Multitask {
        let sizes: Vec<usize> = pool.segments.iter().map(|s| s.total_subwords).collect();
        let sample = sample_mono_subset(&sizes, parallel_subwords, seed, epoch);
        let params = NoiseParams {
            seed: seed::derive_seed(seed, &format!("epoch{epoch}/noise")),
            ..noise.params
        };
        let task = objective.task();
        let noised: Vec<PlanEntry> = sample
            .indices
            .par_iter()
            .map(|&i| {
                let seg = &pool.segments[i];
                let spans = pool.links.map(|l| l[i].as_slice()).unwrap_or(&[]);
                let ex = noise_segment(objective, seg, spans, noise.kb, noise.src_lang, &params, &seg.segment_id)?;
                Ok(PlanEntry {
                    task,
                    src: prefixed(task, &ex.source_tokens),
                    tgt: ex.target_tokens,
                    origin: format!("m:{}", seg.segment_id),
                })
            })
            .collect::<Result<_>>()?;
        entries.extend(noised);
        budget.mono_subwords = sample.subwords;
        budget.mono_segments = sample.indices.len();
        budget.shortfall = sample.shortfall;
    }

    entries.shuffle(&mut seed::rng_for(seed, &format!("epoch{epoch}/order")));
    Ok(EpochPlan { epoch, entries, budget })
}
