//! Pipeline stages behind the `deep` command-line tool.
//!
//! Each stage reads the inputs named in a [`PipelineConfig`], writes its
//! outputs atomically under `paths.output_dir`, and returns a [`StageSummary`]
//! with the counts it logged. Stages parallelize per document or segment on a
//! pool of `workers` threads; outputs do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{validate_stage, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_bins, corpus_bleu, corpus_stats, coverage_stats, entity_accuracy, frequency_gain_matrix,
    partition_entities, BinCell, BinMatrix, CorpusStats, CoverageStats, EntityAccuracyReport, GainMatrix,
};
use crate::jsonl;
use crate::kb::{load_kb, records_from_tsv, KbSnapshot};
use crate::linker::{Gazetteer, LinkedSegment, LinkedSpan};
use crate::noise::{noise_segment, NoisedExample, Objective};
use crate::sampler::{build_epoch, MonoPool, NoiseSetup, ParallelPair};
use crate::subword::{pack_segments, Document, Segment, SubwordVocab, MAX_SEGMENT_SUBWORDS};
use crate::synth::{self, induce_lexicon, lexicon_scores, GroundTruth, ParallelText, WorldSpec};

/// Output file names under `paths.output_dir`.
pub mod outputs {
    pub const DOC_LINKS: &str = "doc_links.jsonl";
    pub const SEGMENTS: &str = "segments.jsonl";
    pub const LINKS: &str = "links.jsonl";
    pub const LEXICON: &str = "lexicon.jsonl";
    pub const REPORT: &str = "report.json";
    pub const HEATMAP: &str = "heatmap.csv";
    pub const STATS: &str = "stats.json";

    pub fn pairs(objective: super::Objective) -> String {
        match objective {
            super::Objective::Dae => "pairs.dae.jsonl".into(),
            super::Objective::Deep => "pairs.deep.jsonl".into(),
        }
    }

    pub fn plan(epoch: usize) -> String {
        format!("plan.epoch{epoch}.jsonl")
    }
}

pub const STAGES: [&str; 9] = ["build-kb", "link", "pack", "noise", "emit", "sample", "eval", "stats", "synth"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub counts: BTreeMap<&'static str, f64>,
    pub warnings: usize,
    pub outputs: Vec<PathBuf>,
}

impl StageSummary {
    fn new(stage: &'static str) -> Self {
        StageSummary {
            stage,
            counts: BTreeMap::new(),
            warnings: 0,
            outputs: Vec::new(),
        }
    }

    fn count(mut self, key: &'static str, value: impl Into<f64>) -> Self {
        self.counts.insert(key, value.into());
        self
    }
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={}", self.stage)?;
        for (k, v) in &self.counts {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                write!(f, " {k}={}", *v as i64)?;
            } else {
                write!(f, " {k}={v:.4}")?;
            }
        }
        write!(f, " warnings={}", self.warnings)
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn check(config: &PipelineConfig, stage: &str) -> Result<()> {
    let diags = validate_stage(config, Some(stage));
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(
            diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        ))
    }
}

fn kb(config: &PipelineConfig) -> Result<KbSnapshot> {
    load_kb(
        &config.resolve(&config.paths.kb),
        &[&config.languages.src, &config.languages.tgt],
    )
}

fn gazetteer(config: &PipelineConfig, kb: &KbSnapshot) -> Result<Gazetteer> {
    Gazetteer::build(kb, &config.languages.tgt, config.linker.policy)
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokens).collect())
}

fn read_parallel(path: &Path) -> Result<Vec<ParallelText>> {
    jsonl::read_jsonl(path)
}

fn finish(summary: StageSummary) -> StageSummary {
    info!("{summary}");
    summary
}

/// `build-kb`: converts `paths.kb_tsv` into the snapshot file at `paths.kb`.
pub fn build_kb(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "build-kb")?;
    let tsv = config.resolve(config.paths.kb_tsv.as_ref().expect("validated"));
    let file = fs::File::open(&tsv).map_err(|e| Error::io(&tsv, e))?;
    let records = records_from_tsv(BufReader::new(file))?;
    let snapshot = KbSnapshot::from_records(records, &[&config.languages.src, &config.languages.tgt])?;
    let out = config.resolve(&config.paths.kb);
    jsonl::write_atomic(&out, snapshot.to_jsonl()?.as_bytes())?;
    let mut s = StageSummary::new("build-kb").count("records", snapshot.len() as f64);
    s.outputs.push(out);
    Ok(finish(s))
}

/// `link`: links every monolingual document against the target-language gazetteer.
pub fn link(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "link")?;
    let kb = kb(config)?;
    let gaz = gazetteer(config, &kb)?;
    let docs: Vec<Document> = jsonl::read_jsonl(&config.resolve(&config.paths.mono))?;
    let linked: Vec<LinkedSegment> = with_workers(config.workers, || {
        docs.par_iter()
            .map(|d| LinkedSegment {
                segment_id: d.doc_id.clone(),
                spans: gaz.link_sentences(&d.sentences),
            })
            .collect()
    })?;
    let out = config.output(outputs::DOC_LINKS);
    jsonl::write_jsonl(&out, &linked)?;

    let n_spans: usize = linked.iter().map(|l| l.spans.len()).sum();
    let mut s = StageSummary::new("link")
        .count("docs", docs.len() as f64)
        .count("spans", n_spans as f64);
    if let Some(truth_path) = &config.paths.truth {
        let truth: GroundTruth = jsonl::read_json(&config.resolve(truth_path))?;
        let recovery = span_recovery(&truth.mono_links, &linked);
        if recovery < 1.0 {
            s.warnings += 1;
            warn!("linker recovered {:.4} of planted spans", recovery);
        }
        s = s.count("recovery", recovery);
    }
    s.outputs.push(out);
    Ok(finish(s))
}

/// Fraction of `truth` spans present in `found`, keyed by unit id.
pub fn span_recovery(truth: &[LinkedSegment], found: &[LinkedSegment]) -> f64 {
    let index: BTreeMap<&str, BTreeSet<&LinkedSpan>> = found
        .iter()
        .map(|l| (l.segment_id.as_str(), l.spans.iter().collect()))
        .collect();
    let total: usize = truth.iter().map(|t| t.spans.len()).sum();
    if total == 0 {
        return 1.0;
    }
    let hit: usize = truth
        .iter()
        .map(|t| {
            let got = index.get(t.segment_id.as_str());
            t.spans.iter().filter(|s| got.is_some_and(|g| g.contains(s))).count()
        })
        .sum();
    hit as f64 / total as f64
}

/// `pack`: packs documents into segments and projects document links onto them.
pub fn pack(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "pack")?;
    let vocab = SubwordVocab::load(&config.resolve(&config.paths.vocab))?;
    let docs: Vec<Document> = jsonl::read_jsonl(&config.resolve(&config.paths.mono))?;
    let doc_links_path = config.output(outputs::DOC_LINKS);
    let doc_links: BTreeMap<String, Vec<LinkedSpan>> = if doc_links_path.exists() {
        jsonl::read_jsonl::<LinkedSegment>(&doc_links_path)?
            .into_iter()
            .map(|l| (l.segment_id, l.spans))
            .collect()
    } else {
        BTreeMap::new()
    };
    let segments: Vec<Segment> = with_workers(config.workers, || {
        docs.par_iter()
            .map(|d| pack_segments(std::iter::once(d), &vocab, MAX_SEGMENT_SUBWORDS))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    })?;
    let links: Vec<LinkedSegment> = segments
        .iter()
        .map(|seg| LinkedSegment {
            segment_id: seg.segment_id.clone(),
            spans: doc_links
                .get(&seg.doc_id)
                .map(|spans| seg.project_spans(spans))
                .unwrap_or_default(),
        })
        .collect();
    let seg_out = config.output(outputs::SEGMENTS);
    let link_out = config.output(outputs::LINKS);
    jsonl::write_jsonl(&seg_out, &segments)?;
    jsonl::write_jsonl(&link_out, &links)?;
    let truncated = segments.iter().filter(|s| s.truncated).count();
    let mut s = StageSummary::new("pack")
        .count("docs", docs.len() as f64)
        .count("segments", segments.len() as f64)
        .count("spans", links.iter().map(|l| l.spans.len()).sum::<usize>() as f64)
        .count("truncated", truncated as f64);
    s.warnings += truncated;
    if !doc_links_path.exists() {
        s.warnings += 1;
        warn!("no document links found at {}; segments carry no spans", doc_links_path.display());
    }
    s.outputs.extend([seg_out, link_out]);
    Ok(finish(s))
}

fn load_segments(config: &PipelineConfig) -> Result<(Vec<Segment>, Vec<Vec<LinkedSpan>>)> {
    let segments: Vec<Segment> = jsonl::read_jsonl(&config.output(outputs::SEGMENTS))?;
    let links_path = config.output(outputs::LINKS);
    let mut by_id: BTreeMap<String, Vec<LinkedSpan>> = if links_path.exists() {
        jsonl::read_jsonl::<LinkedSegment>(&links_path)?
            .into_iter()
            .map(|l| (l.segment_id, l.spans))
            .collect()
    } else {
        BTreeMap::new()
    };
    let links = segments
        .iter()
        .map(|s| by_id.remove(&s.segment_id).unwrap_or_default())
        .collect();
    Ok((segments, links))
}

/// `noise`: applies the configured objective to every packed segment.
pub fn noise(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "noise")?;
    let kb = kb(config)?;
    let (segments, links) = load_segments(config)?;
    let objective = config.sampler.objective;
    let params = config.noise_params();
    let pairs: Vec<NoisedExample> = with_workers(config.workers, || {
        segments
            .par_iter()
            .zip(links.par_iter())
            .map(|(seg, spans)| {
                noise_segment(objective, seg, spans, &kb, &config.languages.src, &params, &seg.segment_id)
            })
            .collect::<Result<_>>()
    })??;
    let out = config.output(&outputs::pairs(objective));
    jsonl::write_jsonl(&out, &pairs)?;
    let exhausted = pairs.iter().filter(|p| p.meta.exhausted).count();
    let mut s = StageSummary::new("noise")
        .count("segments", segments.len() as f64)
        .count("pairs", pairs.len() as f64)
        .count("masked_words", pairs.iter().map(|p| p.masked_words()).sum::<usize>() as f64)
        .count("replaced_words", pairs.iter().map(|p| p.replaced_words()).sum::<usize>() as f64)
        .count("skipped_spans", pairs.iter().map(|p| p.meta.skipped_spans).sum::<usize>() as f64);
    s.warnings += exhausted;
    s.outputs.push(out);
    Ok(finish(s))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub src: String,
    pub tgt: String,
}

/// `emit`: induces the entity translation lexicon carried by DEEP pairs.
pub fn emit(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "emit")?;
    let pairs: Vec<NoisedExample> = jsonl::read_jsonl(&config.output(&outputs::pairs(Objective::Deep)))?;
    let lexicon = induce_lexicon(&pairs)?;
    let entries: Vec<LexiconEntry> = lexicon
        .iter()
        .map(|(s, t)| LexiconEntry {
            src: s.clone(),
            tgt: t.clone(),
        })
        .collect();
    let out = config.output(outputs::LEXICON);
    jsonl::write_jsonl(&out, &entries)?;
    let mut s = StageSummary::new("emit")
        .count("pairs", pairs.len() as f64)
        .count("lexicon", entries.len() as f64);
    if let Some(truth_path) = &config.paths.truth {
        let truth: GroundTruth = jsonl::read_json(&config.resolve(truth_path))?;
        let (p, r) = lexicon_scores(&lexicon, &truth.lexicon);
        s = s.count("precision", p).count("recall", r);
    }
    s.outputs.push(out);
    Ok(finish(s))
}

/// `sample`: writes one finetuning plan per epoch.
pub fn sample(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "sample")?;
    let kb = kb(config)?;
    let vocab = SubwordVocab::load(&config.resolve(&config.paths.vocab))?;
    let pairs: Vec<ParallelPair> = read_parallel(&config.resolve(&config.paths.finetune))?
        .into_iter()
        .map(|p| ParallelPair::new(tokens(&p.src), tokens(&p.tgt), &vocab))
        .collect::<Result<_>>()?;
    let (segments, links) = load_segments(config)?;
    let has_links = config.output(outputs::LINKS).exists();
    let pool = MonoPool {
        segments: &segments,
        links: has_links.then_some(links.as_slice()),
    };
    let setup = NoiseSetup {
        kb: &kb,
        src_lang: &config.languages.src,
        params: config.noise_params(),
    };
    let mut s = StageSummary::new("sample");
    let mut mono_total = 0;
    for epoch in 0..config.sampler.epochs {
        let plan = with_workers(config.workers, || {
            build_epoch(
                &pairs,
                pool,
                config.sampler.mode,
                config.sampler.objective,
                &setup,
                config.seed,
                epoch,
            )
        })??;
        if plan.budget.shortfall {
            s.warnings += 1;
            warn!("epoch {epoch}: monolingual pool smaller than the parallel budget");
        }
        mono_total += plan.budget.mono_subwords;
        let out = config.output(&outputs::plan(epoch));
        jsonl::write_atomic(&out, plan.to_jsonl()?.as_bytes())?;
        s.outputs.push(out);
    }
    let s = s
        .count("epochs", config.sampler.epochs as f64)
        .count("mt_entries", pairs.len() as f64)
        .count("parallel_subwords", crate::sampler::parallel_budget(&pairs) as f64)
        .count("mono_subwords", mono_total as f64);
    Ok(finish(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub sentences: usize,
    pub entity: EntityAccuracyReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_entity_macro: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<GainMatrix>,
}

fn frequencies(spans: impl Iterator<Item = String>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for id in spans {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}

fn link_lines(gaz: &Gazetteer, lines: &[Vec<String>]) -> Vec<String> {
    lines
        .par_iter()
        .map(|l| gaz.link(l).into_iter().map(|s| s.entity_id).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn pretrain_mentions(config: &PipelineConfig) -> Result<Vec<String>> {
    let path = config.output(outputs::LINKS);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(jsonl::read_jsonl::<LinkedSegment>(&path)?
        .into_iter()
        .flat_map(|l| l.spans.into_iter().map(|s| s.entity_id))
        .collect())
}

/// `eval`: BLEU, entity accuracy, group partition and frequency bins.
pub fn evaluate(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "eval")?;
    let kb = kb(config)?;
    let gaz = gazetteer(config, &kb)?;
    let refs: Vec<Vec<String>> = read_parallel(&config.resolve(&config.paths.test))?
        .iter()
        .map(|p| tokens(&p.tgt))
        .collect();
    let hyps = read_lines(&config.resolve(config.paths.hyp.as_ref().expect("validated")))?;
    let finetune: Vec<Vec<String>> = read_parallel(&config.resolve(&config.paths.finetune))
        .map(|v| v.iter().map(|p| tokens(&p.tgt)).collect())
        .unwrap_or_default();
    let edges = &config.eval.bin_edges;

    let report = with_workers(config.workers, || -> Result<EvalReport> {
        let bleu = corpus_bleu(&hyps, &refs, config.eval.smoothing)?;
        let mut entity = entity_accuracy(&hyps, &refs, &gaz)?;
        let pretrain_freqs = frequencies(pretrain_mentions(config)?.into_iter());
        let finetune_freqs = frequencies(link_lines(&gaz, &finetune).into_iter());
        let test_ids: BTreeSet<String> = entity.per_entity.keys().cloned().collect();
        entity.group = partition_entities(
            &pretrain_freqs.keys().cloned().collect(),
            &finetune_freqs.keys().cloned().collect(),
            &test_ids,
        );
        entity.bins = Some(accuracy_bins(&entity, &pretrain_freqs, &finetune_freqs, edges));
        let group_accuracy = crate::eval::Group::ALL
            .iter()
            .filter_map(|g| entity.group_accuracy(*g).map(|a| (g.label().to_string(), a)))
            .collect();

        let mut out = EvalReport {
            bleu,
            sentences: refs.len(),
            entity,
            group_accuracy,
            baseline_bleu: None,
            baseline_entity_macro: None,
            gain: None,
        };
        if let Some(base) = &config.paths.baseline_hyp {
            let base_hyps = read_lines(&config.resolve(base))?;
            let base_report = entity_accuracy(&base_hyps, &refs, &gaz)?;
            out.baseline_bleu = Some(corpus_bleu(&base_hyps, &refs, config.eval.smoothing)?);
            out.baseline_entity_macro = Some(base_report.macro_accuracy);
            out.gain = Some(frequency_gain_matrix(
                &base_report,
                &out.entity,
                &pretrain_freqs,
                &finetune_freqs,
                edges,
            )?);
        }
        Ok(out)
    })??;

    let report_out = config.output(outputs::REPORT);
    jsonl::write_json(&report_out, &report)?;
    let heat_out = config.output(outputs::HEATMAP);
    let csv = match &report.gain {
        Some(g) => g.to_csv(|c| c.delta),
        None => report
            .entity
            .bins
            .as_ref()
            .map(|b: &BinMatrix<BinCell>| b.to_csv(|c| c.accuracy))
            .unwrap_or_default(),
    };
    jsonl::write_atomic(&heat_out, csv.as_bytes())?;
    let mut s = StageSummary::new("eval")
        .count("sentences", report.sentences as f64)
        .count("bleu", report.bleu)
        .count("entities", report.entity.per_entity.len() as f64)
        .count("macro_accuracy", report.entity.macro_accuracy);
    s.outputs.extend([report_out, heat_out]);
    Ok(finish(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub coverage: CoverageStats,
    pub corpus: CorpusStats,
}

/// `stats`: corpus totals and pre-training coverage of finetune/test entities.
pub fn stats(config: &PipelineConfig) -> Result<StageSummary> {
    check(config, "stats")?;
    let kb = kb(config)?;
    let gaz = gazetteer(config, &kb)?;
    let (segments, links) = load_segments(config)?;
    let side = |path: &Path| -> Result<Vec<Vec<String>>> {
        Ok(read_parallel(path)?.iter().map(|p| tokens(&p.tgt)).collect())
    };
    let finetune = side(&config.resolve(&config.paths.finetune))?;
    let test = side(&config.resolve(&config.paths.test))?;
    let report = with_workers(config.workers, || -> Result<StatsReport> {
        let pretrain: Vec<&str> = links.iter().flatten().map(|s| s.entity_id.as_str()).collect();
        let coverage = coverage_stats(&pretrain, &link_lines(&gaz, &finetune), &link_lines(&gaz, &test));
        let corpus = corpus_stats(&segments, &links)?;
        Ok(StatsReport { coverage, corpus })
    })??;
    let out = config.output(outputs::STATS);
    jsonl::write_json(&out, &report)?;
    let mut s = StageSummary::new("stats")
        .count("segments", report.corpus.segments as f64)
        .count("tokens", report.corpus.tokens as f64)
        .count("entity_types", report.corpus.entity_types as f64)
        .count("pf_type_pct", report.coverage.pf_type_pct)
        .count("pt_type_pct", report.coverage.pt_type_pct);
    s.outputs.push(out);
    Ok(finish(s))
}

/// `synth`: generates a world into `dir` and returns its config.
pub fn synth(spec: &WorldSpec, dir: &Path) -> Result<(PipelineConfig, StageSummary)> {
    let world = synth::gen_world(spec)?;
    let outputs = world.write(dir)?;
    let mut s = StageSummary::new("synth")
        .count("entities", world.kb.len() as f64)
        .count("docs", world.docs.len() as f64)
        .count("finetune", world.finetune.len() as f64)
        .count("test", world.test.len() as f64);
    s.outputs = outputs;
    Ok((world.config(dir), finish(s)))
}

/// Runs one named stage (other than `synth`).
pub fn run_stage(stage: &str, config: &PipelineConfig) -> Result<StageSummary> {
    match stage {
        "build-kb" => build_kb(config),
        "link" => link(config),
        "pack" => pack(config),
        "noise" => noise(config),
        "emit" => emit(config),
        "sample" => sample(config),
        "eval" => evaluate(config),
        "stats" => stats(config),
        other => Err(Error::InvalidParam(format!("unknown stage `{other}`"))),
    }
}

/// Stages after `synth`, in dependency order.
pub const FULL_RUN: [&str; 7] = ["link", "pack", "noise", "emit", "sample", "eval", "stats"];
