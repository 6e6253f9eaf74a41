//! Synthetic bilingual micro-worlds with planted entity frequencies.
//!
//! The target language is written in Cyrillic and the source language is its
//! Latin transliteration. Entity tokens use vowels that filler words never
//! use, and every entity owns its tokens, so a gazetteer recovers every
//! planted mention exactly. An untranslated (copied) entity in target-side
//! output is therefore always detectable.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Languages, Paths, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::Group;
use crate::jsonl;
use crate::kb::EntityRecord;
use crate::linker::{LinkedSegment, LinkedSpan};
use crate::noise::NoisedExample;
use crate::seed;
use crate::subword::{Document, SubwordVocab};

const CONSONANTS: [char; 15] = ['б', 'в', 'г', 'д', 'з', 'к', 'л', 'м', 'н', 'п', 'р', 'с', 'т', 'ф', 'х'];
const FILLER_VOWELS: [char; 5] = ['а', 'е', 'и', 'о', 'у'];
const ENTITY_VOWELS: [char; 3] = ['ы', 'я', 'ю'];

/// Latin rendering of one Cyrillic letter.
fn translit_char(c: char) -> &'static str {
    match c.to_lowercase().next().unwrap_or(c) {
        'б' => "b",
        'в' => "v",
        'г' => "g",
        'д' => "d",
        'з' => "z",
        'к' => "k",
        'л' => "l",
        'м' => "m",
        'н' => "n",
        'п' => "p",
        'р' => "r",
        'с' => "s",
        'т' => "t",
        'ф' => "f",
        'х' => "h",
        'а' => "a",
        'е' => "e",
        'и' => "i",
        'о' => "o",
        'у' => "u",
        'ы' => "y",
        'я' => "ja",
        'ю' => "ju",
        _ => "?",
    }
}

pub fn transliterate(word: &str) -> String {
    let mut out = String::new();
    for (i, c) in word.chars().enumerate() {
        let t = translit_char(c);
        if i == 0 && c.is_uppercase() {
            let mut cs = t.chars();
            if let Some(first) = cs.next() {
                out.extend(first.to_uppercase());
                out.push_str(cs.as_str());
            }
        } else {
            out.push_str(t);
        }
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut cs = s.chars();
    match cs.next() {
        Some(f) => f.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

fn syllables(vowels: &[char]) -> Vec<String> {
    CONSONANTS
        .iter()
        .flat_map(|c| vowels.iter().map(move |v| format!("{c}{v}")))
        .collect()
}

/// Entity token `n`: at least two syllables from the entity inventory.
fn entity_token(mut n: usize, inventory: &[String]) -> String {
    let base = inventory.len();
    let mut digits = Vec::new();
    loop {
        digits.push(n % base);
        n /= base;
        if n == 0 {
            break;
        }
    }
    if digits.len() < 2 {
        digits.push(0);
    }
    let word: String = digits.iter().rev().map(|&d| inventory[d].as_str()).collect();
    capitalize(&word)
}

/// Number of entities per group. Groups name where an entity occurs:
/// P(re-training), F(inetuning), T(est).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSizes {
    pub pft: usize,
    pub pt: usize,
    pub ft: usize,
    pub test_only: usize,
    pub pretrain_only: usize,
    pub finetune_only: usize,
}

impl GroupSizes {
    pub fn total(&self) -> usize {
        self.pft + self.pt + self.ft + self.test_only + self.pretrain_only + self.finetune_only
    }
}

/// Inclusive range of planted mention counts for an entity present in a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqRange {
    pub min: usize,
    pub max: usize,
}

impl FreqRange {
    pub const fn new(min: usize, max: usize) -> Self {
        FreqRange { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub src_lang: String,
    pub tgt_lang: String,
    pub groups: GroupSizes,
    pub pretrain_freq: FreqRange,
    pub finetune_freq: FreqRange,
    pub test_freq: FreqRange,
    pub pretrain_docs: usize,
    pub doc_sentences: FreqRange,
    pub finetune_pairs: usize,
    pub test_pairs: usize,
    pub sentence_words: FreqRange,
    pub max_mentions_per_sentence: usize,
    pub filler_vocab: usize,
    /// Every k-th entity gets a two-token surface form (0 disables).
    pub multi_token_every: usize,
    /// Chance that the simulated system copies an entity untranslated, per group.
    pub copy_rate: BTreeMap<Group, f64>,
    /// Copy chance of the simulated baseline system, all groups.
    pub baseline_copy_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            src_lang: "en".into(),
            tgt_lang: "xx".into(),
            groups: GroupSizes {
                pft: 10,
                pt: 10,
                ft: 10,
                test_only: 0,
                pretrain_only: 10,
                finetune_only: 0,
            },
            pretrain_freq: FreqRange::new(1, 40),
            finetune_freq: FreqRange::new(1, 12),
            test_freq: FreqRange::new(1, 4),
            pretrain_docs: 150,
            doc_sentences: FreqRange::new(3, 8),
            finetune_pairs: 200,
            test_pairs: 80,
            sentence_words: FreqRange::new(5, 30),
            max_mentions_per_sentence: 3,
            filler_vocab: 400,
            multi_token_every: 3,
            copy_rate: [(Group::Pft, 0.1), (Group::Pt, 0.5), (Group::Ft, 0.2), (Group::Other, 0.8)].into(),
            baseline_copy_rate: 0.6,
        }
    }
}

impl WorldSpec {
    pub fn with_seed(seed: u64) -> Self {
        WorldSpec {
            seed,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleWorld(m.to_string()));
        for (name, r) in [
            ("pretrain_freq", self.pretrain_freq),
            ("finetune_freq", self.finetune_freq),
            ("test_freq", self.test_freq),
        ] {
            if r.min == 0 || r.min > r.max {
                return bad(&format!("{name} must satisfy 1 <= min <= max"));
            }
        }
        if self.doc_sentences.min == 0 || self.doc_sentences.min > self.doc_sentences.max {
            return bad("doc_sentences must satisfy 1 <= min <= max");
        }
        if self.sentence_words.min > self.sentence_words.max {
            return bad("sentence_words min exceeds max");
        }
        if self.max_mentions_per_sentence == 0 {
            return bad("max_mentions_per_sentence must be at least 1");
        }
        // Two tokens per mention plus one filler word must fit in a sentence.
        if 2 * self.max_mentions_per_sentence + 1 > self.sentence_words.max {
            return bad("sentence_words.max too small for max_mentions_per_sentence");
        }
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be positive");
        }
        if self.src_lang == self.tgt_lang {
            return bad("src_lang and tgt_lang must differ");
        }
        Ok(())
    }
}

/// Planted mention counts of one entity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub pretrain: usize,
    pub finetune: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelText {
    pub src: String,
    pub tgt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Expected group of every entity occurring in the test set.
    pub groups: BTreeMap<String, Group>,
    pub planted: BTreeMap<String, Planted>,
    /// (source surface, target surface) of every entity in the monolingual corpus.
    pub lexicon: BTreeSet<(String, String)>,
    /// Exact mention spans in the monolingual documents.
    pub mono_links: Vec<LinkedSegment>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub kb: Vec<EntityRecord>,
    pub vocab: SubwordVocab,
    pub docs: Vec<Document>,
    pub finetune: Vec<ParallelText>,
    pub test: Vec<ParallelText>,
    /// Simulated system output on the test sources.
    pub hyp: Vec<String>,
    pub baseline_hyp: Vec<String>,
    pub truth: GroundTruth,
}

struct Entity {
    id: String,
    group: Option<Group>,
    tgt: Vec<String>,
    src: Vec<String>,
    planted: Planted,
}

/// A sentence under construction: target tokens, source tokens and the
/// entity mentions as (entity index, target start).
struct Sentence {
    tgt: Vec<String>,
    src: Vec<String>,
    mentions: Vec<(usize, usize)>,
}

fn draw(rng: &mut ChaCha8Rng, r: FreqRange) -> usize {
    rng.random_range(r.min..=r.max)
}

/// Spreads `occurrences` (entity indices) over `n` sentences, at most `cap` each.
fn place(rng: &mut ChaCha8Rng, occurrences: Vec<usize>, n: usize, cap: usize, what: &str) -> Result<Vec<Vec<usize>>> {
    if occurrences.len() > n * cap {
        return Err(Error::InfeasibleWorld(format!(
            "{} {what} mentions do not fit in {n} sentences of at most {cap} mentions",
            occurrences.len()
        )));
    }
    let mut slots: Vec<usize> = (0..n).flat_map(|s| std::iter::repeat_n(s, cap)).collect();
    slots.shuffle(rng);
    let mut out = vec![Vec::new(); n];
    for (occ, &slot) in occurrences.into_iter().zip(&slots) {
        out[slot].push(occ);
    }
    Ok(out)
}

fn build_sentence(
    rng: &mut ChaCha8Rng,
    mentions: &[usize],
    entities: &[Entity],
    filler: &[String],
    words: FreqRange,
) -> Sentence {
    let entity_words: usize = mentions.iter().map(|&e| entities[e].tgt.len()).sum();
    let lo = words.min.max(entity_words + 1);
    let len = rng.random_range(lo..=words.max.max(lo));
    let fillers = len - entity_words;
    // Units: Some(entity) or None (filler), in order.
    let mut units: Vec<Option<usize>> = vec![None; fillers];
    for &e in mentions {
        let at = rng.random_range(0..=units.len());
        units.insert(at, Some(e));
    }
    let mut s = Sentence {
        tgt: Vec::with_capacity(len),
        src: Vec::with_capacity(len),
        mentions: Vec::new(),
    };
    for u in units {
        match u {
            Some(e) => {
                s.mentions.push((e, s.tgt.len()));
                s.tgt.extend(entities[e].tgt.iter().cloned());
                s.src.extend(entities[e].src.iter().cloned());
            }
            None => {
                let w = filler.choose(rng).expect("filler vocabulary is non-empty").clone();
                s.src.push(transliterate(&w));
                s.tgt.push(w);
            }
        }
    }
    s
}

/// System output for one test sentence: each mention is copied in source
/// form with probability `rate(entity)`, otherwise rendered correctly.
fn simulate_output(rng: &mut ChaCha8Rng, s: &Sentence, entities: &[Entity], rate: impl Fn(&Entity) -> f64) -> String {
    let mut out = Vec::with_capacity(s.tgt.len());
    let mut next = s.mentions.iter().peekable();
    let mut i = 0;
    while i < s.tgt.len() {
        if let Some(&(e, _)) = next.next_if(|(_, start)| *start == i) {
            let ent = &entities[e];
            if rng.random_bool(rate(ent).clamp(0.0, 1.0)) {
                out.extend(ent.src.iter().cloned());
            } else {
                out.extend(ent.tgt.iter().cloned());
            }
            i += ent.tgt.len();
        } else {
            out.push(s.tgt[i].clone());
            i += 1;
        }
    }
    out.join(" ")
}

pub fn gen_world(spec: &WorldSpec) -> Result<World> {
    spec.check()?;
    let mut rng = seed::rng_for(spec.seed, "synth");
    let entity_syllables = syllables(&ENTITY_VOWELS);
    let filler_syllables = syllables(&FILLER_VOWELS);

    let mut filler: BTreeSet<String> = BTreeSet::new();
    let max_filler = filler_syllables.len().pow(3);
    while filler.len() < spec.filler_vocab.min(max_filler) {
        let n = rng.random_range(1..=3);
        let w: String = (0..n)
            .map(|_| filler_syllables.choose(&mut rng).unwrap().as_str())
            .collect();
        filler.insert(w);
    }
    let filler: Vec<String> = filler.into_iter().collect();

    let g = spec.groups;
    let layout = [
        (g.pft, Some(Group::Pft), (true, true, true)),
        (g.pt, Some(Group::Pt), (true, false, true)),
        (g.ft, Some(Group::Ft), (false, true, true)),
        (g.test_only, Some(Group::Other), (false, false, true)),
        (g.pretrain_only, None, (true, false, false)),
        (g.finetune_only, None, (false, true, false)),
    ];
    let mut entities = Vec::with_capacity(g.total());
    let mut next_token = 0;
    for (count, group, (in_p, in_f, in_t)) in layout {
        for _ in 0..count {
            let n = entities.len();
            let width = if spec.multi_token_every > 0 && n % spec.multi_token_every == spec.multi_token_every - 1 {
                2
            } else {
                1
            };
            let tgt: Vec<String> = (0..width)
                .map(|_| {
                    next_token += 1;
                    entity_token(next_token, &entity_syllables)
                })
                .collect();
            let src = tgt.iter().map(|t| transliterate(t)).collect();
            let planted = Planted {
                pretrain: if in_p { draw(&mut rng, spec.pretrain_freq) } else { 0 },
                finetune: if in_f { draw(&mut rng, spec.finetune_freq) } else { 0 },
                test: if in_t { draw(&mut rng, spec.test_freq) } else { 0 },
            };
            entities.push(Entity {
                id: format!("Q{}", n + 1),
                group,
                tgt,
                src,
                planted,
            });
        }
    }

    let occurrences = |f: fn(&Planted) -> usize| -> Vec<usize> {
        entities
            .iter()
            .enumerate()
            .flat_map(|(i, e)| std::iter::repeat_n(i, f(&e.planted)))
            .collect()
    };
    let cap = spec.max_mentions_per_sentence;

    // Monolingual documents.
    let doc_lens: Vec<usize> = (0..spec.pretrain_docs).map(|_| draw(&mut rng, spec.doc_sentences)).collect();
    let n_mono: usize = doc_lens.iter().sum();
    let mono_mentions = place(&mut rng, occurrences(|p| p.pretrain), n_mono, cap, "pre-training")?;
    let mut docs = Vec::with_capacity(spec.pretrain_docs);
    let mut mono_links = Vec::with_capacity(spec.pretrain_docs);
    let mut mentions_iter = mono_mentions.into_iter();
    for (d, &len) in doc_lens.iter().enumerate() {
        let doc_id = format!("doc{d:05}");
        let mut sentences = Vec::with_capacity(len);
        let mut spans = Vec::new();
        for si in 0..len {
            let m = mentions_iter.next().unwrap();
            let s = build_sentence(&mut rng, &m, &entities, &filler, spec.sentence_words);
            for &(e, start) in &s.mentions {
                spans.push(LinkedSpan {
                    sentence_index: si,
                    token_start: start,
                    token_end: start + entities[e].tgt.len(),
                    entity_id: entities[e].id.clone(),
                    matched_surface: entities[e].tgt.join(" "),
                });
            }
            sentences.push(s.tgt);
        }
        docs.push(Document {
            doc_id: doc_id.clone(),
            sentences,
        });
        mono_links.push(LinkedSegment {
            segment_id: doc_id,
            spans,
        });
    }

    // Parallel data.
    let ft_mentions = place(&mut rng, occurrences(|p| p.finetune), spec.finetune_pairs, cap, "finetuning")?;
    let finetune: Vec<ParallelText> = ft_mentions
        .iter()
        .map(|m| {
            let s = build_sentence(&mut rng, m, &entities, &filler, spec.sentence_words);
            ParallelText {
                src: s.src.join(" "),
                tgt: s.tgt.join(" "),
            }
        })
        .collect();
    let test_mentions = place(&mut rng, occurrences(|p| p.test), spec.test_pairs, cap, "test")?;
    let test_sentences: Vec<Sentence> = test_mentions
        .iter()
        .map(|m| build_sentence(&mut rng, m, &entities, &filler, spec.sentence_words))
        .collect();
    let test = test_sentences
        .iter()
        .map(|s| ParallelText {
            src: s.src.join(" "),
            tgt: s.tgt.join(" "),
        })
        .collect();
    let rate = |e: &Entity| e.group.and_then(|g| spec.copy_rate.get(&g).copied()).unwrap_or(0.0);
    let hyp = test_sentences
        .iter()
        .map(|s| simulate_output(&mut rng, s, &entities, rate))
        .collect();
    let baseline_hyp = test_sentences
        .iter()
        .map(|s| simulate_output(&mut rng, s, &entities, |_| spec.baseline_copy_rate))
        .collect();

    // Vocabulary: letters plus every syllable in both scripts and cases.
    let mut pieces: BTreeSet<String> = BTreeSet::new();
    for syl in entity_syllables.iter().chain(&filler_syllables) {
        let lat = transliterate(syl);
        pieces.insert(capitalize(syl));
        pieces.insert(capitalize(&lat));
        pieces.insert(lat);
        pieces.insert(syl.clone());
    }
    for c in CONSONANTS.iter().chain(&FILLER_VOWELS).chain(&ENTITY_VOWELS) {
        pieces.insert(c.to_string());
        pieces.insert(capitalize(&c.to_string()));
        for l in translit_char(*c).chars() {
            pieces.insert(l.to_string());
            pieces.insert(l.to_uppercase().collect());
        }
    }
    let vocab = SubwordVocab::from_pieces(pieces)?;

    let kb = entities
        .iter()
        .map(|e| {
            let mut r = EntityRecord::new(e.id.clone());
            r.surfaces.insert(spec.src_lang.clone(), vec![e.src.join(" ")]);
            r.surfaces.insert(spec.tgt_lang.clone(), vec![e.tgt.join(" ")]);
            r
        })
        .collect();

    let truth = GroundTruth {
        groups: entities
            .iter()
            .filter_map(|e| e.group.map(|g| (e.id.clone(), g)))
            .collect(),
        planted: entities.iter().map(|e| (e.id.clone(), e.planted)).collect(),
        lexicon: entities
            .iter()
            .filter(|e| e.planted.pretrain > 0)
            .map(|e| (e.src.join(" "), e.tgt.join(" ")))
            .collect(),
        mono_links,
    };

    Ok(World {
        spec: spec.clone(),
        kb,
        vocab,
        docs,
        finetune,
        test,
        hyp,
        baseline_hyp,
        truth,
    })
}

/// File names `write_world` uses inside its output directory.
pub mod files {
    pub const KB: &str = "kb.jsonl";
    pub const VOCAB: &str = "vocab.txt";
    pub const MONO: &str = "mono.jsonl";
    pub const FINETUNE: &str = "finetune.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const HYP: &str = "test.hyp.txt";
    pub const BASELINE_HYP: &str = "test.baseline.txt";
    pub const TRUTH: &str = "truth.json";
    pub const CONFIG: &str = "config.toml";
    pub const OUTPUT_DIR: &str = "out";
}

impl World {
    /// Pipeline config pointing at the files of [`World::write`].
    pub fn config(&self, base_dir: &Path) -> PipelineConfig {
        PipelineConfig {
            seed: self.spec.seed,
            workers: 1,
            paths: Paths {
                kb: files::KB.into(),
                vocab: files::VOCAB.into(),
                mono: files::MONO.into(),
                finetune: files::FINETUNE.into(),
                test: files::TEST.into(),
                hyp: Some(files::HYP.into()),
                baseline_hyp: Some(files::BASELINE_HYP.into()),
                truth: Some(files::TRUTH.into()),
                kb_tsv: None,
                output_dir: files::OUTPUT_DIR.into(),
            },
            languages: Languages {
                src: self.spec.src_lang.clone(),
                tgt: self.spec.tgt_lang.clone(),
            },
            noise: Default::default(),
            linker: Default::default(),
            sampler: Default::default(),
            eval: Default::default(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    /// Writes every world file plus `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let p = |name: &str| dir.join(name);
        let lines = |v: &[String]| {
            let mut s = v.join("\n");
            if !v.is_empty() {
                s.push('\n');
            }
            s
        };
        jsonl::write_jsonl(&p(files::KB), &self.kb)?;
        jsonl::write_atomic(&p(files::VOCAB), self.vocab.to_file_string().as_bytes())?;
        jsonl::write_jsonl(&p(files::MONO), &self.docs)?;
        jsonl::write_jsonl(&p(files::FINETUNE), &self.finetune)?;
        jsonl::write_jsonl(&p(files::TEST), &self.test)?;
        jsonl::write_atomic(&p(files::HYP), lines(&self.hyp).as_bytes())?;
        jsonl::write_atomic(&p(files::BASELINE_HYP), lines(&self.baseline_hyp).as_bytes())?;
        jsonl::write_json(&p(files::TRUTH), &self.truth)?;
        jsonl::write_atomic(&p(files::CONFIG), self.config(dir).to_toml().as_bytes())?;
        Ok([
            files::KB,
            files::VOCAB,
            files::MONO,
            files::FINETUNE,
            files::TEST,
            files::HYP,
            files::BASELINE_HYP,
            files::TRUTH,
            files::CONFIG,
        ]
        .iter()
        .map(|f| p(f))
        .collect())
    }
}

/// Source/target surface pairs recovered from DEEP replacement metadata.
pub fn induce_lexicon(pairs: &[NoisedExample]) -> Result<BTreeSet<(String, String)>> {
    let mut lexicon = BTreeSet::new();
    for (i, ex) in pairs.iter().enumerate() {
        let replaced = ex.meta.replaced.as_ref().ok_or(Error::MissingReplacementMetadata(i))?;
        for r in replaced {
            let src = ex
                .source_tokens
                .get(r.src_start..r.src_end)
                .ok_or(Error::MissingReplacementMetadata(i))?;
            let tgt = ex
                .target_tokens
                .get(r.tgt_start..r.tgt_end)
                .ok_or(Error::MissingReplacementMetadata(i))?;
            lexicon.insert((src.join(" "), tgt.join(" ")));
        }
    }
    Ok(lexicon)
}

/// Precision and recall of `found` against `truth`.
pub fn lexicon_scores(found: &BTreeSet<(String, String)>, truth: &BTreeSet<(String, String)>) -> (f64, f64) {
    let hits = found.intersection(truth).count() as f64;
    let precision = if found.is_empty() { 0.0 } else { hits / found.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { hits / truth.len() as f64 };
    (precision, recall)
}
