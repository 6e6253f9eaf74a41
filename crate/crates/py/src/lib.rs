//! Python bindings: `import deep_pipeline`.

use std::collections::{BTreeMap, BTreeSet};

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use deep_core::eval::{self, Smoothing};
use deep_core::kb::KbSnapshot;
use deep_core::linker::{self, LinkedSpan, Normalization};
use deep_core::noise::{self, NoiseParams, NoisedExample};
use deep_core::sampler::{self, ParallelPair};
use deep_core::seed::rng_for;
use deep_core::subword::{Segment, SubwordVocab};

fn err(e: deep_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen, module = "deep_pipeline")]
struct KnowledgeBase {
    inner: KbSnapshot,
}

#[pymethods]
impl KnowledgeBase {
    /// Parse KB records from JSONL text, indexing `languages`.
    #[staticmethod]
    fn from_jsonl(text: &str, languages: Vec<String>) -> PyResult<Self> {
        let inner = KbSnapshot::from_reader(text.as_bytes(), &languages).map_err(err)?;
        Ok(KnowledgeBase { inner })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf, languages: Vec<String>) -> PyResult<Self> {
        let langs: Vec<&str> = languages.iter().map(String::as_str).collect();
        let inner = deep_core::kb::load_kb(&path, &langs).map_err(err)?;
        Ok(KnowledgeBase { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn languages(&self) -> Vec<String> {
        self.inner.languages().iter().cloned().collect()
    }

    fn lookup(&self, id: &str, lang: &str) -> Option<String> {
        self.inner.lookup(id, lang).map(str::to_string)
    }

    fn surface(&self, id: &str) -> BTreeMap<String, Vec<String>> {
        self.inner.surface(id)
    }

    /// Inverted index for `lang`: surface form to entity ids.
    fn index(&self, lang: &str) -> PyResult<BTreeMap<String, BTreeSet<String>>> {
        self.inner
            .index(lang)
            .cloned()
            .ok_or_else(|| PyKeyError::new_err(lang.to_string()))
    }
}

#[pyclass(frozen, module = "deep_pipeline")]
struct Gazetteer {
    inner: linker::Gazetteer,
}

type Span = (usize, usize, usize, String, String);

fn span_tuple(s: LinkedSpan) -> Span {
    (s.sentence_index, s.token_start, s.token_end, s.entity_id, s.matched_surface)
}

#[pymethods]
impl Gazetteer {
    #[new]
    #[pyo3(signature = (kb, lang, case_fold = false))]
    fn new(kb: &KnowledgeBase, lang: &str, case_fold: bool) -> PyResult<Self> {
        let policy = if case_fold { Normalization::CaseFold } else { Normalization::Exact };
        let inner = linker::Gazetteer::build(&kb.inner, lang, policy).map_err(err)?;
        Ok(Gazetteer { inner })
    }

    /// Spans `(sentence, start, end, id, surface)` in one token sequence.
    fn link(&self, tokens: Vec<String>) -> Vec<Span> {
        self.inner.link(&tokens).into_iter().map(span_tuple).collect()
    }

    fn link_sentences(&self, sentences: Vec<Vec<String>>) -> Vec<Span> {
        self.inner.link_sentences(&sentences).into_iter().map(span_tuple).collect()
    }
}

#[pyclass(frozen, module = "deep_pipeline")]
struct Vocab {
    inner: SubwordVocab,
}

#[pymethods]
impl Vocab {
    #[new]
    fn new(pieces: Vec<String>) -> PyResult<Self> {
        Ok(Vocab {
            inner: SubwordVocab::from_pieces(pieces).map_err(err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Vocab {
            inner: SubwordVocab::parse(text).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.decode(&ids)
    }

    fn pieces(&self, text: &str) -> Vec<String> {
        self.inner
            .encode(text)
            .into_iter()
            .map(|i| self.inner.piece(i).unwrap_or_default().to_string())
            .collect()
    }

    fn count(&self, word: &str) -> usize {
        self.inner.count(word)
    }
}

#[pyclass(frozen, get_all, module = "deep_pipeline")]
struct NoisedPair {
    task: String,
    src: Vec<String>,
    tgt: Vec<String>,
    masked_words: usize,
    replaced_words: usize,
    order: Vec<usize>,
}

impl From<NoisedExample> for NoisedPair {
    fn from(e: NoisedExample) -> Self {
        NoisedPair {
            task: e.task.to_string(),
            masked_words: e.masked_words(),
            replaced_words: e.replaced_words(),
            order: e.meta.order.clone(),
            src: e.source_tokens,
            tgt: e.target_tokens,
        }
    }
}

#[pymethods]
impl NoisedPair {
    fn __repr__(&self) -> String {
        format!("NoisedPair(task={}, src={:?})", self.task, self.src.join(" "))
    }
}

fn params(seed: u64, lambda: f64, mask_ratio: f64, permute_prob: f64) -> NoiseParams {
    NoiseParams {
        lambda,
        mask_ratio,
        permute_prob,
        ..NoiseParams::with_seed(seed)
    }
}

fn segment(sentences: Vec<Vec<String>>) -> Segment {
    Segment::from_tokens("py", sentences)
}

/// DAE noise over tokenized sentences.
#[pyfunction]
#[pyo3(signature = (sentences, seed, lambda_ = 3.5, mask_ratio = 0.35, permute_prob = 1.0))]
fn g_dae(sentences: Vec<Vec<String>>, seed: u64, lambda_: f64, mask_ratio: f64, permute_prob: f64) -> PyResult<NoisedPair> {
    let p = params(seed, lambda_, mask_ratio, permute_prob);
    let mut rng = rng_for(seed, "py");
    noise::g_dae(&segment(sentences), &p, &mut rng).map(Into::into).map_err(err)
}

/// DEEP noise; `spans` are `(sentence, start, end, id)` target-language links.
#[pyfunction]
#[pyo3(signature = (sentences, spans, kb, src_lang, seed, lambda_ = 3.5, mask_ratio = 0.35, permute_prob = 1.0))]
#[allow(clippy::too_many_arguments)]
fn f_deep(
    sentences: Vec<Vec<String>>,
    spans: Vec<(usize, usize, usize, String)>,
    kb: &KnowledgeBase,
    src_lang: &str,
    seed: u64,
    lambda_: f64,
    mask_ratio: f64,
    permute_prob: f64,
) -> PyResult<NoisedPair> {
    let spans: Vec<LinkedSpan> = spans
        .into_iter()
        .map(|(sent, start, end, id)| {
            let surface = sentences
                .get(sent)
                .and_then(|s| s.get(start..end))
                .map(|t| t.join(" "))
                .unwrap_or_default();
            LinkedSpan {
                sentence_index: sent,
                token_start: start,
                token_end: end,
                entity_id: id,
                matched_surface: surface,
            }
        })
        .collect();
    let p = params(seed, lambda_, mask_ratio, permute_prob);
    let mut rng = rng_for(seed, "py");
    noise::f_deep(&segment(sentences), &spans, &kb.inner, src_lang, &p, &mut rng)
        .map(Into::into)
        .map_err(err)
}

/// Corpus BLEU-4 on a 0-100 scale.
#[pyfunction]
#[pyo3(signature = (hypotheses, references, smoothing = "none"))]
fn corpus_bleu(hypotheses: Vec<Vec<String>>, references: Vec<Vec<String>>, smoothing: &str) -> PyResult<f64> {
    let smoothing = match smoothing {
        "none" => Smoothing::None,
        "add-one" => Smoothing::AddOne,
        other => return Err(PyValueError::new_err(format!("unknown smoothing `{other}`"))),
    };
    eval::corpus_bleu(&hypotheses, &references, smoothing).map_err(err)
}

/// `(macro_accuracy, {id: (ref_occurrences, matched, accuracy)})`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn entity_accuracy(
    hypotheses: Vec<Vec<String>>,
    references: Vec<Vec<String>>,
    gazetteer: &Gazetteer,
) -> PyResult<(f64, BTreeMap<String, (usize, usize, f64)>)> {
    let r = eval::entity_accuracy(&hypotheses, &references, &gazetteer.inner).map_err(err)?;
    let per = r
        .per_entity
        .into_iter()
        .map(|(id, s)| (id, (s.ref_occurrences, s.matched, s.accuracy)))
        .collect();
    Ok((r.macro_accuracy, per))
}

/// Map each test entity to `PFT`, `PT`, `FT` or `other`.
#[pyfunction]
fn partition(pretrain: BTreeSet<String>, finetune: BTreeSet<String>, test: BTreeSet<String>) -> BTreeMap<String, String> {
    eval::partition_entities(&pretrain, &finetune, &test)
        .into_iter()
        .map(|(id, g)| (id, g.label().to_string()))
        .collect()
}

/// Subword budget of a parallel corpus: sum of max(|src|, |tgt|).
#[pyfunction]
fn parallel_budget(pairs: Vec<(String, String)>, vocab: &Vocab) -> PyResult<usize> {
    let tokens = |s: &str| s.split_whitespace().map(str::to_string).collect();
    let pairs: Vec<ParallelPair> = pairs
        .iter()
        .map(|(s, t)| ParallelPair::new(tokens(s), tokens(t), &vocab.inner))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    Ok(sampler::parallel_budget(&pairs))
}

#[pymodule]
fn deep_pipeline(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KnowledgeBase>()?;
    m.add_class::<Gazetteer>()?;
    m.add_class::<Vocab>()?;
    m.add_class::<NoisedPair>()?;
    m.add_function(wrap_pyfunction!(g_dae, m)?)?;
    m.add_function(wrap_pyfunction!(f_deep, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(entity_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(parallel_budget, m)?)?;
    Ok(())
}
