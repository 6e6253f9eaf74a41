//! Subword vocabulary, greedy longest-match encoding and segment packing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::LinkedSpan;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const MASK: &str = "<mask>";
pub const TASK_MT: &str = "[MT]";
pub const TASK_DAE: &str = "[DAE]";
pub const TASK_DEEP: &str = "[DEEP]";

/// Reserved symbols, in the order they must head a vocabulary file.
pub const RESERVED: [&str; 6] = [UNK, BOS, MASK, TASK_MT, TASK_DAE, TASK_DEEP];

/// Maximum subwords per packed segment.
pub const MAX_SEGMENT_SUBWORDS: usize = 512;

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl SubwordVocab {
    /// Builds a vocabulary from ordinary pieces; the reserved header is prepended.
    pub fn from_pieces<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(pieces.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(pieces: Vec<String>) -> Result<Self> {
        for (i, expected) in RESERVED.iter().enumerate() {
            match pieces.get(i) {
                Some(p) if p == expected => {}
                Some(p) => {
                    return Err(Error::Vocab(format!(
                        "line {}: expected reserved symbol `{expected}`, found `{p}`",
                        i + 1
                    )))
                }
                None => return Err(Error::Vocab(format!("missing reserved symbol `{expected}`"))),
            }
        }
        let mut ids = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Vocab(format!("line {}: empty piece", i + 1)));
            }
            if ids.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("line {}: duplicate piece `{p}`", i + 1)));
            }
            if i >= RESERVED.len() {
                max_piece_chars = max_piece_chars.max(p.chars().count());
            }
        }
        Ok(SubwordVocab {
            pieces,
            ids,
            max_piece_chars,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// File form: one piece per line, reserved header first.
    pub fn to_file_string(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn mask_id(&self) -> u32 {
        2
    }

    /// Greedy longest match from the left. Reserved symbols never match text;
    /// an uncovered character becomes one UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < n_chars {
            let longest = (1..=self.max_piece_chars.min(n_chars - pos)).rev().find_map(|len| {
                let piece = &text[bounds[pos]..bounds[pos + len]];
                match self.ids.get(piece) {
                    Some(&id) if id as usize >= RESERVED.len() => Some((id, len)),
                    _ => None,
                }
            });
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(self.unk_id());
                    pos += 1;
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.piece(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .concat()
    }

    pub fn count(&self, word: &str) -> usize {
        self.encode(word).len()
    }
}

/// A sentence-split input document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Whitespace-tokenized on read; written back as space-joined text.
    #[serde(with = "token_lines")]
    pub sentences: Vec<Vec<String>>,
}

impl Document {
    pub fn from_text(doc_id: impl Into<String>, sentences: &[&str]) -> Self {
        Document {
            doc_id: doc_id.into(),
            sentences: sentences
                .iter()
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .collect(),
        }
    }
}

mod token_lines {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<String>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|toks| toks.join(" ")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<String>>, D::Error> {
        let lines = Vec::<String>::deserialize(d)?;
        Ok(lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    }
}

/// A packed monolingual training unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(rename = "subwords")]
    pub total_subwords: usize,
    /// Subword count of each word, parallel to `sentences`.
    pub word_subwords: Vec<Vec<usize>>,
    pub doc_id: String,
    /// Index of the first sentence within the source document.
    pub first_sentence: usize,
    #[serde(default)]
    pub truncated: bool,
}

impl Segment {
    /// Builds a segment with one subword per word, for tests and ad-hoc use.
    pub fn from_tokens(segment_id: impl Into<String>, sentences: Vec<Vec<String>>) -> Self {
        let word_subwords: Vec<Vec<usize>> = sentences.iter().map(|s| vec![1; s.len()]).collect();
        let total_subwords = word_subwords.iter().flatten().sum();
        let segment_id = segment_id.into();
        Segment {
            doc_id: segment_id.clone(),
            segment_id,
            sentences,
            total_subwords,
            word_subwords,
            first_sentence: 0,
            truncated: false,
        }
    }

    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }

    /// Maps document-level spans onto this segment's sentences, dropping spans
    /// that fall outside it or into truncated words.
    pub fn project_spans(&self, doc_spans: &[LinkedSpan]) -> Vec<LinkedSpan> {
        let range = self.first_sentence..self.first_sentence + self.sentences.len();
        doc_spans
            .iter()
            .filter(|s| range.contains(&s.sentence_index))
            .filter_map(|s| {
                let local = s.sentence_index - self.first_sentence;
                (s.token_end <= self.sentences[local].len()).then(|| LinkedSpan {
                    sentence_index: local,
                    ..s.clone()
                })
            })
            .collect()
    }
}

/// Packs one document. Sentences are appended greedily; a sentence that does
/// not fit starts a new segment, and a sentence longer than `max_subwords` is
/// cut at a word boundary and flagged.
pub fn pack_document(doc: &Document, vocab: &SubwordVocab, max_subwords: usize) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    for (si, sentence) in doc.sentences.iter().enumerate() {
        let mut words = sentence.clone();
        let mut counts: Vec<usize> = words.iter().map(|w| vocab.count(w)).collect();
        let mut truncated = false;
        if counts.iter().sum::<usize>() > max_subwords {
            let mut acc = 0;
            let keep = counts
                .iter()
                .take_while(|&&c| {
                    acc += c;
                    acc <= max_subwords
                })
                .count();
            words.truncate(keep);
            counts.truncate(keep);
            truncated = true;
        }
        if words.is_empty() {
            continue;
        }
        let size: usize = counts.iter().sum();
        // Sentence indices inside a segment stay contiguous for span projection.
        let fits = current.as_ref().is_some_and(|seg| {
            seg.total_subwords + size <= max_subwords && seg.first_sentence + seg.sentences.len() == si
        });
        if !fits {
            segments.extend(current.take());
            current = Some(Segment {
                segment_id: format!("{}#{}", doc.doc_id, segments.len()),
                sentences: Vec::new(),
                total_subwords: 0,
                word_subwords: Vec::new(),
                doc_id: doc.doc_id.clone(),
                first_sentence: si,
                truncated: false,
            });
        }
        let seg = current.as_mut().unwrap();
        seg.sentences.push(words);
        seg.word_subwords.push(counts);
        seg.total_subwords += size;
        seg.truncated |= truncated;
    }
    segments.extend(current);
    segments
}

pub fn pack_segments<'a>(
    docs: impl IntoIterator<Item = &'a Document>,
    vocab: &SubwordVocab,
    max_subwords: usize,
) -> Vec<Segment> {
    docs.into_iter()
        .flat_map(|d| pack_document(d, vocab, max_subwords))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc_vocab() -> SubwordVocab {
        SubwordVocab::from_pieces(["ab", "a", "b", "c", " "]).unwrap()
    }

    #[test]
    fn encode_basic() {
        let v = abc_vocab();
        assert!(v.encode("").is_empty());
        let ids = v.encode("aab");
        let pieces: Vec<_> = ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, ["a", "ab"]);
        assert_eq!(v.decode(&v.encode("ab c ba")), "ab c ba");
    }

    #[test]
    fn unknown_chars_and_reserved() {
        let v = abc_vocab();
        assert_eq!(v.encode("aéb"), vec![v.id("a").unwrap(), v.unk_id(), v.id("b").unwrap()]);
        // Reserved strings in text are matched character by character, not as symbols.
        assert!(!v.encode("<mask>").contains(&v.mask_id()));
    }

    #[test]
    fn vocab_file_header() {
        let v = abc_vocab();
        let text = v.to_file_string();
        assert!(text.starts_with("<unk>\n<s>\n<mask>\n[MT]\n[DAE]\n[DEEP]\n"));
        let back = SubwordVocab::parse(&text).unwrap();
        assert_eq!(back.len(), v.len());
        assert!(SubwordVocab::parse("<unk>\n<s>\n").is_err());
        assert!(SubwordVocab::parse("x\n<s>\n<mask>\n[MT]\n[DAE]\n[DEEP]\n").is_err());
        assert!(SubwordVocab::from_pieces(["a", "a"]).is_err());
        assert!(SubwordVocab::from_pieces(["[MT]"]).is_err());
    }

    fn word_vocab() -> SubwordVocab {
        // Every lowercase letter is one piece, so word cost = char count.
        SubwordVocab::from_pieces(('a'..='z').map(|c| c.to_string())).unwrap()
    }

    fn sentence_of(subwords: usize) -> String {
        // 20-char words plus a remainder word.
        let mut words = vec!["a".repeat(20); subwords / 20];
        if subwords % 20 > 0 {
            words.push("b".repeat(subwords % 20));
        }
        words.join(" ")
    }

    #[test]
    fn packs_greedily() {
        let v = word_vocab();
        let s = sentence_of(200);
        let doc = Document::from_text("d", &[&s, &s, &s]);
        let segs = pack_document(&doc, &v, MAX_SEGMENT_SUBWORDS);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].total_subwords, 400);
        assert_eq!(segs[0].sentences.len(), 2);
        assert_eq!(segs[1].total_subwords, 200);
        assert_eq!(segs[1].first_sentence, 2);
        assert_eq!(segs[1].segment_id, "d#1");
    }

    #[test]
    fn single_short_sentence() {
        let v = word_vocab();
        let doc = Document::from_text("d", &["abcde abcde"]);
        let segs = pack_document(&doc, &v, MAX_SEGMENT_SUBWORDS);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].total_subwords, 10);
        assert!(!segs[0].truncated);
    }

    #[test]
    fn overlong_sentence_truncated_at_word_boundary() {
        let v = word_vocab();
        let long = sentence_of(600);
        let doc = Document::from_text("d", &["abcdefghij abcdefghij", &long, "de"]);
        let segs = pack_document(&doc, &v, MAX_SEGMENT_SUBWORDS);
        assert_eq!(segs.len(), 2);
        assert!(segs[1].truncated);
        assert_eq!(segs[1].total_subwords, 502);
        assert_eq!(segs[1].sentences[0].len(), 25);
        assert!(segs.iter().all(|s| s.total_subwords <= MAX_SEGMENT_SUBWORDS));
    }

    #[test]
    fn documents_never_share_segments() {
        let v = word_vocab();
        let docs = vec![Document::from_text("a", &["ab"]), Document::from_text("b", &["cd"])];
        let segs = pack_segments(&docs, &v, MAX_SEGMENT_SUBWORDS);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].doc_id, "b");
    }

    #[test]
    fn project_spans_shifts_and_drops() {
        let v = word_vocab();
        let s = sentence_of(511);
        let doc = Document::from_text("d", &["x y", &s, "p q r"]);
        let segs = pack_document(&doc, &v, MAX_SEGMENT_SUBWORDS);
        let span = |sent, start, end| LinkedSpan {
            sentence_index: sent,
            token_start: start,
            token_end: end,
            entity_id: "E".into(),
            matched_surface: "e".into(),
        };
        let doc_spans = vec![span(0, 0, 1), span(2, 1, 3)];
        assert_eq!(segs.len(), 3);
        assert!(segs[1].project_spans(&doc_spans).is_empty());
        let last = segs.last().unwrap();
        let projected = last.project_spans(&doc_spans);
        assert_eq!(projected.len(), 1);
        assert_eq!(projected[0].sentence_index, last.sentences.len() - 1);
    }
}
