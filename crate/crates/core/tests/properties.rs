use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use deep_core::eval::{corpus_bleu, entity_accuracy, Smoothing};
use deep_core::kb::{EntityRecord, KbSnapshot};
use deep_core::linker::{Gazetteer, Normalization};
use deep_core::noise::{f_deep, g_dae, NoiseParams};
use deep_core::seed::rng_for;
use deep_core::subword::{Segment, SubwordVocab, RESERVED};

fn records() -> impl Strategy<Value = Vec<EntityRecord>> {
    let form = prop::collection::vec("[abc]", 1..=3).prop_map(|t| t.join(" "));
    let entity = (prop::collection::vec(form.clone(), 0..3), prop::collection::vec(form, 0..3));
    prop::collection::vec(entity, 0..12).prop_map(|es| {
        es.into_iter()
            .enumerate()
            .map(|(i, (xx, en))| {
                let xx: Vec<&str> = xx.iter().map(String::as_str).collect();
                let en: Vec<&str> = en.iter().map(String::as_str).collect();
                EntityRecord::new(format!("Q{i}")).with("xx", &xx).with("en", &en)
            })
            .collect()
    })
}

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[abcd]", 0..25)
}

/// Every segmentation of `text` into vocab pieces, where a character no piece
/// covers becomes a single UNK (id 0). Returned as id sequences.
fn segmentations(vocab: &SubwordVocab, chars: &[char]) -> Vec<Vec<u32>> {
    if chars.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut any = false;
    for len in 1..=chars.len() {
        let piece: String = chars[..len].iter().collect();
        if let Some(id) = vocab.id(&piece).filter(|&id| id as usize >= RESERVED.len()) {
            any = true;
            for mut rest in segmentations(vocab, &chars[len..]) {
                rest.insert(0, id);
                out.push(rest);
            }
        }
    }
    if !any {
        for mut rest in segmentations(vocab, &chars[1..]) {
            rest.insert(0, 0);
            out.push(rest);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inverted_index_is_transpose(recs in records()) {
        let kb = KbSnapshot::from_records(recs, &["en", "xx"]).unwrap();
        for lang in ["en", "xx"] {
            let index = kb.index(lang).unwrap();
            let mut want: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for r in kb.records() {
                for f in r.surfaces.get(lang).into_iter().flatten() {
                    want.entry(f.clone()).or_default().insert(r.id.clone());
                }
            }
            prop_assert_eq!(index, &want);
        }
    }

    #[test]
    fn encode_round_trips_covered_text(text in "[abcxy]{0,30}") {
        let vocab = SubwordVocab::from_pieces(["a", "b", "c", "x", "y", "ab", "abc", "ca", "xy"]).unwrap();
        let ids = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&ids), text.clone());
        prop_assert!(ids.len() <= text.chars().count());
        prop_assert!(ids.iter().all(|&i| i as usize >= RESERVED.len()));
    }

    #[test]
    fn encode_is_lexicographically_longest_segmentation(text in "[abcdz]{0,10}") {
        let vocab = SubwordVocab::from_pieces(["a", "b", "ab", "abc", "bc", "cd", "d", "bcd"]).unwrap();
        let chars: Vec<char> = text.chars().collect();
        let len_of = |id: u32| if id == 0 { 1 } else { vocab.piece(id).unwrap().chars().count() };
        let best = segmentations(&vocab, &chars)
            .into_iter()
            .max_by_key(|s| s.iter().map(|&i| len_of(i)).collect::<Vec<_>>())
            .unwrap();
        prop_assert_eq!(vocab.encode(&text), best);
    }

    #[test]
    fn linker_spans_are_disjoint_and_maximal(recs in records(), toks in tokens()) {
        let kb = KbSnapshot::from_records(recs, &["en", "xx"]).unwrap();
        let gaz = Gazetteer::build(&kb, "xx", Normalization::Exact).unwrap();
        let index = kb.index("xx").unwrap();
        let spans = gaz.link(&toks);
        let mut last_end = 0;
        for s in &spans {
            prop_assert!(s.token_start >= last_end && s.token_start < s.token_end);
            let surface = toks[s.token_start..s.token_end].join(" ");
            prop_assert_eq!(&surface, &s.matched_surface);
            let ids = &index[&surface];
            prop_assert_eq!(ids.iter().next().unwrap(), &s.entity_id);
            for end in s.token_end + 1..=toks.len() {
                prop_assert!(!index.contains_key(&toks[s.token_start..end].join(" ")));
            }
            // Nothing starts in the gap before this span.
            for start in last_end..s.token_start {
                for end in start + 1..=toks.len() {
                    prop_assert!(!index.contains_key(&toks[start..end].join(" ")));
                }
            }
            last_end = s.token_end;
        }
    }

    #[test]
    fn bleu_in_range(
        pairs in prop::collection::vec((tokens(), tokens()), 1..20),
        smooth in any::<bool>(),
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let smoothing = if smooth { Smoothing::AddOne } else { Smoothing::None };
        let b = corpus_bleu(&hyps, &refs, smoothing).unwrap();
        prop_assert!((0.0..=100.0).contains(&b), "{}", b);
    }

    #[test]
    fn bleu_identity_is_100(refs in prop::collection::vec(prop::collection::vec("[a-h]", 4..20), 1..10)) {
        let b = corpus_bleu(&refs, &refs, Smoothing::None).unwrap();
        prop_assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn macro_accuracy_ignores_sentence_order(
        recs in records(),
        pairs in prop::collection::vec((tokens(), tokens()), 1..15),
        rot in 0usize..15,
    ) {
        let kb = KbSnapshot::from_records(recs, &["en", "xx"]).unwrap();
        let gaz = Gazetteer::build(&kb, "xx", Normalization::Exact).unwrap();
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = entity_accuracy(&hyps, &refs, &gaz).unwrap();
        let k = rot % hyps.len();
        let mut h2 = hyps.clone();
        let mut r2 = refs.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let b = entity_accuracy(&h2, &r2, &gaz).unwrap();
        prop_assert_eq!(&a.per_entity, &b.per_entity);
        prop_assert!((a.macro_accuracy - b.macro_accuracy).abs() < 1e-12);
    }

    #[test]
    fn noise_preserves_target_and_order_is_permutation(
        lens in prop::collection::vec(1usize..20, 1..6),
        seed in any::<u64>(),
        ratio in 0.05f64..=1.0,
    ) {
        let sentences: Vec<Vec<String>> = lens
            .iter()
            .enumerate()
            .map(|(s, &n)| (0..n).map(|w| format!("s{s}w{w}")).collect())
            .collect();
        let segment = Segment::from_tokens("p", sentences);
        let params = NoiseParams { mask_ratio: ratio, ..NoiseParams::with_seed(seed) };
        let ex = g_dae(&segment, &params, &mut rng_for(seed, "p")).unwrap();
        prop_assert_eq!(&ex.target_tokens, &segment.tokens());
        let mut order = ex.meta.order.clone();
        order.sort_unstable();
        prop_assert_eq!(order, (0..lens.len()).collect::<Vec<_>>());
        let n = segment.word_count();
        let budget = (ratio * n as f64 - 1e-9).ceil() as usize;
        prop_assert!(ex.masked_words() >= budget.min(n));
        let spans = ex.meta.spans.clone();
        prop_assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
    }

    #[test]
    fn f_deep_without_entities_equals_dae(
        lens in prop::collection::vec(1usize..20, 1..6),
        seed in any::<u64>(),
    ) {
        let sentences: Vec<Vec<String>> = lens
            .iter()
            .map(|&n| (0..n).map(|w| format!("w{w}")).collect())
            .collect();
        let segment = Segment::from_tokens("p", sentences);
        let kb = KbSnapshot::from_records(Vec::<EntityRecord>::new(), &["en", "xx"]).unwrap();
        let params = NoiseParams::with_seed(seed);
        let a = g_dae(&segment, &params, &mut rng_for(seed, "p")).unwrap();
        let b = f_deep(&segment, &[], &kb, "en", &params, &mut rng_for(seed, "p")).unwrap();
        prop_assert_eq!(a.source_tokens, b.source_tokens);
        prop_assert_eq!(b.meta.replaced, Some(Vec::new()));
    }
}
