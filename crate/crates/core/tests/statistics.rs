use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

use deep_core::noise::{mask_spans, permute_sentences, NoiseParams};
use deep_core::sampler::sample_mono_subset;
use deep_core::seed::rng_for;
use deep_core::subword::Segment;

fn chi_square_p(observed: &[u64], expected: f64) -> f64 {
    let stat: f64 = observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn sentence_permutation_is_uniform() {
    let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let n = 48_000u64;
    for seed in 0..n {
        let (_, order) = permute_sentences(&[0, 1, 2, 3], 1.0, &mut rng_for(seed, "perm"));
        *counts.entry(order).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let observed: Vec<u64> = counts.values().copied().collect();
    let p = chi_square_p(&observed, n as f64 / 24.0);
    assert!(p > 1e-3, "p = {p}");
}

#[test]
fn permute_prob_zero_keeps_order() {
    for seed in 0..100 {
        let (out, order) = permute_sentences(&["a", "b", "c"], 0.0, &mut rng_for(seed, "perm"));
        assert_eq!(out, ["a", "b", "c"]);
        assert_eq!(order, [0, 1, 2]);
    }
}

#[test]
fn mono_subset_inclusion_is_uniform() {
    // 50 equal segments of 10 subwords, budget 100: every draw takes exactly 10.
    let sizes = vec![10usize; 50];
    let runs = 20_000;
    let mut hits = vec![0u64; sizes.len()];
    for seed in 0..runs {
        let s = sample_mono_subset(&sizes, 100, seed, 0);
        assert_eq!(s.indices.len(), 10);
        let mut seen = s.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10, "drawn with replacement");
        for i in s.indices {
            hits[i] += 1;
        }
    }
    let p = 10.0 / 50.0;
    let mean = runs as f64 * p;
    let sd = (runs as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        assert!((h as f64 - mean).abs() <= 3.5 * sd, "segment {i}: {h} vs {mean}");
    }
}

#[test]
fn mono_subset_differs_by_epoch() {
    let sizes = vec![7usize; 100];
    let a = sample_mono_subset(&sizes, 70, 5, 0);
    let b = sample_mono_subset(&sizes, 70, 5, 1);
    assert_ne!(a.indices, b.indices);
    assert_eq!(a, sample_mono_subset(&sizes, 70, 5, 0));
}

#[test]
fn span_lengths_follow_clipped_poisson() {
    // One long sentence so clipping at sentence ends is rare; the first span of
    // each run is a fresh draw of max(1, Poisson(lambda)).
    let segment = Segment::from_tokens("s", vec![(0..1000).map(|i| format!("w{i}")).collect()]);
    let params = NoiseParams::default();
    let runs = 20_000u64;
    let mut observed = BTreeMap::new();
    for seed in 0..runs {
        let out = mask_spans(&segment, 1, &Default::default(), &params, &mut rng_for(seed, "span")).unwrap();
        let (s, e) = out.spans[0];
        *observed.entry((e - s).min(9)).or_insert(0u64) += 1;
    }
    let poisson = Poisson::new(params.lambda).unwrap();
    // Bucket 1 absorbs k = 0, bucket 9 everything from 9 up.
    let mut probs: Vec<f64> = (1..9).map(|k| poisson.pmf(k)).collect();
    probs[0] += poisson.pmf(0);
    probs.push(1.0 - probs.iter().sum::<f64>());
    let stat: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let e = p * runs as f64;
            let o = *observed.get(&(i + 1)).unwrap_or(&0) as f64;
            (o - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((probs.len() - 1) as f64).unwrap();
    assert!(1.0 - dist.cdf(stat) > 1e-4, "chi2 {stat}");
}
