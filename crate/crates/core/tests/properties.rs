//! Property tests for the invariants of the numeric, aggregation, loss and
//! evaluation layers.

mod common;

use common::rel_diff;
use milrep::aggregators::{
    aggregate_global, aggregate_local, aggregate_sentences, global_weights, GlobalAggregatorSpec, GlobalParams,
    LocalAggregatorSpec, SentenceAggregatorSpec,
};
use milrep::encoders::{encode_bag, flatten_params, init_model, unflatten_params, ModelDims};
use milrep::eval::{cnr, miou, retrieval_from_scores, retrieval_ks};
use milrep::json::to_string_sig17;
use milrep::numeric::{cosine_similarity, stable_logsumexp, stable_softmax, DenseMatrix, DenseVector};
use milrep::objective::{infonce, ObjectiveConfig, Temperature};
use milrep::scoring::{image_document_score, FeatureBag, ScoreFunctionConfig, ScoreVector};
use milrep::synthgen::split_corpus;
use milrep::trainer::{lr_at_step, sample_batch};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..=1.0, 1..=max_len)
}

fn rows(n: std::ops::RangeInclusive<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n)
}

fn local_spec() -> impl Strategy<Value = LocalAggregatorSpec> {
    prop_oneof![
        Just(LocalAggregatorSpec::Max),
        Just(LocalAggregatorSpec::Sum),
        Just(LocalAggregatorSpec::Avg),
        (0.05f64..20.0).prop_map(LocalAggregatorSpec::lse),
        Just(LocalAggregatorSpec::Nor),
        Just(LocalAggregatorSpec::nand()),
    ]
}

fn sentence_spec() -> impl Strategy<Value = SentenceAggregatorSpec> {
    prop_oneof![
        Just(SentenceAggregatorSpec::Avg),
        Just(SentenceAggregatorSpec::Sum),
        Just(SentenceAggregatorSpec::Max),
        (0.1f64..10.0).prop_map(|gamma_s| SentenceAggregatorSpec::Lse { gamma_s }),
    ]
}

/// Brute-force mIoU over the 41 thresholds `-1, -0.95, ..., 1`.
fn miou_brute(map: &[f64], in_box: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..=40 {
        let t = -1.0 + 0.05 * i as f64;
        let t = (t * 20.0).round() / 20.0;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (s, &b) in map.iter().zip(in_box) {
            let p = *s >= t;
            inter += usize::from(p && b);
            union += usize::from(p || b);
        }
        total += if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    }
    total / 41.0
}

proptest! {
    #[test]
    fn local_aggregators_ignore_order(spec in local_spec(), s in scores(16), seed in any::<u64>()) {
        let mut shuffled = s.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate_local(&spec, &s).unwrap();
        let b = aggregate_local(&spec, &shuffled).unwrap();
        prop_assert!(rel_diff(a, b) < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn sentence_aggregators_ignore_order(spec in sentence_spec(), s in scores(8)) {
        let mut rev = s.clone();
        rev.reverse();
        let a = aggregate_sentences(&spec, &s).unwrap();
        let b = aggregate_sentences(&spec, &rev).unwrap();
        prop_assert!(rel_diff(a, b) < 1e-12);
    }

    #[test]
    fn lse_lies_between_max_and_max_plus_log_n(s in scores(32), gamma in 0.01f64..100.0) {
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = stable_logsumexp(&s, gamma).unwrap();
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (s.len() as f64).ln() / gamma + 1e-12);
    }

    #[test]
    fn nor_and_nand_stay_in_range(s in scores(16)) {
        for spec in [LocalAggregatorSpec::Nor, LocalAggregatorSpec::nand()] {
            let v = aggregate_local(&spec, &s).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn nor_is_monotone(s in scores(8), i in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let k = i.index(s.len());
        let mut up = s.clone();
        up[k] = (up[k] + bump).min(1.0);
        let a = aggregate_local(&LocalAggregatorSpec::Nor, &s).unwrap();
        let b = aggregate_local(&LocalAggregatorSpec::Nor, &up).unwrap();
        prop_assert!(b >= a - 1e-15);
    }

    #[test]
    fn nor_saturates(s in scores(8), i in any::<prop::sample::Index>()) {
        let mut with_one = s.clone();
        let k = i.index(with_one.len());
        with_one[k] = 1.0;
        prop_assert_eq!(aggregate_local(&LocalAggregatorSpec::Nor, &with_one).unwrap(), 1.0);
        let all_low = vec![-1.0; s.len()];
        prop_assert_eq!(aggregate_local(&LocalAggregatorSpec::Nor, &all_low).unwrap(), -1.0);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20), gamma in 0.0f64..10.0) {
        let w = stable_softmax(&v, gamma).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(x in prop::collection::vec(-3.0f64..3.0, 4), y in prop::collection::vec(-3.0f64..3.0, 4), a in 0.1f64..10.0) {
        let xv = DenseVector::new(x.clone()).unwrap();
        let yv = DenseVector::new(y).unwrap();
        let c = cosine_similarity(&xv, &yv).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled = DenseVector::new(x.iter().map(|v| v * a).collect()).unwrap();
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            prop_assert!((cosine_similarity(&scaled, &yv).unwrap() - c).abs() < 1e-12);
        }
    }

    #[test]
    fn nl_weights_form_a_distribution(regions in rows(1..=6, 3), y in prop::collection::vec(-1.0f64..1.0, 3)) {
        let spec = GlobalAggregatorSpec::nl(std::f64::consts::E);
        let a = DenseMatrix::identity(3);
        let params = GlobalParams { nl_matrix: Some(&a), attention: None };
        let bag = FeatureBag::from_rows(&regions).unwrap();
        let h: Vec<f64> = regions.iter().map(|x| {
            cosine_similarity(&DenseVector::new(x.clone()).unwrap(), &DenseVector::new(y.clone()).unwrap()).unwrap()
        }).collect();
        let yv = DenseVector::new(y).unwrap();
        let w = global_weights(&spec, params, &bag, Some(&yv), Some(&h)).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if regions.len() == 1 {
            let pooled = aggregate_global(&spec, params, &bag, Some(&yv), Some(&h)).unwrap();
            prop_assert_eq!(pooled.as_slice(), regions[0].as_slice());
        }
    }

    #[test]
    fn global_score_ignores_sentence_scale(regions in rows(1..=5, 3), doc in rows(1..=3, 3), a in 0.1f64..10.0) {
        prop_assume!(doc.iter().all(|y| y.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let scaled: Vec<Vec<f64>> = doc.iter().map(|y| y.iter().map(|v| v * a).collect()).collect();
        let m = DenseMatrix::identity(3);
        let params = GlobalParams { nl_matrix: Some(&m), attention: None };
        let r = FeatureBag::from_rows(&regions).unwrap();
        for g in [GlobalAggregatorSpec::Avg, GlobalAggregatorSpec::nl(std::f64::consts::E)] {
            let cfg = ScoreFunctionConfig::global(g, SentenceAggregatorSpec::Avg);
            let s1 = image_document_score(&cfg, params, &r, &FeatureBag::from_rows(&doc).unwrap()).unwrap();
            let s2 = image_document_score(&cfg, params, &r, &FeatureBag::from_rows(&scaled).unwrap()).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn max_id_score_is_the_best_region_match(regions in rows(1..=6, 4), y in prop::collection::vec(-1.0f64..1.0, 4)) {
        let cfg = ScoreFunctionConfig::local(LocalAggregatorSpec::Max, SentenceAggregatorSpec::Id);
        let s = image_document_score(&cfg, GlobalParams::default(), &FeatureBag::from_rows(&regions).unwrap(), &FeatureBag::from_rows(std::slice::from_ref(&y)).unwrap()).unwrap();
        let yv = DenseVector::new(y).unwrap();
        let best = regions.iter()
            .map(|x| cosine_similarity(&DenseVector::new(x.clone()).unwrap(), &yv).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s, best);
    }

    #[test]
    fn infonce_is_positive_and_monotone(pos in -1.0f64..1.0, negs in scores(8), gamma in 0.5f64..30.0, bump in 1e-3f64..0.5) {
        let t = Temperature::from_gamma(gamma).unwrap();
        let base = infonce(&ScoreVector::new(pos, negs.clone()).unwrap(), &t);
        prop_assert!(base > 0.0);
        let better = infonce(&ScoreVector::new(pos + bump, negs.clone()).unwrap(), &t);
        prop_assert!(better <= base);
        let mut worse_negs = negs.clone();
        worse_negs[0] += bump;
        let worse = infonce(&ScoreVector::new(pos, worse_negs).unwrap(), &t);
        prop_assert!(worse >= base);
    }

    #[test]
    fn miou_matches_brute_force(map in prop::collection::vec(-1.2f64..1.2, 4..=16), seed in any::<u64>()) {
        use rand::Rng;
        let n = map.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.gen_range(1..n);
        let boxed = rand::seq::index::sample(&mut rng, n, size).into_vec();
        let mut in_box = vec![false; n];
        for &i in &boxed {
            in_box[i] = true;
        }
        let got = miou(&map, &boxed).unwrap();
        prop_assert!((got - miou_brute(&map, &in_box)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn grounding_metrics_ignore_box_preserving_relabels(map in prop::collection::vec(-1.0f64..1.0, 6..=12)) {
        let n = map.len();
        let boxed: Vec<usize> = vec![0, 1, 2];
        let mut relabeled = map.clone();
        relabeled.swap(0, 2);
        relabeled.swap(3, n - 1);
        prop_assert_eq!(miou(&map, &boxed).unwrap(), miou(&relabeled, &boxed).unwrap());
        prop_assert!((cnr(&map, &boxed).unwrap() - cnr(&relabeled, &boxed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn retrieval_ranks_are_a_permutation(q in 2usize..30, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Vec<f64>> = (0..q).map(|_| (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = retrieval_from_scores(&s).unwrap();
        for d in [&r.image_to_text, &r.text_to_image] {
            prop_assert!(d.ranks.iter().all(|&k| (1..=q).contains(&k)));
            let recalls: Vec<f64> = d.recall.iter().map(|&(_, v)| v).collect();
            prop_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
            let mut sorted = d.ranks.clone();
            sorted.sort_unstable();
            prop_assert_eq!(d.median_rank, sorted[(q - 1) / 2]);
        }
        let full = retrieval_from_scores(&s).unwrap();
        prop_assert_eq!(retrieval_ks(q).len(), full.image_to_text.recall.len());
    }

    #[test]
    fn retrieval_is_invariant_to_relabelling_cases(q in 2usize..20, seed in any::<u64>()) {
        use rand::Rng;
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Vec<f64>> = (0..q).map(|_| (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..q).collect();
        perm.shuffle(&mut rng);
        let p: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| s[i][j]).collect()).collect();
        let a = retrieval_from_scores(&s).unwrap();
        let b = retrieval_from_scores(&p).unwrap();
        prop_assert_eq!(a.image_to_text.median_rank, b.image_to_text.median_rank);
        prop_assert_eq!(&a.text_to_image.recall, &b.text_to_image.recall);
    }

    #[test]
    fn floats_round_trip_through_sig17(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let text = to_string_sig17(&x).unwrap();
        let back: f64 = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn flatten_round_trips(seed in any::<u64>(), hidden in 1usize..6, embed in 2usize..6) {
        let dims = ModelDims { region_input: 3, sentence_input: 4, hidden, embed };
        let model = init_model(&dims, &ObjectiveConfig::default(), 14.0, seed).unwrap();
        let flat = flatten_params(&model);
        prop_assert_eq!(unflatten_params(&model, &flat).unwrap(), model);
    }

    #[test]
    fn encoding_commutes_with_permutation(seed in any::<u64>(), obs in rows(1..=6, 3)) {
        let dims = ModelDims { region_input: 3, sentence_input: 3, hidden: 4, embed: 4 };
        let model = init_model(&dims, &ObjectiveConfig::default(), 14.0, seed).unwrap();
        let vecs: Vec<DenseVector> = obs.iter().map(|v| DenseVector::new(v.clone()).unwrap()).collect();
        let mut rev = vecs.clone();
        rev.reverse();
        let a = encode_bag(&model.region_encoder, &vecs).unwrap();
        let b = encode_bag(&model.region_encoder, &rev).unwrap();
        let mut a_rows: Vec<Vec<f64>> = a.rows().map(<[f64]>::to_vec).collect();
        a_rows.reverse();
        let b_rows: Vec<Vec<f64>> = b.rows().map(<[f64]>::to_vec).collect();
        prop_assert_eq!(a_rows, b_rows);
    }

    #[test]
    fn split_partitions_the_corpus(n in 2usize..200, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let expected = (fraction * n as f64).round() as usize;
        prop_assume!(expected > 0 && expected < n);
        let (train, test) = split_corpus(&items, fraction, seed).unwrap();
        prop_assert_eq!(train.len(), expected);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn schedule_stays_within_peak(t in 0usize..2000, warmup in 1usize..100, extra in 1usize..2000, peak in 1e-5f64..1.0) {
        let total = warmup + extra;
        let lr = lr_at_step(t.min(total), peak, warmup, total).unwrap();
        prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn batches_hold_distinct_documents(docs in 2usize..60, seed in any::<u64>(), m in 1usize..5) {
        let counts = vec![3usize; docs];
        let b = docs.clamp(2, 8);
        let batch = sample_batch(&counts, b, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut ids = batch.documents.clone();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), b);
        prop_assert!(batch.sentences.iter().all(|s| s.len() == m && s.iter().all(|&i| i < 3)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn document_score_ignores_region_and_sentence_order(
        spec in local_spec(),
        s in sentence_spec(),
        regions in rows(1..=6, 4),
        doc in rows(1..=3, 4),
        picks in subsequence((0..6usize).collect::<Vec<_>>(), 0..=6),
    ) {
        let mut perm: Vec<usize> = picks.into_iter().filter(|&i| i < regions.len()).collect();
        for i in 0..regions.len() {
            if !perm.contains(&i) {
                perm.push(i);
            }
        }
        let permuted: Vec<Vec<f64>> = perm.iter().rev().map(|&i| regions[i].clone()).collect();
        let mut doc_rev = doc.clone();
        doc_rev.reverse();
        let cfg = ScoreFunctionConfig::local(spec, s);
        let a = image_document_score(&cfg, GlobalParams::default(), &FeatureBag::from_rows(&regions).unwrap(), &FeatureBag::from_rows(&doc).unwrap()).unwrap();
        let b = image_document_score(&cfg, GlobalParams::default(), &FeatureBag::from_rows(&permuted).unwrap(), &FeatureBag::from_rows(&doc_rev).unwrap()).unwrap();
        prop_assert!(rel_diff(a, b) < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn random_scores_give_a_middling_median_rank() {
    use rand::Rng;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Vec<f64>> = (0..100).map(|_| (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = retrieval_from_scores(&s).unwrap();
        for medr in [r.image_to_text.median_rank, r.text_to_image.median_rank] {
            assert!((35..=65).contains(&medr), "seed {seed}: MedR {medr}");
        }
    }
}
