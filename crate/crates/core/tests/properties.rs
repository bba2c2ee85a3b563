// SPDX-License-Identifier: MIT OR Apache-2.0

use ctxdetox::baselines::discriminative_loss;
use ctxdetox::corpus::{balance_with_oversampling, stance_oracle, LexiconSizes, Vocab};
use ctxdetox::eval::{shift_from_means, ShiftMode};
use ctxdetox::prefix::{combine, MetaPrefixModel, PrefixConfig};
use ctxdetox::tensor::Mat;
use ctxdetox::tinylm::{
    filtered_distribution, init_lm, run, Forward, GenConfig, KvPrefix, LmConfig, LmParams,
};
use ctxdetox::training::{
    context_contrastive_loss, stance_contrastive_loss, LsReduction, TrainExample,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_lm(seed: u64) -> LmParams {
    let cfg = LmConfig {
        n_layers: 2,
        hidden: 16,
        n_heads: 2,
        vocab: 20,
        max_seq: 24,
        ff_mult: 2,
        seed,
    };
    init_lm(&cfg).unwrap().frozen()
}

fn scores() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0..1.0f64).prop_map(|a| {
        let s: f64 = a.iter().sum::<f64>() + 1e-9;
        a.map(|x| x / s)
    })
}

proptest! {
    #[test]
    fn shift_is_symmetric_and_zero_on_identity(a in scores(), b in scores()) {
        for mode in [ShiftMode::FourWay, ShiftMode::ThreeWay] {
            prop_assert_eq!(shift_from_means(a, a, mode), 0.0);
            prop_assert!((shift_from_means(a, b, mode) - shift_from_means(b, a, mode)).abs() < 1e-15);
        }
    }

    #[test]
    fn three_way_never_exceeds_four_way(a in scores(), b in scores()) {
        let three = shift_from_means(a, b, ShiftMode::ThreeWay);
        let four = shift_from_means(a, b, ShiftMode::FourWay);
        prop_assert!(three <= four + 1e-12);
        prop_assert!(four <= 2.0 + 1e-9);
    }

    #[test]
    fn discriminative_loss_is_a_cross_entropy(x in 0.0..50.0f64, y in 0.0..50.0f64, cat: bool) {
        let l = discriminative_loss([x, y], cat);
        prop_assert!(l >= 0.0);
        let other = discriminative_loss([x, y], !cat);
        prop_assert!(((-l).exp() + (-other).exp() - 1.0).abs() < 1e-9);
        prop_assert!((discriminative_loss([x, x], cat) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn combine_is_elementwise_addition(data in prop::collection::vec(-5.0..5.0f64, 12), other in prop::collection::vec(-5.0..5.0f64, 12)) {
        let a = Mat::from_vec(3, 4, data.clone()).unwrap();
        let b = Mat::from_vec(3, 4, other.clone()).unwrap();
        let c = combine(&a, &b).unwrap();
        for ((x, y), z) in data.iter().zip(&other).zip(c.as_slice()) {
            prop_assert_eq!(x + y, *z);
        }
        prop_assert!(combine(&a, &Mat::zeros(4, 3)).is_err());
    }

    #[test]
    fn filtered_distribution_is_normalized(
        logits in prop::collection::vec(-8.0..8.0f64, 2..40),
        top_k in 1usize..60,
        top_p in 0.05..1.0f64,
        temperature in 0.2..3.0f64,
    ) {
        let gen = GenConfig { top_k, top_p, temperature, ..GenConfig::default() };
        let dist = filtered_distribution(&logits, &gen);
        prop_assert!(!dist.is_empty());
        prop_assert!(dist.len() <= top_k);
        prop_assert!((dist.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(dist.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn stance_scores_form_a_distribution(seq in prop::collection::vec(0u32..120, 0..12)) {
        let vocab = Vocab::build(&LexiconSizes::default(), 6).unwrap();
        let s = stance_oracle(&seq, &vocab).unwrap();
        let a = s.as_array();
        prop_assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oversampling_equalizes_classes(n0 in 1usize..30, n1 in 1usize..30, seed: u64) {
        let items: Vec<(usize, bool)> = (0..n0).map(|i| (i, false)).chain((0..n1).map(|i| (i, true))).collect();
        let out = balance_with_oversampling(&items, |x| x.1, &[false, true], seed).unwrap();
        let k = out.iter().filter(|x| x.1).count();
        prop_assert_eq!(k, n0.max(n1));
        prop_assert_eq!(out.len() - k, n0.max(n1));
        for x in &items {
            prop_assert!(out.contains(x));
        }
    }

    #[test]
    fn flat_and_structured_prefix_views_are_inverse(m in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = Mat::randn(m, 2 * 2 * 8, 1.0, &mut rng);
        let kv = KvPrefix::from_flat(&flat, 2, 8).unwrap();
        prop_assert_eq!(kv.len(), m);
        prop_assert_eq!(kv.to_flat(), flat);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn injected_kv_matches_concatenation(
        seed in 0u64..1000,
        segment in prop::collection::vec(0u32..20, 1..8),
        input in prop::collection::vec(0u32..20, 1..8),
    ) {
        let lm = toy_lm(seed);
        let seg = run(&lm, &segment, Forward::default()).unwrap();
        let cache = seg.own_kv();
        let tail = run(&lm, &input, Forward { prefix: Some(&cache), position_offset: segment.len(), ..Forward::default() }).unwrap();
        let mut joined = segment.clone();
        joined.extend(&input);
        let full = run(&lm, &joined, Forward::default()).unwrap();
        let expect = full.logits.unwrap().slice_rows(segment.len(), joined.len());
        prop_assert!(tail.logits.unwrap().max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn margin_losses_are_bounded_hinges(seed in 0u64..1000, margin in 0.05..3.0f64, flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..6)) {
        let lm = toy_lm(seed);
        let pc = PrefixConfig { len: 2, hidden: 4, init_std: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let meta = MetaPrefixModel::init(&pc, &lm.config, 0.3, &mut rng);
        let examples: Vec<TrainExample> = flags
            .iter()
            .enumerate()
            .map(|(i, &(t_c, s_r))| TrainExample {
                ctx: vec![1, 4 + i as u32, 9 + u32::from(t_c), 3],
                tgt: vec![12, 2],
                t_c,
                t_r: false,
                s_r,
            })
            .collect();
        let batch: Vec<&TrainExample> = examples.iter().collect();
        let ls = stance_contrastive_loss(&lm, &meta, &batch, margin, LsReduction::BatchMean).unwrap();
        prop_assert!((0.0..=margin * margin).contains(&ls));
        match context_contrastive_loss(&lm, &meta, &batch, margin).unwrap() {
            Some(lc) => prop_assert!((0.0..=margin * margin).contains(&lc)),
            None => prop_assert!(flags.iter().all(|f| f.0) || flags.iter().all(|f| !f.0)),
        }
        if flags.iter().all(|f| !f.0) {
            prop_assert_eq!(ls, 0.0);
        }
    }
}
