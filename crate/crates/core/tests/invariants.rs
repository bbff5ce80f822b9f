use fedunlearn::fedcore::{aggregate, Update};
use fedunlearn::ledger::{verify_blocks, verify_encoded, ChainState, ChainVerdict, TxKind};
use fedunlearn::tinylm::{LoraAdapter, LoraConfig, Model, ModelConfig, Weights};
use proptest::prelude::*;

fn updates(max_clients: usize, max_dim: usize) -> impl Strategy<Value = Vec<Update>> {
    (1..=max_clients, 1..=max_dim).prop_flat_map(|(n, dim)| {
        prop::collection::vec((prop::collection::vec(-10.0..10.0f64, dim), 1u64..500), n).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (delta, sample_count))| Update {
                    client: format!("client-{i}"),
                    delta,
                    sample_count,
                })
                .collect()
        })
    })
}

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 8,
        max_len: 8,
        seed,
        ..ModelConfig::default()
    }
}

proptest! {
    #[test]
    fn aggregation_ignores_submission_order(us in updates(8, 16), rot in 0usize..8) {
        let mut shuffled = us.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(aggregate(&us).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn aggregation_is_linear(us in updates(6, 12), c in -4.0..4.0f64) {
        let base = aggregate(&us).unwrap();
        let scaled: Vec<Update> = us
            .iter()
            .map(|u| Update { delta: u.delta.iter().map(|v| c * v).collect(), ..u.clone() })
            .collect();
        let doubled: Vec<Update> = us
            .iter()
            .map(|u| Update { delta: u.delta.iter().map(|v| v + v).collect(), ..u.clone() })
            .collect();
        for (x, y) in aggregate(&scaled).unwrap().iter().zip(&base) {
            prop_assert!((x - c * y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        // Doubling is exact in binary floating point.
        for (x, y) in aggregate(&doubled).unwrap().iter().zip(&base) {
            prop_assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn identical_updates_aggregate_to_themselves(delta in prop::collection::vec(-5.0..5.0f64, 1..10), n in 1usize..6) {
        let us: Vec<Update> = (0..n)
            .map(|i| Update { client: format!("c{i}"), delta: delta.clone(), sample_count: 1 + i as u64 })
            .collect();
        for (x, y) in aggregate(&us).unwrap().iter().zip(&delta) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_b_adapter_is_neutral(seed in 0u64..1000, r in 1usize..=8, alpha in 0.5..16.0f64, tokens in prop::collection::vec(0u32..256, 1..8)) {
        let w = Weights::init(small_model(seed)).unwrap();
        let ad = LoraAdapter::init(LoraConfig::new(r, alpha, 0.0), 8, seed).unwrap();
        let plain = Model::new(w.clone(), None).unwrap();
        let with = Model::new(w.clone(), Some(ad.clone())).unwrap();
        prop_assert_eq!(plain.probs(&tokens).unwrap(), with.probs(&tokens).unwrap());
        prop_assert_eq!(ad.merge_into(&w).unwrap().to_bytes(), w.to_bytes());
    }

    #[test]
    fn merged_and_unmerged_agree(seed in 0u64..1000, vals in prop::collection::vec(-0.5..0.5f64, 64), tokens in prop::collection::vec(0u32..256, 1..8)) {
        let w = Weights::init(small_model(seed)).unwrap();
        let mut ad = LoraAdapter::init(LoraConfig::new(2, 4.0, 0.0), 8, seed).unwrap();
        ad.set_flat(&vals).unwrap();
        let m = Model::new(w, Some(ad)).unwrap();
        let merged = Model::new(m.merged_weights().unwrap(), None).unwrap();
        for (x, y) in m.probs(&tokens).unwrap().iter().zip(merged.probs(&tokens).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

fn chain(sizes: &[usize], payload_len: usize) -> ChainState {
    let mut c = ChainState::new();
    let mut t = 0.0;
    for (b, &n) in sizes.iter().enumerate() {
        for k in 0..n {
            t += 0.5;
            let payload: Vec<u8> = (0..payload_len).map(|j| (b * 31 + k * 7 + j) as u8).collect();
            c.submit_transaction(TxKind::ParameterSubmission, &format!("client-{k}"), payload, t)
                .unwrap();
        }
        c.seal_block().unwrap();
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn untampered_chains_verify(sizes in prop::collection::vec(1usize..4, 1..6), len in 1usize..40) {
        let c = chain(&sizes, len);
        prop_assert_eq!(c.verify_chain(), ChainVerdict::Valid);
        let images: Vec<Vec<u8>> = c.blocks().iter().map(|b| b.to_bytes()).collect();
        prop_assert_eq!(verify_encoded(&images), ChainVerdict::Valid);
    }

    #[test]
    fn any_single_byte_tamper_is_located(
        sizes in prop::collection::vec(1usize..4, 1..6),
        len in 1usize..40,
        block in any::<prop::sample::Index>(),
        byte in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let c = chain(&sizes, len);
        let mut images: Vec<Vec<u8>> = c.blocks().iter().map(|b| b.to_bytes()).collect();
        let bi = block.index(images.len());
        let pos = byte.index(images[bi].len());
        images[bi][pos] ^= flip;
        prop_assert_eq!(verify_encoded(&images), ChainVerdict::Invalid(bi as u64));
    }

    #[test]
    fn dropped_or_reordered_blocks_are_located(sizes in prop::collection::vec(1usize..3, 3..6), at in any::<prop::sample::Index>()) {
        let c = chain(&sizes, 8);
        let i = at.index(c.blocks().len() - 1);
        let mut dropped = c.blocks().to_vec();
        dropped.remove(i);
        prop_assert_eq!(verify_blocks(&dropped), ChainVerdict::Invalid(i as u64));
        let mut swapped = c.blocks().to_vec();
        swapped.swap(i, i + 1);
        prop_assert_eq!(verify_blocks(&swapped), ChainVerdict::Invalid(i as u64));
    }
}
