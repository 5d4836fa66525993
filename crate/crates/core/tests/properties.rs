use lightmt_core::quant::{pack, qgemm, quantize_activations_per_row, quantize_weights, unpack};
use lightmt_core::tensor::{softmax, Tensor};
use lightmt_core::text::bpe::{decode, learn_merges, BpeVersion};
use lightmt_core::text::parallel::{run_parallel, ChunkPlan};
use lightmt_core::text::tokenize::{detokenize, tokenize};
use lightmt_core::{Model, ModelConfig, NormVariant, TokenId};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4.0f32..4.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unpack_inverts_pack(w in matrix(70, 40), panel in 1usize..12, block in 1usize..40) {
        let qm = quantize_weights(&w).unwrap();
        let packed = pack(&qm, panel, block).unwrap();
        prop_assert_eq!(packed.payload().len(), qm.rows() * qm.cols());
        prop_assert_eq!(unpack(&packed), qm);
    }

    #[test]
    fn qgemm_ignores_packing_geometry(
        w in matrix(40, 24),
        rows in 1usize..9,
        seed in any::<u64>(),
        panel in 1usize..12,
        block in 1usize..40,
    ) {
        let k = w.rows();
        let mut s = seed | 1;
        let x = Tensor::<f32>::from_fn(vec![rows, k], |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f32 / 100.0 - 5.0
        });
        let qa = quantize_activations_per_row(&x).unwrap();
        let qm = quantize_weights(&w).unwrap();
        let reference: Tensor<f64> = qgemm(&qa, &pack(&qm, 8, 32).unwrap()).unwrap();
        let other: Tensor<f64> = qgemm(&qa, &pack(&qm, panel, block).unwrap()).unwrap();
        prop_assert_eq!(reference, other);
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 50)) {
        let p = softmax(&x.cast::<f64>(), 1).unwrap();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenize_is_idempotent(line in "[ a-zA-Z0-9.,;:!?'\"()\\-]{0,60}") {
        let once = tokenize(&line);
        prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
        prop_assert!(once.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
    }

    #[test]
    fn detokenize_keeps_every_token_in_order(line in "[ a-z.,!?()]{0,60}") {
        let tokens = tokenize(&line);
        let joined: String = tokens.concat();
        let restored: String = detokenize(&tokens).chars().filter(|c| !c.is_whitespace()).collect();
        prop_assert_eq!(restored, joined);
    }

    #[test]
    fn bpe_decode_inverts_encode(
        training in prop::collection::vec("[a-e]{1,8}", 1..30),
        words in prop::collection::vec("[a-g]{1,10}", 0..12),
        merges in 0usize..40,
        v02 in any::<bool>(),
    ) {
        let version = if v02 { BpeVersion::V02 } else { BpeVersion::V01 };
        let codec = learn_merges(training.iter().map(String::as_str), merges, version);
        let pieces = codec.encode(&words);
        prop_assert!(pieces.len() >= words.len());
        prop_assert_eq!(decode(&pieces), words);
    }

    #[test]
    fn parallel_stage_preserves_order(n in 0usize..300, chunk in 1usize..50, workers in 1usize..9) {
        let items: Vec<usize> = (0..n).collect();
        let plan = ChunkPlan::new(chunk, workers).unwrap();
        let out = run_parallel(&items, &plan, |c: &[usize]| Ok(c.iter().map(|i| i * 3).collect())).unwrap();
        prop_assert_eq!(out, (0..n).map(|i| i * 3).collect::<Vec<_>>());
    }
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 2,
        d_model: 16,
        n_heads_enc: 2,
        n_heads_dec: 2,
        ffn_dim_enc: 32,
        ffn_dim_dec: 16,
        vocab_size: vocab,
        max_positions: 32,
        norm_variant: NormVariant::L2,
        shared_embeddings: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Reordering a cache and stepping equals stepping the reordered batch
    /// built from scratch.
    #[test]
    fn cache_reorder_matches_permuted_batch(
        seed in 0u64..1000,
        picks in prop::collection::vec(0usize..3, 1..6),
        history in prop::collection::vec(4u32..20, 3),
    ) {
        let model = Model::<f64>::random(tiny_config(20), seed).unwrap();
        let sources: Vec<Vec<TokenId>> = vec![vec![5, 6, 7], vec![8], vec![9, 10]];
        let enc = model.encode(&sources).unwrap();
        let mut cache = model.init_cross_cache(&enc).unwrap();
        model.decode_step(&mut cache, &[2, 2, 2]).unwrap();
        model.decode_step(&mut cache, &history).unwrap();
        cache.reorder(&picks);
        let next: Vec<TokenId> = picks.iter().map(|&r| 11 + r as TokenId).collect();
        let got = model.decode_step(&mut cache, &next).unwrap();

        let permuted: Vec<Vec<TokenId>> = picks.iter().map(|&r| sources[r].clone()).collect();
        let enc2 = model.encode(&permuted).unwrap();
        let mut fresh = model.init_cross_cache(&enc2).unwrap();
        model.decode_step(&mut fresh, &vec![2; picks.len()]).unwrap();
        let hist: Vec<TokenId> = picks.iter().map(|&r| history[r]).collect();
        model.decode_step(&mut fresh, &hist).unwrap();
        let want = model.decode_step(&mut fresh, &next).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}
