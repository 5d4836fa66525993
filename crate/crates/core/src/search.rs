//! Greedy and beam search over an incremental decoder.

use crate::error::Result;
use crate::model::{DecodeCache, EncoderOutput, Model};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_row, Tensor};
use crate::text::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::TokenId;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Output length cap is `⌈len_ratio · src_len⌉ + len_offset`.
    pub len_ratio: f64,
    pub len_offset: usize,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_size: 1,
            len_ratio: 1.5,
            len_offset: 5,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }
}

/// `min(max_positions, ⌈ratio · src_len⌉ + offset)`, at least 1.
pub fn max_out_length(src_len: usize, cfg: &SearchConfig, max_positions: usize) -> usize {
    let scaled = (cfg.len_ratio * src_len as f64).ceil().max(0.0) as usize;
    (scaled + cfg.len_offset).min(max_positions).max(1)
}

/// One-token-at-a-time scorer driven by the search routines.
pub trait StepDecoder {
    type Cache;
    type Scalar: Scalar;

    /// Logits `[rows × vocab]` for the next token of every cache row.
    fn step(&self, cache: &mut Self::Cache, prev: &[TokenId]) -> Result<Tensor<Self::Scalar>>;

    /// Keeps cache rows `rows`, in that order; repeats duplicate a row.
    fn reorder(&self, cache: &mut Self::Cache, rows: &[usize]);
}

impl<T: Scalar> StepDecoder for Model<T> {
    type Cache = DecodeCache<T>;
    type Scalar = T;

    fn step(&self, cache: &mut DecodeCache<T>, prev: &[TokenId]) -> Result<Tensor<T>> {
        self.decode_step(cache, prev)
    }

    fn reorder(&self, cache: &mut DecodeCache<T>, rows: &[usize]) {
        cache.reorder(rows);
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// PAD and BOS never appear in an output; their logits are removed from
/// every row before selection.
fn mask_unemittable<T: Scalar>(logits: &mut Tensor<T>, cfg: &SearchConfig) {
    let v = logits.shape().last().copied().unwrap_or(0);
    if v == 0 {
        return;
    }
    for row in logits.data_mut().chunks_mut(v) {
        for id in [cfg.pad_id, cfg.bos_id] {
            if let Some(x) = row.get_mut(id as usize) {
                *x = T::neg_infinity();
            }
        }
    }
}

/// Greedy decoding on raw logits. Row `r` runs for at most `max_out[r]`
/// steps; a row leaves the batch once it emits EOS or reaches its cap, so
/// finished rows cost nothing and cannot affect the others. Returned
/// sequences exclude BOS and EOS.
pub fn greedy_search<D: StepDecoder>(
    dec: &D,
    cache: &mut D::Cache,
    max_out: &[usize],
    cfg: &SearchConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let mut out = vec![Vec::new(); max_out.len()];
    let mut active: Vec<usize> = (0..max_out.len()).filter(|&r| max_out[r] > 0).collect();
    if active.len() != max_out.len() {
        dec.reorder(cache, &active);
    }
    let mut prev = vec![cfg.bos_id; active.len()];
    while !active.is_empty() {
        let mut logits = dec.step(cache, &prev)?;
        mask_unemittable(&mut logits, cfg);
        let mut keep = Vec::with_capacity(active.len());
        prev.clear();
        for (i, &r) in active.iter().enumerate() {
            let tok = argmax(logits.row(i)) as TokenId;
            if tok == cfg.eos_id {
                continue;
            }
            out[r].push(tok);
            if out[r].len() < max_out[r] {
                keep.push(i);
                prev.push(tok);
            }
        }
        if keep.len() != active.len() {
            if !keep.is_empty() {
                dec.reorder(cache, &keep);
            }
            active = keep.iter().map(|&i| active[i]).collect();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

/// Length-unnormalized beam search. Each live hypothesis proposes its `k`
/// best tokens; a sentence's candidates are ranked by cumulative
/// log-probability and EOS candidates move to the finished list. A sentence
/// stops when `k` hypotheses finished, none remain live, or the best finished
/// score can no longer be beaten. With `k = 1` this is exactly greedy search.
pub fn beam_search<D: StepDecoder>(
    dec: &D,
    cache: &mut D::Cache,
    max_out: &[usize],
    cfg: &SearchConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let k = cfg.beam_size.max(1);
    let b = max_out.len();
    let mut live: Vec<Vec<Hypothesis>> = (0..b)
        .map(|r| {
            if max_out[r] == 0 {
                Vec::new()
            } else {
                vec![Hypothesis {
                    tokens: Vec::new(),
                    score: 0.0,
                    finished: false,
                }]
            }
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); b];
    let initial: Vec<usize> = (0..b).filter(|&r| !live[r].is_empty()).collect();
    if initial.len() != b {
        dec.reorder(cache, &initial);
    }

    let mut step = 0;
    while live.iter().any(|h| !h.is_empty()) {
        let prev: Vec<TokenId> = live
            .iter()
            .flatten()
            .map(|h| h.tokens.last().copied().unwrap_or(cfg.bos_id))
            .collect();
        let mut logits = dec.step(cache, &prev)?;
        mask_unemittable(&mut logits, cfg);
        step += 1;
        let mut parents = Vec::new();
        let mut row = 0;
        for s in 0..b {
            let hyps = std::mem::take(&mut live[s]);
            let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
            for (h, hyp) in hyps.iter().enumerate() {
                let raw = logits.row(row + h);
                let logp = log_softmax_row(raw);
                for tok in top_k(raw, k) {
                    cands.push((hyp.score + logp[tok].as_f64(), h, tok as TokenId));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, h, tok) in cands {
                if next.len() >= k || finished[s].len() >= k {
                    break;
                }
                let mut tokens = hyps[h].tokens.clone();
                if tok == cfg.eos_id {
                    finished[s].push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                    });
                } else {
                    tokens.push(tok);
                    next.push((
                        Hypothesis {
                            tokens,
                            score,
                            finished: false,
                        },
                        row + h,
                    ));
                }
            }
            row += hyps.len();
            let best_done = finished[s].iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = next.iter().map(|(h, _)| h.score).fold(f64::NEG_INFINITY, f64::max);
            let stop = finished[s].len() >= k || best_done >= best_live || step >= max_out[s];
            if stop {
                if finished[s].is_empty() {
                    finished[s].extend(next.into_iter().map(|(h, _)| h));
                }
            } else {
                for (h, parent) in next {
                    parents.push(parent);
                    live[s].push(h);
                }
            }
        }
        if !parents.is_empty() {
            dec.reorder(cache, &parents);
        }
    }
    Ok(finished
        .into_iter()
        .map(|f| {
            f.into_iter()
                .reduce(|best, h| if h.score > best.score { h } else { best })
                .map(|h| h.tokens)
                .unwrap_or_default()
        })
        .collect())
}

/// Indices of the `k` largest values, descending; lower index first on ties.
fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

fn output_caps<T: Scalar>(model: &Model<T>, enc: &EncoderOutput<T>, cfg: &SearchConfig) -> Vec<usize> {
    let max_pos = model.config().max_positions;
    enc.lengths.iter().map(|&n| max_out_length(n, cfg, max_pos)).collect()
}

pub fn greedy_translate<T: Scalar>(model: &Model<T>, enc: &EncoderOutput<T>, cfg: &SearchConfig) -> Result<Vec<Vec<TokenId>>> {
    let caps = output_caps(model, enc, cfg);
    let mut cache = model.init_cross_cache(enc)?;
    cache.reserve(caps.iter().copied().max().unwrap_or(0), model.config().d_model);
    greedy_search(model, &mut cache, &caps, cfg)
}

pub fn beam_translate<T: Scalar>(model: &Model<T>, enc: &EncoderOutput<T>, cfg: &SearchConfig) -> Result<Vec<Vec<TokenId>>> {
    let caps = output_caps(model, enc, cfg);
    let mut cache = model.init_cross_cache(enc)?;
    beam_search(model, &mut cache, &caps, cfg)
}

/// Dispatches on `cfg.beam_size`.
pub fn translate_ids<T: Scalar>(model: &Model<T>, enc: &EncoderOutput<T>, cfg: &SearchConfig) -> Result<Vec<Vec<TokenId>>> {
    if cfg.beam_size <= 1 {
        greedy_translate(model, enc, cfg)
    } else {
        beam_translate(model, enc, cfg)
    }
}

/// Cache-free greedy decoding: every step reruns the whole decoder over the
/// prefix with cross keys/values recomputed. Reference for the cached path.
pub fn greedy_translate_recompute<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderOutput<T>,
    cfg: &SearchConfig,
) -> Result<Vec<Vec<TokenId>>> {
    let caps = output_caps(model, enc, cfg);
    let mut out = Vec::with_capacity(enc.batch());
    for r in 0..enc.batch() {
        let one = EncoderOutput {
            states: crate::tensor::Tensor::new(
                vec![1, enc.src_len(), model.config().d_model],
                enc.sentence(r).to_vec(),
            )?,
            lengths: vec![enc.lengths[r]],
        };
        let mut prefix = vec![cfg.bos_id];
        let mut toks = Vec::new();
        while toks.len() < caps[r] {
            let mut logits = model.decode_full(&one, &prefix, prefix.len())?;
            mask_unemittable(&mut logits, cfg);
            let v = model.config().vocab_size;
            let last = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
            let tok = argmax(last) as TokenId;
            if tok == cfg.eos_id {
                break;
            }
            toks.push(tok);
            prefix.push(tok);
        }
        out.push(toks);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NormVariant};

    #[test]
    fn length_cap() {
        let c = SearchConfig::default();
        assert_eq!(max_out_length(0, &c, 1024), 5);
        assert_eq!(max_out_length(10, &c, 1024), 20);
        assert_eq!(max_out_length(3, &c, 1024), 10);
        assert_eq!(max_out_length(1_000_000, &c, 1024), 1024);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
        assert_eq!(top_k(&[1.0f32, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
    }

    /// Logits are a fixed function of the prefix so every path can be scored
    /// by hand. Ids: 3 = EOS, 4 = A, 5 = B.
    struct Toy;

    const A: TokenId = 4;
    const B: TokenId = 5;

    fn toy_probs(prefix: &[TokenId]) -> [f64; 6] {
        let tiny = 1e-4;
        let (eos, a, b) = match prefix {
            [] => (0.0, 0.6, 0.4),
            [A] => (0.30, 0.36, 0.34),
            [B] => (0.9, 0.04, 0.06),
            _ => (1.0, 0.0, 0.0),
        };
        let rest = 1.0 - 3.0 * tiny;
        [tiny, tiny, tiny, eos * rest + 1e-9, a * rest + 1e-9, b * rest + 1e-9]
    }

    impl StepDecoder for Toy {
        type Cache = Vec<Vec<TokenId>>;
        type Scalar = f64;

        fn step(&self, cache: &mut Self::Cache, prev: &[TokenId]) -> Result<Tensor<f64>> {
            let mut data = Vec::new();
            for (p, &t) in cache.iter_mut().zip(prev) {
                if t != BOS_ID {
                    p.push(t);
                }
                data.extend(toy_probs(p).map(f64::ln));
            }
            Tensor::new(vec![prev.len(), 6], data)
        }

        fn reorder(&self, cache: &mut Self::Cache, rows: &[usize]) {
            *cache = rows.iter().map(|&r| cache[r].clone()).collect();
        }
    }

    fn path_score(path: &[TokenId]) -> f64 {
        let mut s = 0.0;
        for t in 0..path.len() {
            s += toy_probs(&path[..t])[path[t] as usize].ln();
        }
        s
    }

    #[test]
    fn beam_two_beats_greedy_on_toy() {
        let cfg = SearchConfig {
            beam_size: 2,
            ..SearchConfig::default()
        };
        let greedy = greedy_search(&Toy, &mut vec![vec![]], &[3], &cfg).unwrap();
        let beam = beam_search(&Toy, &mut vec![vec![]], &[3], &cfg).unwrap();
        assert_eq!(greedy, vec![vec![A, A]]);
        assert_eq!(beam, vec![vec![B]]);

        let mut best = (f64::NEG_INFINITY, vec![]);
        for len in 0..3 {
            for body in 0..(2u32.pow(len)) {
                let mut path: Vec<TokenId> = (0..len).map(|i| if body >> i & 1 == 1 { B } else { A }).collect();
                path.push(EOS_ID);
                let s = path_score(&path);
                if s > best.0 {
                    best = (s, path[..len as usize].to_vec());
                }
            }
        }
        assert_eq!(best.1, vec![B]);
        assert!(path_score(&[B, EOS_ID]) > path_score(&[A, A, EOS_ID]));

        let one = SearchConfig::default();
        assert_eq!(beam_search(&Toy, &mut vec![vec![]], &[3], &one).unwrap(), greedy);
    }

    fn tiny(vocab: usize, seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_model: 16,
            n_heads_enc: 2,
            n_heads_dec: 1,
            ffn_dim_enc: 32,
            ffn_dim_dec: 0,
            vocab_size: vocab,
            max_positions: 64,
            norm_variant: NormVariant::L2,
            shared_embeddings: true,
        };
        Model::random(cfg, seed).unwrap()
    }

    #[test]
    fn forced_eos_gives_empty_output() {
        let m = tiny(12, 1);
        let mut w = m.weights().clone();
        w.output.bias.fill(0.0);
        w.output.bias[EOS_ID as usize] = 1e6;
        let m = Model::new(m.config().clone(), w).unwrap();
        let enc = m.encode(&[vec![5, 6, 7], vec![8]]).unwrap();
        let cfg = SearchConfig::default();
        assert_eq!(greedy_translate(&m, &enc, &cfg).unwrap(), vec![Vec::<TokenId>::new(); 2]);
        let beam = SearchConfig { beam_size: 3, ..cfg };
        assert_eq!(beam_translate(&m, &enc, &beam).unwrap(), vec![Vec::<TokenId>::new(); 2]);
    }

    #[test]
    fn duplicates_decode_identically_and_respect_caps() {
        let m = tiny(30, 2);
        let s = vec![9, 4, 17, 22];
        let enc = m.encode(&[s.clone(), vec![5], s.clone()]).unwrap();
        let cfg = SearchConfig::default();
        let out = greedy_translate(&m, &enc, &cfg).unwrap();
        assert_eq!(out[0], out[2]);
        assert!(out[0].len() <= 11 && out[1].len() <= 7);
        assert!(out.iter().flatten().all(|&t| t != EOS_ID));
    }

    #[test]
    fn cached_greedy_matches_recompute_and_beam_one() {
        for seed in 0..5 {
            let m = tiny(25, seed);
            let enc = m.encode(&[vec![4, 5, 6, 7, 8], vec![9, 10], vec![11, 12, 13]]).unwrap();
            let cfg = SearchConfig::default();
            let g = greedy_translate(&m, &enc, &cfg).unwrap();
            assert_eq!(g, greedy_translate_recompute(&m, &enc, &cfg).unwrap());
            assert_eq!(g, beam_translate(&m, &enc, &cfg).unwrap());
        }
    }

    #[test]
    fn single_real_token_vocab() {
        let m = tiny(5, 3);
        let mut w = m.weights().clone();
        for id in [PAD_ID, 1, BOS_ID] {
            w.output.bias[id as usize] = -1e6;
        }
        let m = Model::new(m.config().clone(), w).unwrap();
        let enc = m.encode(&[vec![4, 4, 4], vec![4]]).unwrap();
        for k in 1..4 {
            let cfg = SearchConfig {
                beam_size: k,
                ..SearchConfig::default()
            };
            let out = translate_ids(&m, &enc, &cfg).unwrap();
            assert_eq!(out, translate_ids(&m, &enc, &cfg).unwrap());
            assert!(out.iter().flatten().all(|&t| t == 4));
        }
    }
}
