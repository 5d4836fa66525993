//! Length-sorted batch formation under sentence and padded-token caps.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeLimits {
    /// Maximum sentences per batch.
    pub sbatch: usize,
    /// Maximum padded tokens (`sentences × longest length`) per batch.
    pub wbatch: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self {
            sbatch: 128,
            wbatch: 2048,
        }
    }
}

impl DecodeLimits {
    pub fn new(sbatch: usize, wbatch: usize) -> Result<Self> {
        if sbatch == 0 || wbatch == 0 {
            return Err(Error::Config("sbatch and wbatch must be positive".into()));
        }
        Ok(Self { sbatch, wbatch })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Sentence indices, longest first.
    pub indices: Vec<usize>,
    /// Length of the first (longest) sentence; every row is padded to it.
    pub max_len: usize,
    /// A single sentence longer than `wbatch`.
    pub oversize: bool,
}

impl Batch {
    pub fn padded_tokens(&self) -> usize {
        self.indices.len() * self.max_len
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// Concatenation of the batches' indices: output `j` of the batched run
    /// belongs to input `permutation[j]`.
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    /// `(sentences, max_len)` of every batch.
    pub fn shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.batches.iter().map(|b| (b.indices.len(), b.max_len))
    }
}

/// Stable sort by length, longest first.
pub fn sort_by_length_desc(lengths: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    order
}

/// Greedy fill over lengths already sorted longest first. A sentence joins
/// the open batch iff the batch would stay within both caps, counting every
/// row at the first row's length. Indices refer to positions in
/// `sorted_lengths`.
pub fn form_batches(sorted_lengths: &[usize], limits: DecodeLimits) -> BatchPlan {
    let mut batches: Vec<Batch> = Vec::new();
    for (i, &len) in sorted_lengths.iter().enumerate() {
        if let Some(open) = batches.last_mut().filter(|b| !b.oversize) {
            let n = open.indices.len() + 1;
            if n <= limits.sbatch && n * open.max_len <= limits.wbatch {
                open.indices.push(i);
                continue;
            }
        }
        batches.push(Batch {
            indices: vec![i],
            max_len: len,
            oversize: len > limits.wbatch,
        });
    }
    let permutation = batches.iter().flat_map(|b| b.indices.iter().copied()).collect();
    BatchPlan { batches, permutation }
}

/// Sorts `lengths` and forms batches; indices in the plan are input indices.
pub fn plan_batches(lengths: &[usize], limits: DecodeLimits) -> BatchPlan {
    let order = sort_by_length_desc(lengths);
    let sorted: Vec<usize> = order.iter().map(|&i| lengths[i]).collect();
    let mut plan = form_batches(&sorted, limits);
    for b in &mut plan.batches {
        for i in &mut b.indices {
            *i = order[*i];
        }
    }
    for i in &mut plan.permutation {
        *i = order[*i];
    }
    plan
}

/// Puts outputs produced in plan order back into input order.
pub fn restore_order<T>(outputs: Vec<T>, plan: &BatchPlan) -> Result<Vec<T>> {
    let n = plan.permutation.len();
    if outputs.len() != n {
        return Err(Error::Integrity(format!("{} outputs for {n} inputs", outputs.len())));
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for (out, &i) in outputs.into_iter().zip(&plan.permutation) {
        match slots.get_mut(i) {
            Some(slot @ None) => *slot = Some(out),
            _ => return Err(Error::Integrity(format!("permutation entry {i} is out of range or repeated"))),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("a permutation fills every slot")).collect())
}

/// Fixed allowance for small scratch buffers.
pub const MEMORY_OVERHEAD_BYTES: usize = 1 << 20;
pub const MEMORY_SLACK: f64 = 1.5;

/// Upper bound on decode working memory (excluding the weights) for the
/// most demanding batch of `plan`, with `elem_bytes` per activation.
pub fn estimate_peak_memory_with(plan: &BatchPlan, cfg: &ModelConfig, max_out_len: usize, elem_bytes: usize) -> usize {
    let d = cfg.d_model;
    let worst = plan
        .shapes()
        .map(|(n, len)| {
            let embeddings = n * len * d;
            let encoder = n * len * (8 * d + 3 * cfg.ffn_dim_enc);
            let states = 3 * n * len * d;
            let caches = n * (len + max_out_len) * d * cfg.n_dec_layers * 2;
            let step = n * (12 * d + 3 * cfg.ffn_dim_dec);
            let logits = 2 * n * cfg.vocab_size;
            embeddings + encoder + states + caches + step + logits
        })
        .max()
        .unwrap_or(0);
    MEMORY_OVERHEAD_BYTES + (MEMORY_SLACK * (worst * elem_bytes) as f64).ceil() as usize
}

/// [`estimate_peak_memory_with`] for 32-bit activations.
pub fn estimate_peak_memory(plan: &BatchPlan, cfg: &ModelConfig, max_out_len: usize) -> usize {
    estimate_peak_memory_with(plan, cfg, max_out_len, std::mem::size_of::<f32>())
}
