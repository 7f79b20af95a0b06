//! Block plans and attention masks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FIRST_BLOCK: usize = 6;
pub const NEXT_BLOCK: usize = 8;

/// Partition of chunk indices into consecutive autoregressive blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    sizes: Vec<usize>,
    starts: Vec<usize>,
}

impl BlockPlan {
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Invalid("block plan has no blocks".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::Invalid("block plan has an empty block".into()));
        }
        let starts = sizes
            .iter()
            .scan(0, |acc, &s| {
                let start = *acc;
                *acc += s;
                Some(start)
            })
            .collect();
        Ok(Self { sizes, starts })
    }

    /// `first` chunks, then `n_blocks - 1` blocks of `next` chunks.
    pub fn new(first: usize, next: usize, n_blocks: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Invalid("block plan has no blocks".into()));
        }
        let mut sizes = vec![first];
        sizes.resize(n_blocks, next);
        Self::from_sizes(sizes)
    }

    /// The 6, 8, 8, ... plan.
    pub fn standard(n_blocks: usize) -> Result<Self> {
        Self::new(FIRST_BLOCK, NEXT_BLOCK, n_blocks)
    }

    /// Blocks of `m` chunks covering `n_chunks` (the last block may be short).
    pub fn uniform(m: usize, n_chunks: usize) -> Result<Self> {
        if m == 0 || n_chunks == 0 {
            return Err(Error::Invalid("uniform plan needs m ≥ 1 and at least one chunk".into()));
        }
        let full = n_chunks / m;
        let mut sizes = vec![m; full];
        if n_chunks % m != 0 {
            sizes.push(n_chunks % m);
        }
        Self::from_sizes(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_chunks(&self) -> usize {
        self.starts.last().unwrap() + self.sizes.last().unwrap()
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        self.starts[b]..self.starts[b] + self.sizes[b]
    }

    pub fn block_of(&self, chunk: usize) -> usize {
        debug_assert!(chunk < self.n_chunks());
        self.starts.partition_point(|&s| s <= chunk) - 1
    }

    /// The first `n` blocks of this plan.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_sizes(self.sizes[..n.min(self.sizes.len())].to_vec())
    }
}

/// `rows × cols` admissibility matrix; `cols` may exceed `rows` when the key
/// axis carries cached context or memory tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    keep: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::shape("attention mask", &[rows, cols], &[keep.len()]));
        }
        if let Some(row) = (0..rows).find(|&i| !keep[i * cols..(i + 1) * cols].iter().any(|&k| k)) {
            return Err(Error::EmptyMaskRow { row });
        }
        Ok(Self {
            rows,
            cols,
            keep: keep.into(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let keep = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, keep)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true).expect("non-empty full mask")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub fn admissible(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&k| k).count()
    }

    pub(crate) fn keep(&self) -> Arc<[bool]> {
        self.keep.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[self.rows, self.cols], data).expect("mask shape")
    }
}

/// Chunk-level mask: `(i, j)` admissible iff `block(j) ≤ block(i)`.
pub fn block_causal_mask(plan: &BlockPlan) -> AttentionMask {
    let n = plan.n_chunks();
    let blocks: Vec<usize> = (0..n).map(|c| plan.block_of(c)).collect();
    AttentionMask::from_fn(n, n, |i, j| blocks[j] <= blocks[i]).expect("diagonal is always admissible")
}

/// How chunk tokens see each other during a full training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    BlockCausal,
    /// Bidirectional over all chunks; used for the non-autoregressive baseline.
    None,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::BlockCausal => "block-causal",
            MaskMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "block-causal" | "causal" => Some(MaskMode::BlockCausal),
            "none" => Some(MaskMode::None),
            _ => None,
        }
    }
}

/// Mask over `n_ref` reference tokens followed by the plan's chunks. The
/// reference tokens form a leading block that attends only to itself; every
/// chunk attends to it.
pub fn sequence_mask(plan: &BlockPlan, n_ref: usize, mode: MaskMode) -> AttentionMask {
    let chunks = block_causal_mask(plan);
    let n = n_ref + plan.n_chunks();
    AttentionMask::from_fn(n, n, |i, j| match (i < n_ref, j < n_ref) {
        (true, true) => true,
        (true, false) => false,
        (false, true) => true,
        (false, false) => mode == MaskMode::None || chunks.get(i - n_ref, j - n_ref),
    })
    .expect("every row sees the reference or itself")
}
