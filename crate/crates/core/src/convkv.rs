//! Segmented KV cache with convolutional compression of aged chunks.
//!
//! Keys are stored un-rotated together with a position tag and rotated when
//! consumed, so the RoPE reset of a compressed span is just a tag: the
//! memory token is placed at the position of the span's first chunk.
//!
//! Roll rule after a block is finalized: its last two chunks become the new
//! short-term segment; the old short-term chunks and then the block's earlier
//! chunks enter `pending` in chronological order; every full window of `λ`
//! pending chunks is compressed into one long-term memory token; long-term
//! memory keeps the two newest tokens and drops the oldest first.

use std::collections::VecDeque;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{chunk_position, DenoiserParams, KvContext, LayerKv, RopeFrequencies};
use crate::numerics::{conv1d_strided, ops, Real, Tensor};

pub const LONG_TERM_CAPACITY: usize = 2;
pub const SHORT_TERM_CHUNKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RollPolicy {
    /// Compress every full window of pending chunks.
    ConvKv,
    /// Keep every raw chunk; context grows without bound.
    Unbounded,
    /// Same segment sizes as `ConvKv`, but a memory token is a copy of its
    /// window's first chunk. Isolates the cost of the convolution.
    Subsample,
}

impl RollPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RollPolicy::ConvKv => "convkv",
            RollPolicy::Unbounded => "unbounded",
            RollPolicy::Subsample => "subsample",
        }
    }
}

/// What a cached token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Reference(usize),
    Chunk(usize),
    /// Summary of chunks `start..start + len`.
    Memory { start: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Reference,
    LongTerm,
    ShortTerm,
    Current,
    Pending,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Reference => "reference",
            Segment::LongTerm => "long_term",
            Segment::ShortTerm => "short_term",
            Segment::Current => "current",
            Segment::Pending => "pending",
        }
    }
}

/// One token's keys and values for every layer, flattened `[layer][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedToken<E: Real = f64> {
    pub origin: Origin,
    pub key_position: usize,
    pub value_position: usize,
    pub k: Vec<E>,
    pub v: Vec<E>,
}

/// Per-layer compressor weights, `[λ, d, d]` kernels and `[d]` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorWeights<E: Real = f64> {
    pub lambda: usize,
    pub layers: Vec<[Tensor<E>; 4]>,
}

impl<E: Real> CompressorWeights<E> {
    pub fn from_params(params: &DenoiserParams<E>) -> Self {
        let layers = params
            .slots()
            .layers
            .iter()
            .map(|s| {
                [s.compress_k_w, s.compress_k_b, s.compress_v_w, s.compress_v_b].map(|i| params.tensor(i).clone())
            })
            .collect();
        Self {
            lambda: params.config().lambda,
            layers,
        }
    }

    pub fn averaging(n_layers: usize, d: usize, lambda: usize) -> Self {
        let w: Tensor<E> = crate::model::averaging_kernel(lambda, d).cast();
        let b = Tensor::zeros(&[d]);
        Self {
            lambda,
            layers: (0..n_layers).map(|_| [w.clone(), b.clone(), w.clone(), b.clone()]).collect(),
        }
    }
}

/// A compressed memory token for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryChunk<E: Real = f64> {
    pub k: Tensor<E>,
    pub v: Tensor<E>,
    pub position: usize,
}

/// Compress exactly `λ` un-rotated key/value rows of one layer into one
/// memory token tagged with position `s`.
pub fn compress_segment<E: Real>(
    weights: &CompressorWeights<E>,
    layer: usize,
    k_span: &Tensor<E>,
    v_span: &Tensor<E>,
    s: usize,
) -> Result<MemoryChunk<E>> {
    let lam = weights.lambda;
    if k_span.rows() != lam || v_span.rows() != lam {
        return Err(Error::Invalid(format!(
            "compression span has {} chunks, expected λ={lam}",
            k_span.rows()
        )));
    }
    let [kw, kb, vw, vb] = &weights.layers[layer];
    Ok(MemoryChunk {
        k: conv1d_strided(k_span, kw, kb, lam, lam)?,
        v: conv1d_strided(v_span, vw, vb, lam, lam)?,
        position: s,
    })
}

/// Keys as attention consumes them: each head's slice rotated to the
/// token's position.
pub fn rotate_for_attention<E: Real>(
    k: &Tensor<E>,
    positions: &[usize],
    freqs: &RopeFrequencies,
    n_heads: usize,
) -> Result<Tensor<E>> {
    let hd = freqs.head_dim();
    if k.cols() != hd * n_heads || k.rows() != positions.len() {
        return Err(Error::shape("rotate_for_attention", k.shape(), &[positions.len(), hd * n_heads]));
    }
    let p: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let angles = freqs.angles(&p);
    let heads: Vec<Tensor<E>> = (0..n_heads)
        .map(|h| ops::rotate_pairs(&k.slice_cols(h * hd, (h + 1) * hd).expect("in range"), &angles, false))
        .collect();
    let refs: Vec<&Tensor<E>> = heads.iter().collect();
    Tensor::concat_cols(&refs)
}

/// The context consumed by the denoiser plus the segment of every token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextView<E: Real = f64> {
    pub kv: KvContext<E>,
    pub segments: Vec<Segment>,
    pub origins: Vec<Origin>,
}

/// Where each evicted chunk currently lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    /// Chunks that have left the current segment.
    pub evicted: usize,
    /// Chunks accounted for more than once or not at all.
    pub unaccounted: Vec<usize>,
    pub duplicated: Vec<usize>,
    pub in_memory: usize,
    pub in_pending: usize,
    pub in_short_term: usize,
    pub dropped: usize,
}

impl CoverageReport {
    pub fn is_exact(&self) -> bool {
        self.unaccounted.is_empty() && self.duplicated.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKvCache<E: Real = f64> {
    t: f64,
    n_layers: usize,
    d_model: usize,
    lambda: usize,
    policy: RollPolicy,
    rotate_memory_values: bool,
    reference: Vec<CachedToken<E>>,
    long_term: VecDeque<CachedToken<E>>,
    short_term: Vec<CachedToken<E>>,
    current: Vec<CachedToken<E>>,
    pending: VecDeque<CachedToken<E>>,
    dropped: Vec<Origin>,
    next_chunk: usize,
    rolls: usize,
}

impl<E: Real> SegmentedKvCache<E> {
    pub fn new(t: f64, n_layers: usize, d_model: usize, lambda: usize, policy: RollPolicy) -> Result<Self> {
        if lambda == 0 || n_layers == 0 || d_model == 0 {
            return Err(Error::Invalid("cache needs positive layers, width and λ".into()));
        }
        Ok(Self {
            t,
            n_layers,
            d_model,
            lambda,
            policy,
            rotate_memory_values: false,
            reference: Vec::new(),
            long_term: VecDeque::new(),
            short_term: Vec::new(),
            current: Vec::new(),
            pending: VecDeque::new(),
            dropped: Vec::new(),
            next_chunk: 0,
            rolls: 0,
        })
    }

    /// Rotate compressed values to their span start when consumed.
    pub fn with_memory_value_rotation(mut self, on: bool) -> Self {
        self.rotate_memory_values = on;
        self
    }

    pub fn step(&self) -> f64 {
        self.t
    }

    pub fn policy(&self) -> RollPolicy {
        self.policy
    }

    pub fn next_position(&self) -> usize {
        chunk_position(self.next_chunk)
    }

    pub fn rolls(&self) -> usize {
        self.rolls
    }

    fn check_step(&self, t: f64) -> Result<()> {
        if t != self.t {
            return Err(Error::StepMismatch {
                cached: self.t,
                requested: t,
            });
        }
        Ok(())
    }

    fn tokens_from(
        &self,
        kv: &[LayerKv<E>],
        origin: impl Fn(usize) -> Origin,
        position: impl Fn(usize) -> usize,
    ) -> Result<Vec<CachedToken<E>>> {
        let n = kv.first().map_or(0, |l| l.k.rows());
        let ok = kv.len() == self.n_layers
            && kv
                .iter()
                .all(|l| l.k.shape() == [n, self.d_model] && l.v.shape() == [n, self.d_model]);
        if !ok {
            return Err(Error::Invalid("kv does not match cache layout".into()));
        }
        Ok((0..n)
            .map(|i| CachedToken {
                origin: origin(i),
                key_position: position(i),
                value_position: 0,
                k: kv.iter().flat_map(|l| l.k.row(i).iter().copied()).collect(),
                v: kv.iter().flat_map(|l| l.v.row(i).iter().copied()).collect(),
            })
            .collect())
    }

    /// Store the reference tokens' K/V (positions `0..n`).
    pub fn set_reference(&mut self, t: f64, kv: &[LayerKv<E>]) -> Result<()> {
        self.check_step(t)?;
        if !self.reference.is_empty() {
            return Err(Error::Invalid("reference segment already filled".into()));
        }
        self.reference = self.tokens_from(kv, Origin::Reference, |i| i)?;
        Ok(())
    }

    /// Append K/V of `n_chunks` new chunks to the current segment.
    pub fn cache_append(&mut self, t: f64, kv: &[LayerKv<E>], n_chunks: usize) -> Result<()> {
        self.check_step(t)?;
        if kv.first().map_or(0, |l| l.k.rows()) != n_chunks {
            return Err(Error::Invalid(format!("expected K/V for {n_chunks} chunks")));
        }
        let base = self.next_chunk;
        let tokens = self.tokens_from(kv, |i| Origin::Chunk(base + i), |i| chunk_position(base + i))?;
        self.current.extend(tokens);
        self.next_chunk += n_chunks;
        Ok(())
    }

    fn compress_window(&self, window: &[CachedToken<E>], weights: &CompressorWeights<E>) -> Result<CachedToken<E>> {
        let (first, last) = (window[0].origin, window[window.len() - 1].origin);
        let (Origin::Chunk(start), Origin::Chunk(end)) = (first, last) else {
            return Err(Error::Invalid("only raw chunks can be compressed".into()));
        };
        let position = window[0].key_position;
        let origin = Origin::Memory {
            start,
            len: end + 1 - start,
        };
        let value_position = if self.rotate_memory_values { position } else { 0 };
        if self.policy == RollPolicy::Subsample {
            return Ok(CachedToken {
                origin,
                key_position: position,
                value_position,
                k: window[0].k.clone(),
                v: window[0].v.clone(),
            });
        }
        if weights.lambda != self.lambda || weights.layers.len() != self.n_layers {
            return Err(Error::Invalid("compressor does not match cache layout".into()));
        }
        let d = self.d_model;
        let mut k = Vec::with_capacity(self.n_layers * d);
        let mut v = Vec::with_capacity(self.n_layers * d);
        for l in 0..self.n_layers {
            let rows = |f: fn(&CachedToken<E>) -> &Vec<E>| {
                let data = window.iter().flat_map(|t| f(t)[l * d..(l + 1) * d].iter().copied()).collect();
                Tensor::from_vec(&[window.len(), d], data)
            };
            let m = compress_segment(weights, l, &rows(|t| &t.k)?, &rows(|t| &t.v)?, position)?;
            k.extend_from_slice(m.k.data());
            v.extend_from_slice(m.v.data());
        }
        Ok(CachedToken {
            origin,
            key_position: position,
            value_position,
            k,
            v,
        })
    }

    /// Finalize the current block and restore the segment invariants.
    pub fn cache_roll(&mut self, weights: &CompressorWeights<E>) -> Result<()> {
        let block = std::mem::take(&mut self.current);
        self.rolls += 1;
        if self.policy == RollPolicy::Unbounded {
            self.short_term.extend(block);
            return Ok(());
        }
        let keep = block.len().saturating_sub(SHORT_TERM_CHUNKS);
        let mut block = block.into_iter();
        let older: Vec<_> = block.by_ref().take(keep).collect();
        let newest: Vec<_> = block.collect();
        let displaced = if newest.len() >= SHORT_TERM_CHUNKS {
            std::mem::replace(&mut self.short_term, newest)
        } else {
            // a block shorter than the short-term segment: slide by its size
            let mut st = std::mem::take(&mut self.short_term);
            st.extend(newest);
            let over = st.len().saturating_sub(SHORT_TERM_CHUNKS);
            let rest = st.split_off(over);
            self.short_term = rest;
            st
        };
        self.pending.extend(displaced);
        self.pending.extend(older);
        while self.pending.len() >= self.lambda {
            let window: Vec<_> = self.pending.drain(..self.lambda).collect();
            let memory = self.compress_window(&window, weights)?;
            self.long_term.push_back(memory);
            while self.long_term.len() > LONG_TERM_CAPACITY {
                let old = self.long_term.pop_front().expect("non-empty");
                self.dropped.push(old.origin);
            }
        }
        Ok(())
    }

    fn visible(&self) -> impl Iterator<Item = (Segment, &CachedToken<E>)> {
        self.reference
            .iter()
            .map(|t| (Segment::Reference, t))
            .chain(self.long_term.iter().map(|t| (Segment::LongTerm, t)))
            .chain(self.short_term.iter().map(|t| (Segment::ShortTerm, t)))
    }

    /// `reference ∥ long_term ∥ short_term`, ready for the denoiser.
    pub fn cache_context_view(&self) -> ContextView<E> {
        let tokens: Vec<(Segment, &CachedToken<E>)> = self.visible().collect();
        let n = tokens.len();
        let d = self.d_model;
        let layers = (0..self.n_layers)
            .map(|l| {
                let gather = |f: fn(&CachedToken<E>) -> &Vec<E>| {
                    let data: Vec<E> = tokens
                        .iter()
                        .flat_map(|(_, t)| f(t)[l * d..(l + 1) * d].iter().copied())
                        .collect();
                    if n == 0 {
                        Tensor::zeros(&[0, d])
                    } else {
                        Tensor::from_vec(&[n, d], data).expect("layout")
                    }
                };
                LayerKv {
                    k: gather(|t| &t.k),
                    v: gather(|t| &t.v),
                }
            })
            .collect();
        ContextView {
            kv: KvContext {
                t: self.t,
                layers,
                key_positions: tokens.iter().map(|(_, t)| t.key_position).collect(),
                value_positions: tokens.iter().map(|(_, t)| t.value_position).collect(),
            },
            segments: tokens.iter().map(|(s, _)| *s).collect(),
            origins: tokens.iter().map(|(_, t)| t.origin).collect(),
        }
    }

    /// Tokens visible to attention, reference included.
    pub fn context_chunks(&self) -> usize {
        self.reference.len() + self.long_term.len() + self.short_term.len()
    }

    /// Visible tokens excluding the reference.
    pub fn history_chunks(&self) -> usize {
        self.long_term.len() + self.short_term.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn segment_len(&self, s: Segment) -> usize {
        match s {
            Segment::Reference => self.reference.len(),
            Segment::LongTerm => self.long_term.len(),
            Segment::ShortTerm => self.short_term.len(),
            Segment::Current => self.current.len(),
            Segment::Pending => self.pending.len(),
        }
    }

    pub fn segment_origins(&self, s: Segment) -> Vec<Origin> {
        self.segment_tokens(s).map(|t| t.origin).collect()
    }

    fn segment_tokens(&self, s: Segment) -> Box<dyn Iterator<Item = &CachedToken<E>> + '_> {
        match s {
            Segment::Reference => Box::new(self.reference.iter()),
            Segment::LongTerm => Box::new(self.long_term.iter()),
            Segment::ShortTerm => Box::new(self.short_term.iter()),
            Segment::Current => Box::new(self.current.iter()),
            Segment::Pending => Box::new(self.pending.iter()),
        }
    }

    /// Floats held by visible context tokens (keys and values, all layers).
    pub fn context_floats(&self) -> usize {
        self.context_chunks() * 2 * self.n_layers * self.d_model
    }

    /// Floats held outside the current block, pending buffer included.
    pub fn stored_floats(&self) -> usize {
        (self.context_chunks() + self.pending.len()) * 2 * self.n_layers * self.d_model
    }

    pub fn dropped(&self) -> &[Origin] {
        &self.dropped
    }

    /// SHA-256 over one segment's tags and payload.
    pub fn segment_hash(&self, s: Segment) -> String {
        let mut h = Sha256::new();
        for t in self.segment_tokens(s) {
            h.update(format!("{:?}/{}/{};", t.origin, t.key_position, t.value_position).as_bytes());
            for x in t.k.iter().chain(&t.v) {
                h.update(Real::to_f64(*x).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Account for every chunk that has left the current segment.
    pub fn coverage(&self) -> CoverageReport {
        let first_current = match self.current.first().map(|t| t.origin) {
            Some(Origin::Chunk(c)) => c,
            _ => self.next_chunk,
        };
        let mut counts = vec![0usize; first_current];
        let mut mark = |o: &Origin| match *o {
            Origin::Chunk(c) if c < first_current => counts[c] += 1,
            Origin::Memory { start, len } => (start..start + len).for_each(|c| counts[c] += 1),
            _ => {}
        };
        let mut r = CoverageReport {
            evicted: first_current,
            unaccounted: Vec::new(),
            duplicated: Vec::new(),
            in_memory: 0,
            in_pending: self.pending.len(),
            in_short_term: self.short_term.len(),
            dropped: 0,
        };
        for t in self.long_term.iter() {
            if let Origin::Memory { len, .. } = t.origin {
                r.in_memory += len;
            }
            mark(&t.origin);
        }
        for o in &self.dropped {
            if let Origin::Memory { len, .. } = o {
                r.dropped += len;
            }
            mark(o);
        }
        self.pending.iter().chain(&self.short_term).for_each(|t| mark(&t.origin));
        for (c, &n) in counts.iter().enumerate() {
            match n {
                0 => r.unaccounted.push(c),
                1 => {}
                _ => r.duplicated.push(c),
            }
        }
        r
    }

    /// Text snapshot: per-segment shape, position tags and hash.
    pub fn snapshot(&self) -> String {
        let mut out = format!(
            "cache step={} policy={} next_position={} rolls={} layers={} d_model={}\n",
            self.t,
            self.policy.name(),
            self.next_position(),
            self.rolls,
            self.n_layers,
            self.d_model
        );
        for s in [
            Segment::Reference,
            Segment::LongTerm,
            Segment::ShortTerm,
            Segment::Current,
            Segment::Pending,
        ] {
            let positions: Vec<String> = self.segment_tokens(s).map(|t| t.key_position.to_string()).collect();
            let _ = writeln!(
                out,
                "segment {} tokens={} shape={}x{}x{} positions=[{}] sha256={}",
                s.name(),
                self.segment_len(s),
                self.segment_len(s),
                self.n_layers,
                self.d_model,
                positions.join(","),
                self.segment_hash(s)
            );
        }
        let _ = writeln!(out, "dropped {}", self.dropped.len());
        out
    }
}
