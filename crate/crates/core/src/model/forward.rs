//! The denoiser forward pass on a [`Tape`].
//!
//! One token per latent chunk. Reference tokens lead the sequence and get a
//! learned embedding added; chunk `j` sits at RoPE position
//! `REFERENCE_TOKENS + j`. The key axis of self-attention is
//! `context ∥ pass tokens ∥ memory tokens`, where context is K/V carried in
//! from earlier passes at the same diffusion step and memory tokens are
//! compressed summaries built on the fly (stage-2 training).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

use super::mask::AttentionMask;
use super::params::{DenoiserParams, LayerSlots};
use super::rope::{time_embed, RopeFrequencies};

pub const REFERENCE_TOKENS: usize = 2;

pub fn chunk_position(chunk: usize) -> usize {
    REFERENCE_TOKENS + chunk
}

/// Un-rotated keys and values of one layer, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<E: Real = f64> {
    pub k: Tensor<E>,
    pub v: Tensor<E>,
}

/// Keys and values produced by earlier passes at diffusion step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvContext<E: Real = f64> {
    pub t: f64,
    pub layers: Vec<LayerKv<E>>,
    pub key_positions: Vec<usize>,
    /// Rotation positions for values; 0 leaves a value un-rotated.
    pub value_positions: Vec<usize>,
}

impl<E: Real> KvContext<E> {
    pub fn tokens(&self) -> usize {
        self.key_positions.len()
    }
}

/// A contiguous run of pass chunks summarized by memory tokens, one per
/// `λ`-window. `start` is a chunk index relative to the pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemorySpan {
    pub start: usize,
    pub len: usize,
}

pub struct ForwardArgs<'a, E: Real> {
    /// `n_ref` reference rows followed by chunk rows.
    pub tokens: &'a Tensor<E>,
    pub n_ref: usize,
    pub positions: &'a [usize],
    pub t: f64,
    pub cond: &'a Tensor<E>,
    pub context: Option<&'a KvContext<E>>,
    pub memory: &'a [MemorySpan],
    pub mask: &'a AttentionMask,
}

pub struct ForwardOutput {
    /// Velocity for the chunk rows; `None` for a reference-only pass.
    pub velocity: Option<Var>,
    /// Per-layer un-rotated `(k, v)` of the pass tokens.
    pub kv: Vec<(Var, Var)>,
}

impl<'a, E: Real> ForwardArgs<'a, E> {
    fn n_memory(&self, lambda: usize) -> usize {
        self.memory.iter().map(|s| s.len / lambda).sum()
    }

    fn validate(&self, params: &DenoiserParams<E>) -> Result<()> {
        let cfg = params.config();
        let n = self.tokens.rows();
        if self.tokens.rank() != 2 || self.tokens.cols() != cfg.d_latent {
            return Err(Error::shape("denoiser tokens", self.tokens.shape(), &[n, cfg.d_latent]));
        }
        if self.positions.len() != n || self.n_ref > n {
            return Err(Error::shape("denoiser positions", &[self.positions.len()], &[n]));
        }
        if self.cond.rank() != 2 || self.cond.cols() != cfg.d_cond {
            return Err(Error::shape("denoiser cond", self.cond.shape(), &[0, cfg.d_cond]));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Invalid(format!("diffusion step {} outside [0, 1]", self.t)));
        }
        let n_ctx = match self.context {
            Some(ctx) => {
                if ctx.t != self.t {
                    return Err(Error::StepMismatch {
                        cached: ctx.t,
                        requested: self.t,
                    });
                }
                let m = ctx.tokens();
                let ok = ctx.layers.len() == cfg.n_layers
                    && ctx.value_positions.len() == m
                    && ctx.layers.iter().all(|l| {
                        l.k.shape() == [m, cfg.d_model] && l.v.shape() == [m, cfg.d_model]
                    });
                if !ok {
                    return Err(Error::Invalid("malformed kv context".into()));
                }
                m
            }
            None => 0,
        };
        let n_chunks = n - self.n_ref;
        let mut covered = vec![false; n_chunks];
        for s in self.memory {
            if s.len == 0 || s.len % cfg.lambda != 0 || s.start + s.len > n_chunks {
                return Err(Error::Invalid(format!("memory span {s:?} invalid for λ={}", cfg.lambda)));
            }
            for c in &mut covered[s.start..s.start + s.len] {
                if *c {
                    return Err(Error::Invalid(format!("memory span {s:?} overlaps another")));
                }
                *c = true;
            }
        }
        let cols = n_ctx + n + self.n_memory(cfg.lambda);
        if self.mask.rows() != n || self.mask.cols() != cols {
            return Err(Error::shape("attention mask", &[self.mask.rows(), self.mask.cols()], &[n, cols]));
        }
        Ok(())
    }
}

fn angles(rope: &RopeFrequencies, positions: impl Iterator<Item = usize>) -> Arc<[f64]> {
    let p: Vec<f64> = positions.map(|p| p as f64).collect();
    rope.angles(&p).into()
}

fn row_vector<E: Real>(v: Vec<f64>) -> Tensor<E> {
    let n = v.len();
    Tensor::from_vec(&[1, n], v.into_iter().map(E::from_f64).collect()).expect("non-empty")
}

/// `LN(x) · (1 + scale) + shift`.
fn modulate<E: Real>(tape: &mut Tape<'_, E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let s = tape.one_plus(scale);
    let y = tape.mul_row(n, s)?;
    tape.add_row(y, shift)
}

#[allow(clippy::too_many_arguments)]
fn attention<E: Real>(
    tape: &mut Tape<'_, E>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    q_angles: Option<&Arc<[f64]>>,
    k_angles: Option<&Arc<[f64]>>,
    v_angles: Option<&Arc<[f64]>>,
    keep: Arc<[bool]>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let hd = d / n_heads;
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let slice = |tape: &mut Tape<'_, E>, x: Var, ang: Option<&Arc<[f64]>>| -> Result<Var> {
            let s = if n_heads == 1 { x } else { tape.slice_cols(x, lo, hi)? };
            match ang {
                Some(a) => tape.rotate_pairs(s, a.clone()),
                None => Ok(s),
            }
        };
        let qh = slice(tape, q, q_angles)?;
        let kh = slice(tape, k, k_angles)?;
        let vh = slice(tape, v, v_angles)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_masked(s, keep.clone())?;
        heads.push(tape.matmul(p, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Run the denoiser over one pass of tokens. `vars` come from
/// [`DenoiserParams::bind`] on the same tape.
pub fn denoiser_forward<'a, E: Real>(
    tape: &mut Tape<'a, E>,
    params: &DenoiserParams<E>,
    vars: &[Var],
    args: &ForwardArgs<'a, E>,
) -> Result<ForwardOutput> {
    args.validate(params)?;
    let cfg = params.config();
    let slots = params.slots();
    let rope = cfg.rope();
    let n = args.tokens.rows();
    let n_ref = args.n_ref;
    let d = cfg.d_model;

    // token embedding
    let x = tape.constant(args.tokens);
    let h = tape.matmul(x, vars[slots.in_w])?;
    let mut h = tape.add_row(h, vars[slots.in_b])?;
    if n_ref > 0 {
        let r = tape.slice_rows(h, 0, n_ref)?;
        let r = tape.add_row(r, vars[slots.ref_embed])?;
        h = if n_ref < n {
            let c = tape.slice_rows(h, n_ref, n)?;
            tape.concat_rows(&[r, c])?
        } else {
            r
        };
    }

    // time conditioning
    let te = tape.constant_owned(row_vector(time_embed(args.t, d)));
    let c = tape.matmul(te, vars[slots.time_w1])?;
    let c = tape.add_row(c, vars[slots.time_b1])?;
    let c = tape.silu(c);
    let c = tape.matmul(c, vars[slots.time_w2])?;
    let c = tape.add_row(c, vars[slots.time_b2])?;
    let c = tape.silu(c);

    // key/value layout
    let ctx = args.context;
    let mut mem_positions = Vec::new();
    for s in args.memory {
        for w in (0..s.len).step_by(cfg.lambda) {
            mem_positions.push(args.positions[n_ref + s.start + w]);
        }
    }
    let key_positions: Vec<usize> = ctx
        .map(|c| c.key_positions.clone())
        .unwrap_or_default()
        .into_iter()
        .chain(args.positions.iter().copied())
        .chain(mem_positions.iter().copied())
        .collect();
    let value_positions: Vec<usize> = ctx
        .map(|c| c.value_positions.clone())
        .unwrap_or_default()
        .into_iter()
        .chain(std::iter::repeat(0).take(n))
        .chain(mem_positions.iter().map(|&p| if cfg.rotate_memory_values { p } else { 0 }))
        .collect();
    let q_angles = angles(&rope, args.positions.iter().copied());
    let k_angles = angles(&rope, key_positions.iter().copied());
    let v_angles = value_positions
        .iter()
        .any(|&p| p != 0)
        .then(|| angles(&rope, value_positions.iter().copied()));
    let keep = args.mask.keep();
    let cond = tape.constant(args.cond);
    let all_keys = Arc::<[bool]>::from(vec![true; n * args.cond.rows()]);

    let mut kv = Vec::with_capacity(cfg.n_layers);
    for (l, ls) in slots.layers.iter().enumerate() {
        let LayerSlots {
            modulation_w,
            modulation_b,
            ..
        } = *ls;
        let m = tape.matmul(c, vars[modulation_w])?;
        let m = tape.add_row(m, vars[modulation_b])?;
        let shift_a = tape.slice_cols(m, 0, d)?;
        let scale_a = tape.slice_cols(m, d, 2 * d)?;
        let shift_f = tape.slice_cols(m, 2 * d, 3 * d)?;
        let scale_f = tape.slice_cols(m, 3 * d, 4 * d)?;

        // self-attention
        let a = modulate(tape, h, shift_a, scale_a)?;
        let q = tape.matmul(a, vars[ls.wq])?;
        let k = tape.matmul(a, vars[ls.wk])?;
        let v = tape.matmul(a, vars[ls.wv])?;
        kv.push((k, v));
        let mut k_parts = Vec::with_capacity(3);
        let mut v_parts = Vec::with_capacity(3);
        if let Some(ctx) = ctx {
            k_parts.push(tape.constant(&ctx.layers[l].k));
            v_parts.push(tape.constant(&ctx.layers[l].v));
        }
        k_parts.push(k);
        v_parts.push(v);
        for s in args.memory {
            let (lo, hi) = (n_ref + s.start, n_ref + s.start + s.len);
            let ks = tape.slice_rows(k, lo, hi)?;
            let vs = tape.slice_rows(v, lo, hi)?;
            k_parts.push(tape.conv1d(ks, vars[ls.compress_k_w], vars[ls.compress_k_b], cfg.lambda)?);
            v_parts.push(tape.conv1d(vs, vars[ls.compress_v_w], vars[ls.compress_v_b], cfg.lambda)?);
        }
        let k_all = tape.concat_rows(&k_parts)?;
        let v_all = tape.concat_rows(&v_parts)?;
        let o = attention(
            tape,
            q,
            k_all,
            v_all,
            cfg.n_heads,
            Some(&q_angles),
            Some(&k_angles),
            v_angles.as_ref(),
            keep.clone(),
        )?;
        let o = tape.matmul(o, vars[ls.wo])?;
        let o = tape.add_row(o, vars[ls.bo])?;
        h = tape.add(h, o)?;

        // condition cross-attention, position-free
        let a = tape.layer_norm(h)?;
        let a = tape.mul_row(a, vars[ls.cross_gamma])?;
        let a = tape.add_row(a, vars[ls.cross_beta])?;
        let q = tape.matmul(a, vars[ls.wcq])?;
        let kc = tape.matmul(cond, vars[ls.wck])?;
        let vc = tape.matmul(cond, vars[ls.wcv])?;
        let o = attention(tape, q, kc, vc, cfg.n_heads, None, None, None, all_keys.clone())?;
        let o = tape.matmul(o, vars[ls.wco])?;
        let o = tape.add_row(o, vars[ls.bco])?;
        h = tape.add(h, o)?;

        // feed-forward
        let a = modulate(tape, h, shift_f, scale_f)?;
        let f = tape.matmul(a, vars[ls.ff_w1])?;
        let f = tape.add_row(f, vars[ls.ff_b1])?;
        let f = tape.silu(f);
        let f = tape.matmul(f, vars[ls.ff_w2])?;
        let f = tape.add_row(f, vars[ls.ff_b2])?;
        h = tape.add(h, f)?;
    }

    let velocity = if n_ref < n {
        let hc = tape.slice_rows(h, n_ref, n)?;
        let m = tape.matmul(c, vars[slots.final_mod_w])?;
        let m = tape.add_row(m, vars[slots.final_mod_b])?;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, 2 * d)?;
        let a = modulate(tape, hc, shift, scale)?;
        let y = tape.matmul(a, vars[slots.out_w])?;
        Some(tape.add_row(y, vars[slots.out_b])?)
    } else {
        None
    };
    Ok(ForwardOutput { velocity, kv })
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct Prediction<E: Real = f64> {
    pub velocity: Option<Tensor<E>>,
    pub kv: Vec<LayerKv<E>>,
}

/// Gradient-free forward pass.
pub fn predict<E: Real>(params: &DenoiserParams<E>, args: &ForwardArgs<'_, E>) -> Result<Prediction<E>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, |_| false);
    let out = denoiser_forward(&mut tape, params, &vars, args)?;
    let velocity = out.velocity.map(|v| tape.value(v).clone());
    if let Some(index) = velocity.as_ref().and_then(|v| v.first_non_finite()) {
        return Err(Error::NonFinite {
            stage: "denoiser output".into(),
            index,
        });
    }
    let kv = out
        .kv
        .iter()
        .map(|&(k, v)| LayerKv {
            k: tape.value(k).clone(),
            v: tape.value(v).clone(),
        })
        .collect();
    Ok(Prediction { velocity, kv })
}
