//! The toy DiT denoiser: masks, rotary positions, parameters and the
//! forward pass.

mod forward;
mod mask;
mod params;
mod rope;

pub use forward::{
    chunk_position, denoiser_forward, predict, ForwardArgs, ForwardOutput, KvContext, LayerKv, MemorySpan,
    Prediction, REFERENCE_TOKENS,
};
pub use mask::{block_causal_mask, sequence_mask, AttentionMask, BlockPlan, MaskMode, FIRST_BLOCK, NEXT_BLOCK};
pub use params::{averaging_kernel, DenoiserConfig, DenoiserParams, LayerSlots, ParamGroup, Slots};
pub use rope::{rope_apply, rope_invert, time_embed, RopeFrequencies};

use crate::error::Result;
use crate::numerics::{Real, Tensor};

/// Reference rows followed by chunk rows, with their positions.
pub fn sequence_tokens<E: Real>(reference: &Tensor<E>, chunks: &Tensor<E>) -> Result<(Tensor<E>, Vec<usize>)> {
    let tokens = Tensor::concat_rows(&[reference, chunks])?;
    let positions = (0..tokens.rows()).collect();
    Ok((tokens, positions))
}

/// Velocity for every chunk of a full sequence under `mask`, in one pass.
pub fn predict_sequence<E: Real>(
    params: &DenoiserParams<E>,
    reference: &Tensor<E>,
    chunks: &Tensor<E>,
    t: f64,
    cond: &Tensor<E>,
    mask: &AttentionMask,
) -> Result<Tensor<E>> {
    let (tokens, positions) = sequence_tokens(reference, chunks)?;
    let args = ForwardArgs {
        tokens: &tokens,
        n_ref: reference.rows(),
        positions: &positions,
        t,
        cond,
        context: None,
        memory: &[],
        mask,
    };
    Ok(predict(params, &args)?.velocity.expect("sequence has chunks"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::Error;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            d_ff: 32,
            ..Default::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        (
            rng.normal_tensor(&[REFERENCE_TOKENS, 16], 1.0),
            rng.normal_tensor(&[n, 16], 1.0),
            rng.normal_tensor(&[4, 8], 1.0),
        )
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 1).unwrap();
        let plan = BlockPlan::standard(2).unwrap();
        let (r, x, c) = inputs(14, 2);
        let mask = sequence_mask(&plan, 2, MaskMode::BlockCausal);
        let v = predict_sequence(&p, &r, &x, 0.4, &c, &mask).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn later_blocks_do_not_leak() {
        let p = DenoiserParams::init(small(), 3).unwrap().randomized(4, 0.3);
        let plan = BlockPlan::from_sizes(vec![2, 3, 2]).unwrap();
        let (r, x, c) = inputs(7, 5);
        let mask = sequence_mask(&plan, 2, MaskMode::BlockCausal);
        let base = predict_sequence(&p, &r, &x, 0.6, &c, &mask).unwrap();
        for j in 0..7 {
            let mut xp = x.clone();
            for e in xp.row_mut(j) {
                *e += 0.75;
            }
            let out = predict_sequence(&p, &r, &xp, 0.6, &c, &mask).unwrap();
            for i in 0..7 {
                if plan.block_of(i) < plan.block_of(j) {
                    assert_eq!(out.row(i), base.row(i), "chunk {i} saw chunk {j}");
                } else if i == j {
                    assert_ne!(out.row(i), base.row(i));
                }
            }
        }
    }

    #[test]
    fn cached_passes_match_single_pass() {
        let p = DenoiserParams::init(small(), 6).unwrap().randomized(7, 0.3);
        let plan = BlockPlan::from_sizes(vec![3, 4]).unwrap();
        let (r, x, c) = inputs(7, 8);
        let t = 0.35;
        let full = predict_sequence(&p, &r, &x, t, &c, &sequence_mask(&plan, 2, MaskMode::BlockCausal)).unwrap();

        let ref_pass = predict(
            &p,
            &ForwardArgs {
                tokens: &r,
                n_ref: 2,
                positions: &[0, 1],
                t,
                cond: &c,
                context: None,
                memory: &[],
                mask: &AttentionMask::full(2, 2),
            },
        )
        .unwrap();
        assert!(ref_pass.velocity.is_none());
        let mut ctx = KvContext {
            t,
            layers: ref_pass.kv,
            key_positions: vec![0, 1],
            value_positions: vec![0, 0],
        };
        let mut outs = Vec::new();
        for b in 0..2 {
            let range = plan.block_range(b);
            let xb = x.slice_rows(range.start, range.end).unwrap();
            let positions: Vec<usize> = range.clone().map(chunk_position).collect();
            let mask = AttentionMask::full(xb.rows(), ctx.tokens() + xb.rows());
            let pred = predict(
                &p,
                &ForwardArgs {
                    tokens: &xb,
                    n_ref: 0,
                    positions: &positions,
                    t,
                    cond: &c,
                    context: Some(&ctx),
                    memory: &[],
                    mask: &mask,
                },
            )
            .unwrap();
            outs.push(pred.velocity.unwrap());
            for (layer, new) in ctx.layers.iter_mut().zip(pred.kv) {
                layer.k = Tensor::concat_rows(&[&layer.k, &new.k]).unwrap();
                layer.v = Tensor::concat_rows(&[&layer.v, &new.v]).unwrap();
            }
            ctx.key_positions.extend(&positions);
            ctx.value_positions.extend(vec![0; positions.len()]);
        }
        let cached = Tensor::concat_rows(&[&outs[0], &outs[1]]).unwrap();
        assert!(cached.max_abs_diff(&full).unwrap() <= 1e-10);

        // a context produced at another step is refused
        let xb = x.slice_rows(0, 3).unwrap();
        let err = predict(
            &p,
            &ForwardArgs {
                tokens: &xb,
                n_ref: 0,
                positions: &[2, 3, 4],
                t: 0.7,
                cond: &c,
                context: Some(&ctx),
                memory: &[],
                mask: &AttentionMask::full(3, ctx.tokens() + 3),
            },
        );
        assert!(matches!(err, Err(Error::StepMismatch { .. })));
    }

    #[test]
    fn condition_tokens_are_unordered() {
        let p = DenoiserParams::init(small(), 9).unwrap().randomized(10, 0.3);
        let plan = BlockPlan::from_sizes(vec![3]).unwrap();
        let (r, x, c) = inputs(3, 11);
        let perm = Tensor::concat_rows(&[
            &c.slice_rows(2, 4).unwrap(),
            &c.slice_rows(0, 1).unwrap(),
            &c.slice_rows(1, 2).unwrap(),
        ])
        .unwrap();
        let mask = sequence_mask(&plan, 2, MaskMode::BlockCausal);
        let a = predict_sequence(&p, &r, &x, 0.5, &c, &mask).unwrap();
        let b = predict_sequence(&p, &r, &x, 0.5, &perm, &mask).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        assert!(a.is_finite());
    }

    #[test]
    fn mask_shape_is_checked() {
        let p = DenoiserParams::init(small(), 1).unwrap();
        let (r, x, c) = inputs(3, 2);
        let bad = AttentionMask::full(5, 4);
        assert!(predict_sequence(&p, &r, &x, 0.5, &c, &bad).is_err());
    }
}
