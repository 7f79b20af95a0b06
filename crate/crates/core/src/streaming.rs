//! Block-wise autoregressive generation.
//!
//! One KV cache is kept per sampler step. While block `n` is denoised, its
//! pass at step `t_k` reads only context produced at `t_k` and appends its
//! own keys/values to that step's cache; once the block is done every cache
//! rolls. The full-recompute oracle instead replays each previous block's
//! stored trajectory through a single block-causal pass.

use std::time::Instant;

use crate::convkv::{CompressorWeights, RollPolicy, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::model::{
    chunk_position, predict, sequence_mask, AttentionMask, BlockPlan, DenoiserParams, ForwardArgs, MaskMode,
    REFERENCE_TOKENS,
};
use crate::numerics::{Real, SeededRng, Tensor};
use crate::schedule::{euler_integrate, noise_forward, SamplerConfig};
use crate::training::{build_stage2_mask, CompressSpec};

pub use crate::model::{FIRST_BLOCK, NEXT_BLOCK};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub block_seconds: Vec<f64>,
    /// Context tokens visible while each block was denoised, reference included.
    pub context_chunks: Vec<usize>,
    /// The same without the reference tokens.
    pub history_chunks: Vec<usize>,
    /// Key/value floats visible to each block in the step-0 cache.
    pub context_floats: Vec<usize>,
    /// The same plus the pending buffer awaiting compression.
    pub stored_floats: Vec<usize>,
    pub total_chunks: usize,
    pub discontinuity: f64,
}

/// Initial noise of block `b`, drawn in 64-bit from its own stream.
pub fn block_noise(seed: u64, block: usize, rows: usize, dim: usize) -> Tensor {
    SeededRng::with_stream(seed, block as u64).normal_tensor(&[rows, dim], 1.0)
}

fn check_inputs<E: Real>(params: &DenoiserParams<E>, x_ref: &Tensor<E>, cond: &Tensor<E>) -> Result<()> {
    let cfg = params.config();
    if x_ref.shape() != [REFERENCE_TOKENS, cfg.d_latent] {
        return Err(Error::shape("reference", x_ref.shape(), &[REFERENCE_TOKENS, cfg.d_latent]));
    }
    if cond.rank() != 2 || cond.cols() != cfg.d_cond {
        return Err(Error::shape("condition", cond.shape(), &[0, cfg.d_cond]));
    }
    Ok(())
}

fn block_error(block: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { stage, index } => Error::NonFinite {
            stage: format!("block {block}, {stage}"),
            index,
        },
        other => other,
    }
}

/// Cached streaming generation.
pub fn generate_stream<E: Real>(
    params: &DenoiserParams<E>,
    x_ref: &Tensor<E>,
    cond: &Tensor<E>,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    policy: RollPolicy,
    seed: u64,
) -> Result<(Tensor<E>, GenerationReport)> {
    check_inputs(params, x_ref, cond)?;
    let cfg = params.config();
    let weights = CompressorWeights::from_params(params);
    let ref_positions: Vec<usize> = (0..REFERENCE_TOKENS).collect();
    let ref_mask = AttentionMask::full(REFERENCE_TOKENS, REFERENCE_TOKENS);
    let mut caches = Vec::with_capacity(sampler.steps());
    for &t in sampler.eval_points() {
        let mut cache = SegmentedKvCache::new(t, cfg.n_layers, cfg.d_model, cfg.lambda, policy)?
            .with_memory_value_rotation(cfg.rotate_memory_values);
        let pass = predict(
            params,
            &ForwardArgs {
                tokens: x_ref,
                n_ref: REFERENCE_TOKENS,
                positions: &ref_positions,
                t,
                cond,
                context: None,
                memory: &[],
                mask: &ref_mask,
            },
        )?;
        cache.set_reference(t, &pass.kv)?;
        caches.push(cache);
    }

    let mut blocks = Vec::with_capacity(plan.n_blocks());
    let mut report = GenerationReport {
        block_seconds: Vec::new(),
        context_chunks: Vec::new(),
        history_chunks: Vec::new(),
        context_floats: Vec::new(),
        stored_floats: Vec::new(),
        total_chunks: plan.n_chunks(),
        discontinuity: f64::NAN,
    };
    for b in 0..plan.n_blocks() {
        let started = Instant::now();
        let range = plan.block_range(b);
        let n = range.len();
        let positions: Vec<usize> = range.clone().map(chunk_position).collect();
        report.context_chunks.push(caches[0].context_chunks());
        report.history_chunks.push(caches[0].history_chunks());
        report.context_floats.push(caches[0].context_floats());
        report.stored_floats.push(caches[0].stored_floats());
        let x0: Tensor<E> = block_noise(seed, b, n, cfg.d_latent).cast();
        let x = euler_integrate(
            |k, t, x| {
                let cache = &mut caches[k];
                let view = cache.cache_context_view();
                let mask = AttentionMask::full(n, view.kv.tokens() + n);
                let pass = predict(
                    params,
                    &ForwardArgs {
                        tokens: x,
                        n_ref: 0,
                        positions: &positions,
                        t,
                        cond,
                        context: Some(&view.kv),
                        memory: &[],
                        mask: &mask,
                    },
                )?;
                cache.cache_append(t, &pass.kv, n)?;
                Ok(pass.velocity.expect("block has chunks"))
            },
            &x0,
            sampler,
        )
        .map_err(|e| block_error(b, e))?;
        for cache in &mut caches {
            cache.cache_roll(&weights)?;
        }
        report.block_seconds.push(started.elapsed().as_secs_f64());
        blocks.push(x);
    }
    let refs: Vec<&Tensor<E>> = blocks.iter().collect();
    let out = Tensor::concat_rows(&refs)?;
    report.discontinuity = discontinuity(&out.cast(), plan);
    Ok((out, report))
}

/// How each earlier block is presented while block `n` is denoised at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// The earlier block's own iterate at the same step (Neighbor Forcing).
    SameStep,
    /// The earlier block's finished output.
    Clean,
    /// The finished output re-noised at an independently drawn step.
    IndependentNoise,
}

impl HistoryMode {
    pub const ALL: [HistoryMode; 3] = [HistoryMode::SameStep, HistoryMode::Clean, HistoryMode::IndependentNoise];

    pub fn name(self) -> &'static str {
        match self {
            HistoryMode::SameStep => "same-step",
            HistoryMode::Clean => "clean-history",
            HistoryMode::IndependentNoise => "independent-noise",
        }
    }
}

/// Uncached generation: every denoiser call reruns the whole history under a
/// block-causal mask.
pub fn generate_full_recompute<E: Real>(
    params: &DenoiserParams<E>,
    x_ref: &Tensor<E>,
    cond: &Tensor<E>,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<E>> {
    generate_with_history(params, x_ref, cond, plan, sampler, HistoryMode::SameStep, seed)
}

/// Full-recompute generation with a chosen presentation of history.
pub fn generate_with_history<E: Real>(
    params: &DenoiserParams<E>,
    x_ref: &Tensor<E>,
    cond: &Tensor<E>,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    mode: HistoryMode,
    seed: u64,
) -> Result<Tensor<E>> {
    recompute(params, x_ref, cond, plan, sampler, mode, false, seed)
}

/// Full-recompute generation under the stage-2 mask: each pass hides the
/// raw history the segmented cache would have evicted and appends memory
/// tokens built from the pass's own keys and values. Reproduces
/// [`generate_stream`] with [`RollPolicy::ConvKv`].
pub fn generate_compressed_recompute<E: Real>(
    params: &DenoiserParams<E>,
    x_ref: &Tensor<E>,
    cond: &Tensor<E>,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<E>> {
    recompute(params, x_ref, cond, plan, sampler, HistoryMode::SameStep, true, seed)
}

#[allow(clippy::too_many_arguments)]
fn recompute<E: Real>(
    params: &DenoiserParams<E>,
    x_ref: &Tensor<E>,
    cond: &Tensor<E>,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    mode: HistoryMode,
    compressed: bool,
    seed: u64,
) -> Result<Tensor<E>> {
    check_inputs(params, x_ref, cond)?;
    let cfg = params.config();
    // trajectories[b][k]: iterate of block b entering step k
    let mut trajectories: Vec<Vec<Tensor<E>>> = Vec::new();
    let mut finals: Vec<Tensor<E>> = Vec::new();
    let mut renoise = SeededRng::with_stream(seed, u64::MAX);
    for b in 0..plan.n_blocks() {
        let sub = plan.truncated(b + 1)?;
        let (mask, memory) = if compressed {
            let spec = CompressSpec::streaming(&sub, cfg.lambda)?;
            (build_stage2_mask(&sub, &spec)?, spec.memory_spans())
        } else {
            (sequence_mask(&sub, REFERENCE_TOKENS, MaskMode::BlockCausal), Vec::new())
        };
        let start = plan.block_range(b).start;
        let x0: Tensor<E> = block_noise(seed, b, plan.sizes()[b], cfg.d_latent).cast();
        let mut traj = Vec::with_capacity(sampler.steps());
        let x = euler_integrate(
            |k, t, x| {
                traj.push(x.clone());
                let mut parts: Vec<Tensor<E>> = Vec::with_capacity(b + 2);
                parts.push(x_ref.clone());
                for p in 0..b {
                    parts.push(match mode {
                        HistoryMode::SameStep => trajectories[p][k].clone(),
                        HistoryMode::Clean => finals[p].clone(),
                        HistoryMode::IndependentNoise => {
                            let tp = renoise.uniform();
                            let eps: Tensor<E> = renoise.normal_tensor(finals[p].shape(), 1.0).cast();
                            noise_forward(&finals[p], tp, &eps)?
                        }
                    });
                }
                parts.push(x.clone());
                let refs: Vec<&Tensor<E>> = parts.iter().collect();
                let tokens = Tensor::concat_rows(&refs)?;
                let positions: Vec<usize> = (0..tokens.rows()).collect();
                let pass = predict(
                    params,
                    &ForwardArgs {
                        tokens: &tokens,
                        n_ref: REFERENCE_TOKENS,
                        positions: &positions,
                        t,
                        cond,
                        context: None,
                        memory: &memory,
                        mask: &mask,
                    },
                )?;
                let v = pass.velocity.expect("block has chunks");
                v.slice_rows(start, v.rows())
            },
            &x0,
            sampler,
        )
        .map_err(|e| block_error(b, e))?;
        trajectories.push(traj);
        finals.push(x);
    }
    let refs: Vec<&Tensor<E>> = finals.iter().collect();
    Tensor::concat_rows(&refs)
}

fn gap(z: &Tensor, i: usize) -> f64 {
    z.row(i + 1)
        .iter()
        .zip(z.row(i))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Mean gap across block boundaries divided by mean gap between consecutive
/// chunks inside blocks. `NaN` when either set is empty.
pub fn discontinuity(z: &Tensor, plan: &BlockPlan) -> f64 {
    let (mut boundary, mut nb, mut interior, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..plan.n_chunks().min(z.rows()).saturating_sub(1) {
        if plan.block_of(i) != plan.block_of(i + 1) {
            boundary += gap(z, i);
            nb += 1;
        } else {
            interior += gap(z, i);
            ni += 1;
        }
    }
    if nb == 0 || ni == 0 {
        return f64::NAN;
    }
    (boundary / nb as f64) / (interior / ni as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub variant: HistoryMode,
    pub scores: Vec<f64>,
    pub median: f64,
}

/// One `(reference, condition)` pair per seed.
pub struct ZeroShotCase<'a> {
    pub reference: &'a Tensor,
    pub cond: &'a Tensor,
    pub seed: u64,
}

/// Discontinuity of a frozen model under each history presentation.
pub fn zero_shot_experiment(
    params: &DenoiserParams,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    variants: &[HistoryMode],
    cases: &[ZeroShotCase<'_>],
) -> Result<Vec<ZeroShotResult>> {
    variants
        .iter()
        .map(|&variant| {
            let scores = cases
                .iter()
                .map(|c| {
                    let z = generate_with_history(params, c.reference, c.cond, plan, sampler, variant, c.seed)?;
                    Ok(discontinuity(&z, plan))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(ZeroShotResult {
                variant,
                median: median(&scores),
                scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Per-block median latency in seconds for each mode.
    pub convkv: Vec<f64>,
    pub nocompress: Vec<f64>,
    pub unbounded: Vec<f64>,
    pub steady_convkv: f64,
    pub steady_nocompress: f64,
    /// `(convkv − nocompress) / nocompress` over steady-state blocks.
    pub overhead: f64,
}

/// Median per-block latency of ConvKV, of the same-size cache without
/// compression arithmetic, and of the unbounded cache.
pub fn bench_overhead(
    params: &DenoiserParams,
    x_ref: &Tensor,
    cond: &Tensor,
    plan: &BlockPlan,
    sampler: &SamplerConfig,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let modes = [RollPolicy::ConvKv, RollPolicy::Subsample, RollPolicy::Unbounded];
    let mut samples: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); plan.n_blocks()]; modes.len()];
    for rep in 0..warmup + repetitions.max(1) {
        // interleave modes so drift affects all of them alike
        for (m, &policy) in modes.iter().enumerate() {
            let (_, report) = generate_stream(params, x_ref, cond, plan, sampler, policy, rep as u64)?;
            if rep >= warmup {
                for (b, s) in report.block_seconds.iter().enumerate() {
                    samples[m][b].push(*s);
                }
            }
        }
    }
    let per_block: Vec<Vec<f64>> = samples.iter().map(|m| m.iter().map(|s| median(s)).collect()).collect();
    let steady = |v: &[f64]| median(&v[2.min(v.len() - 1)..]);
    let steady_convkv = steady(&per_block[0]);
    let steady_nocompress = steady(&per_block[1]);
    Ok(BenchReport {
        overhead: (steady_convkv - steady_nocompress) / steady_nocompress,
        steady_convkv,
        steady_nocompress,
        convkv: per_block[0].clone(),
        nocompress: per_block[1].clone(),
        unbounded: per_block[2].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;

    fn setup() -> (DenoiserParams, Tensor, Tensor) {
        let cfg = DenoiserConfig {
            d_model: 16,
            d_ff: 32,
            ..Default::default()
        };
        let p = DenoiserParams::init(cfg, 1).unwrap().randomized(2, 0.2);
        let mut rng = SeededRng::new(3);
        (p, rng.normal_tensor(&[2, 16], 1.0), rng.normal_tensor(&[4, 8], 1.0))
    }

    #[test]
    fn single_block_matches_direct_sampling() {
        let (p, r, c) = setup();
        let plan = BlockPlan::standard(1).unwrap();
        let s = SamplerConfig::uniform(3).unwrap();
        let (a, _) = generate_stream(&p, &r, &c, &plan, &s, RollPolicy::ConvKv, 4).unwrap();
        let b = generate_full_recompute(&p, &r, &c, &plan, &s, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cached_equals_recompute() {
        let (p, r, c) = setup();
        let plan = BlockPlan::standard(3).unwrap();
        let s = SamplerConfig::uniform(3).unwrap();
        let (a, rep) = generate_stream(&p, &r, &c, &plan, &s, RollPolicy::Unbounded, 5).unwrap();
        let b = generate_full_recompute(&p, &r, &c, &plan, &s, 5).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
        assert_eq!(rep.history_chunks, vec![0, 6, 14]);
        let (a2, _) = generate_stream(&p, &r, &c, &plan, &s, RollPolicy::Unbounded, 5).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn convkv_context_is_bounded() {
        let (p, r, c) = setup();
        let plan = BlockPlan::standard(8).unwrap();
        let s = SamplerConfig::uniform(2).unwrap();
        let (z, rep) = generate_stream(&p, &r, &c, &plan, &s, RollPolicy::ConvKv, 6).unwrap();
        assert_eq!(rep.context_chunks, vec![2, 4, 6, 6, 6, 6, 6, 6]);
        assert!(z.is_finite());
        let oracle = generate_full_recompute(&p, &r, &c, &plan, &s, 6).unwrap();
        // compression is lossy from block 2 onward; block 0 and 1 agree
        assert!(z.slice_rows(0, 6).unwrap().max_abs_diff(&oracle.slice_rows(0, 6).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn convkv_stream_matches_compressed_recompute() {
        let (p, r, c) = setup();
        let plan = BlockPlan::standard(5).unwrap();
        let s = SamplerConfig::uniform(3).unwrap();
        let (a, _) = generate_stream(&p, &r, &c, &plan, &s, RollPolicy::ConvKv, 8).unwrap();
        let b = generate_compressed_recompute(&p, &r, &c, &plan, &s, 8).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10, "{}", a.max_abs_diff(&b).unwrap());
    }

    #[test]
    fn f32_stream_tracks_f64() {
        let (p, r, c) = setup();
        let plan = BlockPlan::standard(3).unwrap();
        let s = SamplerConfig::uniform(3).unwrap();
        let (a, _) = generate_stream(&p.cast::<f32>(), &r.cast(), &c.cast(), &plan, &s, RollPolicy::Unbounded, 7)
            .unwrap();
        let b = generate_full_recompute(&p, &r, &c, &plan, &s, 7).unwrap();
        assert!(a.cast::<f64>().max_abs_diff(&b).unwrap() <= 1e-4);
    }

    #[test]
    fn discontinuity_of_a_straight_line_is_one() {
        let z = Tensor::from_vec(&[14, 1], (0..14).map(|i| i as f64).collect()).unwrap();
        let plan = BlockPlan::standard(2).unwrap();
        assert!((discontinuity(&z, &plan) - 1.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
