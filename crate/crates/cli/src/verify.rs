//! Self-contained invariant suites behind `nbf verify`.

use std::path::Path;

use anyhow::{Context, Result};
use neighbor_forcing::convkv::{CompressorWeights, RollPolicy, SegmentedKvCache};
use neighbor_forcing::io::load_checkpoint;
use neighbor_forcing::model::{block_causal_mask, BlockPlan, DenoiserConfig, DenoiserParams, LayerKv, MaskMode};
use neighbor_forcing::numerics::{SeededRng, Tensor};
use neighbor_forcing::schedule::{expected_neighbor_distance, monte_carlo_prop2, SamplerConfig};
use neighbor_forcing::streaming::{generate_full_recompute, generate_stream};
use neighbor_forcing::synthdata::{
    check_prop1, generate_state_path, make_dataset, render_and_encode, LatentDynamics, COND_TOKENS,
};
use neighbor_forcing::training::{
    build_stage2_mask, gradient_check, noise_batch, stratified_times, training_layout, CompressSpec, Stage,
    TrainConfig, Window,
};

use crate::config::RunConfig;
use crate::dataset::read_dataset;
use crate::{CheckName, Outcome, VerifyArgs};

struct Check {
    name: &'static str,
    pass: bool,
    metric: String,
}

pub fn run(cfg: &mut RunConfig, a: VerifyArgs) -> Result<Outcome> {
    cfg.apply("seed", a.seed)?;
    let seed: u64 = cfg.get("seed")?;
    let model = match &a.ckpt {
        Some(path) => Some(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.params),
        None => None,
    };
    let which: Vec<CheckName> = match a.check {
        CheckName::All => vec![
            CheckName::Prop1,
            CheckName::Prop2,
            CheckName::Grad,
            CheckName::Mask,
            CheckName::CacheEquivalence,
            CheckName::MemoryBound,
            CheckName::Ledger,
        ],
        one => vec![one],
    };
    let mut all_pass = true;
    for check in which {
        let c = match check {
            CheckName::Prop1 => prop1(cfg, seed, a.data.as_deref())?,
            CheckName::Prop2 => prop2(seed)?,
            CheckName::Grad => grad(seed)?,
            CheckName::Mask => mask()?,
            CheckName::CacheEquivalence => cache_equivalence(model.as_ref(), seed)?,
            CheckName::MemoryBound => memory_bound(model.as_ref(), seed)?,
            CheckName::Ledger => ledger(seed)?,
            CheckName::All => unreachable!("expanded above"),
        };
        println!("CHECK {} {} {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.metric);
        all_pass &= c.pass;
    }
    Ok(if all_pass { Outcome::Success } else { Outcome::CheckFailed })
}

fn prop1(cfg: &RunConfig, seed: u64, stored: Option<&Path>) -> Result<Check> {
    let dynamics = cfg.dynamics()?;
    let mut violations = 0;
    let mut tightness: f64 = 0.0;
    if let Some(dir) = stored {
        let data = read_dataset(dir)?;
        let bound = data.number("prop1_bound")?;
        for s in &data.sequences {
            let rep = check_prop1(bound, &s.latents, &s.sequence_states());
            violations += rep.violations;
            tightness = tightness.max(rep.tightness());
        }
    }
    for k in 0..5 {
        let data = make_dataset(&dynamics, 4, 500, seed + k)?;
        let bound = data.dynamics.neighbor_bound();
        for s in &data.sequences {
            let rep = check_prop1(bound, &s.latents, &s.sequence_states());
            violations += rep.violations;
            tightness = tightness.max(rep.tightness());
        }
    }
    // negative control: one state jump far beyond the velocity bound
    let dy = LatentDynamics::new(dynamics.clone(), seed)?;
    let mut path = generate_state_path(100, dynamics.state_dim, dynamics.delta_u, seed)?;
    for f in 50..100 {
        for j in 0..dynamics.state_dim {
            let v = path.at(f, j) + 2.0;
            path.set(f, j, v);
        }
    }
    let r = render_and_encode(&dy, &path, dynamics.eps_r, seed)?;
    let planted = !check_prop1(dy.neighbor_bound(), &r.latents, &path).holds;
    Ok(Check {
        name: "prop1",
        pass: violations == 0 && planted,
        metric: format!("violations={violations} max_tightness={tightness:.4} planted_jump_detected={planted}"),
    })
}

fn prop2(seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut case = 0;
    for (alpha, sigma) in [(1.0, 0.0), (0.5, 0.5), (0.0, 1.0)] {
        for d in [4usize, 16] {
            for gap in [0.5, 2.0] {
                let z0 = vec![0.0; d];
                let mut z1 = vec![0.0; d];
                z1[0] = gap;
                let mc = monte_carlo_prop2(&z0, &z1, alpha, sigma, 100_000, seed + case)?;
                let exact = expected_neighbor_distance(alpha, sigma, d, gap * gap);
                worst = worst.max((mc - exact).abs() / exact);
                case += 1;
            }
        }
    }
    Ok(Check {
        name: "prop2",
        pass: worst < 0.02,
        metric: format!("max_rel_err={worst:.3e} samples=100000 cases={case}"),
    })
}

/// Reduced-width two-layer model small enough to difference every scalar.
pub fn grad_toy_config() -> DenoiserConfig {
    DenoiserConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_latent: 4,
        d_cond: 4,
        d_ff: 32,
        lambda: 2,
        ..Default::default()
    }
}

fn grad(seed: u64) -> Result<Check> {
    let cfg = grad_toy_config();
    let params = DenoiserParams::init(cfg.clone(), seed)?.randomized(seed + 1, 0.2);
    let plan = BlockPlan::from_sizes(vec![3, 3, 3])?;
    let mut rng = SeededRng::new(seed + 2);
    let windows: Vec<Window> = (0..2)
        .map(|_| Window {
            reference: rng.normal_tensor(&[2, cfg.d_latent], 1.0),
            x0: rng.normal_tensor(&[plan.n_chunks(), cfg.d_latent], 1.0),
            cond: rng.normal_tensor(&[COND_TOKENS, cfg.d_cond], 1.0),
        })
        .collect();
    let times = stratified_times(windows.len(), 0.02, 0.98, &mut rng);
    let batch = noise_batch(&windows, &times, &mut rng)?;
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    let mut where_ = String::new();
    for stage in [Stage::One, Stage::Two] {
        let tcfg = TrainConfig {
            stage,
            plan: plan.clone(),
            mask: MaskMode::BlockCausal,
            ..Default::default()
        };
        let (mask, memory) = training_layout(&tcfg, cfg.lambda)?;
        let r = gradient_check(&params, &batch, &mask, &memory, 1e-5, 1e-6)?;
        if r.max_rel >= worst {
            worst = r.max_rel;
            where_ = r.worst;
        }
        scalars += r.scalars;
    }
    // stage-2 layout must actually route through memory tokens
    let spec = CompressSpec::streaming(&plan, cfg.lambda)?;
    let has_memory = spec.memory_tokens() > 0 && build_stage2_mask(&plan, &spec).is_ok();
    Ok(Check {
        name: "grad",
        pass: worst < 1e-4 && has_memory,
        metric: format!("max_rel_err={worst:.3e} worst={where_} scalars={scalars}"),
    })
}

fn mask() -> Result<Check> {
    let mut mismatches = 0;
    let mut compared = 0;
    for m in [1usize, 2, 3, 8] {
        for n in 1..=40 {
            let got = block_causal_mask(&BlockPlan::uniform(m, n)?);
            for i in 0..n {
                for j in 0..n {
                    compared += 1;
                    if got.get(i, j) != (j / m <= i / m) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let standard = block_causal_mask(&BlockPlan::standard(4)?);
    let boundary = standard.get(6, 5) && !standard.get(5, 6) && standard.get(14, 13) && !standard.get(13, 14);
    Ok(Check {
        name: "mask",
        pass: mismatches == 0 && boundary,
        metric: format!("mismatches={mismatches} entries={compared} standard_plan_boundaries={boundary}"),
    })
}

fn generation_model(model: Option<&DenoiserParams>, seed: u64) -> Result<DenoiserParams> {
    Ok(match model {
        Some(p) => p.clone(),
        None => DenoiserParams::init(DenoiserConfig::default(), seed)?.randomized(seed + 1, 0.05),
    })
}

fn inputs(p: &DenoiserParams, seed: u64) -> (Tensor, Tensor) {
    let mut rng = SeededRng::new(seed);
    let c = p.config();
    (
        rng.normal_tensor(&[2, c.d_latent], 1.0),
        rng.normal_tensor(&[COND_TOKENS, c.d_cond], 1.0),
    )
}

fn cache_equivalence(model: Option<&DenoiserParams>, seed: u64) -> Result<Check> {
    let p = generation_model(model, seed)?;
    let plan = BlockPlan::standard(4)?;
    let sampler = SamplerConfig::uniform(3)?;
    let mut worst: f64 = 0.0;
    for s in 0..3 {
        let (x_ref, cond) = inputs(&p, seed + 10 + s);
        let (cached, _) = generate_stream(&p, &x_ref, &cond, &plan, &sampler, RollPolicy::Unbounded, s)?;
        let full = generate_full_recompute(&p, &x_ref, &cond, &plan, &sampler, s)?;
        worst = worst.max(cached.max_abs_diff(&full)?);
    }
    Ok(Check {
        name: "cache-equivalence",
        pass: worst <= 1e-10,
        metric: format!("max_abs_diff={worst:.3e} seeds=3 blocks=4 steps=3"),
    })
}

fn memory_bound(model: Option<&DenoiserParams>, seed: u64) -> Result<Check> {
    let p = generation_model(model, seed)?;
    let sampler = SamplerConfig::uniform(3)?;
    let (x_ref, cond) = inputs(&p, seed + 20);
    let long = BlockPlan::standard(60)?;
    let (_, bounded) = generate_stream(&p, &x_ref, &cond, &long, &sampler, RollPolicy::ConvKv, seed)?;
    let c = p.config();
    let per_chunk = 2 * c.n_layers * c.d_model;
    let bounded_ok = bounded.context_chunks[2..].iter().all(|&n| n == 6)
        && bounded.context_floats[2..].windows(2).all(|w| w[0] == w[1])
        && bounded.stored_floats.iter().all(|&f| f < (6 + c.lambda) * per_chunk);
    let short = BlockPlan::standard(10)?;
    let (_, grow) = generate_stream(&p, &x_ref, &cond, &short, &sampler, RollPolicy::Unbounded, seed)?;
    let growth_ok = grow
        .history_chunks
        .iter()
        .enumerate()
        .all(|(b, &h)| h == if b == 0 { 0 } else { 6 + 8 * (b - 1) });
    Ok(Check {
        name: "memory-bound",
        pass: bounded_ok && growth_ok,
        metric: format!(
            "convkv_context_from_block3={:?} unbounded_history_block10={}",
            bounded.context_chunks[2..].iter().max(),
            grow.history_chunks.last().copied().unwrap_or(0)
        ),
    })
}

fn ledger(seed: u64) -> Result<Check> {
    const D: usize = 8;
    let mut rng = SeededRng::new(seed);
    let lambda = 5;
    let mut cache = SegmentedKvCache::new(0.5, 2, D, lambda, RollPolicy::ConvKv)?;
    let kv = |rng: &mut SeededRng, n: usize| -> Vec<LayerKv> {
        (0..2)
            .map(|_| LayerKv {
                k: rng.normal_tensor(&[n, D], 1.0),
                v: rng.normal_tensor(&[n, D], 1.0),
            })
            .collect()
    };
    let reference = kv(&mut rng, 2);
    cache.set_reference(0.5, &reference)?;
    let weights = CompressorWeights::averaging(2, D, lambda);
    let mut exact = true;
    let mut pending_ok = true;
    let mut evicted = 0;
    for roll in 0..100 {
        let n = if roll == 0 { 6 } else { 8 };
        let block = kv(&mut rng, n);
        cache.cache_append(0.5, &block, n)?;
        cache.cache_roll(&weights)?;
        let cov = cache.coverage();
        exact &= cov.is_exact();
        pending_ok &= cache.pending_len() < lambda;
        evicted = cov.evicted;
    }
    Ok(Check {
        name: "ledger",
        pass: exact && pending_ok,
        metric: format!("rolls=100 evicted={evicted} exact={exact} pending_below_lambda={pending_ok}"),
    })
}
