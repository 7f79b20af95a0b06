use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use neighbor_forcing::convkv::RollPolicy;
use neighbor_forcing::io::{load_checkpoint, save_checkpoint, save_latents, Checkpoint};
use neighbor_forcing::model::{DenoiserParams, MaskMode};
use neighbor_forcing::numerics::{Dtype, Tensor};
use neighbor_forcing::schedule::SamplerConfig;
use neighbor_forcing::streaming::{bench_overhead, generate_stream, zero_shot_experiment, HistoryMode, ZeroShotCase};
use neighbor_forcing::synthdata::make_dataset;
use neighbor_forcing::training::{smoothed_endpoints, train_stage1, train_stage2_convkv, window, Stage, SMOOTHING};

use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset, LoadedDataset};
use crate::{BenchArgs, DataArgs, GenerateArgs, OnOff, Outcome, TrainArgs, UsageError, ZeroShotArgs};

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.render()).with_context(|| format!("writing into {}", dir.display()))?;
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn data(cfg: &mut RunConfig, a: DataArgs) -> Result<Outcome> {
    cfg.apply("data_seed", a.seed)?;
    cfg.apply("sequences", a.sequences)?;
    cfg.apply("frames", a.frames)?;
    cfg.apply("delta_u", a.delta_u)?;
    cfg.apply("eps_r", a.eps_r)?;
    cfg.apply("state_dim", a.state_dim)?;
    cfg.apply("latent_dim", a.latent_dim)?;
    cfg.apply("ambient_dim", a.ambient_dim)?;
    cfg.apply("nonlinearity", a.nonlinearity)?;
    let dynamics = cfg.dynamics().map_err(|e| usage(format!("{e:#}")))?;
    let data = make_dataset(&dynamics, cfg.get("sequences")?, cfg.get("frames")?, cfg.get("data_seed")?)?;
    prepare_out(&a.out, cfg)?;
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} sequences of {} frames to {} (L_E={:.6} L_g={:.6} bound={:.6})",
        data.sequences.len(),
        data.frames(),
        a.out.display(),
        data.dynamics.lipschitz_encoder(),
        data.dynamics.lipschitz_render(),
        data.dynamics.neighbor_bound()
    );
    Ok(Outcome::Success)
}

fn write_loss_csv(path: &Path, curve: &[neighbor_forcing::training::LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "t_mean"])?;
    for r in curve {
        w.write_record([r.step.to_string(), format!("{:e}", r.loss), format!("{}", r.t_mean)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<Outcome> {
    cfg.apply("stage", a.stage)?;
    cfg.apply("steps", a.steps)?;
    cfg.apply("seed", a.seed)?;
    cfg.apply("mask", a.mask)?;
    cfg.apply("batch_size", a.batch_size)?;
    cfg.apply("lr", a.lr)?;
    cfg.apply("train_blocks", a.train_blocks)?;
    cfg.apply("target_loss", a.target_loss)?;
    cfg.apply("freeze_denoiser", a.freeze_denoiser)?;
    cfg.apply("d_model", a.d_model)?;
    cfg.apply("d_ff", a.d_ff)?;
    cfg.apply("n_layers", a.n_layers)?;
    cfg.apply("n_heads", a.n_heads)?;
    let tcfg = cfg.training().map_err(|e| usage(format!("{e:#}")))?;
    let data = read_dataset(&a.data)?;

    let (init, mut meta) = match (tcfg.stage, &a.init) {
        (Stage::One, _) => {
            let model = cfg.model(data.latent_dim(), data.cond_dim()).map_err(|e| usage(format!("{e:#}")))?;
            (DenoiserParams::init(model, tcfg.seed)?, BTreeMap::new())
        }
        (Stage::Two, None) => return Err(usage("stage 2 requires --init <stage-1 checkpoint>")),
        (Stage::Two, Some(path)) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            (ckpt.params, ckpt.meta)
        }
    };
    let run = match tcfg.stage {
        Stage::One => train_stage1(&tcfg, &data.sequences, init)?,
        Stage::Two => train_stage2_convkv(&tcfg, &data.sequences, init)?,
    };
    let stage = if tcfg.stage == Stage::One { "1" } else { "2" };
    meta.insert(format!("stage{stage}_steps"), run.curve.len().to_string());
    meta.insert("stage".into(), stage.into());
    if tcfg.stage == Stage::One {
        meta.insert("mask".into(), tcfg.mask.name().into());
        meta.insert("train_chunks".into(), tcfg.plan.n_chunks().to_string());
    }
    meta.insert("seed".into(), tcfg.seed.to_string());
    prepare_out(&a.out, cfg)?;
    save_checkpoint(&a.out.join("model.ckpt"), &Checkpoint { params: run.params, meta }, Dtype::F64)?;
    write_loss_csv(&a.out.join("loss.csv"), &run.curve)?;
    if let Some((first, last)) = smoothed_endpoints(&run.curve, SMOOTHING.min(run.curve.len()).max(1)) {
        println!("smoothed loss {first:.6e} -> {last:.6e} over {} steps", run.curve.len());
    }
    if let Some(step) = run.diverged_at {
        bail!("training diverged at step {step}; last finite parameters saved");
    }
    Ok(Outcome::Success)
}

/// Reference, condition and checkpoint for a generation command.
fn load_inputs(ckpt: &Path, data: &Path, sequence: usize, chunks: usize) -> Result<(Checkpoint, Tensor, Tensor)> {
    let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data: LoadedDataset = read_dataset(data)?;
    let seq = data
        .sequences
        .get(sequence)
        .ok_or_else(|| usage(format!("dataset has no sequence {sequence}")))?;
    let w = window(seq, 0, chunks.min(seq.latents.frames()))?;
    Ok((ckpt, w.reference, w.cond))
}

pub fn generate(cfg: &mut RunConfig, a: GenerateArgs) -> Result<Outcome> {
    cfg.apply("blocks", a.blocks)?;
    cfg.apply("sampler_steps", a.steps)?;
    cfg.apply(
        "convkv",
        a.convkv.map(|c| match c {
            OnOff::On => "on",
            OnOff::Off => "off",
        }),
    )?;
    cfg.apply("seed", a.seed)?;
    cfg.apply("sequence", a.sequence)?;
    cfg.apply("precision", a.precision)?;
    let plan = cfg.plan(cfg.get("blocks")?).map_err(|e| usage(format!("{e:#}")))?;
    let sampler = SamplerConfig::uniform(cfg.get("sampler_steps")?).map_err(|e| usage(e.to_string()))?;
    let policy = if cfg.flag("convkv")? { RollPolicy::ConvKv } else { RollPolicy::Unbounded };
    let seed: u64 = cfg.get("seed")?;
    let (ckpt, x_ref, cond) = load_inputs(&a.ckpt, &a.data, cfg.get("sequence")?, plan.n_chunks())?;
    prepare_out(&a.out, cfg)?;
    let out = a.out.join("latents.lat");
    let report = match cfg.raw("precision") {
        "f64" => {
            let (z, report) = generate_stream(&ckpt.params, &x_ref, &cond, &plan, &sampler, policy, seed)?;
            save_latents(&out, &z)?;
            report
        }
        "f32" => {
            let p = ckpt.params.cast::<f32>();
            let (z, report) = generate_stream(&p, &x_ref.cast(), &cond.cast(), &plan, &sampler, policy, seed)?;
            save_latents(&out, &z)?;
            report
        }
        other => return Err(usage(format!("precision must be f64 or f32, got {other:?}"))),
    };
    let mut w = csv::Writer::from_path(a.out.join("report.csv"))?;
    w.write_record(["block", "seconds", "context_chunks", "history_chunks", "context_floats", "stored_floats"])?;
    for b in 0..report.block_seconds.len() {
        w.write_record([
            (b + 1).to_string(),
            format!("{:e}", report.block_seconds[b]),
            report.context_chunks[b].to_string(),
            report.history_chunks[b].to_string(),
            report.context_floats[b].to_string(),
            report.stored_floats[b].to_string(),
        ])?;
    }
    w.flush()?;
    let series: Vec<String> = report.context_chunks.iter().map(|c| c.to_string()).collect();
    println!("context chunks per block: {}", series.join(" "));
    println!("chunks generated: {}  discontinuity: {:.4}", report.total_chunks, report.discontinuity);
    Ok(Outcome::Success)
}

pub fn bench(cfg: &mut RunConfig, a: BenchArgs) -> Result<Outcome> {
    cfg.apply("blocks", Some(a.blocks))?;
    cfg.apply("reps", a.reps)?;
    cfg.apply("sampler_steps", a.steps)?;
    let plan = cfg.plan(a.blocks).map_err(|e| usage(format!("{e:#}")))?;
    let sampler = SamplerConfig::uniform(cfg.get("sampler_steps")?).map_err(|e| usage(e.to_string()))?;
    let (ckpt, x_ref, cond) = load_inputs(&a.ckpt, &a.data, cfg.get("sequence")?, plan.n_chunks())?;
    prepare_out(&a.out, cfg)?;
    let r = bench_overhead(&ckpt.params, &x_ref, &cond, &plan, &sampler, cfg.get("reps")?, cfg.get("warmup")?)?;
    let mut w = csv::Writer::from_path(a.out.join("bench.csv"))?;
    w.write_record(["block", "convkv_seconds", "nocompress_seconds", "unbounded_seconds"])?;
    for b in 0..plan.n_blocks() {
        w.write_record([
            (b + 1).to_string(),
            format!("{:e}", r.convkv[b]),
            format!("{:e}", r.nocompress[b]),
            format!("{:e}", r.unbounded[b]),
        ])?;
    }
    w.flush()?;
    let last = plan.n_blocks() - 1;
    println!(
        "steady per-block latency: convkv {:.3} ms, same context without compression {:.3} ms",
        r.steady_convkv * 1e3,
        r.steady_nocompress * 1e3
    );
    println!("compression overhead: {:+.2}%", 100.0 * r.overhead);
    println!(
        "block {}: convkv {:.3} ms, unbounded cache {:.3} ms",
        last + 1,
        r.convkv[last] * 1e3,
        r.unbounded[last] * 1e3
    );
    Ok(Outcome::Success)
}

pub fn zeroshot(cfg: &mut RunConfig, a: ZeroShotArgs) -> Result<Outcome> {
    cfg.apply("zeroshot_seeds", a.seeds)?;
    cfg.apply("blocks", a.blocks)?;
    cfg.apply("sampler_steps", a.steps)?;
    let plan = cfg.plan(cfg.get("blocks")?).map_err(|e| usage(format!("{e:#}")))?;
    let sampler = SamplerConfig::uniform(cfg.get("sampler_steps")?).map_err(|e| usage(e.to_string()))?;
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    match ckpt.meta.get("mask").map(|m| MaskMode::parse(m)) {
        Some(Some(MaskMode::None)) => {}
        _ => {
            return Err(usage(
                "the zero-shot experiment needs a checkpoint trained with --mask none; this one was trained causally",
            ))
        }
    }
    let data = read_dataset(&a.data)?;
    let n: usize = cfg.get("zeroshot_seeds")?;
    let windows = (0..n)
        .map(|i| window(&data.sequences[i % data.sequences.len()], 0, plan.n_chunks()))
        .collect::<neighbor_forcing::Result<Vec<_>>>()
        .map_err(|e| usage(format!("dataset too short for {} chunks: {e}", plan.n_chunks())))?;
    let cases: Vec<ZeroShotCase> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| ZeroShotCase {
            reference: &w.reference,
            cond: &w.cond,
            seed: i as u64,
        })
        .collect();
    let results = zero_shot_experiment(&ckpt.params, &plan, &sampler, &HistoryMode::ALL, &cases)?;
    prepare_out(&a.out, cfg)?;
    let mut w = csv::Writer::from_path(a.out.join("zeroshot.csv"))?;
    let mut header = vec!["variant".to_string(), "median".to_string()];
    header.extend((0..n).map(|i| format!("seed{i}")));
    w.write_record(&header)?;
    println!("{:<18} {:>10}", "variant", "median");
    for r in &results {
        let mut row = vec![r.variant.name().to_string(), format!("{}", r.median)];
        row.extend(r.scores.iter().map(|s| format!("{s}")));
        w.write_record(&row)?;
        println!("{:<18} {:>10.4}", r.variant.name(), r.median);
    }
    w.flush()?;
    Ok(Outcome::Success)
}
