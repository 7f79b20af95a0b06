//! Stage-1 Neighbor Forcing training and stage-2 compressor training.
//!
//! Every chunk of a training window is noised at the same step `t`; the
//! model regresses the flow-matching velocity `ε − x0` under a block-causal
//! mask. Stage 2 appends compressed memory tokens to the key axis and hides
//! the raw chunks they summarize, reproducing what each block sees at
//! inference with the segmented cache.

use std::collections::VecDeque;

use crate::convkv::{LONG_TERM_CAPACITY, SHORT_TERM_CHUNKS};
use crate::error::{Error, Result};
use crate::model::{
    denoiser_forward, sequence_mask, AttentionMask, BlockPlan, DenoiserParams, ForwardArgs, MaskMode,
    MemorySpan, ParamGroup, REFERENCE_TOKENS,
};
use crate::numerics::{finite_difference_grad, max_relative_error, SeededRng, Tape, Tensor, Var};
use crate::schedule::{noise_forward, velocity_target};
use crate::synthdata::{condition_from_states, SequenceRecord, REFERENCE_FRAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub t_min: f64,
    pub t_max: f64,
    pub stage: Stage,
    pub plan: BlockPlan,
    pub mask: MaskMode,
    /// Stage 2 only: keep denoiser weights fixed and train the compressor.
    pub freeze_denoiser: bool,
    pub log_every: usize,
    /// Stop once the 50-step moving average of the loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            t_min: 0.02,
            t_max: 0.98,
            stage: Stage::One,
            plan: BlockPlan::standard(3).expect("non-empty"),
            mask: MaskMode::BlockCausal,
            freeze_denoiser: true,
            log_every: 1,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr must be ≥ 0 and batch_size ≥ 1".into()));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!("bad t-range [{}, {}]", self.t_min, self.t_max)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("bad Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Adam without weight decay or schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Apply one update from `(parameter index, gradient)` pairs.
    pub fn update(&mut self, params: &mut DenoiserParams, grads: &[(usize, Tensor)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads {
            let m = self.m[*i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[*i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.tensor_mut(*i);
            for (((pj, mj), vj), gj) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *pj -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A clean training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub reference: Tensor,
    pub x0: Tensor,
    pub cond: Tensor,
}

/// A window noised at one shared step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedWindow {
    pub tokens: Tensor,
    pub positions: Vec<usize>,
    pub target: Tensor,
    pub cond: Tensor,
    pub t: f64,
}

impl NoisedWindow {
    pub fn new(w: &Window, t: f64, eps: &Tensor) -> Result<Self> {
        // one t for the whole window: every chunk sits at the same step
        let xt = noise_forward(&w.x0, t, eps)?;
        let tokens = Tensor::concat_rows(&[&w.reference, &xt])?;
        Ok(Self {
            positions: (0..tokens.rows()).collect(),
            tokens,
            target: velocity_target(&w.x0, eps)?,
            cond: w.cond.clone(),
            t,
        })
    }
}

/// Window of `n` frames starting at `offset`, conditioned on its own states.
pub fn window(seq: &SequenceRecord, offset: usize, n: usize) -> Result<Window> {
    let frames = seq.latents.frames();
    if offset + n > frames {
        return Err(Error::Invalid(format!(
            "window {offset}+{n} exceeds sequence of {frames} frames"
        )));
    }
    let lo = REFERENCE_FRAMES + offset;
    Ok(Window {
        reference: seq.reference.clone(),
        x0: seq.latents.values().slice_rows(offset, offset + n)?,
        cond: condition_from_states(&seq.states.slice_rows(lo, lo + n)?),
    })
}

pub fn sample_windows(data: &[SequenceRecord], n: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<Window>> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    (0..count)
        .map(|_| {
            let seq = &data[rng.below(data.len())];
            let span = seq.latents.frames().checked_sub(n).ok_or_else(|| {
                Error::Invalid(format!("sequence of {} frames shorter than plan", seq.latents.frames()))
            })?;
            window(seq, rng.below(span + 1), n)
        })
        .collect()
}

/// One step per batch element, stratified over `[t_min, t_max]`.
pub fn stratified_times(batch: usize, t_min: f64, t_max: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..batch)
        .map(|i| t_min + (t_max - t_min) * (i as f64 + rng.uniform()) / batch as f64)
        .collect()
}

pub fn noise_batch(windows: &[Window], times: &[f64], rng: &mut SeededRng) -> Result<Vec<NoisedWindow>> {
    windows
        .iter()
        .zip(times)
        .map(|(w, &t)| NoisedWindow::new(w, t, &rng.normal_tensor(w.x0.shape(), 1.0)))
        .collect()
}

/// Mean squared velocity error over all chunks and batch elements.
pub fn neighbor_forcing_loss<'a>(
    tape: &mut Tape<'a>,
    params: &DenoiserParams,
    vars: &[Var],
    batch: &'a [NoisedWindow],
    mask: &'a AttentionMask,
    memory: &'a [MemorySpan],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch[0].tokens.rows();
    let mut total: Option<Var> = None;
    for item in batch {
        if item.tokens.rows() != n {
            return Err(Error::shape("batch", item.tokens.shape(), batch[0].tokens.shape()));
        }
        let out = denoiser_forward(
            tape,
            params,
            vars,
            &ForwardArgs {
                tokens: &item.tokens,
                n_ref: REFERENCE_TOKENS,
                positions: &item.positions,
                t: item.t,
                cond: &item.cond,
                context: None,
                memory,
                mask,
            },
        )?;
        let target = tape.constant(&item.target);
        let l = tape.mse(out.velocity.expect("window has chunks"), target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
}

/// Loss value and gradients for the parameters selected by `trainable`.
pub fn loss_and_grads(
    params: &DenoiserParams,
    batch: &[NoisedWindow],
    mask: &AttentionMask,
    memory: &[MemorySpan],
    trainable: &dyn Fn(usize) -> bool,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, trainable);
    let loss = neighbor_forcing_loss(&mut tape, params, &vars, batch, mask, memory)?;
    let value = tape.value(loss).data()[0];
    let idx: Vec<usize> = (0..params.len()).filter(|&i| trainable(i)).collect();
    let leaves: Vec<Var> = idx.iter().map(|&i| vars[i]).collect();
    let grads = tape.grad_of(loss, &leaves)?;
    Ok((value, idx.into_iter().zip(grads).collect()))
}

pub fn loss_value(params: &DenoiserParams, batch: &[NoisedWindow], mask: &AttentionMask, memory: &[MemorySpan]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, |_| false);
    let loss = neighbor_forcing_loss(&mut tape, params, &vars, batch, mask, memory)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    /// Parameter tensor holding the worst entry.
    pub worst: String,
    pub scalars: usize,
}

/// Tape gradients of every parameter against central differences of the
/// loss with step `h`; relative errors use `floor` as the smallest scale.
pub fn gradient_check(
    params: &DenoiserParams,
    batch: &[NoisedWindow],
    mask: &AttentionMask,
    memory: &[MemorySpan],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_grads(params, batch, mask, memory, &|_| true)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        scalars: 0,
    };
    for (i, analytic) in grads {
        let original = params.tensor(i).clone();
        let mut failure = None;
        let numeric = finite_difference_grad(
            |x: &Tensor| {
                *probe.tensor_mut(i) = x.clone();
                loss_value(&probe, batch, mask, memory).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &original,
            h,
        );
        *probe.tensor_mut(i) = original;
        if let Some(e) = failure {
            return Err(e);
        }
        let rel = max_relative_error(&analytic, &numeric, floor);
        if !(rel <= report.max_rel) {
            report.max_rel = rel;
            report.worst = params.names()[i].clone();
        }
        report.scalars += analytic.len();
    }
    Ok(report)
}

/// Window of the moving average used for loss reporting and early stop.
pub const SMOOTHING: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: DenoiserParams,
    pub curve: Vec<LossRecord>,
    /// Step at which the loss or a gradient became non-finite; `params`
    /// then holds the last finite state.
    pub diverged_at: Option<usize>,
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_endpoints(curve: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if curve.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..window]), mean(&curve[curve.len() - window..])))
}

/// Trailing moving average of the loss.
pub fn moving_average(curve: &[LossRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, r) in curve.iter().enumerate() {
        acc += r.loss;
        if i >= window {
            acc -= curve[i - window].loss;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Mask and memory layout used for a training window under `cfg`.
pub fn training_layout(cfg: &TrainConfig, lambda: usize) -> Result<(AttentionMask, Vec<MemorySpan>)> {
    match cfg.stage {
        Stage::One => Ok((sequence_mask(&cfg.plan, REFERENCE_TOKENS, cfg.mask), Vec::new())),
        Stage::Two => {
            let spec = CompressSpec::streaming(&cfg.plan, lambda)?;
            let mask = build_stage2_mask(&cfg.plan, &spec)?;
            Ok((mask, spec.memory_spans()))
        }
    }
}

fn run(
    cfg: &TrainConfig,
    data: &[SequenceRecord],
    init: DenoiserParams,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<TrainRun> {
    cfg.validate()?;
    let (mask, memory) = training_layout(cfg, init.config().lambda)?;
    let n = cfg.plan.n_chunks();
    let mut rng = SeededRng::with_stream(cfg.seed, 0x7121);
    let mut adam = Adam::new(cfg, init.len());
    let mut params = init;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(SMOOTHING + 1);
    for step in 0..cfg.steps {
        let windows = sample_windows(data, n, cfg.batch_size, &mut rng)?;
        let times = stratified_times(cfg.batch_size, cfg.t_min, cfg.t_max, &mut rng);
        let batch = noise_batch(&windows, &times, &mut rng)?;
        let (loss, grads) = loss_and_grads(&params, &batch, &mask, &memory, trainable)?;
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Ok(TrainRun {
                params,
                curve,
                diverged_at: Some(step),
            });
        }
        let mut next = params.clone();
        adam.update(&mut next, &grads);
        if !next.is_finite() {
            return Ok(TrainRun {
                params,
                curve,
                diverged_at: Some(step),
            });
        }
        params = next;
        if step % cfg.log_every.max(1) == 0 {
            curve.push(LossRecord {
                step,
                loss,
                t_mean: times.iter().sum::<f64>() / times.len() as f64,
            });
        }
        recent.push_back(loss);
        if recent.len() > SMOOTHING {
            recent.pop_front();
        }
        if let Some(target) = cfg.target_loss {
            if recent.len() == SMOOTHING && recent.iter().sum::<f64>() / (SMOOTHING as f64) < target {
                break;
            }
        }
    }
    Ok(TrainRun {
        params,
        curve,
        diverged_at: None,
    })
}

/// Stage 1: train the denoiser under the configured mask.
pub fn train_stage1(cfg: &TrainConfig, data: &[SequenceRecord], init: DenoiserParams) -> Result<TrainRun> {
    let cfg = TrainConfig {
        stage: Stage::One,
        ..cfg.clone()
    };
    let groups: Vec<ParamGroup> = (0..init.len()).map(|i| init.group(i)).collect();
    run(&cfg, data, init, &|i| groups[i] == ParamGroup::Denoiser)
}

/// Stage 2: train the compressor (and optionally the denoiser) with memory
/// tokens standing in for compressed history.
pub fn train_stage2_convkv(cfg: &TrainConfig, data: &[SequenceRecord], init: DenoiserParams) -> Result<TrainRun> {
    let cfg = TrainConfig {
        stage: Stage::Two,
        ..cfg.clone()
    };
    let groups: Vec<ParamGroup> = (0..init.len()).map(|i| init.group(i)).collect();
    let freeze = cfg.freeze_denoiser;
    run(&cfg, data, init, &|i| !freeze || groups[i] == ParamGroup::Compressor)
}

/// A run of raw chunks replaced by memory tokens for some query blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedSpan {
    pub start: usize,
    pub len: usize,
    /// Blocks whose queries read the memory tokens instead of the raw chunks.
    pub consumers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressSpec {
    pub lambda: usize,
    pub spans: Vec<CompressedSpan>,
    /// Per block, the earlier raw chunks it may still read. `None` leaves
    /// every earlier chunk not hidden by a consumed span readable.
    pub raw_visible: Option<Vec<Vec<usize>>>,
}

impl CompressSpec {
    pub fn none(lambda: usize) -> Self {
        Self {
            lambda,
            spans: Vec::new(),
            raw_visible: None,
        }
    }

    /// What every block of `plan` sees under the segmented cache: the
    /// short-term chunks raw, the long-term memory tokens, and nothing else.
    pub fn streaming(plan: &BlockPlan, lambda: usize) -> Result<Self> {
        if lambda == 0 {
            return Err(Error::Invalid("λ must be positive".into()));
        }
        let mut short: Vec<usize> = Vec::new();
        let mut pending: VecDeque<usize> = VecDeque::new();
        let mut long: VecDeque<usize> = VecDeque::new();
        let mut consumers: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut raw_visible = Vec::with_capacity(plan.n_blocks());
        for b in 0..plan.n_blocks() {
            raw_visible.push(short.clone());
            for &start in &long {
                match consumers.iter_mut().find(|(s, _)| *s == start) {
                    Some((_, c)) => c.push(b),
                    None => consumers.push((start, vec![b])),
                }
            }
            let chunks: Vec<usize> = plan.block_range(b).collect();
            let keep = chunks.len().saturating_sub(SHORT_TERM_CHUNKS);
            let (older, newest) = chunks.split_at(keep);
            let displaced = if newest.len() >= SHORT_TERM_CHUNKS {
                std::mem::replace(&mut short, newest.to_vec())
            } else {
                short.extend_from_slice(newest);
                let over = short.len().saturating_sub(SHORT_TERM_CHUNKS);
                let rest = short.split_off(over);
                std::mem::replace(&mut short, rest)
            };
            pending.extend(displaced);
            pending.extend(older);
            while pending.len() >= lambda {
                let window: Vec<usize> = pending.drain(..lambda).collect();
                long.push_back(window[0]);
                while long.len() > LONG_TERM_CAPACITY {
                    long.pop_front();
                }
            }
        }
        Ok(Self {
            lambda,
            spans: consumers
                .into_iter()
                .map(|(start, consumers)| CompressedSpan {
                    start,
                    len: lambda,
                    consumers,
                })
                .collect(),
            raw_visible: Some(raw_visible),
        })
    }

    pub fn memory_spans(&self) -> Vec<MemorySpan> {
        self.spans
            .iter()
            .map(|s| MemorySpan {
                start: s.start,
                len: s.len,
            })
            .collect()
    }

    pub fn memory_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len / self.lambda.max(1)).sum()
    }
}

/// Training mask over `reference ∥ chunks ∥ memory tokens`.
pub fn build_stage2_mask(plan: &BlockPlan, spec: &CompressSpec) -> Result<AttentionMask> {
    let n = plan.n_chunks();
    let mut spans = spec.spans.clone();
    spans.sort_by_key(|s| s.start);
    for s in &spans {
        if s.len == 0 || spec.lambda == 0 || s.len % spec.lambda != 0 || s.start + s.len > n {
            return Err(Error::Invalid(format!("span {s:?} invalid for λ={}", spec.lambda)));
        }
        let last_block = plan.block_of(s.start + s.len - 1);
        if let Some(&c) = s.consumers.iter().find(|&&c| c <= last_block || c >= plan.n_blocks()) {
            return Err(Error::Invalid(format!("block {c} cannot read span {s:?}")));
        }
    }
    if spans.windows(2).any(|w| w[0].start + w[0].len > w[1].start) {
        return Err(Error::Invalid("compressed spans overlap".into()));
    }
    if spans != spec.spans {
        return Err(Error::Invalid("compressed spans must be listed in chunk order".into()));
    }
    if let Some(rv) = &spec.raw_visible {
        if rv.len() != plan.n_blocks() {
            return Err(Error::Invalid("raw visibility must list every block".into()));
        }
    }
    // memory column -> span index
    let mem_cols: Vec<usize> = spans
        .iter()
        .enumerate()
        .flat_map(|(i, s)| std::iter::repeat(i).take(s.len / spec.lambda))
        .collect();
    let r = REFERENCE_TOKENS;
    let rows = r + n;
    let cols = rows + mem_cols.len();
    let block: Vec<usize> = (0..n).map(|c| plan.block_of(c)).collect();
    AttentionMask::from_fn(rows, cols, |i, j| {
        if i < r {
            return j < r;
        }
        let bi = block[i - r];
        if j < r {
            return true;
        }
        if j >= rows {
            return spans[mem_cols[j - rows]].consumers.contains(&bi);
        }
        let c = j - r;
        let bj = block[c];
        if bj == bi {
            return true;
        }
        if bj > bi {
            return false;
        }
        match &spec.raw_visible {
            Some(rv) => rv[bi].contains(&c),
            None => !spans
                .iter()
                .any(|s| (s.start..s.start + s.len).contains(&c) && s.consumers.contains(&bi)),
        }
    })
}

/// Chunks in a 1-D subspace: every chunk and both reference frames of a
/// sequence equal `a·w` for a per-sequence scalar `a`, which the condition
/// also encodes. The clean endpoint is therefore determined by the context
/// and the velocity is an affine function of the noisy input.
pub fn micro_dataset(n_sequences: usize, frames: usize, d: usize, state_dim: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
    let mut rng = SeededRng::with_stream(seed, 0x31C);
    let w: Vec<f64> = {
        let v = rng.normal_vec(d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    (0..n_sequences)
        .map(|_| {
            let a = rng.uniform_range(-1.5, 1.5);
            let row: Vec<f64> = w.iter().map(|x| a * x).collect();
            let all = Tensor::from_rows(&vec![row; frames + REFERENCE_FRAMES])?;
            let states = Tensor::full(&[frames + REFERENCE_FRAMES, state_dim], a);
            Ok(SequenceRecord {
                condition: condition_from_states(&states.slice_rows(REFERENCE_FRAMES, frames + REFERENCE_FRAMES)?),
                reference: all.slice_rows(0, REFERENCE_FRAMES)?,
                latents: crate::synthdata::LatentSequence::new(all.slice_rows(REFERENCE_FRAMES, frames + REFERENCE_FRAMES)?)?,
                states,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{block_causal_mask, DenoiserConfig};
    use crate::synthdata::{make_dataset, DynamicsConfig};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            d_ff: 32,
            ..Default::default()
        }
    }

    fn data() -> Vec<SequenceRecord> {
        make_dataset(&DynamicsConfig::default(), 3, 30, 1).unwrap().sequences
    }

    fn batch(plan: &BlockPlan, seed: u64) -> Vec<NoisedWindow> {
        let mut rng = SeededRng::new(seed);
        let w = sample_windows(&data(), plan.n_chunks(), 2, &mut rng).unwrap();
        let t = stratified_times(2, 0.02, 0.98, &mut rng);
        noise_batch(&w, &t, &mut rng).unwrap()
    }

    #[test]
    fn zero_model_loss_is_mean_target_energy() {
        let p = DenoiserParams::init(small(), 1).unwrap();
        let plan = BlockPlan::standard(2).unwrap();
        let b = batch(&plan, 2);
        let mask = sequence_mask(&plan, 2, MaskMode::BlockCausal);
        let loss = loss_value(&p, &b, &mask, &[]).unwrap();
        let expected = b.iter().map(|w| w.target.norm_sq() / w.target.len() as f64).sum::<f64>() / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        // a perfect predictor scores zero
        let mut tape = Tape::new();
        let y = tape.constant(&b[0].target);
        let l = tape.mse(y, y).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn every_chunk_shares_the_step() {
        let plan = BlockPlan::standard(2).unwrap();
        let mut rng = SeededRng::new(3);
        let w = &sample_windows(&data(), plan.n_chunks(), 1, &mut rng).unwrap()[0];
        let eps = rng.normal_tensor(w.x0.shape(), 1.0);
        let nw = NoisedWindow::new(w, 0.3, &eps).unwrap();
        for f in 0..w.x0.rows() {
            for j in 0..w.x0.cols() {
                let want = 0.7 * w.x0.at(f, j) + 0.3 * eps.at(f, j);
                assert_eq!(nw.tokens.at(f + 2, j), want);
            }
        }
        assert_eq!(nw.tokens.slice_rows(0, 2).unwrap(), w.reference);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let p = DenoiserParams::init(small(), 1).unwrap().randomized(2, 0.1);
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 1,
            plan: BlockPlan::standard(2).unwrap(),
            ..Default::default()
        };
        let run = train_stage1(&cfg, &data(), p.clone()).unwrap();
        assert_eq!(run.params, p);
    }

    #[test]
    fn runs_are_reproducible() {
        let p = DenoiserParams::init(small(), 1).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            plan: BlockPlan::standard(2).unwrap(),
            ..Default::default()
        };
        let a = train_stage1(&cfg, &data(), p.clone()).unwrap();
        let b = train_stage1(&cfg, &data(), p).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
        assert!(a.curve.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn stage2_mask_without_spans_is_block_causal() {
        let plan = BlockPlan::standard(3).unwrap();
        let m = build_stage2_mask(&plan, &CompressSpec::none(5)).unwrap();
        assert_eq!(m, sequence_mask(&plan, 2, MaskMode::BlockCausal));
        let causal = block_causal_mask(&plan);
        for i in 0..plan.n_chunks() {
            for j in 0..plan.n_chunks() {
                assert_eq!(m.get(i + 2, j + 2), causal.get(i, j));
            }
        }
    }

    #[test]
    fn span_is_hidden_behind_memory() {
        // blocks 1–2 of a (6, 8, 8, 8, 8) plan: chunks 6..21, 15 of them
        // compressed (three windows), read by block 4
        let plan = BlockPlan::standard(5).unwrap();
        let spec = CompressSpec {
            lambda: 5,
            spans: vec![CompressedSpan {
                start: 6,
                len: 15,
                consumers: vec![4],
            }],
            raw_visible: None,
        };
        let m = build_stage2_mask(&plan, &spec).unwrap();
        let rows = 2 + plan.n_chunks();
        assert_eq!(m.cols(), rows + 3);
        for i in plan.block_range(4) {
            for c in 6..21 {
                assert!(!m.get(i + 2, c + 2));
            }
            for k in 0..3 {
                assert!(m.get(i + 2, rows + k));
            }
            assert!(m.get(i + 2, 21 + 2));
        }
        for i in plan.block_range(3) {
            assert!(m.get(i + 2, 6 + 2));
            assert!(!m.get(i + 2, rows));
        }
        assert!((0..m.rows()).all(|i| m.admissible(i) >= 1));

        let overlapping = CompressSpec {
            lambda: 5,
            spans: vec![
                CompressedSpan { start: 0, len: 5, consumers: vec![2] },
                CompressedSpan { start: 3, len: 5, consumers: vec![2] },
            ],
            raw_visible: None,
        };
        assert!(build_stage2_mask(&plan, &overlapping).is_err());
    }

    #[test]
    fn memory_never_reduces_admissible_keys() {
        let plan = BlockPlan::standard(6).unwrap();
        let spec = CompressSpec::streaming(&plan, 5).unwrap();
        let with = build_stage2_mask(&plan, &spec).unwrap();
        let dropped = CompressSpec {
            spans: Vec::new(),
            ..spec.clone()
        };
        let without = build_stage2_mask(&plan, &dropped).unwrap();
        for i in 0..with.rows() {
            assert!(with.admissible(i) >= without.admissible(i));
        }
        // block 2 onward sees ref + 2 memory + 2 short-term + own block
        for b in 2..6 {
            let i = 2 + plan.block_range(b).start;
            assert_eq!(with.admissible(i), 2 + 2 + 2 + plan.sizes()[b]);
        }
        assert_eq!(with.admissible(2 + 6), 2 + 2 + 8);
    }

    #[test]
    fn compressor_gradient_only_through_memory() {
        let p = DenoiserParams::init(small(), 4).unwrap().randomized(5, 0.2);
        let plan = BlockPlan::standard(3).unwrap();
        let spec = CompressSpec::streaming(&plan, 5).unwrap();
        let b = batch(&plan, 6);
        let comp = |i: usize| p.group(i) == ParamGroup::Compressor;
        let mask = build_stage2_mask(&plan, &spec).unwrap();
        let (_, g) = loss_and_grads(&p, &b, &mask, &spec.memory_spans(), &comp).unwrap();
        assert!(g.iter().any(|(_, g)| g.norm_sq() > 0.0));
        let blind = CompressSpec {
            spans: spec
                .spans
                .iter()
                .map(|s| CompressedSpan { consumers: vec![], ..s.clone() })
                .collect(),
            ..spec.clone()
        };
        let mask = build_stage2_mask(&plan, &blind).unwrap();
        let (_, g) = loss_and_grads(&p, &b, &mask, &blind.memory_spans(), &comp).unwrap();
        assert!(g.iter().all(|(_, g)| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn micro_dataset_is_one_dimensional() {
        let d = micro_dataset(4, 30, 16, 4, 1).unwrap();
        let z = d[0].latents.values();
        assert!((1..30).all(|f| z.row(f) == z.row(0)));
        assert_eq!(d[0].reference.row(0), z.row(0));
    }
}
