//! Denoiser configuration and the flat, named parameter store.

use crate::error::{Error, Result};
use crate::numerics::{Real, SeededRng, Tape, Tensor, Var};

use super::rope::RopeFrequencies;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub d_cond: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    /// Compression ratio of the ConvKV compressor (kernel = stride).
    pub lambda: usize,
    /// Rotate compressed values to their span start as well as keys.
    pub rotate_memory_values: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_latent: 16,
            d_cond: 8,
            d_ff: 256,
            rope_base: 10000.0,
            lambda: 5,
            rotate_memory_values: false,
        }
    }
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("n_layers, n_heads and d_model must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even", self.head_dim()));
        }
        if self.d_latent == 0 || self.d_cond == 0 || self.d_ff == 0 {
            return bad("d_latent, d_cond and d_ff must be positive".into());
        }
        if self.lambda == 0 {
            return bad("lambda must be positive".into());
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn rope(&self) -> RopeFrequencies {
        RopeFrequencies::new(self.head_dim(), self.rope_base).expect("validated config")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Denoiser,
    Compressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    Normal(usize),
    Averaging,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub modulation_w: usize,
    pub modulation_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub cross_gamma: usize,
    pub cross_beta: usize,
    pub wcq: usize,
    pub wck: usize,
    pub wcv: usize,
    pub wco: usize,
    pub bco: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub compress_k_w: usize,
    pub compress_k_b: usize,
    pub compress_v_w: usize,
    pub compress_v_b: usize,
}

/// Index of every tensor in the flat store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub in_w: usize,
    pub in_b: usize,
    pub ref_embed: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub final_mod_w: usize,
    pub final_mod_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub layers: Vec<LayerSlots>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
    group: ParamGroup,
}

fn layout(cfg: &DenoiserConfig) -> (Vec<Entry>, Slots) {
    let mut entries: Vec<Entry> = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init, group: ParamGroup| {
        entries.push(Entry {
            name,
            shape: shape.to_vec(),
            init,
            group,
        });
        entries.len() - 1
    };
    let d = cfg.d_model;
    let den = ParamGroup::Denoiser;
    let in_w = add("input.w".into(), &[cfg.d_latent, d], Init::Normal(cfg.d_latent), den);
    let in_b = add("input.b".into(), &[d], Init::Zeros, den);
    let ref_embed = add("input.reference".into(), &[d], Init::Normal(d), den);
    let time_w1 = add("time.w1".into(), &[d, d], Init::Normal(d), den);
    let time_b1 = add("time.b1".into(), &[d], Init::Zeros, den);
    let time_w2 = add("time.w2".into(), &[d, d], Init::Normal(d), den);
    let time_b2 = add("time.b2".into(), &[d], Init::Zeros, den);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let lam = cfg.lambda;
        let comp = ParamGroup::Compressor;
        layers.push(LayerSlots {
            modulation_w: add(p("modulation.w"), &[d, 4 * d], Init::Zeros, den),
            modulation_b: add(p("modulation.b"), &[4 * d], Init::Zeros, den),
            wq: add(p("attn.wq"), &[d, d], Init::Normal(d), den),
            wk: add(p("attn.wk"), &[d, d], Init::Normal(d), den),
            wv: add(p("attn.wv"), &[d, d], Init::Normal(d), den),
            wo: add(p("attn.wo"), &[d, d], Init::Normal(d), den),
            bo: add(p("attn.bo"), &[d], Init::Zeros, den),
            cross_gamma: add(p("cross.gamma"), &[d], Init::Ones, den),
            cross_beta: add(p("cross.beta"), &[d], Init::Zeros, den),
            wcq: add(p("cross.wq"), &[d, d], Init::Normal(d), den),
            wck: add(p("cross.wk"), &[cfg.d_cond, d], Init::Normal(cfg.d_cond), den),
            wcv: add(p("cross.wv"), &[cfg.d_cond, d], Init::Normal(cfg.d_cond), den),
            wco: add(p("cross.wo"), &[d, d], Init::Normal(d), den),
            bco: add(p("cross.bo"), &[d], Init::Zeros, den),
            ff_w1: add(p("ff.w1"), &[d, cfg.d_ff], Init::Normal(d), den),
            ff_b1: add(p("ff.b1"), &[cfg.d_ff], Init::Zeros, den),
            ff_w2: add(p("ff.w2"), &[cfg.d_ff, d], Init::Normal(cfg.d_ff), den),
            ff_b2: add(p("ff.b2"), &[d], Init::Zeros, den),
            compress_k_w: add(p("compress.k.w"), &[lam, d, d], Init::Averaging, comp),
            compress_k_b: add(p("compress.k.b"), &[d], Init::Zeros, comp),
            compress_v_w: add(p("compress.v.w"), &[lam, d, d], Init::Averaging, comp),
            compress_v_b: add(p("compress.v.b"), &[d], Init::Zeros, comp),
        });
    }
    let final_mod_w = add("final.modulation.w".into(), &[d, 2 * d], Init::Zeros, den);
    let final_mod_b = add("final.modulation.b".into(), &[2 * d], Init::Zeros, den);
    let out_w = add("output.w".into(), &[d, cfg.d_latent], Init::Zeros, den);
    let out_b = add("output.b".into(), &[cfg.d_latent], Init::Zeros, den);
    let slots = Slots {
        in_w,
        in_b,
        ref_embed,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        final_mod_w,
        final_mod_b,
        out_w,
        out_b,
        layers,
    };
    (entries, slots)
}

/// Window-averaging kernel `[λ, c, c]`: each output channel is the mean of
/// its own input channel over the window.
pub fn averaging_kernel(lambda: usize, channels: usize) -> Tensor {
    let mut w = Tensor::zeros(&[lambda, channels, channels]);
    let v = 1.0 / lambda as f64;
    for k in 0..lambda {
        for c in 0..channels {
            w.data_mut()[(k * channels + c) * channels + c] = v;
        }
    }
    w
}

/// All learnable tensors, stored flat in a fixed order with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<E: Real = f64> {
    config: DenoiserConfig,
    slots: Slots,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<E>>,
}

impl DenoiserParams<f64> {
    /// Scaled-Gaussian projections, zero output head and modulation,
    /// averaging compressor.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (entries, slots) = layout(&config);
        let mut rng = SeededRng::with_stream(seed, 0x1417);
        let tensors = entries
            .iter()
            .map(|e| match e.init {
                Init::Zeros => Tensor::zeros(&e.shape),
                Init::Ones => Tensor::ones(&e.shape),
                Init::Normal(fan_in) => rng.normal_tensor(&e.shape, 1.0 / (fan_in as f64).sqrt()),
                Init::Averaging => averaging_kernel(e.shape[0], e.shape[1]),
            })
            .collect();
        Ok(Self {
            config,
            slots,
            names: entries.iter().map(|e| e.name.clone()).collect(),
            groups: entries.iter().map(|e| e.group).collect(),
            tensors,
        })
    }

    /// Replace every tensor by a random draw so no parameter sits at a
    /// degenerate zero or identity value. Used by gradient probes.
    pub fn randomized(mut self, seed: u64, std: f64) -> Self {
        let mut rng = SeededRng::with_stream(seed, 0x7A9D);
        for t in &mut self.tensors {
            let noise = rng.normal_tensor(t.shape(), std);
            t.axpy(1.0, &noise).expect("same shape");
        }
        self
    }
}

impl<E: Real> DenoiserParams<E> {
    /// Rebuild from named tensors, e.g. when loading a checkpoint.
    pub fn from_named(config: DenoiserConfig, mut named: Vec<(String, Tensor<E>)>) -> Result<Self> {
        config.validate()?;
        let (entries, slots) = layout(&config);
        if named.len() != entries.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                entries.len(),
                named.len()
            )));
        }
        let groups = entries.iter().map(|e| e.group).collect();
        let mut tensors = Vec::with_capacity(entries.len());
        for e in &entries {
            let pos = named
                .iter()
                .position(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", e.name)))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            if let Some(index) = t.first_non_finite() {
                return Err(Error::NonFinite {
                    stage: format!("parameter {}", e.name),
                    index,
                });
            }
            tensors.push(t);
        }
        Ok(Self {
            config,
            slots,
            names: entries.into_iter().map(|e| e.name).collect(),
            groups,
            tensors,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<E> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<E> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<F: Real>(&self) -> DenoiserParams<F> {
        DenoiserParams {
            config: self.config.clone(),
            slots: self.slots.clone(),
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every tensor on `tape`; those selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, E>, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable(i) { tape.leaf(t) } else { tape.constant(t) })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let odd = DenoiserConfig { d_model: 6, n_heads: 2, ..Default::default() };
        assert!(odd.validate().is_err());
        let indivisible = DenoiserConfig { d_model: 64, n_heads: 3, ..Default::default() };
        assert!(indivisible.validate().is_err());
    }

    #[test]
    fn names_are_unique_and_roundtrip() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 3).unwrap();
        let mut names = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
        let named = p.names().iter().cloned().zip(p.tensors().iter().cloned()).rev().collect();
        let q = DenoiserParams::from_named(p.config().clone(), named).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn compressor_starts_as_average() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 3).unwrap();
        let w = p.tensor(p.slots().layers[1].compress_v_w);
        assert_eq!(*w, averaging_kernel(5, 64));
        assert_eq!(p.group(p.slots().layers[1].compress_v_w), ParamGroup::Compressor);
        assert_eq!(p.group(p.slots().out_w), ParamGroup::Denoiser);
    }
}
