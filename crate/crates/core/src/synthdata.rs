//! Synthetic latent trajectories with certified smoothness constants.
//!
//! A low-dimensional state `u` drifts with bounded per-frame velocity, is
//! rendered to an ambient frame `x = tanh(A u) + r` with a bounded residual,
//! and encoded linearly to `z0 = E x`. Because `tanh` is 1-Lipschitz and the
//! encoder is linear, the Lipschitz constants of render and encode are the
//! operator norms of `A` and `E`, computed exactly at construction.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Number of condition tokens per sequence.
pub const COND_TOKENS: usize = 4;
/// Number of reference frames that precede every sequence.
pub const REFERENCE_FRAMES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub state_dim: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub delta_u: f64,
    pub eps_r: f64,
    pub rho: f64,
    pub nonlinearity: Nonlinearity,
}

/// Coordinatewise map applied after the render projection. Both are
/// 1-Lipschitz, so `L_g` is the projection's operator norm either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Identity,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            ambient_dim: 64,
            latent_dim: 16,
            delta_u: 0.1,
            eps_r: 0.01,
            rho: 0.1,
            nonlinearity: Nonlinearity::Tanh,
        }
    }
}

/// Render and encode maps together with their certified constants.
#[derive(Debug, Clone)]
pub struct LatentDynamics {
    config: DynamicsConfig,
    render: Tensor,
    encoder: Tensor,
    lipschitz_render: f64,
    lipschitz_encoder: f64,
}

impl LatentDynamics {
    pub fn new(config: DynamicsConfig, seed: u64) -> Result<Self> {
        let (m, big_d, d) = (config.state_dim, config.ambient_dim, config.latent_dim);
        if !(m < d && d < big_d) || m == 0 {
            return Err(Error::Config(format!(
                "need 0 < state_dim < latent_dim < ambient_dim, got {m}, {d}, {big_d}"
            )));
        }
        if !(config.delta_u >= 0.0) || !(config.eps_r >= 0.0) {
            return Err(Error::Config("delta_u and eps_r must be non-negative".into()));
        }
        let mut rng = SeededRng::with_stream(seed, 0xD1);
        let render = rng.normal_tensor(&[big_d, m], 1.0 / (m as f64).sqrt());
        let encoder = rng.normal_tensor(&[d, big_d], 2.0 / (big_d as f64).sqrt());
        let lipschitz_render = certified_operator_norm(&render);
        let lipschitz_encoder = certified_operator_norm(&encoder);
        Ok(Self {
            config,
            render,
            encoder,
            lipschitz_render,
            lipschitz_encoder,
        })
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.config
    }

    pub fn lipschitz_render(&self) -> f64 {
        self.lipschitz_render
    }

    pub fn lipschitz_encoder(&self) -> f64 {
        self.lipschitz_encoder
    }

    /// `L_E (L_g Δ_u + 2 ε_r)`.
    pub fn neighbor_bound(&self) -> f64 {
        prop1_bound(
            self.lipschitz_encoder,
            self.lipschitz_render,
            self.config.delta_u,
            self.config.eps_r,
        )
    }

    /// `g(u) = tanh(A u)` (or `A u` with the identity nonlinearity).
    pub fn render_state(&self, u: &[f64]) -> Vec<f64> {
        let linear = self.config.nonlinearity == Nonlinearity::Identity;
        (0..self.render.rows())
            .map(|i| {
                let s: f64 = self.render.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
                if linear {
                    s
                } else {
                    s.tanh()
                }
            })
            .collect()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        (0..self.encoder.rows())
            .map(|i| self.encoder.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn prop1_bound(l_e: f64, l_g: f64, delta_u: f64, eps_r: f64) -> f64 {
    l_e * (l_g * delta_u + 2.0 * eps_r)
}

/// Largest singular value, inflated by a relative margin that dominates the
/// eigen-solver's rounding so that the value is an upper bound.
fn certified_operator_norm(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    let m = DMatrix::from_row_slice(r, c, a.data());
    let gram = if r < c { &m * m.transpose() } else { m.transpose() * &m };
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    top.sqrt() * (1.0 + 1e-10)
}

/// F×d clean (or noisy) latent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence(Tensor);

impl LatentSequence {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("latent sequence", values.shape(), &[2]));
        }
        if let Some(index) = values.first_non_finite() {
            return Err(Error::NonFinite {
                stage: "latent sequence".into(),
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_values(self) -> Tensor {
        self.0
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        self.0.row(f)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Smooth random state path: damped momentum on the step, each step clipped
/// to the ball of radius `delta_u`.
pub fn generate_state_path(
    frames: usize,
    state_dim: usize,
    delta_u: f64,
    seed: u64,
) -> Result<Tensor> {
    if frames < 2 || state_dim == 0 {
        return Err(Error::Invalid("state path needs ≥2 frames and state_dim ≥ 1".into()));
    }
    if !(delta_u >= 0.0) {
        return Err(Error::Invalid("delta_u must be non-negative".into()));
    }
    let mut rng = SeededRng::with_stream(seed, 0x57);
    let m = state_dim;
    let mut u: Vec<f64> = rng.normal_vec(m, 0.5);
    let mut step = vec![0.0; m];
    let mut data = Vec::with_capacity(frames * m);
    data.extend_from_slice(&u);
    let kick = 0.6 * delta_u / (m as f64).sqrt();
    // shrink slightly so the difference of the stored states, after rounding,
    // still respects the bound
    let radius = delta_u * (1.0 - 1e-9);
    for _ in 1..frames {
        for i in 0..m {
            step[i] = 0.85 * step[i] + kick * rng.normal() - 0.05 * delta_u * u[i];
        }
        let n = norm(&step);
        if n > radius {
            let s = radius / n;
            step.iter_mut().for_each(|v| *v *= s);
        }
        for i in 0..m {
            u[i] += step[i];
        }
        data.extend_from_slice(&u);
    }
    Tensor::from_vec(&[frames, m], data)
}

#[derive(Debug, Clone)]
pub struct RenderedPath {
    pub ambient: Tensor,
    pub latents: LatentSequence,
    pub residual_norms: Vec<f64>,
}

/// `x^f = g(u^f) + r^f` with `‖r^f‖ ≤ residual_scale`, then `z0^f = E x^f`.
pub fn render_and_encode(
    dynamics: &LatentDynamics,
    states: &Tensor,
    residual_scale: f64,
    seed: u64,
) -> Result<RenderedPath> {
    if residual_scale > dynamics.config.eps_r || residual_scale < 0.0 {
        return Err(Error::Invalid(format!(
            "residual scale {residual_scale} exceeds eps_r {}",
            dynamics.config.eps_r
        )));
    }
    let mut rng = SeededRng::with_stream(seed, 0xE5);
    let big_d = dynamics.config.ambient_dim;
    let mut ambient = Vec::with_capacity(states.rows() * big_d);
    let mut latents = Vec::new();
    let mut residual_norms = Vec::with_capacity(states.rows());
    for f in 0..states.rows() {
        let mut x = dynamics.render_state(states.row(f));
        if residual_scale > 0.0 {
            let dir = rng.normal_vec(big_d, 1.0);
            let target = residual_scale * rng.uniform() * (1.0 - 1e-12);
            let s = target / norm(&dir);
            x.iter_mut().zip(&dir).for_each(|(xi, di)| *xi += s * di);
            residual_norms.push(target);
        } else {
            residual_norms.push(0.0);
        }
        latents.extend(dynamics.encode(&x));
        ambient.extend(x);
    }
    let f = states.rows();
    Ok(RenderedPath {
        ambient: Tensor::from_vec(&[f, big_d], ambient)?,
        latents: LatentSequence::new(Tensor::from_vec(&[f, dynamics.config.latent_dim], latents)?)?,
        residual_norms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub max_gap: f64,
    pub bound: f64,
    pub violations: usize,
    pub max_state_step: f64,
    pub holds: bool,
}

impl Prop1Report {
    pub fn tightness(&self) -> f64 {
        if self.bound > 0.0 {
            self.max_gap / self.bound
        } else if self.max_gap == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Scan every consecutive latent gap against the neighbor bound.
pub fn check_prop1(bound: f64, latents: &LatentSequence, states: &Tensor) -> Prop1Report {
    let gap = |t: &Tensor, f: usize| -> f64 {
        t.row(f + 1)
            .iter()
            .zip(t.row(f))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let z = latents.values();
    let mut max_gap: f64 = 0.0;
    let mut violations = 0;
    for f in 0..z.rows().saturating_sub(1) {
        let g = gap(z, f);
        max_gap = max_gap.max(g);
        if g > bound {
            violations += 1;
        }
    }
    let max_state_step = (0..states.rows().saturating_sub(1))
        .map(|f| gap(states, f))
        .fold(0.0, f64::max);
    Prop1Report {
        max_gap,
        bound,
        violations,
        max_state_step,
        holds: violations == 0,
    }
}

/// Condition tokens derived from a state path: for each quarter of the path,
/// the mean state and the net displacement across the quarter.
pub fn condition_from_states(states: &Tensor) -> Tensor {
    let (f, m) = (states.rows(), states.cols());
    let mut data = Vec::with_capacity(COND_TOKENS * 2 * m);
    for k in 0..COND_TOKENS {
        let lo = k * f / COND_TOKENS;
        let hi = ((k + 1) * f / COND_TOKENS).max(lo + 1).min(f);
        let n = (hi - lo) as f64;
        for j in 0..m {
            data.push((lo..hi).map(|i| states.at(i, j)).sum::<f64>() / n);
        }
        for j in 0..m {
            data.push(states.at(hi - 1, j) - states.at(lo, j));
        }
    }
    Tensor::from_vec(&[COND_TOKENS, 2 * m], data).expect("condition shape")
}

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    /// `(REFERENCE_FRAMES + F) × m`; the reference frames come first.
    pub states: Tensor,
    pub latents: LatentSequence,
    pub reference: Tensor,
    pub condition: Tensor,
}

impl SequenceRecord {
    /// States of the generated frames, without the reference frames.
    pub fn sequence_states(&self) -> Tensor {
        self.states
            .slice_rows(REFERENCE_FRAMES, self.states.rows())
            .expect("record has frames beyond the reference")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dynamics: LatentDynamics,
    pub seed: u64,
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.latents.frames())
    }

    pub fn cond_dim(&self) -> usize {
        2 * self.dynamics.config.state_dim
    }
}

/// `n_sequences` trajectories of `frames` latents, each preceded by
/// reference frames and paired with condition tokens.
pub fn make_dataset(
    config: &DynamicsConfig,
    n_sequences: usize,
    frames: usize,
    seed: u64,
) -> Result<Dataset> {
    let dynamics = LatentDynamics::new(config.clone(), seed)?;
    let mut sequences = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let path_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64 + 1);
        let states = generate_state_path(frames + REFERENCE_FRAMES, config.state_dim, config.delta_u, path_seed)?;
        let rendered = render_and_encode(&dynamics, &states, config.eps_r, path_seed)?;
        let all = rendered.latents.values();
        let reference = all.slice_rows(0, REFERENCE_FRAMES)?;
        let latents = LatentSequence::new(all.slice_rows(REFERENCE_FRAMES, all.rows())?)?;
        let condition = condition_from_states(&states.slice_rows(REFERENCE_FRAMES, states.rows())?);
        sequences.push(SequenceRecord {
            states,
            latents,
            reference,
            condition,
        });
    }
    Ok(Dataset {
        dynamics,
        seed,
        sequences,
    })
}
