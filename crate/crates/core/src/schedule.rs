//! Noise schedules, forward noising, velocity targets, the first-order
//! sampler and the closed-form / Monte Carlo neighbor-distance analytics.

use crate::error::{Error, Result};
use crate::numerics::{Real, SeededRng, Tensor};

/// Maps a diffusion step to its `(alpha, sigma)` coefficients.
pub trait NoiseSchedule {
    fn coefficients(&self, t: f64) -> Result<(f64, f64)>;
}

/// Rectified-flow schedule: `alpha_t = 1 - t`, `sigma_t = t` on `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowSchedule;

impl NoiseSchedule for FlowSchedule {
    fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        check_unit(t)?;
        Ok((1.0 - t, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Tabulated schedule with arbitrary `(alpha, sigma)` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericSchedule {
    steps: Vec<ScheduleStep>,
}

impl GenericSchedule {
    pub fn new(steps: Vec<ScheduleStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        for s in &steps {
            if !(s.sigma >= 0.0) || !s.alpha.is_finite() || !s.sigma.is_finite() {
                return Err(Error::Invalid(format!("invalid schedule step {s:?}")));
            }
        }
        if steps.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(Error::Invalid("schedule steps must be strictly increasing in t".into()));
        }
        Ok(Self { steps })
    }

    /// Tabulate `f(t)` on the given ascending grid.
    pub fn from_fn(ts: &[f64], f: impl Fn(f64) -> (f64, f64)) -> Result<Self> {
        Self::new(
            ts.iter()
                .map(|&t| {
                    let (alpha, sigma) = f(t);
                    ScheduleStep { t, alpha, sigma }
                })
                .collect(),
        )
    }

    /// Variance-preserving cosine schedule, `(cos(πt/2), sin(πt/2))`.
    pub fn cosine(n: usize) -> Result<Self> {
        let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        Self::from_fn(&ts, |t| {
            let a = std::f64::consts::FRAC_PI_2 * t;
            (a.cos(), a.sin())
        })
    }

    pub fn steps(&self) -> &[ScheduleStep] {
        &self.steps
    }
}

impl NoiseSchedule for GenericSchedule {
    fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.steps
            .iter()
            .find(|s| s.t == t)
            .map(|s| (s.alpha, s.sigma))
            .ok_or_else(|| Error::Invalid(format!("step {t} not on the schedule grid")))
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("diffusion step {t} outside [0, 1]")))
    }
}

/// `(1 - t) x0 + t eps`.
pub fn noise_forward<E: Real>(x0: &Tensor<E>, t: f64, eps: &Tensor<E>) -> Result<Tensor<E>> {
    check_unit(t)?;
    noise_forward_coeffs(x0, 1.0 - t, t, eps)
}

/// `alpha x0 + sigma eps`.
pub fn noise_forward_coeffs<E: Real>(
    x0: &Tensor<E>,
    alpha: f64,
    sigma: f64,
    eps: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (a, s) = (E::from_f64(alpha), E::from_f64(sigma));
    x0.zip_map(eps, "noise_forward", |x, e| a * x + s * e)
}

/// Flow-matching regression target `eps - x0`.
pub fn velocity_target<E: Real>(x0: &Tensor<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    eps.sub(x0)
        .map_err(|_| Error::shape("velocity_target", x0.shape(), eps.shape()))
}

/// `E‖z_t^{f+1} - z_t^f‖²` under same-step noising with independent
/// standard-normal noise: `alpha² · dz0_sq + 2 sigma² d`.
pub fn expected_neighbor_distance(alpha: f64, sigma: f64, d: usize, dz0_sq: f64) -> f64 {
    alpha * alpha * dz0_sq + 2.0 * sigma * sigma * d as f64
}

/// Closed form for neighbors noised at different steps:
/// `‖alpha_a z1 - alpha_b z0‖² + (sigma_a² + sigma_b²) d`.
pub fn expected_mismatched_distance(
    z0: &[f64],
    z1: &[f64],
    (alpha_a, sigma_a): (f64, f64),
    (alpha_b, sigma_b): (f64, f64),
) -> f64 {
    let signal: f64 = z1
        .iter()
        .zip(z0)
        .map(|(&b, &a)| (alpha_a * b - alpha_b * a).powi(2))
        .sum();
    signal + (sigma_a * sigma_a + sigma_b * sigma_b) * z0.len() as f64
}

/// Monte Carlo estimate of `E‖z_a^{f+1} - z_b^f‖²` where `z1` is noised with
/// `coeffs_a` and `z0` with `coeffs_b`, fresh noise for each frame and sample.
pub fn monte_carlo_neighbor_distance(
    z0: &[f64],
    z1: &[f64],
    (alpha_a, sigma_a): (f64, f64),
    (alpha_b, sigma_b): (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 1 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    if z0.len() != z1.len() {
        return Err(Error::shape("monte_carlo", &[z0.len()], &[z1.len()]));
    }
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let mut sq = 0.0;
        for (&a, &b) in z0.iter().zip(z1) {
            let next = alpha_a * b + sigma_a * rng.normal();
            let prev = alpha_b * a + sigma_b * rng.normal();
            sq += (next - prev) * (next - prev);
        }
        total += sq;
    }
    Ok(total / n_samples as f64)
}

/// Monte Carlo estimate of the same-step neighbor distance for one frame pair.
pub fn monte_carlo_prop2(
    z0: &[f64],
    z1: &[f64],
    alpha: f64,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    monte_carlo_neighbor_distance(z0, z1, (alpha, sigma), (alpha, sigma), n_samples, seed)
}

/// Descending step grid `t_T > ... > t_0 = 0` for the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    grid: Vec<f64>,
}

impl SamplerConfig {
    /// `steps` uniform steps from `t = 1` down to `t = 0`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("sampler needs at least one step".into()));
        }
        Self::from_grid((0..=steps).rev().map(|k| k as f64 / steps as f64).collect())
    }

    pub fn from_grid(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || *grid.last().unwrap() != 0.0 {
            return Err(Error::Invalid("sampler grid must have ≥2 points and end at 0".into()));
        }
        if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Invalid("sampler grid must be strictly decreasing in [0, 1]".into()));
        }
        Ok(Self { grid })
    }

    /// Number of denoiser evaluations.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Diffusion steps at which the denoiser is evaluated, noisiest first.
    pub fn eval_points(&self) -> &[f64] {
        &self.grid[..self.grid.len() - 1]
    }
}

/// First-order integration of the learned velocity field from `t_T` to 0.
///
/// `velocity(k, t_k, x)` is called once per step with the step index, the
/// current diffusion step and the current iterate.
pub fn euler_integrate<E: Real>(
    mut velocity: impl FnMut(usize, f64, &Tensor<E>) -> Result<Tensor<E>>,
    x_init: &Tensor<E>,
    sampler: &SamplerConfig,
) -> Result<Tensor<E>> {
    let grid = sampler.grid();
    let mut x = x_init.clone();
    for k in 0..sampler.steps() {
        let v = velocity(k, grid[k], &x)?;
        x.axpy(E::from_f64(grid[k + 1] - grid[k]), &v)?;
        if let Some(index) = x.first_non_finite() {
            return Err(Error::NonFinite {
                stage: format!("euler step {k}"),
                index,
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn flow_schedule_endpoints() {
        assert_eq!(FlowSchedule.coefficients(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(FlowSchedule.coefficients(1.0).unwrap(), (0.0, 1.0));
        for i in 0..=10 {
            let (a, s) = FlowSchedule.coefficients(i as f64 / 10.0).unwrap();
            assert!((a + s - 1.0).abs() < 1e-15);
        }
        assert!(FlowSchedule.coefficients(1.5).is_err());
    }

    #[test]
    fn noising_examples() {
        let x0 = v(&[2.0, 0.0]);
        let eps = v(&[0.0, 2.0]);
        assert_eq!(noise_forward(&x0, 0.0, &eps).unwrap(), x0);
        assert_eq!(noise_forward(&x0, 1.0, &eps).unwrap(), eps);
        assert_eq!(noise_forward(&x0, 0.5, &eps).unwrap(), v(&[1.0, 1.0]));
        assert!(noise_forward(&x0, 0.5, &v(&[1.0])).is_err());
    }

    #[test]
    fn noising_is_linear_in_t() {
        let mut rng = SeededRng::new(1);
        let x0 = rng.normal_tensor(&[3, 5], 1.0);
        let eps = rng.normal_tensor(&[3, 5], 1.0);
        let vel = velocity_target(&x0, &eps).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let xt = noise_forward(&x0, t, &eps).unwrap();
            let mut lin = x0.clone();
            lin.axpy(t, &vel).unwrap();
            assert!(xt.max_abs_diff(&lin).unwrap() < 1e-12);
        }
    }

    #[test]
    fn velocity_examples() {
        let x = v(&[1.0, 2.0]);
        assert_eq!(velocity_target(&x, &x).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(velocity_target(&v(&[0.0, 0.0]), &x).unwrap(), x);
        assert_eq!(velocity_target(&x, &v(&[3.0, 1.0])).unwrap(), v(&[2.0, -1.0]));
        assert!(velocity_target(&x, &v(&[1.0])).is_err());
    }

    #[test]
    fn neighbor_distance_closed_form() {
        assert_eq!(expected_neighbor_distance(1.0, 0.0, 7, 3.5), 3.5);
        assert_eq!(expected_neighbor_distance(0.0, 1.0, 3, 9.0), 6.0);
        assert_eq!(expected_neighbor_distance(0.5, 0.5, 4, 1.0), 2.25);
    }

    #[test]
    fn monte_carlo_without_noise_is_exact() {
        let z0 = [0.0, 1.0, 2.0];
        let z1 = [1.0, 1.0, 0.0];
        let m = monte_carlo_prop2(&z0, &z1, 1.0, 0.0, 3, 4).unwrap();
        assert_eq!(m, 5.0);
        assert!(monte_carlo_prop2(&z0, &z1, 1.0, 0.0, 0, 4).is_err());
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let z = [0.3; 8];
        let m = monte_carlo_prop2(&z, &z, 0.7, 1.0, 100_000, 8).unwrap();
        assert!((m - 16.0).abs() / 16.0 < 0.02, "{m}");
        let z0 = [0.0; 4];
        let z1 = [1.0, 0.0, 0.0, 0.0];
        let m = monte_carlo_prop2(&z0, &z1, 0.5, 0.5, 100_000, 9).unwrap();
        assert!((m - 2.25).abs() / 2.25 < 0.02, "{m}");
    }

    #[test]
    fn sampler_grid_validation() {
        let s = SamplerConfig::uniform(3).unwrap();
        assert_eq!(s.steps(), 3);
        assert_eq!(s.grid()[0], 1.0);
        assert_eq!(*s.grid().last().unwrap(), 0.0);
        assert!(SamplerConfig::uniform(0).is_err());
        assert!(SamplerConfig::from_grid(vec![0.5, 0.6, 0.0]).is_err());
        assert!(SamplerConfig::from_grid(vec![1.0, 0.5]).is_err());
    }

    #[test]
    fn euler_with_exact_field() {
        let mut rng = SeededRng::new(2);
        let x0 = rng.normal_tensor(&[4, 3], 1.0);
        let eps = rng.normal_tensor(&[4, 3], 1.0);
        let field = velocity_target(&x0, &eps).unwrap();
        let run = |steps| {
            let s = SamplerConfig::uniform(steps).unwrap();
            euler_integrate(|_, _, _| Ok(field.clone()), &eps, &s).unwrap()
        };
        let one = run(1);
        assert!(one.max_abs_diff(&x0).unwrap() < 1e-15);
        assert!(one.max_abs_diff(&run(4)).unwrap() < 1e-10);
        assert!(one.max_abs_diff(&run(8)).unwrap() < 1e-10);
    }

    #[test]
    fn euler_zero_field_and_non_finite() {
        let x = v(&[1.0, -2.0]);
        let s = SamplerConfig::uniform(3).unwrap();
        let out = euler_integrate(|_, _, x| Ok(Tensor::zeros(x.shape())), &x, &s).unwrap();
        assert_eq!(out, x);
        let err = euler_integrate(
            |k, _, x| Ok(if k == 1 { Tensor::full(x.shape(), f64::NAN) } else { Tensor::zeros(x.shape()) }),
            &x,
            &s,
        )
        .unwrap_err();
        assert!(err.to_string().contains("euler step 1"), "{err}");
    }

    #[test]
    fn generic_schedule_lookup() {
        let g = GenericSchedule::cosine(10).unwrap();
        let (a, s) = g.coefficients(g.steps()[5].t).unwrap();
        assert!((a * a + s * s - 1.0).abs() < 1e-12);
        assert!(g.coefficients(0.123).is_err());
        assert!(GenericSchedule::from_fn(&[0.2, 0.1], |_| (1.0, 0.0)).is_err());
    }
}
