//! Generative sampling engine: noise-level schedules, preconditioned
//! denoiser contract, second-order probabilistic-flow solver with
//! stochastic churn, training-noise distribution, denoising loss,
//! noise-level encodings, and the autoregressive rollout.
//!
//! State vectors are flattened channel-major: element `c * G + i` is
//! channel `c` at grid cell `i`.

use crate::error::{Error, Result};
use crate::perturb::{sample_spherical_noise, SphericalNoiseSpec};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};

/// Sampling-time noise-level schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    /// Sampling defaults: sigma range [0.03, 80], rho 7, 20 levels.
    fn default() -> Self {
        NoiseSchedule {
            sigma_max: 80.0,
            sigma_min: 0.03,
            rho: 7.0,
            n_steps: 20,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max > self.sigma_min && self.sigma_min > 0.0) {
            return Err(Error::config(format!(
                "noise schedule needs sigma_max > sigma_min > 0, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config("noise schedule rho must be positive"));
        }
        if self.n_steps < 2 {
            return Err(Error::config("noise schedule needs at least 2 levels"));
        }
        Ok(())
    }

    /// All levels sigma_0 > ... > sigma_{N-1}.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        (0..self.n_steps).map(|i| schedule_sigma(self, i)).collect()
    }
}

/// The i-th noise level of the power-interpolated schedule:
/// `(sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`.
pub fn schedule_sigma(sched: &NoiseSchedule, i: usize) -> Result<f64> {
    sched.validate()?;
    if i >= sched.n_steps {
        return Err(Error::config(format!(
            "schedule index {i} out of range for {} levels",
            sched.n_steps
        )));
    }
    // The interpolation is the identity at the boundary indices; return
    // the configured values exactly rather than through powf round trips.
    if i == 0 {
        return Ok(sched.sigma_max);
    }
    if i == sched.n_steps - 1 {
        return Ok(sched.sigma_min);
    }
    let inv_rho = 1.0 / sched.rho;
    let a = sched.sigma_max.powf(inv_rho);
    let b = sched.sigma_min.powf(inv_rho);
    let t = i as f64 / (sched.n_steps - 1) as f64;
    Ok((a + t * (b - a)).powf(sched.rho))
}

/// Stochastic churn settings applied once per solver transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnConfig {
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
}

impl Default for ChurnConfig {
    /// Sampling defaults: churn rate 2.5 over [0.75, 80], inflation 1.05.
    fn default() -> Self {
        ChurnConfig {
            s_churn: 2.5,
            s_tmin: 0.75,
            s_tmax: 80.0,
            s_noise: 1.05,
        }
    }
}

impl ChurnConfig {
    /// No churn: the solver follows the deterministic probability flow.
    pub fn disabled() -> Self {
        ChurnConfig {
            s_churn: 0.0,
            ..ChurnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_churn >= 0.0) {
            return Err(Error::config("churn rate must be non-negative"));
        }
        if !(self.s_tmin < self.s_tmax) {
            return Err(Error::config("churn range needs s_tmin < s_tmax"));
        }
        if !(self.s_noise > 0.0) {
            return Err(Error::config("noise inflation factor must be positive"));
        }
        Ok(())
    }
}

/// Training-time noise distribution, the continuous counterpart of the
/// schedule over a wider sigma range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainNoiseDist {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
}

impl Default for TrainNoiseDist {
    /// Training defaults: sigma range [0.02, 88], rho 7.
    fn default() -> Self {
        TrainNoiseDist {
            sigma_max: 88.0,
            sigma_min: 0.02,
            rho: 7.0,
        }
    }
}

/// Inverse CDF of the training-noise distribution; its quantiles coincide
/// with the discrete schedule over the same range: `F^-1(i/(N-1)) = sigma_i`.
pub fn sample_train_sigma(dist: &TrainNoiseDist, u: f64) -> Result<f64> {
    if !(dist.sigma_max > dist.sigma_min && dist.sigma_min > 0.0 && dist.rho > 0.0) {
        return Err(Error::config("invalid training-noise distribution"));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::config(format!(
            "training-noise quantile must be in [0, 1], got {u}"
        )));
    }
    // Exact at the boundary quantiles (the interpolation is the identity
    // there); avoids powf round-trip error at the distribution's ends.
    if u == 0.0 {
        return Ok(dist.sigma_max);
    }
    if u == 1.0 {
        return Ok(dist.sigma_min);
    }
    let inv_rho = 1.0 / dist.rho;
    let a = dist.sigma_max.powf(inv_rho);
    let b = dist.sigma_min.powf(inv_rho);
    Ok((a + u * (b - a)).powf(dist.rho))
}

/// Conditioning window for the denoiser: the two most recent states,
/// flattened channel-major.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// State at the previous step.
    pub prev: &'a [f64],
    /// State two steps back.
    pub prev2: &'a [f64],
}

/// A denoiser maps a noisy residual at level sigma to an estimate of the
/// clean residual. Implementations must be deterministic given inputs and
/// preserve dimensions; they are invoked concurrently across members.
pub trait Denoiser: Sync {
    fn denoise(&self, z: &[f64], cond: &Conditioning<'_>, sigma: f64) -> Result<Vec<f64>>;
}

/// Scaling factors wrapping a raw network into a denoiser, with unit data
/// scale: `D(z, sigma) = c_skip * z + c_out * F(c_in * z, c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// Preconditioning factors at unit data scale:
/// `c_skip = 1/(1+sigma^2)`, `c_out = sigma/sqrt(1+sigma^2)`,
/// `c_in = 1/sqrt(1+sigma^2)`, `c_noise = ln(sigma)/4`.
pub fn precondition_coeffs(sigma: f64) -> PreconditionCoeffs {
    assert!(sigma > 0.0, "preconditioning requires sigma > 0");
    let s2 = sigma * sigma;
    PreconditionCoeffs {
        c_skip: 1.0 / (1.0 + s2),
        c_out: sigma / (1.0 + s2).sqrt(),
        c_in: 1.0 / (1.0 + s2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

/// The raw network inside the preconditioning wrapper. Receives the
/// input-scaled state and the noise-level feature scalar.
pub trait RawNetwork: Sync {
    fn eval(&self, scaled_z: &[f64], cond: &Conditioning<'_>, c_noise: f64) -> Result<Vec<f64>>;
}

impl<F> RawNetwork for F
where
    F: Fn(&[f64], &Conditioning<'_>, f64) -> Result<Vec<f64>> + Sync,
{
    fn eval(&self, scaled_z: &[f64], cond: &Conditioning<'_>, c_noise: f64) -> Result<Vec<f64>> {
        self(scaled_z, cond, c_noise)
    }
}

/// A raw network wrapped with the preconditioning scalings.
pub struct Preconditioned<F: RawNetwork> {
    pub inner: F,
}

/// Wrap a raw network into a [`Denoiser`] via [`precondition_coeffs`].
pub fn precondition<F: RawNetwork>(inner: F) -> Preconditioned<F> {
    Preconditioned { inner }
}

impl<F: RawNetwork> Denoiser for Preconditioned<F> {
    fn denoise(&self, z: &[f64], cond: &Conditioning<'_>, sigma: f64) -> Result<Vec<f64>> {
        let c = precondition_coeffs(sigma);
        let scaled: Vec<f64> = z.iter().map(|&v| c.c_in * v).collect();
        let f = self.inner.eval(&scaled, cond, c.c_noise)?;
        if f.len() != z.len() {
            return Err(Error::dims("raw network changed the state dimension"));
        }
        Ok(z.iter()
            .zip(&f)
            .map(|(&zv, &fv)| c.c_skip * zv + c.c_out * fv)
            .collect())
    }
}

/// Analytically optimal denoiser for an independent Gaussian target per
/// element: `D(z, sigma) = (s^2 z + sigma^2 mu) / (s^2 + sigma^2)`.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dims("toy denoiser mean/std length mismatch"));
        }
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config("toy denoiser stds must be positive"));
        }
        Ok(ToyDenoiser { mean, std })
    }

    /// Same Gaussian target at every element.
    pub fn uniform(n: usize, mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![mean; n], vec![std; n])
    }
}

impl Denoiser for ToyDenoiser {
    fn denoise(&self, z: &[f64], _cond: &Conditioning<'_>, sigma: f64) -> Result<Vec<f64>> {
        if z.len() != self.mean.len() {
            return Err(Error::dims("toy denoiser state length mismatch"));
        }
        let s2 = sigma * sigma;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&zv, (&mu, &s))| {
                let v = s * s;
                (v * zv + s2 * mu) / (v + s2)
            })
            .collect())
    }
}

/// Per-channel normalization: residual stds (the diagonal scaling applied
/// when composing states) and input means/stds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub residual_std: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(residual_std: Vec<f64>, input_mean: Vec<f64>, input_std: Vec<f64>) -> Result<Self> {
        if residual_std.len() != input_mean.len() || residual_std.len() != input_std.len() {
            return Err(Error::dims("normalization stats length mismatch"));
        }
        if residual_std
            .iter()
            .chain(&input_std)
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::config("normalization stds must be positive"));
        }
        Ok(NormalizationStats {
            residual_std,
            input_mean,
            input_std,
        })
    }

    /// Unit residual scaling, zero input means, unit input stds.
    pub fn unit(n_channels: usize) -> Self {
        NormalizationStats {
            residual_std: vec![1.0; n_channels],
            input_mean: vec![0.0; n_channels],
            input_std: vec![1.0; n_channels],
        }
    }
}

const INIT_DRAW_STREAM: u64 = 0x696e_6974_6472_6177;
const CHURN_DRAW_STREAM: u64 = 0x6368_7572_6e64_7277;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c_6f75_7473;

fn check_unit_noise(noise: &SphericalNoiseSpec) -> Result<()> {
    if (noise.sigma - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            "driving noise must have unit per-cell variance (sigma = 1)",
        ));
    }
    Ok(())
}

/// One independent unit-variance noise field per channel, concatenated
/// channel-major.
pub fn noise_stack(noise: &SphericalNoiseSpec, n_channels: usize, seed: u64) -> Result<Vec<f64>> {
    let g = noise.grid.n_cells();
    let mut out = Vec::with_capacity(n_channels * g);
    for c in 0..n_channels {
        let f = sample_spherical_noise(noise, derive_seed(seed, &[c as u64]))?;
        out.extend_from_slice(&f.values);
    }
    Ok(out)
}

/// Stochastic churn: inflate the noise level from `sigma_i` to
/// `sigma_i * (1 + gamma)` and add matching fresh noise, where
/// `gamma = min(s_churn / n_steps, sqrt(2) - 1)` when `sigma_i` lies in
/// `[s_tmin, s_tmax]` and 0 otherwise. Returns the (state, level) pair
/// unchanged when gamma is 0.
pub fn churn_inflate(
    z: &[f64],
    sigma_i: f64,
    cfg: &ChurnConfig,
    n_steps: usize,
    noise: &SphericalNoiseSpec,
    n_channels: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    check_unit_noise(noise)?;
    if !(sigma_i > 0.0) {
        return Err(Error::config("churn requires a positive noise level"));
    }
    if n_steps == 0 || z.len() != n_channels * noise.grid.n_cells() {
        return Err(Error::dims("churn state does not match the noise grid"));
    }
    let in_range = sigma_i >= cfg.s_tmin && sigma_i <= cfg.s_tmax;
    let gamma = if in_range {
        (cfg.s_churn / n_steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    } else {
        0.0
    };
    if gamma == 0.0 {
        return Ok((z.to_vec(), sigma_i));
    }
    let sigma_hat = sigma_i * (1.0 + gamma);
    let amp = cfg.s_noise * (sigma_hat * sigma_hat - sigma_i * sigma_i).sqrt();
    let eps = noise_stack(noise, n_channels, seed)?;
    let z_hat = z.iter().zip(&eps).map(|(&v, &e)| v + amp * e).collect();
    Ok((z_hat, sigma_hat))
}

/// One solver transition from level `sigma_a` down to `sigma_b`.
///
/// For `sigma_b > 0` this is the second-order two-stage update in
/// data-prediction form with a geometric-mean midpoint (a log-sigma
/// half-step); the final transition to `sigma_b = 0` is a single
/// first-order evaluation, which reduces exactly to `D(z, sigma_a)`.
pub fn solver_step(
    z: &[f64],
    sigma_a: f64,
    sigma_b: f64,
    denoiser: &dyn Denoiser,
    cond: &Conditioning<'_>,
) -> Result<Vec<f64>> {
    if !(sigma_a > sigma_b) || !(sigma_b >= 0.0) {
        return Err(Error::config(format!(
            "solver transition needs sigma_a > sigma_b >= 0, got {sigma_a} -> {sigma_b}"
        )));
    }
    let check = |d: &Vec<f64>| -> Result<()> {
        if d.len() != z.len() {
            Err(Error::dims("denoiser changed the state dimension"))
        } else {
            Ok(())
        }
    };
    if sigma_b == 0.0 {
        let d = denoiser.denoise(z, cond, sigma_a)?;
        check(&d)?;
        return Ok(d);
    }
    let sigma_mid = (sigma_a * sigma_b).sqrt();
    let d1 = denoiser.denoise(z, cond, sigma_a)?;
    check(&d1)?;
    let r_mid = sigma_mid / sigma_a;
    let u: Vec<f64> = z
        .iter()
        .zip(&d1)
        .map(|(&zv, &dv)| r_mid * zv + (1.0 - r_mid) * dv)
        .collect();
    let d2 = denoiser.denoise(&u, cond, sigma_mid)?;
    check(&d2)?;
    let r_b = sigma_b / sigma_a;
    Ok(z.iter()
        .zip(&d2)
        .map(|(&zv, &dv)| r_b * zv + (1.0 - r_b) * dv)
        .collect())
}

/// Draw one residual sample: an initial draw from the driving noise at
/// the top level, then two-stage transitions down the schedule with churn
/// applied once per transition, and a final first-order step to zero.
/// Uses `2 * n_steps - 1` denoiser evaluations (39 at defaults).
pub fn sample_residual(
    cond: &Conditioning<'_>,
    n_channels: usize,
    sched: &NoiseSchedule,
    cfg: &ChurnConfig,
    denoiser: &dyn Denoiser,
    noise: &SphericalNoiseSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    sched.validate()?;
    cfg.validate()?;
    check_unit_noise(noise)?;
    let g = noise.grid.n_cells();
    if n_channels == 0 || cond.prev.len() != n_channels * g || cond.prev2.len() != n_channels * g {
        return Err(Error::dims(
            "conditioning does not match channel count times noise-grid size",
        ));
    }
    let mut sigmas = sched.sigmas()?;
    sigmas.push(0.0);
    let mut z = noise_stack(noise, n_channels, derive_seed(seed, &[INIT_DRAW_STREAM]))?;
    for v in z.iter_mut() {
        *v *= sigmas[0];
    }
    for i in 0..sched.n_steps {
        let (z_hat, sigma_hat) = churn_inflate(
            &z,
            sigmas[i],
            cfg,
            sched.n_steps,
            noise,
            n_channels,
            derive_seed(seed, &[CHURN_DRAW_STREAM, i as u64]),
        )?;
        z = solver_step(&z_hat, sigma_hat, sigmas[i + 1], denoiser, cond)?;
    }
    Ok(z)
}

/// Autoregressive trajectory of `t_steps` states. Each step samples a
/// residual conditioned on the two most recent states and composes
/// `X^t = X^{t-1} + S * Z^t`, except for channels flagged as accumulation
/// channels (precipitation) where `X^t = S * Z^t`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    x0: &[f64],
    x_prev: &[f64],
    n_channels: usize,
    t_steps: usize,
    stats: &NormalizationStats,
    precip: &[bool],
    sched: &NoiseSchedule,
    cfg: &ChurnConfig,
    denoiser: &dyn Denoiser,
    noise: &SphericalNoiseSpec,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let g = noise.grid.n_cells();
    if x0.len() != n_channels * g || x_prev.len() != n_channels * g {
        return Err(Error::dims("initial states do not match the state shape"));
    }
    if stats.residual_std.len() != n_channels || precip.len() != n_channels {
        return Err(Error::dims(
            "per-channel stats do not match the channel count",
        ));
    }
    if t_steps == 0 {
        return Err(Error::config("rollout needs at least one step"));
    }
    let mut x_t1 = x0.to_vec();
    let mut x_t2 = x_prev.to_vec();
    let mut out = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let cond = Conditioning {
            prev: &x_t1,
            prev2: &x_t2,
        };
        let z = sample_residual(
            &cond,
            n_channels,
            sched,
            cfg,
            denoiser,
            noise,
            derive_seed(seed, &[ROLLOUT_STREAM, t as u64]),
        )?;
        let mut x_new = vec![0.0; n_channels * g];
        for c in 0..n_channels {
            let s = stats.residual_std[c];
            let base = c * g;
            if precip[c] {
                for i in 0..g {
                    x_new[base + i] = s * z[base + i];
                }
            } else {
                for i in 0..g {
                    x_new[base + i] = x_t1[base + i] + s * z[base + i];
                }
            }
        }
        if let Some(idx) = x_new.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite state at rollout step {t} (channel {}, cell {})",
                idx / g,
                idx % g
            )));
        }
        out.push(x_new.clone());
        x_t2 = std::mem::replace(&mut x_t1, x_new);
    }
    Ok(out)
}

/// Fourier features of the log noise level: sin/cos pairs at 32
/// frequencies with base period 16, giving a 64-dimensional vector.
pub fn noise_level_encoding(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!(
            "noise-level encoding requires sigma > 0, got {sigma}"
        )));
    }
    let x = sigma.ln();
    let mut out = Vec::with_capacity(64);
    for j in 1..=32 {
        let omega = 2.0 * std::f64::consts::PI * j as f64 / 16.0;
        out.push((omega * x).sin());
        out.push((omega * x).cos());
    }
    Ok(out)
}

/// Per-sample training loss: `lambda(sigma)` times the level- and
/// area-weighted mean squared error between the denoiser output and the
/// clean residual, with `lambda(sigma) = (sigma^2 + 1) / sigma^2`.
pub fn denoising_loss(
    output: &[f64],
    target: &[f64],
    sigma: f64,
    level_weights: &[f64],
    area_weights: &[f64],
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::config("denoising loss requires sigma > 0"));
    }
    let c = level_weights.len();
    let g = area_weights.len();
    if c == 0 || g == 0 || output.len() != c * g || target.len() != c * g {
        return Err(Error::dims(
            "loss inputs do not match channel count times grid size",
        ));
    }
    let lambda = (sigma * sigma + 1.0) / (sigma * sigma);
    let mut acc = 0.0;
    for (ci, &w) in level_weights.iter().enumerate() {
        let base = ci * g;
        for (i, &a) in area_weights.iter().enumerate() {
            let d = output[base + i] - target[base + i];
            acc += w * a * d * d;
        }
    }
    Ok(lambda * acc / (c * g) as f64)
}
