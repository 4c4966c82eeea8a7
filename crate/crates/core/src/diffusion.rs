//! Score-based generation with EDM preconditioning: denoiser training,
//! Euler sampling and diffusion posterior sampling (DPS).
//!
//! States are two-plane `f64` vectors `[re..., im...]` of length `2·h·w`;
//! the network itself runs in `f32`. The network receives `c_in·x` plus a
//! constant third plane holding `c_noise = ln(σ)/4`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gsure::probe_seed;
use crate::mri::{complex_to_planes, planes_to_complex, ForwardModel};
use crate::nnet::{AdamState, Checkpoint, NetConfig, Network, Planes, Tape};
use crate::par;
use crate::tensor::CTensor;

pub const SIGMA_DATA: f64 = 0.5;
/// Exponent of the EDM step-spacing rule.
pub const EDM_RHO: f64 = 7.0;

pub fn c_skip(sigma: f64, sigma_data: f64) -> f64 {
    let sd2 = sigma_data * sigma_data;
    sd2 / (sigma * sigma + sd2)
}

pub fn c_out(sigma: f64, sigma_data: f64) -> f64 {
    sigma * sigma_data / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_in(sigma: f64, sigma_data: f64) -> f64 {
    1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// Loss weight `(σ² + σ_d²)/(σ·σ_d)²`, which cancels `c_out²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// A clean-image estimator `D(x, σ)` on two-plane states.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &[f64], height: usize, width: usize, sigma: f64) -> Result<Vec<f64>>;

    /// `D(x, σ)` together with `∇ₓ⟨v, D(x, σ)⟩`, where `v = upstream(D)`.
    fn denoise_vjp(
        &self,
        x: &[f64],
        height: usize,
        width: usize,
        sigma: f64,
        upstream: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Posterior mean of an isotropic Gaussian prior `N(μ, τ²I)` under additive
/// noise of variance `σ²` per real entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub tau_sq: f64,
}

impl GaussianDenoiser {
    fn gain(&self, sigma: f64) -> f64 {
        self.tau_sq / (self.tau_sq + sigma * sigma)
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &[f64], _h: usize, _w: usize, sigma: f64) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape(format!("state length {} vs prior mean {}", x.len(), self.mean.len())));
        }
        if sigma < 0.0 {
            return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
        }
        let c = self.gain(sigma);
        Ok(x.iter().zip(&self.mean).map(|(v, m)| c * v + (1.0 - c) * m).collect())
    }

    fn denoise_vjp(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        sigma: f64,
        upstream: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.denoise(x, h, w, sigma)?;
        let c = self.gain(sigma);
        let g = upstream(&d)?.into_iter().map(|v| c * v).collect();
        Ok((d, g))
    }
}

/// A trained network wrapped with the EDM preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct EdmDenoiser {
    pub net: Network<f32>,
    pub sigma_data: f64,
}

impl EdmDenoiser {
    fn net_input(&self, x: &[f64], h: usize, w: usize, sigma: f64) -> Result<Planes<f32>> {
        if x.len() != 2 * h * w {
            return Err(Error::Shape(format!("state length {} is not 2x{h}x{w}", x.len())));
        }
        let ci = c_in(sigma, self.sigma_data);
        let cn = c_noise(sigma) as f32;
        let mut data: Vec<f32> = x.iter().map(|v| (ci * v) as f32).collect();
        data.extend(std::iter::repeat_n(cn, h * w));
        Planes::new(3, h, w, data)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
    }
    Ok(())
}

impl Denoiser for EdmDenoiser {
    fn denoise(&self, x: &[f64], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let out = self.net.forward(&self.net_input(x, h, w, sigma)?)?;
        let (cs, co) = (c_skip(sigma, self.sigma_data), c_out(sigma, self.sigma_data));
        Ok(x.iter().zip(&out.data).map(|(v, f)| cs * v + co * *f as f64).collect())
    }

    fn denoise_vjp(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        sigma: f64,
        upstream: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            let g = upstream(x)?;
            return Ok((x.to_vec(), g));
        }
        let (cs, co, ci) = (c_skip(sigma, self.sigma_data), c_out(sigma, self.sigma_data), c_in(sigma, self.sigma_data));
        let mut d = Vec::new();
        let mut v = Vec::new();
        let (_, gin) = self.net.forward_and_input_grad(&self.net_input(x, h, w, sigma)?, |f| {
            d = x.iter().zip(&f.data).map(|(a, b)| cs * a + co * *b as f64).collect();
            v = upstream(&d)?;
            Ok(v.iter().map(|u| (co * u) as f32).collect())
        })?;
        let g = v.iter().zip(&gin.data[..2 * h * w]).map(|(u, gi)| cs * u + ci * *gi as f64).collect();
        Ok((d, g))
    }
}

/// Step spacing for the sampling schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    /// `(σmax^{1/ρ} + t(σmin^{1/ρ} − σmax^{1/ρ}))^ρ` with `ρ = 7`.
    Edm,
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spacing::Linear => "linear",
            Spacing::Edm => "edm",
        })
    }
}

impl FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Spacing::Linear),
            "edm" => Ok(Spacing::Edm),
            _ => Err(Error::Config(format!("unknown schedule spacing '{s}'"))),
        }
    }
}

/// `σ_0 = σ_max > σ_1 > ... > σ_{N-1} = σ_min > σ_N = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub spacing: Spacing,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, steps: usize, spacing: Spacing) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < σ_min < σ_max, got {sigma_min}, {sigma_max}")));
        }
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let mut sigmas: Vec<f64> = (0..steps)
            .map(|i| {
                let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                match spacing {
                    Spacing::Linear => sigma_max + t * (sigma_min - sigma_max),
                    Spacing::Edm => {
                        let (a, b) = (sigma_max.powf(1.0 / EDM_RHO), sigma_min.powf(1.0 / EDM_RHO));
                        (a + t * (b - a)).powf(EDM_RHO)
                    }
                }
            })
            .collect();
        sigmas[0] = sigma_max;
        sigmas.push(0.0);
        Ok(Self { sigma_min, sigma_max, spacing, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Training noise-level law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaLaw {
    LogUniform,
    /// `ln σ ~ N(mean, std²)`, clamped to the configured range.
    LogNormal { mean: f64, std: f64 },
}

impl fmt::Display for SigmaLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaLaw::LogUniform => f.write_str("log-uniform"),
            SigmaLaw::LogNormal { mean, std } => write!(f, "log-normal:{mean}:{std}"),
        }
    }
}

impl FromStr for SigmaLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "log-uniform" {
            return Ok(SigmaLaw::LogUniform);
        }
        if s == "log-normal" {
            return Ok(SigmaLaw::LogNormal { mean: -1.2, std: 1.2 });
        }
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() == 3 && parts[0] == "log-normal" {
            let p = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad sigma law '{s}'")));
            return Ok(SigmaLaw::LogNormal { mean: p(parts[1])?, std: p(parts[2])? });
        }
        Err(Error::Config(format!("unknown sigma law '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdmConfig {
    pub net: NetConfig,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub law: SigmaLaw,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            net: NetConfig { in_channels: 3, out_channels: 2, widths: vec![16, 32], kernel: 3, residual: false, seed: 0 },
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: SIGMA_DATA,
            law: SigmaLaw::LogUniform,
            iterations: 300,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.in_channels != 3 || self.net.out_channels != 2 {
            return Err(Error::Config("EDM network must map 3 input planes to 2 output planes".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!("need 0 < σ_min < σ_max, got {}, {}", self.sigma_min, self.sigma_max)));
        }
        if !(self.sigma_data > 0.0) || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("σ_data, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    fn draw_sigma(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        match self.law {
            SigmaLaw::LogUniform => {
                let u: f64 = rand::Rng::random(rng);
                (lo + u * (hi - lo)).exp()
            }
            SigmaLaw::LogNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                (mean + std * z).clamp(lo, hi).exp()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdmCheckpoint {
    pub model: EdmDenoiser,
    pub cfg: EdmConfig,
    /// Minibatch-mean weighted loss per iteration.
    pub trace: Vec<f64>,
}

impl EdmCheckpoint {
    pub fn init(cfg: &EdmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: EdmDenoiser { net: Network::build(&cfg.net)?, sigma_data: cfg.sigma_data },
            cfg: cfg.clone(),
            trace: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("edm", self.trace.len() as u64, self.model.net.clone())
            .with_meta("sigma_data", format!("{:e}", self.cfg.sigma_data))
            .with_meta("sigma_min", format!("{:e}", self.cfg.sigma_min))
            .with_meta("sigma_max", format!("{:e}", self.cfg.sigma_max))
            .with_meta("law", self.cfg.law)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "edm" {
            return Err(Error::Contract(format!("expected an edm checkpoint, got '{}'", ck.kind)));
        }
        let law = ck.meta.get("law").map(|s| s.parse()).transpose()?.unwrap_or(SigmaLaw::LogUniform);
        let cfg = EdmConfig {
            net: ck.net.config().clone(),
            sigma_data: ck.meta_f64("sigma_data")?,
            sigma_min: ck.meta_f64("sigma_min")?,
            sigma_max: ck.meta_f64("sigma_max")?,
            law,
            ..EdmConfig::default()
        };
        Ok(Self { model: EdmDenoiser { net: ck.net.clone(), sigma_data: cfg.sigma_data }, cfg, trace: Vec::new() })
    }
}

/// `λ(σ)·||D(x0 + n, σ) − x0||²` and its parameter gradient for a fixed
/// noise draw. Uses `λ·c_out² = 1`, so the loss is evaluated as
/// `||F − (x0 − c_skip(x0 + n))/c_out||²`.
pub fn edm_loss_at(
    model: &EdmDenoiser,
    x0: &[f64],
    noise: &[f64],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<(f64, Vec<f32>)> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("training noise level must be positive, got {sigma}")));
    }
    if noise.len() != x0.len() {
        return Err(Error::Shape(format!("noise length {} vs image {}", noise.len(), x0.len())));
    }
    let xn: Vec<f64> = x0.iter().zip(noise).map(|(a, b)| a + b).collect();
    let input = model.net_input(&xn, height, width, sigma)?;
    let (cs, co) = (c_skip(sigma, model.sigma_data), c_out(sigma, model.sigma_data));
    let target: Vec<f32> = x0.iter().zip(&xn).map(|(a, b)| ((a - cs * b) / co) as f32).collect();
    let mut tape = Tape::new();
    let (f, _, pv) = model.net.forward_on(&mut tape, &input)?;
    let t = tape.leaf(target, [2, height, width])?;
    let r = tape.sub(f, t)?;
    let loss_v = tape.dot(r, r)?;
    let loss = tape.scalar(loss_v) as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite EDM loss at σ = {sigma}")));
    }
    let grads = tape.backward(loss_v, &[1.0])?;
    Ok((loss, model.net.collect_grads(&grads, &pv)))
}

/// Draws `σ` from the configured law and `n ~ N(0, σ²)` per real entry,
/// then evaluates [`edm_loss_at`].
pub fn edm_loss(
    model: &EdmDenoiser,
    x0: &[f64],
    height: usize,
    width: usize,
    cfg: &EdmConfig,
    seed: u64,
) -> Result<(f64, Vec<f32>)> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = cfg.draw_sigma(&mut rng);
    let noise: Vec<f64> = (0..x0.len()).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
    edm_loss_at(model, x0, &noise, height, width, sigma)
}

/// Adam on the EDM loss over two-plane training images.
pub fn train_edm(images: &[CTensor], cfg: &EdmConfig) -> Result<EdmCheckpoint> {
    if images.is_empty() {
        return Err(Error::Contract("diffusion training needs at least one image".into()));
    }
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
    if images.iter().any(|im| im.shape() != [h, w]) {
        return Err(Error::Shape("training images must share one 2-D shape".into()));
    }
    let planes: Vec<Vec<f64>> = images.iter().map(|im| complex_to_planes(&im.to_complex::<f64>())).collect();
    let mut ck = EdmCheckpoint::init(cfg)?;
    ck.model.net.check_input([3, h, w])?;
    let mut adam = AdamState::<f32>::new(ck.model.net.param_count(), cfg.lr);
    let blocks = ck.model.net.blocks().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(planes.len()) {
            if order.is_empty() {
                order = (0..planes.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let model = &ck.model;
        let results = par::try_map_indexed(batch.len(), |i| {
            edm_loss(model, &planes[batch[i]], h, w, cfg, probe_seed(cfg.seed, iter, i))
        })
        .map_err(|e| Error::Training { iter, msg: e.to_string() })?;
        let mut grad = vec![0f32; ck.model.net.param_count()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += *b;
            }
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(ck.model.net.params_mut(), &grad, &blocks).map_err(|e| match e {
            Error::Training { msg, .. } => Error::Training { iter, msg },
            other => other,
        })?;
        ck.trace.push(loss / batch.len() as f64);
    }
    Ok(ck)
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iter,edm_loss\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{},{:.8e}\n", i + 1, v));
    }
    s
}

/// Sampler settings shared by unconditional and guided sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DpsConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
    pub spacing: Spacing,
    /// Guidance strength `γ₀`; the step is `γ₀/||y − A x̂₀||`.
    pub gamma: f64,
    /// EDM churn; 0 gives the deterministic ODE sampler.
    pub churn: f64,
    /// Number of posterior samples drawn per measurement.
    pub samples: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        Self { sigma_min: 0.004, sigma_max: 10.0, steps: 500, spacing: Spacing::Linear, gamma: 1.0, churn: 0.0, samples: 5 }
    }
}

impl DpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("guidance strength must be non-negative, got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(Error::Config("posterior sample count must be at least 1".into()));
        }
        if !(self.churn >= 0.0) {
            return Err(Error::Config(format!("churn must be non-negative, got {}", self.churn)));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_min, self.sigma_max, self.steps, self.spacing)
    }
}

fn initial_state(n: usize, sigma_max: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| sigma_max * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

/// Optional churn: raises the noise level from `σ` to `σ(1 + γ)` by adding
/// fresh noise. Returns the level to integrate from.
fn churn_step(x: &mut [f64], sigma: f64, churn: f64, steps: usize, rng: &mut ChaCha8Rng) -> f64 {
    if churn == 0.0 || sigma == 0.0 {
        return sigma;
    }
    let g = (churn / steps as f64).min(std::f64::consts::SQRT_2 - 1.0);
    let hat = sigma * (1.0 + g);
    let s = (hat * hat - sigma * sigma).sqrt();
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += s * z;
    }
    hat
}

fn euler(x: &[f64], d: &[f64], sigma: f64, next: f64) -> Vec<f64> {
    let k = (next - sigma) / sigma;
    x.iter().zip(d).map(|(a, b)| a + k * (a - b)).collect()
}

fn check_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sampler state became non-finite at step {step}")));
    }
    Ok(())
}

/// Euler integration of the probability-flow ODE from `x_0 ~ N(0, σ_max²)`.
pub fn sample_uncond_planes(
    den: &dyn Denoiser,
    height: usize,
    width: usize,
    schedule: &NoiseSchedule,
    churn: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = schedule.sigmas();
    let mut x = initial_state(2 * height * width, s[0], &mut rng);
    for i in 0..schedule.steps() {
        let sigma = churn_step(&mut x, s[i], churn, schedule.steps(), &mut rng);
        let d = den.denoise(&x, height, width, sigma)?;
        x = euler(&x, &d, sigma, s[i + 1]);
        check_state(&x, i)?;
    }
    Ok(x)
}

pub fn sample_uncond(den: &dyn Denoiser, height: usize, width: usize, schedule: &NoiseSchedule, churn: f64, seed: u64) -> Result<CTensor> {
    let x = sample_uncond_planes(den, height, width, schedule, churn, seed)?;
    CTensor::from_complex(vec![height, width], &planes_to_complex(&x))
}

/// Result of one guided reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct DpsOutcome {
    pub image: CTensor,
    pub seed: u64,
    pub steps: usize,
    /// `||y − A x||` of the returned image.
    pub residual: f64,
}

fn residual_planes(fm: &ForwardModel<f32>, y: &[Complex32], x: &[f64]) -> Result<(Vec<Complex32>, f64)> {
    let xc: Vec<Complex32> = planes_to_complex(&x.iter().map(|v| *v as f32).collect::<Vec<_>>());
    let ax = fm.apply_a(&xc)?;
    let r: Vec<Complex32> = ax.iter().zip(y).map(|(a, b)| a - b).collect();
    let norm = r.iter().map(|v| v.norm_sqr() as f64).sum::<f64>().sqrt();
    Ok((r, norm))
}

/// Diffusion posterior sampling. Each step forms `x̂₀ = D(x_i, σ_i)`, takes
/// the Euler step, then subtracts `γ₀/||y − A x̂₀|| · ∇_{x_i}||y − A x̂₀||²`,
/// the gradient flowing through the denoiser. With `γ₀ = 0` this is exactly
/// [`sample_uncond`].
pub fn dps_reconstruct(
    den: &dyn Denoiser,
    y: &CTensor,
    fm: &ForwardModel<f32>,
    cfg: &DpsConfig,
    seed: u64,
) -> Result<DpsOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let (h, w) = fm.dims();
    if y.shape() != [fm.coils(), h, w] {
        return Err(Error::Shape(format!("k-space {:?} does not match the operator", y.shape())));
    }
    let yv = y.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = schedule.sigmas();
    let n = schedule.steps();
    let mut x = initial_state(2 * h * w, s[0], &mut rng);
    for i in 0..n {
        let sigma = churn_step(&mut x, s[i], cfg.churn, n, &mut rng);
        if cfg.gamma == 0.0 {
            let d = den.denoise(&x, h, w, sigma)?;
            x = euler(&x, &d, sigma, s[i + 1]);
        } else {
            let mut rnorm = 0.0;
            let (d, grad) = den.denoise_vjp(&x, h, w, sigma, &mut |d| {
                let (r, norm) = residual_planes(fm, yv, d)?;
                rnorm = norm;
                Ok(complex_to_planes(&fm.apply_ah(&r)?).into_iter().map(|v| 2.0 * v as f64).collect())
            })?;
            let mut next = euler(&x, &d, sigma, s[i + 1]);
            if rnorm > 0.0 {
                let k = cfg.gamma / rnorm;
                next.iter_mut().zip(&grad).for_each(|(a, g)| *a -= k * g);
            }
            x = next;
        }
        check_state(&x, i)?;
    }
    let (_, residual) = residual_planes(fm, yv, &x)?;
    Ok(DpsOutcome { image: CTensor::from_complex(vec![h, w], &planes_to_complex(&x))?, seed, steps: n, residual })
}

/// `cfg.samples` reconstructions with seeds `base_seed + k`, in parallel.
pub fn dps_posterior(
    den: &dyn Denoiser,
    y: &CTensor,
    fm: &ForwardModel<f32>,
    cfg: &DpsConfig,
    base_seed: u64,
) -> Result<Vec<DpsOutcome>> {
    par::try_map_indexed(cfg.samples, |k| dps_reconstruct(den, y, fm, cfg, base_seed + k as u64))
}

/// Complex arithmetic mean.
pub fn posterior_average(samples: &[CTensor]) -> Result<CTensor> {
    let first = samples.first().ok_or_else(|| Error::Contract("cannot average an empty sample list".into()))?;
    if samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape("posterior samples must share one shape".into()));
    }
    let n = samples.len() as f64;
    let mut acc = vec![num_complex::Complex64::new(0.0, 0.0); first.len()];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += num_complex::Complex64::new(v.re as f64, v.im as f64);
        }
    }
    let mean: Vec<num_complex::Complex64> = acc.into_iter().map(|v| v / n).collect();
    CTensor::from_complex(first.shape().to_vec(), &mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{make_mask, make_sensitivities};

    fn tiny_cfg(widths: Vec<usize>) -> EdmConfig {
        EdmConfig {
            net: NetConfig { in_channels: 3, out_channels: 2, widths, kernel: 3, residual: false, seed: 3 },
            iterations: 40,
            batch: 2,
            lr: 2e-3,
            seed: 5,
            ..EdmConfig::default()
        }
    }

    #[test]
    fn preconditioner_identities() {
        assert_eq!(c_skip(0.0, 0.5), 1.0);
        assert_eq!(c_out(0.0, 0.5), 0.0);
        assert_eq!(c_skip(0.5, 0.5), 0.5);
        for s in [1e-3, 0.1, 0.5, 3.0, 80.0] {
            assert!((loss_weight(s, 0.5) * c_out(s, 0.5).powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_denoiser_is_skip_scaling() {
        let model = EdmDenoiser { net: Network::zeros(&tiny_cfg(vec![4]).net).unwrap(), sigma_data: 0.5 };
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(model.denoise(&x, 4, 4, 0.0).unwrap(), x);
        let d = model.denoise(&x, 4, 4, 0.8).unwrap();
        let cs = c_skip(0.8, 0.5);
        for (a, b) in d.iter().zip(&x) {
            assert!((a - cs * b).abs() < 1e-12);
        }
        assert!(matches!(model.denoise(&x, 4, 4, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        // zero network, one pixel: σ = 0.7, σ_d = 0.5, x0 = (0.3, −0.2), n = (0.1, 0.05)
        // c_skip = 0.25/0.74, λ = 0.74/0.1225
        // loss = λ·[(c_skip·0.4 − 0.3)² + (c_skip·(−0.15) + 0.2)²] = 0.298887...
        let model = EdmDenoiser { net: Network::zeros(&tiny_cfg(vec![2]).net).unwrap(), sigma_data: 0.5 };
        let (loss, _) = edm_loss_at(&model, &[0.3, -0.2], &[0.1, 0.05], 1, 1, 0.7).unwrap();
        let cs = 0.25 / 0.74;
        let lam = 0.74 / 0.1225;
        let hand = lam * ((cs * 0.4 - 0.3f64).powi(2) + (cs * -0.15 + 0.2f64).powi(2));
        assert!((hand - 0.298_887).abs() < 1e-5);
        assert!((loss - hand).abs() < 1e-5 * hand);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg(vec![3, 4]);
        let net64: Network<f64> = Network::<f32>::build(&cfg.net).unwrap().cast();
        let (h, w) = (4, 4);
        let x0: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.61).cos() * 0.4).collect();
        let noise: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 1.3).sin() * 0.3).collect();
        let sigma = 0.45;
        // same construction as edm_loss_at, in f64
        let eval = |net: &Network<f64>| -> (f64, Vec<f64>) {
            let xn: Vec<f64> = x0.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let mut inp: Vec<f64> = xn.iter().map(|v| c_in(sigma, 0.5) * v).collect();
            inp.extend(std::iter::repeat_n(c_noise(sigma), h * w));
            let (cs, co) = (c_skip(sigma, 0.5), c_out(sigma, 0.5));
            let target: Vec<f64> = x0.iter().zip(&xn).map(|(a, b)| (a - cs * b) / co).collect();
            let mut tape = Tape::new();
            let (f, _, pv) = net.forward_on(&mut tape, &Planes::new(3, h, w, inp).unwrap()).unwrap();
            let t = tape.leaf(target, [2, h, w]).unwrap();
            let r = tape.sub(f, t).unwrap();
            let l = tape.dot(r, r).unwrap();
            let g = tape.backward(l, &[1.0]).unwrap();
            (tape.scalar(l), net.collect_grads(&g, &pv))
        };
        let (_, g) = eval(&net64);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in (0..net64.param_count()).step_by(7) {
            let eps = 1e-5;
            let mut p = net64.clone();
            p.params_mut()[k] += eps;
            let mut m = net64.clone();
            m.params_mut()[k] -= eps;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * eps);
            let scale = fd.abs().max(g[k].abs()).max(1e-3 * gmax);
            assert!((fd - g[k]).abs() / scale < 1e-5, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let cfg = tiny_cfg(vec![3]);
        let model = EdmDenoiser { net: Network::build(&cfg.net).unwrap(), sigma_data: 0.5 };
        let (h, w) = (2, 2);
        let x: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 3.5)).collect();
        let v: Vec<f64> = (0..8).map(|i| ((i * 3) as f64).sin()).collect();
        let sigma = 0.6;
        let (_, g) = model.denoise_vjp(&x, h, w, sigma, &mut |_| Ok(v.clone())).unwrap();
        for k in 0..8 {
            let eps = 1e-2;
            let f = |d: f64| {
                let mut xp = x.clone();
                xp[k] += d;
                let out = model.denoise(&xp, h, w, sigma).unwrap();
                out.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 2e-3 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn schedules_are_monotone_with_endpoints() {
        for spacing in [Spacing::Linear, Spacing::Edm] {
            for steps in [1, 2, 5, 100] {
                let s = NoiseSchedule::new(0.004, 10.0, steps, spacing).unwrap();
                let v = s.sigmas();
                assert_eq!(v.len(), steps + 1);
                assert_eq!(v[0], 10.0);
                assert_eq!(v[steps], 0.0);
                assert!(v.windows(2).all(|p| p[0] > p[1]));
                if steps > 1 {
                    assert!((v[steps - 1] - 0.004).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(NoiseSchedule::new(1.0, 0.5, 10, Spacing::Linear), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::new(0.1, 1.0, 0, Spacing::Linear), Err(Error::Config(_))));
    }

    #[test]
    fn zero_denoiser_single_step_lands_on_zero() {
        let den = GaussianDenoiser { mean: vec![0.0; 8], tau_sq: 0.0 };
        let s = NoiseSchedule::new(0.1, 10.0, 1, Spacing::Linear).unwrap();
        let x = sample_uncond_planes(&den, 2, 2, &s, 0.0, 9).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gaussian_prior_sampling_reproduces_moments() {
        let (mu, tau) = (0.8, 0.3);
        let den = GaussianDenoiser { mean: vec![mu; 2 * 8 * 8], tau_sq: tau * tau };
        let s = NoiseSchedule::new(0.002, 80.0, 250, Spacing::Edm).unwrap();
        let xs = par::map_indexed(500, |k| sample_uncond_planes(&den, 8, 8, &s, 0.0, 1000 + k as u64).unwrap());
        let all: Vec<f64> = xs.into_iter().flatten().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        assert!((m - mu).abs() < 0.05 * mu, "mean {m}");
        assert!((v - tau * tau).abs() < 0.05 * tau * tau, "variance {v}");
        let a = sample_uncond_planes(&den, 8, 8, &s, 0.0, 3).unwrap();
        assert_eq!(a, sample_uncond_planes(&den, 8, 8, &s, 0.0, 3).unwrap());
    }

    fn gaussian_problem(r: usize) -> (ForwardModel<f32>, CTensor, Vec<f64>, GaussianDenoiser) {
        let (h, w) = (16, 16);
        let maps = make_sensitivities(4, h, w, 11).unwrap();
        let mask = if r == 1 { crate::mri::SamplingMask::full(w) } else { make_mask(w, r, 4, 2).unwrap() };
        let fm = ForwardModel::<f32>::new(&maps, mask, None).unwrap();
        let (mu, tau) = (0.5, 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let truth: Vec<f64> = (0..2 * h * w).map(|_| mu + tau * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
        let xc = planes_to_complex(&truth.iter().map(|v| *v as f32).collect::<Vec<_>>());
        let y = CTensor::from_complex(vec![4, h, w], &fm.apply_a(&xc).unwrap()).unwrap();
        (fm, y, truth, GaussianDenoiser { mean: vec![mu; 2 * h * w], tau_sq: tau * tau })
    }

    #[test]
    fn guidance_off_equals_unconditional() {
        let (fm, y, _, den) = gaussian_problem(4);
        let cfg = DpsConfig { steps: 30, gamma: 0.0, ..DpsConfig::default() };
        let a = dps_reconstruct(&den, &y, &fm, &cfg, 4).unwrap();
        let b = sample_uncond(&den, 16, 16, &cfg.schedule().unwrap(), 0.0, 4).unwrap();
        assert_eq!(a.image, b);
        let bad = DpsConfig { gamma: -1.0, ..cfg };
        assert!(matches!(dps_reconstruct(&den, &y, &fm, &bad, 4), Err(Error::Config(_))));
    }

    #[test]
    fn dps_recovers_noiseless_fully_sampled_posterior_mean() {
        // full sampling without noise: the conjugate posterior mean is Aᴴy
        let (fm, y, truth, den) = gaussian_problem(1);
        let cfg = DpsConfig { steps: 200, spacing: Spacing::Edm, gamma: 0.1, ..DpsConfig::default() };
        let out = dps_reconstruct(&den, &y, &fm, &cfg, 1).unwrap();
        let est = complex_to_planes(&out.image.to_complex::<f64>());
        let err = est.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 0.05, "relative error {}", err / norm);
    }

    #[test]
    fn guidance_lowers_data_residual() {
        let (fm, y, _, den) = gaussian_problem(4);
        let cfg = DpsConfig { steps: 100, spacing: Spacing::Edm, gamma: 0.1, ..DpsConfig::default() };
        let guided = dps_reconstruct(&den, &y, &fm, &cfg, 2).unwrap();
        let free = dps_reconstruct(&den, &y, &fm, &DpsConfig { gamma: 0.0, ..cfg }, 2).unwrap();
        assert!(guided.residual < 0.5 * free.residual, "{} vs {}", guided.residual, free.residual);
    }

    #[test]
    fn churn_is_seeded() {
        let den = GaussianDenoiser { mean: vec![0.1; 8], tau_sq: 0.2 };
        let s = NoiseSchedule::new(0.01, 5.0, 20, Spacing::Edm).unwrap();
        let a = sample_uncond_planes(&den, 2, 2, &s, 10.0, 1).unwrap();
        assert_eq!(a, sample_uncond_planes(&den, 2, 2, &s, 10.0, 1).unwrap());
        assert_ne!(a, sample_uncond_planes(&den, 2, 2, &s, 0.0, 1).unwrap());
    }

    #[test]
    fn posterior_average_examples() {
        let x = CTensor::new(vec![2], vec![Complex32::new(1.0, -2.0), Complex32::new(0.5, 0.25)]).unwrap();
        assert_eq!(posterior_average(std::slice::from_ref(&x)).unwrap(), x);
        let neg = CTensor::new(vec![2], x.data().iter().map(|v| -v).collect()).unwrap();
        assert!(posterior_average(&[x, neg]).unwrap().data().iter().all(|v| v.norm() == 0.0));
        assert!(matches!(posterior_average(&[]), Err(Error::Contract(_))));
    }

    fn smooth_image(h: usize, w: usize, phase: f64) -> CTensor {
        let v: Vec<num_complex::Complex64> = (0..h * w)
            .map(|k| {
                let (i, j) = ((k / w) as f64, (k % w) as f64);
                num_complex::Complex64::new(0.5 * (0.4 * i + phase).sin() * (0.3 * j).cos(), 0.2 * (0.2 * (i + j)).cos())
            })
            .collect();
        CTensor::from_complex(vec![h, w], &v).unwrap()
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let images: Vec<CTensor> = (0..4).map(|k| smooth_image(8, 8, k as f64)).collect();
        let mut cfg = tiny_cfg(vec![8, 8]);
        cfg.iterations = 120;
        cfg.sigma_max = 5.0;
        let a = train_edm(&images, &cfg).unwrap();
        let k = 30;
        let first = a.trace[..k].iter().sum::<f64>() / k as f64;
        let last = a.trace[a.trace.len() - k..].iter().sum::<f64>() / k as f64;
        assert!(last < first, "{first} -> {last}");
        let b = train_edm(&images, &cfg).unwrap();
        assert_eq!(a.model.net.params(), b.model.net.params());
        assert!(matches!(train_edm(&[], &cfg), Err(Error::Contract(_))));
        let back = EdmCheckpoint::from_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(back.model, a.model);
    }

    #[test]
    fn single_image_overfit_halves_denoising_error() {
        let img = smooth_image(8, 8, 0.3);
        let mut cfg = tiny_cfg(vec![8, 8]);
        cfg.iterations = 400;
        cfg.batch = 1;
        cfg.lr = 3e-3;
        let x0 = complex_to_planes(&img.to_complex::<f64>());
        let mse = |m: &EdmDenoiser| {
            let mut tot = 0.0;
            for (k, sigma) in [0.05, 0.2, 0.5, 1.0].iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(500 + k as u64);
                let xn: Vec<f64> = x0.iter().map(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
                let d = m.denoise(&xn, 8, 8, *sigma).unwrap();
                tot += d.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            tot
        };
        let init = EdmCheckpoint::init(&cfg).unwrap();
        let trained = train_edm(std::slice::from_ref(&img), &cfg).unwrap();
        let (before, after) = (mse(&init.model), mse(&trained.model));
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
