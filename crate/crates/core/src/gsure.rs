//! Self-supervised denoiser training with the generalized Stein unbiased
//! risk estimate.
//!
//! For a fully sampled, SOS-normalized operator the network consumes
//! `u = Aᴴy/σ²` and the loss is
//!
//! ```text
//! ||g(u)||² + 2 [ w · div_{Aᴴy} g(u) − Re⟨g(u), A†y⟩ ]
//! ```
//!
//! with the divergence estimated from one Gaussian probe
//! `bᵀ(g((Aᴴy + εb)/σ²) − g(Aᴴy/σ²))/ε`. The weight `w` depends on
//! [`DivergenceScaling`]; the default `σ²/2` (the per-real-component noise
//! variance of complex data with total variance `σ²`) makes the expected
//! loss equal `E||g − x||² − ||x||²`.
//!
//! Internally the network sees `s·u` with `s` the reference noise variance
//! stored in the checkpoint, which keeps its input on the scale of the
//! image.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mri::{complex_to_planes, planes_to_complex, ForwardModel};
use crate::nnet::{AdamState, Checkpoint, NetConfig, Network, Planes, Tape};
use crate::par;
use crate::real::Real;
use crate::tensor::CTensor;

/// How the divergence with respect to `Aᴴy` is weighted in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceScaling {
    /// `σ²/2`: unbiased for complex noise of total variance `σ²`.
    Unbiased,
    /// `σ²`: divergence taken with respect to the scaled input `Aᴴy/σ²`.
    ScaledInput,
    /// `1`: the divergence with respect to `Aᴴy`, unweighted.
    Unweighted,
}

impl DivergenceScaling {
    pub fn weight(self, sigma_sq: f64) -> f64 {
        match self {
            DivergenceScaling::Unbiased => 0.5 * sigma_sq,
            DivergenceScaling::ScaledInput => sigma_sq,
            DivergenceScaling::Unweighted => 1.0,
        }
    }
}

impl fmt::Display for DivergenceScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceScaling::Unbiased => "unbiased",
            DivergenceScaling::ScaledInput => "scaled-input",
            DivergenceScaling::Unweighted => "unweighted",
        })
    }
}

impl FromStr for DivergenceScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiased" => Ok(DivergenceScaling::Unbiased),
            "scaled-input" => Ok(DivergenceScaling::ScaledInput),
            "unweighted" => Ok(DivergenceScaling::Unweighted),
            _ => Err(Error::Config(format!("unknown divergence scaling '{s}'"))),
        }
    }
}

/// Standard-normal probe over `n` real values.
pub fn gaussian_probe<T: Real>(n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng))).collect()
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// One Monte-Carlo divergence sample `bᵀ(f(x + εb) − f(x))/ε`.
pub fn divergence_probe<T, F>(f: F, x: &[T], eps: f64, b: &[T]) -> Result<f64>
where
    T: Real,
    F: Fn(&[T]) -> Vec<T>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("probe step must be positive, got {eps}")));
    }
    if b.len() != x.len() {
        return Err(Error::Shape("probe and input lengths differ".into()));
    }
    let e = T::from_f64_lossy(eps);
    let xp: Vec<T> = x.iter().zip(b).map(|(&a, &bb)| a + e * bb).collect();
    let (f1, f0) = (f(&xp), f(x));
    if f1.len() != x.len() || f0.len() != x.len() {
        return Err(Error::Shape("divergence needs a map between equal dimensions".into()));
    }
    let d: f64 = b.iter().zip(f1.iter().zip(&f0)).map(|(bb, (p, q))| bb.as_f64() * (p.as_f64() - q.as_f64())).sum();
    let v = d / eps;
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite divergence estimate".into()));
    }
    Ok(v)
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std_err: (var / n).sqrt(), samples: v.len() }
    }
}

/// Probe-averaged divergence with one fresh probe per sample, probe `k`
/// drawn from `seed + k`.
pub fn mc_divergence<T, F>(f: F, x: &[T], eps: f64, probes: usize, seed: u64) -> Result<McEstimate>
where
    T: Real,
    F: Fn(&[T]) -> Vec<T>,
{
    if probes == 0 {
        return Err(Error::Config("need at least one probe".into()));
    }
    let vals = (0..probes)
        .map(|k| divergence_probe(&f, x, eps, &gaussian_probe::<T>(x.len(), seed.wrapping_add(k as u64))))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_samples(&vals))
}

/// Loss assembled from its parts: `||g||² + 2(w·div − ⟨g, A†y⟩)`.
pub fn gsure_from_parts<T: Real>(g: &[T], pinv: &[T], div: f64, sigma_sq: f64, scaling: DivergenceScaling) -> f64 {
    dot64(g, g) + 2.0 * (scaling.weight(sigma_sq) * div - dot64(g, pinv))
}

/// GSURE for an arbitrary map `g` of the scaled input `u = Aᴴy/σ²`, all
/// images in the two-plane real layout.
#[allow(clippy::too_many_arguments)]
pub fn gsure_loss_fn<T, F>(
    g: F,
    aty: &[T],
    pinv: &[T],
    sigma_sq: f64,
    eps: f64,
    probe: &[T],
    scaling: DivergenceScaling,
) -> Result<f64>
where
    T: Real,
    F: Fn(&[T]) -> Vec<T>,
{
    if !(sigma_sq > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {sigma_sq}")));
    }
    let inv = T::from_f64_lossy(1.0 / sigma_sq);
    let scaled = |v: &[T]| -> Vec<T> { g(&v.iter().map(|&a| a * inv).collect::<Vec<_>>()) };
    let div = divergence_probe(scaled, aty, eps, probe)?;
    let out = g(&aty.iter().map(|&a| a * inv).collect::<Vec<_>>());
    Ok(gsure_from_parts(&out, pinv, div, sigma_sq, scaling))
}

/// `½||g − x||²`.
pub fn supervised_from_output<T: Real>(g: &[T], clean: &[T]) -> f64 {
    0.5 * g.iter().zip(clean).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
}

/// Inputs for one training sample. Images are stored as two real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct GsureBatch {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub aty: Vec<f32>,
    pub pinv: Vec<f32>,
    pub sigma_sq: f64,
}

impl GsureBatch {
    /// Builds the sample from k-space `y` with the noise variance set on `fm`.
    pub fn from_kspace(id: &str, fm: &ForwardModel<f32>, y: &CTensor) -> Result<Self> {
        let sigma_sq = fm
            .noise_sigma_sq()
            .ok_or_else(|| Error::Contract("forward model has no noise variance".into()))?;
        let aty = fm.apply_ah(y.data())?;
        let pinv = if fm.mask().is_full() { aty.clone() } else { fm.apply_pinv(y.data(), 200, 1e-6)? };
        let (height, width) = fm.dims();
        Ok(Self {
            id: id.into(),
            height,
            width,
            aty: complex_to_planes(&aty),
            pinv: complex_to_planes(&pinv),
            sigma_sq,
        })
    }

    /// `Aᴴy/σ²` in plane layout.
    pub fn scaled_input(&self) -> Vec<f32> {
        let inv = (1.0 / self.sigma_sq) as f32;
        self.aty.iter().map(|v| v * inv).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsureConfig {
    pub net: NetConfig,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub scaling: DivergenceScaling,
    pub seed: u64,
    /// Score the whole set every this many iterations with fixed probes and
    /// keep the lowest-GSURE iterate; 0 keeps the final iterate.
    pub select_every: usize,
}

impl Default for GsureConfig {
    fn default() -> Self {
        Self {
            net: NetConfig { in_channels: 2, out_channels: 2, widths: vec![16, 32], kernel: 3, residual: true, seed: 0 },
            iterations: 200,
            batch: 4,
            lr: 1e-3,
            epsilon: 1e-3,
            scaling: DivergenceScaling::Unbiased,
            seed: 0,
            select_every: 0,
        }
    }
}

impl GsureConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.in_channels != 2 || self.net.out_channels != 2 {
            return Err(Error::Config("the denoiser maps 2 planes to 2 planes".into()));
        }
        if !(self.epsilon > 0.0) || !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("epsilon, learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserCheckpoint {
    pub net: Network<f32>,
    /// Reference noise variance `s`; the network sees `s·Aᴴy/σ²`.
    pub input_scale: f64,
    pub cfg: GsureConfig,
    /// Minibatch-mean GSURE loss per iteration.
    pub trace: Vec<f64>,
    /// Iterations applied to the kept weights.
    pub selected_iter: usize,
}

impl DenoiserCheckpoint {
    pub fn init(cfg: &GsureConfig, input_scale: f64) -> Result<Self> {
        cfg.validate()?;
        if !(input_scale > 0.0) {
            return Err(Error::Domain(format!("input scale must be positive, got {input_scale}")));
        }
        Ok(Self { net: Network::build(&cfg.net)?, input_scale, cfg: cfg.clone(), trace: Vec::new(), selected_iter: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("gsure", self.selected_iter as u64, self.net.clone())
            .with_meta("input_scale", format!("{:e}", self.input_scale))
            .with_meta("epsilon", format!("{:e}", self.cfg.epsilon))
            .with_meta("scaling", self.cfg.scaling)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "gsure" {
            return Err(Error::Contract(format!("expected a gsure checkpoint, got '{}'", ck.kind)));
        }
        let scaling = ck.meta.get("scaling").map(|s| s.parse()).transpose()?.unwrap_or(DivergenceScaling::Unbiased);
        let cfg = GsureConfig { net: ck.net.config().clone(), epsilon: ck.meta_f64("epsilon")?, scaling, ..GsureConfig::default() };
        Ok(Self { net: ck.net.clone(), input_scale: ck.meta_f64("input_scale")?, cfg, trace: Vec::new(), selected_iter: ck.step as usize })
    }
}

/// GSURE value and parameter gradient for one sample with probe `b`.
pub fn gsure_loss_grad<T: Real>(
    net: &Network<T>,
    input_scale: f64,
    batch: &GsureBatch,
    eps: f64,
    probe: &[T],
    scaling: DivergenceScaling,
) -> Result<(f64, Vec<T>)> {
    if !(batch.sigma_sq > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {}", batch.sigma_sq)));
    }
    let shape = [2, batch.height, batch.width];
    let k = input_scale / batch.sigma_sq;
    let aty: Vec<f64> = batch.aty.iter().map(|v| *v as f64).collect();
    let x0: Vec<T> = aty.iter().map(|v| T::from_f64_lossy(v * k)).collect();
    let x1: Vec<T> = aty.iter().zip(probe).map(|(v, b)| T::from_f64_lossy((v + eps * b.as_f64()) * k)).collect();
    let mut tape = Tape::new();
    let pv = net.param_leaves(&mut tape);
    let l0 = tape.leaf(x0, shape)?;
    let l1 = tape.leaf(x1, shape)?;
    let g0 = net.record(&mut tape, &pv, l0)?;
    let g1 = net.record(&mut tape, &pv, l1)?;
    let bl = tape.leaf(probe.to_vec(), shape)?;
    let pl = tape.leaf(batch.pinv.iter().map(|v| T::from_f64_lossy(*v as f64)).collect(), shape)?;
    let sq = tape.dot(g0, g0)?;
    let diff = tape.sub(g1, g0)?;
    let bd = tape.dot(bl, diff)?;
    let div_term = tape.scale(bd, T::from_f64_lossy(2.0 * scaling.weight(batch.sigma_sq) / eps));
    let ip = tape.dot(g0, pl)?;
    let ip_term = tape.scale(ip, T::from_f64_lossy(-2.0));
    let s = tape.add(sq, div_term)?;
    let total = tape.add(s, ip_term)?;
    let loss = tape.scalar(total).as_f64();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite GSURE loss for sample {}", batch.id)));
    }
    let grads = tape.backward(total, &[T::one()])?;
    Ok((loss, net.collect_grads(&grads, &pv)))
}

/// Probe seed for sample `idx` at iteration `iter`.
pub(crate) fn probe_seed(seed: u64, iter: usize, idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iter as u64) << 32)
        .wrapping_add(idx as u64)
}

/// Adam on the GSURE loss. Minibatches are drawn without replacement from a
/// reshuffled order each pass; per-sample gradients are computed in parallel
/// and reduced in sample order. `input_scale` defaults to the mean noise
/// variance of the set.
pub fn train_denoiser(data: &[GsureBatch], cfg: &GsureConfig) -> Result<DenoiserCheckpoint> {
    if data.is_empty() {
        return Err(Error::Contract("denoiser training needs at least one sample".into()));
    }
    let scale = data.iter().map(|b| b.sigma_sq).sum::<f64>() / data.len() as f64;
    let mut ck = DenoiserCheckpoint::init(cfg, scale)?;
    let mut adam = AdamState::<f32>::new(ck.net.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let blocks = ck.net.blocks().to_vec();
    let mut best: Option<(f64, Network<f32>, usize)> = None;
    for iter in 0..cfg.iterations {
        if cfg.select_every > 0 && iter % cfg.select_every == 0 {
            keep_if_better(&mut best, &ck.net, scale, data, cfg, iter)?;
        }
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let net = &ck.net;
        let results = par::try_map_indexed(batch.len(), |i| {
            let b = &data[batch[i]];
            let probe = gaussian_probe::<f32>(b.aty.len(), probe_seed(cfg.seed, iter, batch[i]));
            gsure_loss_grad(net, scale, b, cfg.epsilon, &probe, cfg.scaling)
        })
        .map_err(|e| Error::Training { iter, msg: e.to_string() })?;
        let mut grad = vec![0f32; ck.net.param_count()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += *b;
            }
        }
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        let loss = loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Training { iter, msg: "GSURE loss is not finite".into() });
        }
        adam.step(ck.net.params_mut(), &grad, &blocks).map_err(|e| match e {
            Error::Training { msg, .. } => Error::Training { iter, msg },
            other => other,
        })?;
        ck.trace.push(loss);
    }
    ck.selected_iter = cfg.iterations;
    if cfg.select_every > 0 {
        keep_if_better(&mut best, &ck.net, scale, data, cfg, cfg.iterations)?;
        if let Some((_, net, iter)) = best {
            ck.net = net;
            ck.selected_iter = iter;
        }
    }
    Ok(ck)
}

/// Set-mean GSURE with one fixed probe per sample, shared by every call so
/// that iterates are compared on identical probes.
pub fn gsure_set_score(net: &Network<f32>, input_scale: f64, data: &[GsureBatch], cfg: &GsureConfig) -> Result<f64> {
    let vals = par::try_map_indexed(data.len(), |i| {
        let b = &data[i];
        let probe = gaussian_probe::<f32>(b.aty.len(), probe_seed(cfg.seed ^ SELECT_PROBE_SALT, 0, i));
        let g = |u: &[f32]| -> Vec<f32> {
            let x = u.iter().map(|a| (*a as f64 * input_scale) as f32).collect();
            match Planes::new(2, b.height, b.width, x).and_then(|p| net.forward(&p)) {
                Ok(out) => out.data,
                Err(_) => vec![f32::NAN; u.len()],
            }
        };
        let v = gsure_loss_fn(g, &b.aty, &b.pinv, b.sigma_sq, cfg.epsilon, &probe, cfg.scaling)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite GSURE score for sample {}", b.id)));
        }
        Ok(v)
    })?;
    Ok(vals.iter().sum::<f64>() / data.len() as f64)
}

const SELECT_PROBE_SALT: u64 = 0x5E1E_C7ED;

fn keep_if_better(
    best: &mut Option<(f64, Network<f32>, usize)>,
    net: &Network<f32>,
    scale: f64,
    data: &[GsureBatch],
    cfg: &GsureConfig,
    iter: usize,
) -> Result<()> {
    let score = gsure_set_score(net, scale, data, cfg).map_err(|e| Error::Training { iter, msg: e.to_string() })?;
    if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
        *best = Some((score, net.clone(), iter));
    }
    Ok(())
}

/// Denoised coil-combined image `g(Aᴴy/σ²)`.
pub fn denoise(ckpt: &DenoiserCheckpoint, y: &CTensor, fm: &ForwardModel<f32>) -> Result<CTensor> {
    let sigma_sq = fm
        .noise_sigma_sq()
        .ok_or_else(|| Error::Contract("forward model has no noise variance; cannot form Aᴴy/σ²".into()))?;
    let (h, w) = fm.dims();
    let aty = complex_to_planes(&fm.apply_ah(y.data())?);
    let k = (ckpt.input_scale / sigma_sq) as f32;
    let x = Planes::new(2, h, w, aty.iter().map(|v| v * k).collect())?;
    let out = ckpt.net.forward(&x)?;
    CTensor::from_complex(vec![h, w], &planes_to_complex(&out.data))
}

/// Parallel denoising of many samples with one read-only checkpoint.
pub fn denoise_all(ckpt: &DenoiserCheckpoint, inputs: &[(ForwardModel<f32>, CTensor)]) -> Result<Vec<CTensor>> {
    par::try_map_indexed(inputs.len(), |i| denoise(ckpt, &inputs[i].1, &inputs[i].0))
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iter,gsure_loss\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{},{:.8e}\n", i + 1, v));
    }
    s
}

/// Mean of the first and last `k` entries of a loss trace.
pub fn trace_ends(trace: &[f64], k: usize) -> (f64, f64) {
    let k = k.min(trace.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&trace[..k]), mean(&trace[trace.len() - k..]))
}

/// Coil-combined `Aᴴy` used as the naive training target.
pub fn adjoint_image(y: &CTensor, fm: &ForwardModel<f32>) -> Result<CTensor> {
    let (h, w) = fm.dims();
    let v: Vec<Complex32> = fm.apply_ah(y.data())?;
    CTensor::from_complex(vec![h, w], &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{make_sensitivities, SamplingMask};
    use num_complex::Complex64;
    use rand::Rng;

    #[test]
    fn scalar_example() {
        // one complex pixel, y = 2, σ² = 1, g the identity: the real
        // 2-vector has divergence 2, weighted by σ²/2
        let g = [2.0f64, 0.0];
        let v = gsure_from_parts(&g, &[2.0, 0.0], 2.0, 1.0, DivergenceScaling::Unbiased);
        assert_eq!(v, -2.0);
        assert_eq!(gsure_from_parts(&[0.0f64, 0.0], &[2.0, 0.0], 0.0, 1.0, DivergenceScaling::Unbiased), 0.0);
        let e = gsure_loss_fn(|u: &[f64]| vec![0.0; u.len()], &[2.0, 0.0], &[2.0, 0.0], 1.0, 1e-3, &[0.3, -1.0], DivergenceScaling::Unbiased)
            .unwrap();
        assert_eq!(e, 0.0);
        assert!(matches!(
            gsure_loss_fn(|u: &[f64]| u.to_vec(), &[1.0], &[1.0], 0.0, 1e-3, &[1.0], DivergenceScaling::Unbiased),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn divergence_identity_and_constant() {
        let x = vec![0.5f64; 10];
        let b = gaussian_probe::<f64>(10, 3);
        let d = divergence_probe(|v: &[f64]| v.to_vec(), &x, 1e-3, &b).unwrap();
        let nb: f64 = b.iter().map(|v| v * v).sum();
        assert!((d - nb).abs() < 1e-9);
        assert_eq!(divergence_probe(|v: &[f64]| vec![1.0; v.len()], &x, 1e-3, &b).unwrap(), 0.0);
        assert!(matches!(divergence_probe(|v: &[f64]| v.to_vec(), &x, 0.0, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn divergence_of_diag_123() {
        let est = mc_divergence(|v: &[f64]| vec![v[0], 2.0 * v[1], 3.0 * v[2]], &[0.1, 0.2, 0.3], 1e-3, 10_000, 1).unwrap();
        assert!((est.mean - 6.0).abs() < 3.0 * est.std_err, "{est:?}");
    }

    #[test]
    fn chain_rule_scaling_on_linear_denoiser() {
        // g(u) = c·u  ⇒ div_{Aᴴy} g(Aᴴy/σ²) = n·c/σ²
        let n = 8;
        let aty: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let b = gaussian_probe::<f64>(n, 5);
        let nb: f64 = b.iter().map(|v| v * v).sum();
        for sigma_sq in [1.0, 0.25, 0.01] {
            let inv = 1.0 / sigma_sq;
            let d = divergence_probe(|v: &[f64]| v.iter().map(|x| 0.7 * x * inv).collect(), &aty, 1e-3, &b).unwrap();
            assert!((d - 0.7 * nb / sigma_sq).abs() < 1e-8 * nb / sigma_sq);
        }
    }

    fn complex_image(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn expected_difference_matches_supervised_for_linear_denoisers() {
        // fully sampled 4x4, 2 coils; two linear denoisers of u = Aᴴy/σ²
        let maps = make_sensitivities(2, 4, 4, 2).unwrap();
        let fm = ForwardModel::<f64>::new(&maps, SamplingMask::full(4), None).unwrap();
        let x = complex_image(16, 1);
        let clean = complex_to_planes(&x);
        let sigma_sq = 0.2;
        let m1 = |u: &[f64]| u.iter().map(|v| 0.8 * sigma_sq * v).collect::<Vec<_>>();
        let m2 = |u: &[f64]| {
            let n = u.len();
            (0..n).map(|i| sigma_sq * (0.5 * u[i] + 0.25 * u[(i + 1) % n] + 0.25 * u[(i + n - 1) % n])).collect::<Vec<_>>()
        };
        let y0 = fm.apply_a(&x).unwrap();
        let (mut dg, mut ds) = (Vec::new(), Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..4000u64 {
            let y: Vec<Complex64> = y0
                .iter()
                .map(|v| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    v + Complex64::new(re, im) * (sigma_sq / 2.0).sqrt()
                })
                .collect();
            let aty = complex_to_planes(&fm.apply_ah(&y).unwrap());
            let b = gaussian_probe::<f64>(aty.len(), 1000 + draw);
            let g1 = gsure_loss_fn(m1, &aty, &aty, sigma_sq, 1e-3, &b, DivergenceScaling::Unbiased).unwrap();
            let g2 = gsure_loss_fn(m2, &aty, &aty, sigma_sq, 1e-3, &b, DivergenceScaling::Unbiased).unwrap();
            let u: Vec<f64> = aty.iter().map(|v| v / sigma_sq).collect();
            let s1 = 2.0 * supervised_from_output(&m1(&u), &clean);
            let s2 = 2.0 * supervised_from_output(&m2(&u), &clean);
            dg.push(g1 - g2);
            ds.push(s1 - s2);
        }
        let diff: Vec<f64> = dg.iter().zip(&ds).map(|(a, b)| a - b).collect();
        let est = McEstimate::from_samples(&diff);
        assert!(est.mean.abs() < 3.0 * est.std_err, "{est:?}");
    }

    fn batches(n: usize, snr_sigma_sq: f64) -> (Vec<GsureBatch>, Vec<Vec<f32>>) {
        let maps = make_sensitivities(2, 8, 8, 1).unwrap();
        let fm = ForwardModel::<f32>::new(&maps, SamplingMask::full(8), Some(snr_sigma_sq)).unwrap();
        let mut out = Vec::new();
        let mut clean = Vec::new();
        for i in 0..n {
            let mut img = vec![Complex32::new(0.0, 0.0); 64];
            for yy in 2..6 {
                for xx in 1 + i % 3..6 {
                    img[yy * 8 + xx] = Complex32::new(0.8, 0.1);
                }
            }
            let k = CTensor::from_complex(vec![8, 8], &img).unwrap();
            let y = fm.forward_tensor(&k).unwrap();
            let y = crate::mri::add_noise(&y, &crate::tensor::CovarianceMatrix::identity(2).scaled(snr_sigma_sq), i as u64)
                .unwrap();
            out.push(GsureBatch::from_kspace(&format!("s{i}"), &fm, &y).unwrap());
            clean.push(complex_to_planes(&img));
        }
        (out, clean)
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let (b, _) = batches(1, 0.05);
        let ncfg = NetConfig { in_channels: 2, out_channels: 2, widths: vec![2, 2], kernel: 3, residual: true, seed: 3 };
        let net = Network::<f64>::build(&ncfg).unwrap();
        let probe = gaussian_probe::<f64>(128, 1);
        let (_, g) = gsure_loss_grad(&net, 0.05, &b[0], 0.1, &probe, DivergenceScaling::Unbiased).unwrap();
        let h = 1e-6;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in (0..net.param_count()).step_by(5) {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let lp = gsure_loss_grad(&p, 0.05, &b[0], 0.1, &probe, DivergenceScaling::Unbiased).unwrap().0;
            p.params_mut()[i] -= 2.0 * h;
            let lm = gsure_loss_grad(&p, 0.05, &b[0], 0.1, &probe, DivergenceScaling::Unbiased).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3 * gmax);
            assert!(rel < 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let (data, _) = batches(6, 0.05);
        let cfg = GsureConfig {
            net: NetConfig { in_channels: 2, out_channels: 2, widths: vec![4, 4], kernel: 3, residual: true, seed: 2 },
            iterations: 60,
            batch: 3,
            lr: 3e-3,
            ..GsureConfig::default()
        };
        let a = train_denoiser(&data, &cfg).unwrap();
        assert_eq!(a.trace.len(), 60);
        let (first, last) = trace_ends(&a.trace, 10);
        assert!(last < first, "{first} -> {last}");
        let b = train_denoiser(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train_denoiser(&[], &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_checkpoint_denoises_to_zero_and_needs_sigma() {
        let cfg = GsureConfig { net: NetConfig { widths: vec![2], ..GsureConfig::default().net }, ..GsureConfig::default() };
        let mut ck = DenoiserCheckpoint::init(&cfg, 0.05).unwrap();
        ck.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let maps = make_sensitivities(2, 8, 8, 1).unwrap();
        let fm = ForwardModel::<f32>::new(&maps, SamplingMask::full(8), Some(0.05)).unwrap();
        let y = fm.forward_tensor(&CTensor::new(vec![8, 8], vec![Complex32::new(1.0, 0.0); 64]).unwrap()).unwrap();
        let out = denoise(&ck, &y, &fm).unwrap();
        assert!(out.data().iter().all(|v| v.norm() < 1e-6));
        assert!(matches!(denoise(&ck, &y, &fm.with_noise(None)), Err(Error::Contract(_))));
        let back = DenoiserCheckpoint::from_checkpoint(&ck.to_checkpoint()).unwrap();
        assert_eq!(back.net, ck.net);
        assert_eq!(back.input_scale, 0.05);
    }
}
