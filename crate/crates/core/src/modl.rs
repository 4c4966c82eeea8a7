//! Unrolled model-based reconstruction: alternate a shared CNN denoiser
//! `z = D(x)` with the data-consistency solve
//! `x = (AᴴA + λI)⁻¹ (Aᴴy + λz)`, starting from `x = Aᴴy`.
//!
//! Training differentiates through every unroll by recording the CG
//! iterations on the tape. `λ = exp(log λ)` is learned with the network.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::{Complex, Complex32};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mri::{complex_to_planes, planes_to_complex, ForwardModel};
use crate::nnet::{
    AdamState, Checkpoint, NetConfig, Network, ParamBlock, ParamVars, SelfAdjoint, Shape, Tape, Var, SCALAR,
};
use crate::par;
use crate::real::Real;
use crate::tensor::CTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome<T> {
    pub x: Vec<T>,
    pub iters: usize,
    /// `||r|| / ||rhs||` at exit (0 for a zero right-hand side).
    pub rel_residual: f64,
    pub converged: bool,
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Conjugate gradient for a symmetric positive (semi)definite `op`, from
/// `x = 0`. Stops once `||r|| <= tol * ||rhs||` or after `iters` steps.
pub fn cg_solve<T, F>(op: F, rhs: &[T], iters: usize, tol: f64) -> Result<CgOutcome<T>>
where
    T: Real,
    F: Fn(&[T]) -> Vec<T>,
{
    let bn = dot64(rhs, rhs).sqrt();
    let mut x = vec![T::zero(); rhs.len()];
    if bn == 0.0 {
        return Ok(CgOutcome { x, iters: 0, rel_residual: 0.0, converged: true });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs = bn * bn;
    for it in 0..iters {
        let ap = op(&p);
        if ap.len() != rhs.len() {
            return Err(Error::Shape("CG operator changed the vector length".into()));
        }
        let alpha = rs / dot64(&p, &ap);
        if !alpha.is_finite() {
            return Err(Error::Numeric(format!("CG step size is {alpha} at iteration {it}")));
        }
        let a = T::from_f64_lossy(alpha);
        for i in 0..x.len() {
            x[i] = x[i] + a * p[i];
            r[i] = r[i] - a * ap[i];
        }
        let rs_new = dot64(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::Numeric(format!("non-finite CG residual at iteration {it}")));
        }
        let rel = rs_new.sqrt() / bn;
        if rel <= tol {
            return Ok(CgOutcome { x, iters: it + 1, rel_residual: rel, converged: true });
        }
        let beta = T::from_f64_lossy(rs_new / rs);
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Ok(CgOutcome { x, iters, rel_residual: rs.sqrt() / bn, converged: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModlConfig {
    pub net: NetConfig,
    pub unrolls: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub lambda_init: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ModlConfig {
    fn default() -> Self {
        Self {
            net: NetConfig { in_channels: 2, out_channels: 2, widths: vec![16, 32], kernel: 3, residual: true, seed: 0 },
            unrolls: 6,
            cg_iters: 8,
            cg_tol: 1e-6,
            lambda_init: 0.05,
            epochs: 10,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ModlConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.in_channels != 2 || self.net.out_channels != 2 {
            return Err(Error::Config("the unrolled denoiser maps 2 planes to 2 planes".into()));
        }
        if self.unrolls < 1 {
            return Err(Error::Config("unroll count must be at least 1".into()));
        }
        if self.cg_iters < 1 {
            return Err(Error::Config("CG iteration count must be at least 1".into()));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda_init)));
        }
        if self.batch < 1 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModlCheckpoint {
    pub net: Network<f32>,
    pub log_lambda: f64,
    pub cfg: ModlConfig,
    /// Per-step training NRMSE.
    pub trace: Vec<f64>,
}

impl ModlCheckpoint {
    pub fn init(cfg: &ModlConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net: Network::build(&cfg.net)?, log_lambda: cfg.lambda_init.ln(), cfg: cfg.clone(), trace: Vec::new() })
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("modl", self.trace.len() as u64, self.net.clone())
            .with_meta("log_lambda", format!("{:e}", self.log_lambda))
            .with_meta("unrolls", self.cfg.unrolls)
            .with_meta("cg_iters", self.cfg.cg_iters)
            .with_meta("cg_tol", format!("{:e}", self.cfg.cg_tol))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "modl" {
            return Err(Error::Contract(format!("expected a modl checkpoint, got '{}'", ck.kind)));
        }
        let cfg = ModlConfig {
            net: ck.net.config().clone(),
            unrolls: ck.meta_f64("unrolls")? as usize,
            cg_iters: ck.meta_f64("cg_iters")? as usize,
            cg_tol: ck.meta_f64("cg_tol")?,
            ..ModlConfig::default()
        };
        Ok(Self { net: ck.net.clone(), log_lambda: ck.meta_f64("log_lambda")?, cfg, trace: Vec::new() })
    }
}

/// Records CG for `(N + λI) x = rhs` on the tape, from `x = 0`.
pub fn record_cg<T: Real>(
    tape: &mut Tape<T>,
    normal: &Arc<dyn SelfAdjoint<T>>,
    lam: Var,
    rhs: Var,
    iters: usize,
    tol: f64,
) -> Result<Var> {
    let bn = dot64(tape.value(rhs), tape.value(rhs)).sqrt();
    if bn == 0.0 {
        return Ok(rhs);
    }
    let mut x: Option<Var> = None;
    let (mut r, mut p) = (rhs, rhs);
    let mut rs = tape.dot(r, r)?;
    for it in 0..iters {
        let np = tape.linear(p, normal.clone())?;
        let mp = tape.axpy(np, lam, p)?;
        let pmp = tape.dot(p, mp)?;
        let alpha = tape.div(rs, pmp)?;
        if !tape.scalar(alpha).is_finite() {
            return Err(Error::Numeric(format!("CG step size is not finite at iteration {it}")));
        }
        x = Some(match x {
            None => tape.scale_by(p, alpha)?,
            Some(x) => tape.axpy(x, alpha, p)?,
        });
        r = tape.axmy(r, alpha, mp)?;
        let rs_new = tape.dot(r, r)?;
        if !tape.scalar(rs_new).is_finite() {
            return Err(Error::Numeric(format!("non-finite CG residual at iteration {it}")));
        }
        if tape.scalar(rs_new).as_f64().sqrt() <= tol * bn || it + 1 == iters {
            break;
        }
        let beta = tape.div(rs_new, rs)?;
        p = tape.axpy(r, beta, p)?;
        rs = rs_new;
    }
    Ok(x.expect("at least one CG iteration"))
}

/// Handles of one recorded unrolled forward pass.
pub struct ModlGraph {
    pub output: Var,
    pub params: ParamVars,
    pub log_lambda: Var,
}

/// Records the unrolled reconstruction of k-space `y` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn record_modl<T: Real>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    log_lambda: T,
    fm: &ForwardModel<T>,
    y: &[Complex<T>],
    unrolls: usize,
    cg_iters: usize,
    tol: f64,
) -> Result<ModlGraph> {
    let (h, w) = fm.dims();
    let shape: Shape = [2, h, w];
    let params = net.param_leaves(tape);
    let ll = tape.scalar_leaf(log_lambda);
    let lam = tape.exp(ll)?;
    let aty = tape.leaf(complex_to_planes(&fm.apply_ah(y)?), shape)?;
    let fm = Arc::new(fm.clone());
    let normal: Arc<dyn SelfAdjoint<T>> = Arc::new(move |v: &[T], _s: Shape| fm.normal_planes(v));
    let mut x = aty;
    for u in 0..unrolls {
        let z = net.record(tape, &params, x)?;
        let rhs = tape.axpy(aty, lam, z)?;
        x = record_cg(tape, &normal, lam, rhs, cg_iters, tol).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("unroll {u}: {m}")),
            other => other,
        })?;
    }
    Ok(ModlGraph { output: x, params, log_lambda: ll })
}

/// Unrolled reconstruction of one k-space set in working precision `T`.
pub fn modl_forward_with<T: Real>(
    net: &Network<T>,
    log_lambda: f64,
    fm: &ForwardModel<T>,
    y: &[Complex<T>],
    unrolls: usize,
    cg_iters: usize,
    tol: f64,
) -> Result<Vec<Complex<T>>> {
    let mut tape = Tape::new();
    let g = record_modl(&mut tape, net, T::from_f64_lossy(log_lambda), fm, y, unrolls, cg_iters, tol)?;
    Ok(planes_to_complex(tape.value(g.output)))
}

pub fn modl_forward(ckpt: &ModlCheckpoint, y: &CTensor, fm: &ForwardModel<f32>) -> Result<CTensor> {
    let (h, w) = fm.dims();
    let out = modl_forward_with(
        &ckpt.net,
        ckpt.log_lambda,
        fm,
        y.data(),
        ckpt.cfg.unrolls,
        ckpt.cfg.cg_iters,
        ckpt.cfg.cg_tol,
    )?;
    CTensor::from_complex(vec![h, w], &out)
}

/// `||target − x|| / ||target||`.
pub fn nrmse_loss<T: Real>(x: &[T], target: &[T]) -> Result<f64> {
    if x.len() != target.len() {
        return Err(Error::Shape(format!("output has {} values, target {}", x.len(), target.len())));
    }
    let tn = dot64(target, target).sqrt();
    if tn == 0.0 {
        return Err(Error::Degenerate("target has zero norm".into()));
    }
    let e: f64 = x.iter().zip(target).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(e.sqrt() / tn)
}

pub fn modl_loss(ckpt: &ModlCheckpoint, y: &CTensor, fm: &ForwardModel<f32>, target: &CTensor) -> Result<f64> {
    let out = modl_forward(ckpt, y, fm)?;
    if out.shape() != target.shape() {
        return Err(Error::Shape(format!("target {:?} vs output {:?}", target.shape(), out.shape())));
    }
    nrmse_loss(&complex_to_planes(out.data()), &complex_to_planes(target.data()))
}

/// NRMSE and its gradient with respect to `[network params..., log λ]`.
pub fn modl_loss_grad<T: Real>(
    net: &Network<T>,
    log_lambda: f64,
    fm: &ForwardModel<T>,
    y: &[Complex<T>],
    target: &[T],
    cfg: &ModlConfig,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let g = record_modl(
        &mut tape,
        net,
        T::from_f64_lossy(log_lambda),
        fm,
        y,
        cfg.unrolls,
        cfg.cg_iters,
        cfg.cg_tol,
    )?;
    let x = tape.value(g.output);
    let loss = nrmse_loss(x, target)?;
    let tn = dot64(target, target).sqrt();
    let dn = loss * tn;
    let seed: Vec<T> = if dn > 0.0 {
        let f = T::from_f64_lossy(1.0 / (dn * tn));
        x.iter().zip(target).map(|(&a, &b)| (a - b) * f).collect()
    } else {
        vec![T::zero(); x.len()]
    };
    let grads = tape.backward(g.output, &seed)?;
    let mut flat = net.collect_grads(&grads, &g.params);
    flat.push(grads.get(g.log_lambda).map(|v| v[0]).unwrap_or_else(T::zero));
    Ok((loss, flat))
}

/// Which image the unrolled network is trained to reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Noise-free phantom (oracle).
    Clean,
    /// Stage-1 denoised coil-combined image.
    GsureDenoised,
    /// Coil-combined adjoint of the noisy fully sampled data.
    NoisyNative,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Clean => "clean",
            TargetMode::GsureDenoised => "gsure-denoised",
            TargetMode::NoisyNative => "noisy-native",
        })
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(TargetMode::Clean),
            "gsure-denoised" | "gsure" => Ok(TargetMode::GsureDenoised),
            "noisy-native" | "naive" => Ok(TargetMode::NoisyNative),
            _ => Err(Error::Config(format!("unknown target mode '{s}'"))),
        }
    }
}

/// One training pair: undersampled k-space, its operator, and the target.
#[derive(Clone, Debug)]
pub struct ModlExample {
    pub fm: ForwardModel<f32>,
    pub y: Vec<Complex32>,
    pub target: Vec<Complex32>,
}

/// Per-epoch mean training NRMSE, as written to the loss CSV.
pub fn epoch_means(trace: &[f64], steps_per_epoch: usize) -> Vec<f64> {
    trace
        .chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn trace_csv(trace: &[f64], steps_per_epoch: usize) -> String {
    let mut s = String::from("epoch,mean_nrmse\n");
    for (e, m) in epoch_means(trace, steps_per_epoch).iter().enumerate() {
        s.push_str(&format!("{},{:.8e}\n", e + 1, m));
    }
    s
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Trains the shared denoiser and `log λ` end to end with Adam on the NRMSE
/// objective. Per-sample gradients within a minibatch are computed in
/// parallel and summed in sample order.
pub fn train_modl(data: &[ModlExample], cfg: &ModlConfig) -> Result<ModlCheckpoint> {
    if data.is_empty() {
        return Err(Error::Contract("MoDL training needs at least one example".into()));
    }
    let mut ck = ModlCheckpoint::init(cfg)?;
    let np = ck.net.param_count();
    let mut blocks = ck.net.blocks().to_vec();
    blocks.push(ParamBlock { name: "log_lambda".into(), offset: np, shape: SCALAR });
    let mut adam = AdamState::<f32>::new(np + 1, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let targets: Vec<Vec<f32>> = data.iter().map(|d| complex_to_planes(&d.target)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut flat = ck.net.params().to_vec();
    flat.push(ck.log_lambda as f32);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let net = &ck.net;
            let ll = ck.log_lambda;
            let results = par::try_map_indexed(batch.len(), |i| {
                let d = &data[batch[i]];
                modl_loss_grad(net, ll, &d.fm, &d.y, &targets[batch[i]], cfg)
            })?;
            let mut grad = vec![0f32; np + 1];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut flat, &grad, &blocks)?;
            ck.net.params_mut().copy_from_slice(&flat[..np]);
            ck.log_lambda = flat[np] as f64;
            ck.trace.push(loss / batch.len() as f64);
        }
    }
    Ok(ck)
}

/// Parallel per-sample reconstruction with a read-only checkpoint.
pub fn modl_reconstruct_all(ckpt: &ModlCheckpoint, inputs: &[(ForwardModel<f32>, CTensor)]) -> Result<Vec<CTensor>> {
    par::try_map_indexed(inputs.len(), |i| modl_forward(ckpt, &inputs[i].1, &inputs[i].0))
}
