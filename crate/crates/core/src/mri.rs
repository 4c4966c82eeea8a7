//! Multi-coil Cartesian MRI measurement model.
//!
//! Sensitivities are root-sum-of-squares normalized at every pixel, so for a
//! fully sampled mask `AᴴA = I` and the pseudo-inverse reduces to the
//! adjoint. Complex Gaussian noise follows the "total variance per complex
//! entry" convention: variance `σ²` means `σ²/2` per real component.

use std::fmt;
use std::str::FromStr;

use num_complex::{Complex, Complex32, Complex64};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::modl::cg_solve;
use crate::real::Real;
use crate::tensor::{cholesky, CTensor, CovarianceMatrix, Fft2};

/// Per-coil complex sensitivity profiles, `[nc, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    maps: CTensor,
}

impl SensitivityMaps {
    pub fn from_tensor(maps: CTensor) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[0] == 0 {
            return Err(Error::Shape(format!("sensitivities must be [nc,h,w], got {:?}", maps.shape())));
        }
        Ok(Self { maps })
    }

    pub fn tensor(&self) -> &CTensor {
        &self.maps
    }

    pub fn coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

/// Smooth Gaussian-bump coil profiles placed around the field of view, each
/// with its own constant phase and gentle phase ramp, RSS-normalized.
pub fn make_sensitivities(nc: usize, h: usize, w: usize, seed: u64) -> Result<SensitivityMaps> {
    if nc < 1 {
        return Err(Error::Config("coil count must be at least 1".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let scale = h.max(w) as f64;
    let mut raw = vec![Complex64::new(0.0, 0.0); nc * h * w];
    for c in 0..nc {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / nc as f64 + rng.random_range(-0.2..0.2);
        let radius = 0.55 * scale;
        let (py, px) = (cy + radius * angle.sin(), cx + radius * angle.cos());
        let width = scale * rng.random_range(0.45..0.6);
        let phase0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (ky, kx) = (rng.random_range(-1.0..1.0) / scale, rng.random_range(-1.0..1.0) / scale);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - py, x as f64 - px);
                let mag = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                let ph = phase0 + std::f64::consts::PI * (ky * (y as f64 - cy) + kx * (x as f64 - cx));
                raw[c * h * w + y * w + x] = Complex64::from_polar(mag, ph);
            }
        }
    }
    for p in 0..h * w {
        let rss: f64 = (0..nc).map(|c| raw[c * h * w + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..nc {
            raw[c * h * w + p] /= rss;
        }
    }
    Ok(SensitivityMaps { maps: CTensor::from_complex(vec![nc, h, w], &raw)? })
}

/// Column (phase-encode) undersampling pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    columns: Vec<bool>,
    acs_width: usize,
    accel: usize,
}

impl SamplingMask {
    pub fn full(w: usize) -> Self {
        Self { columns: vec![true; w], acs_width: w, accel: 1 }
    }

    pub fn from_columns(columns: Vec<bool>, acs_width: usize, accel: usize) -> Self {
        Self { columns, acs_width, accel }
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn acs_width(&self) -> usize {
        self.acs_width
    }

    pub fn acceleration(&self) -> usize {
        self.accel
    }

    pub fn sampled(&self) -> usize {
        self.columns.iter().filter(|c| **c).count()
    }

    pub fn is_full(&self) -> bool {
        self.columns.iter().all(|c| *c)
    }

    /// Indices of the centered calibration columns.
    pub fn acs_range(w: usize, acs: usize) -> std::ops::Range<usize> {
        let start = (w / 2).saturating_sub(acs / 2);
        start..(start + acs).min(w)
    }
}

/// Random phase-encode mask: the centered ACS block plus a uniform draw
/// without replacement from the remaining columns, `ceil(w/r)` in total.
pub fn make_mask(w: usize, r: usize, acs_width: usize, seed: u64) -> Result<SamplingMask> {
    if w == 0 || r == 0 {
        return Err(Error::Config(format!("mask needs w > 0 and R > 0, got w={w}, R={r}")));
    }
    let budget = w.div_ceil(r);
    if acs_width > budget {
        return Err(Error::Config(format!(
            "ACS width {acs_width} exceeds the sampling budget ceil({w}/{r}) = {budget}"
        )));
    }
    let mut columns = vec![false; w];
    for c in SamplingMask::acs_range(w, acs_width) {
        columns[c] = true;
    }
    let rest: Vec<usize> = (0..w).filter(|c| !columns[*c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, rest.len(), budget - acs_width) {
        columns[rest[i]] = true;
    }
    Ok(SamplingMask { columns, acs_width, accel: r })
}

/// `A = P F S` and its adjoint, for one image size and coil set.
#[derive(Clone, Debug)]
pub struct ForwardModel<T: Real> {
    nc: usize,
    h: usize,
    w: usize,
    maps: Vec<Complex<T>>,
    mask: SamplingMask,
    noise_sigma_sq: Option<f64>,
    fft: Fft2<T>,
}

impl<T: Real> ForwardModel<T> {
    pub fn new(maps: &SensitivityMaps, mask: SamplingMask, noise_sigma_sq: Option<f64>) -> Result<Self> {
        let (h, w) = maps.dims();
        if mask.width() != w {
            return Err(Error::Shape(format!("mask width {} does not match image width {w}", mask.width())));
        }
        if let Some(s) = noise_sigma_sq {
            if !(s > 0.0) {
                return Err(Error::Domain(format!("noise variance must be positive, got {s}")));
            }
        }
        Ok(Self {
            nc: maps.coils(),
            h,
            w,
            maps: maps.tensor().to_complex(),
            mask,
            noise_sigma_sq,
            fft: Fft2::new(h, w),
        })
    }

    pub fn coils(&self) -> usize {
        self.nc
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn noise_sigma_sq(&self) -> Option<f64> {
        self.noise_sigma_sq
    }

    pub fn with_mask(&self, mask: SamplingMask) -> Result<Self> {
        if mask.width() != self.w {
            return Err(Error::Shape("mask width mismatch".into()));
        }
        Ok(Self { mask, ..self.clone() })
    }

    pub fn with_noise(&self, sigma_sq: Option<f64>) -> Self {
        Self { noise_sigma_sq: sigma_sq, ..self.clone() }
    }

    fn check_image(&self, len: usize) -> Result<()> {
        if len != self.h * self.w {
            return Err(Error::Shape(format!("image has {len} values, model expects {}x{}", self.h, self.w)));
        }
        Ok(())
    }

    fn check_kspace(&self, len: usize) -> Result<()> {
        if len != self.nc * self.h * self.w {
            return Err(Error::Shape(format!(
                "k-space has {len} values, model expects {}x{}x{}",
                self.nc, self.h, self.w
            )));
        }
        Ok(())
    }

    fn apply_mask(&self, k: &mut [Complex<T>]) {
        for row in k.chunks_exact_mut(self.w) {
            for (v, keep) in row.iter_mut().zip(&self.mask.columns) {
                if !keep {
                    *v = Complex::new(T::zero(), T::zero());
                }
            }
        }
    }

    /// Per coil: `mask ⊙ fft2c(s_c ⊙ x)`.
    pub fn apply_a(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        self.check_image(x.len())?;
        let n = self.h * self.w;
        let mut out = Vec::with_capacity(self.nc * n);
        for c in 0..self.nc {
            let s = &self.maps[c * n..(c + 1) * n];
            let mut coil: Vec<Complex<T>> = s.iter().zip(x).map(|(a, b)| a * b).collect();
            self.fft.forward(&mut coil);
            self.apply_mask(&mut coil);
            out.extend(coil);
        }
        Ok(out)
    }

    /// `Σ_c conj(s_c) ⊙ ifft2c(mask ⊙ y_c)`.
    pub fn apply_ah(&self, y: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        self.check_kspace(y.len())?;
        let n = self.h * self.w;
        let mut out = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..self.nc {
            let mut coil = y[c * n..(c + 1) * n].to_vec();
            self.apply_mask(&mut coil);
            self.fft.inverse(&mut coil);
            let s = &self.maps[c * n..(c + 1) * n];
            for ((o, a), b) in out.iter_mut().zip(s).zip(&coil) {
                *o = *o + a.conj() * b;
            }
        }
        Ok(out)
    }

    /// `AᴴA x`.
    pub fn normal(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        self.apply_ah(&self.apply_a(x)?)
    }

    /// `AᴴA` acting on the two-plane real layout `[re; im]`.
    pub fn normal_planes(&self, x: &[T]) -> Vec<T> {
        let z = planes_to_complex(x);
        complex_to_planes(&self.normal(&z).expect("plane buffer sized to the model"))
    }

    /// Least-squares solution of `(AᴴA) x = Aᴴy` by conjugate gradient.
    /// Fully sampled models return `Aᴴy` directly.
    pub fn apply_pinv(&self, y: &[Complex<T>], cg_iters: usize, tol: f64) -> Result<Vec<Complex<T>>> {
        let aty = self.apply_ah(y)?;
        if self.mask.is_full() {
            return Ok(aty);
        }
        let rhs = complex_to_planes(&aty);
        let out = cg_solve(|v: &[T]| self.normal_planes(v), &rhs, cg_iters, tol)?;
        if !out.converged {
            return Err(Error::NoConvergence { residual: out.rel_residual, iters: out.iters });
        }
        Ok(planes_to_complex(&out.x))
    }

    /// [`apply_a`](Self::apply_a) on tensors: `[h,w]` image to `[nc,h,w]` k-space.
    pub fn forward_tensor(&self, x: &CTensor) -> Result<CTensor> {
        if x.shape() != [self.h, self.w] {
            return Err(Error::Shape(format!("expected image [{},{}], got {:?}", self.h, self.w, x.shape())));
        }
        CTensor::from_complex(vec![self.nc, self.h, self.w], &self.apply_a(&x.to_complex::<T>())?)
    }

    pub fn adjoint_tensor(&self, y: &CTensor) -> Result<CTensor> {
        if y.shape() != [self.nc, self.h, self.w] {
            return Err(Error::Shape(format!(
                "expected k-space [{},{},{}], got {:?}",
                self.nc,
                self.h,
                self.w,
                y.shape()
            )));
        }
        CTensor::from_complex(vec![self.h, self.w], &self.apply_ah(&y.to_complex::<T>())?)
    }

    pub fn pinv_tensor(&self, y: &CTensor, cg_iters: usize, tol: f64) -> Result<CTensor> {
        self.check_kspace(y.len())?;
        CTensor::from_complex(vec![self.h, self.w], &self.apply_pinv(&y.to_complex::<T>(), cg_iters, tol)?)
    }

    /// Zeroes the unsampled columns of a full k-space set.
    pub fn undersample(&self, y: &CTensor) -> Result<CTensor> {
        self.check_kspace(y.len())?;
        let mut out = y.clone();
        for row in out.data_mut().chunks_exact_mut(self.w) {
            for (v, keep) in row.iter_mut().zip(&self.mask.columns) {
                if !keep {
                    *v = Complex32::new(0.0, 0.0);
                }
            }
        }
        Ok(out)
    }
}

/// `[re..., im...]` layout used by the networks.
pub fn complex_to_planes<T: Real>(z: &[Complex<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend(z.iter().map(|v| v.re));
    out.extend(z.iter().map(|v| v.im));
    out
}

pub fn planes_to_complex<T: Real>(p: &[T]) -> Vec<Complex<T>> {
    let n = p.len() / 2;
    (0..n).map(|i| Complex::new(p[i], p[n + i])).collect()
}

/// Noise bookkeeping for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub covariance: CovarianceMatrix,
    pub sigma_sq: f64,
    pub snr_db: f64,
}

impl NoiseSpec {
    pub fn from_snr(covariance: CovarianceMatrix, snr: f64) -> Self {
        Self { covariance, sigma_sq: 10f64.powf(-snr / 10.0), snr_db: snr }
    }
}

/// Adds `η = L w` at every k-space location, `w` i.i.d. complex standard
/// normal and `L` the Cholesky factor of `cov`.
pub fn add_noise(y: &CTensor, cov: &CovarianceMatrix, seed: u64) -> Result<CTensor> {
    let nc = check_coils(y, cov)?;
    let l = cholesky(cov)?;
    let n = y.len() / nc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5f64.sqrt();
    let mut out = y.clone();
    let mut w = vec![Complex64::new(0.0, 0.0); nc];
    for p in 0..n {
        for wc in w.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *wc = Complex64::new(re * half, im * half);
        }
        let eta = l.mul_vec(&w);
        for c in 0..nc {
            let v = &mut out.data_mut()[c * n + p];
            *v = Complex32::new((v.re as f64 + eta[c].re) as f32, (v.im as f64 + eta[c].im) as f32);
        }
    }
    Ok(out)
}

/// Applies `L⁻¹` across coils at every k-space location.
pub fn prewhiten(y: &CTensor, cov: &CovarianceMatrix) -> Result<CTensor> {
    let nc = check_coils(y, cov)?;
    let l = cholesky(cov).map_err(|e| Error::Numeric(format!("pre-whitening failed: {e}")))?;
    let inv = l.inverse();
    let n = y.len() / nc;
    let mut out = y.clone();
    let src = y.data();
    for p in 0..n {
        for c in 0..nc {
            let mut acc = Complex64::new(0.0, 0.0);
            for d in 0..=c {
                let v = src[d * n + p];
                acc += inv[c * nc + d] * Complex64::new(v.re as f64, v.im as f64);
            }
            out.data_mut()[c * n + p] = Complex32::new(acc.re as f32, acc.im as f32);
        }
    }
    Ok(out)
}

fn check_coils(y: &CTensor, cov: &CovarianceMatrix) -> Result<usize> {
    if y.rank() != 3 {
        return Err(Error::Shape(format!("k-space must be [nc,h,w], got {:?}", y.shape())));
    }
    let nc = y.shape()[0];
    if cov.dim() != nc {
        return Err(Error::Shape(format!("covariance dim {} does not match {nc} coils", cov.dim())));
    }
    Ok(nc)
}

/// Linear-interpolated percentile (`p` in 0..=100) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return 0.0;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 99th percentile of the root-sum-of-squares image reconstructed from the
/// centered `acs_size x acs_size` block of k-space.
pub fn acs_scale(y: &CTensor, acs_size: usize) -> Result<f64> {
    if y.rank() != 3 {
        return Err(Error::Shape(format!("k-space must be [nc,h,w], got {:?}", y.shape())));
    }
    acs_scale_of(&y.to_complex::<f64>(), y.shape()[0], y.shape()[1], y.shape()[2], acs_size)
}

/// [`acs_scale`] on double-precision `[nc, h, w]` data.
pub fn acs_scale_of(y: &[Complex64], nc: usize, h: usize, w: usize, acs_size: usize) -> Result<f64> {
    if y.len() != nc * h * w {
        return Err(Error::Shape(format!("k-space has {} values, expected {nc}x{h}x{w}", y.len())));
    }
    if acs_size == 0 || acs_size > h.min(w) {
        return Err(Error::Config(format!("ACS size {acs_size} must be in 1..={}", h.min(w))));
    }
    let rows = SamplingMask::acs_range(h, acs_size);
    let cols = SamplingMask::acs_range(w, acs_size);
    let fft = Fft2::<f64>::new(h, w);
    let mut rss = vec![0.0f64; h * w];
    for c in 0..nc {
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for r in rows.clone() {
            for col in cols.clone() {
                buf[r * w + col] = y[c * h * w + r * w + col];
            }
        }
        fft.inverse(&mut buf);
        for (acc, v) in rss.iter_mut().zip(&buf) {
            *acc += v.norm_sqr();
        }
    }
    let mags: Vec<f64> = rss.iter().map(|v| v.sqrt()).collect();
    Ok(percentile(&mags, 99.0))
}

/// Divides k-space by the ACS scale; returns the normalized data and scale.
pub fn normalize_kspace(y: &CTensor, acs_size: usize) -> Result<(CTensor, f64)> {
    let q = acs_scale(y, acs_size)?;
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Degenerate(format!("ACS 99th percentile is {q}")));
    }
    let mut out = y.clone();
    for v in out.data_mut() {
        *v = Complex32::new((v.re as f64 / q) as f32, (v.im as f64 / q) as f32);
    }
    Ok((out, q))
}

pub fn snr_db(sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {sigma_sq}")));
    }
    Ok(10.0 * (1.0 / sigma_sq).log10())
}

/// Noise standard deviation (per complex entry) for a target SNR.
pub fn sigma_for_snr(db: f64) -> f64 {
    10f64.powf(-db / 20.0)
}

/// Per-sample acquisition record stored next to the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSidecar {
    pub seed: u64,
    pub accel: usize,
    pub acs: usize,
    pub sigma_sq: f64,
    pub snr_db: f64,
    pub scale: f64,
}

impl fmt::Display for SampleSidecar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "R={}", self.accel)?;
        writeln!(f, "acs={}", self.acs)?;
        writeln!(f, "sigma_sq={:e}", self.sigma_sq)?;
        writeln!(f, "snr_db={}", self.snr_db)?;
        writeln!(f, "scale={:e}", self.scale)
    }
}

impl FromStr for SampleSidecar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format { offset: 0, msg: format!("bad sidecar line '{line}'") })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<V: FromStr>(m: &std::collections::HashMap<String, String>, k: &str) -> Result<V> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format { offset: 0, msg: format!("sidecar missing or bad '{k}'") })
        }
        Ok(Self {
            seed: get(&map, "seed")?,
            accel: get(&map, "R")?,
            acs: get(&map, "acs")?,
            sigma_sq: get(&map, "sigma_sq")?,
            snr_db: get(&map, "snr_db")?,
            scale: get(&map, "scale")?,
        })
    }
}
