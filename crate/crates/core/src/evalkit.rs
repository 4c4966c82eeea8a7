//! Masked image-quality metrics and paired significance testing.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mri::percentile;
use crate::tensor::CTensor;

/// Binary region of interest, row-major `h x w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnatomyMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl AnatomyMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }
}

fn image_dims(t: &CTensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("expected a 2-D image, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `|ref| > 0.1 × p99(|ref|)`, then a 3x3 majority vote (over the in-bounds
/// neighbours, the pixel itself included).
pub fn anatomy_mask(reference: &CTensor) -> Result<AnatomyMask> {
    let (h, w) = image_dims(reference)?;
    let mags: Vec<f64> = reference.data().iter().map(|v| v.norm() as f64).collect();
    if mags.iter().all(|m| *m == 0.0) {
        return Err(Error::Degenerate("reference image is all zero".into()));
    }
    let t = 0.1 * percentile(&mags, 99.0);
    let raw: Vec<bool> = mags.iter().map(|m| *m > t).collect();
    let mut bits = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut on, mut total) = (0, 0);
            for di in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                for dj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                    total += 1;
                    on += usize::from(raw[di * w + dj]);
                }
            }
            bits[i * w + j] = 2 * on > total;
        }
    }
    Ok(AnatomyMask { height: h, width: w, bits })
}

fn check_pair(reference: &CTensor, est: &CTensor, mask: &AnatomyMask) -> Result<()> {
    let (h, w) = image_dims(reference)?;
    if est.shape() != reference.shape() || mask.height != h || mask.width != w {
        return Err(Error::Shape(format!(
            "reference {:?}, estimate {:?} and mask {}x{} must agree",
            reference.shape(),
            est.shape(),
            mask.height,
            mask.width
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Degenerate("anatomy mask is empty".into()));
    }
    Ok(())
}

/// `||mask⊙(ref − est)|| / ||mask⊙ref||` on complex values.
pub fn nrmse(reference: &CTensor, est: &CTensor, mask: &AnatomyMask) -> Result<f64> {
    check_pair(reference, est, mask)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((r, e), m) in reference.data().iter().zip(est.data()).zip(&mask.bits) {
        if *m {
            let (rr, ri) = (r.re as f64, r.im as f64);
            num += (rr - e.re as f64).powi(2) + (ri - e.im as f64).powi(2);
            den += rr * rr + ri * ri;
        }
    }
    if den == 0.0 {
        return Err(Error::Degenerate("masked reference has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Reported when the estimate matches the reference exactly.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `20 log10(max|ref| / RMSE)` on magnitudes over the mask, capped at 99 dB.
pub fn psnr(reference: &CTensor, est: &CTensor, mask: &AnatomyMask) -> Result<f64> {
    check_pair(reference, est, mask)?;
    let (mut peak, mut se, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((r, e), m) in reference.data().iter().zip(est.data()).zip(&mask.bits) {
        if *m {
            let (a, b) = (r.norm() as f64, e.norm() as f64);
            peak = peak.max(a);
            se += (a - b).powi(2);
            n += 1;
        }
    }
    if peak == 0.0 {
        return Err(Error::Degenerate("masked reference has zero norm".into()));
    }
    let rmse = (se / n as f64).sqrt();
    if rmse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / rmse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // symmetric reflection without repeating the edge: -1 -> 1, n -> n-2
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

/// Mean local SSIM over the mask. Magnitudes are divided by the masked
/// reference maximum (dynamic range 1); local statistics use a 7x7 uniform
/// window with reflected borders and population (co)variances.
pub fn ssim(reference: &CTensor, est: &CTensor, mask: &AnatomyMask) -> Result<f64> {
    check_pair(reference, est, mask)?;
    let (h, w) = (mask.height, mask.width);
    let peak = reference
        .data()
        .iter()
        .zip(&mask.bits)
        .filter(|(_, m)| **m)
        .map(|(r, _)| r.norm() as f64)
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Degenerate("masked reference has zero norm".into()));
    }
    let x: Vec<f64> = reference.data().iter().map(|v| v.norm() as f64 / peak).collect();
    let y: Vec<f64> = est.data().iter().map(|v| v.norm() as f64 / peak).collect();
    Ok(ssim_magnitudes(&x, &y, h, w, &mask.bits))
}

/// SSIM core on magnitude images with dynamic range 1.
pub fn ssim_magnitudes(x: &[f64], y: &[f64], h: usize, w: usize, mask: &[bool]) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let r = (SSIM_WINDOW / 2) as isize;
    let npx = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -r..=r {
                let ii = reflect(i as isize + di, h);
                for dj in -r..=r {
                    let jj = reflect(j as isize + dj, w);
                    let (a, b) = (x[ii * w + jj], y[ii * w + jj]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / npx, sy / npx);
            let vx = sxx / npx - mx * mx;
            let vy = syy / npx - my * my;
            let cxy = sxy / npx - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

/// Outcome of a paired two-sided signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample size evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks (1-based) of `v`, ties sharing the mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired Wilcoxon signed-rank test of `a − b`. Zero differences are
/// dropped; at least 5 must remain. Exact null distribution for `n <= 25`
/// (by dynamic programming over doubled ranks, so tied half-ranks stay
/// integral), normal approximation with tie correction above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Statistics(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Statistics("non-finite paired difference".into()));
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::Statistics(format!("only {n} non-zero paired differences; need at least 5")));
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    // an empty f64 sum is -0.0; anchor at +0.0 so the statistic prints as 0
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).fold(0.0, |a, r| a + r);
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        // counts[s] = number of sign assignments with doubled W+ == s
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult { n, statistic, p_value: p, exact: true });
    }
    let nf = n as f64;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w_plus - nf * (nf + 1.0) / 4.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Statistics(e.to_string()))?;
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok(WilcoxonResult { n, statistic, p_value: p, exact: false })
}

/// Flags `p < α/m` for a family of `m` tests.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if p_values.is_empty() {
        return Err(Error::Contract("Bonferroni correction needs at least one p-value".into()));
    }
    let thr = alpha / p_values.len() as f64;
    Ok(p_values.iter().map(|p| *p < thr).collect())
}

/// One evaluated reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub id: String,
    pub method: String,
    pub train_snr_db: f64,
    pub infer_snr_db: f64,
    pub accel: usize,
    pub seed: u64,
    pub nrmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

pub const METRICS_HEADER: &str = "id,method,train_snr_db,infer_snr_db,R,seed,nrmse,ssim,psnr";

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.nrmse >= 0.0) || !self.nrmse.is_finite() {
            return Err(Error::Numeric(format!("{}: NRMSE {} is invalid", self.id, self.nrmse)));
        }
        if !(-1.0..=1.0).contains(&self.ssim) || !self.psnr.is_finite() {
            return Err(Error::Numeric(format!("{}: SSIM {} / PSNR {} out of range", self.id, self.ssim, self.psnr)));
        }
        Ok(())
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.id,
            self.method,
            self.train_snr_db,
            self.infer_snr_db,
            self.accel,
            self.seed,
            self.nrmse,
            self.ssim,
            self.psnr
        )
    }
}

impl FromStr for MetricsRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.trim_end().split(',').collect();
        let bad = |what: &str| Error::Format { offset: 0, msg: format!("metrics row: bad {what} in '{s}'") };
        if f.len() != 9 {
            return Err(bad("field count"));
        }
        Ok(Self {
            id: f[0].to_string(),
            method: f[1].to_string(),
            train_snr_db: f[2].parse().map_err(|_| bad("train_snr_db"))?,
            infer_snr_db: f[3].parse().map_err(|_| bad("infer_snr_db"))?,
            accel: f[4].parse().map_err(|_| bad("R"))?,
            seed: f[5].parse().map_err(|_| bad("seed"))?,
            nrmse: f[6].parse().map_err(|_| bad("nrmse"))?,
            ssim: f[7].parse().map_err(|_| bad("ssim"))?,
            psnr: f[8].parse().map_err(|_| bad("psnr"))?,
        })
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(METRICS_HEADER) {
        return Err(Error::Format { offset: 0, msg: "metrics CSV header mismatch".into() });
    }
    lines.filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

/// One paired comparison in the statistics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsRecord {
    pub comparison: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub const STATS_HEADER: &str = "comparison,n,statistic,p,significant";

pub fn stats_csv(records: &[StatsRecord]) -> String {
    let mut s = String::from(STATS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{},{},{},{}\n", r.comparison, r.n, r.statistic, r.p_value, r.significant));
    }
    s
}

/// All three metrics for one reconstruction against its reference.
pub fn evaluate(reference: &CTensor, est: &CTensor, mask: &AnatomyMask) -> Result<(f64, f64, f64)> {
    Ok((nrmse(reference, est, mask)?, ssim(reference, est, mask)?, psnr(reference, est, mask)?))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
