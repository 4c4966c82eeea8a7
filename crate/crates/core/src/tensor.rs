//! Complex tensors, centered orthonormal 2-D FFTs, complex Cholesky and the
//! CXT on-disk tensor format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::{Complex, Complex32, Complex64};
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::real::Real;

pub const CXT_MAGIC: &[u8; 8] = b"CXTENS01";
pub const CXT_DTYPE_COMPLEX64: u8 = 1;

/// Row-major complex tensor with 32-bit components.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex32>,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![Complex32::new(0.0, 0.0); n] }
    }

    /// Builds from a higher-precision buffer, rounding to 32-bit components.
    pub fn from_complex<T: Real>(shape: Vec<usize>, data: &[Complex<T>]) -> Result<Self> {
        let data = data
            .iter()
            .map(|z| Complex32::new(z.re.as_f64() as f32, z.im.as_f64() as f32))
            .collect();
        Self::new(shape, data)
    }

    pub fn to_complex<T: Real>(&self) -> Vec<Complex<T>> {
        self.data
            .iter()
            .map(|z| Complex::new(T::from_f64_lossy(z.re as f64), T::from_f64_lossy(z.im as f64)))
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex32> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            s => Err(Error::Shape(format!("expected a rank-2 tensor, got shape {s:?}"))),
        }
    }
}

/// A 2-D FFT plan for one image size, reusable across calls.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<T>::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft(w, FftDirection::Forward),
            row_inv: planner.plan_fft(w, FftDirection::Inverse),
            col_fwd: planner.plan_fft(h, FftDirection::Forward),
            col_inv: planner.plan_fft(h, FftDirection::Inverse),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Centered orthonormal forward transform in place.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, false);
    }

    /// Centered orthonormal inverse transform in place.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, true);
    }

    fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len(), h * w, "fft buffer does not match plan size");
        // ifftshift: move index floor(n/2) to 0
        let mut work = shifted(buf, h, w, h / 2, w / 2);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(&mut work);
        let mut t = transpose(&work, h, w);
        col.process(&mut t);
        let work = transpose(&t, w, h);
        // fftshift: move index 0 to floor(n/2)
        let out = shifted(&work, h, w, h - h / 2, w - w / 2);
        let scale = T::one() / T::from_usize(h * w).unwrap().sqrt();
        for (dst, src) in buf.iter_mut().zip(out) {
            *dst = src * scale;
        }
    }
}

/// `out[i][j] = x[(i + dy) % h][(j + dx) % w]`.
fn shifted<T: Copy>(x: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = (i + dy) % h;
        let row = &x[si * w..(si + 1) * w];
        out.extend_from_slice(&row[dx % w..]);
        out.extend_from_slice(&row[..dx % w]);
    }
    out
}

fn transpose<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for j in 0..w {
        for i in 0..h {
            out.push(x[i * w + j]);
        }
    }
    out
}

/// Centered, orthonormal 2-D FFT of a rank-2 tensor.
pub fn fft2c(img: &CTensor) -> Result<CTensor> {
    let (h, w) = img.dims2()?;
    let mut buf = img.data.clone();
    Fft2::<f32>::new(h, w).forward(&mut buf);
    CTensor::new(vec![h, w], buf)
}

/// Inverse of [`fft2c`] (also its adjoint).
pub fn ifft2c(ksp: &CTensor) -> Result<CTensor> {
    let (h, w) = ksp.dims2()?;
    let mut buf = ksp.data.clone();
    Fft2::<f32>::new(h, w).inverse(&mut buf);
    CTensor::new(vec![h, w], buf)
}

/// Hermitian positive-definite coil covariance, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    dim: usize,
    entries: Vec<Complex64>,
}

impl CovarianceMatrix {
    pub fn new(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != dim * dim || dim == 0 {
            return Err(Error::Shape(format!(
                "covariance of dim {dim} needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        for i in 0..dim {
            for j in 0..=i {
                let a = entries[i * dim + j];
                let b = entries[j * dim + i].conj();
                if (a - b).norm() > 1e-9 * (1.0 + a.norm()) {
                    return Err(Error::Domain(format!("covariance not Hermitian at ({i},{j})")));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
        for (i, d) in diag.iter().enumerate() {
            entries[i * dim + i] = Complex64::new(*d, 0.0);
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { dim: self.dim, entries: self.entries.iter().map(|z| z * s).collect() }
    }
}

/// Lower-triangular factor `L` of `C = L Lᴴ`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<Complex64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.lower[i * self.dim + j]
    }

    /// `L v`.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        (0..n).map(|i| (0..=i).map(|j| self.lower[i * n + j] * v[j]).sum()).collect()
    }

    /// Solves `L v = b` by forward substitution.
    pub fn solve_lower(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.lower[i * n + j] * v[j];
            }
            v[i] = acc / self.lower[i * n + i];
        }
        v
    }

    /// Dense `L⁻¹`, row-major.
    pub fn inverse(&self) -> Vec<Complex64> {
        let n = self.dim;
        let mut inv = vec![Complex64::new(0.0, 0.0); n * n];
        for col in 0..n {
            let mut e = vec![Complex64::new(0.0, 0.0); n];
            e[col] = Complex64::new(1.0, 0.0);
            let v = self.solve_lower(&e);
            for row in 0..n {
                inv[row * n + col] = v[row];
            }
        }
        inv
    }
}

pub fn cholesky(c: &CovarianceMatrix) -> Result<CholeskyFactor> {
    let n = c.dim;
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut d = c.entry(j, j).re;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Factorization { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = Complex64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = c.entry(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(CholeskyFactor { dim: n, lower: l })
}

pub fn save_tensor(path: impl AsRef<Path>, t: &CTensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<CTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used as u64,
            msg: format!("{} trailing bytes after payload", bytes.len() - used),
        });
    }
    Ok(t)
}

/// Serializes one CXT record.
pub fn write_tensor<W: Write>(w: &mut W, t: &CTensor) -> std::io::Result<()> {
    w.write_all(CXT_MAGIC)?;
    w.write_all(&[CXT_DTYPE_COMPLEX64, t.shape.len() as u8])?;
    for d in &t.shape {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for z in &t.data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one CXT record starting at `start`; returns the tensor and the
/// offset one past its last byte.
pub fn decode_tensor(bytes: &[u8], start: usize) -> Result<(CTensor, usize)> {
    let fail = |offset: usize, msg: &str| Error::Format { offset: offset as u64, msg: msg.into() };
    let need = |pos: usize, n: usize| -> Result<()> {
        if bytes.len() < pos + n {
            Err(fail(bytes.len(), "truncated file"))
        } else {
            Ok(())
        }
    };
    let mut pos = start;
    need(pos, 10)?;
    if &bytes[pos..pos + 8] != CXT_MAGIC {
        return Err(fail(pos, "bad magic"));
    }
    pos += 8;
    if bytes[pos] != CXT_DTYPE_COMPLEX64 {
        return Err(fail(pos, &format!("unsupported dtype code {}", bytes[pos])));
    }
    let rank = bytes[pos + 1] as usize;
    pos += 2;
    need(pos, 8 * rank)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| fail(pos, "dimension overflow"))?);
        pos += 8;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| fail(pos, "dimension overflow"))?;
    let payload = count.checked_mul(8).ok_or_else(|| fail(pos, "dimension overflow"))?;
    need(pos, payload)?;
    let data = bytes[pos..pos + payload]
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect();
    let t = CTensor::new(shape, data).map_err(|e| fail(pos, &e.to_string()))?;
    Ok((t, pos + payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> CTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        CTensor::new(shape.to_vec(), data).unwrap()
    }

    fn rel_err(a: &CTensor, b: &CTensor) -> f64 {
        let d: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).norm_sqr() as f64)
            .sum::<f64>()
            .sqrt();
        d / b.norm().max(1e-30)
    }

    /// Direct O(N²) centered DFT with explicit index shifts, in f64.
    fn dft2c_oracle(x: &CTensor, inverse: bool) -> Vec<Complex64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let sign = if inverse { 1.0 } else { -1.0 };
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.data()[y * w + xx];
                        let ph = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((ky as f64 - ch) * (y as f64 - ch) / h as f64
                                + (kx as f64 - cw) * (xx as f64 - cw) / w as f64);
                        acc += Complex64::new(v.re as f64, v.im as f64) * Complex64::from_polar(1.0, ph);
                    }
                }
                out[ky * w + kx] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn fft_round_trip_16() {
        let x = random(&[16, 16], 1);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(rel_err(&back, &x) < 1e-6);
        let y = random(&[16, 16], 2);
        let back = fft2c(&ifft2c(&y).unwrap()).unwrap();
        assert!(rel_err(&back, &y) < 1e-6);
    }

    #[test]
    fn fft_parseval_8() {
        let x = random(&[8, 8], 3);
        let k = fft2c(&x).unwrap();
        assert!((k.norm() - x.norm()).abs() / x.norm() < 1e-6);
    }

    #[test]
    fn fft_ones_2x2_puts_dc_at_center() {
        let x = CTensor::new(vec![2, 2], vec![Complex32::new(1.0, 0.0); 4]).unwrap();
        let k = fft2c(&x).unwrap();
        let oracle = dft2c_oracle(&x, false);
        assert!((oracle[3] - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        for (i, z) in k.data().iter().enumerate() {
            let expect = if i == 3 { 2.0 } else { 0.0 };
            assert!((z.re - expect).abs() < 1e-6 && z.im.abs() < 1e-6, "index {i}: {z}");
        }
    }

    #[test]
    fn ifft_center_delta_is_constant() {
        let mut x = CTensor::zeros(&[4, 4]);
        x.data_mut()[2 * 4 + 2] = Complex32::new(1.0, 0.0);
        let img = ifft2c(&x).unwrap();
        for z in img.data() {
            assert!((z.re - 0.25).abs() < 1e-7 && z.im.abs() < 1e-7);
        }
        let oracle = dft2c_oracle(&x, true);
        assert!(oracle.iter().all(|z| (z - Complex64::new(0.25, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn fft_matches_direct_dft_on_odd_and_even_sizes() {
        for (h, w) in [(5, 7), (6, 4), (3, 3), (8, 5)] {
            let x = random(&[h, w], (h * 31 + w) as u64);
            let k = fft2c(&x).unwrap();
            let oracle = dft2c_oracle(&x, false);
            let err: f64 = k
                .data()
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (Complex64::new(a.re as f64, a.im as f64) - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(err / x.norm() < 1e-6, "{h}x{w}: {err}");
            let back = dft2c_oracle(&CTensor::from_complex(vec![h, w], &oracle).unwrap(), true);
            let x64: Vec<Complex64> = x.to_complex();
            let err: f64 = back.iter().zip(&x64).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            assert!(err / x.norm() < 1e-6);
        }
    }

    #[test]
    fn ifft_of_zeros_is_zero() {
        let z = ifft2c(&CTensor::zeros(&[6, 6])).unwrap();
        assert!(z.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn fft_rejects_non_rank2() {
        assert!(matches!(fft2c(&CTensor::zeros(&[2, 2, 2])), Err(Error::Shape(_))));
        assert!(matches!(ifft2c(&CTensor::zeros(&[4])), Err(Error::Shape(_))));
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let l = cholesky(&CovarianceMatrix::identity(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_eq!(l.entry(i, j), Complex64::new(e, 0.0));
            }
        }
        let l = cholesky(&CovarianceMatrix::diagonal(&[4.0, 1.0])).unwrap();
        assert_eq!(l.entry(0, 0).re, 2.0);
        assert_eq!(l.entry(1, 1).re, 1.0);
        assert_eq!(l.entry(1, 0).norm(), 0.0);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let c = CovarianceMatrix::diagonal(&[1.0, -2.0, 3.0]);
        match cholesky(&c) {
            Err(Error::Factorization { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn covariance_rejects_non_hermitian() {
        let e = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.5, 0.1),
            Complex64::new(0.5, 0.1),
            Complex64::new(1.0, 0.0),
        ];
        assert!(CovarianceMatrix::new(2, e).is_err());
    }

    #[test]
    fn cxt_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cxt");
        let t = random(&[3, 8, 8], 9);
        save_tensor(&p, &t).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"CXTENS01");
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 3);
        assert_eq!(bytes.len(), 10 + 3 * 8 + 3 * 64 * 8);
    }

    #[test]
    fn cxt_truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cxt");
        save_tensor(&p, &random(&[4, 4], 1)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        match load_tensor(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn new_rejects_bad_len_and_nan() {
        assert!(CTensor::new(vec![2, 2], vec![Complex32::new(0.0, 0.0); 3]).is_err());
        assert!(CTensor::new(vec![1], vec![Complex32::new(f32::NAN, 0.0)]).is_err());
    }
}
