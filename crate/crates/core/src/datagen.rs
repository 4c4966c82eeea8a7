//! Synthetic phantoms and on-disk multi-coil datasets.
//!
//! Each sample is a random ellipse phantom with a smooth phase, encoded with
//! simulated coil sensitivities, corrupted with coil noise, pre-whitened and
//! normalized by the ACS scale so that the stored noise variance per complex
//! k-space entry equals `10^(−SNR/10)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mri::{
    acs_scale_of, add_noise, make_sensitivities, prewhiten, ForwardModel, SampleSidecar, SamplingMask, SensitivityMaps,
};
use crate::par;
use crate::tensor::{cholesky, load_tensor, save_tensor, CTensor, CovarianceMatrix};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tkspace\tmaps\tclean\tsigma_sq\tsnr_db\tsplit";

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: CTensor,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
}

/// Largest phantom magnitude.
pub const PHANTOM_MAX: f64 = 1.5;

/// Random head-like phantom: one large outer ellipse plus 2 to 7 inner ones
/// with signed intensities, clamped to `[0, 1.5]`, times a low-order
/// polynomial phase. Coordinates are normalized to `[-1, 1]`; the outer
/// ellipse stays inside `|x|, |y| < 0.9`, leaving the corners signal-free.
pub fn gen_phantom(h: usize, w: usize, seed: u64) -> Result<Phantom> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("phantom needs H, W >= 16, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(3..=8usize);
    let mut ellipses = vec![Ellipse {
        center: (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)),
        axes: (rng.random_range(0.62..0.78), rng.random_range(0.72..0.84)),
        angle: rng.random_range(-0.2..0.2),
        intensity: rng.random_range(0.55..0.85),
    }];
    for _ in 1..count {
        let sign = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
        ellipses.push(Ellipse {
            center: (rng.random_range(-0.4..0.4), rng.random_range(-0.45..0.45)),
            axes: (rng.random_range(0.08..0.35), rng.random_range(0.08..0.35)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: sign * rng.random_range(0.15..0.5),
        });
    }
    let phase: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (i as f64 - (h / 2) as f64) / (h / 2) as f64;
        for j in 0..w {
            let x = (j as f64 - (w / 2) as f64) / (w / 2) as f64;
            let outer = ellipses[0].contains(x, y);
            let mut m = 0.0;
            if outer {
                for e in &ellipses {
                    if e.contains(x, y) {
                        m += e.intensity;
                    }
                }
            }
            let m = m.clamp(0.0, PHANTOM_MAX);
            let ph = phase[0] + phase[1] * x + phase[2] * y + phase[3] * x * y + phase[4] * (x * x - y * y);
            let z = Complex64::from_polar(m, ph);
            data.push(Complex32::new(z.re as f32, z.im as f32));
        }
    }
    Ok(Phantom { image: CTensor::new(vec![h, w], data)?, seed, ellipses })
}

/// Parameters for one dataset build.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub snr_db: f64,
    /// Side of the centered k-space block used for normalization.
    pub acs: usize,
    pub seed: u64,
    /// Raw coil noise covariance before whitening (identity when `None`).
    pub coil_cov: Option<CovarianceMatrix>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            height: 64,
            width: 64,
            coils: 4,
            snr_db: 32.0,
            acs: 24,
            seed: 0,
            coil_cov: None,
        }
    }
}

impl DatasetSpec {
    pub fn len(&self) -> usize {
        self.n_train + self.n_val
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        if self.acs == 0 || self.acs > self.height.min(self.width) {
            return Err(Error::Config(format!("ACS size {} does not fit the image", self.acs)));
        }
        if let Some(c) = &self.coil_cov {
            if c.dim() != self.coils {
                return Err(Error::Config("coil covariance size differs from the coil count".into()));
            }
        }
        Ok(())
    }
}

/// One line of the manifest; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub kspace: PathBuf,
    pub maps: PathBuf,
    pub clean: Option<PathBuf>,
    pub sigma_sq: f64,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

/// A sample held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Pre-whitened, normalized, fully sampled k-space `[nc, h, w]`.
    pub kspace: CTensor,
    pub maps: SensitivityMaps,
    /// Noise-free image on the same scale as `kspace`.
    pub clean: Option<CTensor>,
    pub sidecar: SampleSidecar,
    pub split: Split,
}

impl Sample {
    /// Fully sampled operator carrying this sample's noise variance.
    pub fn full_model(&self) -> Result<ForwardModel<f32>> {
        let (_, w) = self.maps.dims();
        ForwardModel::new(&self.maps, SamplingMask::full(w), Some(self.sidecar.sigma_sq))
    }
}

fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Generates sample `index` of `spec` without touching the disk.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let seed = sample_seed(spec.seed, index);
    let id = format!("s{index:05}");
    let wrap = |e: Error| Error::Dataset { id: id.clone(), msg: e.to_string() };
    let (h, w, nc) = (spec.height, spec.width, spec.coils);
    let phantom = gen_phantom(h, w, seed).map_err(wrap)?;
    let maps = make_sensitivities(nc, h, w, seed ^ 0x5EED_C011).map_err(wrap)?;
    let fm = ForwardModel::<f64>::new(&maps, SamplingMask::full(w), None).map_err(wrap)?;
    let k: Vec<Complex64> = fm.apply_a(&phantom.image.to_complex::<f64>()).map_err(wrap)?;
    let white = add_noise(&CTensor::zeros(&[nc, h, w]), &CovarianceMatrix::identity(nc), seed ^ 0x0015_E000)
        .map_err(wrap)?
        .to_complex::<f64>();
    let target = 10f64.powf(-spec.snr_db / 10.0).sqrt();
    let combine = |s: f64| -> Vec<Complex64> { k.iter().zip(&white).map(|(a, b)| a + b * s).collect() };
    let q_of = |s: f64| acs_scale_of(&combine(s), nc, h, w, spec.acs);
    // fixed point s = σ_target · q(k + s·w), so that the normalized noise
    // has exactly the target standard deviation
    let mut s = target * q_of(0.0).map_err(wrap)?;
    let mut converged = false;
    for _ in 0..500 {
        let next = target * q_of(s).map_err(wrap)?;
        if !next.is_finite() || next > 1e12 {
            break;
        }
        let done = (next - s).abs() <= 1e-12 * next;
        s = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(wrap(Error::Degenerate(format!("noise level for {} dB has no stable normalization", spec.snr_db))));
    }
    let q = q_of(s).map_err(wrap)?;
    let whitened = match &spec.coil_cov {
        None => CTensor::from_complex(vec![nc, h, w], &combine(s)).map_err(wrap)?,
        Some(cov) => {
            let l = cholesky(cov).map_err(wrap)?;
            let n = h * w;
            let mut raw = vec![Complex64::new(0.0, 0.0); nc * n];
            let mut v = vec![Complex64::new(0.0, 0.0); nc];
            for p in 0..n {
                for c in 0..nc {
                    v[c] = k[c * n + p] + white[c * n + p] * s;
                }
                let m = l.mul_vec(&v);
                for c in 0..nc {
                    raw[c * n + p] = m[c];
                }
            }
            prewhiten(&CTensor::from_complex(vec![nc, h, w], &raw).map_err(wrap)?, cov).map_err(wrap)?
        }
    };
    let scale_t = |t: &CTensor| -> CTensor {
        let mut o = t.clone();
        for v in o.data_mut() {
            *v = Complex32::new((v.re as f64 / q) as f32, (v.im as f64 / q) as f32);
        }
        o
    };
    let sigma_sq = (s / q).powi(2);
    Ok(Sample {
        id,
        kspace: scale_t(&whitened),
        maps,
        clean: Some(scale_t(&phantom.image)),
        sidecar: SampleSidecar { seed, accel: 1, acs: spec.acs, sigma_sq, snr_db: spec.snr_db, scale: q },
        split: if index < spec.n_train { Split::Train } else { Split::Val },
    })
}

fn write_sample(dir: &Path, s: &Sample) -> Result<SampleRecord> {
    let wrap = |e: Error| Error::Dataset { id: s.id.clone(), msg: e.to_string() };
    let rel = |suffix: &str| PathBuf::from(format!("{}.{suffix}", s.id));
    let (k, m, c, sc) = (rel("ksp.cxt"), rel("maps.cxt"), rel("clean.cxt"), rel("sidecar.txt"));
    save_tensor(dir.join(&k), &s.kspace).map_err(wrap)?;
    save_tensor(dir.join(&m), s.maps.tensor()).map_err(wrap)?;
    let clean = match &s.clean {
        Some(img) => {
            save_tensor(dir.join(&c), img).map_err(wrap)?;
            Some(c)
        }
        None => None,
    };
    std::fs::write(dir.join(&sc), s.sidecar.to_string()).map_err(|e| wrap(Error::io(dir.join(&sc), e)))?;
    Ok(SampleRecord {
        id: s.id.clone(),
        kspace: k,
        maps: m,
        clean,
        sigma_sq: s.sidecar.sigma_sq,
        snr_db: s.sidecar.snr_db,
        split: s.split,
    })
}

/// Generates every sample (in parallel, per-sample seed = base + index),
/// writes the payloads and the manifest into `dir`.
pub fn build_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = par::try_map_indexed(spec.len(), |i| generate_sample(spec, i))?;
    let records = samples.iter().map(|s| write_sample(dir, s)).collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { root: dir.to_path_buf(), records };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            let clean = r.clean.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:e}\t{}\t{}",
                r.id,
                r.kspace.display(),
                r.maps.display(),
                clean,
                r.sigma_sq,
                r.snr_db,
                r.split.as_str()
            );
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        let p = self.root.join(MANIFEST_FILE);
        std::fs::write(&p, self.to_tsv()).map_err(|e| Error::io(p, e))
    }

    /// Reads `manifest.tsv` from `dir` and checks that every referenced file
    /// exists and that ids are unique.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("");
        if header.trim_end() != MANIFEST_HEADER {
            return Err(Error::Format { offset: 0, msg: "manifest header mismatch".into() });
        }
        offset += header.len() as u64;
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for raw in lines {
            let line = raw.trim_end();
            if line.is_empty() {
                offset += raw.len() as u64;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::Format { offset, msg: msg.to_string() };
            if f.len() != 7 {
                return Err(bad("manifest record needs 7 fields"));
            }
            let split = match f[6] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(bad("unknown split tag")),
            };
            let rec = SampleRecord {
                id: f[0].to_string(),
                kspace: f[1].into(),
                maps: f[2].into(),
                clean: if f[3] == "-" { None } else { Some(f[3].into()) },
                sigma_sq: f[4].parse().map_err(|_| bad("bad sigma_sq"))?,
                snr_db: f[5].parse().map_err(|_| bad("bad snr_db"))?,
                split,
            };
            if !seen.insert(rec.id.clone()) {
                return Err(bad("duplicate sample id"));
            }
            for path in [Some(&rec.kspace), Some(&rec.maps), rec.clean.as_ref()].into_iter().flatten() {
                if !dir.join(path).is_file() {
                    return Err(Error::Dataset { id: rec.id.clone(), msg: format!("missing file {}", path.display()) });
                }
            }
            records.push(rec);
            offset += raw.len() as u64;
        }
        Ok(Self { root: dir.to_path_buf(), records })
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| Error::Contract(format!("sample index {index} out of range")))?;
        let wrap = |e: Error| Error::Dataset { id: r.id.clone(), msg: e.to_string() };
        let kspace = load_tensor(self.root.join(&r.kspace)).map_err(wrap)?;
        let maps = SensitivityMaps::from_tensor(load_tensor(self.root.join(&r.maps)).map_err(wrap)?).map_err(wrap)?;
        let clean = r.clean.as_ref().map(|p| load_tensor(self.root.join(p))).transpose().map_err(wrap)?;
        let sc_path = self.root.join(format!("{}.sidecar.txt", r.id));
        let sidecar: SampleSidecar = std::fs::read_to_string(&sc_path)
            .map_err(|e| wrap(Error::io(&sc_path, e)))?
            .parse()
            .map_err(wrap)?;
        Ok(Sample { id: r.id.clone(), kspace, maps, clean, sidecar, split: r.split })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        par::try_map_indexed(self.len(), |i| self.load_sample(i))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|i| self.records[*i].split == split).collect()
    }
}

/// Adds white complex noise of variance `σ²_target − σ²_source` to one
/// sample (valid because the stored data are pre-whitened).
pub fn degrade_sample(s: &Sample, target_snr_db: f64, seed: u64) -> Result<Sample> {
    if target_snr_db >= s.sidecar.snr_db {
        return Err(Error::Config(format!(
            "target SNR {target_snr_db} dB must be below the source SNR {} dB",
            s.sidecar.snr_db
        )));
    }
    let target = 10f64.powf(-target_snr_db / 10.0);
    let add = target - s.sidecar.sigma_sq;
    if !(add > 0.0) {
        return Err(Error::Config(format!("sample {} is already noisier than {target_snr_db} dB", s.id)));
    }
    let nc = s.kspace.shape()[0];
    let kspace = add_noise(&s.kspace, &CovarianceMatrix::identity(nc).scaled(add), seed)
        .map_err(|e| Error::Dataset { id: s.id.clone(), msg: e.to_string() })?;
    let sidecar = SampleSidecar { sigma_sq: target, snr_db: target_snr_db, ..s.sidecar.clone() };
    Ok(Sample { kspace, sidecar, ..s.clone() })
}

/// Degrades every sample of `manifest` and writes the result to `dir`;
/// per-sample seed = `seed` + index.
pub fn degrade_to_snr(
    manifest: &DatasetManifest,
    dir: impl AsRef<Path>,
    target_snr_db: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if let Some(r) = manifest.records.iter().find(|r| target_snr_db >= r.snr_db) {
        return Err(Error::Config(format!(
            "target SNR {target_snr_db} dB is not below the source SNR {} dB of {}",
            r.snr_db, r.id
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = par::try_map_indexed(manifest.len(), |i| {
        degrade_sample(&manifest.load_sample(i)?, target_snr_db, sample_seed(seed, i))
    })?;
    let records = samples.iter().map(|s| write_sample(dir, s)).collect::<Result<Vec<_>>>()?;
    let out = DatasetManifest { root: dir.to_path_buf(), records };
    out.save()?;
    Ok(out)
}
