//! Experiment configuration: a flat `key = value` file with `[sections]`.
//! Every key is optional; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use mrilab::diffusion::{DpsConfig, EdmConfig, SigmaLaw, Spacing};
use mrilab::gsure::{DivergenceScaling, GsureConfig};
use mrilab::modl::ModlConfig;
use mrilab::nnet::NetConfig;
use mrilab::Error;
use sha2::{Digest, Sha256};

/// Reconstruction method tags compared in the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    NaiveDps,
    GsureDps,
    NaiveModl,
    GsureModl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NaiveDps, Method::GsureDps, Method::NaiveModl, Method::GsureModl];

    pub fn is_dps(self) -> bool {
        matches!(self, Method::NaiveDps | Method::GsureDps)
    }

    pub fn is_gsure(self) -> bool {
        matches!(self, Method::GsureDps | Method::GsureModl)
    }

    /// `dps` or `modl`.
    pub fn family(self) -> &'static str {
        if self.is_dps() {
            "dps"
        } else {
            "modl"
        }
    }

    /// `naive` or `gsure`.
    pub fn training(self) -> &'static str {
        if self.is_gsure() {
            "gsure"
        } else {
            "naive"
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.training(), self.family())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected naive-dps, gsure-dps, naive-modl or gsure-modl)")))
    }
}

/// Training-target variant for the stage-2 models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Training {
    Naive,
    Gsure,
}

impl fmt::Display for Training {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Training::Naive => "naive",
            Training::Gsure => "gsure",
        })
    }
}

impl FromStr for Training {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "naive" => Ok(Training::Naive),
            "gsure" => Ok(Training::Gsure),
            _ => Err(Error::Config(format!("unknown training mode '{s}' (expected naive or gsure)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub acs: usize,
    /// SNR levels in dB; the first is generated, the rest are degradations.
    pub snr_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub dataset: DatasetParams,
    pub accel: Vec<usize>,
    pub methods: Vec<Method>,
    /// Training SNR levels for stage 2 (subset of the grid).
    pub train_snr: Vec<f64>,
    /// Evaluate every inference SNR for each training SNR, not only the
    /// matching one.
    pub cross_snr: bool,
    pub denoiser: GsureConfig,
    pub edm: EdmConfig,
    pub dps: DpsConfig,
    pub modl: ModlConfig,
    pub alpha: f64,
    /// Normalized `section.key -> value` pairs that define this config.
    entries: BTreeMap<String, String>,
}

const KEYS: &[&str] = &[
    "run.seed",
    "run.out_dir",
    "run.workers",
    "dataset.n_train",
    "dataset.n_val",
    "dataset.height",
    "dataset.width",
    "dataset.coils",
    "dataset.acs",
    "dataset.snr_grid",
    "sweep.accel",
    "sweep.methods",
    "sweep.train_snr",
    "sweep.infer",
    "denoiser.widths",
    "denoiser.kernel",
    "denoiser.iterations",
    "denoiser.batch",
    "denoiser.lr",
    "denoiser.epsilon",
    "denoiser.scaling",
    "denoiser.select_every",
    "edm.widths",
    "edm.kernel",
    "edm.iterations",
    "edm.batch",
    "edm.lr",
    "edm.sigma_min",
    "edm.sigma_max",
    "edm.sigma_data",
    "edm.law",
    "dps.steps",
    "dps.spacing",
    "dps.sigma_min",
    "dps.sigma_max",
    "dps.gamma",
    "dps.churn",
    "dps.samples",
    "modl.widths",
    "modl.kernel",
    "modl.unrolls",
    "modl.cg_iters",
    "modl.cg_tol",
    "modl.lambda_init",
    "modl.epochs",
    "modl.batch",
    "modl.lr",
    "eval.alpha",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, Error> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, Error> {
    let items: Vec<T> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: list must not be empty")));
    }
    Ok(items)
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_entries(BTreeMap::new()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn from_str_config(text: &str) -> Result<Self, Error> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut entries = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{}.{}", s.trim(), k.trim()),
                    None => k.trim().to_string(),
                };
                if !KEYS.contains(&key.as_str()) {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
                entries.insert(key, v.trim().to_string());
            }
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_config(&text)
    }

    /// Applies `section.key = value` overrides (command-line flags).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, Error> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let mut entries = self.entries.clone();
        entries.insert(key.to_string(), value.to_string());
        Self::from_entries(entries)
    }

    fn from_entries(mut e: BTreeMap<String, String>) -> Result<Self, Error> {
        let get = |e: &BTreeMap<String, String>, k: &str| e.get(k).cloned();
        let seed: u64 = get(&e, "run.seed").map(|v| parse("run.seed", &v)).transpose()?.unwrap_or(0);
        let out_dir = PathBuf::from(get(&e, "run.out_dir").unwrap_or_else(|| "runs/default".into()));
        let workers: usize = get(&e, "run.workers").map(|v| parse("run.workers", &v)).transpose()?.unwrap_or(0);
        macro_rules! val {
            ($k:expr, $d:expr) => {
                match get(&e, $k) {
                    Some(v) => parse($k, &v)?,
                    None => $d,
                }
            };
        }
        macro_rules! list {
            ($k:expr, $d:expr) => {
                match get(&e, $k) {
                    Some(v) => parse_list($k, &v)?,
                    None => $d,
                }
            };
        }
        let dataset = DatasetParams {
            n_train: val!("dataset.n_train", 200),
            n_val: val!("dataset.n_val", 50),
            height: val!("dataset.height", 32),
            width: val!("dataset.width", 32),
            coils: val!("dataset.coils", 4),
            acs: val!("dataset.acs", 8),
            snr_grid: list!("dataset.snr_grid", vec![32.0, 22.0, 12.0]),
        };
        let accel: Vec<usize> = list!("sweep.accel", vec![4, 8]);
        let methods: Vec<Method> = list!("sweep.methods", Method::ALL.to_vec());
        let train_snr: Vec<f64> = list!("sweep.train_snr", dataset.snr_grid.clone());
        let cross_snr = match get(&e, "sweep.infer").as_deref() {
            None | Some("cross") => true,
            Some("diagonal") => false,
            Some(v) => return Err(Error::Config(format!("sweep.infer: expected 'cross' or 'diagonal', got '{v}'"))),
        };
        let net = |prefix: &str, inp: usize, residual: bool, widths: Vec<usize>, kernel: usize, seed: u64| NetConfig {
            in_channels: inp,
            out_channels: 2,
            widths,
            kernel,
            residual,
            seed: seed.wrapping_add(crate::pipeline::seeds::NET).wrapping_add(match prefix {
                "denoiser" => 1,
                "edm" => 2,
                _ => 3,
            }),
        };
        let gd = GsureConfig::default();
        let denoiser = GsureConfig {
            net: net("denoiser", 2, true, list!("denoiser.widths", vec![16, 32]), val!("denoiser.kernel", 3), seed),
            iterations: val!("denoiser.iterations", gd.iterations),
            batch: val!("denoiser.batch", gd.batch),
            lr: val!("denoiser.lr", gd.lr),
            epsilon: val!("denoiser.epsilon", gd.epsilon),
            scaling: val!("denoiser.scaling", DivergenceScaling::Unbiased),
            select_every: val!("denoiser.select_every", gd.select_every),
            seed: seed.wrapping_add(crate::pipeline::seeds::DENOISER),
        };
        let ed = EdmConfig::default();
        let edm = EdmConfig {
            net: net("edm", 3, false, list!("edm.widths", vec![16, 32]), val!("edm.kernel", 3), seed),
            sigma_min: val!("edm.sigma_min", ed.sigma_min),
            sigma_max: val!("edm.sigma_max", ed.sigma_max),
            sigma_data: val!("edm.sigma_data", ed.sigma_data),
            law: val!("edm.law", SigmaLaw::LogUniform),
            iterations: val!("edm.iterations", ed.iterations),
            batch: val!("edm.batch", ed.batch),
            lr: val!("edm.lr", ed.lr),
            seed: seed.wrapping_add(crate::pipeline::seeds::EDM),
        };
        let dd = DpsConfig::default();
        let dps = DpsConfig {
            sigma_min: val!("dps.sigma_min", dd.sigma_min),
            sigma_max: val!("dps.sigma_max", dd.sigma_max),
            steps: val!("dps.steps", dd.steps),
            spacing: val!("dps.spacing", Spacing::Linear),
            gamma: val!("dps.gamma", dd.gamma),
            churn: val!("dps.churn", dd.churn),
            samples: val!("dps.samples", dd.samples),
        };
        let md = ModlConfig::default();
        let modl = ModlConfig {
            net: net("modl", 2, true, list!("modl.widths", vec![16, 32]), val!("modl.kernel", 3), seed),
            unrolls: val!("modl.unrolls", md.unrolls),
            cg_iters: val!("modl.cg_iters", md.cg_iters),
            cg_tol: val!("modl.cg_tol", md.cg_tol),
            lambda_init: val!("modl.lambda_init", md.lambda_init),
            epochs: val!("modl.epochs", md.epochs),
            batch: val!("modl.batch", md.batch),
            lr: val!("modl.lr", md.lr),
            seed: seed.wrapping_add(crate::pipeline::seeds::MODL),
        };
        let alpha: f64 = val!("eval.alpha", 0.05);

        // Normalize every value so the hash does not depend on spelling.
        e.clear();
        e.insert("run.seed".into(), seed.to_string());
        e.insert("dataset.n_train".into(), dataset.n_train.to_string());
        e.insert("dataset.n_val".into(), dataset.n_val.to_string());
        e.insert("dataset.height".into(), dataset.height.to_string());
        e.insert("dataset.width".into(), dataset.width.to_string());
        e.insert("dataset.coils".into(), dataset.coils.to_string());
        e.insert("dataset.acs".into(), dataset.acs.to_string());
        e.insert("dataset.snr_grid".into(), join(&dataset.snr_grid));
        e.insert("sweep.accel".into(), join(&accel));
        e.insert("sweep.methods".into(), join(&methods));
        e.insert("sweep.train_snr".into(), join(&train_snr));
        e.insert("sweep.infer".into(), if cross_snr { "cross" } else { "diagonal" }.into());
        e.insert("denoiser.widths".into(), join(&denoiser.net.widths));
        e.insert("denoiser.kernel".into(), denoiser.net.kernel.to_string());
        e.insert("denoiser.iterations".into(), denoiser.iterations.to_string());
        e.insert("denoiser.batch".into(), denoiser.batch.to_string());
        e.insert("denoiser.lr".into(), denoiser.lr.to_string());
        e.insert("denoiser.epsilon".into(), denoiser.epsilon.to_string());
        e.insert("denoiser.scaling".into(), denoiser.scaling.to_string());
        e.insert("denoiser.select_every".into(), denoiser.select_every.to_string());
        e.insert("edm.widths".into(), join(&edm.net.widths));
        e.insert("edm.kernel".into(), edm.net.kernel.to_string());
        e.insert("edm.iterations".into(), edm.iterations.to_string());
        e.insert("edm.batch".into(), edm.batch.to_string());
        e.insert("edm.lr".into(), edm.lr.to_string());
        e.insert("edm.sigma_min".into(), edm.sigma_min.to_string());
        e.insert("edm.sigma_max".into(), edm.sigma_max.to_string());
        e.insert("edm.sigma_data".into(), edm.sigma_data.to_string());
        e.insert("edm.law".into(), edm.law.to_string());
        e.insert("dps.steps".into(), dps.steps.to_string());
        e.insert("dps.spacing".into(), dps.spacing.to_string());
        e.insert("dps.sigma_min".into(), dps.sigma_min.to_string());
        e.insert("dps.sigma_max".into(), dps.sigma_max.to_string());
        e.insert("dps.gamma".into(), dps.gamma.to_string());
        e.insert("dps.churn".into(), dps.churn.to_string());
        e.insert("dps.samples".into(), dps.samples.to_string());
        e.insert("modl.widths".into(), join(&modl.net.widths));
        e.insert("modl.kernel".into(), modl.net.kernel.to_string());
        e.insert("modl.unrolls".into(), modl.unrolls.to_string());
        e.insert("modl.cg_iters".into(), modl.cg_iters.to_string());
        e.insert("modl.cg_tol".into(), modl.cg_tol.to_string());
        e.insert("modl.lambda_init".into(), modl.lambda_init.to_string());
        e.insert("modl.epochs".into(), modl.epochs.to_string());
        e.insert("modl.batch".into(), modl.batch.to_string());
        e.insert("modl.lr".into(), modl.lr.to_string());
        e.insert("eval.alpha".into(), alpha.to_string());
        // Where and how fast a run executes does not change its results.
        e.insert("run.out_dir".into(), out_dir.display().to_string());
        e.insert("run.workers".into(), workers.to_string());

        let cfg = Self {
            seed,
            out_dir,
            workers,
            dataset,
            accel,
            methods,
            train_snr,
            cross_snr,
            denoiser,
            edm,
            dps,
            modl,
            alpha,
            entries: e,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let g = &self.dataset.snr_grid;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset.snr_grid: values must be finite".into()));
        }
        if g.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Config(format!(
                "dataset.snr_grid must be strictly decreasing (each level degrades the first), got {}",
                join(g)
            )));
        }
        if let Some(t) = self.train_snr.iter().find(|t| !g.contains(t)) {
            return Err(Error::Config(format!("sweep.train_snr: {t} dB is not in the SNR grid")));
        }
        if self.accel.contains(&0) {
            return Err(Error::Config("sweep.accel: acceleration factors must be >= 1".into()));
        }
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            return Err(Error::Config("dataset needs at least one training and one validation sample".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("eval.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.denoiser.validate()?;
        self.edm.validate()?;
        self.dps.validate()?;
        self.modl.validate()?;
        Ok(())
    }

    /// Infers the SNR levels evaluated for one training SNR.
    pub fn infer_snr(&self, train: f64) -> Vec<f64> {
        if self.cross_snr {
            self.dataset.snr_grid.clone()
        } else {
            vec![train]
        }
    }

    /// Normalized `section.key = value` lines, sorted.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in &self.entries {
            let (sec, key) = k.split_once('.').unwrap_or(("", k));
            if sec != section {
                s.push_str(&format!("{}[{sec}]\n", if section.is_empty() { "" } else { "\n" }));
                section = sec;
            }
            s.push_str(&format!("{key} = {v}\n"));
        }
        s
    }

    /// SHA-256 over the sorted `key=value` pairs of the given sections
    /// (all result-affecting sections when empty). `run.out_dir` and
    /// `run.workers` never enter the hash.
    pub fn hash(&self, sections: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            if k == "run.out_dir" || k == "run.workers" {
                continue;
            }
            let sec = k.split_once('.').map(|p| p.0).unwrap_or("");
            if sections.is_empty() || sec == "run" || sections.contains(&sec) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
