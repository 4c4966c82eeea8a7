//! The experiment sweep: dataset builds, stage-1 denoisers, stage-2 models,
//! reconstructions and evaluation. Every unit of work is keyed by a config
//! hash; a unit whose stamp matches is reused instead of recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mrilab::datagen::{build_dataset, degrade_to_snr, DatasetManifest, DatasetSpec, Sample, Split};
use mrilab::diffusion::{dps_posterior, posterior_average, train_edm, EdmCheckpoint};
use mrilab::evalkit::{
    anatomy_mask, bonferroni, evaluate as image_metrics, mean, metrics_csv, nrmse, psnr, stats_csv, wilcoxon_signed_rank,
    AnatomyMask, MetricsRecord, StatsRecord,
};
use mrilab::gsure::{adjoint_image, denoise, train_denoiser as fit_denoiser, GsureBatch};
use mrilab::modl::{modl_forward, steps_per_epoch, train_modl, ModlCheckpoint, ModlExample};
use mrilab::mri::make_mask;
use mrilab::nnet::{load_checkpoint, save_checkpoint};
use mrilab::tensor::{load_tensor, save_tensor, CTensor};
use mrilab::{par, Error};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method, Training};
use crate::error::{CliError, Context};
use crate::ledger::{unix_now, LedgerEntry, RunLedger};

/// Stable seed offsets added to the base seed.
pub mod seeds {
    pub const DATA: u64 = 0;
    /// Plus `DEGRADE × level` for the `level`-th degraded SNR.
    pub const DEGRADE: u64 = 10_000;
    pub const NET: u64 = 90_000;
    pub const DENOISER: u64 = 100_000;
    pub const EDM: u64 = 200_000;
    pub const MODL: u64 = 300_000;
    pub const TRAIN_MASK: u64 = 400_000;
    pub const VAL_MASK: u64 = 500_000;
    pub const DPS: u64 = 600_000;
    /// Stride between per-sample posterior seed blocks.
    pub const DPS_STRIDE: u64 = 64;
    /// Stride between acceleration factors in mask seeds.
    pub const ACCEL_STRIDE: u64 = 100_000;
}

pub fn snr_tag(snr: f64) -> String {
    format!("{snr}")
}

/// Directory layout under the run's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_root(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn data_dir(&self, snr: f64) -> PathBuf {
        self.data_root().join(format!("snr{}", snr_tag(snr)))
    }

    pub fn model_dir(&self, snr: f64) -> PathBuf {
        self.root.join("models").join(format!("snr{}", snr_tag(snr)))
    }

    pub fn denoiser_ckpt(&self, snr: f64) -> PathBuf {
        self.model_dir(snr).join("denoiser.ckpt")
    }

    pub fn denoised_dir(&self, snr: f64) -> PathBuf {
        self.root.join("denoised").join(format!("snr{}", snr_tag(snr)))
    }

    pub fn edm_ckpt(&self, snr: f64, training: Training) -> PathBuf {
        self.model_dir(snr).join(format!("edm-{training}.ckpt"))
    }

    pub fn modl_ckpt(&self, snr: f64, training: Training, accel: usize) -> PathBuf {
        self.model_dir(snr).join(format!("modl-{training}-R{accel}.ckpt"))
    }

    pub fn recon_dir(&self, method: Method, train: f64, infer: f64, accel: usize) -> PathBuf {
        self.root
            .join("recon")
            .join(method.to_string())
            .join(format!("t{}_i{}_R{accel}", snr_tag(train), snr_tag(infer)))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.tsv")
    }
}

/// Outcome of one command.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub notices: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub ran: usize,
    pub reused: usize,
}

impl Report {
    fn merge(&mut self, other: Report) {
        self.notices.extend(other.notices);
        self.artifacts.extend(other.artifacts);
        self.ran += other.ran;
        self.reused += other.reused;
    }
}

fn unit_hash(cfg: &ExperimentConfig, sections: &[&str], key: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.hash(sections).as_bytes());
    h.update(b"|");
    h.update(key.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn stamp_path(artifact: &Path) -> PathBuf {
    let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!(".{name}.stamp"))
}

/// True when `artifact` exists and was produced under `hash`.
fn is_fresh(artifact: &Path, hash: &str) -> bool {
    artifact.exists() && std::fs::read_to_string(stamp_path(artifact)).map(|s| s.trim() == hash).unwrap_or(false)
}

fn write_stamp(artifact: &Path, hash: &str) -> Result<(), CliError> {
    let p = stamp_path(artifact);
    std::fs::write(&p, format!("{hash}\n")).map_err(|e| Error::io(&p, e)).ctx("writing stamp")
}

/// Either reuses `artifact` or announces that it will be (re)built.
fn check_unit(report: &mut Report, label: &str, artifact: &Path, hash: &str) -> bool {
    if is_fresh(artifact, hash) {
        report.notices.push(format!("{label}: config unchanged (hash {}), reusing {}", &hash[..12], artifact.display()));
        report.reused += 1;
        report.artifacts.push(artifact.to_path_buf());
        return true;
    }
    if artifact.exists() {
        report.notices.push(format!("{label}: config changed, rebuilding {}", artifact.display()));
    }
    false
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)).ctx("creating directory")?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e)).ctx("writing output")
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e)).ctx("creating directory")
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency { artifact: path.to_path_buf(), hint: hint.to_string() })
    }
}

/// Loads the manifest for one SNR level, or names the missing artifact.
pub fn require_manifest(layout: &Layout, snr: f64) -> Result<DatasetManifest, CliError> {
    let dir = layout.data_dir(snr);
    require(&dir.join("manifest.tsv"), "run `gen-data` first")?;
    DatasetManifest::load(&dir).ctx(format!("loading dataset {}", dir.display()))
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>, CliError> {
    let idx = manifest.indices(split);
    par::try_map_indexed(idx.len(), |k| manifest.load_sample(idx[k])).ctx("loading samples")
}

fn record(ledger: &RunLedger, command: &str, cfg: &ExperimentConfig, started: u64, report: &Report) -> Result<(), CliError> {
    ledger
        .append(&LedgerEntry {
            command: command.to_string(),
            config_hash: cfg.hash(&[]),
            seed: cfg.seed,
            started,
            finished: unix_now(),
            status: if report.ran > 0 { "ran" } else { "reused" }.into(),
            artifacts: report.artifacts.clone(),
        })
        .ctx("appending to the run ledger")
}

/// Builds the dataset at the first grid SNR and degrades it to every other
/// level.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let started = unix_now();
    let layout = Layout::new(&cfg.out_dir);
    let ledger = RunLedger::open(layout.ledger()).ctx("opening the run ledger")?;
    let mut report = Report::default();
    let grid = &cfg.dataset.snr_grid;
    let hash = unit_hash(cfg, &["dataset"], "gen-data");
    let manifests: Vec<PathBuf> = grid.iter().map(|s| layout.data_dir(*s).join("manifest.tsv")).collect();
    let all_fresh = manifests.iter().all(|m| is_fresh(m, &hash));
    if all_fresh {
        report.notices.push(format!("gen-data: config unchanged (hash {}), skipping", &hash[..12]));
        report.reused += 1;
        report.artifacts = manifests;
    } else {
        let d = &cfg.dataset;
        let spec = DatasetSpec {
            n_train: d.n_train,
            n_val: d.n_val,
            height: d.height,
            width: d.width,
            coils: d.coils,
            snr_db: grid[0],
            acs: d.acs,
            seed: cfg.seed.wrapping_add(seeds::DATA),
            coil_cov: None,
        };
        let base = build_dataset(layout.data_dir(grid[0]), &spec).ctx("gen-data")?;
        for (j, snr) in grid.iter().enumerate().skip(1) {
            degrade_to_snr(&base, layout.data_dir(*snr), *snr, cfg.seed.wrapping_add(seeds::DEGRADE * j as u64))
                .ctx(format!("gen-data: degrading to {snr} dB"))?;
        }
        for m in &manifests {
            write_stamp(m, &hash)?;
        }
        report.ran += 1;
        report.artifacts = manifests;
        report.notices.push(format!("gen-data: wrote {} SNR levels under {}", grid.len(), layout.data_root().display()));
    }
    record(&ledger, "gen-data", cfg, started, &report)?;
    Ok(report)
}

/// Stage-2 inputs the training command operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Denoiser,
    Edm(Training),
    Modl(Training),
}

pub fn cmd_train(cfg: &ExperimentConfig, stage: Stage) -> Result<Report, CliError> {
    let started = unix_now();
    let layout = Layout::new(&cfg.out_dir);
    let ledger = RunLedger::open(layout.ledger()).ctx("opening the run ledger")?;
    let mut report = Report::default();
    let command = match stage {
        Stage::Denoiser => "train denoiser".to_string(),
        Stage::Edm(t) => format!("train edm {t}"),
        Stage::Modl(t) => format!("train modl {t}"),
    };
    match stage {
        Stage::Denoiser => {
            for snr in &cfg.dataset.snr_grid {
                report.merge(train_denoiser_at(cfg, &layout, *snr)?);
            }
        }
        Stage::Edm(t) => {
            for snr in &cfg.train_snr {
                report.merge(train_edm_at(cfg, &layout, *snr, t)?);
            }
        }
        Stage::Modl(t) => {
            for snr in &cfg.train_snr {
                for r in &cfg.accel {
                    report.merge(train_modl_at(cfg, &layout, *snr, t, *r)?);
                }
            }
        }
    }
    record(&ledger, &command, cfg, started, &report)?;
    Ok(report)
}

fn denoiser_hash(cfg: &ExperimentConfig, snr: f64) -> String {
    unit_hash(cfg, &["dataset", "denoiser"], &format!("denoiser:{snr}"))
}

fn train_denoiser_at(cfg: &ExperimentConfig, layout: &Layout, snr: f64) -> Result<Report, CliError> {
    let mut report = Report::default();
    let ckpt_path = layout.denoiser_ckpt(snr);
    let hash = denoiser_hash(cfg, snr);
    let label = format!("train denoiser @ {snr} dB");
    let done_marker = layout.denoised_dir(snr).join("index.txt");
    if check_unit(&mut report, &label, &ckpt_path, &hash) && is_fresh(&done_marker, &hash) {
        return Ok(report);
    }
    let manifest = require_manifest(layout, snr)?;
    let train = load_split(&manifest, Split::Train)?;
    let batches = par::try_map_indexed(train.len(), |i| {
        let s = &train[i];
        GsureBatch::from_kspace(&s.id, &s.full_model()?, &s.kspace)
    })
    .ctx(&label)?;
    let ck = fit_denoiser(&batches, &cfg.denoiser).ctx(&label)?;
    mkdir(&layout.model_dir(snr))?;
    save_checkpoint(&ckpt_path, &ck.to_checkpoint()).ctx(&label)?;
    let trace = layout.model_dir(snr).join("denoiser_trace.csv");
    write_text(&trace, &mrilab::gsure::trace_csv(&ck.trace))?;
    write_stamp(&ckpt_path, &hash)?;

    // Denoised images for every sample feed the GSURE-trained stage-2 models.
    let out_dir = layout.denoised_dir(snr);
    mkdir(&out_dir)?;
    let ids = par::try_map_indexed(manifest.len(), |i| {
        let s = manifest.load_sample(i)?;
        let img = denoise(&ck, &s.kspace, &s.full_model()?)?;
        save_tensor(out_dir.join(format!("{}.cxt", s.id)), &img)?;
        Ok::<_, Error>(s.id)
    })
    .ctx(&label)?;
    write_text(&done_marker, &(ids.join("\n") + "\n"))?;
    write_stamp(&done_marker, &hash)?;
    report.ran += 1;
    report.artifacts.extend([ckpt_path, trace, done_marker]);
    report.notices.push(format!(
        "{label}: {} iterations, final loss {:.4e}, kept iterate {}",
        ck.trace.len(),
        ck.trace.last().copied().unwrap_or(f64::NAN),
        ck.selected_iter
    ));
    Ok(report)
}

/// Training images for one stage-2 variant: `Aᴴy` of the noisy fully
/// sampled data, or the stage-1 denoiser output.
fn training_targets(layout: &Layout, snr: f64, training: Training, samples: &[Sample]) -> Result<Vec<CTensor>, CliError> {
    match training {
        Training::Naive => par::try_map_indexed(samples.len(), |i| adjoint_image(&samples[i].kspace, &samples[i].full_model()?))
            .ctx("forming adjoint images"),
        Training::Gsure => {
            let dir = layout.denoised_dir(snr);
            require(&layout.denoiser_ckpt(snr), "run `train --stage denoiser` first")?;
            require(&dir.join("index.txt"), "run `train --stage denoiser` first")?;
            samples
                .iter()
                .map(|s| {
                    let p = dir.join(format!("{}.cxt", s.id));
                    require(&p, "run `train --stage denoiser` first")?;
                    load_tensor(&p).ctx("loading denoised image")
                })
                .collect()
        }
    }
}

fn stage2_sections(training: Training, model: &'static str) -> Vec<&'static str> {
    let mut s = vec!["dataset", model];
    if training == Training::Gsure {
        s.push("denoiser");
    }
    s
}

fn edm_hash(cfg: &ExperimentConfig, snr: f64, t: Training) -> String {
    unit_hash(cfg, &stage2_sections(t, "edm"), &format!("edm:{snr}:{t}"))
}

fn modl_hash(cfg: &ExperimentConfig, snr: f64, t: Training, r: usize) -> String {
    unit_hash(cfg, &stage2_sections(t, "modl"), &format!("modl:{snr}:{t}:{r}"))
}

fn train_edm_at(cfg: &ExperimentConfig, layout: &Layout, snr: f64, t: Training) -> Result<Report, CliError> {
    let mut report = Report::default();
    let path = layout.edm_ckpt(snr, t);
    let hash = edm_hash(cfg, snr, t);
    let label = format!("train edm {t} @ {snr} dB");
    if check_unit(&mut report, &label, &path, &hash) {
        return Ok(report);
    }
    let manifest = require_manifest(layout, snr)?;
    let train = load_split(&manifest, Split::Train)?;
    let images = training_targets(layout, snr, t, &train)?;
    let ck = train_edm(&images, &cfg.edm).ctx(&label)?;
    mkdir(&layout.model_dir(snr))?;
    save_checkpoint(&path, &ck.to_checkpoint()).ctx(&label)?;
    let trace = layout.model_dir(snr).join(format!("edm-{t}_trace.csv"));
    write_text(&trace, &mrilab::diffusion::trace_csv(&ck.trace))?;
    write_stamp(&path, &hash)?;
    report.ran += 1;
    report.artifacts.extend([path, trace]);
    report.notices.push(format!("{label}: {} iterations", ck.trace.len()));
    Ok(report)
}

fn train_mask_seed(cfg: &ExperimentConfig, accel: usize, index: usize) -> u64 {
    cfg.seed.wrapping_add(seeds::TRAIN_MASK + seeds::ACCEL_STRIDE * accel as u64 + index as u64)
}

fn val_mask_seed(cfg: &ExperimentConfig, accel: usize, index: usize) -> u64 {
    cfg.seed.wrapping_add(seeds::VAL_MASK + seeds::ACCEL_STRIDE * accel as u64 + index as u64)
}

fn dps_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    cfg.seed.wrapping_add(seeds::DPS + seeds::DPS_STRIDE * index as u64)
}

fn train_modl_at(cfg: &ExperimentConfig, layout: &Layout, snr: f64, t: Training, accel: usize) -> Result<Report, CliError> {
    let mut report = Report::default();
    let path = layout.modl_ckpt(snr, t, accel);
    let hash = modl_hash(cfg, snr, t, accel);
    let label = format!("train modl {t} R={accel} @ {snr} dB");
    if check_unit(&mut report, &label, &path, &hash) {
        return Ok(report);
    }
    let manifest = require_manifest(layout, snr)?;
    let train = load_split(&manifest, Split::Train)?;
    let targets = training_targets(layout, snr, t, &train)?;
    let d = &cfg.dataset;
    let examples = par::try_map_indexed(train.len(), |i| {
        let s = &train[i];
        let mask = make_mask(d.width, accel, d.acs, train_mask_seed(cfg, accel, i))?;
        let fm = s.full_model()?.with_mask(mask)?;
        let y = fm.undersample(&s.kspace)?;
        Ok::<_, Error>(ModlExample { fm, y: y.to_complex(), target: targets[i].to_complex() })
    })
    .ctx(&label)?;
    let ck = train_modl(&examples, &cfg.modl).ctx(&label)?;
    mkdir(&layout.model_dir(snr))?;
    save_checkpoint(&path, &ck.to_checkpoint()).ctx(&label)?;
    let trace = layout.model_dir(snr).join(format!("modl-{t}-R{accel}_trace.csv"));
    write_text(&trace, &mrilab::modl::trace_csv(&ck.trace, steps_per_epoch(examples.len(), cfg.modl.batch)))?;
    write_stamp(&path, &hash)?;
    report.ran += 1;
    report.artifacts.extend([path, trace]);
    report.notices.push(format!("{label}: λ = {:.4}", ck.lambda()));
    Ok(report)
}

/// Reconstructs the validation split for every (train SNR, inference SNR,
/// R) cell of the sweep.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, method: Method) -> Result<Report, CliError> {
    let started = unix_now();
    let layout = Layout::new(&cfg.out_dir);
    let ledger = RunLedger::open(layout.ledger()).ctx("opening the run ledger")?;
    let mut report = Report::default();
    for t in &cfg.train_snr {
        for i in cfg.infer_snr(*t) {
            for r in &cfg.accel {
                report.merge(reconstruct_cell(cfg, &layout, method, *t, i, *r)?);
            }
        }
    }
    record(&ledger, &format!("reconstruct {method}"), cfg, started, &report)?;
    Ok(report)
}

fn recon_hash(cfg: &ExperimentConfig, method: Method, t: f64, i: f64, r: usize) -> String {
    let training = if method.is_gsure() { Training::Gsure } else { Training::Naive };
    let mut sections = stage2_sections(training, if method.is_dps() { "edm" } else { "modl" });
    if method.is_dps() {
        sections.push("dps");
    }
    unit_hash(cfg, &sections, &format!("recon:{method}:{t}:{i}:{r}"))
}

fn reconstruct_cell(cfg: &ExperimentConfig, layout: &Layout, method: Method, t: f64, i: f64, r: usize) -> Result<Report, CliError> {
    let mut report = Report::default();
    let dir = layout.recon_dir(method, t, i, r);
    let runs = dir.join("runs.csv");
    let hash = recon_hash(cfg, method, t, i, r);
    let label = format!("reconstruct {method} t={t} i={i} R={r}");
    if check_unit(&mut report, &label, &runs, &hash) {
        return Ok(report);
    }
    let training = if method.is_gsure() { Training::Gsure } else { Training::Naive };
    let hint = if method.is_dps() {
        format!("run `train --stage edm --mode {training}` first")
    } else {
        format!("run `train --stage modl --mode {training}` first")
    };
    let ckpt_path = if method.is_dps() { layout.edm_ckpt(t, training) } else { layout.modl_ckpt(t, training, r) };
    require(&ckpt_path, &hint)?;
    let raw = load_checkpoint(&ckpt_path).ctx(&label)?;
    let manifest = require_manifest(layout, i)?;
    let val_idx = manifest.indices(Split::Val);
    mkdir(&dir)?;
    let d = &cfg.dataset;
    let measure = |k: usize| -> Result<(Sample, mrilab::mri::ForwardModel<f32>, CTensor), Error> {
        let s = manifest.load_sample(val_idx[k])?;
        let mask = make_mask(d.width, r, d.acs, val_mask_seed(cfg, r, k))?;
        let fm = s.full_model()?.with_mask(mask)?;
        let y = fm.undersample(&s.kspace)?;
        Ok((s, fm, y))
    };
    let rows: Vec<String> = if method.is_dps() {
        let edm = EdmCheckpoint::from_checkpoint(&raw).ctx(&label)?;
        let per_sample = par::try_map_indexed(val_idx.len(), |k| {
            let (s, fm, y) = measure(k)?;
            let outs = dps_posterior(&edm.model, &y, &fm, &cfg.dps, dps_seed(cfg, k))?;
            let mut lines = String::new();
            for (j, o) in outs.iter().enumerate() {
                save_tensor(dir.join(format!("{}.seed{j}.cxt", s.id)), &o.image)?;
                let _ = writeln!(lines, "{},{},{},{:.6e}", s.id, o.seed, o.steps, o.residual);
            }
            let imgs: Vec<CTensor> = outs.into_iter().map(|o| o.image).collect();
            save_tensor(dir.join(format!("{}.avg.cxt", s.id)), &posterior_average(&imgs)?)?;
            Ok::<_, Error>(lines)
        })
        .ctx(&label)?;
        per_sample
    } else {
        let modl = ModlCheckpoint::from_checkpoint(&raw).ctx(&label)?;
        par::try_map_indexed(val_idx.len(), |k| {
            let (s, fm, y) = measure(k)?;
            let x = modl_forward(&modl, &y, &fm)?;
            let res = fm.forward_tensor(&x)?;
            let rn = res.data().iter().zip(y.data()).map(|(a, b)| (a - b).norm_sqr() as f64).sum::<f64>().sqrt();
            save_tensor(dir.join(format!("{}.cxt", s.id)), &x)?;
            Ok::<_, Error>(format!("{},0,{},{:.6e}\n", s.id, cfg.modl.unrolls, rn))
        })
        .ctx(&label)?
    };
    write_text(&runs, &(String::from("id,seed,steps,residual\n") + &rows.concat()))?;
    write_stamp(&runs, &hash)?;
    report.ran += 1;
    report.artifacts.push(runs);
    report.notices.push(format!("{label}: {} samples", val_idx.len()));
    Ok(report)
}

/// Mean NRMSE after averaging the first `k` posterior seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragingRow {
    pub method: Method,
    pub accel: usize,
    pub train_snr_db: f64,
    pub infer_snr_db: f64,
    pub k: usize,
    pub mean_nrmse: f64,
}

/// Stage-1 quality on the validation split of one SNR level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingRow {
    pub snr_db: f64,
    pub id: String,
    pub psnr_adjoint: f64,
    pub psnr_denoised: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub metrics: Vec<MetricsRecord>,
    pub stats: Vec<StatsRecord>,
    pub averaging: Vec<AveragingRow>,
    pub denoising: Vec<DenoisingRow>,
    pub report: Report,
}

/// Per-sample metrics, paired tests, summary tables and curves.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Evaluation, CliError> {
    let started = unix_now();
    let layout = Layout::new(&cfg.out_dir);
    let ledger = RunLedger::open(layout.ledger()).ctx("opening the run ledger")?;
    let base = require_manifest(&layout, cfg.dataset.snr_grid[0])?;
    let val = load_split(&base, Split::Val)?;
    let refs: Vec<(String, CTensor, AnatomyMask)> = val
        .iter()
        .map(|s| {
            let clean = s
                .clean
                .clone()
                .ok_or_else(|| Error::Dataset { id: s.id.clone(), msg: "no clean reference stored".into() })?;
            let mask = anatomy_mask(&clean)?;
            Ok((s.id.clone(), clean, mask))
        })
        .collect::<Result<_, Error>>()
        .ctx("evaluate: loading references")?;

    let mut ev = Evaluation::default();
    for &method in &cfg.methods {
        for &t in &cfg.train_snr {
            for i in cfg.infer_snr(t) {
                for &r in &cfg.accel {
                    let dir = layout.recon_dir(method, t, i, r);
                    require(&dir.join("runs.csv"), &format!("run `reconstruct --method {method}` first"))?;
                    let suffix = if method.is_dps() { "avg.cxt" } else { "cxt" };
                    let missing: Vec<&str> = refs
                        .iter()
                        .filter(|(id, _, _)| !dir.join(format!("{id}.{suffix}")).exists())
                        .map(|(id, _, _)| id.as_str())
                        .collect();
                    if !missing.is_empty() {
                        return Err(Error::Statistics(format!(
                            "{} is missing reconstructions for: {}",
                            dir.display(),
                            missing.join(", ")
                        )))
                        .ctx("evaluate");
                    }
                    let recs = par::try_map_indexed(refs.len(), |k| {
                        let (id, clean, mask) = &refs[k];
                        let est = load_tensor(dir.join(format!("{id}.{suffix}")))?;
                        let (n, s, p) = image_metrics(clean, &est, mask)?;
                        Ok::<_, Error>(MetricsRecord {
                            id: id.clone(),
                            method: method.to_string(),
                            train_snr_db: t,
                            infer_snr_db: i,
                            accel: r,
                            seed: cfg.seed,
                            nrmse: n,
                            ssim: s,
                            psnr: p,
                        })
                    })
                    .ctx("evaluate")?;
                    for rec in &recs {
                        rec.validate().ctx("evaluate")?;
                    }
                    ev.metrics.extend(recs);
                    if method.is_dps() {
                        let curves = par::try_map_indexed(refs.len(), |k| {
                            let (id, clean, mask) = &refs[k];
                            let seeds: Vec<CTensor> = (0..cfg.dps.samples)
                                .map(|j| load_tensor(dir.join(format!("{id}.seed{j}.cxt"))))
                                .collect::<Result<_, _>>()?;
                            (1..=seeds.len()).map(|n| nrmse(clean, &posterior_average(&seeds[..n])?, mask)).collect::<Result<Vec<_>, _>>()
                        })
                        .ctx("evaluate: averaging curve")?;
                        for k in 1..=cfg.dps.samples {
                            let vals: Vec<f64> = curves.iter().map(|c| c[k - 1]).collect();
                            ev.averaging.push(AveragingRow { method, accel: r, train_snr_db: t, infer_snr_db: i, k, mean_nrmse: mean(&vals) });
                        }
                    }
                }
            }
        }
    }
    ev.stats = paired_tests(cfg, &ev.metrics).ctx("evaluate: statistics")?;
    ev.denoising = denoising_rows(cfg, &layout, &refs).ctx("evaluate: stage-1 table")?;

    let out = layout.eval_dir();
    let files = [
        ("metrics.csv", metrics_csv(&ev.metrics)),
        ("stats.csv", stats_csv(&ev.stats)),
        ("summary.csv", summary_csv(&ev.metrics)),
        ("summary.txt", summary_text(&ev.metrics)),
        ("averages.csv", averaging_csv(&ev.averaging)),
        ("denoising.csv", denoising_csv(&ev.denoising)),
    ];
    for (name, text) in &files {
        let p = out.join(name);
        write_text(&p, text)?;
        ev.report.artifacts.push(p);
    }
    ev.report.ran += 1;
    ev.report.notices.push(format!(
        "evaluate: {} metric rows, {} comparisons ({} significant after Bonferroni)",
        ev.metrics.len(),
        ev.stats.len(),
        ev.stats.iter().filter(|s| s.significant).count()
    ));
    record(&ledger, "evaluate", cfg, started, &ev.report)?;
    Ok(ev)
}

fn paired_tests(cfg: &ExperimentConfig, metrics: &[MetricsRecord]) -> Result<Vec<StatsRecord>, Error> {
    let mut out = Vec::new();
    for family in ["dps", "modl"] {
        let (naive, gsure) = (format!("naive-{family}"), format!("gsure-{family}"));
        let has = |m: &str| cfg.methods.iter().any(|x| x.to_string() == m);
        if !has(&naive) || !has(&gsure) {
            continue;
        }
        for &r in &cfg.accel {
            for &t in &cfg.train_snr {
                for i in cfg.infer_snr(t) {
                    let cell = |m: &str| -> BTreeMap<&str, &MetricsRecord> {
                        metrics
                            .iter()
                            .filter(|x| x.method == m && x.accel == r && x.train_snr_db == t && x.infer_snr_db == i)
                            .map(|x| (x.id.as_str(), x))
                            .collect()
                    };
                    let (a, b) = (cell(&gsure), cell(&naive));
                    let unpaired: Vec<&str> =
                        a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).copied().collect();
                    if !unpaired.is_empty() {
                        return Err(Error::Statistics(format!("unpaired samples: {}", unpaired.join(", "))));
                    }
                    for metric in ["nrmse", "ssim"] {
                        let pick = |m: &BTreeMap<&str, &MetricsRecord>| -> Vec<f64> {
                            m.values().map(|x| if metric == "nrmse" { x.nrmse } else { x.ssim }).collect()
                        };
                        let w = wilcoxon_signed_rank(&pick(&a), &pick(&b))?;
                        out.push(StatsRecord {
                            comparison: format!("{family}:R{r}:t{}:i{}:{metric}", snr_tag(t), snr_tag(i)),
                            n: w.n,
                            statistic: w.statistic,
                            p_value: w.p_value,
                            significant: false,
                        });
                    }
                }
            }
        }
    }
    if !out.is_empty() {
        let flags = bonferroni(&out.iter().map(|s| s.p_value).collect::<Vec<_>>(), cfg.alpha)?;
        for (s, f) in out.iter_mut().zip(flags) {
            s.significant = f;
        }
    }
    Ok(out)
}

fn denoising_rows(cfg: &ExperimentConfig, layout: &Layout, refs: &[(String, CTensor, AnatomyMask)]) -> Result<Vec<DenoisingRow>, Error> {
    let mut rows = Vec::new();
    for &snr in &cfg.dataset.snr_grid {
        let dir = layout.denoised_dir(snr);
        if !dir.join("index.txt").exists() {
            continue;
        }
        let manifest = DatasetManifest::load(layout.data_dir(snr))?;
        let val = manifest.indices(Split::Val);
        let part = par::try_map_indexed(val.len(), |k| {
            let s = manifest.load_sample(val[k])?;
            let (_, clean, mask) = refs
                .iter()
                .find(|(id, _, _)| *id == s.id)
                .ok_or_else(|| Error::Statistics(format!("no reference for {}", s.id)))?;
            let adj = adjoint_image(&s.kspace, &s.full_model()?)?;
            let den = load_tensor(dir.join(format!("{}.cxt", s.id)))?;
            Ok::<_, Error>(DenoisingRow { snr_db: snr, id: s.id.clone(), psnr_adjoint: psnr(clean, &adj, mask)?, psnr_denoised: psnr(clean, &den, mask)? })
        })?;
        rows.extend(part);
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
    (m, var.sqrt())
}

/// One summary row per (method, R, train SNR, inference SNR).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub accel: usize,
    pub train_snr_db: f64,
    pub infer_snr_db: f64,
    pub n: usize,
    pub nrmse: (f64, f64),
    pub ssim: (f64, f64),
    pub psnr: (f64, f64),
    /// Lowest mean NRMSE among the methods of its (R, SNR) cell.
    pub best: bool,
}

pub fn summarize(metrics: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, i64, i64, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for m in metrics {
        // highest SNR first, as in the published tables
        let snr_key = |v: f64| (-v * 1000.0).round() as i64;
        let key = (m.accel, snr_key(m.train_snr_db), snr_key(m.infer_snr_db), m.method.clone());
        groups.entry(key).or_default().push(m);
    }
    let mut rows: Vec<SummaryRow> = groups
        .values()
        .map(|g| {
            let col = |f: fn(&MetricsRecord) -> f64| mean_std(&g.iter().map(|m| f(m)).collect::<Vec<_>>());
            SummaryRow {
                method: g[0].method.clone(),
                accel: g[0].accel,
                train_snr_db: g[0].train_snr_db,
                infer_snr_db: g[0].infer_snr_db,
                n: g.len(),
                nrmse: col(|m| m.nrmse),
                ssim: col(|m| m.ssim),
                psnr: col(|m| m.psnr),
                best: false,
            }
        })
        .collect();
    let n = rows.len();
    for k in 0..n {
        let same = |a: &SummaryRow, b: &SummaryRow| a.accel == b.accel && a.train_snr_db == b.train_snr_db && a.infer_snr_db == b.infer_snr_db;
        let best = rows.iter().filter(|o| same(o, &rows[k])).map(|o| o.nrmse.0).fold(f64::INFINITY, f64::min);
        rows[k].best = rows[k].nrmse.0 == best;
    }
    rows
}

pub fn summary_csv(metrics: &[MetricsRecord]) -> String {
    let mut s = String::from("method,R,train_snr_db,infer_snr_db,n,nrmse_mean,nrmse_std,ssim_mean,ssim_std,psnr_mean,psnr_std,best\n");
    for r in summarize(metrics) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method, r.accel, r.train_snr_db, r.infer_snr_db, r.n, r.nrmse.0, r.nrmse.1, r.ssim.0, r.ssim.1, r.psnr.0, r.psnr.1, r.best
        );
    }
    s
}

/// Aligned plain-text table; `*` marks the lowest NRMSE of each cell.
pub fn summary_text(metrics: &[MetricsRecord]) -> String {
    let mut s = format!(
        "{:<12} {:>3} {:>6} {:>6} {:>4}  {:>18}  {:>18}  {:>16}\n",
        "method", "R", "train", "infer", "n", "NRMSE", "SSIM", "PSNR (dB)"
    );
    for r in summarize(metrics) {
        let _ = writeln!(
            s,
            "{:<12} {:>3} {:>6} {:>6} {:>4}  {:>8.4} ± {:<6.4}{}  {:>8.4} ± {:<6.4}   {:>7.2} ± {:<5.2}",
            r.method,
            r.accel,
            r.train_snr_db,
            r.infer_snr_db,
            r.n,
            r.nrmse.0,
            r.nrmse.1,
            if r.best { "*" } else { " " },
            r.ssim.0,
            r.ssim.1,
            r.psnr.0,
            r.psnr.1
        );
    }
    s
}

pub fn averaging_csv(rows: &[AveragingRow]) -> String {
    let mut s = String::from("method,R,train_snr_db,infer_snr_db,averaged_seeds,mean_nrmse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.method, r.accel, r.train_snr_db, r.infer_snr_db, r.k, r.mean_nrmse);
    }
    s
}

pub fn denoising_csv(rows: &[DenoisingRow]) -> String {
    let mut s = String::from("snr_db,id,psnr_adjoint,psnr_denoised\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.snr_db, r.id, r.psnr_adjoint, r.psnr_denoised);
    }
    s
}

/// Every stage in order: data, denoisers, stage-2 models for the requested
/// methods, reconstructions and evaluation.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Evaluation, CliError> {
    let mut report = cmd_gen_data(cfg)?;
    if cfg.methods.iter().any(|m| m.is_gsure()) {
        report.merge(cmd_train(cfg, Stage::Denoiser)?);
    }
    for m in &cfg.methods {
        let t = if m.is_gsure() { Training::Gsure } else { Training::Naive };
        let stage = if m.is_dps() { Stage::Edm(t) } else { Stage::Modl(t) };
        report.merge(cmd_train(cfg, stage)?);
    }
    for m in &cfg.methods {
        report.merge(cmd_reconstruct(cfg, *m)?);
    }
    let mut ev = cmd_evaluate(cfg)?;
    report.merge(std::mem::take(&mut ev.report));
    ev.report = report;
    Ok(ev)
}
