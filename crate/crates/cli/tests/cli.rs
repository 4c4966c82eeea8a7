//! End-to-end runs of the `mrilab` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[run]
seed = 3

[dataset]
n_train = 6
n_val = 6
height = 16
width = 16
coils = 2
acs = 4
snr_grid = 30, 15

[sweep]
accel = 4
train_snr = 30, 15
infer = diagonal

[denoiser]
widths = 4, 4
iterations = 6
batch = 2

[edm]
widths = 4, 4
iterations = 6
batch = 2

[dps]
steps = 6
spacing = edm
samples = 5

[modl]
widths = 4, 4
unrolls = 1
cg_iters = 3
epochs = 1
batch = 2
";

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config_text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.conf");
        std::fs::write(&config, config_text).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn mrilab(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mrilab"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    v.sort();
    v
}

#[test]
fn bad_configs_exit_with_code_2() {
    let run = Run::new(&TINY.replace("snr_grid = 30, 15", "snr_grid = 15, 30"));
    let o = run.mrilab(&["gen-data"]);
    assert_eq!(code(&o), 2, "{}", text(&o));

    let run = Run::new(&TINY.replace("[dps]", "[dps]\nbogus = 1"));
    let o = run.mrilab(&["gen-data"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("bogus"), "{}", text(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_mrilab")).args(["--config", "/nonexistent/x.conf", "gen-data"]).output().unwrap();
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn missing_prerequisites_exit_with_code_3() {
    let run = Run::new(TINY);
    let o = run.mrilab(&["train", "--stage", "modl", "--mode", "naive"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("gen-data"), "{}", text(&o));

    assert_eq!(code(&run.mrilab(&["gen-data"])), 0);
    let o = run.mrilab(&["train", "--stage", "edm", "--mode", "gsure"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("denoiser"), "{}", text(&o));

    let o = run.mrilab(&["evaluate"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn rerunning_gen_data_is_skipped_and_logged() {
    let run = Run::new(TINY);
    let first = run.mrilab(&["gen-data"]);
    assert_eq!(code(&first), 0, "{}", text(&first));
    let manifest = run.out().join("data/snr30/manifest.tsv");
    let before = std::fs::read(&manifest).unwrap();
    let second = run.mrilab(&["gen-data"]);
    assert_eq!(code(&second), 0);
    assert!(text(&second).contains("skipping"), "{}", text(&second));
    assert_eq!(std::fs::read(&manifest).unwrap(), before);

    let ledger = std::fs::read_to_string(run.out().join("ledger.tsv")).unwrap();
    let rows: Vec<&str> = ledger.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{ledger}");
    assert!(rows[0].contains("\tran\t") && rows[1].contains("\treused\t"), "{ledger}");
}

#[test]
fn full_sweep_writes_every_artifact() {
    let run = Run::new(TINY);
    for args in [
        vec!["gen-data"],
        vec!["train", "--stage", "denoiser"],
        vec!["train", "--stage", "edm", "--mode", "naive"],
        vec!["train", "--stage", "edm", "--mode", "gsure"],
        vec!["train", "--stage", "modl", "--mode", "naive"],
        vec!["train", "--stage", "modl", "--mode", "gsure"],
        vec!["reconstruct", "--method", "all"],
        vec!["evaluate"],
    ] {
        let o = run.mrilab(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", text(&o));
    }
    let out = run.out();

    // DPS keeps every posterior sample plus their average; MoDL one image
    let dps = files_in(&out.join("recon/gsure-dps/t15_i15_R4"));
    let id = dps.iter().find(|f| f.ends_with(".avg.cxt")).unwrap().trim_end_matches(".avg.cxt").to_string();
    let per_id: Vec<&String> = dps.iter().filter(|f| f.starts_with(&format!("{id}."))).collect();
    assert_eq!(per_id.len(), 6, "{per_id:?}");
    for k in 0..5 {
        assert!(dps.contains(&format!("{id}.seed{k}.cxt")), "{dps:?}");
    }
    let modl = files_in(&out.join("recon/naive-modl/t30_i30_R4"));
    assert!(modl.contains(&format!("{id}.cxt")), "{modl:?}");
    assert_eq!(modl.iter().filter(|f| f.starts_with(&format!("{id}."))).count(), 1);

    let metrics = std::fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "id,method,train_snr_db,infer_snr_db,R,seed,nrmse,ssim,psnr");
    assert_eq!(metrics.lines().count(), 1 + 4 * 2 * 6);
    let stats = std::fs::read_to_string(out.join("eval/stats.csv")).unwrap();
    assert_eq!(stats.lines().next().unwrap(), "comparison,n,statistic,p,significant");
    assert_eq!(stats.lines().count(), 1 + 2 * 2 * 2);
    for f in ["summary.csv", "summary.txt", "averages.csv", "denoising.csv"] {
        assert!(out.join("eval").join(f).exists(), "{f}");
    }

    // previews
    let img = out.join("recon/gsure-dps/t15_i15_R4").join(format!("{id}.avg.cxt"));
    let reference = out.join("data/snr30").join(format!("{id}.clean.cxt"));
    let o = run.mrilab(&["quicklook", img.to_str().unwrap(), "--reference", reference.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let pgm = std::fs::read(out.join("recon/gsure-dps/t15_i15_R4").join(format!("{id}.avg.diff.pgm"))).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), "P5\n16 16\n255\n".len() + 256);

    // a second full pass reuses everything and reproduces the metrics bytes
    let again = run.mrilab(&["reconstruct", "--method", "all"]);
    assert!(text(&again).contains("reusing"), "{}", text(&again));
    let o = run.mrilab(&["evaluate"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out.join("eval/metrics.csv")).unwrap(), metrics);
}
