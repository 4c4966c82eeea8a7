//! Per-sample work mapped through the rayon pool versus a plain loop.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mrilab::datagen::{generate_sample, DatasetSpec};
use mrilab::gsure::{gaussian_probe, gsure_loss_grad, DivergenceScaling, GsureBatch};
use mrilab::modl::{modl_forward, ModlCheckpoint, ModlConfig};
use mrilab::mri::{make_mask, ForwardModel};
use mrilab::nnet::{NetConfig, Network};
use mrilab::par;
use mrilab::tensor::CTensor;

const SAMPLES: usize = 8;

fn dataset() -> Vec<(ForwardModel<f32>, CTensor)> {
    let spec = DatasetSpec { n_train: SAMPLES, n_val: 0, height: 32, width: 32, acs: 8, snr_db: 12.0, ..DatasetSpec::default() };
    (0..SAMPLES)
        .map(|i| {
            let s = generate_sample(&spec, i).unwrap();
            (s.full_model().unwrap(), s.kspace)
        })
        .collect()
}

fn gsure_gradients(c: &mut Criterion) {
    let data: Vec<GsureBatch> =
        dataset().iter().enumerate().map(|(i, (fm, y))| GsureBatch::from_kspace(&format!("s{i}"), fm, y).unwrap()).collect();
    let net = Network::<f32>::build(&NetConfig {
        in_channels: 2,
        out_channels: 2,
        widths: vec![16, 32],
        kernel: 3,
        residual: true,
        seed: 1,
    })
    .unwrap();
    let probes: Vec<Vec<f32>> = data.iter().enumerate().map(|(i, b)| gaussian_probe(b.aty.len(), i as u64)).collect();
    let one = |i: usize| gsure_loss_grad(&net, data[i].sigma_sq, &data[i], 1e-3, &probes[i], DivergenceScaling::Unbiased).unwrap();
    let mut g = c.benchmark_group("gsure_gradients");
    g.sample_size(20);
    g.bench_with_input(BenchmarkId::new("rayon", SAMPLES), &SAMPLES, |b, &n| b.iter(|| par::map_indexed(n, one)));
    g.bench_with_input(BenchmarkId::new("sequential", SAMPLES), &SAMPLES, |b, &n| b.iter(|| par::map_indexed_seq(n, one)));
    g.finish();
}

fn modl_reconstructions(c: &mut Criterion) {
    let data: Vec<(ForwardModel<f32>, CTensor)> = dataset()
        .into_iter()
        .enumerate()
        .map(|(i, (fm, y))| {
            let fm = fm.with_mask(make_mask(32, 4, 8, i as u64).unwrap()).unwrap();
            let y = fm.undersample(&y).unwrap();
            (fm, y)
        })
        .collect();
    let ckpt = ModlCheckpoint::init(&ModlConfig::default()).unwrap();
    let one = |i: usize| modl_forward(&ckpt, &data[i].1, &data[i].0).unwrap();
    let mut g = c.benchmark_group("modl_forward");
    g.sample_size(20);
    g.bench_with_input(BenchmarkId::new("rayon", SAMPLES), &SAMPLES, |b, &n| b.iter(|| par::map_indexed(n, one)));
    g.bench_with_input(BenchmarkId::new("sequential", SAMPLES), &SAMPLES, |b, &n| b.iter(|| par::map_indexed_seq(n, one)));
    g.finish();
}

criterion_group!(benches, gsure_gradients, modl_reconstructions);
criterion_main!(benches);
