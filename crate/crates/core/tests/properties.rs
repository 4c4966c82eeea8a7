//! Property tests for invariants that hold for all valid inputs.

use mrilab::diffusion::{c_in, c_out, c_skip, loss_weight, NoiseSchedule, Spacing};
use mrilab::evalkit::{average_ranks, bonferroni, nrmse, psnr, wilcoxon_signed_rank, AnatomyMask};
use mrilab::gsure::{divergence_probe, gaussian_probe};
use mrilab::modl::cg_solve;
use mrilab::tensor::{decode_tensor, fft2c, ifft2c, write_tensor, CTensor};
use mrilab::Complex32;
use proptest::prelude::*;

fn tensor(h: usize, w: usize, vals: &[(f32, f32)]) -> CTensor {
    CTensor::new(vec![h, w], vals.iter().take(h * w).map(|(a, b)| Complex32::new(*a, *b)).collect()).unwrap()
}

fn image() -> impl Strategy<Value = (usize, usize, Vec<(f32, f32)>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec((-10f32..10.0, -10f32..10.0), h * w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preconditioning_identities(sigma in 1e-3f64..100.0, sd in 0.1f64..2.0) {
        let (s, o, i) = (c_skip(sigma, sd), c_out(sigma, sd), c_in(sigma, sd));
        prop_assert!((loss_weight(sigma, sd) * o * o - 1.0).abs() < 1e-9);
        prop_assert!((o * o - sigma * sigma * s).abs() < 1e-9 * (1.0 + o * o));
        prop_assert!((i * i * (sigma * sigma + sd * sd) - 1.0).abs() < 1e-12);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn schedules_decrease_to_zero(
        lo in 1e-3f64..0.5,
        ratio in 1.5f64..1e4,
        steps in 1usize..300,
        edm in any::<bool>(),
    ) {
        let spacing = if edm { Spacing::Edm } else { Spacing::Linear };
        let s = NoiseSchedule::new(lo, lo * ratio, steps, spacing).unwrap();
        let v = s.sigmas();
        prop_assert_eq!(v.len(), steps + 1);
        prop_assert_eq!(v[steps], 0.0);
        prop_assert!((v[0] - lo * ratio).abs() < 1e-9 * lo * ratio);
        prop_assert!(v.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fft_is_unitary((h, w, vals) in image()) {
        let x = tensor(h, w, &vals);
        let k = fft2c(&x).unwrap();
        let back = ifft2c(&k).unwrap();
        let n = x.norm().max(1e-6);
        prop_assert!((k.norm() - x.norm()).abs() <= 1e-5 * n);
        let err: f32 = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f32>().sqrt();
        prop_assert!(err as f64 <= 1e-5 * n);
    }

    #[test]
    fn cxt_round_trip_is_bit_identical((h, w, vals) in image()) {
        let x = tensor(h, w, &vals);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &x).unwrap();
        let (back, used) = decode_tensor(&buf, 0).unwrap();
        prop_assert_eq!(used, buf.len());
        prop_assert_eq!(back, x);
    }

    #[test]
    fn metrics_ignore_common_scaling((h, w, vals) in image(), noise in prop::collection::vec(-1f32..1.0, 144), a in 0.1f32..20.0) {
        prop_assume!(vals.iter().any(|(r, i)| r.abs() + i.abs() > 1e-2));
        let x = tensor(h, w, &vals);
        let y = CTensor::new(
            vec![h, w],
            x.data().iter().zip(&noise).map(|(v, n)| v + Complex32::new(*n, -*n)).collect(),
        ).unwrap();
        let scale = |t: &CTensor| CTensor::new(vec![h, w], t.data().iter().map(|v| v * a).collect()).unwrap();
        let m = AnatomyMask::full(h, w);
        let (e0, e1) = (nrmse(&x, &y, &m).unwrap(), nrmse(&scale(&x), &scale(&y), &m).unwrap());
        prop_assert!((e0 - e1).abs() <= 1e-4 * e0.max(1e-3));
        let (p0, p1) = (psnr(&x, &y, &m).unwrap(), psnr(&scale(&x), &scale(&y), &m).unwrap());
        prop_assert!((p0 - p1).abs() < 1e-3);
        prop_assert_eq!(nrmse(&x, &x, &m).unwrap(), 0.0);
    }

    #[test]
    fn ranks_sum_to_triangular(v in prop::collection::vec(-5i32..5, 1..40)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let r = average_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] { prop_assert!(r[i] < r[j]); }
                if v[i] == v[j] { prop_assert_eq!(r[i], r[j]); }
            }
        }
    }

    #[test]
    fn wilcoxon_is_symmetric_in_its_arguments(
        pairs in prop::collection::vec((0f64..1.0, 0f64..1.0), 6..40),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert_eq!(ab.statistic, ba.statistic);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
        let n = ab.n as f64;
        prop_assert!(ab.statistic >= 0.0 && ab.statistic <= n * (n + 1.0) / 4.0);
    }

    #[test]
    fn bonferroni_is_monotone_in_alpha(p in prop::collection::vec(0f64..0.1, 1..80), a1 in 0.001f64..0.1, a2 in 0.001f64..0.1) {
        let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let f_lo = bonferroni(&p, lo).unwrap();
        let f_hi = bonferroni(&p, hi).unwrap();
        prop_assert!(f_lo.iter().zip(&f_hi).all(|(l, h)| !*l || *h));
        let thr = lo / p.len() as f64;
        prop_assert!(f_lo.iter().zip(&p).all(|(f, v)| *f == (*v < thr)));
    }

    #[test]
    fn divergence_of_diagonal_map_is_exact_for_linear_maps(d in prop::collection::vec(-3f64..3.0, 1..32), seed in any::<u64>()) {
        let f = |v: &[f64]| v.iter().zip(&d).map(|(a, b)| a * b).collect::<Vec<_>>();
        let x = vec![0.5; d.len()];
        let b = gaussian_probe::<f64>(d.len(), seed);
        let got = divergence_probe(f, &x, 1e-3, &b).unwrap();
        let want: f64 = b.iter().zip(&d).map(|(bi, di)| bi * bi * di).sum();
        prop_assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()));
    }

    #[test]
    fn cg_solves_diagonal_systems(d in prop::collection::vec(0.1f64..10.0, 1..24), rhs in prop::collection::vec(-1f64..1.0, 24)) {
        let n = d.len();
        let op = |v: &[f64]| v.iter().zip(&d).map(|(a, b)| a * b).collect::<Vec<_>>();
        // n steps suffice only in exact arithmetic; rounding on spread spectra costs a few more
        let out = cg_solve(op, &rhs[..n], 4 * n, 1e-14).unwrap();
        prop_assert!(out.converged, "{} iterations, residual {:e}", out.iters, out.rel_residual);
        for i in 0..n {
            prop_assert!((out.x[i] - rhs[i] / d[i]).abs() < 1e-9 * (1.0 + (rhs[i] / d[i]).abs()));
        }
    }
}
