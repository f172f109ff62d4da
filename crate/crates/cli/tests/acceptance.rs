//! Acceptance suite. Each test exercises one graduation criterion at its
//! stated tolerance and prints one PASS line; run with `--nocapture` to
//! see them.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tqsim_cli::formats::QConfigFile;
use tqsim_cli::reports::{detect_outliers, flagged_dims};
use tqsim_cli::tensor_file::{self, CrcMode};
use tqsim_core::estimators::{EstimatorKind, RangeEstimator, SlotLayout};
use tqsim_core::kernels::{
    qmatmul_peg, qmatmul_per_embedding, qmatmul_per_tensor, OverflowPolicy,
};
use tqsim_core::peg::{
    build_range_permutation, peg_ffn_forward_native, peg_ffn_forward_per_tensor, peg_overhead,
    permute_layernorm_and_linears, FfnBlock, GroupSpec, LayerNormParams, PegFfnQuant,
};
use tqsim_core::quant::{
    dequantize, fake_quantize, lsq_backward_scale, quantize, quantize_with, ste_backward_input,
    GranularParams, QParams,
};
use tqsim_core::tensor::TensorF;
use tqsim_encoder::sites::QuantConfig;

fn pass(n: u32, what: &str) {
    println!("ACCEPTANCE {n:02} ({what}): PASS");
}

fn rand_params(rng: &mut ChaCha8Rng) -> QParams {
    let bits = *[2u8, 3, 4, 6, 8, 16]
        .iter()
        .nth(rng.random_range(0..6))
        .unwrap();
    let scale = rng.random_range(1e-4f64..2.0);
    if rng.random_bool(0.5) {
        QParams::new(bits, scale, 1u32 << (bits - 1), true).unwrap()
    } else {
        let qmax = (1u32 << bits) - 1;
        QParams::new(bits, scale, rng.random_range(0..=qmax), false).unwrap()
    }
}

/// Criterion 1: the integer mapping and its inverse against an
/// independent clip-round oracle, bit-exactly, plus the half-step
/// round-trip bound, 10^4 cases in under 5 seconds.
#[test]
fn acceptance_01_integer_grid_matches_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..10_000 {
        let p = rand_params(&mut rng);
        let value = rng.random_range(-300.0f32..300.0);
        let t = TensorF::from_flat(&[1], vec![value]).unwrap();
        let q = quantize(&t, &p).unwrap();
        // independent oracle: clip(round(x / s) + z; 0, 2^b - 1) in f64
        let oracle = ((value as f64 / p.scale()).round() + p.zero_point() as f64)
            .clamp(0.0, p.qmax() as f64) as u32;
        assert_eq!(q.ints()[0], oracle, "value {value}, params {p:?}");
        let back = dequantize(&q).data()[0];
        let oracle_back = (p.scale() * (oracle as f64 - p.zero_point() as f64)) as f32;
        assert_eq!(back, oracle_back);

        // round-trip bound for a value inside the representable span
        let (lo, hi) = p.grid_span();
        let inside = (lo + (value as f64 + 300.0) / 600.0 * (hi - lo)) as f32;
        let fq = p.fake_quantize_value(inside);
        assert!(
            ((inside - fq).abs() as f64) <= p.scale() / 2.0 + inside.abs() as f64 * 1e-6 + 1e-9,
            "round-trip {inside} -> {fq} exceeds s/2"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    pass(1, "Eq. (1)/(2) vs clip-round oracle, 1e4 cases");
}

/// Criterion 2: per-tensor factorization exactness on 100 random pairs up
/// to 128 x 128: integer path times the combined scale equals the real
/// matmul of the dequantized operands within 1e-5 relative; one rescale.
#[test]
fn acceptance_02_factorization_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..100 {
        let m = rng.random_range(1..=128usize);
        let k = rng.random_range(1..=128usize);
        let wdata: Vec<f32> = (0..m * k).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let w = TensorF::from_flat(&[m, k], wdata).unwrap();
        let wq = quantize_with(
            &w,
            &GranularParams::per_tensor(QParams::from_range(-2.0, 2.0, 8, true).unwrap()),
        )
        .unwrap();
        let xdata: Vec<f32> = (0..k).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let x = TensorF::from_flat(&[k], xdata).unwrap();
        let xq = quantize_with(
            &x,
            &GranularParams::per_tensor(QParams::from_range(-3.0, 3.0, 8, false).unwrap()),
        )
        .unwrap();
        let out = qmatmul_per_tensor(&wq, &xq, OverflowPolicy::Checked).unwrap();
        assert_eq!(out.rescales.rescale_ops, 1);
        let got = out.dequantize();
        let want = dequantize(&xq).matmul_nt(&dequantize(&wq)).unwrap();
        let scale = want
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs() as f64))
            .max(1e-30);
        for (g, t) in got.data().iter().zip(want.data()) {
            assert!(
                ((g - t).abs() as f64) / scale < 1e-5,
                "case {case}: {g} vs {t}"
            );
        }
    }
    pass(2, "Eq. (3) integer path vs real matmul, 100 cases");
}

/// Criterion 3: grouped-path boundary collapse on 50 random cases: K = 1
/// matches the per-tensor path and K = d the per-embedding path within
/// 1e-6 relative; rescale counts are exactly 1, K, and d.
#[test]
fn acceptance_03_group_boundary_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..50 {
        let m = rng.random_range(2..=32usize);
        let d = 4 * rng.random_range(1..=16usize);
        let wdata: Vec<f32> = (0..m * d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let w = TensorF::from_flat(&[m, d], wdata).unwrap();
        let wq = quantize_with(
            &w,
            &GranularParams::per_tensor(QParams::from_range(-1.5, 1.5, 8, true).unwrap()),
        )
        .unwrap();
        let xdata: Vec<f32> = (0..d).map(|_| rng.random_range(-4.0f32..2.0)).collect();
        let x = TensorF::from_flat(&[d], xdata).unwrap();
        let xp = QParams::from_range(-4.0, 2.0, 8, false).unwrap();

        let x_pt = quantize_with(&x, &GranularParams::per_tensor(xp.clone())).unwrap();
        let base = qmatmul_per_tensor(&wq, &x_pt, OverflowPolicy::Checked).unwrap();
        assert_eq!(base.rescales.rescale_ops, 1);
        let base = base.dequantize();

        let x_k1 = quantize_with(
            &x,
            &GranularParams::PerEmbeddingGroup {
                spec: GroupSpec::identity(d, 1).unwrap(),
                params: vec![xp.clone()],
            },
        )
        .unwrap();
        let (k1, c1) = qmatmul_peg(&wq, &x_k1, OverflowPolicy::Checked).unwrap();
        assert_eq!(c1.rescale_ops, 1);

        let x_pe = quantize_with(
            &x,
            &GranularParams::PerEmbedding {
                params: vec![xp.clone(); d],
            },
        )
        .unwrap();
        let (pe, cd) = qmatmul_per_embedding(&wq, &x_pe).unwrap();
        assert_eq!(cd.rescale_ops, d as u64);

        let x_kd = quantize_with(
            &x,
            &GranularParams::PerEmbeddingGroup {
                spec: GroupSpec::identity(d, d).unwrap(),
                params: vec![xp.clone(); d],
            },
        )
        .unwrap();
        let (kd, ckd) = qmatmul_peg(&wq, &x_kd, OverflowPolicy::Checked).unwrap();
        assert_eq!(ckd.rescale_ops, d as u64);

        // an intermediate K for the exact-count claim
        let k_mid = 4;
        let x_km = quantize_with(
            &x,
            &GranularParams::PerEmbeddingGroup {
                spec: GroupSpec::identity(d, k_mid).unwrap(),
                params: vec![xp.clone(); k_mid],
            },
        )
        .unwrap();
        let (_, ckm) = qmatmul_peg(&wq, &x_km, OverflowPolicy::Checked).unwrap();
        assert_eq!(ckm.rescale_ops, k_mid as u64);

        let scale = base
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs() as f64))
            .max(1e-30);
        for (a, b) in k1.data().iter().zip(base.data()) {
            assert!(((a - b).abs() as f64) / scale < 1e-6, "case {case} K=1");
        }
        let scale_pe = pe
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs() as f64))
            .max(1e-30);
        for (a, b) in kd.data().iter().zip(pe.data()) {
            assert!(((a - b).abs() as f64) / scale_pe < 1e-6, "case {case} K=d");
        }
    }
    pass(3, "Eq. (4)/(5) boundary collapse, 50 cases");
}

/// Criterion 4: the per-tensor rewrite equals the native grouped pipeline
/// bit-exactly on 100 random FFN blocks spanning the stated widths and
/// group counts, with and without range-based permutation, in under 60 s.
#[test]
fn acceptance_04_rewrite_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let configs = [(8usize, 2usize), (64, 4), (768, 3), (768, 6)];
    let mut case = 0;
    for &(d, k) in &configs {
        for i in 0..25 {
            let d_ff = 2 * d;
            let block = FfnBlock {
                w1: rand_tensor(&mut rng, &[d_ff, d], 0.3),
                b1: (0..d_ff).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
                w2: rand_tensor(&mut rng, &[d, d_ff], 0.3),
                b2: (0..d).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
            };
            let mut x = rand_tensor(&mut rng, &[1, 4, d], 1.0);
            // a few planted outlier dims keep the permuted cases honest
            for j in 0..3 {
                let dim = (j * 17 + i) % d;
                for r in 0..4 {
                    x.data_mut()[r * d + dim] *= 25.0;
                }
            }
            let permuted = case % 2 == 0;
            let spec = if permuted {
                build_range_permutation(&x, k).unwrap()
            } else {
                GroupSpec::identity(d, k).unwrap()
            };
            let quant = PegFfnQuant::estimate(&x, &block, &spec, 8, 8).unwrap();
            let native = peg_ffn_forward_native(&x, &block, &spec, &quant).unwrap();
            let rewrite = peg_ffn_forward_per_tensor(&x, &block, &spec, &quant).unwrap();
            assert_eq!(
                native.data(),
                rewrite.data(),
                "d={d} k={k} permuted={permuted}"
            );
            case += 1;
        }
    }
    assert_eq!(case, 100);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(4, "per-tensor rewrite bit-exact vs native grouped pipeline");
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f32) -> TensorF {
    let n: usize = dims.iter().product();
    TensorF::from_flat(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Criterion 5: permuted LayerNorm-plus-linear blocks match the original
/// forward within 1e-6 relative on 100 random cases.
#[test]
fn acceptance_05_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..100 {
        let d = 4 * rng.random_range(2..=24usize);
        let k = *[1usize, 2, 4].iter().nth(rng.random_range(0..3)).unwrap();
        let n_in = rng.random_range(2..=16usize);
        let n_out = rng.random_range(2..=16usize);
        let rows = rng.random_range(1..=6usize);
        let ranges: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..20.0)).collect();
        let spec = GroupSpec::from_ranges(&ranges, k).unwrap();
        let ln = LayerNormParams {
            gamma: (0..d).map(|_| rng.random_range(0.5f32..1.5)).collect(),
            beta: (0..d).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        };
        let consumer = rand_tensor(&mut rng, &[n_out, d], 1.0);
        let producer = rand_tensor(&mut rng, &[d, n_in], 1.0);
        let (ln_p, consumer_p, producer_p) =
            permute_layernorm_and_linears(&ln, &consumer, &producer, &spec).unwrap();

        let u = rand_tensor(&mut rng, &[rows, n_in], 1.0);
        let out = layernorm_rows(&u.matmul_nt(&producer).unwrap(), &ln)
            .matmul_nt(&consumer)
            .unwrap();
        let out_p = layernorm_rows(&u.matmul_nt(&producer_p).unwrap(), &ln_p)
            .matmul_nt(&consumer_p)
            .unwrap();
        let scale = out
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs() as f64))
            .max(1e-30);
        for (a, b) in out_p.data().iter().zip(out.data()) {
            assert!(((a - b).abs() as f64) / scale < 1e-6, "case {case}");
        }
    }
    pass(5, "LayerNorm/linear permutation equivariance, 100 cases");
}

fn layernorm_rows(x: &TensorF, ln: &LayerNormParams) -> TensorF {
    let d = x.dims()[x.rank() - 1];
    let rows = x.len() / d;
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-12).sqrt();
        for j in 0..d {
            out[r * d + j] = (((row[j] as f64 - mean) * rstd) * ln.gamma[j] as f64
                + ln.beta[j] as f64) as f32;
        }
    }
    TensorF::from_flat(x.dims(), out).unwrap()
}

/// Criterion 6: the grouped-scheme parameter overhead formula and its
/// share of a base-sized model.
#[test]
fn acceptance_06_overhead_formula() {
    assert_eq!(peg_overhead(768, 6).unwrap(), 804);
    let share = 804.0 / 109.0e6;
    assert!(share < 0.0004, "share {share}");
    pass(6, "overhead d + 6K = 804 and < 0.04% of 109M");
}

/// Criterion 7: estimator suite — the EMA recurrence against hand-worked
/// sequences, the MSE search against an exhaustive oracle on 20 sets, and
/// strict range containment on heavy-tailed data.
#[test]
fn acceptance_07_estimator_suite() {
    // hand-computed EMA with momentum 0.9
    let mut est = RangeEstimator::new(
        EstimatorKind::RunningMinMax { momentum: 0.9 },
        SlotLayout::PerTensor,
    )
    .unwrap();
    let batches = [(0.0f32, 10.0f32), (-2.0, 20.0), (-1.0, 5.0)];
    let m = 0.9f64;
    let mut hand = None;
    for (lo, hi) in batches {
        let t = TensorF::from_flat(&[2], vec![lo, hi]).unwrap();
        est.observe(&t).unwrap();
        hand = Some(match hand {
            None => (lo as f64, hi as f64),
            Some((hlo, hhi)) => (
                m * hlo + (1.0 - m) * lo as f64,
                m * hhi + (1.0 - m) * hi as f64,
            ),
        });
    }
    let (hlo, hhi) = hand.unwrap();
    assert_eq!(est.observed_ranges(), (&[hlo][..], &[hhi][..]));
    // first two batches by hand: 0.9 * 10 + 0.1 * 20 = 11
    assert!((m * 10.0 + (1.0 - m) * 20.0 - 11.0).abs() < 1e-12);

    // MSE vs exhaustive oracle on 20 calibration sets
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for set in 0..20 {
        let data: Vec<f32> = (0..2048)
            .map(|_| {
                (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    * (1.0 + set as f64 * 0.1)) as f32
            })
            .collect();
        let t = TensorF::from_flat(&[2048], data.clone()).unwrap();
        let bits = [2u8, 3, 4][set % 3];
        let mut est = RangeEstimator::new(
            EstimatorKind::Mse { grid_points: 100 },
            SlotLayout::PerTensor,
        )
        .unwrap();
        est.observe(&t).unwrap();
        let chosen = est.mse_best_alpha(0, bits, false).unwrap();

        let (lo, hi) = t.min_max().unwrap();
        let mut best = (f64::INFINITY, f64::NAN);
        for i in 0..100 {
            let alpha = 0.1 + 0.9 * i as f64 / 99.0;
            let p = QParams::from_range(alpha * lo as f64, alpha * hi as f64, bits, false)
                .unwrap();
            let err: f64 = data
                .iter()
                .map(|&v| ((v - p.fake_quantize_value(v)) as f64).powi(2))
                .sum();
            if err < best.0 {
                best = (err, alpha);
            }
        }
        assert_eq!(chosen, best.1, "set {set}");
    }

    // heavy tails: the MSE span sits strictly inside the min-max span
    let mut data: Vec<f32> = (0..4000)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    for i in 0..40 {
        let mag = rng.random_range(10.0f32..50.0);
        data[i * 100] = if i % 2 == 0 { mag } else { -mag };
    }
    data[0] = 50.0;
    data[100] = -50.0;
    let t = TensorF::from_flat(&[4000], data).unwrap();
    let finalize = |kind: EstimatorKind| -> QParams {
        let mut est = RangeEstimator::new(kind, SlotLayout::PerTensor).unwrap();
        est.observe(&t).unwrap();
        match est.finalize(8, false).unwrap() {
            GranularParams::PerTensor { params } => params,
            _ => unreachable!(),
        }
    };
    let mse = finalize(EstimatorKind::Mse { grid_points: 100 });
    let mm = finalize(EstimatorKind::CurrentMinMax);
    let (alo, ahi) = mse.grid_span();
    let (blo, bhi) = mm.grid_span();
    assert!(alo > blo && ahi < bhi, "[{alo},{ahi}] not inside [{blo},{bhi}]");
    pass(7, "EMA hand sequence, MSE oracle x20, heavy-tail containment");
}

/// Criterion 8: straight-through input gradients and learned-step scale
/// gradients against central finite differences of the staircase at 1000
/// sampled points outside the documented exclusion band, rel. err < 1e-3.
#[test]
fn acceptance_08_gradient_checks() {
    let staircase = |x: f64, s: f64, z: i64, qmax: i64| -> f64 {
        let q = ((x / s).round() as i64 + z).clamp(0, qmax);
        s * (q - z) as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut checked = 0usize;
    while checked < 1000 {
        let p = rand_params(&mut rng);
        let (lo, hi) = p.grid_span();
        let span = hi - lo;
        let x = rng.random_range((lo - 0.5 * span)..(hi + 0.5 * span)) as f32;
        let s = p.scale();
        let u = x as f64 / s;
        let off = (u - u.round()).abs();
        let margin = 1.5 * s;
        let inside_band = !(off > 0.01 && off < 0.49)
            || ((x as f64) > lo - margin && (x as f64) < lo + margin)
            || ((x as f64) > hi - margin && (x as f64) < hi + margin);
        if inside_band {
            continue;
        }
        let z = p.zero_point() as i64;
        let qmax = p.qmax() as i64;
        let xv = x as f64;
        let fd_x = (staircase(xv + s, s, z, qmax) - staircase(xv - s, s, z, qmax)) / (2.0 * s);
        let eps = 1e-3;
        let fd_dir = (staircase(xv * (1.0 + eps), s * (1.0 + eps), z, qmax)
            - staircase(xv * (1.0 - eps), s * (1.0 - eps), z, qmax))
            / (2.0 * eps);
        let fd_s = (fd_dir - xv * fd_x) / s;

        let xt = TensorF::from_flat(&[1], vec![x]).unwrap();
        let ones = TensorF::from_flat(&[1], vec![1.0]).unwrap();
        let got_x = ste_backward_input(&ones, &xt, &p).unwrap().data()[0] as f64;
        let got_s = lsq_backward_scale(&ones, &xt, &p).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        assert!(rel(got_x, fd_x) < 1e-3, "input grad {got_x} vs fd {fd_x}");
        assert!(rel(got_s, fd_s) < 1e-3, "scale grad {got_s} vs fd {fd_s}");
        checked += 1;
    }
    pass(8, "STE and LSQ gradients vs finite differences, 1e3 points");
}

/// Criterion 11: the 6-sigma detector recovers exactly the planted
/// dimension set with zero false positives on Gaussian bulk, across 20
/// seeds, n <= 1e5 cells each.
#[test]
fn acceptance_11_sigma_detector() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let (b, t_len, d) = (4usize, 64usize, 96usize);
        let n = b * t_len * d;
        assert!(n <= 100_000);
        let mut data: Vec<f32> = (0..n)
            .map(|_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32
            })
            .collect();
        let planted = [11usize, 47, 90];
        for r in 0..b * t_len {
            for &j in &planted {
                data[r * d + j] *= 60.0;
            }
        }
        let tensor = TensorF::from_flat(&[b, t_len, d], data).unwrap();
        let report = detect_outliers(&tensor, 6.0, false).unwrap();
        assert_eq!(flagged_dims(&report), planted.to_vec(), "seed {seed}");
    }
    pass(11, "planted dims recovered exactly at 6 sigma, 20 seeds");
}

/// Criterion 12: byte-exact container and config round-trips, and
/// byte-identical CSVs across repeated CLI invocations.
#[test]
fn acceptance_12_roundtrips_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);

    // tensor container round-trip, with and without checksum
    let data: Vec<f32> = (0..3 * 7 * 5)
        .map(|_| rng.random_range(-1e6f32..1e6))
        .collect();
    let t = TensorF::from_flat(&[3, 7, 5], data).unwrap();
    for mode in [CrcMode::Present, CrcMode::Absent] {
        let bytes = tensor_file::encode(&t, mode);
        let (back, _) = tensor_file::decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(tensor_file::encode(&back, mode), bytes);
    }

    // config round-trip through text: parse(serialize(x)) == x and the
    // re-serialization is byte-identical
    let model = tqsim_encoder::EncoderParams::init(
        tqsim_encoder::EncoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            vocab_size: 32,
            num_classes: 2,
            pad_id: 0,
        },
        5,
    )
    .unwrap();
    let task = tqsim_encoder::TaskConfig::for_encoder(&model.config);
    let batch = task.generate(3, 2);
    let rt = tqsim_encoder::calibrate(&model, &QuantConfig::w8a8(), &[batch]).unwrap();
    let qfile = QConfigFile::from_config(&QuantConfig::w8a8()).with_runtime(&rt);
    let text = qfile.to_toml().unwrap();
    let parsed = QConfigFile::from_toml(&text).unwrap();
    assert_eq!(parsed, qfile);
    assert_eq!(parsed.to_toml().unwrap(), text);

    // CLI determinism: identical invocations produce byte-identical CSVs
    let input = dir.path().join("x.qtnsr");
    let noisy: Vec<f32> = (0..2 * 32 * 16).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    tensor_file::write_file(
        &input,
        &TensorF::from_flat(&[2, 32, 16], noisy).unwrap(),
        CrcMode::Present,
    )
    .unwrap();
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_tqsim"))
            .args(["outliers", "--sigma", "2", "--input"])
            .arg(&input)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let a = dir.path().join("a.csv");
    let bpath = dir.path().join("b.csv");
    run(&a);
    run(&bpath);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&bpath).unwrap());
    let dims_a = std::fs::read(dir.path().join("a.csv.dims.csv")).unwrap();
    let dims_b = std::fs::read(dir.path().join("b.csv.dims.csv")).unwrap();
    assert_eq!(dims_a, dims_b);
    pass(12, "container/config round-trips and CLI determinism");
}
