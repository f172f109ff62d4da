//! Equivalence of the grouped FFN pipeline and its per-tensor rewrite,
//! plus the permutation-equivariance rewrite of LayerNorm blocks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tqsim_core::math::gelu;
use tqsim_core::peg::{
    build_range_permutation, ffn_forward_fp32, peg_ffn_forward_native,
    peg_ffn_forward_per_tensor, permute_layernorm_and_linears, FfnBlock, GroupSpec,
    LayerNormParams, PegFfnQuant,
};
use tqsim_core::tensor::TensorF;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f32) -> TensorF {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    TensorF::from_flat(dims, data).unwrap()
}

fn rand_block(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> FfnBlock {
    FfnBlock {
        w1: rand_tensor(rng, &[d_ff, d], 0.4),
        b1: (0..d_ff).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
        w2: rand_tensor(rng, &[d, d_ff], 0.4),
        b2: (0..d).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
    }
}

fn mse(a: &TensorF, b: &TensorF) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn rewrite_reduces_to_plain_per_tensor_for_k1() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (d, d_ff) = (8, 16);
    let spec = GroupSpec::identity(d, 1).unwrap();
    let block = rand_block(&mut rng, d, d_ff);
    let x = rand_tensor(&mut rng, &[2, 3, d], 1.0);
    let quant = PegFfnQuant::estimate(&x, &block, &spec, 8, 8).unwrap();
    let rewritten = peg_ffn_forward_per_tensor(&x, &block, &spec, &quant).unwrap();
    let native = peg_ffn_forward_native(&x, &block, &spec, &quant).unwrap();
    assert_eq!(rewritten.data(), native.data());
}

#[test]
fn rewrite_matches_native_bit_exactly_hand_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (d, d_ff, k) = (8, 12, 2);
    let block = rand_block(&mut rng, d, d_ff);
    let x = rand_tensor(&mut rng, &[1, 4, d], 1.0);
    for spec in [
        GroupSpec::identity(d, k).unwrap(),
        build_range_permutation(&x, k).unwrap(),
    ] {
        let quant = PegFfnQuant::estimate(&x, &block, &spec, 8, 8).unwrap();
        let rewritten = peg_ffn_forward_per_tensor(&x, &block, &spec, &quant).unwrap();
        let native = peg_ffn_forward_native(&x, &block, &spec, &quant).unwrap();
        assert_eq!(rewritten.data(), native.data());
    }
}

#[test]
fn rewrite_matches_native_across_widths_and_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for &(d, k) in &[(8usize, 2usize), (64, 4), (96, 3), (96, 6)] {
        let d_ff = 2 * d;
        let block = rand_block(&mut rng, d, d_ff);
        let x = rand_tensor(&mut rng, &[1, 4, d], 1.5);
        for permuted in [false, true] {
            let spec = if permuted {
                build_range_permutation(&x, k).unwrap()
            } else {
                GroupSpec::identity(d, k).unwrap()
            };
            let quant = PegFfnQuant::estimate(&x, &block, &spec, 8, 8).unwrap();
            let rewritten = peg_ffn_forward_per_tensor(&x, &block, &spec, &quant).unwrap();
            let native = peg_ffn_forward_native(&x, &block, &spec, &quant).unwrap();
            assert_eq!(
                rewritten.data(),
                native.data(),
                "d={d} k={k} permuted={permuted}"
            );
        }
    }
}

#[test]
fn range_permutation_beats_identity_grouping_with_planted_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (d, d_ff, k) = (768, 256, 3);
    let block = rand_block(&mut rng, d, d_ff);
    let mut x = rand_tensor(&mut rng, &[1, 8, d], 1.0);
    // plant outlier dimensions scattered so identity groups all see them
    for &j in &[5usize, 300, 700] {
        for r in 0..8 {
            x.data_mut()[r * d + j] *= 60.0;
        }
    }
    let fp = ffn_forward_fp32(&x, &block).unwrap();

    let permuted = build_range_permutation(&x, k).unwrap();
    let identity = GroupSpec::identity(d, k).unwrap();
    let q_perm = PegFfnQuant::estimate(&x, &block, &permuted, 8, 8).unwrap();
    let q_ident = PegFfnQuant::estimate(&x, &block, &identity, 8, 8).unwrap();

    let out_perm = peg_ffn_forward_native(&x, &block, &permuted, &q_perm).unwrap();
    let out_ident = peg_ffn_forward_native(&x, &block, &identity, &q_ident).unwrap();
    // the rewrite agrees bit-exactly in both cases
    let rw = peg_ffn_forward_per_tensor(&x, &block, &permuted, &q_perm).unwrap();
    assert_eq!(rw.data(), out_perm.data());

    let mse_perm = mse(&out_perm, &fp);
    let mse_ident = mse(&out_ident, &fp);
    assert!(
        mse_perm < mse_ident,
        "permuted {mse_perm} vs identity {mse_ident}"
    );
}

#[test]
fn layernorm_rewrite_identity_permutation_keeps_parameters() {
    let d = 16;
    let spec = GroupSpec::identity(d, 4).unwrap();
    let ln = LayerNormParams {
        gamma: (0..d).map(|i| 1.0 + i as f32 * 0.01).collect(),
        beta: (0..d).map(|i| i as f32 * 0.1).collect(),
    };
    let consumer = TensorF::from_flat(&[8, d], vec![0.5; 8 * d]).unwrap();
    let producer = TensorF::from_flat(&[d, 8], vec![0.25; 8 * d]).unwrap();
    let (ln2, c2, p2) = permute_layernorm_and_linears(&ln, &consumer, &producer, &spec).unwrap();
    assert_eq!(ln2, ln);
    assert_eq!(c2, consumer);
    assert_eq!(p2, producer);
}

fn layernorm_rows(x: &TensorF, ln: &LayerNormParams) -> TensorF {
    let d = x.dims()[x.rank() - 1];
    let rows = x.len() / d;
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / (var + 1e-12).sqrt();
        for j in 0..d {
            out[r * d + j] = (((row[j] as f64 - mean) * rstd) * ln.gamma[j] as f64
                + ln.beta[j] as f64) as f32;
        }
    }
    TensorF::from_flat(x.dims(), out).unwrap()
}

#[test]
fn permuted_layernorm_block_matches_original_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let (d, n_in, n_out, rows) = (24usize, 10usize, 7usize, 6usize);
    for case in 0..8 {
        let ranges: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..50.0)).collect();
        let spec = GroupSpec::from_ranges(&ranges, 4).unwrap();
        let ln = LayerNormParams {
            gamma: (0..d).map(|_| rng.random_range(0.5f32..1.5)).collect(),
            beta: (0..d).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        };
        let consumer = rand_tensor(&mut rng, &[n_out, d], 1.0);
        let producer = rand_tensor(&mut rng, &[d, n_in], 1.0);
        let (ln_p, consumer_p, producer_p) =
            permute_layernorm_and_linears(&ln, &consumer, &producer, &spec).unwrap();

        let u = rand_tensor(&mut rng, &[rows, n_in], 1.0);
        // original: u -> producer -> LayerNorm -> consumer
        let x = u.matmul_nt(&producer).unwrap();
        let y = layernorm_rows(&x, &ln);
        let out = y.matmul_nt(&consumer).unwrap();
        // rewritten: permuted producer emits permuted activations directly;
        // the permuted consumer absorbs them, output space unchanged
        let xp = u.matmul_nt(&producer_p).unwrap();
        let yp = layernorm_rows(&xp, &ln_p);
        let out_p = yp.matmul_nt(&consumer_p).unwrap();

        let scale = out
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs() as f64))
            .max(1e-30);
        for (a, b) in out_p.data().iter().zip(out.data()) {
            assert!(
                ((a - b).abs() as f64) / scale < 1e-6,
                "case {case}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn gelu_pipeline_sanity_matches_direct_composition() {
    // spot-check ffn_forward_fp32 against a direct composition
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let (d, d_ff) = (6, 10);
    let block = rand_block(&mut rng, d, d_ff);
    let x = rand_tensor(&mut rng, &[1, 2, d], 1.0);
    let direct = {
        let a = x.matmul_nt(&block.w1).unwrap();
        let mut a = a.into_data();
        for (i, v) in a.iter_mut().enumerate() {
            *v += block.b1[i % d_ff];
        }
        let a = TensorF::from_flat(&[1, 2, d_ff], a).unwrap();
        let g = gelu(&a);
        let y = g.matmul_nt(&block.w2).unwrap();
        let mut y = y.into_data();
        for (i, v) in y.iter_mut().enumerate() {
            *v += block.b2[i % d];
            *v += x.data()[i];
        }
        y
    };
    let out = ffn_forward_fp32(&x, &block).unwrap();
    for (a, b) in out.data().iter().zip(direct.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}
