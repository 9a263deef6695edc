//! Brute-force reference for strided time-restricted attention: materialize
//! the full T x T score matrix, mask positions outside the context with
//! -inf, softmax whole rows, and mix values by dense matrix product. This is
//! structurally unlike the fused op, which never forms a T x T matrix.

use multistream::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d_k: usize,
    d_v: usize,
    stride: usize,
    left: usize,
    right: usize,
) -> Vec<f64> {
    let scale = 1.0 / (d_k as f64).sqrt();
    // Mask: position p is attendable from query t iff p = t + j*stride for
    // some j in [-left, right], materialized pair by pair.
    let mut mask = vec![false; t * t];
    for qt in 0..t {
        for j in -(left as i64)..=(right as i64) {
            let p = qt as i64 + j * stride as i64;
            if p >= 0 && (p as usize) < t {
                mask[qt * t + p as usize] = true;
            }
        }
    }
    let mut scores = vec![f64::NEG_INFINITY; t * t];
    for qt in 0..t {
        for p in 0..t {
            if mask[qt * t + p] {
                let mut dot = 0.0;
                for c in 0..d_k {
                    dot += q[qt * d_k + c] * k[p * d_k + c];
                }
                scores[qt * t + p] = dot * scale;
            }
        }
    }
    // Row softmax over the masked scores.
    let mut weights = vec![0.0; t * t];
    for qt in 0..t {
        let row = &scores[qt * t..(qt + 1) * t];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in 0..t {
            if mask[qt * t + p] {
                let e = (row[p] - max).exp();
                weights[qt * t + p] = e;
                z += e;
            }
        }
        for p in 0..t {
            weights[qt * t + p] /= z;
        }
    }
    // Dense weights * V.
    let mut out = vec![0.0; t * d_v];
    for qt in 0..t {
        for p in 0..t {
            let w = weights[qt * t + p];
            if w != 0.0 {
                for c in 0..d_v {
                    out[qt * d_v + c] += w * v[p * d_v + c];
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fused_attention_matches_bruteforce_on_twenty_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..20 {
        let t = rng.random_range(1..=16);
        let d_k = rng.random_range(1..=6);
        let d_v = rng.random_range(1..=6);
        let stride = rng.random_range(1..=3);
        let left = rng.random_range(0..=3);
        let right = rng.random_range(0..=3);
        let qv: Vec<f64> = (0..t * d_k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kv: Vec<f64> = (0..t * d_k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vv: Vec<f64> = (0..t * d_v).map(|_| rng.random_range(-2.0..2.0)).collect();

        let q = Tensor::new(vec![t, d_k], qv.clone()).unwrap();
        let k = Tensor::new(vec![t, d_k], kv.clone()).unwrap();
        let v = Tensor::new(vec![t, d_v], vv.clone()).unwrap();
        let fused = q.time_restricted_attention(&k, &v, stride, left, right).unwrap();
        let reference = brute_force_attention(&qv, &kv, &vv, t, d_k, d_v, stride, left, right);

        let diff = max_abs_diff(&fused.values(), &reference);
        assert!(
            diff <= 1e-12,
            "case {case} (T={t}, stride={stride}, L={left}, R={right}): max diff {diff}"
        );
    }
}

#[test]
fn stride_one_equals_plain_time_restricted_attention() {
    // With stride 1 the strided context is the plain [-L, R] window; the
    // brute-force reference at stride 1 IS plain time-restricted attention.
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..10 {
        let t = rng.random_range(2..=14);
        let d = rng.random_range(1..=5);
        let left = rng.random_range(0..=4);
        let right = rng.random_range(0..=4);
        let qv: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = Tensor::new(vec![t, d], qv.clone()).unwrap();
        let k = Tensor::new(vec![t, d], kv.clone()).unwrap();
        let v = Tensor::new(vec![t, d], vv.clone()).unwrap();
        let fused = q.time_restricted_attention(&k, &v, 1, left, right).unwrap();
        let plain = brute_force_attention(&qv, &kv, &vv, t, d, d, 1, left, right);
        assert!(max_abs_diff(&fused.values(), &plain) <= 1e-12);
    }
}

#[test]
fn scale_is_applied_exactly_once() {
    // The fused scores use 1/sqrt(d_k); the reference applies that constant
    // independently, so any double/missing scaling breaks this equality.
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for d_k in [1usize, 4, 9, 16] {
        let t = 6;
        let qv: Vec<f64> = (0..t * d_k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let kv: Vec<f64> = (0..t * d_k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vv: Vec<f64> = (0..t * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q = Tensor::new(vec![t, d_k], qv.clone()).unwrap();
        let k = Tensor::new(vec![t, d_k], kv.clone()).unwrap();
        let v = Tensor::new(vec![t, 2], vv.clone()).unwrap();
        let fused = q.time_restricted_attention(&k, &v, 1, 2, 2).unwrap();
        let reference = brute_force_attention(&qv, &kv, &vv, t, d_k, 2, 1, 2, 2);
        assert!(max_abs_diff(&fused.values(), &reference) <= 1e-12, "d_k = {d_k}");
    }
}
