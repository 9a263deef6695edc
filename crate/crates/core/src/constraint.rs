//! Semi-orthogonal constraint machinery for factorized weight matrices.
//!
//! A constrained factor U (oriented so rows <= columns) is pushed toward
//! U U^T = I by minimizing f = Trace(Q Q^T) with Q = U U^T - I. The exact
//! gradient of f is 4 Q U, and the periodic constraint step applies
//! U <- U - step_scale * 4 Q U outside the loss graph. With the default
//! step_scale of 1/8 the update is a Newton-like contraction around the
//! semi-orthogonal manifold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameter;
use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

/// How the constraint participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiOrthoMode {
    /// Periodic explicit update step (default).
    Step,
    /// Additive penalty term on the training loss.
    Penalty,
}

/// Settings for constraint enforcement during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiOrthoConfig {
    /// Apply the constraint step every this many optimizer steps.
    pub interval: usize,
    /// Scale on the 4QU gradient in the constraint step.
    pub step_scale: f64,
    pub mode: SemiOrthoMode,
    /// Loss weight when `mode = penalty`.
    pub penalty_weight: f64,
}

impl Default for SemiOrthoConfig {
    fn default() -> Self {
        SemiOrthoConfig {
            interval: 4,
            step_scale: 0.125,
            mode: SemiOrthoMode::Step,
            penalty_weight: 0.1,
        }
    }
}

impl SemiOrthoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::Config("semi_ortho.interval must be >= 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return Err(Error::Config(format!(
                "semi_ortho.step_scale must be in (0, 1], got {}",
                self.step_scale
            )));
        }
        if self.penalty_weight < 0.0 {
            return Err(Error::Config("semi_ortho.penalty_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Differentiable semi-orthogonality penalty Trace(QQ^T) = ||UU^T - I||_F^2
/// for a 2-D tensor with rows <= columns.
pub fn semi_ortho_penalty(u: &Tensor) -> Result<Tensor> {
    let shape = u.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "semi_ortho_penalty expects a 2-D tensor, got {shape:?}"
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    if m > n {
        return Err(Error::Infeasible { rows: m, cols: n });
    }
    let gram = u.matmul_nt(u)?;
    let q = gram.sub(&Tensor::eye(m))?;
    Ok(q.mul(&q)?.sum())
}

/// Interpret a parameter's storage as the 2-D matrix the constraint acts on.
/// Convolution kernels [k, d_in, d_out] flatten to [k*d_in, d_out], which is
/// exactly their row-major layout.
fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [k, d_in, d_out] => Ok((k * d_in, *d_out)),
        other => Err(Error::Contract(format!(
            "constrained parameter must be 2-D or a conv kernel, got shape {other:?}"
        ))),
    }
}

/// Gram residual Q = G - I where G is the small-side Gram matrix of M.
/// For a tall matrix (rows >= cols) that is M^T M - I_c; for a wide one it
/// is M M^T - I_r. Returns (q, small_dim, tall_flag).
fn gram_residual(values: &[f64], rows: usize, cols: usize) -> (Vec<f64>, usize, bool) {
    let tall = rows >= cols;
    let s = rows.min(cols);
    let mut q = if tall {
        mm_tn(values, values, rows, cols, cols)
    } else {
        mm_nt(values, values, rows, cols, rows)
    };
    for i in 0..s {
        q[i * s + i] -= 1.0;
    }
    (q, s, tall)
}

/// Penalty value for a (possibly transposed / kernel-shaped) parameter,
/// computed outside the graph.
pub fn parameter_penalty(param: &Parameter) -> Result<f64> {
    let shape = param.tensor().shape();
    let (rows, cols) = matrix_dims(&shape)?;
    Ok(param.tensor().with_values(|v| {
        let (q, _, _) = gram_residual(v, rows, cols);
        q.iter().map(|x| x * x).sum()
    }))
}

/// One constraint step on a parameter: M <- M - scale * df/dM with
/// df/dM = 4 M Q (tall) or 4 Q M (wide).
pub fn parameter_step(param: &Parameter, step_scale: f64) -> Result<()> {
    let shape = param.tensor().shape();
    let (rows, cols) = matrix_dims(&shape)?;
    param.tensor().with_values_mut(|v| {
        let (q, s, tall) = gram_residual(v, rows, cols);
        let grad = if tall {
            mm(v, &q, rows, cols, s)
        } else {
            mm(&q, v, s, s, cols)
        };
        let factor = 4.0 * step_scale;
        for (vi, gi) in v.iter_mut().zip(&grad) {
            *vi -= factor * gi;
        }
    });
    Ok(())
}

/// Iterate the constraint step until the penalty drops below `target`
/// (used at init so constrained factors start on the manifold).
pub fn orthogonalize(param: &Parameter, step_scale: f64, target: f64, max_iters: usize) -> Result<f64> {
    let mut f = parameter_penalty(param)?;
    for _ in 0..max_iters {
        if f <= target {
            break;
        }
        parameter_step(param, step_scale)?;
        f = parameter_penalty(param)?;
    }
    Ok(f)
}

/// Differentiable penalty for a parameter in its constraint orientation,
/// for `mode = penalty` training.
pub fn parameter_penalty_graph(param: &Parameter) -> Result<Tensor> {
    let shape = param.tensor().shape();
    let (rows, cols) = matrix_dims(&shape)?;
    let tensor = param.tensor();
    // Gram over the small side, built from graph ops so gradients flow.
    let (q, s) = if rows >= cols {
        let flat = reshape_2d(tensor, rows, cols);
        (flat.matmul_tn(&flat)?, cols)
    } else {
        let flat = reshape_2d(tensor, rows, cols);
        (flat.matmul_nt(&flat)?, rows)
    };
    let q = q.sub(&Tensor::eye(s))?;
    Ok(q.mul(&q)?.sum())
}

/// View a kernel-shaped tensor as its flattened 2-D matrix. Row-major layout
/// makes this a metadata-only change, but the graph needs a node, so it is an
/// identity op with a reshaped output.
fn reshape_2d(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    if t.shape().len() == 2 {
        return t.clone();
    }
    Tensor::from_op(
        vec![rows, cols],
        t.values(),
        &[t],
        Box::new(|args| vec![args.out_grad.to_vec()]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_rows_have_zero_penalty() {
        let f = semi_ortho_penalty(&Tensor::eye(3)).unwrap();
        assert_eq!(f.values()[0], 0.0);
    }

    #[test]
    fn scaled_identity_penalty_is_nine_n() {
        for n in [2, 5] {
            let u = Tensor::eye(n).scale(2.0);
            let f = semi_ortho_penalty(&u).unwrap();
            assert!((f.values()[0] - 9.0 * n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn more_rows_than_cols_is_infeasible() {
        let u = Tensor::zeros(vec![5, 3]);
        assert!(matches!(semi_ortho_penalty(&u), Err(Error::Infeasible { rows: 5, cols: 3 })));
    }

    #[test]
    fn penalty_matches_bruteforce_elementwise_sum() {
        let u = random_matrix(4, 8, 21);
        let f = semi_ortho_penalty(&u).unwrap().values()[0];
        // Independent brute force: form UU^T - I entry by entry and square.
        let v = u.values();
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for t in 0..8 {
                    dot += v[i * 8 + t] * v[j * 8 + t];
                }
                let q = dot - if i == j { 1.0 } else { 0.0 };
                brute += q * q;
            }
        }
        assert!((f - brute).abs() <= 1e-12 * brute.max(1.0));
    }

    #[test]
    fn step_fixes_nothing_on_orthonormal_rows() {
        let p = Parameter::constrained("u", Tensor::eye(4));
        let before = p.tensor().values();
        parameter_step(&p, 0.125).unwrap();
        assert_eq!(p.tensor().values(), before);
    }

    #[test]
    fn repeated_steps_converge_monotonically() {
        let p = Parameter::constrained("u", random_matrix(8, 16, 3));
        let mut prev = parameter_penalty(&p).unwrap();
        for _ in 0..100 {
            parameter_step(&p, 0.125).unwrap();
            let f = parameter_penalty(&p).unwrap();
            assert!(f <= prev + 1e-15, "penalty rose from {prev} to {f}");
            prev = f;
        }
        assert!(prev <= 1e-6, "final penalty {prev}");
    }

    #[test]
    fn converged_factor_is_a_fixed_point() {
        let p = Parameter::constrained("u", random_matrix(6, 12, 9));
        orthogonalize(&p, 0.125, 1e-12, 500).unwrap();
        let v = p.tensor().values();
        // ||UU^T - I||_F <= 1e-3 after convergence.
        let f = parameter_penalty(&p).unwrap();
        assert!(f.sqrt() <= 1e-3);
        parameter_step(&p, 0.125).unwrap();
        let after = p.tensor().values();
        for (a, b) in v.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn closed_form_gradient_matches_finite_differences() {
        let rows = 3;
        let cols = 5;
        let u = random_matrix(rows, cols, 5);
        let v = u.values();
        // Closed form 4 Q U.
        let (q, _, _) = gram_residual(&v, rows, cols);
        // Wide matrix: gradient is 4 Q M.
        let grad = mm(&q, &v, rows, rows, cols);
        let eps = 1e-6;
        for i in 0..rows * cols {
            let mut plus = v.clone();
            plus[i] += eps;
            let mut minus = v.clone();
            minus[i] -= eps;
            let fp: f64 = {
                let (qp, _, _) = gram_residual(&plus, rows, cols);
                qp.iter().map(|x| x * x).sum()
            };
            let fm: f64 = {
                let (qm, _, _) = gram_residual(&minus, rows, cols);
                qm.iter().map(|x| x * x).sum()
            };
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = 4.0 * grad[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-9);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-6,
                "coord {i}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn penalty_invariant_under_right_orthogonal_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = random_matrix(4, 8, 17);
        let f0 = semi_ortho_penalty(&u).unwrap().values()[0];
        // Householder reflection H = I - 2 v v^T with unit v.
        let n = 8;
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j];
            }
        }
        let h = Tensor::new(vec![n, n], h).unwrap();
        let uh = u.matmul(&h).unwrap();
        let f1 = semi_ortho_penalty(&uh).unwrap().values()[0];
        assert!((f0 - f1).abs() <= 1e-10, "{f0} vs {f1}");
    }

    #[test]
    fn tall_orientation_constrains_the_small_gram() {
        // A d_model x bottleneck factor is stored tall; the constraint acts
        // on M^T M.
        let p = Parameter::constrained("ff.factor1", random_matrix(16, 4, 2));
        orthogonalize(&p, 0.125, 1e-10, 500).unwrap();
        let v = p.tensor().values();
        let gram = mm_tn(&v, &v, 16, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * 4 + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn penalty_graph_gradient_flows() {
        let p = Parameter::constrained("u", random_matrix(3, 6, 4));
        let f = parameter_penalty_graph(&p).unwrap();
        f.backward().unwrap();
        let g = p.tensor().grad().unwrap();
        assert_eq!(g.len(), 18);
        assert!(g.iter().any(|x| x.abs() > 0.0));
    }
}
