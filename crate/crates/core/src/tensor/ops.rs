//! Differentiable primitives. Each op computes its forward value eagerly and
//! records a backward closure that maps the output gradient to per-parent
//! contributions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BackwardArgs, Mode, Tensor};
use crate::error::{Error, Result};

/// Epsilon used by both normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// Padding policy for dilated 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output has the same length as the input. Odd kernels
    /// are centered; even kernels are right-aligned (a 2-tap factor reads
    /// frames t-rate and t).
    SameZero,
    /// No padding; output length shrinks by (k-1)*rate.
    Valid,
}

// Plain row-major matrix kernels shared by forward and backward paths.

pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a[m x k] * b[n x k]^T -> [m x n]
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[k x m]^T * b[k x n] -> [m x n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("{op} requires a 2-D tensor, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

impl Tensor {
    pub fn eye(n: usize) -> Tensor {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor::raw(vec![n, n], values)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Shape { op: "add", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = {
            let a = self.values_ref();
            let b = other.values_ref();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            sa,
            values,
            &[self, other],
            Box::new(|args: &BackwardArgs| {
                vec![args.out_grad.to_vec(), args.out_grad.to_vec()]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Shape { op: "sub", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = {
            let a = self.values_ref();
            let b = other.values_ref();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            sa,
            values,
            &[self, other],
            Box::new(|args: &BackwardArgs| {
                let neg: Vec<f64> = args.out_grad.iter().map(|g| -g).collect();
                vec![args.out_grad.to_vec(), neg]
            }),
        ))
    }

    /// Hadamard product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Shape { op: "mul", lhs: sa, rhs: sb });
        }
        let values: Vec<f64> = {
            let a = self.values_ref();
            let b = other.values_ref();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            sa,
            values,
            &[self, other],
            Box::new(|args: &BackwardArgs| {
                let a = args.parents[0].values_ref();
                let b = args.parents[1].values_ref();
                let da: Vec<f64> = args.out_grad.iter().zip(b.iter()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = args.out_grad.iter().zip(a.iter()).map(|(g, x)| g * x).collect();
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values: Vec<f64> = self.values_ref().iter().map(|x| c * x).collect();
        Tensor::from_op(
            self.shape(),
            values,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                vec![args.out_grad.iter().map(|g| c * g).collect()]
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.values_ref().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            &[self],
            Box::new(move |args: &BackwardArgs| vec![vec![args.out_grad[0]; n]]),
        )
    }

    /// Broadcast-add a length-d row vector to every row of a [T x d] tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (t, d) = require_2d(self, "add_row")?;
        let bshape = bias.shape();
        if bshape != [d] {
            return Err(Error::Shape { op: "add_row", lhs: vec![t, d], rhs: bshape });
        }
        let values: Vec<f64> = {
            let x = self.values_ref();
            let b = bias.values_ref();
            x.chunks(d).flat_map(|row| row.iter().zip(b.iter()).map(|(v, bv)| v + bv)).collect()
        };
        Ok(Tensor::from_op(
            vec![t, d],
            values,
            &[self, bias],
            Box::new(move |args: &BackwardArgs| {
                let mut db = vec![0.0; d];
                for row in args.out_grad.chunks(d) {
                    for (j, g) in row.iter().enumerate() {
                        db[j] += g;
                    }
                }
                vec![args.out_grad.to_vec(), db]
            }),
        ))
    }

    /// Row-major matrix product A[m x k] * B[k x n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(other, "matmul")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let values = {
            let a = self.values_ref();
            let b = other.values_ref();
            mm(&a, &b, m, k, n)
        };
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            &[self, other],
            Box::new(move |args: &BackwardArgs| {
                let a = args.parents[0].values_ref();
                let b = args.parents[1].values_ref();
                let da = mm_nt(args.out_grad, &b, m, n, k);
                let db = mm_tn(&a, args.out_grad, m, k, n);
                vec![da, db]
            }),
        ))
    }

    /// A[m x k] * B[n x k]^T.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul_nt")?;
        let (n, k2) = require_2d(other, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul_nt", lhs: vec![m, k], rhs: vec![n, k2] });
        }
        let values = {
            let a = self.values_ref();
            let b = other.values_ref();
            mm_nt(&a, &b, m, k, n)
        };
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            &[self, other],
            Box::new(move |args: &BackwardArgs| {
                let a = args.parents[0].values_ref();
                let b = args.parents[1].values_ref();
                let da = mm(args.out_grad, &b, m, n, k);
                let db = mm_tn(args.out_grad, &a, m, n, k);
                vec![da, db]
            }),
        ))
    }

    /// A[k x m]^T * B[k x n].
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = require_2d(self, "matmul_tn")?;
        let (k2, n) = require_2d(other, "matmul_tn")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul_tn", lhs: vec![k, m], rhs: vec![k2, n] });
        }
        let values = {
            let a = self.values_ref();
            let b = other.values_ref();
            mm_tn(&a, &b, k, m, n)
        };
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            &[self, other],
            Box::new(move |args: &BackwardArgs| {
                let a = args.parents[0].values_ref();
                let b = args.parents[1].values_ref();
                // dA[t][i] = sum_j B[t][j] dC[i][j]; dB = A * dC.
                let da = mm_nt(&b, args.out_grad, k, n, m);
                let db = mm(&a, args.out_grad, k, m, n);
                vec![da, db]
            }),
        ))
    }

    /// Numerically stable row-wise softmax of a [m x n] tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = require_2d(self, "softmax_rows")?;
        {
            let v = self.values_ref();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("softmax_rows: non-finite input".into()));
            }
        }
        let values: Vec<f64> = {
            let x = self.values_ref();
            let mut out = Vec::with_capacity(m * n);
            for row in x.chunks(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / z));
            }
            out
        };
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let y = args.out_values;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let base = r * n;
                    let dot: f64 = (0..n).map(|j| args.out_grad[base + j] * y[base + j]).sum();
                    for j in 0..n {
                        dx[base + j] = y[base + j] * (args.out_grad[base + j] - dot);
                    }
                }
                vec![dx]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let values: Vec<f64> = self.values_ref().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape(),
            values,
            &[self],
            Box::new(|args: &BackwardArgs| {
                let x = args.parents[0].values_ref();
                vec![args
                    .out_grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Inverted dropout: in train mode each element is zeroed independently
    /// with probability p and survivors are scaled by 1/(1-p); infer mode is
    /// the identity. p = 0 is an exact no-op and draws nothing from the RNG.
    pub fn dropout(&self, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let values: Vec<f64> =
            self.values_ref().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            self.shape(),
            values,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                vec![args.out_grad.iter().zip(mask.iter()).map(|(g, m)| g * m).collect()]
            }),
        ))
    }

    /// Dilated 1-D convolution over a [T x d_in] sequence with a
    /// [k x d_in x d_out] kernel. See [`Padding`] for alignment.
    pub fn conv1d_dilated(&self, kernel: &Tensor, rate: usize, padding: Padding) -> Result<Tensor> {
        if rate == 0 {
            return Err(Error::Config("conv1d_dilated: rate must be >= 1".into()));
        }
        let (t_in, d_in) = require_2d(self, "conv1d_dilated")?;
        let kshape = kernel.shape();
        if kshape.len() != 3 {
            return Err(Error::Contract(format!(
                "conv1d_dilated kernel must be [k x d_in x d_out], got {kshape:?}"
            )));
        }
        let (k, kd_in, d_out) = (kshape[0], kshape[1], kshape[2]);
        if kd_in != d_in {
            return Err(Error::Shape {
                op: "conv1d_dilated",
                lhs: vec![t_in, d_in],
                rhs: kshape,
            });
        }
        let span = (k - 1) * rate;
        let (t_out, offset) = match padding {
            Padding::SameZero => {
                // Centered for odd k, right-aligned for even k.
                let center = if k % 2 == 1 { k / 2 } else { k - 1 };
                (t_in, -((center * rate) as isize))
            }
            Padding::Valid => {
                if t_in <= span {
                    return Err(Error::EmptyOutput { len: t_in, span });
                }
                (t_in - span, 0)
            }
        };

        let values = {
            let x = self.values_ref();
            let kv = kernel.values_ref();
            let mut out = vec![0.0; t_out * d_out];
            for t in 0..t_out {
                for j in 0..k {
                    let src = t as isize + offset + (j * rate) as isize;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let xrow = &x[src as usize * d_in..(src as usize + 1) * d_in];
                    let orow = &mut out[t * d_out..(t + 1) * d_out];
                    for (c, &xv) in xrow.iter().enumerate() {
                        let krow = &kv[(j * d_in + c) * d_out..(j * d_in + c + 1) * d_out];
                        for o in 0..d_out {
                            orow[o] += xv * krow[o];
                        }
                    }
                }
            }
            out
        };

        Ok(Tensor::from_op(
            vec![t_out, d_out],
            values,
            &[self, kernel],
            Box::new(move |args: &BackwardArgs| {
                let x = args.parents[0].values_ref();
                let kv = args.parents[1].values_ref();
                let mut dx = vec![0.0; t_in * d_in];
                let mut dk = vec![0.0; k * d_in * d_out];
                for t in 0..t_out {
                    let grow = &args.out_grad[t * d_out..(t + 1) * d_out];
                    for j in 0..k {
                        let src = t as isize + offset + (j * rate) as isize;
                        if src < 0 || src >= t_in as isize {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..d_in {
                            let xv = x[s * d_in + c];
                            let kbase = (j * d_in + c) * d_out;
                            let mut acc = 0.0;
                            for o in 0..d_out {
                                acc += grow[o] * kv[kbase + o];
                                dk[kbase + o] += xv * grow[o];
                            }
                            dx[s * d_in + c] += acc;
                        }
                    }
                }
                vec![dx, dk]
            }),
        ))
    }

    /// Per-row normalization to zero mean and unit variance (epsilon
    /// stabilized), then elementwise scale and shift.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (t, d) = require_2d(self, "layer_norm")?;
        if d < 2 {
            return Err(Error::Contract(format!("layer_norm requires d >= 2, got d = {d}")));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape { op: "layer_norm", lhs: vec![t, d], rhs: gain.shape() });
        }
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let values: Vec<f64> = {
            let x = self.values_ref();
            let g = gain.values_ref();
            let b = bias.values_ref();
            let mut out = vec![0.0; t * d];
            for r in 0..t {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![t, d],
            values,
            &[self, gain, bias],
            Box::new(move |args: &BackwardArgs| {
                let g = args.parents[1].values_ref();
                let mut dx = vec![0.0; t * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..t {
                    let base = r * d;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dy = args.out_grad[base + j];
                        let dxh = dy * g[j];
                        m1 += dxh;
                        m2 += dxh * xhat[base + j];
                        dg[j] += dy * xhat[base + j];
                        db[j] += dy;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = args.out_grad[base + j] * g[j];
                        dx[base + j] = inv_std[r] * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// Train-mode batch norm over the time axis of a [T x d] tensor. Returns
    /// the normalized output plus the batch mean/variance so the caller can
    /// fold them into running statistics.
    pub fn batch_norm_train(
        &self,
        gain: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (t, d) = require_2d(self, "batch_norm")?;
        if t < 2 {
            return Err(Error::Contract(format!(
                "batch_norm train mode requires T >= 2, got T = {t}"
            )));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape { op: "batch_norm", lhs: vec![t, d], rhs: gain.shape() });
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; d];
        let values: Vec<f64> = {
            let x = self.values_ref();
            let g = gain.values_ref();
            let b = bias.values_ref();
            for r in 0..t {
                for j in 0..d {
                    mean[j] += x[r * d + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            for r in 0..t {
                for j in 0..d {
                    let c = x[r * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= t as f64);
            for j in 0..d {
                inv_std[j] = 1.0 / (var[j] + NORM_EPS).sqrt();
            }
            let mut out = vec![0.0; t * d];
            for r in 0..t {
                for j in 0..d {
                    let h = (x[r * d + j] - mean[j]) * inv_std[j];
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
            out
        };
        let out = Tensor::from_op(
            vec![t, d],
            values,
            &[self, gain, bias],
            Box::new(move |args: &BackwardArgs| {
                let g = args.parents[1].values_ref();
                let mut dx = vec![0.0; t * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for j in 0..d {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for r in 0..t {
                        let dy = args.out_grad[r * d + j];
                        let dxh = dy * g[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * d + j];
                        dg[j] += dy * xhat[r * d + j];
                        db[j] += dy;
                    }
                    m1 /= t as f64;
                    m2 /= t as f64;
                    for r in 0..t {
                        let dxh = args.out_grad[r * d + j] * g[j];
                        dx[r * d + j] = inv_std[j] * (dxh - m1 - xhat[r * d + j] * m2);
                    }
                }
                vec![dx, dg, db]
            }),
        );
        Ok((out, mean, var))
    }

    /// Infer-mode batch norm using stored statistics.
    pub fn batch_norm_infer(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Tensor> {
        let (t, d) = require_2d(self, "batch_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] || mean.len() != d || var.len() != d {
            return Err(Error::Shape { op: "batch_norm", lhs: vec![t, d], rhs: gain.shape() });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; t * d];
        let values: Vec<f64> = {
            let x = self.values_ref();
            let g = gain.values_ref();
            let b = bias.values_ref();
            let mut out = vec![0.0; t * d];
            for r in 0..t {
                for j in 0..d {
                    let h = (x[r * d + j] - mean[j]) * inv_std[j];
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![t, d],
            values,
            &[self, gain, bias],
            Box::new(move |args: &BackwardArgs| {
                let g = args.parents[1].values_ref();
                let mut dx = vec![0.0; t * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..t {
                    for j in 0..d {
                        let dy = args.out_grad[r * d + j];
                        dx[r * d + j] = dy * g[j] * inv_std[j];
                        dg[j] += dy * xhat[r * d + j];
                        db[j] += dy;
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// Sum over frames of the per-frame softmax cross-entropy against integer
    /// labels. Divide by the frame count outside if a mean is wanted.
    pub fn cross_entropy_sum(&self, labels: &[usize]) -> Result<Tensor> {
        let (t, classes) = require_2d(self, "cross_entropy")?;
        if labels.len() != t {
            return Err(Error::Contract(format!(
                "cross_entropy: {t} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; t * classes];
        let total: f64 = {
            let x = self.values_ref();
            let mut total = 0.0;
            for (r, row) in x.chunks(classes).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..classes {
                    let e = (row[j] - max).exp();
                    probs[r * classes + j] = e;
                    z += e;
                }
                for j in 0..classes {
                    probs[r * classes + j] /= z;
                }
                total += max + z.ln() - row[labels[r]];
            }
            total
        };
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let upstream = args.out_grad[0];
                let mut dx = vec![0.0; t * classes];
                for r in 0..t {
                    for j in 0..classes {
                        dx[r * classes + j] = probs[r * classes + j] * upstream;
                    }
                    dx[r * classes + labels[r]] -= upstream;
                }
                vec![dx]
            }),
        ))
    }

    /// Time-restricted scaled dot-product attention with a strided context.
    ///
    /// For query frame t the attended positions are t + j*stride with
    /// j in [-left, right], clipped to [0, T). Scores are q.k / sqrt(d_k),
    /// softmaxed over the surviving positions, and used to mix value rows.
    /// One output row per input row regardless of stride.
    pub fn time_restricted_attention(
        &self,
        key: &Tensor,
        value: &Tensor,
        stride: usize,
        left: usize,
        right: usize,
    ) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Config("attention stride must be >= 1".into()));
        }
        let (t, d_q) = require_2d(self, "attention")?;
        let (t_k, d_k) = require_2d(key, "attention")?;
        let (t_v, d_v) = require_2d(value, "attention")?;
        if t != t_k || t != t_v {
            return Err(Error::Shape { op: "attention", lhs: vec![t, d_q], rhs: vec![t_k, d_k] });
        }
        if d_q != d_k {
            return Err(Error::Shape { op: "attention", lhs: vec![t, d_q], rhs: vec![t_k, d_k] });
        }

        let (contexts, weights) = {
            let q = self.values_ref();
            let k = key.values_ref();
            compute_restricted_weights(&q, &k, t, d_k, stride, left, right)
        };
        let values = {
            let v = value.values_ref();
            let mut out = vec![0.0; t * d_v];
            for qt in 0..t {
                let orow = &mut out[qt * d_v..(qt + 1) * d_v];
                for (w, &p) in weights[qt].iter().zip(&contexts[qt]) {
                    let vrow = &v[p * d_v..(p + 1) * d_v];
                    for j in 0..d_v {
                        orow[j] += w * vrow[j];
                    }
                }
            }
            out
        };
        let scale = 1.0 / (d_k as f64).sqrt();

        Ok(Tensor::from_op(
            vec![t, d_v],
            values,
            &[self, key, value],
            Box::new(move |args: &BackwardArgs| {
                let q = args.parents[0].values_ref();
                let k = args.parents[1].values_ref();
                let v = args.parents[2].values_ref();
                let mut dq = vec![0.0; t * d_q];
                let mut dk = vec![0.0; t * d_k];
                let mut dv = vec![0.0; t * d_v];
                for qt in 0..t {
                    let grow = &args.out_grad[qt * d_v..(qt + 1) * d_v];
                    let positions = &contexts[qt];
                    let w = &weights[qt];
                    // d score per context entry, then softmax Jacobian.
                    let dscore: Vec<f64> = positions
                        .iter()
                        .map(|&p| {
                            let vrow = &v[p * d_v..(p + 1) * d_v];
                            grow.iter().zip(vrow).map(|(g, vv)| g * vv).sum()
                        })
                        .collect();
                    let mix: f64 = w.iter().zip(&dscore).map(|(wi, si)| wi * si).sum();
                    let qrow = &q[qt * d_q..(qt + 1) * d_q];
                    for (idx, &p) in positions.iter().enumerate() {
                        let dlogit = w[idx] * (dscore[idx] - mix) * scale;
                        let krow = &k[p * d_k..(p + 1) * d_k];
                        for j in 0..d_q {
                            dq[qt * d_q + j] += dlogit * krow[j];
                            dk[p * d_k + j] += dlogit * qrow[j];
                        }
                        for j in 0..d_v {
                            dv[p * d_v + j] += w[idx] * grow[j];
                        }
                    }
                }
                vec![dq, dk, dv]
            }),
        ))
    }

    /// Contiguous row slice of a 2-D tensor. Gradients scatter back into the
    /// sliced rows of the parent.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let values = self.values_ref()[start * cols..(start + len) * cols].to_vec();
        Ok(Tensor::from_op(
            vec![len, cols],
            values,
            &[self],
            Box::new(move |args: &BackwardArgs| {
                let mut dx = vec![0.0; rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(args.out_grad);
                vec![dx]
            }),
        ))
    }

    /// Concatenate 2-D tensors along the feature axis. All parts must share
    /// the same number of rows.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols: no tensors".into()));
        }
        let (t, _) = require_2d(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (tp, dp) = require_2d(p, "concat_cols")?;
            if tp != t {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; t * total];
        {
            let mut col = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pv = p.values_ref();
                for r in 0..t {
                    values[r * total + col..r * total + col + w]
                        .copy_from_slice(&pv[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        let parent_refs: Vec<&Tensor> = parts.iter().collect();
        let widths_for_bw = widths.clone();
        Ok(Tensor::from_op(
            vec![t, total],
            values,
            &parent_refs,
            Box::new(move |args: &BackwardArgs| {
                let mut grads = Vec::with_capacity(widths_for_bw.len());
                let mut col = 0;
                for &w in &widths_for_bw {
                    let mut g = vec![0.0; t * w];
                    for r in 0..t {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&args.out_grad[r * total + col..r * total + col + w]);
                    }
                    grads.push(g);
                    col += w;
                }
                grads
            }),
        ))
    }
}

/// Attended positions for one query under the strided, clipped context rule.
pub fn context_positions(t: usize, len: usize, stride: usize, left: usize, right: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(left + right + 1);
    for j in -(left as isize)..=(right as isize) {
        let p = t as isize + j * stride as isize;
        if p >= 0 && (p as usize) < len {
            out.push(p as usize);
        }
    }
    out
}

/// Per-query context positions and softmaxed weights, shared by the fused op
/// and the introspection helper below.
fn compute_restricted_weights(
    q: &[f64],
    k: &[f64],
    t: usize,
    d_k: usize,
    stride: usize,
    left: usize,
    right: usize,
) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut contexts = Vec::with_capacity(t);
    let mut weights = Vec::with_capacity(t);
    for qt in 0..t {
        let positions = context_positions(qt, t, stride, left, right);
        let qrow = &q[qt * d_k..(qt + 1) * d_k];
        let mut logits: Vec<f64> = positions
            .iter()
            .map(|&p| {
                let krow = &k[p * d_k..(p + 1) * d_k];
                qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
        contexts.push(positions);
        weights.push(logits);
    }
    (contexts, weights)
}

/// The (positions, weights) the attention op assigns each query. Exposed for
/// inspection; weights per query sum to 1.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    stride: usize,
    left: usize,
    right: usize,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 2 || ks != qs {
        return Err(Error::Shape { op: "attention_weights", lhs: qs, rhs: ks });
    }
    let (t, d_k) = (qs[0], qs[1]);
    let (contexts, weights) = {
        let qv = q.values_ref();
        let kv = k.values_ref();
        compute_restricted_weights(&qv, &kv, t, d_k, stride, left, right)
    };
    Ok(contexts.into_iter().zip(weights).collect())
}
