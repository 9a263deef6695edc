//! The three per-stream building blocks: factorized dilated convolution,
//! time-restricted multi-head self-attention, and the feed-forward layer,
//! each wrapped with its residual connection and normalization.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::constraint::orthogonalize;
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Parameter};
use crate::tensor::{Mode, Padding, Tensor};

/// Per-forward context: evaluation mode plus the dropout RNG (absent in
/// infer mode, where dropout is the identity).
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx { mode: Mode::Train, rng: Some(rng) }
    }

    pub fn infer() -> Self {
        ForwardCtx { mode: Mode::Infer, rng: None }
    }

    pub(crate) fn apply_dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if self.mode == Mode::Infer || p == 0.0 {
            return Ok(x.clone());
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("train-mode forward needs a dropout RNG".into()))?;
        x.dropout(p, Mode::Train, rng)
    }
}

/// Layer-norm gain/bias pair.
#[derive(Clone)]
pub struct LayerNormParams {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNormParams {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: Parameter::new(
                format!("{prefix}.gain"),
                Tensor::new(vec![d], vec![1.0; d]).expect("d > 0"),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gain.tensor(), self.bias.tensor())
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// Running batch statistics. `steps` counts train-mode updates; infer mode
/// before the first update is an error.
#[derive(Debug, Clone, Default)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub steps: u64,
}

/// Batch normalization over the time axis with learnable affine and running
/// statistics updated by exponential moving average.
pub struct BatchNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub momentum: f64,
    name: String,
    state: RefCell<BnState>,
}

impl BatchNorm {
    pub fn new(prefix: &str, d: usize, momentum: f64) -> Self {
        BatchNorm {
            gain: Parameter::new(
                format!("{prefix}.gain"),
                Tensor::new(vec![d], vec![1.0; d]).expect("d > 0"),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(vec![d])),
            momentum,
            name: prefix.to_string(),
            state: RefCell::new(BnState { mean: vec![0.0; d], var: vec![0.0; d], steps: 0 }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&self.gain.tensor(), &self.bias.tensor())?;
                let mut state = self.state.borrow_mut();
                if state.steps == 0 {
                    state.mean = mean;
                    state.var = var;
                } else {
                    let m = self.momentum;
                    for (r, b) in state.mean.iter_mut().zip(&mean) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in state.var.iter_mut().zip(&var) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                state.steps += 1;
                Ok(y)
            }
            Mode::Infer => {
                let state = self.state.borrow();
                if state.steps == 0 {
                    return Err(Error::UninitializedStats);
                }
                x.batch_norm_infer(&self.gain.tensor(), &self.bias.tensor(), &state.mean, &state.var)
            }
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.gain.clone(), self.bias.clone()]
    }

    pub fn state(&self) -> BnState {
        self.state.borrow().clone()
    }

    pub fn restore_state(&self, state: BnState) {
        *self.state.borrow_mut() = state;
    }
}

/// Factorized dilated 1-D convolution layer (Conv-F): two 2-tap factors
/// through a bottleneck, then ReLU, batch norm, dropout, and a scaled skip
/// connection. The first factor is semi-orthogonal constrained.
pub struct ConvFLayer {
    pub factor1: Parameter,
    pub factor2: Parameter,
    pub bn: BatchNorm,
    pub rate: usize,
    pub dropout_p: f64,
    pub skip_scale: f64,
}

impl ConvFLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        d_model: usize,
        bottleneck: usize,
        rate: usize,
        dropout_p: f64,
        skip_scale: f64,
        bn_momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let factor1 = Parameter::constrained(
            format!("{prefix}.factor1"),
            glorot_uniform(vec![2, d_model, bottleneck], rng),
        );
        orthogonalize(&factor1, 0.125, 1e-10, 100)?;
        let factor2 = Parameter::new(
            format!("{prefix}.factor2"),
            glorot_uniform(vec![2, bottleneck, d_model], rng),
        );
        Ok(ConvFLayer {
            factor1,
            factor2,
            bn: BatchNorm::new(&format!("{prefix}.bn"), d_model, bn_momentum),
            rate,
            dropout_p,
            skip_scale,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = x.conv1d_dilated(&self.factor1.tensor(), self.rate, Padding::SameZero)?;
        let h = h.conv1d_dilated(&self.factor2.tensor(), self.rate, Padding::SameZero)?;
        let h = h.relu();
        let h = self.bn.forward(&h, ctx.mode)?;
        let h = ctx.apply_dropout(&h, self.dropout_p)?;
        x.scale(self.skip_scale).add(&h)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.factor1.clone(), self.factor2.clone()];
        out.extend(self.bn.parameters());
        out
    }
}

struct AttentionHead {
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
}

/// Multi-head self-attention over a strided, clipped time context, with the
/// residual layer norm of the encoder mid-layer.
pub struct AttentionLayer {
    heads: Vec<AttentionHead>,
    pub wo: Parameter,
    pub ln: LayerNormParams,
    pub stride: usize,
    pub left: usize,
    pub right: usize,
    d_v: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        d_model: usize,
        d_q: usize,
        d_k: usize,
        d_v: usize,
        n_heads: usize,
        stride: usize,
        left: usize,
        right: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if d_q != d_k {
            return Err(Error::Config(format!(
                "query dim {d_q} must equal key dim {d_k} for dot-product scores"
            )));
        }
        let heads = (0..n_heads)
            .map(|i| AttentionHead {
                wq: Parameter::new(format!("{prefix}.head{i}.wq"), glorot_uniform(vec![d_model, d_q], rng)),
                wk: Parameter::new(format!("{prefix}.head{i}.wk"), glorot_uniform(vec![d_model, d_k], rng)),
                wv: Parameter::new(format!("{prefix}.head{i}.wv"), glorot_uniform(vec![d_model, d_v], rng)),
            })
            .collect();
        let wo = Parameter::new(
            format!("{prefix}.wo"),
            glorot_uniform(vec![n_heads * d_v, d_model], rng),
        );
        Ok(AttentionLayer {
            heads,
            wo,
            ln: LayerNormParams::new(&format!("{prefix}.ln"), d_model),
            stride,
            left,
            right,
            d_v,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Per-head attention outputs before the output projection.
    pub fn head_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.heads
            .iter()
            .map(|h| {
                let q = x.matmul(&h.wq.tensor())?;
                let k = x.matmul(&h.wk.tensor())?;
                let v = x.matmul(&h.wv.tensor())?;
                q.time_restricted_attention(&k, &v, self.stride, self.left, self.right)
            })
            .collect()
    }

    /// MidLayer = LayerNorm(MultiHeadProj + x). The projection is computed
    /// as a sum of per-head partial products against row blocks of W^O, which
    /// is algebraically the concat-then-project form.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let head_outs = self.head_outputs(x)?;
        let mut proj: Option<Tensor> = None;
        for (i, h) in head_outs.iter().enumerate() {
            let block = self.wo.tensor().slice_rows(i * self.d_v, self.d_v)?;
            let partial = h.matmul(&block)?;
            proj = Some(match proj {
                None => partial,
                Some(acc) => acc.add(&partial)?,
            });
        }
        let proj = proj.expect("n_heads >= 1");
        self.ln.apply(&proj.add(x)?)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(h.wq.clone());
            out.push(h.wk.clone());
            out.push(h.wv.clone());
        }
        out.push(self.wo.clone());
        out.extend(self.ln.parameters());
        out
    }
}

/// Feed-forward stage of a stream encoder: either the factorized bottleneck
/// form (bias-free, first factor constrained) or a plain two-matrix network
/// with ReLU and biases. Both end with Encoder = LayerNorm(ff(x) + x).
pub enum FeedForward {
    Factorized {
        factor1: Parameter,
        factor2: Parameter,
        ln: LayerNormParams,
    },
    Plain {
        w1: Parameter,
        b1: Parameter,
        w2: Parameter,
        b2: Parameter,
        ln: LayerNormParams,
    },
}

impl FeedForward {
    pub fn init_factorized(
        prefix: &str,
        d_model: usize,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let factor1 = Parameter::constrained(
            format!("{prefix}.factor1"),
            glorot_uniform(vec![d_model, bottleneck], rng),
        );
        orthogonalize(&factor1, 0.125, 1e-10, 100)?;
        let factor2 = Parameter::new(
            format!("{prefix}.factor2"),
            glorot_uniform(vec![bottleneck, d_model], rng),
        );
        Ok(FeedForward::Factorized {
            factor1,
            factor2,
            ln: LayerNormParams::new(&format!("{prefix}.ln"), d_model),
        })
    }

    pub fn init_plain(prefix: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward::Plain {
            w1: Parameter::new(format!("{prefix}.w1"), glorot_uniform(vec![d_model, d_ff], rng)),
            b1: Parameter::new(format!("{prefix}.b1"), Tensor::zeros(vec![d_ff])),
            w2: Parameter::new(format!("{prefix}.w2"), glorot_uniform(vec![d_ff, d_model], rng)),
            b2: Parameter::new(format!("{prefix}.b2"), Tensor::zeros(vec![d_model])),
            ln: LayerNormParams::new(&format!("{prefix}.ln"), d_model),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeedForward::Factorized { factor1, factor2, ln } => {
                let h = x.matmul(&factor1.tensor())?.matmul(&factor2.tensor())?;
                ln.apply(&h.add(x)?)
            }
            FeedForward::Plain { w1, b1, w2, b2, ln } => {
                let h = x.matmul(&w1.tensor())?.add_row(&b1.tensor())?.relu();
                let h = h.matmul(&w2.tensor())?.add_row(&b2.tensor())?;
                ln.apply(&h.add(x)?)
            }
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        match self {
            FeedForward::Factorized { factor1, factor2, ln } => {
                let mut out = vec![factor1.clone(), factor2.clone()];
                out.extend(ln.parameters());
                out
            }
            FeedForward::Plain { w1, b1, w2, b2, ln } => {
                let mut out = vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()];
                out.extend(ln.parameters());
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::attention_weights;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_f_zero_factors_is_scaled_skip() {
        let mut r = rng(1);
        let layer = ConvFLayer::init("conv", 4, 2, 1, 0.0, 0.7, 0.1, &mut r).unwrap();
        layer.factor1.tensor().with_values_mut(|v| v.fill(0.0));
        layer.factor2.tensor().with_values_mut(|v| v.fill(0.0));
        let x = random_input(5, 4, 2);
        let mut train_rng = rng(3);
        let mut ctx = ForwardCtx::train(&mut train_rng);
        let y = layer.forward(&x, &mut ctx).unwrap();
        let want: Vec<f64> = x.values().iter().map(|v| 0.7 * v).collect();
        assert_eq!(y.values(), want);
    }

    #[test]
    fn conv_f_preserves_length_for_any_rate() {
        for rate in [1, 2, 3, 7] {
            let mut r = rng(4);
            let layer = ConvFLayer::init("conv", 6, 3, rate, 0.0, 1.0, 0.1, &mut r).unwrap();
            let x = random_input(9, 6, 5);
            let mut train_rng = rng(6);
            let mut ctx = ForwardCtx::train(&mut train_rng);
            let y = layer.forward(&x, &mut ctx).unwrap();
            assert_eq!(y.shape(), vec![9, 6]);
        }
    }

    #[test]
    fn stacked_two_tap_factors_have_three_frame_receptive_field() {
        // Impulse at frame 8; frames seeing it through the two 2-tap convs
        // (taps at t-rate and t) are exactly {8, 8+r, 8+2r}: Fig.-2 geometry.
        for rate in [1, 3] {
            let d = 1;
            let f1 = Tensor::new(vec![2, d, d], vec![1.0, 1.0]).unwrap();
            let f2 = Tensor::new(vec![2, d, d], vec![1.0, 1.0]).unwrap();
            let mut xv = vec![0.0; 20];
            xv[8] = 1.0;
            let x = Tensor::new(vec![20, d], xv).unwrap();
            let y = x
                .conv1d_dilated(&f1, rate, Padding::SameZero)
                .unwrap()
                .conv1d_dilated(&f2, rate, Padding::SameZero)
                .unwrap();
            let yv = y.values();
            let expected: Vec<usize> = vec![8, 8 + rate, 8 + 2 * rate];
            for (t, v) in yv.iter().enumerate() {
                if expected.contains(&t) {
                    assert!(*v > 0.0, "rate {rate}: frame {t} should be hit");
                } else {
                    assert_eq!(*v, 0.0, "rate {rate}: frame {t} should be untouched");
                }
            }
        }
    }

    #[test]
    fn attention_layer_zero_query_heads_average_context_values() {
        let mut r = rng(7);
        let layer = AttentionLayer::init("attn", 4, 3, 3, 2, 1, 1, 2, 2, &mut r).unwrap();
        layer.heads[0].wq.tensor().with_values_mut(|v| v.fill(0.0));
        let x = random_input(6, 4, 8);
        let head = &layer.head_outputs(&x).unwrap()[0];
        let v = x.matmul(&layer.heads[0].wv.tensor()).unwrap();
        let vv = v.values();
        let hv = head.values();
        for t in 0..6 {
            let ctx = crate::tensor::context_positions(t, 6, 1, 2, 2);
            for j in 0..2 {
                let mean: f64 = ctx.iter().map(|&p| vv[p * 2 + j]).sum::<f64>() / ctx.len() as f64;
                assert!((hv[t * 2 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let q = random_input(9, 3, 10);
        let k = random_input(9, 3, 11);
        for (stride, l, rr) in [(1, 2, 2), (2, 3, 1), (3, 15, 15)] {
            for (positions, weights) in attention_weights(&q, &k, stride, l, rr).unwrap() {
                assert!(!positions.is_empty());
                let s: f64 = weights.iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn head_swap_with_consistent_wo_blocks_is_exact() {
        // Dyadic weights and a self-only context make every intermediate
        // exactly representable, so the two-head swap must be bit-identical.
        let d_model = 4;
        let d_v = 2;
        let mut r = rng(12);
        let mut dyadic = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|_| (r.random_range(-8..8i32) as f64) / 8.0).collect(),
            )
            .unwrap()
        };
        let layer = AttentionLayer {
            heads: vec![
                AttentionHead {
                    wq: Parameter::new("h0.wq", dyadic(vec![d_model, 2])),
                    wk: Parameter::new("h0.wk", dyadic(vec![d_model, 2])),
                    wv: Parameter::new("h0.wv", dyadic(vec![d_model, d_v])),
                },
                AttentionHead {
                    wq: Parameter::new("h1.wq", dyadic(vec![d_model, 2])),
                    wk: Parameter::new("h1.wk", dyadic(vec![d_model, 2])),
                    wv: Parameter::new("h1.wv", dyadic(vec![d_model, d_v])),
                },
            ],
            wo: Parameter::new("wo", dyadic(vec![2 * d_v, d_model])),
            ln: LayerNormParams::new("ln", d_model),
            stride: 1,
            left: 0,
            right: 0,
            d_v,
        };
        let x = dyadic(vec![5, d_model]);
        let base = layer.forward(&x).unwrap().values();

        // Swap head order and the matching W^O row blocks.
        let wo = layer.wo.tensor().values();
        let mut swapped = wo[d_v * d_model..].to_vec();
        swapped.extend_from_slice(&wo[..d_v * d_model]);
        let permuted = AttentionLayer {
            heads: vec![
                AttentionHead {
                    wq: layer.heads[1].wq.clone(),
                    wk: layer.heads[1].wk.clone(),
                    wv: layer.heads[1].wv.clone(),
                },
                AttentionHead {
                    wq: layer.heads[0].wq.clone(),
                    wk: layer.heads[0].wk.clone(),
                    wv: layer.heads[0].wv.clone(),
                },
            ],
            wo: Parameter::new("wo", Tensor::new(vec![2 * d_v, d_model], swapped).unwrap()),
            ln: layer.ln.clone(),
            stride: 1,
            left: 0,
            right: 0,
            d_v,
        };
        assert_eq!(permuted.forward(&x).unwrap().values(), base);
    }

    #[test]
    fn ff_zero_factors_reduce_to_layer_norm() {
        let mut r = rng(13);
        let ff = FeedForward::init_factorized("ff", 4, 2, &mut r).unwrap();
        match &ff {
            FeedForward::Factorized { factor1, factor2, ln } => {
                factor1.tensor().with_values_mut(|v| v.fill(0.0));
                factor2.tensor().with_values_mut(|v| v.fill(0.0));
                let x = random_input(3, 4, 14);
                let want = ln.apply(&x).unwrap().values();
                assert_eq!(ff.forward(&x).unwrap().values(), want);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn ff_negative_identity_product_yields_bias_rows() {
        // factor1 * factor2 = -I cancels the residual: Encoder = ln(0) = bias.
        let d = 4;
        let f1 = Tensor::new(vec![d, d], Tensor::eye(d).values()).unwrap();
        let f2 = Tensor::new(vec![d, d], Tensor::eye(d).scale(-1.0).values()).unwrap();
        let ln = LayerNormParams::new("ln", d);
        ln.bias.tensor().with_values_mut(|v| {
            for (i, b) in v.iter_mut().enumerate() {
                *b = i as f64;
            }
        });
        let ff = FeedForward::Factorized {
            factor1: Parameter::new("f1", f1),
            factor2: Parameter::new("f2", f2),
            ln,
        };
        let x = random_input(3, d, 15);
        let y = ff.forward(&x).unwrap().values();
        for row in y.chunks(d) {
            for (i, v) in row.iter().enumerate() {
                assert!((v - i as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_momentum_one_tracks_batch_stats() {
        let bn = BatchNorm::new("bn", 3, 1.0);
        let x1 = random_input(8, 3, 16);
        bn.forward(&x1, Mode::Train).unwrap();
        let x2 = random_input(8, 3, 17);
        bn.forward(&x2, Mode::Train).unwrap();
        let state = bn.state();
        let v = x2.values();
        for j in 0..3 {
            let col: Vec<f64> = (0..8).map(|r| v[r * 3 + j]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / 8.0;
            assert!((state.mean[j] - mean).abs() < 1e-12);
            assert!((state.var[j] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_infer_before_train_is_error() {
        let bn = BatchNorm::new("bn", 3, 0.1);
        let x = random_input(4, 3, 18);
        assert!(matches!(bn.forward(&x, Mode::Infer), Err(Error::UninitializedStats)));
    }

    #[test]
    fn batch_norm_infer_matches_converged_distribution() {
        // After updates on a fixed batch, infer mode reproduces train-mode
        // normalization of that batch.
        let bn = BatchNorm::new("bn", 2, 0.5);
        let x = random_input(16, 2, 19);
        let mut last_train = None;
        for _ in 0..60 {
            last_train = Some(bn.forward(&x, Mode::Train).unwrap());
        }
        let infer = bn.forward(&x, Mode::Infer).unwrap().values();
        let train = last_train.unwrap().values();
        for (a, b) in infer.iter().zip(&train) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
