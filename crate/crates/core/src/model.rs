//! Model assembly: streams into blocks, blocks into the full encoder, plus a
//! classifier head and parameter accounting.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttentionLayer, BatchNorm, BnState, ConvFLayer, FeedForward, ForwardCtx};
use crate::params::{glorot_uniform, Parameter};
use crate::tensor::{Mode, Tensor};

fn default_conv_layers() -> usize {
    3
}
fn default_context() -> usize {
    15
}
fn default_d_model() -> usize {
    256
}
fn default_d_qk() -> usize {
    40
}
fn default_d_v() -> usize {
    80
}
fn default_bottleneck() -> usize {
    128
}
fn default_d_ff() -> usize {
    1024
}
fn default_dropout() -> f64 {
    0.1
}
fn default_skip_scale() -> f64 {
    0.66
}
fn default_bn_momentum() -> f64 {
    0.1
}

/// One parallel stream: Conv-F stack at a single dilation rate, then
/// attention with that stride, then the feed-forward stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    /// Dilation rate for the Conv-F layers and the attention context stride.
    pub rate: usize,
    #[serde(default = "default_conv_layers")]
    pub conv_layers: usize,
    /// Heads in this stream. May be omitted when the block sets a
    /// `head_budget`, which is then split evenly across streams.
    #[serde(default)]
    pub heads: Option<usize>,
    /// Attended positions to the left of the query (in strided steps).
    #[serde(default = "default_context")]
    pub left: usize,
    #[serde(default = "default_context")]
    pub right: usize,
}

impl StreamConfig {
    pub fn resolved_heads(&self) -> usize {
        self.heads.expect("config was resolved")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub streams: Vec<StreamConfig>,
    /// Total heads split evenly across streams that do not set their own
    /// count; must divide by the stream count.
    #[serde(default)]
    pub head_budget: Option<usize>,
}

/// Feed-forward flavour shared by all streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfMode {
    Factorized,
    Plain,
}

/// Whole-encoder configuration. Dimensions are shared by every block, which
/// bakes in the invariant that stacked blocks agree on d_model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_qk")]
    pub d_q: usize,
    #[serde(default = "default_d_qk")]
    pub d_k: usize,
    #[serde(default = "default_d_v")]
    pub d_v: usize,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "default_ff_mode")]
    pub ff_mode: FfMode,
    /// Hidden width in plain feed-forward mode.
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_skip_scale")]
    pub skip_scale: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub seed: u64,
    /// Explicit block list. Mutually exclusive with `block` + `num_blocks`.
    #[serde(default)]
    pub blocks: Vec<BlockConfig>,
    /// Template expanded `num_blocks` times (the stacked-blocks shorthand).
    #[serde(default)]
    pub block: Option<BlockConfig>,
    #[serde(default)]
    pub num_blocks: Option<usize>,
}

fn default_ff_mode() -> FfMode {
    FfMode::Factorized
}

impl ModelConfig {
    /// Minimal config with library defaults, handy for tests and bindings.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            d_model: default_d_model(),
            d_q: default_d_qk(),
            d_k: default_d_qk(),
            d_v: default_d_v(),
            bottleneck: default_bottleneck(),
            ff_mode: default_ff_mode(),
            d_ff: default_d_ff(),
            dropout: default_dropout(),
            skip_scale: default_skip_scale(),
            bn_momentum: default_bn_momentum(),
            seed: 0,
            blocks: Vec::new(),
            block: None,
            num_blocks: None,
        }
    }

    /// Validate and normalize: expand the block template and resolve head
    /// budgets so every stream carries an explicit head count.
    pub fn resolved(mut self) -> Result<ModelConfig> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be >= 2".into()));
        }
        if self.d_q == 0 || self.d_k == 0 || self.d_v == 0 || self.bottleneck == 0 || self.d_ff == 0
        {
            return Err(Error::Config("attention/bottleneck dimensions must be >= 1".into()));
        }
        if self.d_q != self.d_k {
            return Err(Error::Config(format!(
                "d_q ({}) must equal d_k ({}) for dot-product scores",
                self.d_q, self.d_k
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.skip_scale > 0.0 && self.skip_scale <= 1.0) {
            return Err(Error::Config(format!(
                "skip_scale must be in (0, 1], got {}",
                self.skip_scale
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }

        match (self.block.take(), self.num_blocks.take()) {
            (Some(template), Some(n)) => {
                if !self.blocks.is_empty() {
                    return Err(Error::Config(
                        "give either an explicit `blocks` list or `block` + `num_blocks`, not both"
                            .into(),
                    ));
                }
                self.blocks = vec![template; n];
            }
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "`block` template and `num_blocks` must be given together".into(),
                ))
            }
        }

        for (bi, block) in self.blocks.iter_mut().enumerate() {
            let s = block.streams.len();
            if s == 0 {
                return Err(Error::Config(format!("block {bi} has no streams")));
            }
            for (si, stream) in block.streams.iter_mut().enumerate() {
                if stream.rate == 0 {
                    return Err(Error::Config(format!(
                        "block {bi} stream {si}: rate must be >= 1"
                    )));
                }
                let heads = match stream.heads {
                    Some(h) => h,
                    None => {
                        let budget = block.head_budget.ok_or_else(|| {
                            Error::Config(format!(
                                "block {bi} stream {si} has no head count and the block sets no head_budget"
                            ))
                        })?;
                        if budget % s != 0 {
                            return Err(Error::Config(format!(
                                "block {bi}: head budget {budget} does not divide across {s} streams"
                            )));
                        }
                        budget / s
                    }
                };
                if heads == 0 {
                    return Err(Error::Config(format!(
                        "block {bi} stream {si}: head count must be >= 1"
                    )));
                }
                stream.heads = Some(heads);
            }
        }
        Ok(self)
    }
}

/// One stream encoder: Conv-F stack, attention, feed-forward.
pub struct StreamEncoder {
    pub convs: Vec<ConvFLayer>,
    pub attention: AttentionLayer,
    pub ff: FeedForward,
}

impl StreamEncoder {
    pub fn init(
        prefix: &str,
        stream: &StreamConfig,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let convs = (0..stream.conv_layers)
            .map(|l| {
                ConvFLayer::init(
                    &format!("{prefix}.conv{l}"),
                    cfg.d_model,
                    cfg.bottleneck,
                    stream.rate,
                    cfg.dropout,
                    cfg.skip_scale,
                    cfg.bn_momentum,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = AttentionLayer::init(
            &format!("{prefix}.attn"),
            cfg.d_model,
            cfg.d_q,
            cfg.d_k,
            cfg.d_v,
            stream.resolved_heads(),
            stream.rate,
            stream.left,
            stream.right,
            rng,
        )?;
        let ff = match cfg.ff_mode {
            FfMode::Factorized => {
                FeedForward::init_factorized(&format!("{prefix}.ff"), cfg.d_model, cfg.bottleneck, rng)?
            }
            FfMode::Plain => FeedForward::init_plain(&format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, rng),
        };
        Ok(StreamEncoder { convs, attention, ff })
    }

    /// Encoder^s: Conv-F layers at this stream's rate, then attention, then
    /// the feed-forward stage. Length preserving.
    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h, ctx)?;
        }
        let h = self.attention.forward(&h)?;
        self.ff.forward(&h)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        for conv in &self.convs {
            out.extend(conv.parameters());
        }
        out.extend(self.attention.parameters());
        out.extend(self.ff.parameters());
        out
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.convs.iter().map(|c| &c.bn).collect()
    }
}

/// A multi-stream block: every stream reads the same input; their encoder
/// outputs are concatenated and projected, then ReLU, batch norm, dropout.
pub struct Block {
    pub streams: Vec<StreamEncoder>,
    pub proj: Parameter,
    pub bn: BatchNorm,
    pub dropout_p: f64,
    d_model: usize,
}

impl Block {
    pub fn init(
        prefix: &str,
        block: &BlockConfig,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let streams = block
            .streams
            .iter()
            .enumerate()
            .map(|(si, sc)| StreamEncoder::init(&format!("{prefix}.stream{si}"), sc, cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let proj = Parameter::new(
            format!("{prefix}.proj"),
            glorot_uniform(vec![block.streams.len() * cfg.d_model, cfg.d_model], rng),
        );
        Ok(Block {
            streams,
            proj,
            bn: BatchNorm::new(&format!("{prefix}.bn"), cfg.d_model, cfg.bn_momentum),
            dropout_p: cfg.dropout,
            d_model: cfg.d_model,
        })
    }

    /// Concat(Encoder^1..Encoder^S) W^O realized as a sum of per-stream
    /// partial products against W^O row blocks, then ReLU/batch-norm/dropout.
    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let t = x.shape()[0];
        let mut proj: Option<Tensor> = None;
        for (s, stream) in self.streams.iter().enumerate() {
            let enc = stream.forward(x, ctx)?;
            if enc.shape() != [t, self.d_model] {
                return Err(Error::Contract(format!(
                    "internal invariant violation: stream {s} output {:?} vs input length {t}",
                    enc.shape()
                )));
            }
            let rows = self.proj.tensor().slice_rows(s * self.d_model, self.d_model)?;
            let partial = enc.matmul(&rows)?;
            proj = Some(match proj {
                None => partial,
                Some(acc) => acc.add(&partial)?,
            });
        }
        let proj = proj.ok_or_else(|| Error::Config("block has no streams".into()))?;
        let h = self.bn.forward(&proj.relu(), ctx.mode)?;
        ctx.apply_dropout(&h, self.dropout_p)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        for s in &self.streams {
            out.extend(s.parameters());
        }
        out.push(self.proj.clone());
        out.extend(self.bn.parameters());
        out
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = Vec::new();
        for s in &self.streams {
            out.extend(s.batch_norms());
        }
        out.push(&self.bn);
        out
    }
}

/// The full encoder: input lift, stacked multi-stream blocks, classifier head.
pub struct Model {
    config: ModelConfig,
    pub input_w: Parameter,
    pub input_b: Parameter,
    pub blocks: Vec<Block>,
    pub head_w: Parameter,
    pub head_b: Parameter,
    params: Vec<Parameter>,
    rng: RefCell<ChaCha8Rng>,
}

impl Model {
    /// Build from a (possibly unresolved) config. All weight draws come from
    /// a ChaCha stream seeded with `config.seed`; the remainder of that
    /// stream drives dropout, so a (config, seed) pair pins every bit.
    pub fn build(config: ModelConfig) -> Result<Model> {
        let config = config.resolved()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let input_w = Parameter::new(
            "input.weight",
            glorot_uniform(vec![config.input_dim, config.d_model], &mut rng),
        );
        let input_b = Parameter::new("input.bias", Tensor::zeros(vec![config.d_model]));
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, bc)| Block::init(&format!("block{bi}"), bc, &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = Parameter::new(
            "head.weight",
            glorot_uniform(vec![config.d_model, config.num_classes], &mut rng),
        );
        let head_b = Parameter::new("head.bias", Tensor::zeros(vec![config.num_classes]));

        let mut params = vec![input_w.clone(), input_b.clone()];
        for b in &blocks {
            params.extend(b.parameters());
        }
        params.push(head_w.clone());
        params.push(head_b.clone());

        Ok(Model {
            config,
            input_w,
            input_b,
            blocks,
            head_w,
            head_b,
            params,
            rng: RefCell::new(rng),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Final embedding: input lift followed by every block.
    pub fn embed(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: shape,
                rhs: vec![0, self.config.input_dim],
            });
        }
        let mut rng = self.rng.borrow_mut();
        let mut ctx = match mode {
            Mode::Train => ForwardCtx::train(&mut rng),
            Mode::Infer => ForwardCtx::infer(),
        };
        let mut h = features.matmul(&self.input_w.tensor())?.add_row(&self.input_b.tensor())?;
        for block in &self.blocks {
            h = block.forward(&h, &mut ctx)?;
        }
        Ok(h)
    }

    /// Per-frame class logits.
    pub fn forward(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.embed(features, mode)?;
        h.matmul(&self.head_w.tensor())?.add_row(&self.head_b.tensor())
    }

    /// All trainable parameters in registration order.
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn constrained_parameters(&self) -> Vec<Parameter> {
        self.params.iter().filter(|p| p.is_constrained()).cloned().collect()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor().clear_grad();
        }
    }

    /// Number of instantiated weights, by direct enumeration.
    pub fn enumerate_params(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    /// Reset the dropout stream (finite-difference checks need the same
    /// masks on every evaluation).
    pub fn reseed_dropout(&self, seed: u64) {
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn rng_state(&self) -> ([u8; 32], u128) {
        let rng = self.rng.borrow();
        (rng.get_seed(), rng.get_word_pos())
    }

    pub fn restore_rng_state(&self, seed: [u8; 32], word_pos: u128) {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        *self.rng.borrow_mut() = rng;
    }

    /// Batch-norm layers in registration order (for checkpointing).
    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.batch_norms());
        }
        out
    }

    pub fn bn_states(&self) -> Vec<(String, BnState)> {
        self.batch_norms().iter().map(|bn| (bn.name().to_string(), bn.state())).collect()
    }

    pub fn restore_bn_state(&self, name: &str, state: BnState) -> Result<()> {
        for bn in self.batch_norms() {
            if bn.name() == name {
                bn.restore_state(state);
                return Ok(());
            }
        }
        Err(Error::Format(format!("no batch-norm layer named {name}")))
    }
}

/// Closed-form parameter count with a per-component breakdown. Must agree
/// exactly with [`Model::enumerate_params`] on the built model.
#[derive(Debug, Clone)]
pub struct ParamCount {
    pub components: Vec<(String, u64)>,
    pub total: u64,
}

pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    let cfg = config.clone().resolved()?;
    let d = cfg.d_model as u64;
    let b = cfg.bottleneck as u64;
    let mut components = Vec::new();
    components.push(("input_lift".to_string(), cfg.input_dim as u64 * d + d));

    for (bi, block) in cfg.blocks.iter().enumerate() {
        let s = block.streams.len() as u64;
        let mut conv = 0u64;
        let mut conv_bn = 0u64;
        let mut attn = 0u64;
        for stream in &block.streams {
            let layers = stream.conv_layers as u64;
            // Two 2-tap factors per layer: 2*d*b into the bottleneck and
            // 2*b*d back out.
            conv += layers * (2 * d * b + 2 * b * d);
            conv_bn += layers * 2 * d;
            let heads = stream.resolved_heads() as u64;
            attn += heads * d * (cfg.d_q as u64 + cfg.d_k as u64 + cfg.d_v as u64)
                + heads * cfg.d_v as u64 * d;
        }
        let ff = match cfg.ff_mode {
            FfMode::Factorized => s * 2 * d * b,
            FfMode::Plain => s * (2 * d * cfg.d_ff as u64 + cfg.d_ff as u64 + d),
        };
        components.push((format!("block{bi}.conv"), conv));
        components.push((format!("block{bi}.conv_bn"), conv_bn));
        components.push((format!("block{bi}.attention"), attn));
        components.push((format!("block{bi}.attention_ln"), s * 2 * d));
        components.push((format!("block{bi}.ff"), ff));
        components.push((format!("block{bi}.ff_ln"), s * 2 * d));
        components.push((format!("block{bi}.projection"), s * d * d));
        components.push((format!("block{bi}.bn"), 2 * d));
    }

    components.push((
        "head".to_string(),
        d * cfg.num_classes as u64 + cfg.num_classes as u64,
    ));

    let total = components.iter().map(|(_, c)| c).sum();
    Ok(ParamCount { components, total })
}
