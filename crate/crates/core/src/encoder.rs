//! Patch-tokenized Transformer encoder, its size presets and the MLP
//! projection head.
//!
//! Models hold only [`ParamId`]s; the values live in a [`ParamStore`] so the
//! same struct can drive an online store and its momentum copy.

use bcg_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeTag {
    XS,
    S,
    M,
    L,
    XL,
    Custom,
}

impl SizeTag {
    pub const ALL: [SizeTag; 5] = [SizeTag::XS, SizeTag::S, SizeTag::M, SizeTag::L, SizeTag::XL];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XS" => Ok(SizeTag::XS),
            "S" => Ok(SizeTag::S),
            "M" => Ok(SizeTag::M),
            "L" => Ok(SizeTag::L),
            "XL" => Ok(SizeTag::XL),
            "CUSTOM" => Ok(SizeTag::Custom),
            _ => Err(CoreError::InvalidArgument(format!("unknown size tag `{s}`"))),
        }
    }

    /// Reference parameter counts of the published size table.
    pub fn reference_params(self) -> Option<usize> {
        match self {
            SizeTag::XS => Some(800_000),
            SizeTag::S => Some(1_200_000),
            SizeTag::M => Some(3_300_000),
            SizeTag::L => Some(4_800_000),
            SizeTag::XL => Some(6_300_000),
            SizeTag::Custom => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub size: SizeTag,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub patch_window_s: f64,
    pub input_channels: usize,
    pub input_rate_hz: f64,
    pub segment_s: f64,
}

impl EncoderConfig {
    pub fn preset(size: SizeTag, input_channels: usize) -> Self {
        let (token_dim, n_layers, mlp_hidden, n_heads) = match size {
            SizeTag::XS => (128, 4, 512, 4),
            SizeTag::S => (128, 6, 512, 4),
            SizeTag::M => (192, 6, 1024, 6),
            SizeTag::L => (256, 6, 1024, 8),
            SizeTag::XL | SizeTag::Custom => (256, 8, 1024, 8),
        };
        Self {
            size,
            token_dim,
            n_layers,
            n_heads,
            mlp_hidden,
            patch_window_s: 0.3125,
            input_channels,
            input_rate_hz: 64.0,
            segment_s: 60.0,
        }
    }

    /// The small custom configuration used for CPU-scale experiments.
    pub fn tiny(input_channels: usize) -> Self {
        Self { size: SizeTag::Custom, token_dim: 64, n_layers: 4, n_heads: 4, mlp_hidden: 256, ..Self::preset(SizeTag::XL, input_channels) }
    }

    pub fn patch_samples(&self) -> Result<usize> {
        let p = self.patch_window_s * self.input_rate_hz;
        if p < 1.0 || (p - p.round()).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "patch window {} s at {} Hz is not a whole number of samples",
                self.patch_window_s, self.input_rate_hz
            )));
        }
        Ok(p.round() as usize)
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_s * self.input_rate_hz).round() as usize
    }

    pub fn n_tokens(&self) -> Result<usize> {
        let p = self.patch_samples()?;
        let t = self.segment_samples();
        if t % p != 0 {
            return Err(CoreError::InvalidArgument(format!("{t} samples do not split into patches of {p}")));
        }
        Ok(t / p)
    }

    pub fn patch_dim(&self) -> Result<usize> {
        Ok(self.patch_samples()? * self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_hidden == 0 || self.input_channels == 0 {
            return Err(CoreError::InvalidArgument("encoder dimensions must be positive".into()));
        }
        if self.token_dim % self.n_heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "token_dim {} is not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        self.n_tokens()?;
        Ok(())
    }
}

/// Exact number of trainable scalars of an encoder built from `cfg`.
pub fn param_count(cfg: &EncoderConfig) -> Result<usize> {
    cfg.validate()?;
    let (d, h) = (cfg.token_dim, cfg.mlp_hidden);
    let tokenizer = cfg.patch_dim()? * d + d;
    Ok(tokenizer + cfg.n_layers * block_params(d, h))
}

fn block_params(d: usize, h: usize) -> usize {
    4 * (d * d + d) + 2 * d * h + h + d + 4 * d
}

/// Sinusoidal table of shape `[n_tokens, dim]`.
pub fn positional_embedding<F: Float>(n_tokens: usize, dim: usize) -> Tensor<F> {
    let mut out = Vec::with_capacity(n_tokens * dim);
    for pos in 0..n_tokens {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            out.push(F::cast(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n_tokens, dim], out).expect("table shape")
}

/// Splits each `C x T` signal (row-major per channel) into non-overlapping
/// windows and flattens every window across channels, channel-major.
/// Returns `[B, T / patch, C * patch]`.
pub fn patchify<F: Float>(signals: &[&[f32]], channels: usize, patch: usize) -> Result<Tensor<F>> {
    let first = signals.first().ok_or_else(|| CoreError::InvalidArgument("empty batch".into()))?;
    if channels == 0 || first.len() % channels != 0 {
        return Err(CoreError::InvalidArgument(format!("signal length {} is not a multiple of {channels} channels", first.len())));
    }
    let t = first.len() / channels;
    if patch == 0 || t % patch != 0 {
        return Err(CoreError::InvalidArgument(format!("{t} samples do not split into patches of {patch}")));
    }
    let n = t / patch;
    let mut out = Vec::with_capacity(signals.len() * t * channels);
    for s in signals {
        if s.len() != first.len() {
            return Err(CoreError::InvalidArgument("signals in a batch differ in length".into()));
        }
        for p in 0..n {
            for c in 0..channels {
                out.extend(s[c * t + p * patch..c * t + (p + 1) * patch].iter().map(|&x| F::cast(x as f64)));
            }
        }
    }
    Ok(Tensor::new(vec![signals.len(), n, channels * patch], out)?)
}

/// Inverse of [`patchify`] for one sample: `[n, C * patch]` back to `C x T`.
pub fn unpatchify(patches: &[f32], channels: usize, patch: usize) -> Vec<f32> {
    let n = patches.len() / (channels * patch);
    let t = n * patch;
    let mut out = vec![0.0; channels * t];
    for p in 0..n {
        for c in 0..channels {
            let src = &patches[(p * channels + c) * patch..(p * channels + c + 1) * patch];
            out[c * t + p * patch..c * t + (p + 1) * patch].copy_from_slice(src);
        }
    }
    out
}

fn xavier<F: Float, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::cast(rng.random_range(-a..a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// Dense layer `x @ w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, w_name: &str, b_name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(w_name, xavier(rng, fan_in, fan_out));
        let b = store.add(b_name, Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w)?;
        Ok(t.add(y, b)?)
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    fn new<F: Float>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Self {
        let g = store.add(format!("{prefix}.g"), Tensor::full(&[dim], F::one()));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[dim]));
        Self { g, b }
    }

    fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let g = t.param(store, self.g);
        let b = t.param(store, self.b);
        Ok(t.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// One pre-norm Transformer block.
#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    w1: Linear,
    w2: Linear,
    heads: usize,
}

impl Block {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, prefix: &str, dim: usize, hidden: usize, heads: usize, rng: &mut R) -> Self {
        let attn = |store: &mut ParamStore<F>, rng: &mut R, n: &str| {
            Linear::new(store, &format!("{prefix}.attn.{n}"), &format!("{prefix}.attn.{n}_b"), dim, dim, rng)
        };
        let ln1 = LayerNorm::new(store, &format!("{prefix}.ln1"), dim);
        let q = attn(store, rng, "q");
        let k = attn(store, rng, "k");
        let v = attn(store, rng, "v");
        let o = attn(store, rng, "o");
        let ln2 = LayerNorm::new(store, &format!("{prefix}.ln2"), dim);
        let w1 = Linear::new(store, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"), dim, hidden, rng);
        let w2 = Linear::new(store, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"), hidden, dim, rng);
        Self { ln1, q, k, v, o, ln2, w1, w2, heads }
    }

    fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(t, store, x)?;
        let q = self.q.forward(t, store, h)?;
        let k = self.k.forward(t, store, h)?;
        let v = self.v.forward(t, store, h)?;
        let a = t.attention(q, k, v, self.heads)?;
        let a = self.o.forward(t, store, a)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, store, x)?;
        let h = self.w1.forward(t, store, h)?;
        let h = t.gelu(h)?;
        let h = self.w2.forward(t, store, h)?;
        Ok(t.add(x, h)?)
    }
}

/// A stack of Transformer blocks over `[B, T, D]` token sequences.
#[derive(Clone, Debug)]
pub struct BlockStack {
    blocks: Vec<Block>,
}

impl BlockStack {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        layers: usize,
        dim: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{prefix}block{i}"), dim, hidden, heads, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(t, store, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    tokenizer: Linear,
    blocks: BlockStack,
}

impl Encoder {
    /// Registers a freshly initialized encoder in `store`.
    pub fn new<F: Float, R: Rng>(config: EncoderConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tokenizer = Linear::new(store, "tokenizer.w", "tokenizer.b", config.patch_dim()?, config.token_dim, rng);
        let blocks = BlockStack::new(store, "", config.n_layers, config.token_dim, config.mlp_hidden, config.n_heads, rng);
        Ok(Self { config, tokenizer, blocks })
    }

    /// Linear projection of `[B, N, C * patch]` patches to `[B, N, D]` tokens.
    pub fn tokenize<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, patches: Var) -> Result<Var> {
        let s = t.shape(patches);
        if s.len() != 3 || s[2] != self.config.patch_dim()? {
            return Err(CoreError::InvalidArgument(format!(
                "encoder expects patches of width {} ({} channels), got shape {s:?}",
                self.config.patch_dim()?,
                self.config.input_channels
            )));
        }
        self.tokenizer.forward(t, store, patches)
    }

    /// Adds the positional table for the first `N` positions.
    pub fn add_positions<F: Float>(&self, t: &mut Tape<F>, tokens: Var) -> Result<Var> {
        let n = t.shape(tokens)[1];
        let pe = t.constant(positional_embedding(n, self.config.token_dim));
        Ok(t.add(tokens, pe)?)
    }

    pub fn transform<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, tokens: Var) -> Result<Var> {
        self.blocks.forward(t, store, tokens)
    }

    /// Patches to pooled `[B, D]` embeddings.
    pub fn embed<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, patches: Var) -> Result<Var> {
        let x = self.tokenize(t, store, patches)?;
        let x = self.add_positions(t, x)?;
        let x = self.transform(t, store, x)?;
        Ok(t.mean_pool(x)?)
    }

    /// Convenience: raw `C x T` signals to pooled embeddings, one row each.
    pub fn encode<F: Float>(&self, store: &ParamStore<F>, signals: &[&[f32]]) -> Result<Tensor<F>> {
        let patches = patchify::<F>(signals, self.config.input_channels, self.config.patch_samples()?)?;
        if patches.shape()[1] != self.config.n_tokens()? {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} samples per channel, got {}",
                self.config.segment_samples(),
                patches.shape()[1] * self.config.patch_samples()?
            )));
        }
        let mut t = Tape::no_grad();
        let p = t.constant(patches);
        let e = self.embed(&mut t, store, p)?;
        Ok(t.value(e).clone())
    }
}

/// `dim -> hidden -> out` MLP with a GeLU between the layers.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
}

pub const HEAD_HIDDEN: usize = 1024;
pub const HEAD_OUT: usize = 128;

impl ProjectionHead {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, prefix: &str, dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let l1 = Linear::new(store, &format!("{prefix}.w1"), &format!("{prefix}.b1"), dim, hidden, rng);
        let l2 = Linear::new(store, &format!("{prefix}.w2"), &format!("{prefix}.b2"), hidden, out, rng);
        Self { l1, l2 }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, store, x)?;
        let h = t.gelu(h)?;
        self.l2.forward(t, store, h)
    }
}
