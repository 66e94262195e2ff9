//! 2D and 3D Vision Transformer segmenters.
//!
//! Input is cut into non-overlapping `p x p` patches. In 3D the embedding
//! kernel spans the whole block depth, so a `[C, D, H, W]` block yields the
//! same `(H/p) * (W/p)` token grid as a 2D image and every encoder weight is
//! shared between the two variants. The decoder is a per-token linear map to
//! the `D x p x p` logits of that token's patch.

use serde::{Deserialize, Serialize};

use crate::numerics::ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul_nt_raw, matmul_tn_raw,
    LayerNormCache,
};
use crate::numerics::{Attention, AttentionCache, NumericsError, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VitError {
    #[error("invalid ViT config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("positional table with {0} spatial rows is not a square grid")]
    NonSquareGrid(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub kind: ModelKind,
    /// `(H, W)`.
    pub img_hw: (usize, usize),
    pub patch: usize,
    /// Block depth; must be 1 for 2D models.
    pub depth: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::ThreeD,
            img_hw: (100, 100),
            patch: 10,
            depth: 5,
            in_channels: 1,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    /// The 2D counterpart with identical encoder dimensions.
    pub fn to_2d(&self) -> Self {
        Self {
            kind: ModelKind::TwoD,
            depth: 1,
            ..*self
        }
    }

    pub fn to_3d(&self, depth: usize) -> Self {
        Self {
            kind: ModelKind::ThreeD,
            depth,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let bad = |m: String| Err(VitError::Config(m));
        let (h, w) = self.img_hw;
        if self.patch == 0 || h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!(
                "image {h}x{w} is not divisible into {0}x{0} patches",
                self.patch
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.kind == ModelKind::TwoD && self.depth != 1 {
            return bad("2D models have depth 1".into());
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("in_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.img_hw.0 / self.patch, self.img_hw.1 / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened embedding kernel length `C * D * p * p`.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.depth * self.patch * self.patch
    }

    /// Logits produced per token, `D * p * p`.
    pub fn out_per_token(&self) -> usize {
        self.depth * self.patch * self.patch
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_embed_shape(&self) -> Vec<usize> {
        let (e, c, p) = (self.embed_dim, self.in_channels, self.patch);
        match self.kind {
            ModelKind::TwoD => vec![e, c, p, p],
            ModelKind::ThreeD => vec![e, c, self.depth, p, p],
        }
    }

    /// Input element count `C * D * H * W`.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.depth * self.img_hw.0 * self.img_hw.1
    }

    /// Output element count `D * H * W`.
    pub fn output_len(&self) -> usize {
        self.depth * self.img_hw.0 * self.img_hw.1
    }

    /// Canonical `(name, shape)` of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let mut out = vec![
            ("patch_embed.w".to_string(), self.patch_embed_shape()),
            ("patch_embed.b".to_string(), vec![e]),
            ("cls".to_string(), vec![1, e]),
            ("pos".to_string(), vec![1 + self.num_tokens(), e]),
        ];
        for i in 0..self.layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.g"), vec![e]),
                (p("ln1.b"), vec![e]),
                (p("attn.wqkv"), vec![e, 3 * e]),
                (p("attn.bqkv"), vec![3 * e]),
                (p("attn.wo"), vec![e, e]),
                (p("attn.bo"), vec![e]),
                (p("ln2.g"), vec![e]),
                (p("ln2.b"), vec![e]),
                (p("mlp.w1"), vec![e, self.hidden_dim()]),
                (p("mlp.b1"), vec![self.hidden_dim()]),
                (p("mlp.w2"), vec![self.hidden_dim(), e]),
                (p("mlp.b2"), vec![e]),
            ]);
        }
        out.extend([
            ("final_ln.g".to_string(), vec![e]),
            ("final_ln.b".to_string(), vec![e]),
            ("decoder.w".to_string(), vec![e, self.out_per_token()]),
            ("decoder.b".to_string(), vec![self.out_per_token()]),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S: Scalar = f32> {
    pub g: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar = f32> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<S: Scalar = f32> {
    pub ln1: LayerNormParams<S>,
    pub attn: Attention<S>,
    pub ln2: LayerNormParams<S>,
    pub mlp: Mlp<S>,
}

/// Every trainable tensor of a segmenter. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<S: Scalar = f32> {
    pub patch_w: Tensor<S>,
    pub patch_b: Tensor<S>,
    pub cls: Tensor<S>,
    pub pos: Tensor<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub final_ln: LayerNormParams<S>,
    pub decoder_w: Tensor<S>,
    pub decoder_b: Tensor<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> VitParams<S> {
    /// Truncated-normal (σ = 0.02) weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(cfg: &VitConfig, rng: &mut Rng) -> Result<Self, VitError> {
        cfg.validate()?;
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".g") {
                    Tensor::ones(&shape)
                } else if is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::trunc_normal(&shape, INIT_STD, rng)
                }
            })
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    pub fn zeros(cfg: &VitConfig) -> Result<Self, VitError> {
        let tensors = cfg.param_shapes().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Self::from_tensors(cfg, tensors)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(S::zero());
        }
        z
    }

    /// Builds parameters from tensors listed in canonical order, checking shapes.
    pub fn from_tensors(cfg: &VitConfig, tensors: Vec<Tensor<S>>) -> Result<Self, VitError> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(VitError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(VitError::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let patch_w = next();
        let patch_b = next();
        let cls = next();
        let pos = next();
        let blocks = (0..cfg.layers)
            .map(|_| EncoderBlock {
                ln1: LayerNormParams { g: next(), b: next() },
                attn: Attention {
                    wqkv: next(),
                    bqkv: next(),
                    wo: next(),
                    bo: next(),
                },
                ln2: LayerNormParams { g: next(), b: next() },
                mlp: Mlp {
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                },
            })
            .collect();
        Ok(Self {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            final_ln: LayerNormParams { g: next(), b: next() },
            decoder_w: next(),
            decoder_b: next(),
        })
    }

    /// Tensors in canonical order (matching [`VitConfig::param_shapes`]).
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1.g,
                &b.ln1.b,
                &b.attn.wqkv,
                &b.attn.bqkv,
                &b.attn.wo,
                &b.attn.bo,
                &b.ln2.g,
                &b.ln2.b,
                &b.mlp.w1,
                &b.mlp.b1,
                &b.mlp.w2,
                &b.mlp.b2,
            ]);
        }
        out.extend([&self.final_ln.g, &self.final_ln.b, &self.decoder_w, &self.decoder_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.g,
                &mut b.ln1.b,
                &mut b.attn.wqkv,
                &mut b.attn.bqkv,
                &mut b.attn.wo,
                &mut b.attn.bo,
                &mut b.ln2.g,
                &mut b.ln2.b,
                &mut b.mlp.w1,
                &mut b.mlp.b1,
                &mut b.mlp.w2,
                &mut b.mlp.b2,
            ]);
        }
        out.extend([
            &mut self.final_ln.g,
            &mut self.final_ln.b,
            &mut self.decoder_w,
            &mut self.decoder_b,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        param_names(self.blocks.len())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten_from(&mut self, flat: &[S]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Elementwise `self += other` across every tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("same parameter layout");
        }
    }

    pub fn cast<T: Scalar>(&self) -> VitParams<T> {
        let cast_ln = |l: &LayerNormParams<S>| LayerNormParams {
            g: l.g.cast(),
            b: l.b.cast(),
        };
        VitParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    ln1: cast_ln(&b.ln1),
                    attn: Attention {
                        wqkv: b.attn.wqkv.cast(),
                        bqkv: b.attn.bqkv.cast(),
                        wo: b.attn.wo.cast(),
                        bo: b.attn.bo.cast(),
                    },
                    ln2: cast_ln(&b.ln2),
                    mlp: Mlp {
                        w1: b.mlp.w1.cast(),
                        b1: b.mlp.b1.cast(),
                        w2: b.mlp.w2.cast(),
                        b2: b.mlp.b2.cast(),
                    },
                })
                .collect(),
            final_ln: cast_ln(&self.final_ln),
            decoder_w: self.decoder_w.cast(),
            decoder_b: self.decoder_b.cast(),
        }
    }

    fn check_layout(&self, cfg: &VitConfig) -> Result<(), VitError> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        let tensors = self.tensors();
        if shapes.len() != tensors.len() {
            return Err(VitError::ShapeMismatch(format!(
                "config expects {} layers, params have {}",
                cfg.layers,
                self.blocks.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(VitError::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
        || name.ends_with(".bqkv")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
}

/// Canonical parameter names for an encoder with `layers` blocks.
pub fn param_names(layers: usize) -> Vec<String> {
    VitConfig {
        layers,
        ..VitConfig::default()
    }
    .param_shapes()
    .into_iter()
    .map(|(n, _)| n)
    .collect()
}

/// Unfolds `[C, D, H, W]` into `[N, C*D*p*p]` patch rows, row-major over the
/// token grid, each row ordered `(c, d, py, px)`.
fn unfold<S: Scalar>(input: &[S], c: usize, d: usize, h: usize, w: usize, p: usize) -> Vec<S> {
    let (gh, gw) = (h / p, w / p);
    let k = c * d * p * p;
    let mut out = Vec::with_capacity(gh * gw * k);
    for gi in 0..gh {
        for gj in 0..gw {
            for ci in 0..c {
                for di in 0..d {
                    for py in 0..p {
                        let row = ((ci * d + di) * h + gi * p + py) * w + gj * p;
                        out.extend_from_slice(&input[row..row + p]);
                    }
                }
            }
        }
    }
    out
}

fn embed<S: Scalar>(patches: &[S], n: usize, k: usize, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, VitError> {
    let e = b.len();
    if w.len() != e * k {
        return Err(VitError::ShapeMismatch(format!(
            "embedding kernel {:?} for patch length {k}",
            w.shape()
        )));
    }
    let mut tokens = matmul_nt_raw(patches, w.data(), n, k, e);
    for row in tokens.chunks_mut(e) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(Tensor::new(vec![n, e], tokens)?)
}

/// Non-overlapping `p x p` convolution with stride `p`: `[C,H,W] -> [N, e]`.
pub fn patch_embed_2d<S: Scalar>(image: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, VitError> {
    let (&[c, h, wd], &[_, wc, p, p2]) = (image.shape(), w.shape()) else {
        return Err(VitError::ShapeMismatch(format!(
            "patch_embed_2d image {:?} kernel {:?}",
            image.shape(),
            w.shape()
        )));
    };
    if wc != c || p != p2 || p == 0 || h % p != 0 || wd % p != 0 {
        return Err(VitError::ShapeMismatch(format!(
            "patch_embed_2d image {:?} kernel {:?}",
            image.shape(),
            w.shape()
        )));
    }
    let patches = unfold(image.data(), c, 1, h, wd, p);
    embed(&patches, (h / p) * (wd / p), c * p * p, w, b)
}

/// Block embedding whose kernel spans the full depth: `[C,D,H,W] -> [N, e]`.
pub fn patch_embed_3d<S: Scalar>(block: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, VitError> {
    let (&[c, d, h, wd], &[_, wc, wdp, p, p2]) = (block.shape(), w.shape()) else {
        return Err(VitError::ShapeMismatch(format!(
            "patch_embed_3d block {:?} kernel {:?}",
            block.shape(),
            w.shape()
        )));
    };
    if wc != c || wdp != d || p != p2 || p == 0 || h % p != 0 || wd % p != 0 {
        return Err(VitError::ShapeMismatch(format!(
            "patch_embed_3d block {:?} kernel {:?}",
            block.shape(),
            w.shape()
        )));
    }
    let patches = unfold(block.data(), c, d, h, wd, p);
    embed(&patches, (h / p) * (wd / p), c * d * p * p, w, b)
}

struct LayerCache<S: Scalar> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    ln2_out: Tensor<S>,
    pre_act: Tensor<S>,
    act: Tensor<S>,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<S: Scalar> {
    patches: Vec<S>,
    layers: Vec<LayerCache<S>>,
    final_ln: LayerNormCache<S>,
    encoded: Tensor<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Encoder output `[1 + N, e]`, cls row first.
    pub fn encoded(&self) -> &Tensor<S> {
        &self.encoded
    }
}

type EncoderTrace<S> = (Tensor<S>, Vec<LayerCache<S>>, LayerNormCache<S>);

fn encode_cached<S: Scalar>(
    tokens: &Tensor<S>,
    params: &VitParams<S>,
    cfg: &VitConfig,
) -> Result<EncoderTrace<S>, VitError> {
    let (n, e) = tokens.dims2()?;
    if e != cfg.embed_dim || params.pos.shape() != [n + 1, e] || params.cls.len() != e {
        return Err(VitError::ShapeMismatch(format!(
            "tokens {:?} with pos {:?}",
            tokens.shape(),
            params.pos.shape()
        )));
    }
    let mut x = Vec::with_capacity((n + 1) * e);
    x.extend_from_slice(params.cls.data());
    x.extend_from_slice(tokens.data());
    for (v, &p) in x.iter_mut().zip(params.pos.data()) {
        *v += p;
    }
    let mut x = Tensor::new(vec![n + 1, e], x)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (a_in, ln1) = layer_norm(&x, &blk.ln1.g, &blk.ln1.b)?;
        let (a_out, attn) = blk.attn.forward(&a_in, cfg.heads)?;
        x.add_assign(&a_out)?;
        let (ln2_out, ln2) = layer_norm(&x, &blk.ln2.g, &blk.ln2.b)?;
        let pre_act = linear(&ln2_out, &blk.mlp.w1, &blk.mlp.b1)?;
        let act = gelu(&pre_act);
        let m_out = linear(&act, &blk.mlp.w2, &blk.mlp.b2)?;
        x.add_assign(&m_out)?;
        caches.push(LayerCache {
            ln1,
            attn,
            ln2,
            ln2_out,
            pre_act,
            act,
        });
    }
    let (out, final_ln) = layer_norm(&x, &params.final_ln.g, &params.final_ln.b)?;
    Ok((out, caches, final_ln))
}

/// Prepends the cls token, adds positions, runs the pre-LN encoder blocks
/// and the final layer norm: `[N, e] -> [1 + N, e]`.
pub fn encode<S: Scalar>(tokens: &Tensor<S>, params: &VitParams<S>, cfg: &VitConfig) -> Result<Tensor<S>, VitError> {
    Ok(encode_cached(tokens, params, cfg)?.0)
}

/// Drops the cls row and maps each token to the `D x p x p` logits of its
/// patch, assembled into `[D, H, W]`.
pub fn decode_linear<S: Scalar>(
    encoded: &Tensor<S>,
    params: &VitParams<S>,
    cfg: &VitConfig,
) -> Result<Tensor<S>, VitError> {
    let (rows, e) = encoded.dims2()?;
    let n = cfg.num_tokens();
    if rows != n + 1 || e != cfg.embed_dim {
        return Err(VitError::ShapeMismatch(format!(
            "encoded {:?}, expected [{}, {}]",
            encoded.shape(),
            n + 1,
            cfg.embed_dim
        )));
    }
    let body = Tensor::new(vec![n, e], encoded.data()[e..].to_vec())?;
    let per_token = linear(&body, &params.decoder_w, &params.decoder_b)?;
    Ok(scatter_patches(per_token.data(), cfg))
}

fn scatter_patches<S: Scalar>(per_token: &[S], cfg: &VitConfig) -> Tensor<S> {
    let (h, w) = cfg.img_hw;
    let (p, d) = (cfg.patch, cfg.depth);
    let (_, gw) = cfg.grid();
    let k = cfg.out_per_token();
    let mut out = vec![S::zero(); d * h * w];
    for (t, tok) in per_token.chunks(k).enumerate() {
        let (gi, gj) = (t / gw, t % gw);
        for di in 0..d {
            for py in 0..p {
                let dst = (di * h + gi * p + py) * w + gj * p;
                let src = (di * p + py) * p;
                out[dst..dst + p].copy_from_slice(&tok[src..src + p]);
            }
        }
    }
    Tensor::new(vec![d, h, w], out).expect("output dims positive")
}

fn gather_patches<S: Scalar>(grid: &[S], cfg: &VitConfig) -> Vec<S> {
    let (h, w) = cfg.img_hw;
    let (p, d) = (cfg.patch, cfg.depth);
    let (gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(grid.len());
    for gi in 0..gh {
        for gj in 0..gw {
            for di in 0..d {
                for py in 0..p {
                    let src = (di * h + gi * p + py) * w + gj * p;
                    out.extend_from_slice(&grid[src..src + p]);
                }
            }
        }
    }
    out
}

impl<S: Scalar> VitParams<S> {
    /// Logits `[D, H, W]` for a flat `[C, D, H, W]` input, plus the cache for
    /// [`VitParams::backward`].
    pub fn forward_cached(&self, cfg: &VitConfig, input: &[S]) -> Result<(Tensor<S>, ForwardCache<S>), VitError> {
        self.check_layout(cfg)?;
        if input.len() != cfg.input_len() {
            return Err(VitError::ShapeMismatch(format!(
                "input has {} values, config expects {}",
                input.len(),
                cfg.input_len()
            )));
        }
        let (h, w) = cfg.img_hw;
        let patches = unfold(input, cfg.in_channels, cfg.depth, h, w, cfg.patch);
        let tokens = embed(
            &patches,
            cfg.num_tokens(),
            cfg.patch_dim(),
            &self.patch_w,
            &self.patch_b,
        )?;
        let (encoded, layers, final_ln) = encode_cached(&tokens, self, cfg)?;
        let logits = decode_linear(&encoded, self, cfg)?;
        Ok((
            logits,
            ForwardCache {
                patches,
                layers,
                final_ln,
                encoded,
            },
        ))
    }

    pub fn forward(&self, cfg: &VitConfig, input: &[S]) -> Result<Tensor<S>, VitError> {
        Ok(self.forward_cached(cfg, input)?.0)
    }

    /// Gradients of every parameter given `d loss / d logits`.
    pub fn backward(
        &self,
        cfg: &VitConfig,
        cache: &ForwardCache<S>,
        grad_logits: &[S],
    ) -> Result<VitParams<S>, VitError> {
        if grad_logits.len() != cfg.output_len() {
            return Err(VitError::ShapeMismatch(format!(
                "logit gradient has {} values, expected {}",
                grad_logits.len(),
                cfg.output_len()
            )));
        }
        let n = cfg.num_tokens();
        let e = cfg.embed_dim;
        let mut grads = self.zeros_like();

        // decoder
        let d_tok = Tensor::new(vec![n, cfg.out_per_token()], gather_patches(grad_logits, cfg))?;
        let body = Tensor::new(vec![n, e], cache.encoded.data()[e..].to_vec())?;
        let dec = linear_backward(&body, &self.decoder_w, &d_tok)?;
        grads.decoder_w = dec.w;
        grads.decoder_b = dec.b;
        let mut d_enc = vec![S::zero(); (n + 1) * e];
        d_enc[e..].copy_from_slice(dec.x.data());
        let d_enc = Tensor::new(vec![n + 1, e], d_enc)?;

        let fl = layer_norm_backward(&cache.final_ln, &self.final_ln.g, &d_enc)?;
        grads.final_ln = LayerNormParams {
            g: fl.gamma,
            b: fl.beta,
        };
        let mut dx = fl.x;

        for (i, (blk, lc)) in self.blocks.iter().zip(&cache.layers).enumerate().rev() {
            let mlp2 = linear_backward(&lc.act, &blk.mlp.w2, &dx)?;
            let d_pre = gelu_backward(&lc.pre_act, &mlp2.x)?;
            let mlp1 = linear_backward(&lc.ln2_out, &blk.mlp.w1, &d_pre)?;
            let ln2 = layer_norm_backward(&lc.ln2, &blk.ln2.g, &mlp1.x)?;
            dx.add_assign(&ln2.x)?;
            let (d_attn_in, attn) = blk.attn.backward(&lc.attn, &dx, cfg.heads)?;
            let ln1 = layer_norm_backward(&lc.ln1, &blk.ln1.g, &d_attn_in)?;
            dx.add_assign(&ln1.x)?;
            grads.blocks[i] = EncoderBlock {
                ln1: LayerNormParams {
                    g: ln1.gamma,
                    b: ln1.beta,
                },
                attn,
                ln2: LayerNormParams {
                    g: ln2.gamma,
                    b: ln2.beta,
                },
                mlp: Mlp {
                    w1: mlp1.w,
                    b1: mlp1.b,
                    w2: mlp2.w,
                    b2: mlp2.b,
                },
            };
        }

        grads.pos = dx.clone().reshape(self.pos.shape())?;
        grads.cls = Tensor::new(self.cls.shape().to_vec(), dx.data()[..e].to_vec())?;
        let d_tokens = &dx.data()[e..];
        let k = cfg.patch_dim();
        let dw = matmul_tn_raw(d_tokens, &cache.patches, n, e, k);
        grads.patch_w = Tensor::new(self.patch_w.shape().to_vec(), dw)?;
        let mut db = vec![S::zero(); e];
        for row in d_tokens.chunks(e) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        grads.patch_b = Tensor::new(vec![e], db)?;
        Ok(grads)
    }
}

/// 2D segmentation: `[C, H, W]` image to `[1, H, W]` logits.
pub fn forward_2d<S: Scalar>(params: &VitParams<S>, cfg: &VitConfig, image: &Tensor<S>) -> Result<Tensor<S>, VitError> {
    if cfg.kind != ModelKind::TwoD {
        return Err(VitError::Config("forward_2d needs a 2D config".into()));
    }
    let (h, w) = cfg.img_hw;
    if image.shape() != [cfg.in_channels, h, w] {
        return Err(VitError::ShapeMismatch(format!("image {:?}", image.shape())));
    }
    params.forward(cfg, image.data())
}

/// 3D slice segmentation: `[C, D, H, W]` block to `[D, H, W]` logits.
pub fn forward_3d<S: Scalar>(params: &VitParams<S>, cfg: &VitConfig, block: &Tensor<S>) -> Result<Tensor<S>, VitError> {
    if cfg.kind != ModelKind::ThreeD {
        return Err(VitError::Config("forward_3d needs a 3D config".into()));
    }
    let (h, w) = cfg.img_hw;
    if block.shape() != [cfg.in_channels, cfg.depth, h, w] {
        return Err(VitError::ShapeMismatch(format!("block {:?}", block.shape())));
    }
    params.forward(cfg, block.data())
}

/// Bilinearly resamples the spatial rows of a `[1 + g*g, e]` positional table
/// onto a `new_grid x new_grid` lattice; the cls row is copied.
///
/// Corner rows stay aligned: new index `i` samples old coordinate
/// `i * (g - 1) / (g' - 1)`.
pub fn interpolate_pos_embed<S: Scalar>(
    pos: &Tensor<S>,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
) -> Result<Tensor<S>, VitError> {
    let (rows, e) = pos.dims2()?;
    let n = rows.saturating_sub(1);
    let g = old_grid.0;
    if old_grid.0 != old_grid.1 || g * g != n {
        return Err(VitError::NonSquareGrid(n));
    }
    if new_grid.0 != new_grid.1 || new_grid.0 == 0 {
        return Err(VitError::NonSquareGrid(new_grid.0 * new_grid.1));
    }
    let g2 = new_grid.0;
    if g2 == g {
        return Ok(pos.clone());
    }
    let coord = |i: usize| -> f64 {
        if g2 == 1 {
            (g - 1) as f64 / 2.0
        } else {
            i as f64 * (g - 1) as f64 / (g2 - 1) as f64
        }
    };
    let spatial = &pos.data()[e..];
    let at = |r: usize, c: usize, k: usize| spatial[(r * g + c) * e + k].as_f64();
    let mut out = Vec::with_capacity((1 + g2 * g2) * e);
    out.extend_from_slice(&pos.data()[..e]);
    for i in 0..g2 {
        let u = coord(i);
        let r0 = (u.floor() as usize).min(g - 1);
        let r1 = (r0 + 1).min(g - 1);
        let fu = u - r0 as f64;
        for j in 0..g2 {
            let v = coord(j);
            let c0 = (v.floor() as usize).min(g - 1);
            let c1 = (c0 + 1).min(g - 1);
            let fv = v - c0 as f64;
            for k in 0..e {
                let top = at(r0, c0, k) * (1.0 - fv) + at(r0, c1, k) * fv;
                let bot = at(r1, c0, k) * (1.0 - fv) + at(r1, c1, k) * fv;
                out.push(S::lit(top * (1.0 - fu) + bot * fu));
            }
        }
    }
    Ok(Tensor::new(vec![1 + g2 * g2, e], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;

    fn tiny(kind: ModelKind, depth: usize) -> VitConfig {
        VitConfig {
            kind,
            img_hw: (4, 4),
            patch: 2,
            depth,
            in_channels: 1,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn randomized<S: Scalar>(cfg: &VitConfig, std: f64, seed: u64) -> VitParams<S> {
        let mut rng = Rng::new(seed);
        let mut p = VitParams::<S>::init(cfg, &mut rng).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += S::lit(rng.normal() * std);
            }
        }
        p
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::default().validate().is_ok());
        let bad = VitConfig {
            patch: 16,
            ..VitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(VitError::Config(_))));
        let bad = VitConfig {
            heads: 5,
            ..VitConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = VitConfig {
            kind: ModelKind::TwoD,
            depth: 3,
            ..VitConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn canonical_names() {
        let names = param_names(1);
        assert_eq!(
            names,
            [
                "patch_embed.w",
                "patch_embed.b",
                "cls",
                "pos",
                "blocks.0.ln1.g",
                "blocks.0.ln1.b",
                "blocks.0.attn.wqkv",
                "blocks.0.attn.bqkv",
                "blocks.0.attn.wo",
                "blocks.0.attn.bo",
                "blocks.0.ln2.g",
                "blocks.0.ln2.b",
                "blocks.0.mlp.w1",
                "blocks.0.mlp.b1",
                "blocks.0.mlp.w2",
                "blocks.0.mlp.b2",
                "final_ln.g",
                "final_ln.b",
                "decoder.w",
                "decoder.b"
            ]
        );
    }

    #[test]
    fn init_shapes_and_values() {
        let cfg = VitConfig::default();
        let p = VitParams::<f32>::init(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(p.patch_w.shape(), &[64, 1, 5, 10, 10]);
        assert_eq!(p.pos.shape(), &[101, 64]);
        assert_eq!(p.decoder_w.shape(), &[64, 500]);
        assert!(p.blocks[0].ln1.g.data().iter().all(|&v| v == 1.0));
        assert!(p.blocks[0].attn.bqkv.data().iter().all(|&v| v == 0.0));
        assert!(p.decoder_w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(p.decoder_w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_patch_embedding_is_inner_product() {
        let mut rng = Rng::new(1);
        let img = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let tok = patch_embed_2d(&img, &w, &b).unwrap();
        assert_eq!(tok.shape(), &[1, 4]);
        for j in 0..4 {
            let want: f64 = b.data()[j] + (0..18).map(|i| w.data()[j * 18 + i] * img.data()[i]).sum::<f64>();
            assert!((tok.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_embeds_to_bias() {
        let mut rng = Rng::new(2);
        let w = Tensor::<f32>::randn(&[5, 1, 2, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5], 1.0, &mut rng);
        let tok = patch_embed_2d(&Tensor::zeros(&[1, 4, 6]), &w, &b).unwrap();
        assert_eq!(tok.shape(), &[6, 5]);
        for r in 0..6 {
            assert_eq!(tok.row(r), b.data());
        }
        let w3 = Tensor::<f32>::randn(&[5, 1, 3, 2, 2], 1.0, &mut rng);
        let tok = patch_embed_3d(&Tensor::zeros(&[1, 3, 4, 6]), &w3, &b).unwrap();
        for r in 0..6 {
            assert_eq!(tok.row(r), b.data());
        }
    }

    // Direct convolution loop, independent of the unfold + matmul path.
    fn conv_oracle(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let &[c, d, h, wd] = x.shape() else { panic!() };
        let e = w.shape()[0];
        let p = *w.shape().last().unwrap();
        let mut out = Vec::new();
        for gi in 0..h / p {
            for gj in 0..wd / p {
                for j in 0..e {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for di in 0..d {
                            for py in 0..p {
                                for px in 0..p {
                                    let xv = x.data()[((ci * d + di) * h + gi * p + py) * wd + gj * p + px];
                                    let wv = w.data()[(((j * c + ci) * d + di) * p + py) * p + px];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    out.push(acc + b.data()[j]);
                }
            }
        }
        out
    }

    #[test]
    fn embeddings_match_convolution_oracle() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 4], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[5, 2, 3, 2, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5], 1.0, &mut rng);
        assert_eq!(
            patch_embed_3d(&x, &w, &b).unwrap().data(),
            conv_oracle(&x, &w, &b).as_slice()
        );

        let x2 = Tensor::<f32>::randn(&[2, 6, 4], 1.0, &mut rng);
        let w2 = Tensor::<f32>::randn(&[5, 2, 2, 2], 1.0, &mut rng);
        let x2_as_3d = x2.clone().reshape(&[2, 1, 6, 4]).unwrap();
        let w2_as_3d = w2.clone().reshape(&[5, 2, 1, 2, 2]).unwrap();
        assert_eq!(
            patch_embed_2d(&x2, &w2, &b).unwrap().data(),
            conv_oracle(&x2_as_3d, &w2_as_3d, &b).as_slice()
        );
        assert_eq!(
            patch_embed_2d(&x2, &w2, &b).unwrap(),
            patch_embed_3d(&x2_as_3d, &w2_as_3d, &b).unwrap()
        );
    }

    #[test]
    fn embedding_shape_errors() {
        let w = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            patch_embed_2d(&Tensor::zeros(&[1, 4, 4]), &w, &b),
            Err(VitError::ShapeMismatch(_))
        ));
        let w3 = Tensor::<f32>::zeros(&[2, 1, 2, 2, 2]);
        assert!(matches!(
            patch_embed_3d(&Tensor::zeros(&[1, 3, 4, 4]), &w3, &b),
            Err(VitError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_layer_encoder_is_layer_norm_of_input() {
        let cfg = VitConfig {
            layers: 0,
            ..tiny(ModelKind::ThreeD, 3)
        };
        let p: VitParams<f64> = randomized(&cfg, 0.5, 4);
        let tokens = Tensor::<f64>::randn(&[4, 8], 1.0, &mut Rng::new(5));
        let out = encode(&tokens, &p, &cfg).unwrap();
        let mut x = p.cls.data().to_vec();
        x.extend_from_slice(tokens.data());
        for (v, &q) in x.iter_mut().zip(p.pos.data()) {
            *v += q;
        }
        let (want, _) = layer_norm(&Tensor::new(vec![5, 8], x).unwrap(), &p.final_ln.g, &p.final_ln.b).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn encoder_output_shape() {
        for (kind, depth) in [(ModelKind::TwoD, 1), (ModelKind::ThreeD, 3)] {
            let cfg = tiny(kind, depth);
            let p = VitParams::<f32>::init(&cfg, &mut Rng::new(6)).unwrap();
            let out = encode(&Tensor::zeros(&[4, 8]), &p, &cfg).unwrap();
            assert_eq!(out.shape(), &[5, 8]);
        }
    }

    #[test]
    fn decoder_zero_weights_broadcast_bias() {
        let cfg = tiny(ModelKind::ThreeD, 3);
        let mut p: VitParams<f32> = randomized(&cfg, 0.5, 7);
        p.decoder_w.fill(0.0);
        let enc = Tensor::<f32>::randn(&[5, 8], 1.0, &mut Rng::new(8));
        let logits = decode_linear(&enc, &p, &cfg).unwrap();
        for d in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = p.decoder_b.data()[(d * 2 + y % 2) * 2 + x % 2];
                    assert_eq!(logits.data()[(d * 4 + y) * 4 + x], want);
                }
            }
        }
    }

    #[test]
    fn single_patch_decoder_is_reshape() {
        let cfg = VitConfig {
            img_hw: (2, 2),
            ..tiny(ModelKind::ThreeD, 2)
        };
        let mut p: VitParams<f32> = randomized(&cfg, 0.5, 9);
        p.decoder_w.fill(0.0);
        let logits = decode_linear(&Tensor::zeros(&[2, 8]), &p, &cfg).unwrap();
        assert_eq!(logits.shape(), &[2, 2, 2]);
        assert_eq!(logits.data(), p.decoder_b.data());
    }

    #[test]
    fn decoder_perturbation_stays_in_patch() {
        let cfg = tiny(ModelKind::ThreeD, 3);
        let p: VitParams<f32> = randomized(&cfg, 0.5, 10);
        let enc = Tensor::<f32>::randn(&[5, 8], 1.0, &mut Rng::new(11));
        let base = decode_linear(&enc, &p, &cfg).unwrap();
        for token in 0..4 {
            let mut e2 = enc.clone();
            for v in &mut e2.data_mut()[(token + 1) * 8..(token + 2) * 8] {
                *v += 1.0;
            }
            let out = decode_linear(&e2, &p, &cfg).unwrap();
            let (gi, gj) = (token / 2, token % 2);
            for d in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let i = (d * 4 + y) * 4 + x;
                        let inside = y / 2 == gi && x / 2 == gj;
                        if !inside {
                            assert_eq!(out.data()[i], base.data()[i]);
                        }
                    }
                }
            }
            let changed = out.data().iter().zip(base.data()).filter(|(a, b)| a != b).count();
            assert!(changed > 0);
        }
    }

    #[test]
    fn forward_shapes_and_2d_3d_identity() {
        let cfg2 = tiny(ModelKind::TwoD, 1);
        let cfg3 = tiny(ModelKind::ThreeD, 1);
        let p2: VitParams<f32> = randomized(&cfg2, 0.3, 12);
        let mut p3 = p2.clone();
        p3.patch_w = p3.patch_w.reshape(&cfg3.patch_embed_shape()).unwrap();
        let img = Tensor::<f32>::randn(&[1, 4, 4], 1.0, &mut Rng::new(13));
        let out2 = forward_2d(&p2, &cfg2, &img).unwrap();
        let out3 = forward_3d(&p3, &cfg3, &img.clone().reshape(&[1, 1, 4, 4]).unwrap()).unwrap();
        assert_eq!(out2.shape(), &[1, 4, 4]);
        assert!(out2.bits_eq(&out3));

        let cfg = tiny(ModelKind::ThreeD, 3);
        let p: VitParams<f32> = randomized(&cfg, 0.3, 14);
        let blk = Tensor::<f32>::randn(&[1, 3, 4, 4], 1.0, &mut Rng::new(15));
        assert_eq!(forward_3d(&p, &cfg, &blk).unwrap().shape(), &[3, 4, 4]);
        assert!(forward_2d(&p, &cfg, &img).is_err());
    }

    #[test]
    fn encoder_permutation_equivariance_without_positions() {
        let cfg = tiny(ModelKind::ThreeD, 3);
        let mut p: VitParams<f64> = randomized(&cfg, 0.3, 16);
        p.pos.fill(0.0);
        let tokens = Tensor::<f64>::randn(&[4, 8], 1.0, &mut Rng::new(17));
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(tokens.row(i));
        }
        let out = encode(&tokens, &p, &cfg).unwrap();
        let out_p = encode(&Tensor::new(vec![4, 8], permuted).unwrap(), &p, &cfg).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for (a, b) in out_p.row(row + 1).iter().zip(out.row(src + 1)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encoder_gradient_of_mean_output() {
        let cfg = tiny(ModelKind::ThreeD, 3);
        for seed in 0..3 {
            let p: VitParams<f64> = randomized(&cfg, 0.3, 30 + seed);
            let input = Tensor::<f64>::randn(&[cfg.input_len()], 1.0, &mut Rng::new(40 + seed));
            let n_out = cfg.output_len() as f64;
            let (_, cache) = p.forward_cached(&cfg, input.data()).unwrap();
            let g = p.backward(&cfg, &cache, &vec![1.0 / n_out; cfg.output_len()]).unwrap();
            let mut probe = p.clone();
            let err = finite_difference_check(
                |flat| {
                    probe.unflatten_from(flat);
                    probe.forward(&cfg, input.data()).unwrap().data().iter().sum::<f64>() / n_out
                },
                &p.flatten(),
                &g.flatten(),
                1e-3,
            );
            assert!(err < 1e-2, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pos_interpolation() {
        let mut rng = Rng::new(18);
        let pos = Tensor::<f32>::randn(&[10, 3], 1.0, &mut rng);
        assert_eq!(interpolate_pos_embed(&pos, (3, 3), (3, 3)).unwrap(), pos);

        let c = Tensor::<f32>::full(&[5, 2], 0.75);
        let out = interpolate_pos_embed(&c, (2, 2), (4, 4)).unwrap();
        assert_eq!(out.shape(), &[17, 2]);
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));

        // f(r, c) = 1 + 2r - 3c on the 2x2 grid is reproduced exactly by
        // bilinear sampling at r = i/3, c = j/3.
        let mut ramp = vec![9.0f32];
        for r in 0..2 {
            for col in 0..2 {
                ramp.push(1.0 + 2.0 * r as f32 - 3.0 * col as f32);
            }
        }
        let out = interpolate_pos_embed(&Tensor::new(vec![5, 1], ramp).unwrap(), (2, 2), (4, 4)).unwrap();
        assert_eq!(out.data()[0], 9.0);
        for i in 0..4 {
            for j in 0..4 {
                let want = 1.0 + 2.0 * (i as f64 / 3.0) - 3.0 * (j as f64 / 3.0);
                assert!((out.data()[1 + i * 4 + j] as f64 - want).abs() < 1e-6);
            }
        }
        assert!(matches!(
            interpolate_pos_embed(&Tensor::<f32>::zeros(&[6, 2]), (2, 2), (3, 3)),
            Err(VitError::NonSquareGrid(5))
        ));
    }
}
