//! Vision Transformer backbone: patch embedding, fixed 2-D sine-cosine
//! positions, pre-norm transformer blocks and a class-token head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
pub use crate::nn::Mode;
use crate::nn::{
    fill_trunc_normal, Block, BlockCache, LayerNorm, Linear, NormCache, ParamGroup, ParamStore,
    Slot,
};
use crate::patch::patchify;
use crate::tensor::Images;

/// Tokens `[batch, len, width]` flowing through an encoder or decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub tokens: Vec<f64>,
    /// Positional embeddings have been added.
    pub positional: bool,
    /// Row 0 of every sample is the class token.
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn token(&self, b: usize, t: usize) -> &[f64] {
        let off = (b * self.len + t) * self.width;
        &self.tokens[off..off + self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl Logits {
    pub fn new(batch: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * classes {
            return Err(Error::Shape(format!(
                "logit buffer has {} values, expected {batch}x{classes}",
                values.len()
            )));
        }
        Ok(Self {
            batch,
            classes,
            values,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    /// Row-wise softmax.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = self.values.clone();
        for row in out.chunks_exact_mut(self.classes) {
            crate::nn::softmax_in_place(row);
        }
        out
    }

    /// Index of the largest logit per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.batch).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed 2-D sine-cosine table shaped `[(class_token as usize) + gh*gw, dim]`.
///
/// The first half of the width encodes the column coordinate and the second
/// half the row coordinate; each half is `[sin(pos * w_k), cos(pos * w_k)]`
/// with `w_k = 10000^(-k / (dim/4))`. The class-token row, when present, is
/// zero.
pub fn sincos_2d(dim: usize, grid_h: usize, grid_w: usize, class_token: bool) -> Vec<f64> {
    assert!(
        dim.is_multiple_of(4),
        "sine-cosine width must be divisible by 4"
    );
    let quarter = dim / 4;
    let lead = class_token as usize;
    let mut table = vec![0.0; (lead + grid_h * grid_w) * dim];
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / libm::pow(10000.0, k as f64 / quarter as f64))
        .collect();
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = &mut table[(lead + y * grid_w + x) * dim..(lead + y * grid_w + x + 1) * dim];
            for (half, pos) in [(0, x as f64), (1, y as f64)] {
                for k in 0..quarter {
                    row[half * 2 * quarter + k] = libm::sin(pos * omega[k]);
                    row[half * 2 * quarter + quarter + k] = libm::cos(pos * omega[k]);
                }
            }
        }
    }
    table
}

/// The shared transformer encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub cls_token: Slot,
    pub blocks: Vec<Block>,
    /// Final norm applied to encoder outputs by both heads.
    pub norm: LayerNorm,
    pub width: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_patches: usize,
    pos_embed: Vec<f64>,
}

pub(crate) struct EncodeTrace {
    caches: Vec<BlockCache>,
    batch: usize,
    len: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let g = ParamGroup::Encoder;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let grid = cfg.image_size / cfg.patch_size;
        let patch_embed = Linear::new(
            store,
            "encoder.patch_embed",
            patch_dim,
            cfg.encoder_width,
            g,
        );
        let cls_token = store.alloc("encoder.cls_token", &[cfg.encoder_width], g, false);
        let blocks = (0..cfg.encoder_depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("encoder.blocks.{i}"),
                    cfg.encoder_width,
                    cfg.encoder_heads,
                    cfg.mlp_ratio,
                    g,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", cfg.encoder_width, g);
        Self {
            patch_embed,
            cls_token,
            blocks,
            norm,
            width: cfg.encoder_width,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            channels: cfg.channels,
            num_patches: grid * grid,
            pos_embed: sincos_2d(cfg.encoder_width, grid, grid, true),
        }
    }

    pub(crate) fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.patch_embed.init_xavier(store, rng);
        fill_trunc_normal(rng, 0.02, store.get_mut(self.cls_token));
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Position-table row for patch `j` (row 0 belongs to the class token).
    pub fn position(&self, j: usize) -> &[f64] {
        &self.pos_embed[(1 + j) * self.width..(2 + j) * self.width]
    }

    pub(crate) fn check_images(&self, images: &Images) -> Result<()> {
        if images.c != self.channels || images.h != self.image_size || images.w != self.image_size {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} images, got {}x{}x{}",
                self.channels, self.image_size, self.image_size, images.c, images.h, images.w
            )));
        }
        Ok(())
    }

    /// Linear patch embedding plus the positional row for each patch.
    ///
    /// `patches` holds `batch * count` flattened patches and `positions`
    /// gives the row-major grid index of each one.
    pub fn embed(
        &self,
        p: &[f64],
        patches: &[f64],
        batch: usize,
        count: usize,
        positions: &[usize],
    ) -> TokenSequence {
        debug_assert_eq!(positions.len(), batch * count);
        let mut tokens = self.patch_embed.forward(p, patches, batch * count);
        let d = self.width;
        for (row, &j) in tokens.chunks_exact_mut(d).zip(positions) {
            for (v, e) in row.iter_mut().zip(self.position(j)) {
                *v += e;
            }
        }
        TokenSequence {
            batch,
            len: count,
            width: d,
            tokens,
            positional: true,
            has_class_token: false,
        }
    }

    pub fn prepend_class_token(&self, p: &[f64], seq: &TokenSequence) -> TokenSequence {
        let d = self.width;
        let cls = &p[self.cls_token.range()];
        let len = seq.len + 1;
        let mut tokens = Vec::with_capacity(seq.batch * len * d);
        for b in 0..seq.batch {
            tokens.extend_from_slice(cls);
            tokens.extend_from_slice(&seq.tokens[b * seq.len * d..(b + 1) * seq.len * d]);
        }
        TokenSequence {
            batch: seq.batch,
            len,
            width: d,
            tokens,
            positional: seq.positional,
            has_class_token: true,
        }
    }

    /// Runs the transformer blocks. Any sequence length is accepted; the
    /// output has the input's shape.
    pub fn encode(
        &self,
        p: &[f64],
        tokens: &TokenSequence,
        mode: &mut Mode<'_>,
    ) -> Result<TokenSequence> {
        Ok(self.encode_traced(p, tokens, mode)?.0)
    }

    pub(crate) fn encode_traced(
        &self,
        p: &[f64],
        tokens: &TokenSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(TokenSequence, EncodeTrace)> {
        if tokens.width != self.width {
            return Err(Error::Shape(format!(
                "token width {} does not match encoder width {}",
                tokens.width, self.width
            )));
        }
        let mut x = tokens.tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(p, &x, tokens.batch, tokens.len, mode);
            caches.push(cache);
            x = y;
        }
        let out = TokenSequence {
            tokens: x,
            ..tokens.clone()
        };
        Ok((
            out,
            EncodeTrace {
                caches,
                batch: tokens.batch,
                len: tokens.len,
            },
        ))
    }

    pub(crate) fn encode_backward(
        &self,
        p: &[f64],
        trace: &EncodeTrace,
        d_out: Vec<f64>,
        g: &mut [f64],
    ) -> Vec<f64> {
        let mut d = d_out;
        for (block, cache) in self.blocks.iter().zip(&trace.caches).rev() {
            d = block.backward(p, cache, &d, trace.batch, trace.len, g);
        }
        d
    }

    /// Routes gradients of a `[batch, 1 + count, width]` token block (class
    /// token first) into the class token and patch-embedding parameters.
    pub(crate) fn embed_backward(
        &self,
        patches: &[f64],
        d_tokens: &[f64],
        batch: usize,
        count: usize,
        g: &mut [f64],
    ) {
        let d = self.width;
        let len = count + 1;
        let mut d_patch = Vec::with_capacity(batch * count * d);
        let gc = &mut g[self.cls_token.range()];
        for b in 0..batch {
            let sample = &d_tokens[b * len * d..(b + 1) * len * d];
            for (a, v) in gc.iter_mut().zip(&sample[..d]) {
                *a += v;
            }
            d_patch.extend_from_slice(&sample[d..]);
        }
        self.patch_embed
            .backward_params(patches, &d_patch, batch * count, g);
    }
}

/// Encoder plus class-token classification head.
#[derive(Clone, Debug)]
pub struct Vit {
    pub encoder: Encoder,
    pub head: Linear,
    pub num_classes: usize,
}

pub(crate) struct ClassifyTrace {
    patches: Vec<f64>,
    batch: usize,
    encode: EncodeTrace,
    norm: NormCache,
    features: Vec<f64>,
}

impl Vit {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let encoder = Encoder::new(store, cfg);
        let head = Linear::new(
            store,
            "head",
            cfg.encoder_width,
            cfg.num_classes,
            ParamGroup::Head,
        );
        Self {
            encoder,
            head,
            num_classes: cfg.num_classes,
        }
    }

    pub(crate) fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        self.head.init_trunc_normal(store, rng, 0.02);
    }

    /// `patchify -> embed (+ class token, positions) -> encode -> norm ->
    /// head(class token)`.
    pub fn classify(&self, p: &[f64], images: &Images, mode: &mut Mode<'_>) -> Result<Logits> {
        Ok(self.classify_traced(p, images, mode)?.0)
    }

    /// Normalized class-token features `[batch, width]`.
    pub fn features(&self, p: &[f64], images: &Images, mode: &mut Mode<'_>) -> Result<Vec<f64>> {
        Ok(self.classify_traced(p, images, mode)?.1.features)
    }

    pub(crate) fn classify_traced(
        &self,
        p: &[f64],
        images: &Images,
        mode: &mut Mode<'_>,
    ) -> Result<(Logits, ClassifyTrace)> {
        let enc = &self.encoder;
        enc.check_images(images)?;
        let grid = patchify(images, enc.patch_size)?;
        let n = grid.num_patches();
        let batch = images.n;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let tokens = enc.embed(p, &grid.patches, batch, n, &positions);
        let tokens = enc.prepend_class_token(p, &tokens);
        let (out, encode) = enc.encode_traced(p, &tokens, mode)?;
        let d = enc.width;
        let mut cls = Vec::with_capacity(batch * d);
        for b in 0..batch {
            cls.extend_from_slice(out.token(b, 0));
        }
        let (features, norm) = enc.norm.forward(p, &cls);
        let values = self.head.forward(p, &features, batch);
        let logits = Logits {
            batch,
            classes: self.num_classes,
            values,
        };
        Ok((
            logits,
            ClassifyTrace {
                patches: grid.patches,
                batch,
                encode,
                norm,
                features,
            },
        ))
    }

    pub(crate) fn classify_backward(
        &self,
        p: &[f64],
        trace: &ClassifyTrace,
        d_logits: &[f64],
        g: &mut [f64],
    ) {
        let enc = &self.encoder;
        let (batch, d, len) = (trace.batch, enc.width, trace.encode.len);
        let d_feat = self.head.backward(p, &trace.features, d_logits, batch, g);
        let d_cls = enc.norm.backward(p, &trace.norm, &d_feat, g);
        let mut d_out = vec![0.0; batch * len * d];
        for b in 0..batch {
            d_out[b * len * d..b * len * d + d].copy_from_slice(&d_cls[b * d..(b + 1) * d]);
        }
        let d_tokens = enc.encode_backward(p, &trace.encode, d_out, g);
        enc.embed_backward(&trace.patches, &d_tokens, batch, len - 1, g);
    }
}
