//! Masked-autoencoder branch: random patch masking, encoding of the visible
//! subset with the shared encoder, a lightweight decoder that fills masked
//! positions with a learned mask token, and the masked-pixel MSE.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{MaeConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    fill_trunc_normal, Block, BlockCache, LayerNorm, Linear, Mode, NormCache, ParamGroup,
    ParamStore, Slot,
};
use crate::patch::PatchGrid;
use crate::vit::{sincos_2d, Encoder, TokenSequence};

/// Number of visible patches kept out of `n` at `mask_ratio`.
pub fn visible_count(n: usize, mask_ratio: f64) -> usize {
    libm::round(n as f64 * (1.0 - mask_ratio)) as usize
}

/// Per-sample masking record.
///
/// For sample `b`, `visible_idx` lists the kept patches in shuffled order,
/// `masked_idx` the removed ones, and `restore_perm[j]` is the shuffled
/// position of row-major patch `j` (positions `< num_visible` are visible).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub batch: usize,
    pub num_patches: usize,
    pub num_visible: usize,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub restore_perm: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from per-sample shuffled patch orders (`batch * n`
    /// entries); the first `num_visible` of each order are kept.
    pub fn from_shuffled(
        batch: usize,
        num_patches: usize,
        num_visible: usize,
        shuffled: &[usize],
    ) -> Result<Self> {
        if shuffled.len() != batch * num_patches || num_visible > num_patches {
            return Err(Error::Shape(format!(
                "shuffle of {} entries does not describe {batch} samples of {num_patches} patches",
                shuffled.len()
            )));
        }
        let n = num_patches;
        let mut visible_idx = Vec::with_capacity(batch * num_visible);
        let mut masked_idx = Vec::with_capacity(batch * (n - num_visible));
        let mut restore_perm = vec![usize::MAX; batch * n];
        for b in 0..batch {
            let order = &shuffled[b * n..(b + 1) * n];
            for (pos, &j) in order.iter().enumerate() {
                if j >= n || restore_perm[b * n + j] != usize::MAX {
                    return Err(Error::Masking(format!(
                        "sample {b}: shuffled order is not a permutation"
                    )));
                }
                restore_perm[b * n + j] = pos;
            }
            visible_idx.extend_from_slice(&order[..num_visible]);
            masked_idx.extend_from_slice(&order[num_visible..]);
        }
        Ok(Self {
            batch,
            num_patches: n,
            num_visible,
            visible_idx,
            masked_idx,
            restore_perm,
        })
    }

    pub fn num_masked(&self) -> usize {
        self.num_patches - self.num_visible
    }

    pub fn visible(&self, b: usize) -> &[usize] {
        &self.visible_idx[b * self.num_visible..(b + 1) * self.num_visible]
    }

    pub fn masked(&self, b: usize) -> &[usize] {
        let m = self.num_masked();
        &self.masked_idx[b * m..(b + 1) * m]
    }

    pub fn restore(&self, b: usize) -> &[usize] {
        &self.restore_perm[b * self.num_patches..(b + 1) * self.num_patches]
    }

    pub fn is_masked(&self, b: usize, j: usize) -> bool {
        self.restore(b)[j] >= self.num_visible
    }

    /// Checks the partition and permutation invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches;
        for b in 0..self.batch {
            let mut seen = vec![false; n];
            for &j in self.visible(b).iter().chain(self.masked(b)) {
                if j >= n || seen[j] {
                    return Err(Error::Masking(format!(
                        "sample {b}: index {j} repeated or out of range"
                    )));
                }
                seen[j] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Masking(format!(
                    "sample {b}: partition does not cover all patches"
                )));
            }
            let restore = self.restore(b);
            for (pos, &j) in self.visible(b).iter().chain(self.masked(b)).enumerate() {
                if restore[j] != pos {
                    return Err(Error::Masking(format!(
                        "sample {b}: restore_perm disagrees with shuffle"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Visible patches `[batch, num_visible, patch_dim]` in shuffled order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisiblePatches {
    pub batch: usize,
    pub count: usize,
    pub patch_dim: usize,
    pub patches: Vec<f64>,
}

/// Gathers the visible patches named by `plan`.
pub fn gather_visible(grid: &PatchGrid, plan: &MaskPlan) -> Result<VisiblePatches> {
    if grid.batch != plan.batch || grid.num_patches() != plan.num_patches {
        return Err(Error::Shape(format!(
            "plan for {}x{} patches applied to a {}x{} grid",
            plan.batch,
            plan.num_patches,
            grid.batch,
            grid.num_patches()
        )));
    }
    let l = grid.patch_dim();
    let mut patches = Vec::with_capacity(plan.batch * plan.num_visible * l);
    for b in 0..plan.batch {
        for &j in plan.visible(b) {
            patches.extend_from_slice(grid.patch(b, j));
        }
    }
    Ok(VisiblePatches {
        batch: plan.batch,
        count: plan.num_visible,
        patch_dim: l,
        patches,
    })
}

/// Independent uniform shuffle per sample; the first
/// `round(N * (1 - mask_ratio))` shuffled patches stay visible.
pub fn random_masking(
    grid: &PatchGrid,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(VisiblePatches, MaskPlan)> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Masking(format!(
            "mask ratio {mask_ratio} outside [0, 1)"
        )));
    }
    let n = grid.num_patches();
    let keep = visible_count(n, mask_ratio);
    let mut shuffled = Vec::with_capacity(grid.batch * n);
    for _ in 0..grid.batch {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        shuffled.extend(order);
    }
    let plan = MaskPlan::from_shuffled(grid.batch, n, keep, &shuffled)?;
    let visible = gather_visible(grid, &plan)?;
    Ok((visible, plan))
}

/// Pixel-space prediction for every patch position, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub batch: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    /// `[batch, num_patches, patch_dim]`.
    pub pred: Vec<f64>,
}

impl Reconstruction {
    pub fn patch(&self, b: usize, j: usize) -> &[f64] {
        let off = (b * self.num_patches + j) * self.patch_dim;
        &self.pred[off..off + self.patch_dim]
    }
}

/// The small decoder, with parameters independent of the encoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: Slot,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
    pub width: usize,
    pub num_patches: usize,
    pos_embed: Vec<f64>,
}

pub(crate) struct DecodeTrace {
    latent: Vec<f64>,
    batch: usize,
    lead: usize,
    plan: MaskPlan,
    caches: Vec<BlockCache>,
    norm: NormCache,
    normed: Vec<f64>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let g = ParamGroup::Decoder;
        let grid = cfg.image_size / cfg.patch_size;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let embed = Linear::new(
            store,
            "decoder.embed",
            cfg.encoder_width,
            cfg.decoder_width,
            g,
        );
        let mask_token = store.alloc("decoder.mask_token", &[cfg.decoder_width], g, false);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    cfg.decoder_width,
                    cfg.decoder_heads,
                    cfg.mlp_ratio,
                    g,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", cfg.decoder_width, g);
        let pred = Linear::new(store, "decoder.pred", cfg.decoder_width, patch_dim, g);
        Self {
            embed,
            mask_token,
            blocks,
            norm,
            pred,
            width: cfg.decoder_width,
            num_patches: grid * grid,
            pos_embed: sincos_2d(cfg.decoder_width, grid, grid, true),
        }
    }

    pub(crate) fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.embed.init_xavier(store, rng);
        fill_trunc_normal(rng, 0.02, store.get_mut(self.mask_token));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.pred.init_xavier(store, rng);
    }

    pub fn patch_dim(&self) -> usize {
        self.pred.d_out
    }

    /// Projects the latent, inserts mask tokens, restores row-major order,
    /// adds positions, runs the blocks and predicts pixels per patch.
    ///
    /// `latent` holds the encoder output for the visible patches in the
    /// plan's shuffled order, optionally preceded by a class token.
    pub fn decode(
        &self,
        p: &[f64],
        latent: &TokenSequence,
        plan: &MaskPlan,
    ) -> Result<Reconstruction> {
        Ok(self.decode_traced(p, latent, plan)?.0)
    }

    pub(crate) fn decode_traced(
        &self,
        p: &[f64],
        latent: &TokenSequence,
        plan: &MaskPlan,
    ) -> Result<(Reconstruction, DecodeTrace)> {
        let lead = latent.has_class_token as usize;
        if latent.batch != plan.batch
            || latent.len != plan.num_visible + lead
            || plan.num_patches != self.num_patches
        {
            return Err(Error::Shape(format!(
                "latent [{}, {}] does not match a plan with {} visible of {} patches for batch {}",
                latent.batch, latent.len, plan.num_visible, plan.num_patches, plan.batch
            )));
        }
        if latent.width != self.embed.d_in {
            return Err(Error::Shape(format!(
                "latent width {} does not match decoder input width {}",
                latent.width, self.embed.d_in
            )));
        }
        let (batch, n, dd) = (latent.batch, self.num_patches, self.width);
        let x = self.embed.forward(p, &latent.tokens, batch * latent.len);
        let seq = lead + n;
        let mask = &p[self.mask_token.range()];
        let mut full = vec![0.0; batch * seq * dd];
        for b in 0..batch {
            let src_base = b * latent.len;
            let dst_base = b * seq;
            if lead == 1 {
                full[dst_base * dd..(dst_base + 1) * dd]
                    .copy_from_slice(&x[src_base * dd..(src_base + 1) * dd]);
            }
            for (j, &r) in plan.restore(b).iter().enumerate() {
                let src = if r < plan.num_visible {
                    &x[(src_base + lead + r) * dd..(src_base + lead + r + 1) * dd]
                } else {
                    mask
                };
                let pos = &self.pos_embed[(1 + j) * dd..(2 + j) * dd];
                let dst = &mut full[(dst_base + lead + j) * dd..(dst_base + lead + j + 1) * dd];
                for ((o, s), e) in dst.iter_mut().zip(src).zip(pos) {
                    *o = s + e;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(p, &full, batch, seq, &mut Mode::Eval);
            caches.push(cache);
            full = y;
        }
        let mut rows = Vec::with_capacity(batch * n * dd);
        for b in 0..batch {
            rows.extend_from_slice(&full[(b * seq + lead) * dd..(b + 1) * seq * dd]);
        }
        let (normed, norm) = self.norm.forward(p, &rows);
        let pred = self.pred.forward(p, &normed, batch * n);
        let rec = Reconstruction {
            batch,
            num_patches: n,
            patch_dim: self.patch_dim(),
            pred,
        };
        let trace = DecodeTrace {
            latent: latent.tokens.clone(),
            batch,
            lead,
            plan: plan.clone(),
            caches,
            norm,
            normed,
        };
        Ok((rec, trace))
    }

    /// Accumulates decoder gradients and returns `dL/d latent`.
    pub(crate) fn decode_backward(
        &self,
        p: &[f64],
        trace: &DecodeTrace,
        d_pred: &[f64],
        g: &mut [f64],
    ) -> Vec<f64> {
        let (batch, n, dd, lead) = (trace.batch, self.num_patches, self.width, trace.lead);
        let plan = &trace.plan;
        let seq = lead + n;
        let d_normed = self.pred.backward(p, &trace.normed, d_pred, batch * n, g);
        let d_rows = self.norm.backward(p, &trace.norm, &d_normed, g);
        let mut d_full = vec![0.0; batch * seq * dd];
        for b in 0..batch {
            d_full[(b * seq + lead) * dd..(b + 1) * seq * dd]
                .copy_from_slice(&d_rows[b * n * dd..(b + 1) * n * dd]);
        }
        for (block, cache) in self.blocks.iter().zip(&trace.caches).rev() {
            d_full = block.backward(p, cache, &d_full, batch, seq, g);
        }
        let latent_len = lead + plan.num_visible;
        let mut dx = vec![0.0; batch * latent_len * dd];
        let mut d_mask = vec![0.0; dd];
        for b in 0..batch {
            if lead == 1 {
                dx[b * latent_len * dd..(b * latent_len + 1) * dd]
                    .copy_from_slice(&d_full[b * seq * dd..(b * seq + 1) * dd]);
            }
            for (j, &r) in plan.restore(b).iter().enumerate() {
                let src = &d_full[(b * seq + lead + j) * dd..(b * seq + lead + j + 1) * dd];
                let dst = if r < plan.num_visible {
                    let off = (b * latent_len + lead + r) * dd;
                    &mut dx[off..off + dd]
                } else {
                    &mut d_mask[..]
                };
                for (a, v) in dst.iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
        for (a, v) in g[self.mask_token.range()].iter_mut().zip(&d_mask) {
            *a += v;
        }
        self.embed
            .backward(p, &trace.latent, &dx, batch * latent_len, g)
    }
}

const NORM_PIX_EPS: f64 = 1e-6;

fn check_loss_inputs(pred: &Reconstruction, target: &PatchGrid, plan: &MaskPlan) -> Result<()> {
    if pred.batch != target.batch
        || pred.num_patches != target.num_patches()
        || pred.patch_dim != target.patch_dim()
        || plan.batch != pred.batch
        || plan.num_patches != pred.num_patches
    {
        return Err(Error::Shape(format!(
            "reconstruction [{}, {}, {}], target [{}, {}, {}] and plan [{}, {}] disagree",
            pred.batch,
            pred.num_patches,
            pred.patch_dim,
            target.batch,
            target.num_patches(),
            target.patch_dim(),
            plan.batch,
            plan.num_patches
        )));
    }
    Ok(())
}

/// Standardizes a patch by its own mean and (unbiased) variance.
pub fn normalize_patch(patch: &[f64]) -> Vec<f64> {
    let l = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / l;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (l - 1.0).max(1.0);
    let scale = 1.0 / libm::sqrt(var + NORM_PIX_EPS);
    patch.iter().map(|v| (v - mean) * scale).collect()
}

/// Maps a prediction made against a standardized target back to pixel
/// space using the statistics of `reference`.
pub fn denormalize_patch(pred: &[f64], reference: &[f64]) -> Vec<f64> {
    let l = reference.len() as f64;
    let mean = reference.iter().sum::<f64>() / l;
    let var = reference
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (l - 1.0).max(1.0);
    let scale = libm::sqrt(var + NORM_PIX_EPS);
    pred.iter().map(|z| z * scale + mean).collect()
}

/// Mean squared pixel error over masked patches only.
///
/// The average runs over every pixel of every masked patch in the batch;
/// with nothing masked the loss is 0. With `norm_pix_target`, each target
/// patch is standardized first.
pub fn mae_loss(
    pred: &Reconstruction,
    target: &PatchGrid,
    plan: &MaskPlan,
    norm_pix_target: bool,
) -> Result<f64> {
    Ok(mae_loss_grad(pred, target, plan, norm_pix_target)?.0)
}

/// [`mae_loss`] together with `dL/d pred`, which is exactly zero at every
/// visible position.
pub fn mae_loss_grad(
    pred: &Reconstruction,
    target: &PatchGrid,
    plan: &MaskPlan,
    norm_pix_target: bool,
) -> Result<(f64, Vec<f64>)> {
    check_loss_inputs(pred, target, plan)?;
    let l = pred.patch_dim;
    let count = (plan.batch * plan.num_masked() * l) as f64;
    let mut grad = vec![0.0; pred.pred.len()];
    if count == 0.0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for b in 0..plan.batch {
        for &j in plan.masked(b) {
            let t = target.patch(b, j);
            let normed;
            let t = if norm_pix_target {
                normed = normalize_patch(t);
                &normed[..]
            } else {
                t
            };
            let off = (b * pred.num_patches + j) * l;
            for k in 0..l {
                let diff = pred.pred[off + k] - t[k];
                sum += diff * diff;
                grad[off + k] = 2.0 * diff / count;
            }
        }
    }
    Ok((sum / count, grad))
}

/// A masked-image-modeling objective that shares the classifier's encoder.
///
/// Implementations own their extra parameters inside the model's
/// [`ParamStore`]. Randomness is confined to [`MimBranch::plan`], so a fixed
/// plan makes the loss a deterministic function of the parameters.
pub trait MimBranch {
    type Plan: Clone + core::fmt::Debug;

    fn name(&self) -> &'static str;

    fn plan(&self, grid: &PatchGrid, rng: &mut ChaCha8Rng) -> Result<Self::Plan>;

    fn loss(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &Self::Plan,
    ) -> Result<f64>;

    /// Returns the loss and accumulates `scale * dL/dθ` into `g`.
    #[allow(clippy::too_many_arguments)]
    fn loss_and_grad(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &Self::Plan,
        mode: &mut Mode<'_>,
        scale: f64,
        g: &mut [f64],
    ) -> Result<f64>;
}

/// The MAE objective.
#[derive(Clone, Debug)]
pub struct MaeBranch {
    pub decoder: Decoder,
    pub mask_ratio: f64,
    pub norm_pix_target: bool,
}

struct MaeForward {
    visible: VisiblePatches,
    encode: crate::vit::EncodeTrace,
    enc_norm: NormCache,
    decode: DecodeTrace,
    rec: Reconstruction,
}

impl MaeBranch {
    pub fn new(store: &mut ParamStore, model: &ModelConfig, mae: &MaeConfig) -> Self {
        Self {
            decoder: Decoder::new(store, model),
            mask_ratio: mae.mask_ratio,
            norm_pix_target: mae.norm_pix_target,
        }
    }

    pub(crate) fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.decoder.init(store, rng);
    }

    /// Encoder latent (class token + visible tokens, normalized) for a plan.
    pub fn latent(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &MaskPlan,
        mode: &mut Mode<'_>,
    ) -> Result<TokenSequence> {
        let visible = gather_visible(grid, plan)?;
        let tokens = encoder.embed(
            p,
            &visible.patches,
            visible.batch,
            visible.count,
            &plan.visible_idx,
        );
        let tokens = encoder.prepend_class_token(p, &tokens);
        let out = encoder.encode(p, &tokens, mode)?;
        let (normed, _) = encoder.norm.forward(p, &out.tokens);
        Ok(TokenSequence {
            tokens: normed,
            ..out
        })
    }

    pub fn reconstruct(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<Reconstruction> {
        let latent = self.latent(p, encoder, grid, plan, &mut Mode::Eval)?;
        self.decoder.decode(p, &latent, plan)
    }

    fn forward(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &MaskPlan,
        mode: &mut Mode<'_>,
    ) -> Result<MaeForward> {
        let visible = gather_visible(grid, plan)?;
        let tokens = encoder.embed(
            p,
            &visible.patches,
            visible.batch,
            visible.count,
            &plan.visible_idx,
        );
        let tokens = encoder.prepend_class_token(p, &tokens);
        let (out, encode) = encoder.encode_traced(p, &tokens, mode)?;
        let (normed, enc_norm) = encoder.norm.forward(p, &out.tokens);
        let latent = TokenSequence {
            tokens: normed,
            ..out
        };
        let (rec, decode) = self.decoder.decode_traced(p, &latent, plan)?;
        Ok(MaeForward {
            visible,
            encode,
            enc_norm,
            decode,
            rec,
        })
    }
}

impl MimBranch for MaeBranch {
    type Plan = MaskPlan;

    fn name(&self) -> &'static str {
        "mae"
    }

    fn plan(&self, grid: &PatchGrid, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
        Ok(random_masking(grid, self.mask_ratio, rng)?.1)
    }

    fn loss(&self, p: &[f64], encoder: &Encoder, grid: &PatchGrid, plan: &MaskPlan) -> Result<f64> {
        let rec = self.reconstruct(p, encoder, grid, plan)?;
        mae_loss(&rec, grid, plan, self.norm_pix_target)
    }

    fn loss_and_grad(
        &self,
        p: &[f64],
        encoder: &Encoder,
        grid: &PatchGrid,
        plan: &MaskPlan,
        mode: &mut Mode<'_>,
        scale: f64,
        g: &mut [f64],
    ) -> Result<f64> {
        let fwd = self.forward(p, encoder, grid, plan, mode)?;
        let (loss, mut d_pred) = mae_loss_grad(&fwd.rec, grid, plan, self.norm_pix_target)?;
        d_pred.iter_mut().for_each(|v| *v *= scale);
        let d_latent = self.decoder.decode_backward(p, &fwd.decode, &d_pred, g);
        let d_out = encoder.norm.backward(p, &fwd.enc_norm, &d_latent, g);
        let d_tokens = encoder.encode_backward(p, &fwd.encode, d_out, g);
        encoder.embed_backward(
            &fwd.visible.patches,
            &d_tokens,
            fwd.visible.batch,
            fwd.visible.count,
            g,
        );
        Ok(loss)
    }
}
