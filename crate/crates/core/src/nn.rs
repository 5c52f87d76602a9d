//! Parameter storage and transformer layers with explicit backward passes.
//!
//! All parameters of a model live in one flat [`ParamStore`]; layers hold
//! [`Slot`]s into it. Forward passes read `&[f64]` parameter buffers, and
//! backward passes accumulate into a gradient buffer of the same length, so
//! optimizers, checkpoints and finite-difference checks all work on plain
//! slices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::trunc_normal;
use crate::tensor::{gemm, matmul, matmul_nt, matmul_tn_acc};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Head,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (matrices yes; biases, norms
    /// and learned tokens no).
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        decay: bool,
    ) -> Slot {
        let len = shape.iter().product();
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            group,
            decay,
        });
        Slot { offset, len }
    }

    /// Rebuilds a store from a layout and a value buffer, checking that the
    /// layout tiles the buffer exactly.
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return Err(Error::Shape(format!(
                    "parameter `{}` has offset {}, expected {offset}",
                    s.name, s.offset
                )));
            }
            offset += s.len();
        }
        if offset != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {offset} values, buffer has {}",
                values.len()
            )));
        }
        Ok(Self { specs, values })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Per-coordinate group membership, in buffer order.
    pub fn group_of_each(&self) -> Vec<ParamGroup> {
        let mut out = Vec::with_capacity(self.values.len());
        for s in &self.specs {
            out.extend(core::iter::repeat_n(s.group, s.len()));
        }
        out
    }
}

/// Stochastic-regularization context for one forward pass.
#[derive(Debug)]
pub enum Mode<'a> {
    /// Deterministic inference: dropout disabled.
    Eval,
    Train {
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    /// Draws an inverted-dropout mask of `len` scale factors, or `None` when
    /// dropout is inactive.
    pub(crate) fn dropout_mask(&mut self, len: usize) -> Option<Vec<f64>> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let scale = 1.0 / keep;
                Some(
                    (0..len)
                        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    for v in out {
        *v = rng.gen_range(-a..a);
    }
}

pub(crate) fn fill_trunc_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out {
        *v = trunc_normal(rng, std);
    }
}

/// Affine map `y = x W + b` with `W` shaped `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.alloc(format!("{name}.weight"), &[d_in, d_out], group, true);
        let b = store.alloc(format!("{name}.bias"), &[d_out], group, false);
        Self { w, b, d_in, d_out }
    }

    pub(crate) fn init_xavier(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        xavier_uniform(rng, self.d_in, self.d_out, store.get_mut(self.w));
    }

    pub(crate) fn init_trunc_normal(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
        fill_trunc_normal(rng, std, store.get_mut(self.w));
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = matmul(x, &p[self.w.range()], rows, self.d_in, self.d_out);
        let b = &p[self.b.range()];
        for row in y.chunks_exact_mut(self.d_out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        self.backward_params(x, dy, rows, g);
        matmul_nt(dy, &p[self.w.range()], rows, self.d_out, self.d_in)
    }

    /// Like [`Linear::backward`] for inputs that need no gradient.
    pub fn backward_params(&self, x: &[f64], dy: &[f64], rows: usize, g: &mut [f64]) {
        matmul_tn_acc(x, dy, rows, self.d_in, self.d_out, &mut g[self.w.range()]);
        let gb = &mut g[self.b.range()];
        for row in dy.chunks_exact(self.d_out) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.alloc(format!("{name}.weight"), &[dim], group, false);
        let beta = store.alloc(format!("{name}.bias"), &[dim], group, false);
        store.get_mut(gamma).fill(1.0);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, NormCache) {
        let d = self.dim;
        let rows = x.len() / d;
        let (gamma, beta) = (&p[self.gamma.range()], &p[self.beta.range()]);
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                y[r * d + i] = xh * gamma[i] + beta[i];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let rows = dy.len() / d;
        let gamma = &p[self.gamma.range()];
        let mut dx = vec![0.0; dy.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for i in 0..d {
                dgamma[i] += dyr[i] * xh[i];
                dbeta[i] += dyr[i];
                dxhat[i] = dyr[i] * gamma[i];
                mean_dxhat += dxhat[i];
                mean_dxhat_xhat += dxhat[i] * xh[i];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let rs = cache.rstd[r];
            for i in 0..d {
                dx[r * d + i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
            }
        }
        for (a, v) in g[self.gamma.range()].iter_mut().zip(&dgamma) {
            *a += v;
        }
        for (a, v) in g[self.beta.range()].iter_mut().zip(&dbeta) {
            *a += v;
        }
        dx
    }
}

/// Multi-head self-attention over `[batch, seq, dim]` token blocks.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    qkv: Vec<f64>,
    /// Softmax probabilities, `[batch, heads, seq, seq]`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, group);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, group);
        Self {
            qkv,
            proj,
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        p: &[f64],
        x: &[f64],
        batch: usize,
        seq: usize,
    ) -> (Vec<f64>, AttentionCache) {
        let (d, h, dh) = (self.dim, self.heads, self.head_dim());
        let scale = 1.0 / libm::sqrt(dh as f64);
        let rows = batch * seq;
        let qkv = self.qkv.forward(p, x, rows);
        let mut probs = vec![0.0; batch * h * seq * seq];
        let mut ctx = vec![0.0; rows * d];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for head in 0..h {
                let q = &qkv[base + head * dh..];
                let k = &qkv[base + d + head * dh..];
                let v = &qkv[base + 2 * d + head * dh..];
                let pb = &mut probs[(b * h + head) * seq * seq..(b * h + head + 1) * seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    q,
                    3 * d,
                    1,
                    k,
                    1,
                    3 * d,
                    0.0,
                    pb,
                    seq,
                    1,
                );
                for row in pb.chunks_exact_mut(seq) {
                    softmax_in_place(row);
                }
                let out = &mut ctx[b * seq * d + head * dh..];
                gemm(seq, seq, dh, 1.0, pb, seq, 1, v, 3 * d, 1, 0.0, out, d, 1);
            }
        }
        let y = self.proj.forward(p, &ctx, rows);
        (y, AttentionCache { qkv, probs, ctx })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        cache: &AttentionCache,
        dy: &[f64],
        batch: usize,
        seq: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        let (d, h, dh) = (self.dim, self.heads, self.head_dim());
        let scale = 1.0 / libm::sqrt(dh as f64);
        let rows = batch * seq;
        let dctx = self.proj.backward(p, &cache.ctx, dy, rows, g);
        let mut dqkv = vec![0.0; rows * 3 * d];
        let mut dprobs = vec![0.0; seq * seq];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for head in 0..h {
                let qkv = &cache.qkv;
                let q = &qkv[base + head * dh..];
                let k = &qkv[base + d + head * dh..];
                let v = &qkv[base + 2 * d + head * dh..];
                let pb = &cache.probs[(b * h + head) * seq * seq..(b * h + head + 1) * seq * seq];
                let dc = &dctx[b * seq * d + head * dh..];
                // dP = dctx V^T
                gemm(
                    seq,
                    dh,
                    seq,
                    1.0,
                    dc,
                    d,
                    1,
                    v,
                    1,
                    3 * d,
                    0.0,
                    &mut dprobs,
                    seq,
                    1,
                );
                // dV = P^T dctx
                gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    pb,
                    1,
                    seq,
                    dc,
                    d,
                    1,
                    0.0,
                    &mut dqkv[base + 2 * d + head * dh..],
                    3 * d,
                    1,
                );
                // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                for (drow, prow) in dprobs.chunks_exact_mut(seq).zip(pb.chunks_exact(seq)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ = scale dS K ; dK = scale dS^T Q
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dprobs,
                    seq,
                    1,
                    k,
                    3 * d,
                    1,
                    0.0,
                    &mut dqkv[base + head * dh..],
                    3 * d,
                    1,
                );
                gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    &dprobs,
                    1,
                    seq,
                    q,
                    3 * d,
                    1,
                    0.0,
                    &mut dqkv[base + d + head * dh..],
                    3 * d,
                    1,
                );
            }
        }
        self.qkv.backward(p, x, &dqkv, rows, g)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, group),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, group),
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
        let pre = self.fc1.forward(p, x, rows);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.fc2.forward(p, &act, rows);
        (y, MlpCache { pre, act })
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        cache: &MlpCache,
        dy: &[f64],
        rows: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        let mut dact = self.fc2.backward(p, &cache.act, dy, rows, g);
        for (d, &pre) in dact.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(pre);
        }
        self.fc1.backward(p, x, &dact, rows, g)
    }
}

/// Pre-norm transformer block: `x + attn(ln1 x)` then `y + mlp(ln2 y)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: NormCache,
    ln1_out: Vec<f64>,
    attn: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln2: NormCache,
    ln2_out: Vec<f64>,
    mlp: MlpCache,
    drop2: Option<Vec<f64>>,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, group),
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, group),
        }
    }

    pub(crate) fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.attn.qkv.init_xavier(store, rng);
        self.attn.proj.init_xavier(store, rng);
        self.mlp.fc1.init_xavier(store, rng);
        self.mlp.fc2.init_xavier(store, rng);
    }

    pub fn forward(
        &self,
        p: &[f64],
        x: &[f64],
        batch: usize,
        seq: usize,
        mode: &mut Mode<'_>,
    ) -> (Vec<f64>, BlockCache) {
        let rows = batch * seq;
        let (ln1_out, ln1) = self.ln1.forward(p, x);
        let (mut a, attn) = self.attn.forward(p, &ln1_out, batch, seq);
        let drop1 = mode.dropout_mask(a.len());
        if let Some(m) = &drop1 {
            a.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        }
        let y: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let (ln2_out, ln2) = self.ln2.forward(p, &y);
        let (mut m, mlp) = self.mlp.forward(p, &ln2_out, rows);
        let drop2 = mode.dropout_mask(m.len());
        if let Some(mask) = &drop2 {
            m.iter_mut().zip(mask).for_each(|(v, s)| *v *= s);
        }
        let z: Vec<f64> = y.iter().zip(&m).map(|(u, v)| u + v).collect();
        (
            z,
            BlockCache {
                ln1,
                ln1_out,
                attn,
                drop1,
                ln2,
                ln2_out,
                mlp,
                drop2,
            },
        )
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &BlockCache,
        dz: &[f64],
        batch: usize,
        seq: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        let rows = batch * seq;
        let mut dm = dz.to_vec();
        if let Some(mask) = &cache.drop2 {
            dm.iter_mut().zip(mask).for_each(|(v, s)| *v *= s);
        }
        let dln2 = self
            .mlp
            .backward(p, &cache.ln2_out, &cache.mlp, &dm, rows, g);
        let dy_norm = self.ln2.backward(p, &cache.ln2, &dln2, g);
        let dy: Vec<f64> = dz.iter().zip(&dy_norm).map(|(a, b)| a + b).collect();
        let mut da = dy.clone();
        if let Some(mask) = &cache.drop1 {
            da.iter_mut().zip(mask).for_each(|(v, s)| *v *= s);
        }
        let dln1 = self
            .attn
            .backward(p, &cache.ln1_out, &cache.attn, &da, batch, seq, g);
        let dx_norm = self.ln1.backward(p, &cache.ln1, &dln1, g);
        dy.iter().zip(&dx_norm).map(|(a, b)| a + b).collect()
    }
}
