use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{ConvPadding, Tensor, Var};

/// Additive score mask: position `t` sees `[t - left, t + right]` clipped to
/// the sequence; everything else is `-inf`.
pub fn attention_mask(len: usize, left: Option<usize>, right: usize) -> Tensor {
    let mut m = Tensor::full(&[len, len], f64::NEG_INFINITY);
    for t in 0..len {
        let lo = left.map_or(0, |l| t.saturating_sub(l));
        let hi = (t + right).min(len - 1);
        for j in lo..=hi {
            m.data_mut()[t * len + j] = 0.0;
        }
    }
    m
}

/// Multi-head scaled dot-product self-attention over a limited window.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub left: Option<usize>,
    pub right: usize,
}

impl SelfAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        left: Option<usize>,
        right: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            left,
            right,
        })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (len, dim) = (shape[0], shape[1]);
        let dh = dim / self.heads;
        let tape = p.tape();
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        let mask = tape.constant(attention_mask(len, self.left, self.right));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale).add(mask)?;
            heads.push(scores.softmax().matmul(vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.out.forward(p, joined)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            up: Linear::new(store, &format!("{name}.up"), dim, 4 * dim, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * dim, dim, true, rng)?,
        })
    }

    fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(p, self.norm.forward(p, x)?)?.swish();
        self.down.forward(p, h)
    }
}

/// Pointwise → GLU → depthwise conv → swish → pointwise.
#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    expand: Linear,
    depthwise: ParamId,
    project: Linear,
    padding: ConvPadding,
    dim: usize,
}

impl ConvModule {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernel: usize,
        padding: ConvPadding,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            expand: Linear::new(store, &format!("{name}.expand"), dim, 2 * dim, true, rng)?,
            depthwise: store.add_uniform(&format!("{name}.depthwise"), &[kernel, dim], kernel, rng)?,
            project: Linear::new(store, &format!("{name}.project"), dim, dim, true, rng)?,
            padding,
            dim,
        })
    }

    fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let e = self.expand.forward(p, self.norm.forward(p, x)?)?;
        let glu = e
            .slice_cols(0, self.dim)?
            .mul(e.slice_cols(self.dim, self.dim)?.sigmoid())?;
        let c = glu
            .depthwise_conv1d(p.p(self.depthwise), self.padding)?
            .swish();
        self.project.forward(p, c)
    }
}

/// Half-step FFN, windowed self-attention, conv module, half-step FFN and a
/// final layer norm, each sub-block with a residual connection.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

impl ConformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        left: Option<usize>,
        right: usize,
        padding: ConvPadding,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConformerLayer {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), dim, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_ln"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, left, right, rng)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), dim, kernel, padding, rng)?,
            ff2: FeedForward::new(store, &format!("{name}.ff2"), dim, rng)?,
            out_norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
        })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let x = x.add(self.ff1.forward(p, x)?.scale(0.5))?;
        let x = x.add(self.attn.forward(p, self.attn_norm.forward(p, x)?)?)?;
        let x = x.add(self.conv.forward(p, x)?)?;
        let x = x.add(self.ff2.forward(p, x)?.scale(0.5))?;
        self.out_norm.forward(p, x)
    }
}
