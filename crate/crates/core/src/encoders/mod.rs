//! Causal encoder, cascaded non-causal encoder and the time-reduction layer.

mod conformer;

pub use conformer::{attention_mask, ConformerLayer, SelfAttention};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, Lstm};
use crate::params::{Binder, ParamStore};
use crate::tensor::{ConvPadding, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalKind {
    Lstm,
    Conformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonCausalKind {
    Bilstm,
    Conformer,
    Identity,
}

/// Which encoder output a decoder reads, and which loss path a training
/// utterance takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Causal,
    Noncausal,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Causal => "causal",
            Mode::Noncausal => "noncausal",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Mode::Causal),
            "noncausal" => Ok(Mode::Noncausal),
            _ => Err(Error::Input(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub causal_kind: CausalKind,
    pub causal_layers: usize,
    pub noncausal_kind: NonCausalKind,
    pub noncausal_layers: usize,
    pub hidden_units: usize,
    pub proj_units: usize,
    pub attn_heads: usize,
    pub conv_kernel: usize,
    /// Per-layer right-context window of non-causal conformer layers.
    pub right_context_frames: usize,
    /// Per-layer left window of attention; `None` is unlimited.
    pub left_context_frames: Option<usize>,
    /// Insert the stride-2 time reduction after this many causal layers.
    pub time_reduction_after_layer: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            causal_kind: CausalKind::Lstm,
            causal_layers: 1,
            noncausal_kind: NonCausalKind::Bilstm,
            noncausal_layers: 2,
            hidden_units: 32,
            proj_units: 24,
            attn_heads: 2,
            conv_kernel: 3,
            right_context_frames: 2,
            left_context_frames: None,
            time_reduction_after_layer: Some(1),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let uses_conformer = self.causal_kind == CausalKind::Conformer && self.causal_layers > 0
            || self.noncausal_kind == NonCausalKind::Conformer && self.noncausal_layers > 0;
        if self.proj_units == 0 || self.hidden_units == 0 {
            return Err(Error::Config("hidden_units and proj_units must be >= 1".into()));
        }
        if uses_conformer {
            if self.attn_heads == 0 || !self.proj_units.is_multiple_of(self.attn_heads) {
                return Err(Error::Config(format!(
                    "proj_units {} not divisible by attn_heads {}",
                    self.proj_units, self.attn_heads
                )));
            }
            if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
                return Err(Error::Config("conv_kernel must be odd".into()));
            }
        }
        if self.noncausal_kind == NonCausalKind::Conformer
            && self.right_context_frames > 0
            && self.conv_reach() > self.right_context_frames
        {
            return Err(Error::Config(format!(
                "conv right reach {} exceeds the right-context window {}",
                self.conv_reach(),
                self.right_context_frames
            )));
        }
        if let Some(k) = self.time_reduction_after_layer {
            if k > self.causal_layers {
                return Err(Error::Config(format!(
                    "time_reduction_after_layer {k} > causal_layers {}",
                    self.causal_layers
                )));
            }
        }
        Ok(())
    }

    /// Right reach of the centered conv in non-causal conformer layers.
    pub fn conv_reach(&self) -> usize {
        if self.right_context_frames == 0 {
            0
        } else {
            (self.conv_kernel.max(1) - 1) / 2
        }
    }

    /// Encoder frames of right lookahead in the cascade; `None` is unbounded.
    pub fn cascade_lookahead_frames(&self) -> Option<usize> {
        match self.noncausal_kind {
            NonCausalKind::Identity => Some(0),
            _ if self.noncausal_layers == 0 => Some(0),
            NonCausalKind::Bilstm => None,
            NonCausalKind::Conformer => {
                Some(self.noncausal_layers * (self.right_context_frames + self.conv_reach()))
            }
        }
    }

    pub fn time_reductions(&self) -> usize {
        usize::from(self.time_reduction_after_layer.is_some())
    }
}

/// Encoder activations with their frame rate and the path that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub features: Tensor,
    pub frame_period_ms: f64,
    pub mode: Mode,
}

impl EncoderOutput {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Concatenates adjacent frame pairs (zero-padding an odd tail) and maps
/// `2p → p`; halves the frame count, rounding up.
#[derive(Clone, Debug)]
pub struct TimeReduction {
    pub linear: Linear,
    pub dim: usize,
}

impl TimeReduction {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(TimeReduction {
            linear: Linear::new(store, name, 2 * dim, dim, true, rng)?,
            dim,
        })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (t, d) = (shape[0], shape[1]);
        let x = if t % 2 == 1 {
            p.tape()
                .concat_rows(&[x, p.tape().constant(Tensor::zeros(&[1, d]))])?
        } else {
            x
        };
        let pairs = x.reshape(&[t.div_ceil(2), 2 * d])?;
        self.linear.forward(p, pairs)
    }
}

/// Bidirectional LSTM: forward and backward passes concatenated, then
/// projected back to `proj` units.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub out: Linear,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        proj: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, proj, rng)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, proj, rng)?,
            out: Linear::new(store, &format!("{name}.out"), 2 * proj, proj, true, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.fwd.forward(p, x, false)?;
        let b = self.bwd.forward(p, x, true)?;
        let both = p.tape().concat_cols(&[f, b])?;
        self.out.forward(p, both)
    }
}

#[derive(Clone, Debug)]
enum CausalLayer {
    Lstm(Lstm),
    Conformer(ConformerLayer),
}

/// Strictly causal stack producing `e^s`.
#[derive(Clone, Debug)]
pub struct CausalEncoder {
    input_proj: Option<Linear>,
    layers: Vec<CausalLayer>,
    reduction: Option<(usize, TimeReduction)>,
    out_dim: usize,
}

impl CausalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = cfg.proj_units;
        let mut width = input_dim;
        let input_proj = if cfg.causal_kind == CausalKind::Conformer && cfg.causal_layers > 0 {
            width = p;
            Some(Linear::new(store, "causal.input", input_dim, p, true, rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.causal_layers);
        let mut reduction = None;
        for i in 0..=cfg.causal_layers {
            if cfg.time_reduction_after_layer == Some(i) {
                reduction = Some((i, TimeReduction::new(store, "causal.reduce", width, rng)?));
            }
            if i == cfg.causal_layers {
                break;
            }
            let name = format!("causal.{i}");
            layers.push(match cfg.causal_kind {
                CausalKind::Lstm => {
                    let l = Lstm::new(store, &name, width, cfg.hidden_units, p, rng)?;
                    width = p;
                    CausalLayer::Lstm(l)
                }
                CausalKind::Conformer => CausalLayer::Conformer(ConformerLayer::new(
                    store,
                    &name,
                    p,
                    cfg.attn_heads,
                    cfg.conv_kernel,
                    cfg.left_context_frames,
                    0,
                    ConvPadding::Causal,
                    rng,
                )?),
            });
        }
        Ok(CausalEncoder {
            input_proj,
            layers,
            reduction,
            out_dim: width,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x` is the stacked feature matrix.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = match &self.input_proj {
            Some(l) => l.forward(p, x)?,
            None => x,
        };
        for i in 0..=self.layers.len() {
            if let Some((after, tr)) = &self.reduction {
                if *after == i {
                    h = tr.forward(p, h)?;
                }
            }
            match self.layers.get(i) {
                Some(CausalLayer::Lstm(l)) => h = l.forward(p, h, false)?,
                Some(CausalLayer::Conformer(c)) => h = c.forward(p, h)?,
                None => {}
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
enum CascadeLayer {
    BiLstm(BiLstm),
    Conformer(ConformerLayer),
}

/// Non-causal encoder cascaded on `e^s`, producing `e^a` on the same time axis.
#[derive(Clone, Debug)]
pub struct NonCausalEncoder {
    layers: Vec<CascadeLayer>,
}

impl NonCausalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        if cfg.noncausal_kind != NonCausalKind::Identity {
            if cfg.noncausal_layers > 0 && input_dim != cfg.proj_units {
                return Err(Error::Config(format!(
                    "cascade input width {input_dim} differs from proj_units {}",
                    cfg.proj_units
                )));
            }
            let padding = if cfg.right_context_frames == 0 {
                ConvPadding::Causal
            } else {
                ConvPadding::Same
            };
            for i in 0..cfg.noncausal_layers {
                let name = format!("cascade.{i}");
                layers.push(match cfg.noncausal_kind {
                    NonCausalKind::Bilstm => CascadeLayer::BiLstm(BiLstm::new(
                        store,
                        &name,
                        cfg.proj_units,
                        cfg.hidden_units,
                        cfg.proj_units,
                        rng,
                    )?),
                    _ => CascadeLayer::Conformer(ConformerLayer::new(
                        store,
                        &name,
                        cfg.proj_units,
                        cfg.attn_heads,
                        cfg.conv_kernel,
                        cfg.left_context_frames,
                        cfg.right_context_frames,
                        padding,
                        rng,
                    )?),
                });
            }
        }
        Ok(NonCausalEncoder { layers })
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward<'t>(&self, p: &Binder<'t, '_>, e_s: Var<'t>) -> Result<Var<'t>> {
        let mut h = e_s;
        for l in &self.layers {
            h = match l {
                CascadeLayer::BiLstm(b) => h.add(b.forward(p, h)?)?,
                CascadeLayer::Conformer(c) => c.forward(p, h)?,
            };
        }
        Ok(h)
    }
}
