//! Prediction network, joint network and the transducer training objectives.

mod loss;
mod objective;

pub use loss::{
    brute_force_loss, fastemit_rnnt_loss, lattice_gradient, rnnt_lattice, rnnt_loss, Lattice,
    LatticeGrad, BRUTE_FORCE_MAX,
};
pub use objective::{combined_loss, sample_path, LossStrategy, Objective, PathChoice};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{TokenSequence, BLANK};
use crate::layers::{Linear, Lstm, LstmState};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_units: usize,
    pub pred_hidden: usize,
    pub pred_proj: usize,
    pub joint_units: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_units: 16,
            pred_hidden: 32,
            pred_proj: 24,
            joint_units: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_units == 0 || self.pred_hidden == 0 || self.pred_proj == 0 || self.joint_units == 0
        {
            return Err(Error::Config("decoder sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Label-only LSTM. Row `u` of its output summarizes `y_1..y_u`; row 0 is
/// the start symbol (blank id) fed from zero state.
#[derive(Clone, Debug)]
pub struct PredictionNet {
    pub embed: ParamId,
    pub lstm: Lstm,
    vocab_size: usize,
}

/// Prediction-network state after some label prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredState {
    /// Projected output, `1 × pred_proj`.
    pub output: Tensor,
    pub lstm: LstmState,
}

impl PredictionNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = store.add_uniform(
            "pred.embed",
            &[vocab_size + 1, cfg.embed_units],
            cfg.embed_units,
            rng,
        )?;
        let lstm = Lstm::new(
            store,
            "pred.lstm",
            cfg.embed_units,
            cfg.pred_hidden,
            cfg.pred_proj,
            rng,
        )?;
        Ok(PredictionNet {
            embed,
            lstm,
            vocab_size,
        })
    }

    fn check(&self, y: &[usize]) -> Result<()> {
        if let Some(bad) = y.iter().find(|&&v| v == BLANK || v > self.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside 1..={}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// `(U+1) × pred_proj` outputs for the start symbol followed by `y`.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, y: &TokenSequence) -> Result<Var<'t>> {
        self.check(y.ids())?;
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(y.ids());
        let emb = p.tape().gather(p.p(self.embed), &inputs)?;
        self.lstm.forward(p, emb, false)
    }

    /// Consumes `token` (blank = start symbol) from `state`.
    pub fn step(&self, p: &Binder<'_, '_>, token: usize, state: &LstmState) -> Result<PredState> {
        if token != BLANK {
            self.check(&[token])?;
        }
        let emb = p.tape().gather(p.p(self.embed), &[token])?;
        let (out, lstm) = self.lstm.step(p, emb, state)?;
        Ok(PredState {
            output: (*out.value()).clone(),
            lstm,
        })
    }

    pub fn start(&self, p: &Binder<'_, '_>) -> Result<PredState> {
        self.step(p, BLANK, &LstmState::zeros(self.lstm.hidden))
    }
}

/// `logits(t, u) = W_out · tanh(W_e·e_t + W_p·pred_u + b) + b_out`.
#[derive(Clone, Debug)]
pub struct JointNet {
    pub enc: Linear,
    pub pred: Linear,
    pub out: Linear,
}

impl JointNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        enc_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(JointNet {
            enc: Linear::new(store, "joint.enc", enc_dim, cfg.joint_units, false, rng)?,
            pred: Linear::new(store, "joint.pred", cfg.pred_proj, cfg.joint_units, true, rng)?,
            out: Linear::new(store, "joint.out", cfg.joint_units, vocab_size + 1, true, rng)?,
        })
    }

    /// Full `T × (U+1) × (V+1)` logit lattice.
    pub fn forward<'t>(&self, p: &Binder<'t, '_>, e: Var<'t>, pred: Var<'t>) -> Result<Var<'t>> {
        let a = self.enc.forward(p, e)?;
        let b = self.pred.forward(p, pred)?;
        let h = p.tape().pairwise_add(a, b)?.tanh();
        let hs = h.shape();
        let flat = h.reshape(&[hs[0] * hs[1], hs[2]])?;
        let logits = self.out.forward(p, flat)?;
        let v = logits.shape()[1];
        logits.reshape(&[hs[0], hs[1], v])
    }

    /// Encoder-side projection `W_e·e_t` for every frame.
    pub fn project_encoder<'t>(&self, p: &Binder<'t, '_>, e: Var<'t>) -> Result<Var<'t>> {
        self.enc.forward(p, e)
    }

    /// Logits for one (projected frame, prediction output) pair.
    pub fn logits_for<'t>(
        &self,
        p: &Binder<'t, '_>,
        enc_proj_row: Var<'t>,
        pred_output: Var<'t>,
    ) -> Result<Var<'t>> {
        let h = enc_proj_row.add(self.pred.forward(p, pred_output)?)?.tanh();
        self.out.forward(p, h)
    }
}
