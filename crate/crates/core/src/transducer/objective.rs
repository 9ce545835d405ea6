use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::fastemit_rnnt_loss;
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, TokenSequence};
use crate::model::CascadedModel;
use crate::params::Binder;
use crate::tensor::Var;

/// Encoder path chosen for one training utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathChoice {
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossStrategy {
    /// One path per utterance, causal with probability λ.
    #[default]
    Sampled,
    /// `λ·L_s + (1-λ)·L_a`, both paths every step.
    Weighted,
}

/// Causal iff a uniform draw in `[0, 1)` falls below `lambda`.
pub fn sample_path<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<PathChoice> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda {lambda} outside [0, 1]")));
    }
    let u: f64 = rng.random();
    let mode = if u < lambda {
        Mode::Causal
    } else {
        Mode::Noncausal
    };
    Ok(PathChoice { mode })
}

/// Total loss of one utterance plus the per-path values that went into it.
pub struct Objective<'t> {
    pub loss: Var<'t>,
    /// `Some` under the sampled strategy.
    pub path: Option<PathChoice>,
    pub causal_loss: Option<f64>,
    pub noncausal_loss: Option<f64>,
}

/// Cascaded-encoder objective for one utterance. FastEmit weight `beta` acts
/// only on the causal term. Zero-weight terms are skipped under `Weighted`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<'t, R: Rng + ?Sized>(
    model: &CascadedModel,
    p: &Binder<'t, '_>,
    x: &FeatureSequence,
    y: &TokenSequence,
    lambda: f64,
    beta: f64,
    strategy: LossStrategy,
    rng: &mut R,
) -> Result<Objective<'t>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda {lambda} outside [0, 1]")));
    }
    let e_s = model.causal_forward(p, x)?;
    let pred = model.pred.forward(p, y)?;
    let path_loss = |mode: Mode| -> Result<Var<'t>> {
        let e = match mode {
            Mode::Causal => e_s,
            Mode::Noncausal => model.cascade_forward(p, e_s)?,
        };
        let logits = model.joint.forward(p, e, pred)?;
        let fe = if mode == Mode::Causal { beta } else { 0.0 };
        Ok(fastemit_rnnt_loss(logits, y, fe)?.0)
    };
    match strategy {
        LossStrategy::Sampled => {
            let choice = sample_path(lambda, rng)?;
            let loss = path_loss(choice.mode)?;
            let value = loss.value().item();
            let (causal_loss, noncausal_loss) = match choice.mode {
                Mode::Causal => (Some(value), None),
                Mode::Noncausal => (None, Some(value)),
            };
            Ok(Objective {
                loss,
                path: Some(choice),
                causal_loss,
                noncausal_loss,
            })
        }
        LossStrategy::Weighted => {
            let ls = if lambda > 0.0 {
                Some(path_loss(Mode::Causal)?)
            } else {
                None
            };
            let la = if lambda < 1.0 {
                Some(path_loss(Mode::Noncausal)?)
            } else {
                None
            };
            let loss = match (ls, la) {
                (Some(s), Some(a)) => s.scale(lambda).add(a.scale(1.0 - lambda))?,
                (Some(s), None) => s,
                (None, Some(a)) => a,
                (None, None) => unreachable!("lambda lies in [0, 1]"),
            };
            Ok(Objective {
                loss,
                path: None,
                causal_loss: ls.map(|v| v.value().item()),
                noncausal_loss: la.map(|v| v.value().item()),
            })
        }
    }
}
