//! The cascaded-encoder transducer: front end, causal encoder, cascade, and
//! one prediction/joint network shared by both encoder outputs.

use serde::{Deserialize, Serialize};

use crate::encoders::{CausalEncoder, EncoderConfig, EncoderOutput, Mode, NonCausalEncoder};
use crate::error::{Error, Result};
use crate::frontend::{stack_and_subsample, FeatureSequence, TokenSequence};
use crate::params::{Binder, ParamStore};
use crate::rng::Xoshiro256;
use crate::tensor::{Tape, Var};
use crate::transducer::{DecoderConfig, JointNet, PredictionNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Raw feature width before stacking.
    pub input_dim: usize,
    pub vocab_size: usize,
    pub stack: usize,
    pub stride: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 6,
            vocab_size: 6,
            stack: 4,
            stride: 3,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.vocab_size < 1 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if self.stack == 0 || self.stride == 0 {
            return Err(Error::Config("stack and stride must be >= 1".into()));
        }
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Input frames per encoder frame.
    pub fn reduction(&self) -> usize {
        self.stride << self.encoder.time_reductions()
    }

    /// Encoder frames produced from `n` input frames.
    pub fn encoder_frames(&self, n: usize) -> usize {
        let mut t = n.div_ceil(self.stride);
        for _ in 0..self.encoder.time_reductions() {
            t = t.div_ceil(2);
        }
        t
    }

    /// Last input frame that encoder frame `t` of the causal stack reads,
    /// including the stacking window's lookahead.
    pub fn last_input_frame(&self, t: usize) -> usize {
        let r = self.reduction();
        t * r + r - self.stride + self.stack - 1
    }

    /// Encoder frames whose value is final once `n` input frames are known.
    pub fn complete_frames(&self, n: usize) -> usize {
        let r = self.reduction();
        let lag = r - self.stride + self.stack;
        if n < lag {
            0
        } else {
            ((n - lag) / r + 1).min(self.encoder_frames(n))
        }
    }
}

/// Parameters plus the network structure that reads them.
#[derive(Clone, Debug)]
pub struct CascadedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub causal: CausalEncoder,
    pub cascade: NonCausalEncoder,
    pub pred: PredictionNet,
    pub joint: JointNet,
}

impl CascadedModel {
    /// Fresh initialization from the `init` stream of `seed`. The cascade is
    /// built last so models that differ only in the cascade share every
    /// other initial weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256::stream(seed, "init");
        let mut params = ParamStore::new();
        let causal = CausalEncoder::new(
            &mut params,
            &config.encoder,
            config.input_dim * config.stack,
            &mut rng,
        )?;
        let pred = PredictionNet::new(&mut params, &config.decoder, config.vocab_size, &mut rng)?;
        let joint = JointNet::new(
            &mut params,
            &config.decoder,
            causal.out_dim(),
            config.vocab_size,
            &mut rng,
        )?;
        let cascade = NonCausalEncoder::new(&mut params, &config.encoder, causal.out_dim(), &mut rng)?;
        Ok(CascadedModel {
            config,
            params,
            causal,
            cascade,
            pred,
            joint,
        })
    }

    /// Builds the structure for `config` and loads `params` into it.
    pub fn with_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn stacked(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        if x.dim() != self.config.input_dim {
            return Err(Error::dim(format!(
                "feature dim {} does not match model input_dim {}",
                x.dim(),
                self.config.input_dim
            )));
        }
        stack_and_subsample(x, self.config.stack, self.config.stride)
    }

    /// `e^s` on the tape.
    pub fn causal_forward<'t>(&self, p: &Binder<'t, '_>, x: &FeatureSequence) -> Result<Var<'t>> {
        let s = self.stacked(x)?;
        let input = p.tape().constant(s.frames().clone());
        self.causal.forward(p, input)
    }

    /// `e^a = cascade(e^s)` on the tape.
    pub fn cascade_forward<'t>(&self, p: &Binder<'t, '_>, e_s: Var<'t>) -> Result<Var<'t>> {
        self.cascade.forward(p, e_s)
    }

    /// Encoder output for `mode` on the tape.
    pub fn encode_var<'t>(
        &self,
        p: &Binder<'t, '_>,
        x: &FeatureSequence,
        mode: Mode,
    ) -> Result<Var<'t>> {
        let e_s = self.causal_forward(p, x)?;
        match mode {
            Mode::Causal => Ok(e_s),
            Mode::Noncausal => self.cascade_forward(p, e_s),
        }
    }

    /// Joint logits `T × (U+1) × (V+1)` for `e` and labels `y`.
    pub fn logits<'t>(&self, p: &Binder<'t, '_>, e: Var<'t>, y: &TokenSequence) -> Result<Var<'t>> {
        let pred = self.pred.forward(p, y)?;
        self.joint.forward(p, e, pred)
    }

    pub fn frame_period_ms(&self, input_period_ms: f64) -> f64 {
        input_period_ms * self.config.reduction() as f64
    }

    pub fn causal_encode(&self, x: &FeatureSequence) -> Result<EncoderOutput> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.params, false);
        let e = self.causal_forward(&p, x)?;
        let features = (*e.value()).clone();
        Ok(EncoderOutput {
            features,
            frame_period_ms: self.frame_period_ms(x.frame_period_ms()),
            mode: Mode::Causal,
        })
    }

    pub fn cascade_encode(&self, e_s: &EncoderOutput) -> Result<EncoderOutput> {
        if e_s.mode != Mode::Causal {
            return Err(Error::Contract(
                "cascade_encode expects a causal encoder output".into(),
            ));
        }
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.params, false);
        let input = tape.constant(e_s.features.clone());
        let e = self.cascade_forward(&p, input)?;
        let features = (*e.value()).clone();
        Ok(EncoderOutput {
            features,
            frame_period_ms: e_s.frame_period_ms,
            mode: Mode::Noncausal,
        })
    }

    pub fn encode(&self, x: &FeatureSequence, mode: Mode) -> Result<EncoderOutput> {
        let e_s = self.causal_encode(x)?;
        match mode {
            Mode::Causal => Ok(e_s),
            Mode::Noncausal => self.cascade_encode(&e_s),
        }
    }
}
