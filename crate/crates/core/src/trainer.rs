//! Mini-batch training: per-utterance path sampling, Adam, global-norm
//! clipping and binary checkpoints.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Example;
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, TokenSequence};
use crate::model::CascadedModel;
use crate::par::par_map;
use crate::params::{Binder, Grads, ParamStore};
use crate::rng::Xoshiro256;
use crate::tensor::{Tape, Tensor};
use crate::transducer::{combined_loss, LossStrategy};

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub strategy: LossStrategy,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            beta: 0.0,
            strategy: LossStrategy::Sampled,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 64,
            steps: 2000,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be > 0, got {v}")));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam first and second moments, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: z.clone(), v: z }
    }
}

/// One bias-corrected Adam update at step `t >= 1`. Every gradient is checked
/// before any parameter moves.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    cfg: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract("gradient and moment lists must match the store".into()));
    }
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim(format!(
                    "gradient of `{}` has shape {:?}, parameter {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in parameter `{}`",
                    store.name(id)
                )));
            }
        }
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for id in store.ids() {
        let i = id.index();
        let zero;
        let g = match grads.get(id) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; state.m[i].len()];
                &zero
            }
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = store.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Rescales `grads` to global norm `clip_norm` when it is larger. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// Utterances zero-padded to a common length, with their true lengths.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub features: Vec<FeatureSequence>,
    pub tokens: Vec<TokenSequence>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("batch must be non-empty".into()));
        }
        let t_max = examples
            .iter()
            .map(|e| e.utterance.features.num_frames())
            .max()
            .unwrap_or(0);
        Self::with_length(examples, t_max)
    }

    /// Pads every entry to `t_pad` frames (at least the longest entry).
    pub fn with_length(examples: &[&Example], t_pad: usize) -> Result<Self> {
        let mut features = Vec::with_capacity(examples.len());
        let mut lengths = Vec::with_capacity(examples.len());
        for ex in examples {
            let x = &ex.utterance.features;
            let (t, d) = (x.num_frames(), x.dim());
            let mut data = x.frames().data().to_vec();
            data.resize(t_pad.max(t) * d, 0.0);
            features.push(FeatureSequence::new(
                Tensor::from_vec(vec![t_pad.max(t), d], data)?,
                x.frame_period_ms(),
            )?);
            lengths.push(t);
        }
        Ok(PaddedBatch {
            features,
            tokens: examples.iter().map(|e| e.utterance.tokens.clone()).collect(),
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub causal: usize,
    pub noncausal: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub mode: ModeCounts,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

struct ItemResult {
    loss: f64,
    mode: Option<Mode>,
    grads: Grads,
}

/// Loss and gradient of one padded batch entry; padding is cut off first so
/// neither encoder nor the loss sees it.
fn item_gradient(
    model: &CascadedModel,
    cfg: &TrainConfig,
    x: &FeatureSequence,
    len: usize,
    y: &TokenSequence,
    seed: u64,
) -> Result<ItemResult> {
    let x = x.prefix(len)?;
    let tape = Tape::new();
    let p = Binder::new(&tape, &model.params, true);
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let obj = combined_loss(model, &p, &x, y, cfg.lambda, cfg.beta, cfg.strategy, &mut rng)?;
    tape.backward(obj.loss)?;
    Ok(ItemResult {
        loss: obj.loss.value().item(),
        mode: obj.path.map(|c| c.mode),
        grads: p.grads(),
    })
}

/// Model, optimizer and RNG state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: CascadedModel,
    pub config: TrainConfig,
    pub moments: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: Xoshiro256,
    pub threads: usize,
}

impl Trainer {
    pub fn new(model: CascadedModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            moments: AdamState::zeros(&model.params),
            rng: Xoshiro256::stream(config.seed, "sampling"),
            model,
            config,
            step: 0,
            threads: 1,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Batch of the upcoming step, a pure function of the seed and step.
    pub fn batch_indices(&self, num_examples: usize) -> Vec<usize> {
        let mut rng = Xoshiro256::indexed(self.config.seed, "data", self.step);
        (0..self.config.batch_size)
            .map(|_| rng.random_range(0..num_examples))
            .collect()
    }

    /// Mean loss and mean gradient over the batch, without an update. Per-item
    /// RNG seeds are drawn serially so results do not depend on `threads`.
    pub fn batch_gradient(&mut self, batch: &PaddedBatch) -> Result<(f64, ModeCounts, Grads)> {
        if batch.is_empty() {
            return Err(Error::Contract("batch must be non-empty".into()));
        }
        let items: Vec<(usize, u64)> = (0..batch.len()).map(|i| (i, self.rng.next_u64())).collect();
        let (model, cfg) = (&self.model, &self.config);
        let results = par_map(&items, self.threads, |&(i, seed)| {
            item_gradient(model, cfg, &batch.features[i], batch.lengths[i], &batch.tokens[i], seed)
        });
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Grads::zeros_like(&self.model.params);
        let mut loss = 0.0;
        let mut mode = ModeCounts::default();
        for r in results {
            let r = r?;
            loss += r.loss;
            grads.add_scaled(&r.grads, scale);
            match r.mode {
                Some(Mode::Causal) => mode.causal += 1,
                Some(Mode::Noncausal) => mode.noncausal += 1,
                None => {}
            }
        }
        Ok((loss / batch.len() as f64, mode, grads))
    }

    /// One clipped Adam step on `batch`.
    pub fn train_step(&mut self, batch: &PaddedBatch) -> Result<StepStats> {
        let (loss, mode, mut grads) = self.batch_gradient(batch)?;
        if !(loss <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence(format!(
                "loss {loss} at step {} exceeds {DIVERGENCE_LIMIT}",
                self.step + 1
            )));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.moments,
            &self.config,
            self.step + 1,
        )?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            mode,
            grad_norm,
        })
    }

    /// Draws the next batch from `examples` and trains on it.
    pub fn step_on(&mut self, examples: &[Example]) -> Result<StepStats> {
        if examples.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let picked: Vec<&Example> = self
            .batch_indices(examples.len())
            .into_iter()
            .map(|i| &examples[i])
            .collect();
        self.train_step(&PaddedBatch::new(&picked)?)
    }

    pub fn checkpoint(&self, run: &RunConfig) -> Checkpoint {
        let mut config = run.clone();
        config.model = self.model.config.clone();
        config.train = self.config.clone();
        Checkpoint {
            config,
            step: self.step,
            params: self.model.params.clone(),
            moments: self.moments.clone(),
            rng_state: self.rng.state(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = CascadedModel::with_params(ckpt.config.model.clone(), &ckpt.params)?;
        let mut moments = AdamState::zeros(&model.params);
        for id in model.params.ids() {
            let name = model.params.name(id);
            let j = ckpt
                .params
                .id(name)
                .ok_or_else(|| Error::Mismatch(format!("missing parameter `{name}`")))?
                .index();
            moments.m[id.index()] = ckpt.moments.m[j].clone();
            moments.v[id.index()] = ckpt.moments.v[j].clone();
        }
        let mut t = Trainer::new(model, ckpt.config.train)?;
        t.moments = moments;
        t.step = ckpt.step;
        t.rng = Xoshiro256::from_state(ckpt.rng_state);
        Ok(t)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CASR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume a run or rebuild its model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
    pub moments: AdamState,
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    pub fn model(&self) -> Result<CascadedModel> {
        CascadedModel::with_params(self.config.model.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let json = self.config.to_json();
        out.extend_from_slice(&u32::try_from(json.len()).map_err(too_large)?.to_le_bytes());
        out.extend_from_slice(json.as_bytes());

        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(self.params.len() * 3);
        for (_, name, t) in self.params.iter() {
            tensors.push((name.to_string(), t));
        }
        for (i, (_, name, _)) in self.params.iter().enumerate() {
            tensors.push((format!("{name}/m"), &self.moments.m[i]));
        }
        for (i, (_, name, _)) in self.params.iter().enumerate() {
            tensors.push((format!("{name}/v"), &self.moments.v[i]));
        }
        out.extend_from_slice(&u32::try_from(tensors.len()).map_err(too_large)?.to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(too_large)?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.rank()).map_err(too_large)?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(too_large)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let json_len = r.u32()? as usize;
        let json_at = r.pos;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| r.error(json_at, "config is not UTF-8"))?;
        let config = RunConfig::from_json(json).map_err(|e| r.error(json_at, &e.to_string()))?;

        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.error(at, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            named.push((at, name, Tensor::from_vec(shape, data)?));
        }
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64()?;
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after checkpoint"));
        }

        let mut params = ParamStore::new();
        let mut m_named = Vec::new();
        let mut v_named = Vec::new();
        for (at, name, t) in named {
            if let Some(base) = name.strip_suffix("/m") {
                m_named.push((at, base.to_string(), t));
            } else if let Some(base) = name.strip_suffix("/v") {
                v_named.push((at, base.to_string(), t));
            } else {
                params.add(&name, t).map_err(|e| r.error(at, &e.to_string()))?;
            }
        }
        let collect = |list: Vec<(usize, String, Tensor)>, kind: &str| -> Result<Vec<Tensor>> {
            let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
            for (at, base, t) in list {
                let id = params.id(&base).ok_or_else(|| {
                    r.error(at, &format!("{kind} moment for unknown parameter `{base}`"))
                })?;
                if t.shape() != params.get(id).shape() {
                    return Err(r.error(at, &format!("{kind} moment of `{base}` has the wrong shape")));
                }
                out[id.index()] = Some(t);
            }
            out.into_iter()
                .zip(params.iter())
                .map(|(t, (_, name, _))| {
                    t.ok_or_else(|| Error::Format {
                        offset: bytes.len() as u64,
                        message: format!("missing {kind} moment for `{name}`"),
                    })
                })
                .collect()
        };
        let m = collect(m_named, "first")?;
        let v = collect(v_named, "second")?;
        Ok(Checkpoint {
            config,
            step,
            params,
            moments: AdamState { m, v },
            rng_state,
        })
    }
}

fn too_large(_: std::num::TryFromIntError) -> Error {
    Error::Contract("value does not fit the checkpoint field width".into())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                &format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
