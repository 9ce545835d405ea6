//! Greedy and beam transducer search over either encoder output, and an
//! incremental session that decodes the causal path as input arrives.

use crate::encoders::{EncoderOutput, Mode};
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, TokenSequence, BLANK};
use crate::model::CascadedModel;
use crate::params::Binder;
use crate::tensor::{lse2, Tape, Tensor};
use crate::transducer::PredState;

/// Labels a decoder may emit on one frame before blank is forced.
pub const DEFAULT_MAX_SYMBOLS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: TokenSequence,
    /// Encoder frame on which each token was emitted.
    pub emit_frames: Vec<usize>,
    /// Log-probability of the returned hypothesis.
    pub score: f64,
}

impl DecodeResult {
    fn empty() -> Self {
        DecodeResult {
            tokens: TokenSequence::from_unchecked(Vec::new()),
            emit_frames: Vec::new(),
            score: 0.0,
        }
    }
}

/// Search settings shared by offline and streaming decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchConfig {
    /// 0 selects greedy search.
    pub beam: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 0,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - z).collect()
}

/// Per-frame output distributions for a search, keyed by a decoder state
/// that summarizes the labels emitted so far.
pub trait ScoreSource {
    type State: Clone;

    fn num_frames(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    /// State after emitting `token` from `state`.
    fn advance(&self, token: usize, state: &Self::State) -> Result<Self::State>;
    /// Log-probabilities over `0..=V` (blank first) at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Result<Vec<f64>>;
}

/// The model's joint network over one encoder output.
pub struct ModelScores<'m> {
    model: &'m CascadedModel,
    /// `W_e·e_t` for every frame.
    proj: Tensor,
}

impl<'m> ModelScores<'m> {
    pub fn new(model: &'m CascadedModel, e: &Tensor) -> Result<Self> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &model.params, false);
        let v = model.joint.project_encoder(&p, tape.constant(e.clone()))?.value();
        Ok(ModelScores {
            model,
            proj: (*v).clone(),
        })
    }
}

impl ScoreSource for ModelScores<'_> {
    type State = PredState;

    fn num_frames(&self) -> usize {
        self.proj.rows()
    }

    fn start(&self) -> Result<PredState> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.model.params, false);
        self.model.pred.start(&p)
    }

    fn advance(&self, token: usize, state: &PredState) -> Result<PredState> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.model.params, false);
        self.model.pred.step(&p, token, &state.lstm)
    }

    fn log_probs(&self, t: usize, state: &PredState) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &self.model.params, false);
        let row = self.proj.row(t);
        let e = tape.constant(Tensor::from_vec(vec![1, row.len()], row.to_vec())?);
        let o = tape.constant(state.output.clone());
        let logits = self.model.joint.logits_for(&p, e, o)?.value();
        Ok(log_softmax(logits.data()))
    }
}

/// Frame-synchronous greedy search state.
struct Greedy<S> {
    state: S,
    tokens: Vec<usize>,
    emit_frames: Vec<usize>,
    score: f64,
    max_symbols: usize,
}

impl<S: Clone> Greedy<S> {
    fn new(state: S, max_symbols: usize) -> Result<Self> {
        if max_symbols == 0 {
            return Err(Error::Input("max_symbols_per_frame must be >= 1".into()));
        }
        Ok(Greedy {
            state,
            tokens: Vec::new(),
            emit_frames: Vec::new(),
            score: 0.0,
            max_symbols,
        })
    }

    /// Consumes frame `t` of `src`.
    fn frame<Src: ScoreSource<State = S>>(&mut self, src: &Src, t: usize) -> Result<()> {
        let mut emitted = 0;
        loop {
            let lp = src.log_probs(t, &self.state)?;
            let k = if emitted == self.max_symbols {
                BLANK
            } else {
                argmax(&lp)
            };
            self.score += lp[k];
            if k == BLANK {
                return Ok(());
            }
            self.tokens.push(k);
            self.emit_frames.push(t);
            self.state = src.advance(k, &self.state)?;
            emitted += 1;
        }
    }

    fn result(&self) -> DecodeResult {
        DecodeResult {
            tokens: TokenSequence::from_unchecked(self.tokens.clone()),
            emit_frames: self.emit_frames.clone(),
            score: self.score,
        }
    }
}

/// Repeated argmax; blank advances time, ties go to the lowest id (blank
/// first). After `max_symbols_per_frame` labels on one frame, blank is forced.
pub fn greedy_search<S: ScoreSource>(src: &S, max_symbols_per_frame: usize) -> Result<DecodeResult> {
    let mut g = Greedy::new(src.start()?, max_symbols_per_frame)?;
    for t in 0..src.num_frames() {
        g.frame(src, t)?;
    }
    Ok(g.result())
}

pub fn greedy_decode(
    e: &EncoderOutput,
    model: &CascadedModel,
    max_symbols_per_frame: usize,
) -> Result<DecodeResult> {
    greedy_search(&ModelScores::new(model, &e.features)?, max_symbols_per_frame)
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    emit_frames: Vec<usize>,
    score: f64,
    state: S,
}

/// Pool order: higher score first; on ties, finished hypotheses before
/// extensions, then the lexicographically smaller label sequence.
fn better<S>(a: &(Hyp<S>, bool), b: &(Hyp<S>, bool)) -> std::cmp::Ordering {
    b.0.score
        .total_cmp(&a.0.score)
        .then(b.1.cmp(&a.1))
        .then_with(|| a.0.tokens.cmp(&b.0.tokens))
}

fn merge_into<S>(ended: &mut Vec<Hyp<S>>, h: Hyp<S>) {
    match ended.iter_mut().find(|e| e.tokens == h.tokens) {
        Some(e) => {
            let total = lse2(e.score, h.score);
            if h.score > e.score {
                e.emit_frames = h.emit_frames;
            }
            e.score = total;
        }
        None => ended.push(h),
    }
}

/// Frame-synchronous beam search. Within a frame, every surviving
/// hypothesis either ends the frame with blank or extends by one label; the
/// pool of ended and extended hypotheses is cut to `beam` after each round.
/// Hypotheses with equal label sequences merge by log-sum-exp. With
/// `beam = 1` this follows the greedy path exactly.
pub fn beam_search<S: ScoreSource>(
    src: &S,
    beam: usize,
    max_symbols_per_frame: usize,
) -> Result<DecodeResult> {
    if beam == 0 {
        return Err(Error::Input("beam must be >= 1".into()));
    }
    if max_symbols_per_frame == 0 {
        return Err(Error::Input("max_symbols_per_frame must be >= 1".into()));
    }
    let mut hyps = vec![Hyp {
        tokens: Vec::new(),
        emit_frames: Vec::new(),
        score: 0.0,
        state: src.start()?,
    }];
    for t in 0..src.num_frames() {
        let mut active = std::mem::take(&mut hyps);
        let mut ended: Vec<Hyp<S::State>> = Vec::new();
        for round in 0..=max_symbols_per_frame {
            if active.is_empty() {
                break;
            }
            let mut extensions = Vec::new();
            for h in active.drain(..) {
                let lp = src.log_probs(t, &h.state)?;
                if round < max_symbols_per_frame {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        let mut x = h.clone();
                        x.tokens.push(k);
                        x.emit_frames.push(t);
                        x.score += l;
                        extensions.push(x);
                    }
                }
                let mut done = h;
                done.score += lp[BLANK];
                merge_into(&mut ended, done);
            }
            let mut pool: Vec<(Hyp<S::State>, bool)> = ended
                .drain(..)
                .map(|h| (h, true))
                .chain(extensions.into_iter().map(|h| (h, false)))
                .collect();
            pool.sort_by(better);
            pool.truncate(beam);
            for (mut h, is_ended) in pool {
                if is_ended {
                    ended.push(h);
                } else {
                    let k = *h.tokens.last().expect("extension has a label");
                    h.state = src.advance(k, &h.state)?;
                    active.push(h);
                }
            }
        }
        hyps = ended;
    }
    let best = hyps
        .into_iter()
        .map(|h| (h, true))
        .min_by(better)
        .map(|(h, _)| h)
        .expect("beam keeps at least one hypothesis");
    Ok(DecodeResult {
        tokens: TokenSequence::from_unchecked(best.tokens),
        emit_frames: best.emit_frames,
        score: best.score,
    })
}

pub fn beam_decode(
    e: &EncoderOutput,
    model: &CascadedModel,
    beam: usize,
    max_symbols_per_frame: usize,
) -> Result<DecodeResult> {
    beam_search(&ModelScores::new(model, &e.features)?, beam, max_symbols_per_frame)
}

/// Decodes `e` with greedy search (`beam == 0`) or beam search.
pub fn decode(e: &EncoderOutput, model: &CascadedModel, search: SearchConfig) -> Result<DecodeResult> {
    if search.beam == 0 {
        greedy_decode(e, model, search.max_symbols_per_frame)
    } else {
        beam_decode(e, model, search.beam, search.max_symbols_per_frame)
    }
}

/// Encodes `x` along `mode` and decodes with the shared decoder.
pub fn decode_dual(
    x: &FeatureSequence,
    model: &CascadedModel,
    mode: Mode,
    search: SearchConfig,
) -> Result<DecodeResult> {
    decode(&model.encode(x, mode)?, model, search)
}

/// Streaming decode output with emission times in the input timebase.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    pub result: DecodeResult,
    /// Input frame whose arrival released each token.
    pub emit_input_frames: Vec<usize>,
    /// Hypothesis length after each pushed input frame.
    pub partial_lengths: Vec<usize>,
    pub input_frames: usize,
}

/// Incremental causal greedy decoding. An encoder frame is decoded as soon
/// as every input frame it reads has arrived; the causal stack is recomputed
/// over the buffered prefix, which yields the same values as the offline
/// pass for every complete frame.
pub struct StreamingSession<'m> {
    model: &'m CascadedModel,
    greedy: Greedy<PredState>,
    buffer: Vec<f64>,
    frame_period_ms: f64,
    decoded: usize,
    emit_input_frames: Vec<usize>,
    partial_lengths: Vec<usize>,
}

impl<'m> StreamingSession<'m> {
    pub fn new(
        model: &'m CascadedModel,
        frame_period_ms: f64,
        max_symbols_per_frame: usize,
    ) -> Result<Self> {
        let tape = Tape::new();
        let p = Binder::new(&tape, &model.params, false);
        let start = model.pred.start(&p)?;
        Ok(StreamingSession {
            model,
            greedy: Greedy::new(start, max_symbols_per_frame)?,
            buffer: Vec::new(),
            frame_period_ms,
            decoded: 0,
            emit_input_frames: Vec::new(),
            partial_lengths: Vec::new(),
        })
    }

    pub fn frames_consumed(&self) -> usize {
        self.buffer.len() / self.model.config.input_dim
    }

    /// Current partial hypothesis.
    pub fn partial(&self) -> &[usize] {
        &self.greedy.tokens
    }

    fn decode_until(&mut self, complete: usize) -> Result<Vec<(usize, usize)>> {
        if complete <= self.decoded {
            return Ok(Vec::new());
        }
        let n = self.frames_consumed();
        let frames = Tensor::from_vec(vec![n, self.model.config.input_dim], self.buffer.clone())?;
        let x = FeatureSequence::new(frames, self.frame_period_ms)?;
        let e = self.model.causal_encode(&x)?;
        let src = ModelScores::new(self.model, &e.features)?;
        let mut out = Vec::new();
        for t in self.decoded..complete {
            let before = self.greedy.tokens.len();
            self.greedy.frame(&src, t)?;
            for &tok in &self.greedy.tokens[before..] {
                out.push((tok, t));
                self.emit_input_frames.push(n - 1);
            }
        }
        self.decoded = complete;
        Ok(out)
    }

    /// Appends one input frame; returns `(token, encoder frame)` pairs it released.
    pub fn push(&mut self, frame: &[f64]) -> Result<Vec<(usize, usize)>> {
        if frame.len() != self.model.config.input_dim {
            return Err(Error::dim(format!(
                "frame has {} values, model expects {}",
                frame.len(),
                self.model.config.input_dim
            )));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        self.buffer.extend_from_slice(frame);
        let complete = self.model.config.complete_frames(self.frames_consumed());
        let out = self.decode_until(complete)?;
        self.partial_lengths.push(self.greedy.tokens.len());
        Ok(out)
    }

    /// Flushes the encoder frames that wait on zero-padded input.
    pub fn finalize(mut self) -> Result<StreamResult> {
        let n = self.frames_consumed();
        if n == 0 {
            return Ok(StreamResult {
                result: DecodeResult::empty(),
                emit_input_frames: Vec::new(),
                partial_lengths: Vec::new(),
                input_frames: 0,
            });
        }
        let total = self.model.config.encoder_frames(n);
        self.decode_until(total)?;
        if let Some(last) = self.partial_lengths.last_mut() {
            *last = self.greedy.tokens.len();
        }
        Ok(StreamResult {
            result: self.greedy.result(),
            emit_input_frames: self.emit_input_frames,
            partial_lengths: self.partial_lengths,
            input_frames: n,
        })
    }
}

/// Pushes every frame of `x` through a fresh session.
pub fn stream_utterance(
    model: &CascadedModel,
    x: &FeatureSequence,
    max_symbols_per_frame: usize,
) -> Result<StreamResult> {
    let mut session = StreamingSession::new(model, x.frame_period_ms(), max_symbols_per_frame)?;
    for t in 0..x.num_frames() {
        session.push(x.frame(t))?;
    }
    session.finalize()
}

#[cfg(test)]
mod tests;
