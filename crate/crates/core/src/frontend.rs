//! Synthetic "toy speech" and the frame stacking / subsampling front end.
//!
//! Every token id `v` has a fixed mean vector derived from `(seed, v)`. An
//! utterance renders each token as a run of roughly `frames_per_token` noisy
//! copies of its mean. Silence is all-zero frames and never a label.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

/// Token id reserved for blank; labels are `1..=vocab_size`.
pub const BLANK: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    frame_period_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, frame_period_ms: f64) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[0] == 0 || frames.shape()[1] == 0 {
            return Err(Error::dim(format!(
                "feature sequence must be T x d with T, d >= 1, got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Input("non-finite feature value".into()));
        }
        if !(frame_period_ms > 0.0) {
            return Err(Error::Input(format!(
                "frame period must be positive, got {frame_period_ms}"
            )));
        }
        Ok(FeatureSequence {
            frames,
            frame_period_ms,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// The first `t` frames.
    pub fn prefix(&self, t: usize) -> Result<FeatureSequence> {
        if t == 0 || t > self.num_frames() {
            return Err(Error::Contract(format!(
                "prefix length {t} outside 1..={}",
                self.num_frames()
            )));
        }
        let d = self.dim();
        let frames = Tensor::from_vec(vec![t, d], self.frames.data()[..t * d].to_vec())?;
        Ok(FeatureSequence {
            frames,
            frame_period_ms: self.frame_period_ms,
        })
    }
}

/// Label sequence over `1..=V`; blank never appears.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&v| v == BLANK || v > vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside 1..={vocab_size}"
            )));
        }
        Ok(TokenSequence(tokens))
    }

    /// Wraps ids without range checking.
    pub fn from_unchecked(tokens: Vec<usize>) -> Self {
        TokenSequence(tokens)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Space-separated ids, the manifest transcript format.
    pub fn to_transcript(&self) -> String {
        self.0
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_transcript(s: &str, vocab_size: usize) -> Result<Self> {
        let ids = s
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad token `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids, vocab_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Nominal run length of one token, in input frames.
    pub frames_per_token: usize,
    /// Run length is drawn uniformly from `frames_per_token ± duration_jitter`.
    pub duration_jitter: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub frame_period_ms: f64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab_size: 6,
            feature_dim: 6,
            frames_per_token: 9,
            duration_jitter: 3,
            noise_sigma: 0.8,
            seed: 1,
            frame_period_ms: 10.0,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.feature_dim < 1 || self.frames_per_token < 1 {
            return Err(Error::Config(
                "feature_dim and frames_per_token must be >= 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.frame_period_ms > 0.0) {
            return Err(Error::Config(
                "noise_sigma must be >= 0 and frame_period_ms > 0".into(),
            ));
        }
        Ok(())
    }

    /// Mean frame of token `v`, a pure function of `(seed, v)`.
    pub fn token_mean(&self, v: usize) -> Vec<f64> {
        let mut rng = Xoshiro256::indexed(self.seed, "token-mean", v as u64);
        (0..self.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Features, labels and the index of each token's last input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub tokens: TokenSequence,
    pub end_frames: Vec<usize>,
}

fn render<R: Rng>(
    spec: &SynthTaskSpec,
    tokens: &[usize],
    rng: &mut R,
    frames: &mut Vec<f64>,
    end_frames: &mut Vec<usize>,
) {
    let d = spec.feature_dim;
    let k = spec.frames_per_token as i64;
    let j = spec.duration_jitter as i64;
    for &v in tokens {
        let mean = spec.token_mean(v);
        let len = if j > 0 { rng.random_range(k - j..=k + j) } else { k }.max(1);
        for _ in 0..len {
            for m in &mean {
                let noise: f64 = if spec.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    spec.noise_sigma * z
                } else {
                    0.0
                };
                frames.push(m + noise);
            }
        }
        end_frames.push(frames.len() / d - 1);
    }
}

/// Draws `length_tokens` uniform labels and renders them.
pub fn synth_utterance<R: Rng>(spec: &SynthTaskSpec, length_tokens: usize, rng: &mut R) -> Utterance {
    let d = spec.feature_dim;
    let ids: Vec<usize> = (0..length_tokens)
        .map(|_| rng.random_range(1..=spec.vocab_size))
        .collect();
    let mut frames = Vec::new();
    let mut end_frames = Vec::with_capacity(length_tokens);
    render(spec, &ids, rng, &mut frames, &mut end_frames);
    if frames.is_empty() {
        frames = vec![0.0; d];
    }
    let t = frames.len() / d;
    Utterance {
        features: FeatureSequence {
            frames: Tensor::from_vec(vec![t, d], frames).expect("consistent frame buffer"),
            frame_period_ms: spec.frame_period_ms,
        },
        tokens: TokenSequence(ids),
        end_frames,
    }
}

/// Concatenates `n_utterances` utterances separated by silence.
pub fn synth_longform<R: Rng>(
    spec: &SynthTaskSpec,
    n_utterances: usize,
    tokens_each: usize,
    silence_frames: usize,
    rng: &mut R,
) -> Result<Utterance> {
    if n_utterances == 0 {
        return Err(Error::Contract("n_utterances must be >= 1".into()));
    }
    let d = spec.feature_dim;
    let mut frames: Vec<f64> = Vec::new();
    let mut tokens = Vec::new();
    let mut end_frames = Vec::new();
    for i in 0..n_utterances {
        if i > 0 {
            frames.extend(std::iter::repeat_n(0.0, silence_frames * d));
        }
        let offset = frames.len() / d;
        let u = synth_utterance(spec, tokens_each, rng);
        frames.extend_from_slice(u.features.frames.data());
        tokens.extend_from_slice(u.tokens.ids());
        end_frames.extend(u.end_frames.iter().map(|e| e + offset));
    }
    let t = frames.len() / d;
    Ok(Utterance {
        features: FeatureSequence {
            frames: Tensor::from_vec(vec![t, d], frames)?,
            frame_period_ms: spec.frame_period_ms,
        },
        tokens: TokenSequence(tokens),
        end_frames,
    })
}

/// Output frame `t'` concatenates input frames `t'·stride ..= t'·stride + stack - 1`,
/// zero-padded past the end. `T' = ceil(T / stride)`.
pub fn stack_and_subsample(
    x: &FeatureSequence,
    stack: usize,
    stride: usize,
) -> Result<FeatureSequence> {
    if stack == 0 || stride == 0 {
        return Err(Error::Contract("stack and stride must be >= 1".into()));
    }
    let (t_in, d) = (x.num_frames(), x.dim());
    let t_out = t_in.div_ceil(stride);
    let mut data = Vec::with_capacity(t_out * stack * d);
    for o in 0..t_out {
        for s in 0..stack {
            let src = o * stride + s;
            if src < t_in {
                data.extend_from_slice(x.frame(src));
            } else {
                data.extend(std::iter::repeat_n(0.0, d));
            }
        }
    }
    Ok(FeatureSequence {
        frames: Tensor::from_vec(vec![t_out, stack * d], data)?,
        frame_period_ms: x.frame_period_ms * stride as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec() -> SynthTaskSpec {
        SynthTaskSpec {
            vocab_size: 5,
            feature_dim: 3,
            frames_per_token: 3,
            duration_jitter: 0,
            noise_sigma: 0.0,
            seed: 42,
            frame_period_ms: 10.0,
        }
    }

    #[test]
    fn empty_utterance_is_one_silent_frame() {
        let mut rng = Xoshiro256::seed_from_u64(0);
        let u = synth_utterance(&spec(), 0, &mut rng);
        assert!(u.tokens.is_empty());
        assert!(u.end_frames.is_empty());
        assert_eq!(u.features.num_frames(), 1);
        assert!(u.features.frame(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_rendering_tiles_means() {
        let s = spec();
        let mut rng = Xoshiro256::seed_from_u64(3);
        let u = synth_utterance(&s, 2, &mut rng);
        let (a, b) = (u.tokens.ids()[0], u.tokens.ids()[1]);
        let (ma, mb) = (s.token_mean(a), s.token_mean(b));
        assert_eq!(u.features.num_frames(), 6);
        for t in 0..3 {
            assert_eq!(u.features.frame(t), &ma[..]);
            assert_eq!(u.features.frame(t + 3), &mb[..]);
        }
        assert_eq!(u.end_frames, vec![2, 5]);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SynthTaskSpec {
            noise_sigma: 0.5,
            duration_jitter: 2,
            ..spec()
        };
        let a = synth_utterance(&s, 7, &mut Xoshiro256::seed_from_u64(9));
        let b = synth_utterance(&s, 7, &mut Xoshiro256::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.tokens.ids().iter().all(|&v| (1..=5).contains(&v)));
    }

    #[test]
    fn jitter_stays_in_range() {
        let s = SynthTaskSpec {
            frames_per_token: 5,
            duration_jitter: 2,
            ..spec()
        };
        let u = synth_utterance(&s, 50, &mut Xoshiro256::seed_from_u64(1));
        let mut prev: isize = -1;
        for &e in &u.end_frames {
            let len = e as isize - prev;
            assert!((3..=7).contains(&len), "{len}");
            prev = e as isize;
        }
    }

    #[test]
    fn longform_single_segment_equals_utterance() {
        let s = SynthTaskSpec {
            noise_sigma: 0.3,
            ..spec()
        };
        let a = synth_longform(&s, 1, 4, 5, &mut Xoshiro256::seed_from_u64(2)).unwrap();
        let b = synth_utterance(&s, 4, &mut Xoshiro256::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn longform_frame_count() {
        let s = SynthTaskSpec {
            frames_per_token: 2,
            ..spec()
        };
        let u = synth_longform(&s, 2, 1, 3, &mut Xoshiro256::seed_from_u64(4)).unwrap();
        assert_eq!(u.features.num_frames(), 7);
        assert_eq!(u.end_frames, vec![1, 6]);
        assert_eq!(u.tokens.len(), 2);
        for t in 2..5 {
            assert!(u.features.frame(t).iter().all(|&v| v == 0.0));
        }
        let u = synth_longform(&s, 10, 3, 2, &mut Xoshiro256::seed_from_u64(4)).unwrap();
        assert_eq!(u.tokens.len(), 30);
        assert!(synth_longform(&s, 0, 3, 2, &mut Xoshiro256::seed_from_u64(4)).is_err());
    }

    fn ramp(t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|i| i as f64 + 1.0).collect();
        FeatureSequence::new(Tensor::from_vec(vec![t, d], data).unwrap(), 10.0).unwrap()
    }

    #[test]
    fn stacking_identity() {
        let x = ramp(5, 2);
        assert_eq!(stack_and_subsample(&x, 1, 1).unwrap(), x);
    }

    #[test]
    fn stacking_index_arithmetic() {
        let x = ramp(12, 2);
        let y = stack_and_subsample(&x, 4, 3).unwrap();
        assert_eq!((y.num_frames(), y.dim()), (4, 8));
        assert_eq!(y.frame_period_ms(), 30.0);
        // last output = frames 9, 10, 11 and one zero pad
        let mut expect: Vec<f64> = (18..24).map(|i| i as f64 + 1.0).collect();
        expect.extend([0.0, 0.0]);
        assert_eq!(y.frame(3), &expect[..]);
        // first output = frames 0..=3
        let first: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        assert_eq!(y.frame(0), &first[..]);
    }

    #[test]
    fn stacking_single_frame() {
        let x = ramp(1, 2);
        let y = stack_and_subsample(&x, 4, 3).unwrap();
        assert_eq!(y.frame(0), &[1.0, 2.0, 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn stride_one_keeps_every_frame() {
        let x = ramp(6, 1);
        let y = stack_and_subsample(&x, 3, 1).unwrap();
        for t in 0..6 {
            assert!(y.frames().data().contains(&(t as f64 + 1.0)));
        }
    }

    #[test]
    fn transcript_round_trip_and_range_check() {
        let t = TokenSequence::parse_transcript("3 1 4", 5).unwrap();
        assert_eq!(t.ids(), &[3, 1, 4]);
        assert_eq!(t.to_transcript(), "3 1 4");
        assert!(TokenSequence::parse_transcript("0 1", 5).is_err());
        assert!(TokenSequence::parse_transcript("6", 5).is_err());
        assert!(TokenSequence::parse_transcript("", 5).unwrap().is_empty());
    }
}
