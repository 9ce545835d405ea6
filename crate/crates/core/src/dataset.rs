//! On-disk corpora: a newline-delimited JSON manifest plus one binary
//! feature file per utterance.
//!
//! Feature file layout (little-endian): magic `FEAT`, `u32` version (1),
//! `u32` T, `u32` d, `f64` frame period in ms, then `T·d` `f32` values.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::frontend::{
    synth_longform, synth_utterance, FeatureSequence, SynthTaskSpec, TokenSequence, Utterance,
};
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// Largest tolerated fraction of unreadable manifest records.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory.
    pub feature_file: String,
    pub transcript: String,
    pub end_frames: Vec<usize>,
}

/// A loaded utterance with its id.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub utterance: Utterance,
}

pub fn encode_features(x: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * x.frames().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(x.dim() as u32).to_le_bytes());
    out.extend_from_slice(&x.frame_period_ms().to_le_bytes());
    for v in x.frames().data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fail(bytes.len(), "truncated feature header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic, expected FEAT"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(fail(4, &format!("unsupported feature version {version}")));
    }
    let (t, d) = (u32_at(8) as usize, u32_at(12) as usize);
    let period = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let need = FEATURE_HEADER_LEN + 4 * t * d;
    if bytes.len() < need {
        return Err(fail(bytes.len(), &format!("truncated: need {need} bytes")));
    }
    let data = bytes[FEATURE_HEADER_LEN..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSequence::new(Tensor::from_vec(vec![t, d], data)?, period)
}

pub fn write_features(path: &Path, x: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(x))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

/// Writes feature files and `manifest.jsonl` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, examples: &[Example]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut w = BufWriter::new(File::create(&manifest)?);
    for ex in examples {
        let feature_file = format!("{}.feat", ex.id);
        write_features(&dir.join(&feature_file), &ex.utterance.features)?;
        let rec = ManifestRecord {
            id: ex.id.clone(),
            feature_file,
            transcript: ex.utterance.tokens.to_transcript(),
            end_frames: ex.utterance.end_frames.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Accepts either a manifest file or a directory holding `manifest.jsonl`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn load_record(base: &Path, line: &str, vocab_size: usize) -> Result<Example> {
    let rec: ManifestRecord = serde_json::from_str(line)?;
    let features = read_features(&base.join(&rec.feature_file))?;
    let tokens = TokenSequence::parse_transcript(&rec.transcript, vocab_size)?;
    if rec.end_frames.len() != tokens.len() {
        return Err(Error::Input(format!(
            "{}: {} end frames for {} tokens",
            rec.id,
            rec.end_frames.len(),
            tokens.len()
        )));
    }
    Ok(Example {
        id: rec.id,
        utterance: Utterance {
            features,
            tokens,
            end_frames: rec.end_frames,
        },
    })
}

/// Loads a manifest, skipping unreadable records with a warning. Fails when
/// more than 10% of the records are skipped.
pub fn load_manifest(path: &Path, vocab_size: usize) -> Result<Vec<Example>> {
    let path = resolve_manifest(path);
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(File::open(&path)?);
    let mut examples = Vec::new();
    let mut total = 0usize;
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match load_record(&base, &line, vocab_size) {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                skipped += 1;
                log::warn!("{}:{}: skipping record: {e}", path.display(), lineno + 1);
            }
        }
    }
    if total > 0 && skipped as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(Error::Input(format!(
            "{skipped} of {total} manifest records unreadable"
        )));
    }
    Ok(examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Longform,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Longform => "longform",
        }
    }
}

/// Utterance `i` of a split is drawn from its own stream of the task seed, so
/// a split's first `n` utterances do not depend on how many are generated.
/// Long-form utterances concatenate `longform_segments` segments of
/// `tokens_max` tokens each. A fraction of training utterances joins two
/// segments with silence.
pub fn generate_split(
    task: &SynthTaskSpec,
    data: &DataConfig,
    split: Split,
    n: usize,
) -> Result<Vec<Example>> {
    task.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = Xoshiro256::indexed(task.seed, split.name(), i as u64);
            let utterance = match split {
                Split::Longform => synth_longform(
                    task,
                    data.longform_segments,
                    data.tokens_max,
                    data.silence_frames,
                    &mut rng,
                )?,
                Split::Train if rng.random::<f64>() < data.train_two_segment_fraction => {
                    let len = rng.random_range(data.tokens_min..=data.tokens_max);
                    synth_longform(task, 2, len.div_ceil(2), data.silence_frames, &mut rng)?
                }
                _ => {
                    let len = rng.random_range(data.tokens_min..=data.tokens_max);
                    synth_utterance(task, len, &mut rng)
                }
            };
            Ok(Example {
                id: format!("{}-{i:05}", split.name()),
                utterance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn example(id: &str, seed: u64) -> Example {
        let spec = SynthTaskSpec::default();
        Example {
            id: id.into(),
            utterance: synth_utterance(&spec, 3, &mut Xoshiro256::seed_from_u64(seed)),
        }
    }

    #[test]
    fn feature_header_layout() {
        let x = FeatureSequence::new(Tensor::from_vec(vec![2, 1], vec![0.5, -1.0]).unwrap(), 10.0)
            .unwrap();
        let b = encode_features(&x);
        assert_eq!(&b[0..4], b"FEAT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[16..24].try_into().unwrap()), 10.0);
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), 0.5);
        assert_eq!(b.len(), 32);
        assert_eq!(decode_features(&b).unwrap(), x);
    }

    #[test]
    fn corrupt_feature_files_report_offsets() {
        let x = example("a", 1).utterance.features;
        let mut b = encode_features(&x);
        let truncated = &b[..b.len() - 3];
        match decode_features(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, truncated.len()),
            other => panic!("{other:?}"),
        }
        b[0] = b'X';
        assert!(matches!(decode_features(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let exs = vec![example("u0", 1), example("u1", 2)];
        let manifest = write_dataset(dir.path(), &exs).unwrap();
        let loaded = load_manifest(&manifest, 6).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].id, "u1");
        assert_eq!(loaded[1].utterance.tokens, exs[1].utterance.tokens);
        assert_eq!(loaded[1].utterance.end_frames, exs[1].utterance.end_frames);
        // f32 storage
        let a = loaded[0].utterance.features.frames().data()[0];
        let b = exs[0].utterance.features.frames().data()[0];
        assert_eq!(a, b as f32 as f64);
        // directory form resolves too
        assert_eq!(load_manifest(dir.path(), 6).unwrap().len(), 2);
    }

    #[test]
    fn skip_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let exs: Vec<Example> = (0..10).map(|i| example(&format!("u{i}"), i)).collect();
        let manifest = write_dataset(dir.path(), &exs).unwrap();
        fs::remove_file(dir.path().join("u3.feat")).unwrap();
        assert_eq!(load_manifest(&manifest, 6).unwrap().len(), 9);
        fs::remove_file(dir.path().join("u4.feat")).unwrap();
        assert!(load_manifest(&manifest, 6).is_err());
    }

    #[test]
    fn splits_are_prefix_stable_and_distinct() {
        let (task, data) = (SynthTaskSpec::default(), DataConfig::default());
        let a = generate_split(&task, &data, Split::Eval, 5).unwrap();
        let b = generate_split(&task, &data, Split::Eval, 3).unwrap();
        assert_eq!(&a[..3], &b[..]);
        let t = generate_split(&task, &data, Split::Train, 3).unwrap();
        assert_ne!(t[0].utterance, a[0].utterance);
        for ex in &a {
            let n = ex.utterance.tokens.len();
            assert!((data.tokens_min..=data.tokens_max).contains(&n));
        }
        assert!(generate_split(&task, &data, Split::Train, 0).unwrap().is_empty());
    }

    #[test]
    fn longform_is_a_multiple_of_eval_length() {
        let (task, data) = (SynthTaskSpec::default(), DataConfig::default());
        let mean = |xs: &[Example]| {
            xs.iter().map(|e| e.utterance.tokens.len()).sum::<usize>() as f64 / xs.len() as f64
        };
        let eval = generate_split(&task, &data, Split::Eval, 20).unwrap();
        let long = generate_split(&task, &data, Split::Longform, 3).unwrap();
        assert!(mean(&long) >= data.longform_segments as f64 * mean(&eval));
        let u = &long[0].utterance;
        assert_eq!(u.tokens.len(), data.longform_segments * data.tokens_max);
        assert_eq!(u.end_frames.len(), u.tokens.len());
    }
}
