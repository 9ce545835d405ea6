//! Word error rate and emission latency.
//!
//! Latency follows a token-level reading of PR90: each correctly recognized
//! token is timed from its last input frame to the input frame whose arrival
//! let the decoder emit it. The endpoint figure is a proxy: the delay from the
//! last token's end to the final change of the hypothesis.

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::decoder::{decode, stream_utterance, DecodeResult, SearchConfig};
use crate::encoders::Mode;
use crate::error::Result;
use crate::model::CascadedModel;
use crate::par::par_map;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    pub wer: f64,
}

impl WerBreakdown {
    fn new(substitutions: usize, insertions: usize, deletions: usize, ref_len: usize) -> Self {
        WerBreakdown {
            substitutions,
            insertions,
            deletions,
            ref_len,
            wer: (substitutions + insertions + deletions) as f64 / ref_len.max(1) as f64,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Pools counts; the rate is recomputed from the totals.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a WerBreakdown>) -> Self {
        let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
        for p in parts {
            s += p.substitutions;
            i += p.insertions;
            d += p.deletions;
            n += p.ref_len;
        }
        WerBreakdown::new(s, i, d, n)
    }
}

/// One step of an alignment; indices point into the reference and hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Insert { h: usize },
    Delete { r: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub breakdown: WerBreakdown,
    /// Operations in reference order.
    pub ops: Vec<AlignOp>,
}

impl Alignment {
    /// `(reference index, hypothesis index)` of every correct token.
    pub fn matches(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ops.iter().filter_map(|op| match *op {
            AlignOp::Match { r, h } => Some((r, h)),
            _ => None,
        })
    }
}

/// Unit-cost Levenshtein alignment. The backtrace prefers the diagonal
/// (match or substitution), then deletion, then insertion.
pub fn edit_distance_align(reference: &[usize], hyp: &[usize]) -> Alignment {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut s, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                i -= 1;
                j -= 1;
                ops.push(if same {
                    AlignOp::Match { r: i, h: j }
                } else {
                    s += 1;
                    AlignOp::Substitute { r: i, h: j }
                });
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            i -= 1;
            del += 1;
            ops.push(AlignOp::Delete { r: i });
        } else {
            j -= 1;
            ins += 1;
            ops.push(AlignOp::Insert { h: j });
        }
    }
    ops.reverse();
    Alignment {
        breakdown: WerBreakdown::new(s, ins, del, n),
        ops,
    }
}

/// Value at 1-based rank `ceil(pct/100 · n)` of the sorted sample.
pub fn nearest_rank(sorted: &[f64], pct: usize) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (pct * sorted.len()).div_ceil(100).max(1);
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub delays_ms: Vec<f64>,
    pub p50_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    /// 90th percentile of the per-utterance endpoint proxy.
    pub ep_proxy_ms: Option<f64>,
    /// No correctly recognized token was available.
    pub empty: bool,
}

impl LatencyStats {
    pub fn from_delays(mut delays_ms: Vec<f64>, mut ep_ms: Vec<f64>) -> Self {
        delays_ms.sort_by(f64::total_cmp);
        ep_ms.sort_by(f64::total_cmp);
        LatencyStats {
            p50_ms: nearest_rank(&delays_ms, 50),
            p90_ms: nearest_rank(&delays_ms, 90),
            ep_proxy_ms: nearest_rank(&ep_ms, 90),
            empty: delays_ms.is_empty(),
            delays_ms,
        }
    }
}

/// Timing of one decoded utterance in the input timebase.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceTiming {
    pub delays_ms: Vec<f64>,
    /// Last hypothesis change minus the last labelled input frame, if any.
    pub ep_proxy_ms: Option<f64>,
}

/// Per-token delays of correctly aligned tokens. `emit_input_frames[h]` is
/// the input frame at which hypothesis token `h` became available.
pub fn emission_latency(
    emit_input_frames: &[usize],
    truth_end_frames: &[usize],
    alignment: &Alignment,
    frame_period_ms: f64,
) -> UtteranceTiming {
    let delays_ms = alignment
        .matches()
        .map(|(r, h)| (emit_input_frames[h] as f64 - truth_end_frames[r] as f64) * frame_period_ms)
        .collect();
    let ep_proxy_ms = match (emit_input_frames.last(), truth_end_frames.last()) {
        (Some(&e), Some(&s)) => Some((e as f64 - s as f64) * frame_period_ms),
        _ => None,
    };
    UtteranceTiming {
        delays_ms,
        ep_proxy_ms,
    }
}

/// Maps encoder emission frames to the last input frame each one reads,
/// clamped to the utterance.
pub fn offline_emit_input_frames(
    model: &CascadedModel,
    result: &DecodeResult,
    input_frames: usize,
) -> Vec<usize> {
    result
        .emit_frames
        .iter()
        .map(|&t| model.config.last_input_frame(t).min(input_frames.saturating_sub(1)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub p50_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub ep_proxy_ms: Option<f64>,
    pub correct_tokens: usize,
    pub empty: bool,
}

/// Corpus-level evaluation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    pub latency: LatencyReport,
    pub mode: Mode,
    /// 0 means greedy search.
    pub beam: usize,
    pub streaming: bool,
    pub utterances: usize,
}

impl EvalReport {
    pub fn breakdown(&self) -> WerBreakdown {
        WerBreakdown::new(self.substitutions, self.insertions, self.deletions, self.ref_len)
    }

    fn assemble(
        parts: Vec<(WerBreakdown, UtteranceTiming)>,
        mode: Mode,
        beam: usize,
        streaming: bool,
    ) -> Self {
        let wer = WerBreakdown::pooled(parts.iter().map(|p| &p.0));
        let mut delays = Vec::new();
        let mut eps = Vec::new();
        for (_, timing) in &parts {
            delays.extend_from_slice(&timing.delays_ms);
            eps.extend(timing.ep_proxy_ms);
        }
        let stats = LatencyStats::from_delays(delays, eps);
        EvalReport {
            wer: wer.wer,
            substitutions: wer.substitutions,
            insertions: wer.insertions,
            deletions: wer.deletions,
            ref_len: wer.ref_len,
            latency: LatencyReport {
                p50_ms: stats.p50_ms,
                p90_ms: stats.p90_ms,
                ep_proxy_ms: stats.ep_proxy_ms,
                correct_tokens: stats.delays_ms.len(),
                empty: stats.empty,
            },
            mode,
            beam,
            streaming,
            utterances: parts.len(),
        }
    }
}

/// Offline decoding of every example along `mode`; pooled WER and latency.
pub fn corpus_eval(
    examples: &[Example],
    model: &CascadedModel,
    mode: Mode,
    search: SearchConfig,
    threads: usize,
) -> Result<EvalReport> {
    let parts = par_map(examples, threads, |ex| -> Result<_> {
        let u = &ex.utterance;
        let e = model.encode(&u.features, mode)?;
        let result = decode(&e, model, search)?;
        let align = edit_distance_align(u.tokens.ids(), result.tokens.ids());
        let emit = offline_emit_input_frames(model, &result, u.features.num_frames());
        let timing = emission_latency(&emit, &u.end_frames, &align, u.features.frame_period_ms());
        Ok((align.breakdown, timing))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::assemble(parts, mode, search.beam, false))
}

/// Streams every example through a causal greedy session.
pub fn streaming_eval(
    examples: &[Example],
    model: &CascadedModel,
    max_symbols_per_frame: usize,
    threads: usize,
) -> Result<EvalReport> {
    let parts = par_map(examples, threads, |ex| -> Result<_> {
        let u = &ex.utterance;
        let s = stream_utterance(model, &u.features, max_symbols_per_frame)?;
        let align = edit_distance_align(u.tokens.ids(), s.result.tokens.ids());
        let timing = emission_latency(
            &s.emit_input_frames,
            &u.end_frames,
            &align,
            u.features.frame_period_ms(),
        );
        Ok((align.breakdown, timing))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::assemble(parts, Mode::Causal, 0, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ops_cost(a: &[usize], b: &[usize]) -> usize {
        edit_distance_align(a, b).breakdown.errors()
    }

    /// Plain recursive Levenshtein distance.
    fn brute(a: &[usize], b: &[usize]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn identical_sequences() {
        let a = edit_distance_align(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(a.breakdown, WerBreakdown::new(0, 0, 0, 3));
        assert_eq!(a.breakdown.wer, 0.0);
        assert_eq!(a.matches().count(), 3);
    }

    #[test]
    fn substitution_and_insertion_example() {
        // ref a b c, hyp a x c d
        let a = edit_distance_align(&[1, 2, 3], &[1, 4, 3, 5]);
        let b = a.breakdown;
        assert_eq!((b.substitutions, b.insertions, b.deletions), (1, 1, 0));
        assert!((b.wer - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            a.ops,
            vec![
                AlignOp::Match { r: 0, h: 0 },
                AlignOp::Substitute { r: 1, h: 1 },
                AlignOp::Match { r: 2, h: 2 },
                AlignOp::Insert { h: 3 },
            ]
        );
    }

    #[test]
    fn empty_reference_convention() {
        let b = edit_distance_align(&[], &[1]).breakdown;
        assert_eq!((b.insertions, b.ref_len), (1, 0));
        assert_eq!(b.wer, 1.0);
        assert_eq!(edit_distance_align(&[], &[]).breakdown.wer, 0.0);
    }

    #[test]
    fn substitution_preferred_over_insert_delete() {
        let b = edit_distance_align(&[1], &[2]).breakdown;
        assert_eq!((b.substitutions, b.insertions, b.deletions), (1, 0, 0));
    }

    #[test]
    fn pooled_wer_is_error_weighted() {
        let parts = [WerBreakdown::new(1, 0, 0, 2), WerBreakdown::new(0, 0, 0, 2)];
        assert_eq!(WerBreakdown::pooled(&parts).wer, 0.25);
        let uneven = [WerBreakdown::new(1, 0, 0, 1), WerBreakdown::new(0, 0, 0, 9)];
        assert_eq!(WerBreakdown::pooled(&uneven).wer, 0.1);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let d: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&d, 90), Some(9.0));
        assert_eq!(nearest_rank(&d, 50), Some(5.0));
        assert_eq!(nearest_rank(&d, 100), Some(10.0));
        assert_eq!(nearest_rank(&[4.0], 90), Some(4.0));
        assert_eq!(nearest_rank(&[], 90), None);
    }

    #[test]
    fn delay_arithmetic() {
        let align = edit_distance_align(&[3], &[3]);
        let t = emission_latency(&[12], &[10], &align, 10.0);
        assert_eq!(t.delays_ms, vec![20.0]);
        assert_eq!(t.ep_proxy_ms, Some(20.0));
    }

    #[test]
    fn zero_delay_stream() {
        let align = edit_distance_align(&[1, 2, 3], &[1, 2, 3]);
        let t = emission_latency(&[4, 9, 14], &[4, 9, 14], &align, 10.0);
        let s = LatencyStats::from_delays(t.delays_ms, vec![t.ep_proxy_ms.unwrap()]);
        assert_eq!((s.p50_ms, s.p90_ms), (Some(0.0), Some(0.0)));
        assert!(!s.empty);
    }

    #[test]
    fn only_correct_tokens_are_timed() {
        let align = edit_distance_align(&[1, 2, 3], &[1, 5, 3]);
        let t = emission_latency(&[5, 6, 30], &[4, 9, 14], &align, 10.0);
        assert_eq!(t.delays_ms, vec![10.0, 160.0]);
    }

    #[test]
    fn no_correct_tokens_is_flagged() {
        let align = edit_distance_align(&[1, 2], &[]);
        let t = emission_latency(&[], &[3, 7], &align, 10.0);
        let s = LatencyStats::from_delays(t.delays_ms, t.ep_proxy_ms.into_iter().collect());
        assert!(s.empty);
        assert_eq!((s.p50_ms, s.p90_ms, s.ep_proxy_ms), (None, None, None));
        let json = serde_json::to_string(&s).unwrap();
        assert!(!json.contains("NaN"), "{json}");
    }

    #[test]
    fn alignment_ops_are_consistent() {
        let a = edit_distance_align(&[1, 2, 2, 4, 1], &[2, 2, 3, 1, 1, 1]);
        let (mut r, mut h) = (0, 0);
        for op in &a.ops {
            match *op {
                AlignOp::Match { r: ri, h: hi } | AlignOp::Substitute { r: ri, h: hi } => {
                    assert_eq!((ri, hi), (r, h));
                    r += 1;
                    h += 1;
                }
                AlignOp::Insert { h: hi } => {
                    assert_eq!(hi, h);
                    h += 1;
                }
                AlignOp::Delete { r: ri } => {
                    assert_eq!(ri, r);
                    r += 1;
                }
            }
        }
        assert_eq!((r, h), (5, 6));
    }

    fn seq() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=4, 0..=8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_recursive_oracle(a in seq(), b in seq()) {
            let al = edit_distance_align(&a, &b);
            prop_assert_eq!(al.breakdown.errors(), brute(&a, &b));
            prop_assert!(al.breakdown.substitutions + al.breakdown.deletions <= a.len());
        }

        #[test]
        fn metric_axioms(a in seq(), b in seq(), c in seq()) {
            prop_assert_eq!(ops_cost(&a, &b), ops_cost(&b, &a));
            prop_assert_eq!(ops_cost(&a, &b) == 0, a == b);
            prop_assert!(ops_cost(&a, &c) <= ops_cost(&a, &b) + ops_cost(&b, &c));
        }

        #[test]
        fn percentiles_are_ordered(xs in prop::collection::vec(-500.0f64..500.0, 1..40)) {
            let s = LatencyStats::from_delays(xs, vec![]);
            prop_assert!(s.p50_ms.unwrap() <= s.p90_ms.unwrap());
        }
    }
}
