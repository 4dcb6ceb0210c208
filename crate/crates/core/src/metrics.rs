//! Character-level completion metrics and the typing simulation behind the
//! trigger rate and typing effort saved.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completer::{Completer, Query, Suggestion};
use crate::dialog::{clip_prefix, PrefixSample, DEFAULT_MAX_PREFIX_CHARS};
use crate::error::{Error, Result};
pub use crate::text::lcp_len;
use crate::text::{byte_offset, char_len};

/// How the simulated user takes a shown suggestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptPolicy {
    /// Accept exactly the part of the suggestion that matches the text.
    #[default]
    GreedyLcp,
    /// Accept only when the whole suggestion matches.
    AllOrNothing,
}

/// Where the typing simulation consults the completer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypingMode {
    /// After every typed character.
    #[default]
    Keystroke,
    /// Once, at the sample's stored split point.
    SplitPoint,
}

impl fmt::Display for TypingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TypingMode::Keystroke => "keystroke",
            TypingMode::SplitPoint => "split_point",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trigger_threshold: f64,
    pub policy: AcceptPolicy,
    pub mode: TypingMode,
    pub max_prefix_chars: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trigger_threshold: 0.0,
            policy: AcceptPolicy::GreedyLcp,
            mode: TypingMode::Keystroke,
            max_prefix_chars: DEFAULT_MAX_PREFIX_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEvent {
    Typed(char),
    Trigger(String),
    Accept(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    pub chars_typed: usize,
    pub chars_saved: usize,
    pub suggestions_triggered: usize,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.chars_typed + self.chars_saved
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tes(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.chars_saved as f64 / self.len() as f64
        }
    }

    pub fn tr(&self) -> f64 {
        if self.chars_typed == 0 {
            0.0
        } else {
            self.suggestions_triggered as f64 / self.chars_typed as f64
        }
    }

    fn typed(&mut self, c: char) {
        self.chars_typed += 1;
        self.events.push(SimEvent::Typed(c));
    }
}

/// One row of a results table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub n_samples: usize,
    pub n_shown: usize,
    pub tr: f64,
    pub sm: f64,
    pub pr_p: f64,
    pub pr_r: f64,
    pub pr_f1: f64,
    pub avg_pred_len: f64,
    pub tes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TypingMode>,
}

impl MetricRow {
    pub const TSV_HEADER: &'static str = "model\tn\tshown\tTR\tSM\tPR-P\tPR-R\tPR-F1\t|Pred|\tTES\tmode";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.4}\t{}",
            self.model_id,
            self.n_samples,
            self.n_shown,
            self.tr,
            self.sm,
            self.pr_p,
            self.pr_r,
            self.pr_f1,
            self.avg_pred_len,
            self.tes,
            self.mode.map(|m| m.to_string()).unwrap_or_else(|| "-".into())
        )
    }
}

pub fn instance_precision(s: &str, g: &str) -> f64 {
    let n = char_len(s);
    if n == 0 {
        0.0
    } else {
        lcp_len(s, g) as f64 / n as f64
    }
}

pub fn instance_recall(s: &str, g: &str) -> f64 {
    let n = char_len(g);
    if n == 0 {
        0.0
    } else {
        lcp_len(s, g) as f64 / n as f64
    }
}

pub fn instance_f1(s: &str, g: &str) -> f64 {
    partial_f1(instance_precision(s, g), instance_recall(s, g))
}

pub fn partial_f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_lengths<S, G>(s: &[S], g: &[G]) -> Result<()> {
    if s.len() != g.len() {
        return Err(Error::LengthMismatch {
            left: s.len(),
            right: g.len(),
        });
    }
    Ok(())
}

fn mean_of<S: AsRef<str>, G: AsRef<str>>(s: &[S], g: &[G], f: fn(&str, &str) -> f64) -> Result<f64> {
    check_lengths(s, g)?;
    if s.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = s.iter().zip(g).map(|(a, b)| f(a.as_ref(), b.as_ref())).sum();
    Ok(sum / s.len() as f64)
}

/// Fraction of shown suggestions equal to their gold continuation.
pub fn syntactic_match<S: AsRef<str>, G: AsRef<str>>(suggestions: &[S], golds: &[G]) -> Result<f64> {
    check_lengths(suggestions, golds)?;
    if suggestions.is_empty() {
        return Err(Error::Empty("suggestions"));
    }
    mean_of(suggestions, golds, |a, b| f64::from(u8::from(a == b)))
}

pub fn partial_precision<S: AsRef<str>, G: AsRef<str>>(suggestions: &[S], golds: &[G]) -> Result<f64> {
    mean_of(suggestions, golds, instance_precision)
}

pub fn partial_recall<S: AsRef<str>, G: AsRef<str>>(suggestions: &[S], golds: &[G]) -> Result<f64> {
    mean_of(suggestions, golds, instance_recall)
}

fn accepted(suggestion: &str, remaining: &str, policy: AcceptPolicy) -> usize {
    match policy {
        AcceptPolicy::GreedyLcp => lcp_len(suggestion, remaining),
        AcceptPolicy::AllOrNothing if remaining.starts_with(suggestion) => char_len(suggestion),
        AcceptPolicy::AllOrNothing => 0,
    }
}

fn offer(trace: &mut SimTrace, s: &Suggestion, remaining: &str, threshold: f64, policy: AcceptPolicy) -> usize {
    if !s.triggers(threshold) {
        return 0;
    }
    trace.suggestions_triggered += 1;
    trace.events.push(SimEvent::Trigger(s.text.clone()));
    let n = accepted(&s.text, remaining, policy);
    if n > 0 {
        trace.chars_saved += n;
        trace.events.push(SimEvent::Accept(n));
    }
    n
}

/// Types the sample's full utterance one character at a time.
///
/// The completer is consulted after every typed character that leaves text
/// to go, so an empty draft is never queried and an accepted suggestion is
/// always followed by a typed character.
pub fn simulate_typing(
    completer: &dyn Completer,
    sample: &PrefixSample,
    threshold: f64,
    policy: AcceptPolicy,
    max_prefix_chars: usize,
) -> SimTrace {
    let full = sample.full_text();
    let mut trace = SimTrace::default();
    let mut draft = String::with_capacity(full.len());
    let mut rest = full.as_str();
    while let Some(c) = rest.chars().next() {
        draft.push(c);
        rest = &rest[c.len_utf8()..];
        trace.typed(c);
        if rest.is_empty() {
            break;
        }
        let query = Query::for_sample(sample, clip_prefix(&draft, max_prefix_chars));
        let s = completer.complete(&query);
        let n = offer(&mut trace, &s, rest, threshold, policy);
        if n > 0 {
            let (take, tail) = rest.split_at(byte_offset(rest, n));
            draft.push_str(take);
            rest = tail;
        }
    }
    trace
}

/// Trace for a user who typed the stored prefix, saw `suggestion` once and
/// typed whatever it did not cover.
pub fn split_point_trace(
    sample: &PrefixSample,
    suggestion: &Suggestion,
    threshold: f64,
    policy: AcceptPolicy,
) -> SimTrace {
    let mut trace = SimTrace::default();
    sample.prefix.chars().for_each(|c| trace.typed(c));
    let n = offer(&mut trace, suggestion, &sample.completion, threshold, policy);
    sample.completion.chars().skip(n).for_each(|c| trace.typed(c));
    trace
}

/// Queries `completer` once per sample at its stored split point.
pub fn one_shot(completer: &dyn Completer, samples: &[PrefixSample], max_prefix_chars: usize) -> Vec<Suggestion> {
    samples
        .par_iter()
        .map(|s| completer.complete_timed(&Query::for_sample(s, clip_prefix(&s.prefix, max_prefix_chars))))
        .collect()
}

/// One-shot part of a row: everything except TR and TES.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OneShotScores {
    pub n_shown: usize,
    pub sm: f64,
    pub pr_p: f64,
    pub pr_r: f64,
    pub pr_f1: f64,
    pub avg_pred_len: f64,
}

/// Scores suggestions against their gold continuations, counting only the
/// ones that would have been shown. Nothing shown gives all zeros.
pub fn score_one_shot<G: AsRef<str>>(suggestions: &[Suggestion], golds: &[G], threshold: f64) -> Result<OneShotScores> {
    check_lengths(suggestions, golds)?;
    let (s, g): (Vec<&str>, Vec<&str>) = suggestions
        .iter()
        .zip(golds)
        .filter(|(s, _)| s.triggers(threshold))
        .map(|(s, g)| (s.text.as_str(), g.as_ref()))
        .unzip();
    if s.is_empty() {
        return Ok(OneShotScores::default());
    }
    let pr_p = partial_precision(&s, &g)?;
    let pr_r = partial_recall(&s, &g)?;
    Ok(OneShotScores {
        n_shown: s.len(),
        sm: syntactic_match(&s, &g)?,
        pr_p,
        pr_r,
        pr_f1: partial_f1(pr_p, pr_r),
        avg_pred_len: s.iter().map(|t| char_len(t) as f64).sum::<f64>() / s.len() as f64,
    })
}

/// Builds a full row from one-shot suggestions and per-sample traces.
pub fn assemble_row(
    model_id: &str,
    samples: &[PrefixSample],
    suggestions: &[Suggestion],
    traces: &[SimTrace],
    cfg: &EvalConfig,
) -> Result<MetricRow> {
    if traces.len() != samples.len() {
        return Err(Error::LengthMismatch {
            left: traces.len(),
            right: samples.len(),
        });
    }
    let golds: Vec<&str> = samples.iter().map(|s| s.completion.as_str()).collect();
    let o = score_one_shot(suggestions, &golds, cfg.trigger_threshold)?;
    let n = samples.len().max(1) as f64;
    Ok(MetricRow {
        model_id: model_id.to_owned(),
        n_samples: samples.len(),
        n_shown: o.n_shown,
        tr: traces.iter().map(SimTrace::tr).sum::<f64>() / n,
        sm: o.sm,
        pr_p: o.pr_p,
        pr_r: o.pr_r,
        pr_f1: o.pr_f1,
        avg_pred_len: o.avg_pred_len,
        tes: traces.iter().map(SimTrace::tes).sum::<f64>() / n,
        mode: Some(cfg.mode),
    })
}

/// Evaluates `completer` on `samples`.
pub fn evaluate(completer: &dyn Completer, samples: &[PrefixSample], cfg: &EvalConfig) -> Result<MetricRow> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let suggestions = one_shot(completer, samples, cfg.max_prefix_chars);
    let traces: Vec<SimTrace> = match cfg.mode {
        TypingMode::Keystroke => samples
            .par_iter()
            .map(|s| simulate_typing(completer, s, cfg.trigger_threshold, cfg.policy, cfg.max_prefix_chars))
            .collect(),
        TypingMode::SplitPoint => samples
            .iter()
            .zip(&suggestions)
            .map(|(s, sug)| split_point_trace(s, sug, cfg.trigger_threshold, cfg.policy))
            .collect(),
    };
    assemble_row(completer.id(), samples, &suggestions, &traces, cfg)
}
