//! The interface every completion model implements.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dialog::{DialogContext, PrefixSample, Speaker};

/// A proposed continuation of the typed prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    /// Continuation only; never repeats the prefix.
    pub text: String,
    pub confidence: f64,
    pub model_id: String,
    pub latency_ms: f64,
    /// The backing model failed or timed out.
    #[serde(default)]
    pub degraded: bool,
}

impl Suggestion {
    pub fn new(model_id: &str, text: String, confidence: f64) -> Self {
        Suggestion {
            text,
            confidence,
            model_id: model_id.to_owned(),
            latency_ms: 0.0,
            degraded: false,
        }
    }

    pub fn empty(model_id: &str) -> Self {
        Suggestion::new(model_id, String::new(), 0.0)
    }

    pub fn degraded(model_id: &str) -> Self {
        Suggestion {
            degraded: true,
            ..Suggestion::empty(model_id)
        }
    }

    /// Whether this suggestion would be shown at the given threshold.
    pub fn triggers(&self, threshold: f64) -> bool {
        !self.text.is_empty() && self.confidence >= threshold
    }
}

/// Everything a completer may look at for one request.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub context: &'a DialogContext,
    pub speaker: Speaker,
    pub prefix: &'a str,
}

impl<'a> Query<'a> {
    pub fn new(context: &'a DialogContext, speaker: Speaker, prefix: &'a str) -> Self {
        Query {
            context,
            speaker,
            prefix,
        }
    }

    /// The sample's context with an arbitrary typed prefix.
    pub fn for_sample(sample: &'a PrefixSample, prefix: &'a str) -> Self {
        Query::new(&sample.context, sample.speaker, prefix)
    }
}

pub trait Completer: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, query: &Query<'_>) -> Suggestion;

    /// Calls [`Completer::complete`] and records wall-clock latency unless
    /// the completer already reported one.
    fn complete_timed(&self, query: &Query<'_>) -> Suggestion {
        let start = Instant::now();
        let mut s = self.complete(query);
        if s.latency_ms == 0.0 {
            s.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        s
    }
}

impl<C: Completer + ?Sized> Completer for Arc<C> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, query: &Query<'_>) -> Suggestion {
        (**self).complete(query)
    }
}

impl<C: Completer + ?Sized> Completer for Box<C> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, query: &Query<'_>) -> Suggestion {
        (**self).complete(query)
    }
}

/// Adapts a closure returning `(text, confidence)`.
pub struct FnCompleter<F> {
    id: String,
    f: F,
}

impl<F> FnCompleter<F>
where
    F: Fn(&Query<'_>) -> (String, f64) + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnCompleter { id: id.into(), f }
    }
}

impl<F> Completer for FnCompleter<F>
where
    F: Fn(&Query<'_>) -> (String, f64) + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        let (text, confidence) = (self.f)(query);
        Suggestion::new(&self.id, text, confidence)
    }
}
