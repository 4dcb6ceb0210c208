//! Adapter from the completer interface to external vision-language model
//! servers, plus a rule-based stub for offline runs.
//!
//! Wire format: `POST {base_url}/generate` with
//! `{"prompt": str, "image_ref": str?, "max_new_tokens": int}` answered by
//! `{"text": str}`. `MAC_VLM_URL` overrides the configured base URL.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::completer::{Completer, Query, Suggestion};
use crate::dialog::{PrefixSample, DEFAULT_IMAGE_TOKEN};
use crate::error::{Error, Result};

pub const URL_ENV: &str = "MAC_VLM_URL";

fn default_timeout_ms() -> u64 {
    5_000
}
fn default_max_new_tokens() -> u32 {
    16
}
fn default_image_token() -> String {
    DEFAULT_IMAGE_TOKEN.to_owned()
}
fn default_in_flight() -> usize {
    4
}

/// How the dialog is flattened into the prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// Every turn as a `Speaker: text` line, image token in place.
    #[default]
    Interleave,
    /// Only the typed turn, with the image token when there is an image.
    PrefixOnly,
}

impl PromptTemplate {
    pub fn render(self, query: &Query<'_>, image_token: &str) -> String {
        match self {
            PromptTemplate::Interleave => query.context.render(query.speaker, query.prefix, image_token),
            PromptTemplate::PrefixOnly => match &query.context.image_ref {
                Some(_) => format!("{image_token} {}", query.prefix),
                None => query.prefix.to_owned(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Marker for the image position in the interleaved prompt.
    #[serde(default = "default_image_token")]
    pub image_token: String,
    #[serde(default)]
    pub prompt_template: PromptTemplate,
    #[serde(default)]
    pub stop_at_newline: bool,
    /// Requests allowed in flight at once; extra calls come back degraded.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            max_new_tokens: default_max_new_tokens(),
            image_token: default_image_token(),
            prompt_template: PromptTemplate::default(),
            stop_at_newline: false,
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::invalid("timeout_ms must be positive"));
        }
        if self.image_token.is_empty() {
            return Err(Error::invalid("image_token must be non-empty"));
        }
        Ok(())
    }

    fn url(&self) -> String {
        let base = std::env::var(URL_ENV).unwrap_or_else(|_| self.base_url.clone());
        format!("{}/generate", base.trim_end_matches('/'))
    }
}

/// Canned answer for prompts whose typed text contains `pattern`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubRule {
    pub pattern: String,
    pub completion: String,
    #[serde(default)]
    pub latency_ms: f64,
}

impl StubRule {
    pub fn new(pattern: impl Into<String>, completion: impl Into<String>, latency_ms: f64) -> Self {
        StubRule {
            pattern: pattern.into(),
            completion: completion.into(),
            latency_ms,
        }
    }

    /// Matches when the prefix contains `pattern` and whatever was typed
    /// after its last occurrence is a prefix of `completion`; returns the
    /// rest of the completion.
    fn answer<'a>(&'a self, prefix: &str) -> Option<&'a str> {
        let pos = prefix.rfind(self.pattern.as_str())?;
        let typed = &prefix[pos + self.pattern.len()..];
        self.completion.strip_prefix(typed)
    }
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
    max_new_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    text: String,
}

enum Backend {
    Http(ureq::Agent),
    Stub {
        rules: Vec<StubRule>,
        /// Sleep for the rule latency instead of only reporting it.
        sleep: bool,
    },
}

pub struct VlmCompleter {
    id: String,
    cfg: EndpointConfig,
    backend: Backend,
    in_flight: AtomicUsize,
}

impl VlmCompleter {
    pub fn http(id: impl Into<String>, cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .new_agent();
        Ok(VlmCompleter {
            id: id.into(),
            cfg,
            backend: Backend::Http(agent),
            in_flight: AtomicUsize::new(0),
        })
    }

    /// Deterministic offline stand-in. Reported latency is the matching
    /// rule's `latency_ms`.
    pub fn stub(id: impl Into<String>, rules: Vec<StubRule>) -> Self {
        let id = id.into();
        VlmCompleter {
            cfg: EndpointConfig::new("stub://", id.clone()),
            id,
            backend: Backend::Stub {
                rules,
                sleep: false,
            },
            in_flight: AtomicUsize::new(0),
        }
    }

    /// Makes the stub actually wait out each rule's latency.
    pub fn sleeping(mut self) -> Self {
        if let Backend::Stub { sleep, .. } = &mut self.backend {
            *sleep = true;
        }
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn vlm_complete(&self, sample: &PrefixSample) -> Suggestion {
        self.complete(&Query::for_sample(sample, &sample.prefix))
    }

    fn call(&self, query: &Query<'_>) -> std::result::Result<(String, Option<f64>), String> {
        match &self.backend {
            Backend::Stub { rules, sleep } => {
                let Some((text, latency)) = rules
                    .iter()
                    .find_map(|r| r.answer(query.prefix).map(|t| (t, r.latency_ms)))
                else {
                    return Ok((String::new(), Some(0.0)));
                };
                if *sleep {
                    std::thread::sleep(Duration::from_secs_f64(latency / 1e3));
                }
                Ok((text.to_owned(), Some(latency)))
            }
            Backend::Http(agent) => {
                let prompt = self.cfg.prompt_template.render(query, &self.cfg.image_token);
                let body = GenerateRequest {
                    prompt: &prompt,
                    image_ref: query.context.image_ref.as_deref(),
                    max_new_tokens: self.cfg.max_new_tokens,
                };
                let resp: GenerateResponse = agent
                    .post(&self.cfg.url())
                    .send_json(&body)
                    .map_err(|e| e.to_string())?
                    .body_mut()
                    .read_json()
                    .map_err(|e| e.to_string())?;
                let text = resp.text.strip_prefix(prompt.as_str()).unwrap_or(&resp.text);
                Ok((text.to_owned(), None))
            }
        }
    }

    fn finish(&self, mut text: String, prefix: &str) -> String {
        if !prefix.is_empty() {
            while let Some(rest) = text.strip_prefix(prefix) {
                text = rest.to_owned();
            }
        }
        if self.cfg.stop_at_newline {
            if let Some(i) = text.find('\n') {
                text.truncate(i);
            }
        }
        text
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Completer for VlmCompleter {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        if self.in_flight.fetch_add(1, Ordering::SeqCst) >= self.cfg.max_in_flight {
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            log::warn!("{}: in-flight cap {} reached", self.id, self.cfg.max_in_flight);
            return Suggestion::degraded(&self.id);
        }
        let _guard = InFlight(&self.in_flight);
        let start = Instant::now();
        match self.call(query) {
            Ok((raw, reported)) => {
                let text = self.finish(raw, query.prefix);
                let confidence = if text.is_empty() { 0.0 } else { 1.0 };
                let mut s = Suggestion::new(&self.id, text, confidence);
                s.latency_ms = reported.unwrap_or_else(|| start.elapsed().as_secs_f64() * 1e3);
                s
            }
            Err(e) => {
                log::warn!("{}: {e}", self.id);
                let mut s = Suggestion::degraded(&self.id);
                s.latency_ms = start.elapsed().as_secs_f64() * 1e3;
                s
            }
        }
    }
}

/// Mean latency in seconds over the probes that did not fail.
pub fn measure_latency(completer: &dyn Completer, probes: &[PrefixSample]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("latency probes"));
    }
    let ok: Vec<f64> = probes
        .iter()
        .map(|p| completer.complete_timed(&Query::for_sample(p, &p.prefix)))
        .filter(|s| !s.degraded)
        .map(|s| s.latency_ms)
        .collect();
    if ok.is_empty() {
        return Err(Error::Endpoint(format!("{}: every probe failed", completer.id())));
    }
    Ok(ok.iter().sum::<f64>() / ok.len() as f64 / 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialog::DialogContext;

    fn sample(prefix: &str) -> PrefixSample {
        PrefixSample {
            dialog_id: "d".into(),
            context: DialogContext::default(),
            prefix: prefix.into(),
            completion: String::new(),
            speaker: Default::default(),
        }
    }

    #[test]
    fn stub_answers_figure_one() {
        let vlm = VlmCompleter::stub(
            "minicpm-v",
            vec![StubRule::new(
                "That's why I love bringing my ",
                "dog out for walks here!",
                2080.0,
            )],
        );
        let s = vlm.vlm_complete(&sample("That's why I love bringing my "));
        assert_eq!(s.text, "dog out for walks here!");
        assert_eq!(s.confidence, 1.0);
        assert_eq!(s.latency_ms, 2080.0);
        // typing into the ghost keeps it consistent
        let s = vlm.vlm_complete(&sample("That's why I love bringing my do"));
        assert_eq!(s.text, "g out for walks here!");
        // diverging from it drops it
        let s = vlm.vlm_complete(&sample("That's why I love bringing my ca"));
        assert!(s.text.is_empty());
        assert_eq!(s.confidence, 0.0);
    }

    #[test]
    fn echoed_prefix_is_stripped() {
        let vlm = VlmCompleter::stub("echo", vec![StubRule::new("", "hello world", 1.0)]);
        assert_eq!(vlm.finish("hello world".into(), "hello "), "world");
        assert_eq!(vlm.finish("ab ab c".into(), "ab "), "c");
        assert_eq!(vlm.finish("xyz".into(), ""), "xyz");
    }

    #[test]
    fn newline_stop() {
        let mut vlm = VlmCompleter::stub("s", vec![]);
        vlm.cfg.stop_at_newline = true;
        assert_eq!(vlm.finish("one\ntwo".into(), ""), "one");
    }

    #[test]
    fn latency_of_stubbed_models() {
        let probes = [sample("a"), sample("b")];
        for (ms, want) in [(733.0, 0.733), (2080.0, 2.080)] {
            let vlm = VlmCompleter::stub("m", vec![StubRule::new("", "x", ms)]);
            let got = measure_latency(&vlm, &probes).unwrap();
            assert!((got - want).abs() < 1e-12, "{got}");
        }
    }

    #[test]
    fn latency_is_a_mean() {
        let vlm = VlmCompleter::stub(
            "m",
            vec![StubRule::new("a", "x", 1.0), StubRule::new("b", "y", 3.0)],
        );
        let got = measure_latency(&vlm, &[sample("a"), sample("b")]).unwrap();
        assert!((got - 0.002).abs() < 1e-15);
        assert!(measure_latency(&vlm, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EndpointConfig::new("http://localhost:1", "m");
        assert!(c.validate().is_ok());
        c.timeout_ms = 0;
        assert!(VlmCompleter::http("m", c).is_err());
    }

    #[test]
    fn prompt_templates() {
        let ctx = DialogContext {
            history: vec![crate::dialog::Utterance::new(crate::dialog::Speaker::Partner, "hi")],
            image_ref: Some("x.jpg".into()),
        };
        let q = Query::new(&ctx, crate::dialog::Speaker::User, "he");
        assert_eq!(PromptTemplate::PrefixOnly.render(&q, "<IMAGE>"), "<IMAGE> he");
        assert_eq!(
            PromptTemplate::Interleave.render(&q, "<IMAGE>"),
            ctx.render(q.speaker, "he", "<IMAGE>")
        );
        let c: EndpointConfig =
            serde_json::from_str(r#"{"base_url":"u","model_name":"m","prompt_template":"prefix_only"}"#).unwrap();
        assert_eq!(c.prompt_template, PromptTemplate::PrefixOnly);
    }
}
