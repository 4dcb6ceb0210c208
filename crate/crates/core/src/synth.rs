//! Seeded synthetic chat corpora for tests, benchmarks and demos.
//!
//! Words are built from syllables and drawn with Zipf-like frequencies, and
//! a pool of recurring phrases gives completers something to learn.

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};

use crate::dialog::{Dialog, Speaker, Utterance};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l"];
const PUNCT: &[&str] = &["", "", "", "!", "?", "."];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub vocab: usize,
    pub phrases: usize,
    /// Chance that an utterance is a stock phrase rather than fresh words.
    pub phrase_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub image_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab: 2_000,
            phrases: 300,
            phrase_rate: 0.5,
            min_words: 2,
            max_words: 10,
            image_rate: 0.3,
        }
    }
}

pub struct Synth {
    rng: ChaCha8Rng,
    cfg: SynthConfig,
    words: Vec<String>,
    /// Cumulative Zipf weights over `words`.
    cdf: Vec<f64>,
    phrases: Vec<String>,
    phrase_cdf: Vec<f64>,
}

fn zipf_cdf(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (0..n)
        .map(|r| {
            acc += 1.0 / (r as f64 + 1.0);
            acc
        })
        .collect();
    cdf.iter_mut().for_each(|c| *c /= acc);
    cdf
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

impl Synth {
    pub fn new(seed: u64, cfg: SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = Vec::with_capacity(cfg.vocab);
        let mut seen = std::collections::HashSet::new();
        while words.len() < cfg.vocab.max(1) {
            let n = rng.random_range(1..=3);
            let w: String = (0..n)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        VOWELS[rng.random_range(0..VOWELS.len())],
                        CODAS[rng.random_range(0..CODAS.len())]
                    )
                })
                .collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let cdf = zipf_cdf(words.len());
        let mut s = Synth {
            rng,
            phrases: Vec::new(),
            phrase_cdf: zipf_cdf(cfg.phrases.max(1)),
            cfg,
            words,
            cdf,
        };
        s.phrases = (0..s.cfg.phrases.max(1)).map(|_| s.fresh()).collect();
        s
    }

    fn word(&mut self) -> &str {
        let u = self.rng.random::<f64>();
        &self.words[pick(&self.cdf, u)]
    }

    fn fresh(&mut self) -> String {
        let n = self.rng.random_range(self.cfg.min_words..=self.cfg.max_words.max(self.cfg.min_words));
        let mut out = String::new();
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            let w = self.word().to_owned();
            if i == 0 {
                let mut c = w.chars();
                if let Some(f) = c.next() {
                    out.extend(f.to_uppercase());
                    out.push_str(c.as_str());
                }
            } else {
                out.push_str(&w);
            }
        }
        out.push_str(PUNCT[self.rng.random_range(0..PUNCT.len())]);
        out
    }

    pub fn utterance(&mut self) -> String {
        if self.rng.random_bool(self.cfg.phrase_rate.clamp(0.0, 1.0)) {
            let u = self.rng.random::<f64>();
            let base = self.phrases[pick(&self.phrase_cdf, u)].clone();
            // sometimes a known phrase continues with fresh words
            if self.rng.random_bool(0.3) {
                return format!("{} {}", base, self.fresh().to_lowercase());
            }
            return base;
        }
        self.fresh()
    }

    pub fn utterances(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.utterance()).collect()
    }

    /// A dialog of 2 to 6 turns with alternating speakers, a relevance score
    /// in 1..=5 and, sometimes, an image attached to one turn.
    pub fn dialog(&mut self, id: impl Into<String>) -> Dialog {
        let n = self.rng.random_range(2..=6);
        let first = if self.rng.random_bool(0.5) {
            Speaker::User
        } else {
            Speaker::Partner
        };
        let mut turns: Vec<Utterance> = (0..n)
            .map(|i| {
                let sp = if (i % 2 == 0) == (first == Speaker::User) {
                    Speaker::User
                } else {
                    Speaker::Partner
                };
                Utterance::new(sp, self.utterance())
            })
            .collect();
        let id = id.into();
        if self.rng.random_bool(self.cfg.image_rate.clamp(0.0, 1.0)) {
            let at = self.rng.random_range(0..n);
            turns[at].image_ref = Some(format!("img/{id}.jpg"));
        }
        let mut d = Dialog::new(id, turns);
        d.relevance_score = Some(self.rng.random_range(1..=5));
        d
    }

    pub fn dialogs(&mut self, n: usize) -> Vec<Dialog> {
        (0..n).map(|i| self.dialog(format!("syn-{i:06}"))).collect()
    }
}

/// `n` utterances from a default generator.
pub fn utterances(n: usize, seed: u64) -> Vec<String> {
    Synth::new(seed, SynthConfig::default()).utterances(n)
}

/// `n` dialogs from a default generator.
pub fn dialogs(n: usize, seed: u64) -> Vec<Dialog> {
    Synth::new(seed, SynthConfig::default()).dialogs(n)
}
