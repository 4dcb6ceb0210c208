//! QueryBlazer-style completer: subword vocabulary, pruned n-gram model and
//! beam search over subword continuations.

mod lm;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lm::{NGramLM, Scored, BACKOFF, DEFAULT_ORDER, DEFAULT_PRUNE_MIN_COUNT};
pub use vocab::{
    pretokenize, unmark, SubwordVocab, TokenId, BOS, DEFAULT_VOCAB_SIZE, EOS, N_SPECIAL, SPACE,
    SPACE_MARKER, TARGET_COVERAGE, UNK,
};

use crate::binfile;
use crate::completer::{Completer, Query, Suggestion};
use crate::error::Result;
use crate::text::char_len;

pub const DEFAULT_BEAM: usize = 8;
pub const DEFAULT_MAX_TOKENS: usize = 16;

/// One partial hypothesis. `pending` holds the characters of the typed
/// partial word that generated tokens still have to reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
    pending: String,
}

/// Result of a beam search, before detokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Display text of the generated tokens including the typed fragment.
    pub text: String,
}

/// Splits a typed prefix into the token history of its complete words and
/// the trailing partial word (marker-encoded, possibly empty).
pub fn split_prefix(vocab: &SubwordVocab, prefix: &str) -> (Vec<TokenId>, String) {
    let mut words = pretokenize(prefix);
    let fragment = words.pop().unwrap_or_default();
    let mut history = vec![BOS];
    for w in &words {
        history.extend(vocab.encode_word(w));
    }
    (history, fragment)
}

fn consistent(token: &str, pending: &str) -> bool {
    token.starts_with(pending) || pending.starts_with(token)
}

fn consume(token: &str, pending: &str) -> String {
    if pending.len() > token.len() {
        pending[token.len()..].to_owned()
    } else {
        String::new()
    }
}

/// Beam search from `history`, forcing the first generated characters to
/// spell `fragment`. Hypotheses end at EOS or after `max_tokens` tokens;
/// the highest total log-probability wins (ties: shorter token sequence,
/// then smaller ids).
pub fn beam_search(
    lm: &NGramLM,
    vocab: &SubwordVocab,
    history: &[TokenId],
    fragment: &str,
    beam: usize,
    max_tokens: usize,
) -> Option<Decoded> {
    let beam = beam.max(1);
    let mut active = vec![BeamState {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        pending: fragment.to_owned(),
    }];
    let mut finished: Vec<BeamState> = Vec::new();
    let mut ctx: Vec<TokenId> = Vec::with_capacity(history.len() + max_tokens);

    let better = |a: &BeamState, b: &BeamState| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then(a.tokens.len().cmp(&b.tokens.len()))
            .then_with(|| a.tokens.cmp(&b.tokens))
    };

    for _ in 0..max_tokens {
        if active.is_empty() {
            break;
        }
        let mut next: Vec<BeamState> = Vec::new();
        for hyp in &active {
            ctx.clear();
            ctx.extend_from_slice(history);
            ctx.extend_from_slice(&hyp.tokens);
            let pending = hyp.pending.as_str();
            let candidates = lm.top_k(&ctx, beam, |w| match w {
                EOS => pending.is_empty(),
                BOS | UNK => false,
                _ => consistent(vocab.token(w), pending),
            });
            for c in candidates {
                if c.prob <= 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(c.token);
                let pending = if c.token == EOS {
                    String::new()
                } else {
                    consume(vocab.token(c.token), pending)
                };
                next.push(BeamState {
                    finished: c.token == EOS,
                    log_prob: hyp.log_prob + c.prob.ln(),
                    tokens,
                    pending,
                });
            }
        }
        next.sort_by(better);
        next.truncate(beam);
        active.clear();
        for h in next {
            if h.finished {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
        // scores only go down, so nothing active can overtake the best
        // finished hypothesis
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        active.retain(|h| h.log_prob > best_done);
    }
    // hypotheses cut off at max_tokens count as finished once the fragment
    // is spelled out
    finished.extend(active.into_iter().filter(|h| h.pending.is_empty()));
    finished.sort_by(better);
    let best = finished.into_iter().next()?;
    Some(Decoded {
        text: vocab.detokenize(&best.tokens),
        tokens: best.tokens,
        log_prob: best.log_prob,
    })
}

/// Completes `prefix` and returns only the continuation.
///
/// Confidence is `exp(mean log-probability per generated token)`.
pub fn qb_complete(
    lm: &NGramLM,
    vocab: &SubwordVocab,
    prefix: &str,
    beam: usize,
    max_tokens: usize,
) -> Suggestion {
    const ID: &str = "qb";
    let (history, fragment) = split_prefix(vocab, prefix);
    if !fragment.chars().all(|c| vocab.covers(c)) {
        return Suggestion::empty(ID);
    }
    let toks = vocab.tokenize(prefix);
    if !toks.is_empty() && toks.iter().all(|&t| t == UNK) {
        return Suggestion::empty(ID);
    }
    let Some(decoded) = beam_search(lm, vocab, &history, &fragment, beam, max_tokens) else {
        return Suggestion::empty(ID);
    };
    let shown = unmark(&fragment);
    let text = decoded.text.get(shown.len()..).unwrap_or("").to_owned();
    if text.is_empty() {
        return Suggestion::empty(ID);
    }
    let conf = (decoded.log_prob / decoded.tokens.len() as f64).exp();
    Suggestion::new(ID, text, conf)
}

const MAGIC: &[u8; 8] = b"MACQBLM\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QbTrainConfig {
    pub vocab_size: usize,
    pub order: usize,
    pub prune_min_count: u64,
}

impl Default for QbTrainConfig {
    fn default() -> Self {
        QbTrainConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            order: DEFAULT_ORDER,
            prune_min_count: DEFAULT_PRUNE_MIN_COUNT,
        }
    }
}

/// Vocabulary and language model, persisted together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QbModel {
    pub vocab: SubwordVocab,
    pub lm: NGramLM,
}

impl QbModel {
    pub fn train<S: AsRef<str>>(corpus: &[S], cfg: &QbTrainConfig) -> Result<Self> {
        let vocab = SubwordVocab::train(corpus, cfg.vocab_size)?;
        let lm = NGramLM::train(&vocab, corpus, cfg.order, cfg.prune_min_count)?;
        Ok(QbModel { vocab, lm })
    }

    /// Trains on `(utterance, count)` pairs, each repeated `count` times.
    pub fn train_counted(corpus: &[(String, u64)], cfg: &QbTrainConfig) -> Result<Self> {
        let texts: Vec<&str> = corpus
            .iter()
            .flat_map(|(t, c)| std::iter::repeat_n(t.as_str(), *c as usize))
            .collect();
        QbModel::train(&texts, cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binfile::save(path.as_ref(), MAGIC, VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        binfile::load(path.as_ref(), MAGIC, VERSION)
    }

    pub fn is_model_file(path: impl AsRef<Path>) -> bool {
        binfile::peek_magic(path.as_ref()).is_ok_and(|m| &m == MAGIC)
    }

    /// Character coverage of the vocabulary over `corpus`.
    pub fn coverage<S: AsRef<str>>(&self, corpus: &[S]) -> f64 {
        let (mut n, mut hit) = (0usize, 0.0);
        for t in corpus {
            let len = char_len(t.as_ref());
            n += len;
            hit += self.vocab.coverage(t.as_ref()) * len as f64;
        }
        if n == 0 {
            1.0
        } else {
            hit / n as f64
        }
    }
}

pub struct QueryBlazer {
    id: String,
    model: QbModel,
    pub beam: usize,
    pub max_tokens: usize,
}

impl QueryBlazer {
    pub fn new(model: QbModel) -> Self {
        QueryBlazer {
            id: "qb".into(),
            model,
            beam: DEFAULT_BEAM,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn model(&self) -> &QbModel {
        &self.model
    }
}

impl Completer for QueryBlazer {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        let mut s = qb_complete(
            &self.model.lm,
            &self.model.vocab,
            query.prefix,
            self.beam,
            self.max_tokens,
        );
        s.model_id.clone_from(&self.id);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(corpus: &[&str], vocab_size: usize, order: usize) -> QbModel {
        QbModel::train(
            corpus,
            &QbTrainConfig {
                vocab_size,
                order,
                prune_min_count: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn deterministic_continuation() {
        let m = model(&["the cat sat"; 5], 64, 8);
        let s = qb_complete(&m.lm, &m.vocab, "the ca", 8, 16);
        assert_eq!(s.text, "t sat");
        assert!(s.confidence > 0.0 && s.confidence <= 1.0);
    }

    #[test]
    fn fragment_consistency() {
        let m = model(&["the cat sat", "the dog ran", "the cow ate"], 64, 4);
        for (prefix, want) in [("the d", "og ran"), ("the co", "w ate"), ("the cat ", "sat")] {
            let s = qb_complete(&m.lm, &m.vocab, prefix, 8, 16);
            assert_eq!(s.text, want, "prefix {prefix:?}");
        }
    }

    #[test]
    fn empty_prefix_completes_from_sentence_start() {
        let m = model(&["hello there", "hello there", "bye now"], 64, 4);
        let s = qb_complete(&m.lm, &m.vocab, "", 8, 16);
        assert_eq!(s.text, "hello there");
    }

    #[test]
    fn uncovered_fragment_is_a_miss() {
        let m = model(&["abc"], 32, 3);
        let s = qb_complete(&m.lm, &m.vocab, "zz", 8, 16);
        assert!(s.text.is_empty());
        assert_eq!(s.confidence, 0.0);
    }

    #[test]
    fn model_file_is_deterministic() {
        let corpus = ["the cat sat", "the cat ran", "a dog sat down"];
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.lm"), dir.path().join("b.lm"));
        let m = model(&corpus, 48, 8);
        m.save(&a).unwrap();
        model(&corpus, 48, 8).save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = QbModel::load(&a).unwrap();
        assert!(QbModel::is_model_file(&a));
        assert_eq!(
            qb_complete(&back.lm, &back.vocab, "the c", 8, 16),
            qb_complete(&m.lm, &m.vocab, "the c", 8, 16)
        );
    }
}
