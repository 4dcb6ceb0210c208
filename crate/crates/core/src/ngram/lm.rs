//! Pruned n-gram model with stupid backoff, renormalized per context.
//!
//! For a context `h` of length `k` stored in the model, the raw score is
//!
//! ```text
//! S_k(w) = c(h w) / c(h)          if (h, w) is stored
//!        = 0.4 * S_{k-1}(w)       otherwise
//! S_0(w) = c(w) / N
//! ```
//!
//! and `P(w | h) = S_k(w) / Z(h)` where `Z(h) = sum_w S_k(w)` is computed at
//! training time from the stored followers alone. A context that is not
//! stored falls back to its longest stored suffix.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::{SubwordVocab, TokenId, BOS, EOS};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 8;
pub const DEFAULT_PRUNE_MIN_COUNT: u64 = 2;
pub const BACKOFF: f64 = 0.4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextEntry {
    /// Occurrences of the context before pruning.
    total: u64,
    /// Sorted by token id.
    followers: Vec<(TokenId, u64)>,
    /// Follower tokens by descending count, ties by id.
    ranked: Vec<TokenId>,
    norm: f64,
}

impl ContextEntry {
    fn count(&self, w: TokenId) -> Option<u64> {
        self.followers
            .binary_search_by_key(&w, |&(t, _)| t)
            .ok()
            .map(|i| self.followers[i].1)
    }

    fn ratio(&self, w: TokenId) -> Option<f64> {
        self.count(w).map(|c| c as f64 / self.total as f64)
    }

    fn contains(&self, w: TokenId) -> bool {
        self.followers.binary_search_by_key(&w, |&(t, _)| t).is_ok()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmData {
    order: usize,
    prune_min_count: u64,
    vocab_size: usize,
    unigram: Vec<u64>,
    /// `tables[k]` holds contexts of length `k`; `tables[0]` is unused.
    tables: Vec<Vec<(Vec<TokenId>, ContextEntry)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "LmData", into = "LmData")]
pub struct NGramLM {
    order: usize,
    prune_min_count: u64,
    unigram_count: Vec<u64>,
    unigram_prob: Vec<f64>,
    /// Token ids with non-zero unigram probability, most likely first.
    unigram_ranked: Vec<TokenId>,
    tables: Vec<HashMap<Vec<TokenId>, ContextEntry>>,
}

impl From<LmData> for NGramLM {
    fn from(d: LmData) -> Self {
        let mut lm = NGramLM::with_unigrams(d.order, d.prune_min_count, d.unigram);
        lm.tables = d.tables.into_iter().map(|t| t.into_iter().collect()).collect();
        debug_assert_eq!(lm.unigram_count.len(), d.vocab_size);
        lm
    }
}

impl From<NGramLM> for LmData {
    fn from(lm: NGramLM) -> Self {
        let tables = lm
            .tables
            .into_iter()
            .map(|t| {
                let mut v: Vec<_> = t.into_iter().collect();
                v.sort_by(|a, b| a.0.cmp(&b.0));
                v
            })
            .collect();
        LmData {
            order: lm.order,
            prune_min_count: lm.prune_min_count,
            vocab_size: lm.unigram_count.len(),
            unigram: lm.unigram_count,
            tables,
        }
    }
}

/// Scored candidate continuation token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub token: TokenId,
    pub prob: f64,
}

impl NGramLM {
    fn with_unigrams(order: usize, prune_min_count: u64, unigram_count: Vec<u64>) -> Self {
        let n: u64 = unigram_count.iter().sum();
        let unigram_prob: Vec<f64> = unigram_count
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        let mut unigram_ranked: Vec<TokenId> = (0..unigram_count.len() as TokenId)
            .filter(|&t| unigram_count[t as usize] > 0)
            .collect();
        unigram_ranked.sort_by(|&a, &b| {
            unigram_count[b as usize]
                .cmp(&unigram_count[a as usize])
                .then(a.cmp(&b))
        });
        NGramLM {
            order,
            prune_min_count,
            unigram_count,
            unigram_prob,
            unigram_ranked,
            tables: vec![HashMap::new(); order],
        }
    }

    /// Counts n-grams over `BOS text EOS` for every text and prunes
    /// n-grams of order three and up seen fewer than `prune_min_count` times.
    pub fn train<S: AsRef<str>>(
        vocab: &SubwordVocab,
        corpus: &[S],
        order: usize,
        prune_min_count: u64,
    ) -> Result<Self> {
        if order < 2 {
            return Err(Error::invalid(format!("n-gram order {order} < 2")));
        }
        let mut unigram = vec![0u64; vocab.len()];
        let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> =
            vec![HashMap::new(); order];
        for text in corpus {
            let mut seq = Vec::with_capacity(32);
            seq.push(BOS);
            seq.extend(vocab.tokenize(text.as_ref()));
            seq.push(EOS);
            for i in 1..seq.len() {
                unigram[seq[i] as usize] += 1;
                for k in 1..order.min(i + 1) {
                    *raw[k]
                        .entry(seq[i - k..i].to_vec())
                        .or_default()
                        .entry(seq[i])
                        .or_default() += 1;
                }
            }
        }

        let mut lm = NGramLM::with_unigrams(order, prune_min_count, unigram);
        for (k, table) in raw.into_iter().enumerate().skip(1) {
            // context length k means n-gram order k + 1
            let min = if k + 1 >= 3 { prune_min_count.max(1) } else { 1 };
            let mut entries: Vec<(Vec<TokenId>, HashMap<TokenId, u64>)> = table.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut built = HashMap::with_capacity(entries.len());
            for (ctx, followers) in entries {
                let total: u64 = followers.values().sum();
                let mut kept: Vec<(TokenId, u64)> =
                    followers.into_iter().filter(|&(_, c)| c >= min).collect();
                if kept.is_empty() {
                    continue;
                }
                kept.sort_unstable();
                let mut ranked: Vec<TokenId> = kept.iter().map(|&(t, _)| t).collect();
                ranked.sort_by(|&a, &b| {
                    let ca = kept[kept.binary_search_by_key(&a, |x| x.0).unwrap()].1;
                    let cb = kept[kept.binary_search_by_key(&b, |x| x.0).unwrap()].1;
                    cb.cmp(&ca).then(a.cmp(&b))
                });
                let mut entry = ContextEntry {
                    total,
                    followers: kept,
                    ranked,
                    norm: 0.0,
                };
                entry.norm = lm.norm_for(&ctx, &entry);
                built.insert(ctx, entry);
            }
            lm.tables[k] = built;
        }
        Ok(lm)
    }

    /// `Z(h) = sum_F r(w) + 0.4 * (Z(h') - sum_F S'(w))` with `h'` the
    /// context minus its oldest token. Needs all shorter tables in place.
    fn norm_for(&self, ctx: &[TokenId], entry: &ContextEntry) -> f64 {
        let shorter = &ctx[1..];
        let chain = self.chain(shorter);
        let lower_norm = chain.first().map_or(1.0, |e| e.norm);
        let mut seen_ratio = 0.0;
        let mut lower_mass = 0.0;
        for &(w, c) in &entry.followers {
            seen_ratio += c as f64 / entry.total as f64;
            lower_mass += self.raw_score(&chain, w);
        }
        seen_ratio + BACKOFF * (lower_norm - lower_mass).max(0.0)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn prune_min_count(&self) -> u64 {
        self.prune_min_count
    }

    pub fn vocab_size(&self) -> usize {
        self.unigram_count.len()
    }

    /// Stored n-grams of the given order, as (context ++ [token], count).
    pub fn ngrams(&self, n: usize) -> Vec<(Vec<TokenId>, u64)> {
        let mut out: Vec<_> = self.tables[n - 1]
            .iter()
            .flat_map(|(ctx, e)| {
                e.followers.iter().map(move |&(w, c)| {
                    let mut g = ctx.clone();
                    g.push(w);
                    (g, c)
                })
            })
            .collect();
        out.sort();
        out
    }

    /// Stored contexts from longest to shortest for `history` (the
    /// unigram level is implicit and not included).
    fn chain(&self, history: &[TokenId]) -> Vec<&ContextEntry> {
        let max = history.len().min(self.order - 1);
        (1..=max)
            .rev()
            .filter_map(|k| self.tables[k].get(&history[history.len() - k..]))
            .collect()
    }

    /// Unnormalized stupid-backoff score along a context chain.
    fn raw_score(&self, chain: &[&ContextEntry], w: TokenId) -> f64 {
        let mut factor = 1.0;
        for e in chain {
            if let Some(r) = e.ratio(w) {
                return factor * r;
            }
            factor *= BACKOFF;
        }
        factor * self.unigram_prob.get(w as usize).copied().unwrap_or(0.0)
    }

    /// Relative frequency `c(h w) / c(h)` for a stored context, without
    /// backoff.
    pub fn relative_frequency(&self, context: &[TokenId], w: TokenId) -> Option<f64> {
        self.tables.get(context.len())?.get(context)?.ratio(w)
    }

    /// Normalized `P(w | history)`.
    pub fn prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        let chain = self.chain(history);
        let norm = chain.first().map_or(1.0, |e| e.norm);
        self.raw_score(&chain, w) / norm
    }

    pub fn log_prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        self.prob(history, w).ln()
    }

    /// The `k` most likely next tokens accepted by `allow`, most likely
    /// first, ties by token id.
    ///
    /// Each backoff level is scanned in count order, skipping tokens already
    /// scored at a longer context, so only the head of every list is read.
    pub fn top_k(&self, history: &[TokenId], k: usize, mut allow: impl FnMut(TokenId) -> bool) -> Vec<Scored> {
        let chain = self.chain(history);
        let norm = chain.first().map_or(1.0, |e| e.norm);
        let mut out: Vec<Scored> = Vec::new();
        let mut factor = 1.0;
        for (level, e) in chain.iter().enumerate() {
            let higher = &chain[..level];
            let mut taken = 0;
            for &w in &e.ranked {
                if taken >= k {
                    break;
                }
                if higher.iter().any(|h| h.contains(w)) || !allow(w) {
                    continue;
                }
                let r = e.ratio(w).unwrap();
                out.push(Scored {
                    token: w,
                    prob: factor * r / norm,
                });
                taken += 1;
            }
            factor *= BACKOFF;
        }
        let mut taken = 0;
        for &w in &self.unigram_ranked {
            if taken >= k {
                break;
            }
            if chain.iter().any(|h| h.contains(w)) || !allow(w) {
                continue;
            }
            out.push(Scored {
                token: w,
                prob: factor * self.unigram_prob[w as usize] / norm,
            });
            taken += 1;
        }
        out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
        out.truncate(k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (SubwordVocab, NGramLM) {
        let corpus = ["a b", "a b"];
        let vocab = SubwordVocab::train(&corpus, 16).unwrap();
        let lm = NGramLM::train(&vocab, &corpus, 3, 2).unwrap();
        (vocab, lm)
    }

    #[test]
    fn deterministic_successor_has_ratio_one() {
        let (v, lm) = toy();
        let a = v.id("a").unwrap();
        let b = v.id("▁b").expect("space merged into the word");
        assert_eq!(lm.relative_frequency(&[a], b), Some(1.0));
        // the renormalized distribution still puts b first
        let top = lm.top_k(&[BOS, a], 1, |_| true);
        assert_eq!(top[0].token, b);
    }

    #[test]
    fn unseen_context_uses_lower_order() {
        let (v, lm) = toy();
        let b = v.id("▁b").unwrap();
        let unseen = [b, b];
        for w in 0..v.len() as TokenId {
            assert_eq!(lm.prob(&unseen, w), lm.prob(&unseen[1..], w));
        }
        // a context with no stored n-grams at all reduces to unigrams
        let lonely = [v.id("a").unwrap(), EOS];
        assert_eq!(lm.prob(&lonely, b), lm.prob(&[], b));
    }

    #[test]
    fn pruning_removes_rare_trigrams() {
        let corpus = ["x y z", "x y z", "q r s"];
        let v = SubwordVocab::train(&corpus, 20).unwrap();
        let lm = NGramLM::train(&v, &corpus, 3, 2).unwrap();
        let tri = lm.ngrams(3);
        assert!(tri.iter().all(|(_, c)| *c >= 2));
        let q = v.id("q").unwrap();
        assert!(!tri.iter().any(|(g, _)| g.contains(&q)));
        // bigrams are never pruned
        assert!(lm.ngrams(2).iter().any(|(g, _)| g.contains(&q)));
    }

    #[test]
    fn distributions_normalize() {
        let corpus = ["the cat sat", "the cat ran", "a cat sat down", "the dog sat"];
        let v = SubwordVocab::train(&corpus, 40).unwrap();
        let lm = NGramLM::train(&v, &corpus, 4, 1).unwrap();
        let hists: Vec<Vec<TokenId>> = vec![
            vec![],
            vec![BOS],
            v.tokenize("the cat"),
            [vec![BOS], v.tokenize("a cat sat")].concat(),
            vec![EOS, EOS],
        ];
        for h in hists {
            let z: f64 = (0..v.len() as TokenId).map(|w| lm.prob(&h, w)).sum();
            assert!((z - 1.0).abs() < 1e-9, "{h:?} sums to {z}");
        }
    }

    #[test]
    fn top_k_agrees_with_full_scan() {
        let corpus = ["the cat sat", "the cat ran", "a cat sat down", "the dog sat"];
        let v = SubwordVocab::train(&corpus, 40).unwrap();
        let lm = NGramLM::train(&v, &corpus, 4, 1).unwrap();
        let h = [vec![BOS], v.tokenize("the cat")].concat();
        let mut all: Vec<(TokenId, f64)> = (0..v.len() as TokenId)
            .map(|w| (w, lm.prob(&h, w)))
            .filter(|&(_, p)| p > 0.0)
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top = lm.top_k(&h, 5, |_| true);
        for (s, (w, p)) in top.iter().zip(&all) {
            assert_eq!(s.token, *w);
            assert!((s.prob - p).abs() < 1e-12);
        }
    }
}
