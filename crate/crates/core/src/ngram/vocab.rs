//! Byte-pair style subword vocabulary over characters.
//!
//! Spaces become a marker character glued to the front of the following
//! word, so `"a b"` splits into the words `a` and `▁b`. Merges never cross
//! word boundaries.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const SPACE: TokenId = 3;
pub const N_SPECIAL: usize = 4;

pub const SPACE_MARKER: char = '\u{2581}';

pub const DEFAULT_VOCAB_SIZE: usize = 4096;
/// Share of training characters the vocabulary must represent.
pub const TARGET_COVERAGE: f64 = 0.9995;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabData {
    tokens: Vec<String>,
    merges: Vec<(TokenId, TokenId)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct SubwordVocab {
    data: VocabData,
    index: HashMap<String, TokenId>,
    /// (left, right) -> (merge rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
}

impl From<VocabData> for SubwordVocab {
    fn from(data: VocabData) -> Self {
        let index = data
            .tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (t.clone(), i as TokenId))
            .chain(std::iter::once((SPACE_MARKER.to_string(), SPACE)))
            .collect::<HashMap<_, _>>();
        let ranks = data
            .merges
            .iter()
            .enumerate()
            .map(|(rank, &(l, r))| {
                let merged = format!("{}{}", data.tokens[l as usize], data.tokens[r as usize]);
                ((l, r), (rank as u32, index[&merged]))
            })
            .collect();
        SubwordVocab { data, index, ranks }
    }
}

impl From<SubwordVocab> for VocabData {
    fn from(v: SubwordVocab) -> Self {
        v.data
    }
}

/// Splits text into marker-prefixed words.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for ch in text.chars() {
        if ch == ' ' || ch == SPACE_MARKER {
            words.push(SPACE_MARKER.to_string());
        } else {
            match words.last_mut() {
                Some(w) => w.push(ch),
                None => words.push(ch.to_string()),
            }
        }
    }
    words
}

/// Display form of a marker-encoded string.
pub fn unmark(s: &str) -> String {
    s.replace(SPACE_MARKER, " ")
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    pair: (TokenId, TokenId),
    text: (String, String),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: highest count first, then the lexicographically
        // smallest (left, right)
        self.count
            .cmp(&other.count)
            .then_with(|| other.text.cmp(&self.text))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn pairs(seq: &[TokenId]) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
    seq.windows(2).map(|w| (w[0], w[1]))
}

fn apply_merge(seq: &[TokenId], pair: (TokenId, TokenId), merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

impl SubwordVocab {
    /// Greedy pair merging until `target_size` entries (or no pairs remain).
    /// Ties on pair count go to the lexicographically smallest pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut word_counts: BTreeMap<String, i64> = BTreeMap::new();
        for text in corpus {
            for w in pretokenize(text.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let alphabet: std::collections::BTreeSet<char> = word_counts
            .keys()
            .flat_map(|w| w.chars())
            .filter(|&c| c != SPACE_MARKER)
            .collect();
        let base = N_SPECIAL + alphabet.len();
        if target_size < base {
            return Err(Error::invalid(format!(
                "vocabulary size {target_size} below {} characters + {N_SPECIAL} specials",
                alphabet.len()
            )));
        }

        let mut tokens: Vec<String> = vec![
            "<s>".into(),
            "</s>".into(),
            "<unk>".into(),
            SPACE_MARKER.to_string(),
        ];
        tokens.extend(alphabet.iter().map(|c| c.to_string()));
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL - 1)
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();

        let mut words: Vec<Vec<TokenId>> = word_counts
            .keys()
            .map(|w| w.chars().map(|c| index[&c.to_string()]).collect())
            .collect();
        let freq: Vec<i64> = word_counts.values().copied().collect();

        let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
        let mut where_: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in pairs(w) {
                *counts.entry(p).or_default() += freq[wi];
                where_.entry(p).or_default().insert(wi);
            }
        }
        let candidate = |tokens: &[String], pair: (TokenId, TokenId), count: i64| Candidate {
            count,
            pair,
            text: (tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone()),
        };
        let mut heap: BinaryHeap<Candidate> = counts
            .iter()
            .map(|(&p, &c)| candidate(&tokens, p, c))
            .collect();

        let mut merges = Vec::new();
        while tokens.len() < target_size {
            let Some(top) = heap.pop() else { break };
            let current = counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count || current <= 0 {
                continue;
            }
            let pair = top.pair;
            let merged_str = format!("{}{}", top.text.0, top.text.1);
            let merged = *index.entry(merged_str.clone()).or_insert_with(|| {
                tokens.push(merged_str);
                (tokens.len() - 1) as TokenId
            });
            merges.push(pair);

            let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            let mut touched: HashSet<(TokenId, TokenId)> = HashSet::new();
            for wi in affected {
                let new_seq = apply_merge(&words[wi], pair, merged);
                for p in pairs(&words[wi]) {
                    *counts.get_mut(&p).unwrap() -= freq[wi];
                    touched.insert(p);
                }
                for p in pairs(&new_seq) {
                    *counts.entry(p).or_default() += freq[wi];
                    where_.entry(p).or_default().insert(wi);
                    touched.insert(p);
                }
                words[wi] = new_seq;
            }
            counts.remove(&pair);
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for p in touched {
                match counts.get(&p) {
                    Some(&c) if c > 0 => heap.push(candidate(&tokens, p, c)),
                    _ => {
                        counts.remove(&p);
                    }
                }
            }
        }

        Ok(VocabData { tokens, merges }.into())
    }

    pub fn len(&self) -> usize {
        self.data.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.tokens.is_empty()
    }

    pub fn n_merges(&self) -> usize {
        self.data.merges.len()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.data
            .merges
            .iter()
            .map(|&(l, r)| (self.token(l), self.token(r)))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.data.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn covers(&self, ch: char) -> bool {
        ch == ' ' || ch == SPACE_MARKER || self.index.contains_key(ch.encode_utf8(&mut [0; 4]) as &str)
    }

    /// Fraction of characters of `text` the vocabulary represents.
    pub fn coverage(&self, text: &str) -> f64 {
        let (mut n, mut hit) = (0usize, 0usize);
        for ch in text.chars() {
            n += 1;
            hit += usize::from(self.covers(ch));
        }
        if n == 0 {
            1.0
        } else {
            hit as f64 / n as f64
        }
    }

    /// Encodes one marker-prefixed word.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        let mut seq: Vec<TokenId> = word
            .chars()
            .map(|c| self.id(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK))
            .collect();
        loop {
            let best = pairs(&seq)
                .filter_map(|p| self.ranks.get(&p).map(|&(rank, id)| (rank, p, id)))
                .min();
            match best {
                Some((_, p, id)) => seq = apply_merge(&seq, p, id),
                None => return seq,
            }
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        pretokenize(text)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Inverse of [`SubwordVocab::tokenize`] for covered text. BOS and EOS
    /// render as nothing, UNK as U+FFFD.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                BOS | EOS => {}
                UNK => s.push('\u{fffd}'),
                _ => s.push_str(self.token(id)),
            }
        }
        unmark(&s)
    }

    /// Ids of regular tokens, i.e. everything except BOS, EOS and UNK.
    pub fn regular_ids(&self) -> impl Iterator<Item = TokenId> {
        (N_SPECIAL as TokenId - 1)..self.data.tokens.len() as TokenId
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretokenize_spaces() {
        assert_eq!(pretokenize("a b"), vec!["a", "▁b"]);
        assert_eq!(pretokenize("a  b"), vec!["a", "▁", "▁b"]);
        assert_eq!(pretokenize(" a"), vec!["▁a"]);
        assert_eq!(pretokenize("a "), vec!["a", "▁"]);
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn aa_merges_before_b_pairs() {
        let corpus = vec!["aaab"; 100];
        let v = SubwordVocab::train(&corpus, 64).unwrap();
        let merges: Vec<_> = v.merges().collect();
        assert_eq!(merges[0], ("a", "a"));
        // pair counts after the first merge: (aa,a)=100 and (a,b)=100; the
        // tie goes to ("a","b")
        assert_eq!(merges[1], ("a", "b"));
    }

    #[test]
    fn toy_vocab_tokenization() {
        // 4 specials + {a, b} + one merge
        let v = SubwordVocab::train(&vec!["aaab"; 100], 7).unwrap();
        assert_eq!(v.len(), 7);
        let toks: Vec<&str> = v.tokenize("aaab").iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, ["aa", "a", "b"]);
    }

    #[test]
    fn no_room_for_merges() {
        let v = SubwordVocab::train(&["abc ab"], N_SPECIAL + 3).unwrap();
        assert_eq!(v.n_merges(), 0);
        assert!(SubwordVocab::train(&["abc ab"], N_SPECIAL + 2).is_err());
        assert!(SubwordVocab::train::<&str>(&[], 100).is_err());
    }

    #[test]
    fn tokenize_edge_cases() {
        let v = SubwordVocab::train(&["hello world", "help"], 40).unwrap();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&v.tokenize("hello  world ")), "hello  world ");
        assert_eq!(v.tokenize("xyz"), vec![UNK, UNK, UNK]);
        assert!((v.coverage("hello") - 1.0).abs() < 1e-12);
        assert!((v.coverage("hex") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_keeps_lookups() {
        let v = SubwordVocab::train(&["hello world", "help"], 40).unwrap();
        let bytes = bincode::serialize(&v).unwrap();
        let back: SubwordVocab = bincode::deserialize(&bytes).unwrap();
        assert_eq!(back.tokenize("hello help"), v.tokenize("hello help"));
    }
}
