//! Frequency tries and the two retrieval completers built on them: MPC
//! (most popular completion over whole utterances) and MPC++ (the same over
//! every suffix, with backoff for unseen prefixes).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfile;
use crate::completer::{Completer, Query, Suggestion};
use crate::error::Result;
use crate::text::take_chars;

pub const DEFAULT_MAX_LEN: usize = 40;
pub const DEFAULT_MIN_BACKOFF: usize = 3;

pub type NodeId = u32;
const ROOT: NodeId = 0;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Node {
    ch: char,
    parent: NodeId,
    pass: u64,
    end: u64,
    /// Sorted by character.
    children: Vec<(char, NodeId)>,
    /// Most frequent terminal strictly below this node, as (count, node).
    /// Ties go to the lexicographically smallest continuation.
    best_below: Option<(u64, NodeId)>,
}

impl Node {
    fn new(ch: char, parent: NodeId) -> Self {
        Node {
            ch,
            parent,
            pass: 0,
            end: 0,
            children: Vec::new(),
            best_below: None,
        }
    }
}

/// Character trie with pass-through and terminal counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreqTrie {
    nodes: Vec<Node>,
}

impl Default for FreqTrie {
    fn default() -> Self {
        FreqTrie {
            nodes: vec![Node::new('\0', ROOT)],
        }
    }
}

impl FreqTrie {
    pub fn build<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: AsRef<str>,
    {
        let mut t = FreqTrie::default();
        for (s, count) in items {
            t.insert(s.as_ref(), count);
        }
        t.finalize();
        t
    }

    /// Adds `count` occurrences of `s` and returns the terminal node.
    /// Call [`FreqTrie::finalize`] after the last insert.
    fn insert(&mut self, s: &str, count: u64) -> NodeId {
        let mut node = ROOT;
        self.nodes[ROOT as usize].pass += count;
        for ch in s.chars() {
            node = match self.nodes[node as usize]
                .children
                .binary_search_by_key(&ch, |&(c, _)| c)
            {
                Ok(i) => self.nodes[node as usize].children[i].1,
                Err(i) => {
                    let id = self.nodes.len() as NodeId;
                    self.nodes.push(Node::new(ch, node));
                    self.nodes[node as usize].children.insert(i, (ch, id));
                    id
                }
            };
            self.nodes[node as usize].pass += count;
        }
        self.nodes[node as usize].end += count;
        node
    }

    /// Fills the per-node best-terminal cache. Children always have larger
    /// ids than their parent, so one reverse sweep suffices.
    fn finalize(&mut self) {
        for id in (0..self.nodes.len()).rev() {
            let mut best: Option<(u64, NodeId)> = None;
            for &(_, child) in &self.nodes[id].children {
                if let Some(cand) = self.best_including(child) {
                    if best.is_none_or(|(c, _)| cand.0 > c) {
                        best = Some(cand);
                    }
                }
            }
            self.nodes[id].best_below = best;
        }
    }

    /// Best terminal at or below `node`. The node's own terminal wins ties:
    /// the empty continuation sorts first.
    fn best_including(&self, node: NodeId) -> Option<(u64, NodeId)> {
        let n = &self.nodes[node as usize];
        match n.best_below {
            Some((c, _)) if c > n.end => n.best_below,
            _ if n.end > 0 => Some((n.end, node)),
            other => other,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Number of indexed strings, weighted by count.
    pub fn total(&self) -> u64 {
        self.nodes[ROOT as usize].pass
    }

    pub fn root(&self) -> NodeId {
        ROOT
    }

    pub fn find(&self, prefix: &str) -> Option<NodeId> {
        let mut node = ROOT;
        for ch in prefix.chars() {
            let n = &self.nodes[node as usize];
            let i = n.children.binary_search_by_key(&ch, |&(c, _)| c).ok()?;
            node = n.children[i].1;
        }
        Some(node)
    }

    pub fn pass_count(&self, node: NodeId) -> u64 {
        self.nodes[node as usize].pass
    }

    pub fn end_count(&self, node: NodeId) -> u64 {
        self.nodes[node as usize].end
    }

    pub fn child(&self, node: NodeId, ch: char) -> Option<NodeId> {
        let n = &self.nodes[node as usize];
        n.children
            .binary_search_by_key(&ch, |&(c, _)| c)
            .ok()
            .map(|i| n.children[i].1)
    }

    /// Characters on the path from `from` (exclusive) down to `to`.
    fn path(&self, from: NodeId, to: NodeId) -> String {
        let mut chars = Vec::new();
        let mut n = to;
        while n != from {
            let node = &self.nodes[n as usize];
            chars.push(node.ch);
            n = node.parent;
        }
        chars.iter().rev().collect()
    }

    /// Checks `pass == end + sum(children.pass)` at every node.
    pub fn counts_conserved(&self) -> bool {
        self.nodes.iter().all(|n| {
            let below: u64 = n.children.iter().map(|&(_, c)| self.nodes[c as usize].pass).sum();
            n.pass == n.end + below
        })
    }

    /// Most popular completion at `node`, where `node`'s own string counts
    /// as a candidate. Returns (continuation, winner count).
    fn most_popular(&self, node: NodeId) -> Option<(String, u64)> {
        let (count, end) = self.best_including(node)?;
        Some((self.path(node, end), count))
    }

    /// Most popular strictly longer completion below `node`.
    fn most_popular_extension(&self, node: NodeId) -> Option<(String, u64)> {
        let (count, end) = self.nodes[node as usize].best_below?;
        Some((self.path(node, end), count))
    }
}

/// Most popular completion of `prefix` over whole indexed utterances.
///
/// Returns an empty suggestion when the prefix is not a path in the trie, or
/// when the winning utterance is the prefix itself.
pub fn mpc_complete(trie: &FreqTrie, prefix: &str, max_len: usize) -> Suggestion {
    const ID: &str = "mpc";
    let Some(node) = trie.find(prefix) else {
        return Suggestion::empty(ID);
    };
    match trie.most_popular(node) {
        Some((cont, count)) if !cont.is_empty() => {
            let conf = count as f64 / trie.pass_count(node) as f64;
            Suggestion::new(ID, take_chars(&cont, max_len).to_owned(), conf)
        }
        _ => Suggestion::empty(ID),
    }
}

/// All suffixes of every indexed utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuffixIndex {
    trie: FreqTrie,
    /// Terminal node of each suffix -> ids of utterances it came from.
    origins: BTreeMap<NodeId, Vec<u32>>,
    n_suffixes: u64,
}

impl SuffixIndex {
    /// Utterance ids are positions in `items`.
    pub fn build<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: AsRef<str>,
    {
        let mut trie = FreqTrie::default();
        let mut origins: BTreeMap<NodeId, Vec<u32>> = BTreeMap::new();
        let mut n_suffixes = 0;
        for (id, (s, count)) in items.into_iter().enumerate() {
            let s = s.as_ref();
            for (offset, _) in s.char_indices() {
                let end = trie.insert(&s[offset..], count);
                origins.entry(end).or_default().push(id as u32);
                n_suffixes += 1;
            }
        }
        trie.finalize();
        SuffixIndex {
            trie,
            origins,
            n_suffixes,
        }
    }

    pub fn trie(&self) -> &FreqTrie {
        &self.trie
    }

    /// Number of distinct (utterance, offset) suffixes indexed.
    pub fn n_suffixes(&self) -> u64 {
        self.n_suffixes
    }

    /// Utterances that have `suffix` as a suffix.
    pub fn origins_of(&self, suffix: &str) -> &[u32] {
        self.trie
            .find(suffix)
            .and_then(|n| self.origins.get(&n))
            .map_or(&[], Vec::as_slice)
    }
}

/// MPC over the suffix index with backoff.
///
/// Tries the whole prefix, then ever shorter suffixes of it down to
/// `min_backoff` characters, and completes from the first one that has a
/// continuation. Confidence is the winner's share at the hit node scaled by
/// the matched fraction of the prefix.
pub fn mpcpp_complete(index: &SuffixIndex, prefix: &str, min_backoff: usize, max_len: usize) -> Suggestion {
    const ID: &str = "mpc++";
    let trie = &index.trie;
    let chars: Vec<(usize, char)> = prefix.char_indices().collect();
    let plen = chars.len();
    let shortest = min_backoff.max(1).min(plen);
    // plen == 0 only visits the root
    for matched in (shortest..=plen).rev() {
        let start = if matched == plen { 0 } else { chars[plen - matched].0 };
        let Some(node) = trie.find(&prefix[start..]) else {
            continue;
        };
        if let Some((cont, count)) = trie.most_popular_extension(node) {
            let share = count as f64 / trie.pass_count(node) as f64;
            let scale = if plen == 0 { 1.0 } else { matched as f64 / plen as f64 };
            return Suggestion::new(ID, take_chars(&cont, max_len).to_owned(), share * scale);
        }
    }
    Suggestion::empty(ID)
}

const MAGIC: &[u8; 8] = b"MACMPC\0\0";
const VERSION: u32 = 1;

/// Prefix trie and suffix index built from the same utterance corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcIndex {
    pub prefix_trie: FreqTrie,
    pub suffix_index: SuffixIndex,
}

impl MpcIndex {
    pub fn build(corpus: &[(String, u64)]) -> Self {
        let items = || corpus.iter().map(|(s, c)| (s.as_str(), *c));
        MpcIndex {
            prefix_trie: FreqTrie::build(items()),
            suffix_index: SuffixIndex::build(items()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binfile::save(path.as_ref(), MAGIC, VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        binfile::load(path.as_ref(), MAGIC, VERSION)
    }

    pub fn is_index_file(path: impl AsRef<Path>) -> bool {
        binfile::peek_magic(path.as_ref()).is_ok_and(|m| &m == MAGIC)
    }
}

pub struct Mpc {
    id: String,
    trie: FreqTrie,
    pub max_len: usize,
}

impl Mpc {
    pub fn new(trie: FreqTrie) -> Self {
        Mpc {
            id: "mpc".into(),
            trie,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn trie(&self) -> &FreqTrie {
        &self.trie
    }
}

impl Completer for Mpc {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        let mut s = mpc_complete(&self.trie, query.prefix, self.max_len);
        s.model_id.clone_from(&self.id);
        s
    }
}

pub struct MpcPlusPlus {
    id: String,
    index: SuffixIndex,
    pub min_backoff: usize,
    pub max_len: usize,
}

impl MpcPlusPlus {
    pub fn new(index: SuffixIndex) -> Self {
        MpcPlusPlus {
            id: "mpc++".into(),
            index,
            min_backoff: DEFAULT_MIN_BACKOFF,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl Completer for MpcPlusPlus {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, query: &Query<'_>) -> Suggestion {
        let mut s = mpcpp_complete(&self.index, query.prefix, self.min_backoff, self.max_len);
        s.model_id.clone_from(&self.id);
        s
    }
}

/// Reference MPC: scan the corpus, keep utterances starting with `prefix`,
/// pick the highest count with the lexicographically smallest string on ties.
#[cfg(test)]
pub(crate) fn brute_force_mpc(corpus: &[(String, u64)], prefix: &str) -> Option<(String, f64)> {
    let mut total = 0u64;
    let mut best: Option<(&str, u64)> = None;
    let mut merged: BTreeMap<&str, u64> = BTreeMap::new();
    for (s, c) in corpus {
        *merged.entry(s.as_str()).or_default() += c;
    }
    for (s, &c) in &merged {
        if s.starts_with(prefix) {
            total += c;
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((s, c));
            }
        }
    }
    let (s, c) = best?;
    let cont = &s[prefix.len()..];
    (!cont.is_empty()).then(|| (cont.to_owned(), c as f64 / total as f64))
}
