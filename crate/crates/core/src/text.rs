//! Character-level string helpers.
//!
//! Every length and offset in this crate counts Unicode scalar values, never
//! bytes.

/// Number of characters in `s`.
#[inline]
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Byte offset of the `n`-th character, or `s.len()` when `n` is past the end.
pub fn byte_offset(s: &str, n: usize) -> usize {
    s.char_indices().nth(n).map_or(s.len(), |(i, _)| i)
}

/// Splits `s` after its first `n` characters.
pub fn split_chars(s: &str, n: usize) -> (&str, &str) {
    s.split_at(byte_offset(s, n))
}

/// The first `n` characters of `s`.
pub fn take_chars(s: &str, n: usize) -> &str {
    split_chars(s, n).0
}

/// The last `n` characters of `s`.
pub fn last_chars(s: &str, n: usize) -> &str {
    let len = char_len(s);
    split_chars(s, len.saturating_sub(n)).1
}

/// Length of the longest common prefix of `a` and `b`, in characters.
pub fn lcp_len(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// FNV-1a followed by the SplitMix64 finalizer, so every output bit depends
/// on every input byte.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut z = fnv1a64(bytes);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `stable_hash` mapped to [0, 1).
pub fn unit_hash(bytes: &[u8]) -> f64 {
    (stable_hash(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcp_examples() {
        assert_eq!(
            lcp_len("dog out for walks here!", "dog out for walks here!"),
            23
        );
        assert_eq!(lcp_len("dog", "cat"), 0);
        assert_eq!(lcp_len("dog out", "dog on"), 5);
        assert_eq!(lcp_len("", "abc"), 0);
    }

    #[test]
    fn multibyte_offsets() {
        let s = "héllo wörld";
        assert_eq!(char_len(s), 11);
        assert_eq!(split_chars(s, 2), ("hé", "llo wörld"));
        assert_eq!(last_chars(s, 4), "örld");
        assert_eq!(take_chars(s, 50), s);
        assert_eq!(lcp_len("héllo", "hélp"), 3);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn unit_hash_spreads_similar_keys() {
        let low = (0..1000)
            .filter(|i| unit_hash(format!("d{i}").as_bytes()) < 0.2)
            .count();
        assert!((150..=250).contains(&low), "{low}");
    }
}
