//! One user's conversation with a blinded model.

use mac_core::api::LiveTes;
use mac_core::dialog::DialogContext;

use crate::error::ServiceError;

/// The service's view of one session. Holds no I/O so the live service and
/// log replay share it.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub arm: String,
    pub context: DialogContext,
    /// Draft characters, each flagged whether it came from an accepted
    /// suggestion.
    draft: Vec<(char, bool)>,
    outstanding: Vec<char>,
    pub triggers: usize,
    pub rating: Option<u8>,
    pub final_tes: Option<LiveTes>,
}

impl Session {
    pub fn new(id: impl Into<String>, arm: impl Into<String>, context: DialogContext) -> Self {
        Session {
            id: id.into(),
            arm: arm.into(),
            context,
            draft: Vec::new(),
            outstanding: Vec::new(),
            triggers: 0,
            rating: None,
            final_tes: None,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.rating.is_some()
    }

    pub fn draft(&self) -> String {
        self.draft.iter().map(|(c, _)| c).collect()
    }

    pub fn outstanding(&self) -> String {
        self.outstanding.iter().collect()
    }

    pub fn live_tes(&self) -> LiveTes {
        let accepted = self.draft.iter().filter(|(_, a)| *a).count();
        LiveTes::new(self.draft.len() - accepted, accepted)
    }

    fn ensure_open(&self) -> Result<(), ServiceError> {
        if self.is_closed() {
            Err(ServiceError::Closed)
        } else {
            Ok(())
        }
    }

    /// Replaces the draft with the client's copy. Characters shared with the
    /// previous draft keep their origin; everything after that counts as
    /// typed. Any edit withdraws the outstanding suggestion.
    pub fn observe(&mut self, typed: &str) -> Result<(), ServiceError> {
        self.ensure_open()?;
        let new: Vec<char> = typed.chars().collect();
        let keep = self
            .draft
            .iter()
            .zip(&new)
            .take_while(|((a, _), b)| a == *b)
            .count();
        if keep == self.draft.len() && keep == new.len() {
            return Ok(());
        }
        self.draft.truncate(keep);
        self.draft.extend(new[keep..].iter().map(|&c| (c, false)));
        self.outstanding.clear();
        Ok(())
    }

    /// Records the suggestion shown for the current draft. Suggestions are
    /// only taken once something has been typed.
    pub fn offer(&mut self, text: &str) {
        if self.draft.is_empty() {
            self.outstanding.clear();
            return;
        }
        self.outstanding = text.chars().collect();
        if !self.outstanding.is_empty() {
            self.triggers += 1;
        }
    }

    /// Appends the first `n` characters of the outstanding suggestion.
    pub fn accept(&mut self, n: usize) -> Result<LiveTes, ServiceError> {
        self.ensure_open()?;
        if self.outstanding.is_empty() {
            return Err(ServiceError::NoSuggestion);
        }
        if n == 0 || n > self.outstanding.len() {
            return Err(ServiceError::AcceptBounds {
                got: n,
                max: self.outstanding.len(),
            });
        }
        self.draft.extend(self.outstanding.drain(..n).map(|c| (c, true)));
        Ok(self.live_tes())
    }

    /// Stores the rating and freezes TES against the final draft.
    pub fn rate(&mut self, rating: i64) -> Result<LiveTes, ServiceError> {
        self.ensure_open()?;
        let r = u8::try_from(rating)
            .ok()
            .filter(|r| *r <= 9)
            .ok_or(ServiceError::RatingBounds(rating))?;
        if self.draft.is_empty() {
            return Err(ServiceError::EmptyDraft);
        }
        let tes = self.live_tes();
        self.rating = Some(r);
        self.final_tes = Some(tes);
        self.outstanding.clear();
        Ok(tes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session() -> Session {
        Session::new("s", "qb", DialogContext::default())
    }

    #[test]
    fn type_fifteen_accept_five() {
        let mut s = session();
        s.observe("That's why I lo").unwrap();
        s.offer("ve bringing");
        let t = s.accept(5).unwrap();
        assert_eq!((t.chars_typed, t.chars_accepted), (15, 5));
        assert!((t.tes - 0.25).abs() < 1e-12);
        assert_eq!(s.draft(), "That's why I love br");
        assert_eq!(s.outstanding(), "inging");
    }

    #[test]
    fn accept_bounds() {
        let mut s = session();
        s.observe("hi").unwrap();
        assert!(matches!(s.accept(1), Err(ServiceError::NoSuggestion)));
        s.offer("abc");
        assert!(matches!(s.accept(0), Err(ServiceError::AcceptBounds { got: 0, max: 3 })));
        assert!(matches!(s.accept(4), Err(ServiceError::AcceptBounds { .. })));
        s.accept(3).unwrap();
        assert_eq!(s.draft(), "hiabc");
        assert!(matches!(s.accept(1), Err(ServiceError::NoSuggestion)));
    }

    #[test]
    fn editing_withdraws_the_suggestion() {
        let mut s = session();
        s.observe("ab").unwrap();
        s.offer("cd");
        s.observe("ab").unwrap();
        assert_eq!(s.outstanding(), "cd");
        s.observe("abx").unwrap();
        assert!(matches!(s.accept(1), Err(ServiceError::NoSuggestion)));
    }

    #[test]
    fn backspacing_over_accepted_text() {
        let mut s = session();
        s.observe("a").unwrap();
        s.offer("bcd");
        s.accept(3).unwrap();
        s.observe("abx").unwrap();
        let t = s.live_tes();
        assert_eq!((t.chars_typed, t.chars_accepted), (2, 1));
    }

    #[test]
    fn nothing_is_offered_on_an_empty_draft() {
        let mut s = session();
        s.offer("hello");
        assert_eq!(s.triggers, 0);
        assert!(matches!(s.accept(1), Err(ServiceError::NoSuggestion)));
    }

    #[test]
    fn rating_closes_once() {
        let mut s = session();
        assert!(matches!(s.rate(5), Err(ServiceError::EmptyDraft)));
        s.observe("hello").unwrap();
        assert!(matches!(s.rate(10), Err(ServiceError::RatingBounds(10))));
        assert!(matches!(s.rate(-1), Err(ServiceError::RatingBounds(-1))));
        s.rate(9).unwrap();
        assert_eq!(s.rating, Some(9));
        assert!(matches!(s.rate(8), Err(ServiceError::Closed)));
        assert!(matches!(s.observe("hello!"), Err(ServiceError::Closed)));
        assert_eq!(s.rating, Some(9));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Type(String),
        Backspace(usize),
        Offer(String),
        Accept(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            "[a-c é]{1,4}".prop_map(Op::Type),
            (1usize..4).prop_map(Op::Backspace),
            "[a-c é]{0,6}".prop_map(Op::Offer),
            (0usize..7).prop_map(Op::Accept),
        ]
    }

    proptest! {
        #[test]
        fn tes_conservation(ops in proptest::collection::vec(op(), 1..40)) {
            let mut s = session();
            for op in ops {
                match op {
                    Op::Type(t) => s.observe(&format!("{}{t}", s.draft())).unwrap(),
                    Op::Backspace(n) => {
                        let d: Vec<char> = s.draft().chars().collect();
                        let keep: String = d[..d.len().saturating_sub(n)].iter().collect();
                        s.observe(&keep).unwrap();
                    }
                    Op::Offer(t) => s.offer(&t),
                    Op::Accept(n) => {
                        let _ = s.accept(n);
                    }
                }
                let t = s.live_tes();
                prop_assert!((0.0..1.0).contains(&t.tes));
                prop_assert_eq!(t.chars_typed + t.chars_accepted, s.draft().chars().count());
            }
            if !s.draft().is_empty() {
                let t = s.rate(5).unwrap();
                prop_assert_eq!(t.chars_typed + t.chars_accepted, s.draft().chars().count());
            }
        }
    }
}
