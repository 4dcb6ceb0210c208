//! Inline auto-completion for multimodal chat.

pub mod api;
pub mod bench;
pub mod binfile;
pub mod completer;
pub mod dialog;
pub mod error;
pub mod metrics;
pub mod ngram;
pub mod registry;
pub mod router;
pub mod synth;
pub mod text;
pub mod trie;
pub mod vlm;

pub use completer::{Completer, Query, Suggestion};
pub use error::{Error, Result};
