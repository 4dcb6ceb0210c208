//! JSON bodies of the ghost-text HTTP service.

use serde::{Deserialize, Serialize};

use crate::dialog::Utterance;

/// Human-readable definition attached to interactive TES numbers.
pub const INTERACTIVE_TES: &str =
    "interactive: 1 - typed/(typed + accepted), measured on the final text the user approved when rating";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub seeded_context: Vec<Utterance>,
    #[serde(default)]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub session_id: String,
    /// The whole draft so far, not just the last keystroke.
    pub typed: String,
}

/// A suggestion as shown to the user. Carries no model identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GhostText {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub suggestion: GhostText,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptRequest {
    pub session_id: String,
    pub n_chars: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveTes {
    pub chars_typed: usize,
    pub chars_accepted: usize,
    pub tes: f64,
}

impl LiveTes {
    pub fn new(chars_typed: usize, chars_accepted: usize) -> Self {
        let total = chars_typed + chars_accepted;
        let tes = if total == 0 {
            0.0
        } else {
            1.0 - chars_typed as f64 / total as f64
        };
        LiveTes {
            chars_typed,
            chars_accepted,
            tes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub live_tes: LiveTes,
    /// Draft after appending the accepted characters.
    pub draft: String,
    /// Part of the suggestion still available for acceptance.
    pub remaining: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    pub session_id: String,
    pub rating: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResponse {
    pub session_id: String,
    pub rating: u8,
    pub final_text: String,
    pub live_tes: LiveTes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    /// Closed (rated) sessions.
    pub n_sessions: usize,
    pub mean_tes: f64,
    pub mean_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub tes_definition: String,
    pub n_started: usize,
    pub n_closed: usize,
    pub models: Vec<ModelReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
