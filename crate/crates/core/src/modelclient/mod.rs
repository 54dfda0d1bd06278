//! Language-model backends.
//!
//! [`HttpClient`] talks to a chat-completions endpoint. [`ScriptedClient`]
//! replays canned answers keyed by question id, and [`OracleClient`] finds
//! answers by searching the target itself; both are deterministic.

mod http;
mod oracle;
mod scripted;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub use http::{HttpClient, HttpClientConfig};
pub use oracle::{OracleClient, OracleSearch, NO_SOLUTION};
pub use scripted::{ScriptEntry, ScriptedClient, FALLBACK_COMPLETION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Completions requested per prompt.
    pub attempts: usize,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            temperature: 1.0,
            max_tokens: 2048,
            attempts: 5,
        }
    }
}

pub trait ModelClient: Send + Sync {
    fn name(&self) -> &str;

    /// At most `params.attempts` completions for `prompt`.
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Vec<String>, ModelError>;

    /// Whether prompts should carry a `[question-id: …]` header line.
    fn wants_question_tag(&self) -> bool {
        false
    }
}

const TAG_OPEN: &str = "[question-id: ";

/// Prefixes `prompt` with a header naming the question.
pub fn tag_prompt(question_id: &str, prompt: &str) -> String {
    format!("{TAG_OPEN}{question_id}]\n{prompt}")
}

pub fn question_tag(prompt: &str) -> Option<&str> {
    prompt.lines().next()?.strip_prefix(TAG_OPEN)?.strip_suffix(']')
}

/// Prompt as sent to `model`.
pub fn prompt_for(model: &dyn ModelClient, question_id: &str, prompt: &str) -> String {
    if model.wants_question_tag() {
        tag_prompt(question_id, prompt)
    } else {
        prompt.to_string()
    }
}

/// Formats `input` as an answer block, falling back to base64 when it is not
/// plain text.
pub fn fence_answer(input: &[u8]) -> String {
    match std::str::from_utf8(input) {
        Ok(text) if !text.contains("```") => format!("```input\n{text}\n```"),
        _ => format!("```input-base64\n{}\n```", crate::b64_encode(input)),
    }
}
