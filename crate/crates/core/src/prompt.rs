//! Rendered prompts and their content digests.

use serde::{Deserialize, Serialize};

use crate::client::{ChatMessage, Role};
use crate::digest::sha256_hex;

/// The trigger phrase appended to reasoning prompts.
pub const STEP_BY_STEP: &str = "Let's think step by step";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// SHA-256 of `text`, byte for byte.
    pub digest: String,
}

impl RenderedPrompt {
    pub fn new(text: String) -> Self {
        let digest = sha256_hex(text.as_bytes());
        Self { text, digest }
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage {
            role: Role::User,
            content: self.text.clone(),
        }]
    }
}
