use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::schema::OutputSchema;
use crate::text::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub messages: Vec<Message>,
    pub model_name: String,
    pub temperature: f64,
    #[serde(default)]
    pub output_schema: Option<OutputSchema>,
    #[serde(default)]
    pub seed_hint: Option<u64>,
}

impl ModelRequest {
    pub fn new(model_name: impl Into<String>, temperature: f64) -> Self {
        ModelRequest {
            messages: Vec::new(),
            model_name: model_name.into(),
            temperature,
            output_schema: None,
            seed_hint: None,
        }
    }

    pub fn system(mut self, content: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::System,
            content: content.into(),
        });
        self
    }

    pub fn user(mut self, content: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::User,
            content: content.into(),
        });
        self
    }

    pub fn schema(mut self, schema: OutputSchema) -> Self {
        self.output_schema = Some(schema);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed_hint = Some(seed);
        self
    }

    /// The same conversation extended by the model's previous reply and a
    /// corrective user turn.
    pub fn followup(&self, reply: &str, correction: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.messages.push(Message {
            role: Role::Assistant,
            content: reply.to_string(),
        });
        next.messages.push(Message {
            role: Role::User,
            content: correction.into(),
        });
        next
    }

    /// Concatenated text of every user message.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn system_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Number of corrective turns appended so far.
    pub fn followups(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count()
    }

    /// Stable hash of messages, model, temperature and the canonical schema.
    /// The seed hint is not part of the digest.
    pub fn digest(&self) -> String {
        let canonical = json!({
            "messages": self.messages,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "output_schema": self.output_schema.as_ref().map(|s| s.canonical()),
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    #[serde(default)]
    pub structured: Option<Value>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, Value>,
}

impl ModelResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ModelResponse {
            text: text.into(),
            structured: None,
            usage: Usage::default(),
            provider_meta: BTreeMap::new(),
        }
    }
}
