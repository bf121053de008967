//! Dialogue sessions: the alternating user/assistant transcript a pipeline
//! reads and extends.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RqaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl DialogueSession {
    pub fn new(session_id: impl Into<String>) -> Self {
        DialogueSession {
            session_id: session_id.into(),
            turns: Vec::new(),
        }
    }

    /// A session with a random 16-hex-digit id.
    pub fn fresh() -> Self {
        DialogueSession::new(format!("{:016x}", rand::rng().random::<u64>()))
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    fn expected_role(&self) -> Role {
        match self.turns.last().map(|t| t.role) {
            None | Some(Role::Assistant) => Role::User,
            Some(Role::User) => Role::Assistant,
        }
    }

    /// Appends a turn; roles must alternate starting with the user.
    pub fn push(&mut self, role: Role, text: impl Into<String>) -> Result<()> {
        let expected = self.expected_role();
        if role != expected {
            return Err(RqaError::Precondition(format!(
                "session {} expects a {expected:?} turn next",
                self.session_id
            )));
        }
        self.turns.push(Turn {
            role,
            text: text.into(),
            ts: now_millis(),
        });
        Ok(())
    }

    /// Checks the alternation invariant on a session read from elsewhere.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(RqaError::schema(
                    format!("session {} turn {i}", self.session_id),
                    format!("expected {expected:?}"),
                ));
            }
        }
        Ok(())
    }

    /// Completed (user, assistant) exchanges, oldest first.
    pub fn exchanges(&self) -> Vec<(&str, &str)> {
        self.turns
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| (c[0].text.as_str(), c[1].text.as_str()))
            .collect()
    }
}
