use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Olat,
    Composite,
    Condition,
    Distill,
    Done,
    Failed,
}

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Failed)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("job cannot move from {from:?} to {to:?}")]
pub struct StageError {
    pub from: Stage,
    pub to: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    /// Milliseconds since the Unix epoch.
    pub at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub scene: String,
    pub stage: Stage,
    pub created_at: u64,
    pub updated_at: u64,
    pub history: Vec<StageEntry>,
    /// Artifact name to path (relative to the data root).
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl JobRecord {
    pub fn new(id: impl Into<String>, scene: impl Into<String>) -> Self {
        let at = now_ms();
        Self {
            id: id.into(),
            scene: scene.into(),
            stage: Stage::Olat,
            created_at: at,
            updated_at: at,
            history: vec![StageEntry { stage: Stage::Olat, at }],
            artifacts: BTreeMap::new(),
            error: None,
        }
    }

    /// Moves forward; stages never go back and nothing follows a terminal one.
    pub fn advance(&mut self, to: Stage) -> Result<(), StageError> {
        if self.stage.is_terminal() || to <= self.stage {
            return Err(StageError { from: self.stage, to });
        }
        let at = now_ms().max(self.updated_at);
        self.stage = to;
        self.updated_at = at;
        self.history.push(StageEntry { stage: to, at });
        Ok(())
    }

    pub fn fail(&mut self, message: impl Into<String>) -> Result<(), StageError> {
        self.advance(Stage::Failed)?;
        self.error = Some(message.into());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_only_move_forward() {
        let mut j = JobRecord::new("j", "s");
        j.advance(Stage::Composite).unwrap();
        assert!(j.advance(Stage::Olat).is_err());
        assert!(j.advance(Stage::Composite).is_err());
        j.advance(Stage::Distill).unwrap();
        j.fail("boom").unwrap();
        assert!(j.advance(Stage::Done).is_err());
        assert!(j.fail("again").is_err());
        assert_eq!(j.history.len(), 4);
        assert!(j.history.windows(2).all(|w| w[0].at <= w[1].at && w[0].stage < w[1].stage));
    }

    #[test]
    fn done_is_terminal() {
        let mut j = JobRecord::new("j", "s");
        j.advance(Stage::Done).unwrap();
        assert_eq!(j.fail("late"), Err(StageError { from: Stage::Done, to: Stage::Failed }));
    }
}
