use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterTransform;
use crate::error::{Error, Result};
use crate::provider::AdapterPlan;

/// Question family: novel recall (A), cross-knowledge combination (B),
/// conflict with pretraining (C), or off-topic retention probe (R).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    A,
    B,
    C,
    R,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dimension::A => "A",
            Dimension::B => "B",
            Dimension::C => "C",
            Dimension::R => "R",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Light,
    Medium,
    Deep,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Light => "light",
            Tier::Medium => "medium",
            Tier::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictQuestion {
    pub id: String,
    pub knowledge_point_id: String,
    pub dimension: Dimension,
    #[serde(default)]
    pub tier: Option<Tier>,
    pub prompt: String,
    pub document: String,
    /// The answer stated by the document.
    pub expected_answer: String,
    /// The answer the base model gives from pretraining (conflicts only).
    #[serde(default)]
    pub pretrained_answer: Option<String>,
    #[serde(default)]
    pub phrasing_index: usize,
    /// Ground-truth relevance of the document to the prompt, used by the
    /// oracle gate policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant: Option<bool>,
}

impl ConflictQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.expected_answer.trim().is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{}: empty expected answer",
                self.id
            )));
        }
        if self.dimension == Dimension::C {
            let pre = self.pretrained_answer.as_deref().ok_or_else(|| {
                Error::InvalidParameter(format!("{}: conflict without pretrained answer", self.id))
            })?;
            if self.tier.is_none() {
                return Err(Error::InvalidParameter(format!(
                    "{}: conflict without tier",
                    self.id
                )));
            }
            if pre.eq_ignore_ascii_case(&self.expected_answer) {
                return Err(Error::InvalidParameter(format!(
                    "{}: pretrained answer equals document answer",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn is_conflict(&self) -> bool {
        self.dimension == Dimension::C
    }

    /// Adapter for this question's document, keyed by knowledge point.
    pub fn plan(&self, transform: AdapterTransform) -> AdapterPlan {
        AdapterPlan {
            document_id: self.knowledge_point_id.clone(),
            document: self.document.clone(),
            transform,
        }
    }
}

/// Reads a JSON-lines benchmark file. Blank lines are skipped.
pub fn load_questions(path: &Path) -> Result<Vec<ConflictQuestion>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: ConflictQuestion = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        q.validate()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(q);
    }
    Ok(out)
}

pub fn save_questions(path: &Path, questions: &[ConflictQuestion]) -> Result<()> {
    let mut text = String::new();
    for q in questions {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conflict() -> ConflictQuestion {
        ConflictQuestion {
            id: "q1".into(),
            knowledge_point_id: "kp1".into(),
            dimension: Dimension::C,
            tier: Some(Tier::Deep),
            prompt: "What is the capital of France?".into(),
            document: "The capital of France is Lyon.".into(),
            expected_answer: "Lyon".into(),
            pretrained_answer: Some("Paris".into()),
            phrasing_index: 0,
            relevant: None,
        }
    }

    #[test]
    fn conflict_requires_prior_and_tier() {
        conflict().validate().unwrap();
        let mut q = conflict();
        q.pretrained_answer = None;
        assert!(q.validate().is_err());
        let mut q = conflict();
        q.tier = None;
        assert!(q.validate().is_err());
        let mut q = conflict();
        q.pretrained_answer = Some("lyon".into());
        assert!(q.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        save_questions(&path, &[conflict()]).unwrap();
        assert_eq!(load_questions(&path).unwrap(), vec![conflict()]);

        fs::write(&path, r#"{"id":"x","knowledge_point_id":"k","dimension":"A","prompt":"p","document":"d","expected_answer":"e","bogus":1}"#).unwrap();
        assert!(load_questions(&path).is_err());
    }
}
