use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fence_answer, question_tag, CompletionParams, ModelClient};
use crate::error::ModelError;

pub const FALLBACK_COMPLETION: &str = "I could not find an input that inverts this branch.";

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub question_id: String,
    pub answers_b64: Vec<String>,
}

/// Replays fixed answers: attempt `i` for a question gets its `i`-th
/// scripted answer, or the fallback text once those run out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    answers: HashMap<String, Vec<Vec<u8>>>,
}

impl ScriptedClient {
    pub fn new(answers: HashMap<String, Vec<Vec<u8>>>) -> Self {
        ScriptedClient { answers }
    }

    pub fn from_entries(entries: &[ScriptEntry]) -> Result<Self, ModelError> {
        let mut answers = HashMap::new();
        for e in entries {
            let decoded = e
                .answers_b64
                .iter()
                .map(|a| crate::b64_decode(a))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|err| ModelError::Script(format!("{}: {err}", e.question_id)))?;
            answers.insert(e.question_id.clone(), decoded);
        }
        Ok(ScriptedClient { answers })
    }

    /// Reads a JSONL script.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Script(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| ModelError::Script(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Self::from_entries(&entries)
    }

    pub fn save(entries: &[ScriptEntry], path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

impl ModelClient for ScriptedClient {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Vec<String>, ModelError> {
        let scripted = question_tag(prompt).and_then(|id| self.answers.get(id));
        Ok((0..params.attempts)
            .map(|i| match scripted.and_then(|a| a.get(i)) {
                Some(answer) => fence_answer(answer),
                None => FALLBACK_COMPLETION.to_string(),
            })
            .collect())
    }

    fn wants_question_tag(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::tag_prompt;

    fn client() -> ScriptedClient {
        ScriptedClient::new(HashMap::from([("q1".to_string(), vec![b"1;".to_vec(), vec![0xff]])]))
    }

    #[test]
    fn scripted_then_fallback() {
        let params = CompletionParams::default();
        let out = client().complete(&tag_prompt("q1", "p"), &params).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0], "```input\n1;\n```");
        assert_eq!(out[1], "```input-base64\n/w==\n```");
        assert!(out[2..].iter().all(|c| c == FALLBACK_COMPLETION));

        let unknown = client().complete(&tag_prompt("q9", "p"), &params).unwrap();
        assert!(unknown.iter().all(|c| c == FALLBACK_COMPLETION));
        assert_eq!(client().complete(&tag_prompt("q1", "p"), &params).unwrap(), out);
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let entries = vec![ScriptEntry {
            question_id: "q1".into(),
            answers_b64: vec![crate::b64_encode(b"1;")],
        }];
        ScriptedClient::save(&entries, &path).unwrap();
        let c = ScriptedClient::load(&path).unwrap();
        let params = CompletionParams {
            attempts: 1,
            ..Default::default()
        };
        assert_eq!(c.complete(&tag_prompt("q1", "x"), &params).unwrap(), ["```input\n1;\n```"]);
        std::fs::write(&path, "{oops").unwrap();
        assert!(matches!(ScriptedClient::load(&path), Err(ModelError::Script(_))));
    }
}
