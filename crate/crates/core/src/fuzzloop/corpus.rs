use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coverage::BranchKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum Provenance {
    Initial,
    /// Ground-truth answer injected from a training split.
    Answer,
    Mutation,
    /// Generated by the model for the named question.
    Model(String),
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Initial => "initial".into(),
            Provenance::Answer => "answer".into(),
            Provenance::Mutation => "mutation".into(),
            Provenance::Model(q) => format!("model:{q}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub id: String,
    pub data: Vec<u8>,
    pub provenance: Provenance,
    /// Keys this seed added to global coverage when saved.
    pub new_keys: Vec<BranchKey>,
}

/// Saved seeds, scheduled round-robin.
#[derive(Debug, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    known: HashSet<Vec<u8>>,
    cursor: usize,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a seed unless its bytes are already stored.
    pub fn add(&mut self, data: Vec<u8>, provenance: Provenance, new_keys: Vec<BranchKey>) -> bool {
        if !self.known.insert(data.clone()) {
            return false;
        }
        let id = format!("{:06}-{}", self.entries.len(), crate::dataset::seed_id(&data));
        self.entries.push(CorpusEntry {
            id,
            data,
            provenance,
            new_keys,
        });
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &CorpusEntry {
        &self.entries[i]
    }

    /// Index of the next seed in round-robin order.
    pub fn schedule_next(&mut self) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let i = self.cursor % self.entries.len();
        self.cursor = i + 1;
        Some(i)
    }

    /// Writes each seed to `dir/<id>` plus an `index.json` of provenance.
    pub fn persist(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = Vec::new();
        for e in &self.entries {
            std::fs::write(dir.join(&e.id), &e.data)?;
            index.push(serde_json::json!({
                "id": e.id,
                "provenance": e.provenance.label(),
                "new_keys": e.new_keys.len(),
            }));
        }
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        std::fs::write(dir.join("index.json"), text)
    }
}

/// Regular files in `dir`, sorted by name, excluding `index.json`.
pub fn load_seed_dir(dir: &Path) -> std::io::Result<Vec<Vec<u8>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "index.json"))
        .collect();
    paths.sort();
    paths.iter().map(std::fs::read).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_and_dedup() {
        let mut c = Corpus::new();
        assert_eq!(c.schedule_next(), None);
        assert!(c.add(b"a".to_vec(), Provenance::Initial, vec![]));
        assert!(!c.add(b"a".to_vec(), Provenance::Mutation, vec![]));
        c.add(b"b".to_vec(), Provenance::Mutation, vec![]);
        let order: Vec<_> = (0..5).map(|_| c.schedule_next().unwrap()).collect();
        assert_eq!(order, [0, 1, 0, 1, 0]);

        let dir = tempfile::tempdir().unwrap();
        c.persist(dir.path()).unwrap();
        assert_eq!(load_seed_dir(dir.path()).unwrap(), [b"a".to_vec(), b"b".to_vec()]);
    }
}
