//! Question queue shared by the fuzz loop (producer) and the model consumer.
//!
//! In priority mode the next question is the one queried least often, oldest
//! first among equals, so fresh branches overtake ones the model keeps
//! failing. FIFO mode dispatches in insertion order only. In both modes a
//! question id has at most one live entry, and a question that reaches the
//! attempt cap is retired for good.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::coverage::CoverageSet;
use crate::slicer::Question;

pub const DEFAULT_ATTEMPT_CAP: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    Priority,
    Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Inserted,
    Duplicate,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: String,
    pub branch: String,
    pub priority: i64,
    pub queried_count: u32,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDump {
    pub live: Vec<QueueEntry>,
    pub retired: Vec<String>,
}

struct State {
    /// Ordered by (rank, seq); rank is the queried count in priority mode, 0 in FIFO mode.
    order: BTreeSet<(u32, u64, String)>,
    live: HashMap<String, (Question, u64)>,
    attempts: HashMap<String, u32>,
    retired: BTreeSet<String>,
    seq: u64,
}

pub struct QuestionQueue {
    mode: QueueMode,
    cap: u32,
    state: Mutex<State>,
}

impl QuestionQueue {
    pub fn new(mode: QueueMode, cap: u32) -> QuestionQueue {
        QuestionQueue {
            mode,
            cap: cap.max(1),
            state: Mutex::new(State {
                order: BTreeSet::new(),
                live: HashMap::new(),
                attempts: HashMap::new(),
                retired: BTreeSet::new(),
                seq: 0,
            }),
        }
    }

    pub fn mode(&self) -> QueueMode {
        self.mode
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn rank(&self, count: u32) -> u32 {
        match self.mode {
            QueueMode::Priority => count,
            QueueMode::Fifo => 0,
        }
    }

    /// Adds `q` unless it is live or retired. A question seen before keeps
    /// its earlier attempt count.
    pub fn enqueue(&self, mut q: Question) -> Enqueued {
        let mut st = self.lock();
        if st.retired.contains(&q.id) {
            return Enqueued::Retired;
        }
        if st.live.contains_key(&q.id) {
            return Enqueued::Duplicate;
        }
        let count = q.queried_count.max(st.attempts.get(&q.id).copied().unwrap_or(0));
        if count >= self.cap {
            st.retired.insert(q.id.clone());
            return Enqueued::Retired;
        }
        q.queried_count = count;
        let seq = st.seq;
        st.seq += 1;
        st.order.insert((self.rank(count), seq, q.id.clone()));
        st.live.insert(q.id.clone(), (q, seq));
        Enqueued::Inserted
    }

    /// Removes the best entry and counts the attempt on it.
    pub fn next(&self) -> Option<Question> {
        let mut st = self.lock();
        let first = st.order.pop_first()?;
        let (mut q, _) = st.live.remove(&first.2).expect("ordered entry is live");
        q.queried_count += 1;
        st.attempts.insert(q.id.clone(), q.queried_count);
        Some(q)
    }

    /// Puts back a question whose query failed. Returns false when it has
    /// used up its attempts and was retired instead.
    pub fn requeue_failed(&self, q: Question) -> bool {
        if q.queried_count >= self.cap {
            self.lock().retired.insert(q.id.clone());
            return false;
        }
        self.enqueue(q) == Enqueued::Inserted
    }

    /// Puts back a question whose query never reached the model, undoing
    /// the attempt count.
    pub fn restore(&self, mut q: Question) {
        q.queried_count = q.queried_count.saturating_sub(1);
        {
            let mut st = self.lock();
            st.attempts.insert(q.id.clone(), q.queried_count);
        }
        self.enqueue(q);
    }

    /// Drops live entries whose desired direction is already covered.
    pub fn suppress_covered(&self, global: &CoverageSet) -> usize {
        let mut st = self.lock();
        let doomed: Vec<(u32, u64, String)> = st
            .order
            .iter()
            .filter(|(_, _, id)| global.contains(&st.live[id].0.branch.desired_key()))
            .cloned()
            .collect();
        for key in &doomed {
            st.order.remove(key);
            st.live.remove(&key.2);
        }
        doomed.len()
    }

    pub fn len(&self) -> usize {
        self.lock().live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lock().live.contains_key(id)
    }

    pub fn retired_count(&self) -> usize {
        self.lock().retired.len()
    }

    /// Attempts so far per question id.
    pub fn attempts(&self) -> BTreeMap<String, u32> {
        self.lock().attempts.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    /// Live entries in dispatch order, plus retired ids.
    pub fn dump(&self) -> QueueDump {
        let st = self.lock();
        let live = st
            .order
            .iter()
            .map(|(_, seq, id)| {
                let q = &st.live[id].0;
                QueueEntry {
                    id: id.clone(),
                    branch: q.branch.desired_key().to_string(),
                    priority: -(q.queried_count as i64),
                    queried_count: q.queried_count,
                    seq: *seq,
                }
            })
            .collect();
        QueueDump {
            live,
            retired: st.retired.iter().cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{BranchSite, UncoveredBranch};
    use crate::slicer::PromptMode;
    use proptest::prelude::*;
    use std::sync::Arc;

    pub(crate) fn question(line: u32) -> Question {
        let site = Arc::new(BranchSite {
            file: "q.c".into(),
            line,
            column: 1,
            condition_text: "c".into(),
            function: "f".into(),
        });
        let branch = UncoveredBranch::new(site, false, vec!["f".into()], 1);
        Question {
            id: format!("q{line}"),
            target: "t".into(),
            branch,
            prompt: String::new(),
            original_input: vec![],
            mode: PromptMode::FullTrace,
            queried_count: 0,
            created_at: 0,
        }
    }

    #[test]
    fn enqueue_and_dedup() {
        let q = QuestionQueue::new(QueueMode::Priority, 16);
        assert_eq!(q.enqueue(question(1)), Enqueued::Inserted);
        assert_eq!(q.enqueue(question(1)), Enqueued::Duplicate);
        assert_eq!(q.len(), 1);
        let mut tried = question(2);
        tried.queried_count = 3;
        q.enqueue(tried);
        let dump = q.dump();
        assert_eq!(dump.live[1].priority, -3);
    }

    #[test]
    fn next_order() {
        let q = QuestionQueue::new(QueueMode::Priority, 16);
        assert!(q.next().is_none());
        q.enqueue(question(1));
        q.enqueue(question(2));
        assert_eq!(q.next().unwrap().id, "q1");
        let q = QuestionQueue::new(QueueMode::Priority, 16);
        let mut q1 = question(1);
        q1.queried_count = 2;
        q.enqueue(q1);
        q.enqueue(question(3));
        let first = q.next().unwrap();
        assert_eq!(first.id, "q3");
        assert_eq!(first.queried_count, 1);
    }

    #[test]
    fn fifo_ignores_counts() {
        let q = QuestionQueue::new(QueueMode::Fifo, 16);
        let mut q1 = question(1);
        q1.queried_count = 5;
        q.enqueue(q1);
        q.enqueue(question(2));
        assert_eq!(q.next().unwrap().id, "q1");
    }

    #[test]
    fn suppression() {
        let q = QuestionQueue::new(QueueMode::Priority, 16);
        q.enqueue(question(1));
        q.enqueue(question(2));
        assert_eq!(q.suppress_covered(&CoverageSet::new()), 0);
        let mut cov = CoverageSet::new();
        cov.insert(question(1).branch.desired_key());
        assert_eq!(q.suppress_covered(&cov), 1);
        assert_eq!(q.next().unwrap().id, "q2");
        q.enqueue(question(1));
        assert_eq!(q.suppress_covered(&cov), 1);
        assert!(q.is_empty());
    }

    #[test]
    fn cap_retires_and_history_survives() {
        let q = QuestionQueue::new(QueueMode::Priority, 3);
        q.enqueue(question(1));
        for _ in 0..2 {
            let got = q.next().unwrap();
            assert!(q.requeue_failed(got));
        }
        let got = q.next().unwrap();
        assert_eq!(got.queried_count, 3);
        assert!(!q.requeue_failed(got));
        assert_eq!(q.enqueue(question(1)), Enqueued::Retired);

        // A re-discovered question keeps its count.
        let q = QuestionQueue::new(QueueMode::Priority, 16);
        q.enqueue(question(7));
        let _ = q.next().unwrap();
        q.enqueue(question(7));
        assert_eq!(q.dump().live[0].queried_count, 1);

        let got = q.next().unwrap();
        q.restore(got);
        assert_eq!(q.dump().live[0].queried_count, 1);
    }

    #[test]
    fn fresh_question_beats_failing_one() {
        let q = QuestionQueue::new(QueueMode::Priority, 100);
        q.enqueue(question(0));
        let failing = q.next().unwrap();
        q.requeue_failed(failing);
        q.enqueue(question(1));
        assert_eq!(q.next().unwrap().id, "q1");
    }

    proptest! {
        #[test]
        fn round_robin_fairness(n in 1u32..12, rounds in 1u32..8) {
            let q = QuestionQueue::new(QueueMode::Priority, 1000);
            for i in 0..n {
                q.enqueue(question(i));
            }
            for _ in 0..rounds * n {
                let got = q.next().unwrap();
                q.requeue_failed(got);
            }
            let counts: Vec<u32> = q.dump().live.iter().map(|e| e.queried_count).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn dedup_keeps_one_entry_per_branch(stream in proptest::collection::vec(0u32..20, 0..100)) {
            let q = QuestionQueue::new(QueueMode::Priority, 16);
            for line in &stream {
                q.enqueue(question(*line));
            }
            let distinct: BTreeSet<_> = stream.iter().collect();
            prop_assert_eq!(q.len(), distinct.len());
        }
    }
}
