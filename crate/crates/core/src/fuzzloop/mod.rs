//! The fuzzing campaign.
//!
//! A producer mutates corpus seeds round-robin, keeps inputs that add
//! coverage, and turns their still-uncovered branches into questions. A
//! consumer sends queued questions to a [`ModelClient`], runs the answers,
//! and feeds them back into the corpus. Both can run interleaved on one
//! thread (deterministic) or on two threads.

mod answer;
mod corpus;
mod mutate;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{live_uncovered, BranchKey, CoverageSet, ExecutionFeedback, ExitStatus};
use crate::dataset::DatasetRecord;
use crate::error::{CampaignError, ModelError, TargetError};
use crate::modelclient::{prompt_for, CompletionParams, ModelClient};
use crate::reward::reward;
use crate::scheduler::{Enqueued, QueueDump, QueueMode, QuestionQueue, DEFAULT_ATTEMPT_CAP};
use crate::slicer::{build_question, PromptMode, DEFAULT_PROMPT_BUDGET};
use crate::targets::{TargetAdapter, DEFAULT_TIME_LIMIT};

pub use answer::extract_answer;
pub use corpus::{load_seed_dir, Corpus, CorpusEntry, Provenance};
pub use mutate::{apply as apply_mutation, mutate, Mutation, MUTATIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    /// Producer steps to run.
    pub iterations: u64,
    /// Optional wall-clock cap; runs with one are not reproducible.
    pub max_duration: Option<Duration>,
    pub rng_seed: u64,
    pub lm_enabled: bool,
    pub queue_mode: QueueMode,
    pub prompt_mode: PromptMode,
    pub prompt_budget: usize,
    pub attempt_cap: u32,
    /// Single-threaded mode: one consumer step after this many producer steps.
    pub consumer_interval: u64,
    pub threaded: bool,
    pub time_limit: Duration,
    pub completion: CompletionParams,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            iterations: 10_000,
            max_duration: None,
            rng_seed: 0,
            lm_enabled: true,
            queue_mode: QueueMode::Priority,
            prompt_mode: PromptMode::FullTrace,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            attempt_cap: DEFAULT_ATTEMPT_CAP,
            consumer_interval: 100,
            threaded: false,
            time_limit: DEFAULT_TIME_LIMIT,
            completion: CompletionParams {
                attempts: 1,
                ..CompletionParams::default()
            },
        }
    }
}

impl CampaignOptions {
    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |field: &str, why: &str| Err(CampaignError::ConfigInvalid(format!("{field}: {why}")));
        if self.iterations == 0 && self.max_duration.is_none() {
            return bad("iterations", "must be positive when no duration is set");
        }
        if self.consumer_interval == 0 {
            return bad("consumer_interval", "must be at least 1");
        }
        if self.attempt_cap == 0 {
            return bad("attempt_cap", "must be at least 1");
        }
        if self.prompt_budget == 0 {
            return bad("prompt_budget", "must be positive");
        }
        if self.time_limit.is_zero() {
            return bad("time_limit", "must be positive");
        }
        if self.completion.attempts == 0 {
            return bad("attempts", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub dedup_hash: String,
    pub category: String,
    pub function: String,
    pub site: Option<String>,
    pub first_iteration: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageSample {
    pub iteration: u64,
    pub covered_keys: usize,
}

/// Campaign counters. No wall-clock data, so runs are comparable byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub target: String,
    pub rng_seed: u64,
    pub lm_enabled: bool,
    pub queue_mode: Option<QueueMode>,
    pub prompt_mode: Option<PromptMode>,
    pub iterations: u64,
    pub executions: u64,
    pub corpus_size: usize,
    pub covered_keys: usize,
    pub questions_asked: u64,
    pub questions_answered: u64,
    pub answered_ratio: f64,
    pub questions_enqueued: u64,
    pub duplicate_questions: u64,
    pub suppressed_questions: u64,
    pub retired_questions: u64,
    /// Enqueued questions whose branch belongs to the injected training split.
    pub leaked_questions: u64,
    pub extraction_failures: u64,
    pub model_errors: u64,
    pub adapter_failures: u64,
    pub slice_failures: u64,
    pub timeouts: u64,
    pub crashes: Vec<CrashRecord>,
    pub reward_cases: BTreeMap<String, u64>,
    /// Queries per desired branch key.
    pub branch_attempts: BTreeMap<String, u32>,
    pub answered_branches: Vec<String>,
    pub coverage_samples: Vec<CoverageSample>,
}

impl CampaignStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("iteration,covered_keys\n");
        for s in &self.coverage_samples {
            out.push_str(&format!("{},{}\n", s.iteration, s.covered_keys));
        }
        out
    }

    /// Human-readable summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = match (self.lm_enabled, self.queue_mode) {
            (false, _) => "baseline".to_string(),
            (true, Some(QueueMode::Fifo)) => "lm, fifo".to_string(),
            (true, _) => "lm, priority".to_string(),
        };
        out.push_str(&format!("target          {} ({mode}, seed {})\n", self.target, self.rng_seed));
        out.push_str(&format!("iterations      {}\n", self.iterations));
        out.push_str(&format!("executions      {}\n", self.executions));
        out.push_str(&format!("covered keys    {}\n", self.covered_keys));
        out.push_str(&format!("corpus          {}\n", self.corpus_size));
        out.push_str(&format!(
            "questions       asked {} / answered {} ({:.1}%)\n",
            self.questions_asked,
            self.questions_answered,
            100.0 * self.answered_ratio
        ));
        out.push_str(&format!(
            "queue           enqueued {}, duplicates {}, suppressed {}, retired {}\n",
            self.questions_enqueued, self.duplicate_questions, self.suppressed_questions, self.retired_questions
        ));
        out.push_str(&format!("crashes         {} unique\n", self.crashes.len()));
        for c in &self.crashes {
            out.push_str(&format!(
                "  {} {} in {} ({}x, first at {})\n",
                c.dedup_hash, c.category, c.function, c.count, c.first_iteration
            ));
        }
        if !self.reward_cases.is_empty() {
            out.push_str("reward cases\n");
            for (case, n) in &self.reward_cases {
                out.push_str(&format!("  {case:<16}{n}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Nothing to mutate.
    EmptyCorpus,
    NoNewCoverage,
    Saved { new_keys: usize, questions: usize },
    Crash,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerOutcome {
    Idle,
    Answered,
    Failed,
    /// The model could not be reached; the question went back unpenalized.
    Unreachable,
}

struct State {
    corpus: Corpus,
    coverage: CoverageSet,
    stats: CampaignStats,
    rng: ChaCha8Rng,
    crash_inputs: BTreeMap<String, Vec<u8>>,
    /// Initial runs whose questions are enqueued once all seeds are merged.
    pending: Vec<(Vec<u8>, ExecutionFeedback)>,
    training_keys: BTreeSet<BranchKey>,
    enqueued_keys: BTreeSet<BranchKey>,
}

pub struct Campaign {
    target: Arc<dyn TargetAdapter>,
    model: Option<Arc<dyn ModelClient>>,
    opts: CampaignOptions,
    queue: QuestionQueue,
    state: Mutex<State>,
    stop: Arc<AtomicBool>,
}

fn bump(map: &mut BTreeMap<String, u64>, key: &str) {
    *map.entry(key.to_string()).or_default() += 1;
}

impl Campaign {
    pub fn new(
        target: Arc<dyn TargetAdapter>,
        model: Option<Arc<dyn ModelClient>>,
        opts: CampaignOptions,
    ) -> Result<Campaign, CampaignError> {
        opts.validate()?;
        if opts.lm_enabled && model.is_none() {
            return Err(CampaignError::ConfigInvalid("model: required when lm_enabled is true".into()));
        }
        let stats = CampaignStats {
            target: target.name().to_string(),
            rng_seed: opts.rng_seed,
            lm_enabled: opts.lm_enabled,
            queue_mode: opts.lm_enabled.then_some(opts.queue_mode),
            prompt_mode: opts.lm_enabled.then_some(opts.prompt_mode),
            ..Default::default()
        };
        Ok(Campaign {
            queue: QuestionQueue::new(opts.queue_mode, opts.attempt_cap),
            state: Mutex::new(State {
                corpus: Corpus::new(),
                coverage: CoverageSet::new(),
                stats,
                rng: ChaCha8Rng::seed_from_u64(opts.rng_seed),
                crash_inputs: BTreeMap::new(),
                pending: Vec::new(),
                training_keys: BTreeSet::new(),
                enqueued_keys: BTreeSet::new(),
            }),
            target,
            model,
            opts,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Setting the flag ends the run after the current step.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn queue(&self) -> &QuestionQueue {
        &self.queue
    }

    /// Executes and stores starting seeds. They are kept whatever coverage
    /// they add; their questions are enqueued when the run starts.
    pub fn add_seeds(&self, seeds: &[Vec<u8>], provenance: Provenance) -> Result<(), CampaignError> {
        for seed in seeds {
            let fb = self.target.execute(seed, self.opts.time_limit)?;
            let mut st = self.lock();
            let new_keys = self.merge(&mut st, seed, &fb, 0);
            st.corpus.add(seed.clone(), provenance.clone(), new_keys);
            if fb.status.is_ok() {
                st.pending.push((seed.clone(), fb));
            }
        }
        Ok(())
    }

    /// Seeds the corpus with every answer of `train` and remembers the
    /// training branches so leaks can be counted.
    pub fn inject_training_answers(&self, train: &[DatasetRecord]) -> Result<(), CampaignError> {
        let answers: Vec<Vec<u8>> = train.iter().flat_map(|r| r.answer_seeds.iter().cloned()).collect();
        self.lock()
            .training_keys
            .extend(train.iter().map(|r| r.question.branch.desired_key()));
        self.add_seeds(&answers, Provenance::Answer)
    }

    fn prime(&self, st: &mut State) {
        for (seed, fb) in std::mem::take(&mut st.pending) {
            self.enqueue_questions(st, &seed, &fb, 0);
        }
    }

    /// Records crash/timeout bookkeeping and merges coverage. Returns the
    /// keys that were new.
    fn merge(&self, st: &mut State, input: &[u8], fb: &ExecutionFeedback, iteration: u64) -> Vec<BranchKey> {
        st.stats.executions += 1;
        match &fb.status {
            ExitStatus::Crash(info) => {
                if let Some(rec) = st.stats.crashes.iter_mut().find(|c| c.dedup_hash == info.dedup_hash) {
                    rec.count += 1;
                } else {
                    st.stats.crashes.push(CrashRecord {
                        dedup_hash: info.dedup_hash.clone(),
                        category: info.category.clone(),
                        function: info.function.clone(),
                        site: info.site.clone(),
                        first_iteration: iteration,
                        count: 1,
                    });
                    st.crash_inputs.insert(info.dedup_hash.clone(), input.to_vec());
                }
            }
            ExitStatus::Timeout => st.stats.timeouts += 1,
            ExitStatus::Ok => {}
        }
        let new_keys: Vec<BranchKey> = fb.covered_keys().filter(|k| !st.coverage.contains(k)).collect();
        if !new_keys.is_empty() {
            st.coverage.extend(new_keys.iter().cloned());
            st.stats.suppressed_questions += self.queue.suppress_covered(&st.coverage) as u64;
            let sample = CoverageSample {
                iteration,
                covered_keys: st.coverage.len(),
            };
            match st.stats.coverage_samples.last_mut() {
                Some(last) if last.iteration == iteration => *last = sample,
                _ => st.stats.coverage_samples.push(sample),
            }
        }
        new_keys
    }

    fn enqueue_questions(&self, st: &mut State, input: &[u8], fb: &ExecutionFeedback, iteration: u64) -> usize {
        if !self.opts.lm_enabled {
            return 0;
        }
        let mut inserted = 0;
        for ub in live_uncovered(fb, &st.coverage) {
            let built = build_question(
                self.target.name(),
                &ub,
                self.target.index(),
                input,
                self.opts.prompt_mode,
                self.opts.prompt_budget,
            );
            let mut q = match built {
                Ok(q) => q,
                Err(e) => {
                    log::debug!("no question for {}: {e}", ub.desired_key());
                    st.stats.slice_failures += 1;
                    continue;
                }
            };
            q.created_at = iteration;
            match self.queue.enqueue(q) {
                Enqueued::Inserted => {
                    inserted += 1;
                    st.enqueued_keys.insert(ub.desired_key());
                    st.stats.questions_enqueued += 1;
                    if st.training_keys.contains(&ub.desired_key()) {
                        st.stats.leaked_questions += 1;
                    }
                }
                Enqueued::Duplicate => st.stats.duplicate_questions += 1,
                Enqueued::Retired => {}
            }
        }
        inserted
    }

    /// Merges a run and, if it is a normal run with new coverage, saves the
    /// input and enqueues its questions.
    fn absorb(&self, st: &mut State, input: Vec<u8>, fb: &ExecutionFeedback, provenance: Provenance) -> StepOutcome {
        let iteration = st.stats.iterations;
        let new_keys = self.merge(st, &input, fb, iteration);
        match fb.status {
            ExitStatus::Crash(_) => return StepOutcome::Crash,
            ExitStatus::Timeout => return StepOutcome::Timeout,
            ExitStatus::Ok => {}
        }
        if new_keys.is_empty() {
            return StepOutcome::NoNewCoverage;
        }
        let n = new_keys.len();
        st.corpus.add(input.clone(), provenance, new_keys);
        let questions = self.enqueue_questions(st, &input, fb, iteration);
        StepOutcome::Saved { new_keys: n, questions }
    }

    /// One producer iteration: mutate, execute, keep on new coverage.
    pub fn fuzz_step(&self) -> Result<StepOutcome, TargetError> {
        let input = {
            let mut st = self.lock();
            self.prime(&mut st);
            let Some(i) = st.corpus.schedule_next() else {
                return Ok(StepOutcome::EmptyCorpus);
            };
            let n = st.corpus.len();
            let donor_idx = st.rng.random_range(0..n);
            let seed = st.corpus.get(i).data.clone();
            let donor = st.corpus.get(donor_idx).data.clone();
            st.stats.iterations += 1;
            mutate(&seed, &donor, &mut st.rng)
        };
        let fb = match self.target.execute(&input, self.opts.time_limit) {
            Ok(fb) => fb,
            Err(e) => {
                self.lock().stats.adapter_failures += 1;
                return Err(e);
            }
        };
        let mut st = self.lock();
        Ok(self.absorb(&mut st, input, &fb, Provenance::Mutation))
    }

    /// One consumer iteration: query the model about the best queued question.
    pub fn consumer_step(&self) -> ConsumerOutcome {
        let Some(model) = self.model.as_ref().filter(|_| self.opts.lm_enabled) else {
            return ConsumerOutcome::Idle;
        };
        self.prime(&mut self.lock());
        let Some(q) = self.queue.next() else {
            return ConsumerOutcome::Idle;
        };
        let desired = q.branch.desired_key();
        let prompt = prompt_for(model.as_ref(), &q.id, &q.prompt);
        let completions = match model.complete(&prompt, &self.opts.completion) {
            Ok(c) => c,
            Err(ModelError::Unreachable(e)) => {
                log::warn!("model unreachable: {e}");
                self.lock().stats.model_errors += 1;
                self.queue.restore(q);
                return ConsumerOutcome::Unreachable;
            }
            Err(e) => {
                log::warn!("model error: {e}");
                self.lock().stats.model_errors += 1;
                Vec::new()
            }
        };
        {
            let mut st = self.lock();
            st.stats.questions_asked += 1;
            *st.stats.branch_attempts.entry(desired.to_string()).or_default() += 1;
        }

        let original = self.target.execute(&q.original_input, self.opts.time_limit).ok();
        let mut answered = false;
        let mut extracted = false;
        for completion in &completions {
            let Ok(y) = extract_answer(completion) else {
                continue;
            };
            extracted = true;
            let fy = match self.target.execute(&y, self.opts.time_limit) {
                Ok(fy) => fy,
                Err(e) => {
                    log::warn!("answer execution failed: {e}");
                    self.lock().stats.adapter_failures += 1;
                    continue;
                }
            };
            let case = original
                .as_ref()
                .and_then(|fx| reward(&q.branch, fx, &fy, &q.original_input, &y).ok())
                .map(|r| r.case);
            answered |= fy.covers_key(&desired);
            let mut st = self.lock();
            if let Some(case) = case {
                bump(&mut st.stats.reward_cases, case.as_str());
            }
            self.absorb(&mut st, y, &fy, Provenance::Model(q.id.clone()));
        }

        let mut st = self.lock();
        if !extracted {
            st.stats.extraction_failures += 1;
        }
        
        if answered {
            st.stats.questions_answered += 1;
            st.stats.answered_branches.push(desired.to_string());
            ConsumerOutcome::Answered
        } else if st.coverage.contains(&desired) {
            st.stats.suppressed_questions += 1;
            ConsumerOutcome::Failed
        } else {
            if !self.queue.requeue_failed(q) && !self.queue.contains(&desired.to_string()) {
                st.stats.retired_questions += 1;
            }
            ConsumerOutcome::Failed
        }
    }

    fn budget_left(&self, started: Instant) -> bool {
        if self.stop.load(Ordering::Relaxed) {
            return false;
        }
        if let Some(limit) = self.opts.max_duration {
            if started.elapsed() >= limit {
                return false;
            }
        }
        self.opts.iterations == 0 || self.lock().stats.iterations < self.opts.iterations
    }

    /// Runs until the iteration budget, the duration cap or a stop request.
    pub fn run(&self) -> CampaignStats {
        let started = Instant::now();
        if self.opts.threaded && self.opts.lm_enabled {
            let producer_done = AtomicBool::new(false);
            std::thread::scope(|s| {
                s.spawn(|| {
                    while self.budget_left(started) {
                        let _ = self.fuzz_step();
                    }
                    producer_done.store(true, Ordering::SeqCst);
                });
                s.spawn(|| {
                    while !producer_done.load(Ordering::SeqCst) {
                        if self.consumer_step() == ConsumerOutcome::Idle {
                            std::thread::sleep(Duration::from_millis(1));
                        }
                    }
                });
            });
        } else {
            let mut steps = 0u64;
            while self.budget_left(started) {
                let _ = self.fuzz_step();
                steps += 1;
                if self.opts.lm_enabled && steps.is_multiple_of(self.opts.consumer_interval) {
                    self.consumer_step();
                }
            }
        }
        self.stats()
    }

    pub fn stats(&self) -> CampaignStats {
        let st = self.lock();
        let mut stats = st.stats.clone();
        stats.corpus_size = st.corpus.len();
        stats.covered_keys = st.coverage.len();
        stats.answered_ratio = if stats.questions_asked == 0 {
            0.0
        } else {
            stats.questions_answered as f64 / stats.questions_asked as f64
        };
        let last = stats.coverage_samples.last().copied();
        if last.is_none_or(|s| s.iteration != stats.iterations) {
            stats.coverage_samples.push(CoverageSample {
                iteration: stats.iterations,
                covered_keys: stats.covered_keys,
            });
        }
        stats
    }

    /// Desired keys of every question ever inserted into the queue.
    pub fn enqueued_keys(&self) -> BTreeSet<BranchKey> {
        self.lock().enqueued_keys.clone()
    }

    pub fn coverage(&self) -> CoverageSet {
        self.lock().coverage.clone()
    }

    pub fn corpus_entries(&self) -> Vec<CorpusEntry> {
        self.lock().corpus.entries().to_vec()
    }

    pub fn queue_dump(&self) -> QueueDump {
        self.queue.dump()
    }

    /// Writes `stats.json`, `coverage.csv`, `queue.json`, `corpus/` and
    /// `crashes/` under `dir`.
    pub fn persist(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let stats = self.stats();
        std::fs::write(dir.join("stats.json"), stats.to_json())?;
        std::fs::write(dir.join("coverage.csv"), stats.coverage_csv())?;
        let queue = serde_json::to_string_pretty(&self.queue.dump()).expect("queue serializes");
        std::fs::write(dir.join("queue.json"), queue)?;
        let st = self.lock();
        st.corpus.persist(&dir.join("corpus"))?;
        let crashes = dir.join("crashes");
        std::fs::create_dir_all(&crashes)?;
        for (hash, input) in &st.crash_inputs {
            std::fs::write(crashes.join(hash), input)?;
        }
        Ok(())
    }
}

pub fn read_stats(path: &Path) -> Result<CampaignStats, CampaignError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CampaignError::ConfigInvalid(format!("{}: {e}", path.display())))
}
