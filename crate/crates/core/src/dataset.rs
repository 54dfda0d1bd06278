//! Question datasets built from a seed corpus.
//!
//! Every sampled seed is executed once. Each branch seen in only one
//! direction becomes a question; with answerability filtering on, only
//! branches whose desired direction some other sampled seed reaches are
//! kept, and those seeds are stored as ground-truth answers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{BranchKey, BranchSite, CoverageSet, ExecutionFeedback, UncoveredBranch};
use crate::error::{DatasetError, SliceError};
use crate::slicer::{build_question, question_id, PromptMode, Question, DEFAULT_PROMPT_BUDGET};
use crate::targets::{TargetAdapter, DEFAULT_TIME_LIMIT};

/// Default number of seeds sampled from a corpus.
pub const DEFAULT_CAP: usize = 1000;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub question: Question,
    pub target: String,
    /// Sampled seeds that cover the desired direction.
    pub answer_seeds: Vec<Vec<u8>>,
    /// Hash of the seed the question was harvested from.
    pub provenance: String,
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub cap: usize,
    pub filter_answerable: bool,
    pub mode: PromptMode,
    pub rng_seed: u64,
    pub prompt_budget: usize,
    pub time_limit: Duration,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            cap: DEFAULT_CAP,
            filter_answerable: true,
            mode: PromptMode::FullTrace,
            rng_seed: 0,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            time_limit: DEFAULT_TIME_LIMIT,
        }
    }
}

pub fn seed_id(seed: &[u8]) -> String {
    crate::stable_hash(&[&crate::b64_encode(seed)])
}

/// Picks at most `cap` seeds, keeping corpus order.
pub fn sample_seeds(seeds: &[Vec<u8>], cap: usize, rng_seed: u64) -> Vec<Vec<u8>> {
    if seeds.len() <= cap {
        return seeds.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = index::sample(&mut rng, seeds.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| seeds[i].clone()).collect()
}

pub fn construct_dataset(
    target: &dyn TargetAdapter,
    seeds: &[Vec<u8>],
    opts: &DatasetOptions,
) -> Result<Vec<DatasetRecord>, DatasetError> {
    if seeds.is_empty() {
        return Err(DatasetError::NoSeeds);
    }
    if opts.cap == 0 {
        return Err(DatasetError::InvalidCap);
    }
    let sampled = sample_seeds(seeds, opts.cap, opts.rng_seed);
    let runs: Vec<ExecutionFeedback> = sampled
        .par_iter()
        .map(|s| target.execute(s, opts.time_limit))
        .collect::<Result<_, _>>()?;

    // Single merge point, in corpus order.
    let mut coverage = CoverageSet::new();
    let mut branches: BTreeMap<BranchKey, (usize, UncoveredBranch)> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        crate::coverage::merge_coverage(&mut coverage, run);
        for ub in &run.uncovered {
            branches.entry(ub.desired_key()).or_insert_with(|| (i, ub.clone()));
        }
    }

    let mut records = Vec::new();
    for (desired, (origin, ub)) in branches {
        if opts.filter_answerable && !coverage.contains(&desired) {
            continue;
        }
        let answers: Vec<Vec<u8>> = runs
            .iter()
            .zip(&sampled)
            .filter(|(run, _)| run.covers_key(&desired))
            .map(|(_, s)| s.clone())
            .collect();
        let seed = &sampled[origin];
        let mut question = match build_question(target.name(), &ub, target.index(), seed, opts.mode, opts.prompt_budget) {
            Ok(q) => q,
            Err(e @ SliceError::TargetFunctionMissing(_)) => {
                log::warn!("skipping {desired}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        question.created_at = records.len() as u64;
        records.push(DatasetRecord {
            question,
            target: target.name().to_string(),
            answer_seeds: answers,
            provenance: seed_id(seed),
        });
    }
    if records.is_empty() {
        return Err(DatasetError::NoQuestions { seeds: sampled.len() });
    }
    Ok(records)
}

/// Seeded shuffle, then the first `floor(ratio * n)` records train.
pub fn split_dataset(
    records: &[DatasetRecord],
    ratio: f64,
    rng_seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    // The epsilon keeps 0.9 * 100 from landing on 89.999...
    let n_train = ((ratio * shuffled.len() as f64) + 1e-9).floor() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    target: String,
    mode: PromptMode,
    branch: BranchRecord,
    prompt: String,
    original_input_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original_input_text: Option<String>,
    answer_seeds_b64: Vec<String>,
    provenance: String,
    #[serde(default)]
    queried_count: u32,
    #[serde(default)]
    created_at: u64,
}

/// Wire form of an [`UncoveredBranch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub file: String,
    pub line: u32,
    pub column: u32,
    pub function: String,
    pub condition: String,
    pub observed: bool,
    pub desired: bool,
    pub stack: Vec<String>,
    /// Defaults to the stack depth when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_prefix: Option<usize>,
}

impl BranchRecord {
    pub fn from_branch(b: &UncoveredBranch) -> Self {
        BranchRecord {
            file: b.site.file.clone(),
            line: b.site.line,
            column: b.site.column,
            function: b.site.function.clone(),
            condition: b.site.condition_text.clone(),
            observed: b.observed,
            desired: b.desired,
            stack: b.call_stack.clone(),
            trace_prefix: Some(b.trace_prefix),
        }
    }

    pub fn to_branch(&self) -> Result<UncoveredBranch, String> {
        if self.observed == self.desired {
            return Err("branch.desired must negate branch.observed".into());
        }
        let site = Arc::new(BranchSite {
            file: self.file.clone(),
            line: self.line,
            column: self.column,
            condition_text: self.condition.clone(),
            function: self.function.clone(),
        });
        let prefix = self.trace_prefix.unwrap_or(self.stack.len());
        let branch = UncoveredBranch::new(site, self.observed, self.stack.clone(), prefix);
        branch.check().map_err(|e| e.to_string())?;
        Ok(branch)
    }
}

impl From<&DatasetRecord> for RecordLine {
    fn from(r: &DatasetRecord) -> Self {
        let q = &r.question;
        RecordLine {
            id: q.id.clone(),
            target: r.target.clone(),
            mode: q.mode,
            branch: BranchRecord::from_branch(&q.branch),
            prompt: q.prompt.clone(),
            original_input_b64: crate::b64_encode(&q.original_input),
            original_input_text: String::from_utf8(q.original_input.clone()).ok(),
            answer_seeds_b64: r.answer_seeds.iter().map(|s| crate::b64_encode(s)).collect(),
            provenance: r.provenance.clone(),
            queried_count: q.queried_count,
            created_at: q.created_at,
        }
    }
}

impl RecordLine {
    fn into_record(self) -> Result<DatasetRecord, String> {
        let decode = |s: &str| crate::b64_decode(s).map_err(|e| format!("bad base64: {e}"));
        let branch = self.branch.to_branch()?;
        let original_input = decode(&self.original_input_b64)?;
        if let Some(text) = &self.original_input_text {
            if text.as_bytes() != original_input {
                return Err("original_input_text disagrees with original_input_b64".into());
            }
        }
        if self.id != question_id(&self.target, &branch, self.mode) {
            return Err(format!("id `{}` does not match the branch and mode", self.id));
        }
        let answer_seeds = self.answer_seeds_b64.iter().map(|s| decode(s)).collect::<Result<_, _>>()?;
        Ok(DatasetRecord {
            question: Question {
                id: self.id,
                target: self.target.clone(),
                branch,
                prompt: self.prompt,
                original_input,
                mode: self.mode,
                queried_count: self.queried_count,
                created_at: self.created_at,
            },
            target: self.target,
            answer_seeds,
            provenance: self.provenance,
        })
    }
}

pub fn to_json_line(record: &DatasetRecord) -> String {
    serde_json::to_string(&RecordLine::from(record)).expect("record serializes")
}

pub fn write_records(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        out.write_all(to_json_line(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mismatch = |reason: String| DatasetError::SchemaMismatch {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| mismatch(e.to_string()))?;
        records.push(parsed.into_record().map_err(mismatch)?);
    }
    Ok(records)
}

/// Checks the dataset invariants: unique (branch, mode) and, optionally,
/// that every answer seed covers its desired key on re-execution.
pub fn verify_records(
    records: &[DatasetRecord],
    target: &dyn TargetAdapter,
    time_limit: Duration,
    require_answers: bool,
) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for r in records {
        let desired = r.question.branch.desired_key();
        if !seen.insert((desired.clone(), r.question.mode)) {
            return Err(format!("duplicate question for {desired} ({})", r.question.mode));
        }
        if require_answers && r.answer_seeds.is_empty() {
            return Err(format!("{desired}: no answer seeds"));
        }
        for seed in &r.answer_seeds {
            let run = target.execute(seed, time_limit).map_err(|e| e.to_string())?;
            if !run.covers_key(&desired) {
                return Err(format!("{desired}: answer seed {:?} misses it", crate::b64_encode(seed)));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::builtin_target;

    fn calc_seeds() -> Vec<Vec<u8>> {
        ["1+2;", "let x=1;print x;", "if 1 then print 2 end;"]
            .iter()
            .map(|s| s.as_bytes().to_vec())
            .collect()
    }

    #[test]
    fn filtered_records_have_verified_answers() {
        let t = builtin_target("mini-calc").unwrap();
        let records = construct_dataset(t.as_ref(), &calc_seeds(), &DatasetOptions::default()).unwrap();
        assert!(!records.is_empty());
        verify_records(&records, t.as_ref(), DEFAULT_TIME_LIMIT, true).unwrap();
        for r in &records {
            assert!(calc_seeds().iter().any(|s| seed_id(s) == r.provenance));
        }
    }

    #[test]
    fn filter_only_removes() {
        let t = builtin_target("mini-calc").unwrap();
        let on = construct_dataset(t.as_ref(), &calc_seeds(), &DatasetOptions::default()).unwrap();
        let off_opts = DatasetOptions {
            filter_answerable: false,
            ..Default::default()
        };
        let off = construct_dataset(t.as_ref(), &calc_seeds(), &off_opts).unwrap();
        assert!(off.len() >= on.len());
        let off_ids: BTreeSet<_> = off.iter().map(|r| &r.question.id).collect();
        assert!(on.iter().all(|r| off_ids.contains(&r.question.id)));
        verify_records(&off, t.as_ref(), DEFAULT_TIME_LIMIT, false).unwrap();
    }

    #[test]
    fn single_seed_gives_no_questions() {
        let t = builtin_target("mini-calc").unwrap();
        let r = construct_dataset(t.as_ref(), &calc_seeds()[..1], &DatasetOptions::default());
        assert!(matches!(r, Err(DatasetError::NoQuestions { seeds: 1 })));
        assert!(matches!(
            construct_dataset(t.as_ref(), &[], &DatasetOptions::default()),
            Err(DatasetError::NoSeeds)
        ));
    }

    #[test]
    fn sampling_respects_cap_and_seed() {
        let seeds: Vec<Vec<u8>> = (0..50).map(|i| format!("{i};").into_bytes()).collect();
        let a = sample_seeds(&seeds, 10, 7);
        assert_eq!(a.len(), 10);
        assert_eq!(a, sample_seeds(&seeds, 10, 7));
        assert_ne!(a, sample_seeds(&seeds, 10, 8));
    }

    fn fake_records(n: usize) -> Vec<DatasetRecord> {
        let t = builtin_target("mini-calc").unwrap();
        let base = construct_dataset(t.as_ref(), &calc_seeds(), &DatasetOptions::default()).unwrap();
        (0..n)
            .map(|i| {
                let mut r = base[i % base.len()].clone();
                r.provenance = format!("p{i}");
                r
            })
            .collect()
    }

    #[test]
    fn split_ratios() {
        let records = fake_records(100);
        let (train, test) = split_dataset(&records, 0.9, 1).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        let (a, b) = split_dataset(&records[..3], 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 2));
        assert_eq!(split_dataset(&records, 0.9, 1).unwrap().0, train);
        let mut all: Vec<_> = train.iter().chain(&test).map(|r| r.provenance.clone()).collect();
        all.sort();
        let mut orig: Vec<_> = records.iter().map(|r| r.provenance.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        for bad in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(split_dataset(&records, bad, 1).is_err());
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut records = fake_records(3);
        records[0].answer_seeds.push(vec![0xff, 0x00, 0xfe]);
        records[1].question.original_input = vec![0x80, b'1'];
        records[1].question.id = question_id(&records[1].target, &records[1].question.branch, records[1].question.mode);
        write_records(&records, &path).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);

        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replacen('\n', "\n{not json\n", 1);
        std::fs::write(&path, broken).unwrap();
        match read_records(&path) {
            Err(DatasetError::SchemaMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
