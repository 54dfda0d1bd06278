//! Static-dataset evaluation: pass@k and the call-stack ablation.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::error::EvalError;
use crate::fuzzloop::extract_answer;
use crate::modelclient::{prompt_for, CompletionParams, ModelClient};
use crate::slicer::{build_question, code_bodies, PromptMode, Question, DEFAULT_PROMPT_BUDGET};
use crate::targets::{TargetAdapter, DEFAULT_TIME_LIMIT};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub k: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub time_limit: Duration,
    /// Character budget when prompts are re-rendered for the ablation.
    pub prompt_budget: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let params = CompletionParams::default();
        EvalOptions {
            k: 5,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            time_limit: DEFAULT_TIME_LIMIT,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub target: String,
    pub branch: String,
    /// Zero-based index of the first completion whose input covered the
    /// desired branch.
    pub first_success: Option<usize>,
    pub completions: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    pub questions: usize,
    pub pass_at_1: usize,
    pub pass_at_k: usize,
    pub pass_at_1_ratio: f64,
    pub pass_at_k_ratio: f64,
}

impl TargetRow {
    fn tally<'a>(target: &str, k: usize, outcomes: impl Iterator<Item = &'a QuestionOutcome>) -> TargetRow {
        let (mut n, mut p1, mut pk) = (0, 0, 0);
        for o in outcomes {
            n += 1;
            if o.first_success == Some(0) {
                p1 += 1;
            }
            if o.first_success.is_some_and(|i| i < k) {
                pk += 1;
            }
        }
        TargetRow {
            target: target.to_string(),
            questions: n,
            pass_at_1: p1,
            pass_at_k: pk,
            pass_at_1_ratio: ratio(p1, n),
            pass_at_k_ratio: ratio(pk, n),
        }
    }
}

fn ratio(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub k: usize,
    pub total: TargetRow,
    pub per_target: Vec<TargetRow>,
    pub outcomes: Vec<QuestionOutcome>,
}

impl EvalReport {
    /// Recomputes every aggregate from the outcome log.
    pub fn from_outcomes(model: &str, k: usize, outcomes: Vec<QuestionOutcome>) -> EvalReport {
        let mut targets: BTreeMap<&str, ()> = BTreeMap::new();
        for o in &outcomes {
            targets.insert(&o.target, ());
        }
        let per_target = targets
            .keys()
            .map(|t| TargetRow::tally(t, k, outcomes.iter().filter(|o| o.target == *t)))
            .collect();
        EvalReport {
            model: model.to_string(),
            k,
            total: TargetRow::tally("total", k, outcomes.iter()),
            per_target,
            outcomes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let k = self.k;
        let mut out = format!("{:<14}{:>10}{:>18}{:>18}\n", "target", "questions", "pass@1", format!("pass@{k}"));
        let cell = |n: usize, r: f64| format!("{n} ({:.1}%)", 100.0 * r);
        for row in self.per_target.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{:<14}{:>10}{:>18}{:>18}\n",
                row.target,
                row.questions,
                cell(row.pass_at_1, row.pass_at_1_ratio),
                cell(row.pass_at_k, row.pass_at_k_ratio)
            ));
        }
        out
    }
}

fn resolve<'a>(
    targets: &'a [Arc<dyn TargetAdapter>],
    record: &DatasetRecord,
) -> Result<&'a Arc<dyn TargetAdapter>, EvalError> {
    targets
        .iter()
        .find(|t| t.name() == record.target)
        .ok_or_else(|| EvalError::UnknownTarget {
            record: record.question.id.clone(),
            target: record.target.clone(),
        })
}

fn evaluate_question(
    question: &Question,
    target: &dyn TargetAdapter,
    model: &dyn ModelClient,
    opts: &EvalOptions,
) -> QuestionOutcome {
    let desired = question.branch.desired_key();
    let mut outcome = QuestionOutcome {
        question_id: question.id.clone(),
        target: question.target.clone(),
        branch: desired.to_string(),
        first_success: None,
        completions: 0,
        error: None,
    };
    let params = CompletionParams {
        temperature: opts.temperature,
        max_tokens: opts.max_tokens,
        attempts: opts.k,
    };
    let completions = match model.complete(&prompt_for(model, &question.id, &question.prompt), &params) {
        Ok(c) => c,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    outcome.completions = completions.len().min(opts.k);
    for (i, text) in completions.iter().take(opts.k).enumerate() {
        let Ok(input) = extract_answer(text) else {
            continue;
        };
        match target.execute(&input, opts.time_limit) {
            Ok(run) if run.covers_key(&desired) => {
                outcome.first_success = Some(i);
                break;
            }
            Ok(_) => {}
            Err(e) => outcome.error = Some(e.to_string()),
        }
    }
    outcome
}

fn evaluate(
    questions: &[Question],
    targets: &[&Arc<dyn TargetAdapter>],
    model: &dyn ModelClient,
    opts: &EvalOptions,
) -> Vec<QuestionOutcome> {
    questions
        .par_iter()
        .zip(targets.par_iter())
        .map(|(q, t)| evaluate_question(q, t.as_ref(), model, opts))
        .collect()
}

/// Asks `model` for `k` completions per record; a question passes at `i`
/// when the `i`-th extracted input covers its desired branch on execution.
pub fn pass_at_k(
    records: &[DatasetRecord],
    model: &dyn ModelClient,
    targets: &[Arc<dyn TargetAdapter>],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if opts.k == 0 {
        return Err(EvalError::InvalidK);
    }
    let resolved = records.iter().map(|r| resolve(targets, r)).collect::<Result<Vec<_>, _>>()?;
    let questions: Vec<Question> = records.iter().map(|r| r.question.clone()).collect();
    let outcomes = evaluate(&questions, &resolved, model, opts);
    Ok(EvalReport::from_outcomes(model.name(), opts.k, outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target: String,
    pub questions: usize,
    pub full_trace_ratio: f64,
    pub no_trace_ratio: f64,
    /// `(no_trace - full_trace) / full_trace`; absent when the full-trace
    /// ratio is zero.
    pub relative_delta: Option<f64>,
}

impl AblationRow {
    fn new(full: &TargetRow, none: &TargetRow) -> AblationRow {
        let (f, n) = (full.pass_at_k_ratio, none.pass_at_k_ratio);
        AblationRow {
            target: full.target.clone(),
            questions: full.questions,
            full_trace_ratio: f,
            no_trace_ratio: n,
            relative_delta: (f > 0.0).then(|| (n - f) / f),
        }
    }
}

/// Prompt-shape checks over the paired questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationStructure {
    pub pairs: usize,
    /// Pairs whose no-trace prompt holds exactly the target function's body,
    /// which is also the last body of the full-trace prompt.
    pub contained: usize,
    /// Pairs where the full-trace prompt has more bodies than the no-trace one.
    pub strict: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model: String,
    pub k: usize,
    pub rows: Vec<AblationRow>,
    pub total: AblationRow,
    pub structure: AblationStructure,
    pub full_trace: EvalReport,
    pub no_trace: EvalReport,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<14}{:>10}{:>13}{:>13}{:>10}\n",
            "target", "questions", "full_trace", "no_trace", "delta"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let delta = row
                .relative_delta
                .map_or_else(|| "n/a".to_string(), |d| format!("{:+.1}%", 100.0 * d));
            out.push_str(&format!(
                "{:<14}{:>10}{:>12.1}%{:>12.1}%{:>10}\n",
                row.target,
                row.questions,
                100.0 * row.full_trace_ratio,
                100.0 * row.no_trace_ratio,
                delta
            ));
        }
        out.push_str(&format!(
            "structure: {}/{} contained, {} strict\n",
            self.structure.contained, self.structure.pairs, self.structure.strict
        ));
        out
    }
}

fn check_pair(full: &Question, none: &Question) -> Result<bool, String> {
    let fb = code_bodies(&full.prompt);
    let nb = code_bodies(&none.prompt);
    let header = format!("// function: {} ", full.branch.site.function);
    match (nb.as_slice(), fb.last()) {
        ([only], Some(last)) if only == last && only.starts_with(&header) => Ok(fb.len() > nb.len()),
        _ => Err(format!(
            "{}: no-trace bodies {} vs full-trace {}",
            full.branch.desired_key(),
            nb.len(),
            fb.len()
        )),
    }
}

/// Renders every record in both prompt modes, evaluates both with the same
/// client, and compares answer ratios (pass@k) per target.
pub fn ablation_trace(
    records: &[DatasetRecord],
    model: &dyn ModelClient,
    targets: &[Arc<dyn TargetAdapter>],
    opts: &EvalOptions,
) -> Result<AblationReport, EvalError> {
    if opts.k == 0 {
        return Err(EvalError::InvalidK);
    }
    let resolved = records.iter().map(|r| resolve(targets, r)).collect::<Result<Vec<_>, _>>()?;
    let mut full = Vec::with_capacity(records.len());
    let mut none = Vec::with_capacity(records.len());
    for (r, t) in records.iter().zip(&resolved) {
        for (mode, out) in [(PromptMode::FullTrace, &mut full), (PromptMode::NoTrace, &mut none)] {
            let mut q = build_question(
                t.name(),
                &r.question.branch,
                t.index(),
                &r.question.original_input,
                mode,
                opts.prompt_budget,
            )?;
            q.created_at = r.question.created_at;
            out.push(q);
        }
    }

    let mut structure = AblationStructure {
        pairs: records.len(),
        contained: 0,
        strict: 0,
        violations: Vec::new(),
    };
    for (f, n) in full.iter().zip(&none) {
        match check_pair(f, n) {
            Ok(strict) => {
                structure.contained += 1;
                structure.strict += usize::from(strict);
            }
            Err(v) => structure.violations.push(v),
        }
    }

    let full_report = EvalReport::from_outcomes(model.name(), opts.k, evaluate(&full, &resolved, model, opts));
    let none_report = EvalReport::from_outcomes(model.name(), opts.k, evaluate(&none, &resolved, model, opts));
    let rows = full_report
        .per_target
        .iter()
        .zip(&none_report.per_target)
        .map(|(f, n)| AblationRow::new(f, n))
        .collect();
    Ok(AblationReport {
        model: model.name().to_string(),
        k: opts.k,
        rows,
        total: AblationRow::new(&full_report.total, &none_report.total),
        structure,
        full_trace: full_report,
        no_trace: none_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{construct_dataset, DatasetOptions};
    use crate::modelclient::{OracleClient, OracleSearch, ScriptedClient};
    use crate::targets::builtin_target;
    use std::collections::HashMap;

    fn records() -> (Arc<dyn TargetAdapter>, Vec<DatasetRecord>) {
        let t = builtin_target("mini-calc").unwrap();
        let seeds: Vec<Vec<u8>> = ["1+2;", "let x=1;print x;", "if 1 then print 2 end;", "print 6/2;", "while 0 do 1; end;"]
            .iter()
            .map(|s| s.as_bytes().to_vec())
            .collect();
        let recs = construct_dataset(t.as_ref(), &seeds, &DatasetOptions::default()).unwrap();
        (t, recs)
    }

    #[test]
    fn scripted_half_right_first_try() {
        let (t, recs) = records();
        let recs: Vec<_> = recs.into_iter().take(10).collect();
        assert_eq!(recs.len(), 10);
        let mut script = HashMap::new();
        for r in &recs[..5] {
            script.insert(r.question.id.clone(), vec![r.answer_seeds[0].clone()]);
        }
        let client = ScriptedClient::new(script);
        let report = pass_at_k(&recs, &client, &[t], &EvalOptions::default()).unwrap();
        assert_eq!(report.total.pass_at_1, 5);
        assert_eq!(report.total.pass_at_1_ratio, 0.5);
        assert_eq!(report.total.pass_at_k, 5);
        assert_eq!(EvalReport::from_outcomes(&report.model, report.k, report.outcomes.clone()), report);
    }

    #[test]
    fn oracle_answers_everything() {
        let (t, recs) = records();
        let oracle = OracleClient::new(t.clone(), OracleSearch::for_target("mini-calc", 50_000));
        let report = pass_at_k(&recs, &oracle, &[t], &EvalOptions { k: 1, ..Default::default() }).unwrap();
        assert_eq!(report.total.pass_at_1, recs.len(), "{}", report.render_table());
    }

    #[test]
    fn bad_k_and_unknown_target() {
        let (t, recs) = records();
        let client = ScriptedClient::new(HashMap::new());
        let zero = EvalOptions { k: 0, ..Default::default() };
        assert!(matches!(pass_at_k(&recs, &client, &[t], &zero), Err(EvalError::InvalidK)));
        let other = builtin_target("mini-json").unwrap();
        assert!(matches!(
            pass_at_k(&recs, &client, &[other], &EvalOptions::default()),
            Err(EvalError::UnknownTarget { .. })
        ));
    }

    #[test]
    fn ablation_deltas() {
        let (t, recs) = records();
        let targets = [t.clone()];
        let opts = EvalOptions { k: 1, ..Default::default() };
        let mut script = HashMap::new();
        for r in &recs {
            script.insert(r.question.id.clone(), vec![r.answer_seeds[0].clone()]);
        }
        let only_full = ScriptedClient::new(script);
        let report = ablation_trace(&recs, &only_full, &targets, &opts).unwrap();
        assert!(report.structure.violations.is_empty());
        assert_eq!(report.structure.contained, recs.len());
        assert!(report.total.relative_delta.unwrap() < 0.0);
        assert_eq!(report.total.no_trace_ratio, 0.0);

        let oracle = OracleClient::new(t, OracleSearch::for_target("mini-calc", 50_000));
        let report = ablation_trace(&recs, &oracle, &targets, &opts).unwrap();
        assert_eq!(report.total.relative_delta, Some(0.0));
        assert!(report.render_table().contains("mini-calc"));
    }
}
