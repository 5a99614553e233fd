//! Evaluation: decode answers for QA examples, score them against the
//! oracles, measure hint accuracy, and assemble per-task reports with
//! analytic baselines and consistency predictions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AttributePools, PersonRecord};
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::{generate_scored, LoraAdapter, ParameterSet};
use crate::rng::{stream, Domain};
use crate::tasks::{baseline_accuracy, hint_text, HintMarker, QaExample, TaskSpec};
use crate::tokenizer::Vocab;

pub const DEFAULT_BEAM_WIDTH: usize = 4;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;
/// Per-task cap on scored examples (seeded subsample above this).
pub const DEFAULT_EVAL_CAP: usize = 2000;

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

/// Anything that maps a prompt to generated answer tokens (EOS stripped).
pub trait Decoder {
    fn decode_response(&mut self, prompt: &[u32]) -> Result<Vec<u32>>;
}

/// Beam-search decoding against a trained model, optionally through a LoRA
/// adapter.
pub struct ModelDecoder<'a, F: Scalar> {
    pub params: &'a ParameterSet<F>,
    pub adapter: Option<&'a LoraAdapter<F>>,
    pub beam_width: usize,
    pub max_new_tokens: usize,
}

impl<'a, F: Scalar> ModelDecoder<'a, F> {
    pub fn new(params: &'a ParameterSet<F>, adapter: Option<&'a LoraAdapter<F>>) -> Self {
        ModelDecoder {
            params,
            adapter,
            beam_width: DEFAULT_BEAM_WIDTH,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl<F: Scalar> Decoder for ModelDecoder<'_, F> {
    fn decode_response(&mut self, prompt: &[u32]) -> Result<Vec<u32>> {
        let (tokens, _) = generate_scored(
            self.params,
            self.adapter,
            prompt,
            self.beam_width,
            self.max_new_tokens,
        )?;
        Ok(tokens)
    }
}

/// Closure-backed decoder, mainly for stubs in tests.
pub struct FnDecoder<F: FnMut(&[u32]) -> Result<Vec<u32>>>(pub F);

impl<F: FnMut(&[u32]) -> Result<Vec<u32>>> Decoder for FnDecoder<F> {
    fn decode_response(&mut self, prompt: &[u32]) -> Result<Vec<u32>> {
        (self.0)(prompt)
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Collapse whitespace runs and trim.
fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized answer surface: whitespace collapsed, at most one trailing
/// period removed (attribute values never contain periods).
fn canonical(s: &str) -> String {
    let n = normalize(s);
    match n.strip_suffix('.') {
        Some(rest) => rest.trim_end().to_string(),
        None => n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreOutcome {
    pub correct: bool,
    /// Whether the generated hint segment stated the true attribute value(s);
    /// None when the example was presented without a hint marker (or the task
    /// takes no hints).
    pub hint_correct: Option<bool>,
    /// Per-slot verdicts for dual-retrieval tasks.
    pub dual_slots: Option<[bool; 2]>,
}

fn find_record(records: &[PersonRecord], id: u32) -> Result<&PersonRecord> {
    if let Some(p) = records.get(id as usize) {
        if p.person_id == id {
            return Ok(p);
        }
    }
    records
        .iter()
        .find(|p| p.person_id == id)
        .ok_or_else(|| Error::Eval(format!("no person record with id {id}")))
}

fn subject_records<'a>(
    example: &QaExample,
    records: &'a [PersonRecord],
) -> Result<Vec<&'a PersonRecord>> {
    example.subjects.iter().map(|&id| find_record(records, id)).collect()
}

/// True iff `name` (canonical form) identifies any person whose attributes
/// match the subject on every constrained attribute. Defined by a brute-force
/// scan over all records, so non-unique inverse answers are accepted.
fn inverse_name_is_valid(
    task: TaskSpec,
    subject: &PersonRecord,
    records: &[PersonRecord],
    name: &str,
) -> bool {
    let TaskSpec::Inverse { scope, target } = task else {
        return false;
    };
    let constraints = scope.constraints();
    records
        .iter()
        .filter(|p| {
            constraints
                .iter()
                .all(|&k| p.attribute_value(k) == subject.attribute_value(k))
        })
        .any(|p| {
            let candidate = match target {
                crate::tasks::NameTarget::First => p.first.clone(),
                crate::tasks::NameTarget::Full => p.full_name(),
            };
            normalize(&candidate) == name
        })
}

/// Score one generated completion. `presented` is the hint-mode marker the
/// prompt actually carried (for as-emitted evaluation this is the example's
/// own marker). Pure function of its arguments; malformed output scores
/// incorrect rather than erroring.
pub fn score_example(
    generated: &str,
    example: &QaExample,
    presented: HintMarker,
    records: &[PersonRecord],
) -> Result<ScoreOutcome> {
    let subjects = subject_records(example, records)?;
    let expected_hint = match presented {
        HintMarker::Hint => hint_text(example.task, &subjects).unwrap_or(None),
        HintMarker::NoHint => None,
    };

    // Split the completion into (hint segment, answer segment) following the
    // emission grammar: hints end at the first period, the answer fills the
    // rest. Attribute values never contain periods.
    let (hint_correct, answer_part) = match &expected_hint {
        Some(expect) => match generated.split_once('.') {
            Some((hint_seg, rest)) => {
                (Some(normalize(hint_seg) == normalize(expect)), canonical(rest))
            }
            None => (Some(false), String::new()),
        },
        None => (None, canonical(generated)),
    };

    let expected_answer = normalize(&example.answer);
    let mut dual_slots = None;
    let correct = match example.task {
        TaskSpec::Inverse { .. } => {
            inverse_name_is_valid(example.task, subjects[0], records, &answer_part)
        }
        TaskSpec::Dual(..) => {
            let (ex0, ex1) = expected_answer
                .split_once("; ")
                .ok_or_else(|| Error::Eval(format!("malformed dual answer {expected_answer}")))?;
            let (g0, g1) = answer_part.split_once("; ").unwrap_or((answer_part.as_str(), ""));
            dual_slots = Some([normalize(g0) == normalize(ex0), normalize(g1) == normalize(ex1)]);
            answer_part == expected_answer
        }
        _ => answer_part == expected_answer,
    };
    Ok(ScoreOutcome { correct, hint_correct, dual_slots })
}

// ---------------------------------------------------------------------------
// Consistency prediction
// ---------------------------------------------------------------------------

/// Predicted accuracy when a correct hint chain yields a correct answer and a
/// broken chain falls back to guessing: one hint gives h + (1-h)g; two
/// independent hints give h^2 + (1-h^2)g.
pub fn consistency_prediction(hint_acc: f64, guess_rate: f64, chain_length: usize) -> f64 {
    assert!(
        (0.0..=1.0).contains(&hint_acc) && (0.0..=1.0).contains(&guess_rate),
        "accuracies must lie in [0, 1]"
    );
    let chain_ok = match chain_length {
        1 => hint_acc,
        2 => hint_acc * hint_acc,
        _ => panic!("chain length must be 1 or 2, got {chain_length}"),
    };
    chain_ok + (1.0 - chain_ok) * guess_rate
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Force the hint marker onto every prompt (errors on hint-free tasks).
    WithHint,
    /// Force the no-hint marker onto every prompt.
    WithoutHint,
    /// Present each example with the marker it was emitted with.
    AsEmitted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub mode: EvalMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskSpec,
    pub n_examples: usize,
    pub n_with_hint: usize,
    pub n_without_hint: usize,
    pub test_acc: f64,
    pub test_acc_with_hint: Option<f64>,
    pub test_acc_without_hint: Option<f64>,
    pub hint_acc: Option<f64>,
    pub baseline: f64,
    /// Hint-consistency model applied to (hint_acc, baseline): what accuracy
    /// the measured hint quality predicts. Emitted next to the measured
    /// accuracy so the gap is inspectable.
    pub consistency_prediction: Option<f64>,
    /// Per-slot accuracies for dual-retrieval tasks (headline metric stays
    /// all-or-nothing).
    pub dual_slot_acc: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode: DecodeSettings,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: TaskSpec) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }

    /// One row per task; blank cells for metrics a task does not have.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "task,n,test_acc,acc_with_hint,acc_without_hint,hint_acc,baseline,\
             consistency_prediction,dual_slot0_acc,dual_slot1_acc\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.tasks {
            let slots = t.dual_slot_acc.unwrap_or([f64::NAN, f64::NAN]);
            let slot = |i: usize| {
                if slots[i].is_nan() { String::new() } else { slots[i].to_string() }
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                t.task.name(),
                t.n_examples,
                t.test_acc,
                opt(t.test_acc_with_hint),
                opt(t.test_acc_without_hint),
                opt(t.hint_acc),
                t.baseline,
                opt(t.consistency_prediction),
                slot(0),
                slot(1),
            ));
        }
        out
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn mean(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Decode and score a set of examples (possibly spanning several tasks),
/// producing one report row per task. Greater-than-`cap` task groups are
/// subsampled with a per-task seeded stream so reports stay affordable and
/// reproducible.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    decoder: &mut dyn Decoder,
    vocab: &Vocab,
    examples: &[QaExample],
    records: &[PersonRecord],
    pools: &AttributePools,
    mode: EvalMode,
    settings: DecodeSettings,
    cap: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    // Group by task, preserving first-appearance order.
    let mut order: Vec<TaskSpec> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let key = ex.task.name();
        if !groups.contains_key(&key) {
            order.push(ex.task);
        }
        groups.entry(key).or_default().push(i);
    }

    let mut tasks = Vec::with_capacity(order.len());
    for task in order {
        if mode == EvalMode::WithHint && !task.supports_hint() {
            return Err(Error::Eval(format!(
                "with_hint evaluation requested but task {} takes no hints",
                task.name()
            )));
        }
        let mut idx = groups.remove(&task.name()).expect("grouped above");
        if let Some(cap) = cap {
            if cap == 0 {
                return Err(Error::Eval("evaluation cap must be positive".into()));
            }
            if idx.len() > cap {
                let digest = crate::sha256_hex(task.name().as_bytes());
                let tag = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
                let mut rng = stream(seed, Domain::Eval, &[tag]);
                let mut chosen = rand::seq::index::sample(&mut rng, idx.len(), cap).into_vec();
                chosen.sort_unstable();
                idx = chosen.into_iter().map(|c| idx[c]).collect();
            }
        }

        let mut correct: Vec<bool> = Vec::with_capacity(idx.len());
        let mut hinted: Vec<bool> = Vec::new(); // answer verdicts, hinted prompts
        let mut unhinted: Vec<bool> = Vec::new();
        let mut hint_ok: Vec<bool> = Vec::new();
        let mut slot_ok = [Vec::new(), Vec::new()];
        for &i in &idx {
            let ex = &examples[i];
            let marker = match mode {
                EvalMode::WithHint => HintMarker::Hint,
                EvalMode::WithoutHint => HintMarker::NoHint,
                EvalMode::AsEmitted => ex.hint_mode_marker,
            };
            let prompt = ex.prompt_tokens(vocab, marker)?;
            let generated = decoder.decode_response(&prompt)?;
            // Undecodable output scores incorrect, never errors.
            let text = vocab.decode(&generated).unwrap_or_default();
            let outcome = score_example(&text, ex, marker, records)?;
            correct.push(outcome.correct);
            match outcome.hint_correct {
                Some(h) => {
                    hinted.push(outcome.correct);
                    hint_ok.push(h);
                }
                None => unhinted.push(outcome.correct),
            }
            if let Some(slots) = outcome.dual_slots {
                slot_ok[0].push(slots[0]);
                slot_ok[1].push(slots[1]);
            }
        }

        let baseline = baseline_accuracy(task, pools);
        let hint_acc = (!hint_ok.is_empty()).then(|| mean(&hint_ok));
        let consistency = hint_acc.map(|h| consistency_prediction(h, baseline, task.arity()));
        tasks.push(TaskReport {
            task,
            n_examples: idx.len(),
            n_with_hint: hinted.len(),
            n_without_hint: unhinted.len(),
            test_acc: mean(&correct),
            test_acc_with_hint: (!hinted.is_empty()).then(|| mean(&hinted)),
            test_acc_without_hint: (!unhinted.is_empty()).then(|| mean(&unhinted)),
            hint_acc,
            baseline,
            consistency_prediction: consistency,
            dual_slot_acc: (!slot_ok[0].is_empty())
                .then(|| [mean(&slot_ok[0]), mean(&slot_ok[1])]),
        });
    }
    Ok(EvalReport { decode: DecodeSettings { mode, ..settings }, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{sample_persons, AttrKind};
    use crate::tasks::{
        generate_examples, CompareAttr, InverseScope, NameTarget, PartialAttr, Split,
    };
    use crate::tokenizer::AtomizationPolicy;
    use rand::Rng;

    fn settings(mode: EvalMode) -> DecodeSettings {
        DecodeSettings { beam_width: 4, max_new_tokens: 24, mode }
    }

    #[test]
    fn consistency_formula_matches_documented_arithmetic() {
        // One-hint chain: 91.0% hints, 50% guessing -> 95.5%.
        let p = consistency_prediction(0.910, 0.50, 1);
        assert!((p - 0.955).abs() < 5e-4, "{p}");
        assert!((p - (0.910 + (1.0 - 0.910) * 0.50)).abs() < 1e-12);

        // Two-hint chain: 78.1% each, 8.3% guessing -> 64.2%.
        let p = consistency_prediction(0.781, 0.083, 2);
        assert!((p - 0.642).abs() < 5e-4, "{p}");
        let exact = 0.781f64 * 0.781 + (1.0 - 0.781 * 0.781) * 0.083;
        assert!((p - exact).abs() < 1e-12);

        // Perfect hints predict perfect accuracy for either chain length.
        for chain in [1, 2] {
            assert_eq!(consistency_prediction(1.0, 0.2, chain), 1.0);
        }
        // Useless hints predict the guess rate.
        for chain in [1, 2] {
            assert!((consistency_prediction(0.0, 0.2, chain) - 0.2).abs() < 1e-12);
        }
        // Monotone in hint accuracy.
        let mut prev = 0.0;
        for i in 0..=10 {
            let p = consistency_prediction(i as f64 / 10.0, 0.083, 2);
            assert!(p >= prev);
            prev = p;
        }
    }

    fn population(n: u32, seed: u64) -> (Vec<PersonRecord>, AttributePools) {
        let pools = AttributePools::builtin();
        let records = sample_persons(&pools, n, seed).unwrap();
        (records, pools)
    }

    #[test]
    fn exact_match_scoring_with_normalization() {
        let (records, pools) = population(8, 5);
        let ex = &generate_examples(
            TaskSpec::Extract(AttrKind::Bdate),
            &records,
            &pools,
            &[0, 1, 2],
            Split::Test,
            0.0,
            None,
            3,
        )
        .unwrap()[0];
        let answer = ex.answer.clone();
        let ok = |text: &str| {
            score_example(text, ex, HintMarker::NoHint, &records).unwrap().correct
        };
        assert!(ok(&format!("{answer}.")));
        assert!(ok(&answer), "bare answer without trailing period accepted");
        assert!(ok(&format!("  {}  ", answer.replace(' ', "  "))), "whitespace collapsed");
        assert!(!ok("October 99, 1850."));
        assert!(!ok(""));
        assert!(!ok(&format!("{answer}. extra trailing words")));
        let out = score_example(&format!("{answer}."), ex, HintMarker::NoHint, &records).unwrap();
        assert_eq!(out.hint_correct, None);
        assert_eq!(out.dual_slots, None);
    }

    #[test]
    fn hint_segment_scored_separately_from_answer() {
        let (records, pools) = population(8, 6);
        let task = TaskSpec::ClassifyBirthMonth { modulus: 2 };
        let ex = &generate_examples(
            task, &records, &pools, &[0, 1, 2], Split::Test, 1.0, None, 4,
        )
        .unwrap()[0];
        let subject = &records[ex.subjects[0] as usize];
        let true_hint = subject.month_name();
        let wrong_hint = if true_hint == "March" { "April" } else { "March" };
        let answer = ex.answer.clone();
        let score = |text: &str| score_example(text, ex, HintMarker::Hint, &records).unwrap();

        let good = score(&format!("{true_hint}. {answer}."));
        assert!(good.correct && good.hint_correct == Some(true));

        // Wrong hint but right answer: answer still counts, hint does not.
        let mixed = score(&format!("{wrong_hint}. {answer}."));
        assert!(mixed.correct && mixed.hint_correct == Some(false));

        // Right hint, wrong answer.
        let wrong_answer = if answer == "Yes" { "No" } else { "Yes" };
        let bad = score(&format!("{true_hint}. {wrong_answer}."));
        assert!(!bad.correct && bad.hint_correct == Some(true));

        // Bare answer with no hint segment: both fail under the grammar.
        let bare = score(&format!("{answer}."));
        assert!(!bare.correct && bare.hint_correct == Some(false));

        // Same text presented without the hint marker is a plain answer.
        let plain = score_example(&format!("{answer}."), ex, HintMarker::NoHint, &records).unwrap();
        assert!(plain.correct && plain.hint_correct.is_none());
    }

    #[test]
    fn dual_retrieval_order_is_enforced() {
        let (records, pools) = population(8, 7);
        let ex = &generate_examples(
            TaskSpec::Dual(AttrKind::Univ, AttrKind::Major),
            &records,
            &pools,
            &[0, 1],
            Split::Test,
            0.0,
            None,
            5,
        )
        .unwrap()[0];
        let subject = &records[ex.subjects[0] as usize];
        let (univ, major) = (subject.university.clone(), subject.major.clone());
        assert_eq!(ex.answer, format!("{univ}; {major}"));
        let score = |text: &str| score_example(text, ex, HintMarker::NoHint, &records).unwrap();

        let good = score(&format!("{univ}; {major}."));
        assert!(good.correct);
        assert_eq!(good.dual_slots, Some([true, true]));

        // Halves swapped: incorrect, and per-slot sees both mismatches.
        let swapped = score(&format!("{major}; {univ}."));
        assert!(!swapped.correct);
        assert_eq!(swapped.dual_slots, Some([false, false]));

        // First slot right, second wrong.
        let half = score(&format!("{univ}; Basketweaving."));
        assert!(!half.correct);
        assert_eq!(half.dual_slots, Some([true, false]));

        // Missing separator: first slot cannot match the full answer.
        let fused = score(&format!("{univ} {major}."));
        assert!(!fused.correct);
        assert_eq!(fused.dual_slots, Some([false, false]));
    }

    #[test]
    fn inverse_accepts_any_person_matching_the_constraints() {
        let (mut records, pools) = population(12, 8);
        // Forge a second person sharing person 0's birth date but nothing
        // else, and a third sharing everything (full six-attribute twin).
        records[1].birth_month = records[0].birth_month;
        records[1].birth_day = records[0].birth_day;
        records[1].birth_year = records[0].birth_year;
        records[2] = PersonRecord {
            person_id: 2,
            first: "Zelda".into(),
            middle: "Quinn".into(),
            last: "Harrow".into(),
            ..records[0].clone()
        };
        let task = TaskSpec::Inverse { scope: InverseScope::Bdate, target: NameTarget::Full };
        let ex = &generate_examples(
            task, &records, &pools, &[0], Split::Test, 0.0, None, 6,
        )
        .unwrap()[0];
        let score = |text: &str| score_example(text, ex, HintMarker::NoHint, &records).unwrap();

        assert!(score(&format!("{}.", records[0].full_name())).correct);
        // A different person with the same birth date is a valid answer.
        assert!(score(&format!("{}.", records[1].full_name())).correct);
        assert!(score("Zelda Quinn Harrow.").correct);
        // A person with a different birth date is not.
        assert!(!score(&format!("{}.", records[4].full_name())).correct);
        assert!(!score("Nobody Q Invented.").correct);

        // Under the all-attribute scope only the exact twin qualifies.
        let strict = TaskSpec::Inverse { scope: InverseScope::All, target: NameTarget::Full };
        let ex_all = &generate_examples(
            strict, &records, &pools, &[0], Split::Test, 0.0, None, 6,
        )
        .unwrap()[0];
        let s = |text: &str| score_example(text, ex_all, HintMarker::NoHint, &records).unwrap();
        assert!(s(&format!("{}.", records[0].full_name())).correct);
        assert!(s("Zelda Quinn Harrow.").correct);
        assert!(!s(&format!("{}.", records[1].full_name())).correct);
    }

    /// An index over constraint-value tuples must agree with the brute-force
    /// scan on every verdict.
    #[test]
    fn inverse_index_cross_check() {
        let (records, pools) = population(300, 9);
        let mut rng = stream(10, Domain::Eval, &[99]);
        let mut checked = 0usize;
        for scope in [
            InverseScope::Bdate,
            InverseScope::Birth,
            InverseScope::Three,
            InverseScope::Four,
            InverseScope::All,
        ] {
            let task = TaskSpec::Inverse { scope, target: NameTarget::Full };
            // Index: constraint tuple -> full names.
            let mut index: HashMap<Vec<String>, Vec<String>> = HashMap::new();
            for p in &records {
                let key: Vec<String> =
                    scope.constraints().iter().map(|&k| p.attribute_value(k)).collect();
                index.entry(key).or_default().push(p.full_name());
            }
            let ids: Vec<u32> = (0..records.len() as u32).collect();
            let examples = generate_examples(
                task, &records, &pools, &ids, Split::Test, 0.0, Some(200), 11,
            )
            .unwrap();
            for ex in &examples {
                let subject = &records[ex.subjects[0] as usize];
                // Candidate: half the time a random person's name, half the
                // time the subject's own.
                let candidate = if rng.gen_bool(0.5) {
                    records[rng.gen_range(0..records.len())].full_name()
                } else {
                    subject.full_name()
                };
                let key: Vec<String> =
                    scope.constraints().iter().map(|&k| subject.attribute_value(k)).collect();
                let via_index =
                    index.get(&key).map(|names| names.contains(&candidate)).unwrap_or(false);
                let via_scan = score_example(
                    &format!("{candidate}."),
                    ex,
                    HintMarker::NoHint,
                    &records,
                )
                .unwrap()
                .correct;
                assert_eq!(via_index, via_scan, "scope {scope:?} candidate {candidate}");
                checked += 1;
            }
        }
        assert!(checked >= 1000, "cross-checked only {checked} verdicts");
    }

    fn vocab_for(examples: &[QaExample], extra: &[&str]) -> Vocab {
        let mut lines: Vec<String> = Vec::new();
        for ex in examples {
            lines.push(ex.question.clone());
            lines.push(ex.target_text());
            if let Some(h) = &ex.hint {
                lines.push(format!("{h}. {}.", ex.answer));
            }
        }
        for e in extra {
            lines.push(e.to_string());
        }
        Vocab::build(
            lines.iter().map(|s| s.as_str()),
            std::iter::empty(),
            AtomizationPolicy::default(),
        )
    }

    /// A stub that answers every prompt perfectly must score 1.0 across the
    /// board, and the baseline column must pass through the analytic values.
    #[test]
    fn perfect_oracle_stub_scores_one_everywhere() {
        let (records, pools) = population(40, 12);
        let ids: Vec<u32> = (0..40).collect();
        let tasks: Vec<(TaskSpec, f64, Option<usize>)> = vec![
            (TaskSpec::Extract(AttrKind::Bdate), 0.0, None),
            (TaskSpec::Partial(PartialAttr::Byear), 1.0, None),
            (TaskSpec::Dual(AttrKind::Ccity, AttrKind::Cname), 0.0, None),
            (TaskSpec::Rank(CompareAttr::Major), 1.0, Some(30)),
            (TaskSpec::ClassifyLuckiness { modulus: 20 }, 1.0, None),
            (
                TaskSpec::Inverse { scope: InverseScope::Birth, target: NameTarget::First },
                0.0,
                None,
            ),
        ];
        let mut examples = Vec::new();
        for &(task, hint_p, count) in &tasks {
            examples.extend(
                generate_examples(
                    task, &records, &pools, &ids, Split::Test, hint_p, count, 13,
                )
                .unwrap(),
            );
        }
        let vocab = vocab_for(&examples, &[]);
        // Map each as-emitted prompt to its exact target tokens.
        let mut answers: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for ex in &examples {
            let prompt = ex.prompt_tokens(&vocab, ex.hint_mode_marker).unwrap();
            answers.insert(prompt, vocab.encode(&ex.target_text()).unwrap());
        }
        let mut stub = FnDecoder(|prompt: &[u32]| {
            Ok(answers.get(prompt).cloned().unwrap_or_default())
        });
        let report = evaluate(
            &mut stub,
            &vocab,
            &examples,
            &records,
            &pools,
            EvalMode::AsEmitted,
            settings(EvalMode::AsEmitted),
            None,
            14,
        )
        .unwrap();
        assert_eq!(report.tasks.len(), tasks.len());
        for t in &report.tasks {
            assert_eq!(t.test_acc, 1.0, "task {}", t.task.name());
            assert!(
                (t.baseline - baseline_accuracy(t.task, &pools)).abs() < 1e-15,
                "baseline passthrough for {}",
                t.task.name()
            );
            assert_eq!(t.n_with_hint + t.n_without_hint, t.n_examples);
        }
        // Hinted tasks also report perfect hints and a prediction of... 1.0.
        let rank = report.task(TaskSpec::Rank(CompareAttr::Major)).unwrap();
        assert_eq!(rank.hint_acc, Some(1.0));
        assert_eq!(rank.consistency_prediction, Some(1.0));
        assert_eq!(rank.n_examples, 30);
        // Dual per-slot accuracies come out perfect too.
        let dual = report.task(TaskSpec::Dual(AttrKind::Ccity, AttrKind::Cname)).unwrap();
        assert_eq!(dual.dual_slot_acc, Some([1.0, 1.0]));
        // Hint-free tasks report no hint metrics.
        let ext = report.task(TaskSpec::Extract(AttrKind::Bdate)).unwrap();
        assert_eq!(ext.hint_acc, None);
        assert_eq!(ext.consistency_prediction, None);

        // CSV has one row per task plus a header.
        let csv = report.to_csv_string();
        assert_eq!(csv.lines().count(), 1 + tasks.len());
        assert!(csv.lines().nth(1).unwrap().starts_with("extract.bdate,40,1,"));
    }

    /// Random guessing on the even-month task lands within 3 sigma of the
    /// analytic 0.5 baseline.
    #[test]
    fn random_stub_matches_analytic_baseline() {
        let n = 2000u32;
        let (records, pools) = population(n, 15);
        let ids: Vec<u32> = (0..n).collect();
        let task = TaskSpec::ClassifyBirthMonth { modulus: 2 };
        let examples = generate_examples(
            task, &records, &pools, &ids, Split::Test, 0.0, None, 16,
        )
        .unwrap();
        let vocab = vocab_for(&examples, &["Yes.", "No."]);
        let yes = vocab.encode("Yes.").unwrap();
        let no = vocab.encode("No.").unwrap();
        let mut rng = stream(17, Domain::Eval, &[1]);
        let mut stub = FnDecoder(move |_: &[u32]| {
            Ok(if rng.gen_bool(0.5) { yes.clone() } else { no.clone() })
        });
        let report = evaluate(
            &mut stub,
            &vocab,
            &examples,
            &records,
            &pools,
            EvalMode::WithoutHint,
            settings(EvalMode::WithoutHint),
            None,
            18,
        )
        .unwrap();
        let t = &report.tasks[0];
        assert_eq!(t.n_examples, n as usize);
        let sigma = (0.25 / n as f64).sqrt();
        assert!(
            (t.test_acc - 0.5).abs() < 3.0 * sigma,
            "acc {} vs baseline 0.5 (3 sigma = {})",
            t.test_acc,
            3.0 * sigma
        );
        assert_eq!(t.baseline, 0.5);
        assert_eq!(t.hint_acc, None);
    }

    #[test]
    fn subsampling_caps_and_stays_deterministic() {
        let (records, pools) = population(60, 19);
        let ids: Vec<u32> = (0..60).collect();
        let task = TaskSpec::Extract(AttrKind::Univ);
        let examples = generate_examples(
            task, &records, &pools, &ids, Split::Test, 0.0, None, 20,
        )
        .unwrap();
        let vocab = vocab_for(&examples, &[]);
        let run = |seed: u64| {
            let mut seen: Vec<Vec<u32>> = Vec::new();
            let mut stub = FnDecoder(|prompt: &[u32]| {
                seen.push(prompt.to_vec());
                Ok(vec![])
            });
            let report = evaluate(
                &mut stub,
                &vocab,
                &examples,
                &records,
                &pools,
                EvalMode::WithoutHint,
                settings(EvalMode::WithoutHint),
                Some(10),
                seed,
            )
            .unwrap();
            let _ = stub;
            (report.tasks[0].n_examples, seen)
        };
        let (n1, seen1) = run(7);
        let (n2, seen2) = run(7);
        let (_, seen3) = run(8);
        assert_eq!(n1, 10);
        assert_eq!(n2, 10);
        assert_eq!(seen1, seen2, "same seed, same subsample");
        assert_ne!(seen1, seen3, "different seed draws a different subsample");

        // Empty generations score 0, not an error; undecodable ids likewise.
        let mut broken = FnDecoder(|_: &[u32]| Ok(vec![9_999_999]));
        let report = evaluate(
            &mut broken,
            &vocab,
            &examples,
            &records,
            &pools,
            EvalMode::WithoutHint,
            settings(EvalMode::WithoutHint),
            Some(5),
            7,
        )
        .unwrap();
        assert_eq!(report.tasks[0].test_acc, 0.0);

        // Forcing hints onto a hint-free task is refused.
        let mut stub = FnDecoder(|_: &[u32]| Ok(vec![]));
        let err = evaluate(
            &mut stub,
            &vocab,
            &examples,
            &records,
            &pools,
            EvalMode::WithHint,
            settings(EvalMode::WithHint),
            None,
            7,
        );
        assert!(matches!(err, Err(Error::Eval(_))));
    }

    /// End-to-end through a real (untrained) model: decoding works, the
    /// report is well-formed, and nothing panics.
    #[test]
    fn model_decoder_smoke() {
        let (records, pools) = population(6, 21);
        let task = TaskSpec::Extract(AttrKind::Major);
        let examples = generate_examples(
            task, &records, &pools, &[0, 1, 2, 3, 4, 5], Split::Test, 0.0, None, 22,
        )
        .unwrap();
        let vocab = vocab_for(&examples, &[]);
        let config = crate::model::ModelConfig {
            context_window: 64,
            ..crate::model::ModelConfig::new(1, 2, 16, vocab.len())
        };
        let params = crate::model::init_params::<f32>(config, 23).unwrap();
        let mut decoder = ModelDecoder {
            params: &params,
            adapter: None,
            beam_width: 2,
            max_new_tokens: 6,
        };
        let report = evaluate(
            &mut decoder,
            &vocab,
            &examples,
            &records,
            &pools,
            EvalMode::WithoutHint,
            DecodeSettings { beam_width: 2, max_new_tokens: 6, mode: EvalMode::WithoutHint },
            None,
            24,
        )
        .unwrap();
        let t = &report.tasks[0];
        assert_eq!(t.n_examples, 6);
        assert!((0.0..=1.0).contains(&t.test_acc));
        // JSON round-trips.
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tasks[0].n_examples, 6);
        assert_eq!(back.decode.beam_width, 2);
    }
}
