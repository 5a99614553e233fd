//! QA task families over the biography corpus: extraction, partial and dual
//! retrieval, classification, comparison (rank/subtract), and inverse search,
//! with canonical answers, optional hints, person splits, and analytic
//! baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrKind, AttributePools, PersonRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tokenizer::{Vocab, HINT_MARKER, NOHINT_MARKER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialAttr {
    Bday,
    Byear,
}

/// Attributes that comparison tasks rank or subtract. "Major" compares the
/// majors' luckiness scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareAttr {
    BirthMonth,
    BirthDay,
    Major,
}

impl CompareAttr {
    pub fn key(self) -> &'static str {
        match self {
            CompareAttr::BirthMonth => "birthmonth",
            CompareAttr::BirthDay => "birthday",
            CompareAttr::Major => "major",
        }
    }

    /// Number of distinct values the compared quantity ranges over.
    pub fn cardinality(self) -> u32 {
        match self {
            CompareAttr::BirthMonth => 12,
            CompareAttr::BirthDay => 28,
            CompareAttr::Major => 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseScope {
    /// Constrained by the birth date alone.
    Bdate,
    /// Birth date and birth city.
    Birth,
    /// Major, university, company name.
    Three,
    /// Major, university, birth city, company name.
    Four,
    /// All six attributes.
    All,
}

impl InverseScope {
    pub fn key(self) -> &'static str {
        match self {
            InverseScope::Bdate => "bdate",
            InverseScope::Birth => "birth",
            InverseScope::Three => "three",
            InverseScope::Four => "four",
            InverseScope::All => "all",
        }
    }

    /// The attributes a matching person must share with the subject.
    pub fn constraints(self) -> &'static [AttrKind] {
        match self {
            InverseScope::Bdate => &[AttrKind::Bdate],
            InverseScope::Birth => &[AttrKind::Bdate, AttrKind::Bcity],
            InverseScope::Three => &[AttrKind::Major, AttrKind::Univ, AttrKind::Cname],
            InverseScope::Four => {
                &[AttrKind::Major, AttrKind::Univ, AttrKind::Bcity, AttrKind::Cname]
            }
            InverseScope::All => &[
                AttrKind::Major,
                AttrKind::Univ,
                AttrKind::Bdate,
                AttrKind::Bcity,
                AttrKind::Cname,
                AttrKind::Ccity,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameTarget {
    First,
    Full,
}

impl NameTarget {
    pub fn key(self) -> &'static str {
        match self {
            NameTarget::First => "first",
            NameTarget::Full => "full",
        }
    }
}

/// One task in the grid. The grid consists of 6 extraction tasks, 2 partial
/// retrievals, 6 ordered dual retrievals, 6 classifications, 3 rankings,
/// 3 subtractions, and 10 inverse searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskSpec {
    Extract(AttrKind),
    Partial(PartialAttr),
    Dual(AttrKind, AttrKind),
    ClassifyBirthMonth { modulus: u8 },
    ClassifyLuckiness { modulus: u8 },
    Rank(CompareAttr),
    Subtract(CompareAttr),
    Inverse { scope: InverseScope, target: NameTarget },
}

/// The six ordered dual-retrieval pairs.
pub const DUAL_PAIRS: [(AttrKind, AttrKind); 6] = [
    (AttrKind::Bcity, AttrKind::Cname),
    (AttrKind::Cname, AttrKind::Bcity),
    (AttrKind::Univ, AttrKind::Major),
    (AttrKind::Major, AttrKind::Univ),
    (AttrKind::Ccity, AttrKind::Cname),
    (AttrKind::Cname, AttrKind::Ccity),
];

impl TaskSpec {
    /// Every task in the grid, in a stable order.
    pub fn full_grid() -> Vec<TaskSpec> {
        let mut grid = Vec::with_capacity(36);
        grid.extend(AttrKind::ALL.into_iter().map(TaskSpec::Extract));
        grid.push(TaskSpec::Partial(PartialAttr::Bday));
        grid.push(TaskSpec::Partial(PartialAttr::Byear));
        grid.extend(DUAL_PAIRS.into_iter().map(|(a, b)| TaskSpec::Dual(a, b)));
        for modulus in [2, 6, 12] {
            grid.push(TaskSpec::ClassifyBirthMonth { modulus });
        }
        for modulus in [5, 20, 100] {
            grid.push(TaskSpec::ClassifyLuckiness { modulus });
        }
        for attr in [CompareAttr::BirthMonth, CompareAttr::BirthDay, CompareAttr::Major] {
            grid.push(TaskSpec::Rank(attr));
        }
        for attr in [CompareAttr::BirthMonth, CompareAttr::BirthDay, CompareAttr::Major] {
            grid.push(TaskSpec::Subtract(attr));
        }
        for scope in [
            InverseScope::Bdate,
            InverseScope::Birth,
            InverseScope::Three,
            InverseScope::Four,
            InverseScope::All,
        ] {
            for target in [NameTarget::First, NameTarget::Full] {
                grid.push(TaskSpec::Inverse { scope, target });
            }
        }
        grid
    }

    /// Number of subject persons per example.
    pub fn arity(self) -> usize {
        match self {
            TaskSpec::Rank(_) | TaskSpec::Subtract(_) => 2,
            _ => 1,
        }
    }

    /// Whether a chain-of-thought hint is defined for this task. Hints state
    /// the attribute value(s) the answer depends on, so tasks whose answer IS
    /// the attribute value (extraction, dual, inverse) have none.
    pub fn supports_hint(self) -> bool {
        matches!(
            self,
            TaskSpec::Partial(_)
                | TaskSpec::ClassifyBirthMonth { .. }
                | TaskSpec::ClassifyLuckiness { .. }
                | TaskSpec::Rank(_)
                | TaskSpec::Subtract(_)
        )
    }

    pub fn name(self) -> String {
        match self {
            TaskSpec::Extract(kind) => format!("extract.{}", kind.key()),
            TaskSpec::Partial(PartialAttr::Bday) => "partial.bday".into(),
            TaskSpec::Partial(PartialAttr::Byear) => "partial.byear".into(),
            TaskSpec::Dual(a, b) => format!("dual.{}_{}", a.key(), b.key()),
            TaskSpec::ClassifyBirthMonth { modulus } => format!("classify.birthmonth%{modulus}"),
            TaskSpec::ClassifyLuckiness { modulus } => format!("classify.luckiness%{modulus}"),
            TaskSpec::Rank(attr) => format!("rank.{}", attr.key()),
            TaskSpec::Subtract(attr) => format!("subtract.{}", attr.key()),
            TaskSpec::Inverse { scope, target } => {
                format!("inverse.{}.to.{}", scope.key(), target.key())
            }
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskSpec> {
        let task = TaskSpec::full_grid()
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))?;
        Ok(task)
    }
}

impl Serialize for TaskSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<TaskSpec, D::Error> {
        let s = String::deserialize(deserializer)?;
        TaskSpec::from_str(&s).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Person splits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersonSplit {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

impl PersonSplit {
    pub fn side(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }
}

/// Partition person ids into equal halves. For odd N the last id joins the
/// train side.
pub fn split_persons(n: u32, seed: u64) -> PersonSplit {
    let mut ids: Vec<u32> = (0..n).collect();
    let odd = n % 2 == 1;
    if odd {
        ids.pop();
    }
    let mut rng = stream(seed, Domain::Split, &[n as u64]);
    ids.shuffle(&mut rng);
    let half = ids.len() / 2;
    let mut train_ids: Vec<u32> = ids[..half].to_vec();
    let mut test_ids: Vec<u32> = ids[half..].to_vec();
    if odd {
        train_ids.push(n - 1);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    PersonSplit { train_ids, test_ids }
}

// ---------------------------------------------------------------------------
// Questions, hints, answers
// ---------------------------------------------------------------------------

fn records_for_arity<'a>(task: TaskSpec, records: &[&'a PersonRecord]) -> Result<&'a PersonRecord> {
    if records.len() != task.arity() {
        return Err(Error::Config(format!(
            "task {task} expects {} subject(s), got {}",
            task.arity(),
            records.len()
        )));
    }
    Ok(records[0])
}

/// The fixed question phrasing for a task instance.
pub fn question_text(task: TaskSpec, records: &[&PersonRecord]) -> Result<String> {
    let a = records_for_arity(task, records)?;
    let name = a.full_name();
    Ok(match task {
        TaskSpec::Extract(AttrKind::Bdate) => format!("What is the birth date of {name}?"),
        TaskSpec::Extract(AttrKind::Bcity) => format!("What is the birth city of {name}?"),
        TaskSpec::Extract(AttrKind::Univ) => format!("Which university did {name} attend?"),
        TaskSpec::Extract(AttrKind::Major) => format!("What major did {name} study?"),
        TaskSpec::Extract(AttrKind::Cname) => format!("Which company did {name} work for?"),
        TaskSpec::Extract(AttrKind::Ccity) => format!("In which city did {name} work?"),
        TaskSpec::Partial(PartialAttr::Bday) => format!("What is the birth day of {name}?"),
        TaskSpec::Partial(PartialAttr::Byear) => format!("What is the birth year of {name}?"),
        TaskSpec::Dual(AttrKind::Bcity, AttrKind::Cname) => {
            format!("Where was {name} born and which company did this person work for?")
        }
        TaskSpec::Dual(AttrKind::Cname, AttrKind::Bcity) => {
            format!("Which company did {name} work for and where was this person born?")
        }
        TaskSpec::Dual(AttrKind::Univ, AttrKind::Major) => {
            format!("Which university and what major did {name} study?")
        }
        TaskSpec::Dual(AttrKind::Major, AttrKind::Univ) => {
            format!("What major and which university did {name} study?")
        }
        TaskSpec::Dual(AttrKind::Ccity, AttrKind::Cname) => {
            format!("Where and which company did {name} work for?")
        }
        TaskSpec::Dual(AttrKind::Cname, AttrKind::Ccity) => {
            format!("Which company and where did {name} work for?")
        }
        TaskSpec::Dual(x, y) => {
            return Err(Error::Config(format!("dual pair {x}/{y} is not in the grid")))
        }
        TaskSpec::ClassifyBirthMonth { modulus: 2 } => {
            format!("Was {name} born in an even month?")
        }
        TaskSpec::ClassifyBirthMonth { modulus: 12 } => {
            format!("What is {name}'s birth month in numerics?")
        }
        TaskSpec::ClassifyBirthMonth { modulus } => {
            format!("What is {name}'s birth month mod {modulus}?")
        }
        TaskSpec::ClassifyLuckiness { modulus } => {
            format!("What is the luckiness of {name}'s major modulo {modulus}?")
        }
        TaskSpec::Rank(attr) => {
            let b = records[1].full_name();
            match attr {
                CompareAttr::BirthMonth => {
                    format!("Was {name} born in a month later than {b}?")
                }
                CompareAttr::BirthDay => {
                    format!("Was {name} born on a day of the month later than {b}?")
                }
                CompareAttr::Major => format!("Did {name} major in a field luckier than {b}?"),
            }
        }
        TaskSpec::Subtract(attr) => {
            let b = records[1].full_name();
            match attr {
                CompareAttr::BirthMonth => {
                    format!("What is {name}'s birth month minus {b}'s birth month?")
                }
                CompareAttr::BirthDay => {
                    format!("What is {name}'s birth day minus {b}'s birth day?")
                }
                CompareAttr::Major => {
                    format!("How luckier is {name}'s major compared with {b}'s major?")
                }
            }
        }
        TaskSpec::Inverse { scope, target } => {
            let t = target.key();
            match scope {
                InverseScope::Bdate => format!(
                    "Give me the {t} name of the person born on {}?",
                    a.birth_date_text()
                ),
                InverseScope::Birth => format!(
                    "Give me the {t} name of the person born on {} in {}?",
                    a.birth_date_text(),
                    a.birth_city
                ),
                InverseScope::Three => format!(
                    "Give me the {t} name of the person who studied {} at {} and worked for {}?",
                    a.major, a.university, a.company
                ),
                InverseScope::Four => format!(
                    "Give me the {t} name of the person who studied {} at {}, was born in {}, \
                     and worked for {}?",
                    a.major, a.university, a.birth_city, a.company
                ),
                InverseScope::All => format!(
                    "Give me the {t} name of the person who studied {} at {}, was born on {} \
                     in {}, and worked for {} at {}?",
                    a.major, a.university, a.birth_date_text(), a.birth_city, a.company,
                    a.company_city
                ),
            }
        }
    })
}

/// The hint statement (without trailing period): the attribute value(s) the
/// answer is computed from, joined by "; " for two-person tasks.
pub fn hint_text(task: TaskSpec, records: &[&PersonRecord]) -> Result<Option<String>> {
    let a = records_for_arity(task, records)?;
    Ok(match task {
        TaskSpec::Partial(_) => Some(a.birth_date_text()),
        TaskSpec::ClassifyBirthMonth { .. } => Some(a.month_name().to_string()),
        TaskSpec::ClassifyLuckiness { .. } => Some(a.major.clone()),
        TaskSpec::Rank(attr) | TaskSpec::Subtract(attr) => {
            let b = records[1];
            Some(match attr {
                CompareAttr::BirthMonth => format!("{}; {}", a.month_name(), b.month_name()),
                CompareAttr::BirthDay => format!("{}; {}", a.birth_day, b.birth_day),
                CompareAttr::Major => format!("{}; {}", a.major, b.major),
            })
        }
        _ => None,
    })
}

fn comparison_value(attr: CompareAttr, record: &PersonRecord, pools: &AttributePools) -> Result<i32> {
    Ok(match attr {
        CompareAttr::BirthMonth => record.birth_month as i32,
        CompareAttr::BirthDay => record.birth_day as i32,
        CompareAttr::Major => pools.luckiness(&record.major)? as i32,
    })
}

/// Canonical answer (without trailing period), computed directly from the
/// subject records.
pub fn oracle_answer(
    task: TaskSpec,
    records: &[&PersonRecord],
    pools: &AttributePools,
) -> Result<String> {
    let a = records_for_arity(task, records)?;
    Ok(match task {
        TaskSpec::Extract(kind) => a.attribute_value(kind),
        TaskSpec::Partial(PartialAttr::Bday) => a.birth_day.to_string(),
        TaskSpec::Partial(PartialAttr::Byear) => a.birth_year.to_string(),
        TaskSpec::Dual(x, y) => {
            format!("{}; {}", a.attribute_value(x), a.attribute_value(y))
        }
        TaskSpec::ClassifyBirthMonth { modulus: 2 } => {
            if a.birth_month % 2 == 0 { "Yes".into() } else { "No".into() }
        }
        TaskSpec::ClassifyBirthMonth { modulus: 12 } => a.birth_month.to_string(),
        TaskSpec::ClassifyBirthMonth { modulus } => (a.birth_month % modulus).to_string(),
        TaskSpec::ClassifyLuckiness { modulus } => {
            (pools.luckiness(&a.major)? % modulus).to_string()
        }
        TaskSpec::Rank(attr) => {
            let va = comparison_value(attr, a, pools)?;
            let vb = comparison_value(attr, records[1], pools)?;
            if va > vb { "Yes".into() } else { "No".into() }
        }
        TaskSpec::Subtract(attr) => {
            let va = comparison_value(attr, a, pools)?;
            let vb = comparison_value(attr, records[1], pools)?;
            (va - vb).to_string()
        }
        TaskSpec::Inverse { target, .. } => match target {
            NameTarget::First => a.first.clone(),
            NameTarget::Full => a.full_name(),
        },
    })
}

// ---------------------------------------------------------------------------
// Example generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HintMarker {
    #[serde(rename = "<hint>")]
    Hint,
    #[serde(rename = "<nohint>")]
    NoHint,
}

impl HintMarker {
    pub fn token_id(self) -> u32 {
        match self {
            HintMarker::Hint => HINT_MARKER,
            HintMarker::NoHint => NOHINT_MARKER,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QaExample {
    #[serde(rename = "task_id")]
    pub task: TaskSpec,
    pub subjects: Vec<u32>,
    pub question: String,
    pub hint: Option<String>,
    pub answer: String,
    pub split: Split,
    pub hint_mode_marker: HintMarker,
}

impl QaExample {
    /// The text the model is trained to produce after the question and
    /// marker: "<hint>. <answer>." or "<answer>.".
    pub fn target_text(&self) -> String {
        match &self.hint {
            Some(h) => format!("{h}. {}.", self.answer),
            None => format!("{}.", self.answer),
        }
    }

    /// Full training token sequence: question, hint-mode marker, target.
    pub fn tokens(&self, vocab: &Vocab) -> Result<Vec<u32>> {
        let mut ids = vocab.encode(&self.question)?;
        ids.push(self.hint_mode_marker.token_id());
        ids.extend(vocab.encode(&self.target_text())?);
        Ok(ids)
    }

    /// Prompt tokens for evaluation: question plus the requested marker.
    pub fn prompt_tokens(&self, vocab: &Vocab, marker: HintMarker) -> Result<Vec<u32>> {
        let mut ids = vocab.encode(&self.question)?;
        ids.push(marker.token_id());
        Ok(ids)
    }
}

fn task_stream(seed: u64, task: TaskSpec, salt: u64) -> rand_chacha::ChaCha8Rng {
    let digest = crate::sha256_hex(task.name().as_bytes());
    let tag = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    stream(seed, Domain::Tasks, &[tag, salt])
}

/// Generate QA examples for one task over one split side.
///
/// Single-subject tasks enumerate `ids` in order when `count` is None, or
/// draw that many distinct subjects otherwise. Two-subject tasks require a
/// count and draw ordered pairs uniformly (no self-pairs, duplicates across
/// examples allowed). Hints are attached per example with probability
/// `hint_probability`.
pub fn make_examples(
    task: TaskSpec,
    records: &[PersonRecord],
    ids: &[u32],
    split: Split,
    hint_probability: f64,
    count: Option<usize>,
    seed: u64,
) -> Result<Vec<QaExample>> {
    if ids.is_empty() {
        return Err(Error::Config(format!("task {task}: empty split side")));
    }
    if !(0.0..=1.0).contains(&hint_probability) {
        return Err(Error::Config(format!(
            "hint_probability {hint_probability} outside [0, 1]"
        )));
    }
    if hint_probability > 0.0 && !task.supports_hint() {
        return Err(Error::Config(format!("task {task} does not define hints")));
    }
    let record_of = |id: u32| -> Result<&PersonRecord> {
        records
            .get(id as usize)
            .filter(|r| r.person_id == id)
            .ok_or_else(|| Error::Config(format!("person id {id} not in records table")))
    };

    let mut rng = task_stream(seed, task, match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let subject_sets: Vec<Vec<u32>> = match task.arity() {
        1 => match count {
            None => ids.iter().map(|&id| vec![id]).collect(),
            Some(c) if c <= ids.len() => {
                let mut pool = ids.to_vec();
                pool.shuffle(&mut rng);
                pool.truncate(c);
                pool.into_iter().map(|id| vec![id]).collect()
            }
            Some(c) => {
                return Err(Error::Config(format!(
                    "task {task}: requested {c} distinct subjects from {}",
                    ids.len()
                )))
            }
        },
        2 => {
            let c = count.ok_or_else(|| {
                Error::Config(format!("task {task}: pair tasks need an example count"))
            })?;
            if ids.len() < 2 {
                return Err(Error::Config(format!(
                    "task {task}: need at least two persons for ordered pairs"
                )));
            }
            (0..c)
                .map(|_| {
                    let a = ids[rng.gen_range(0..ids.len())];
                    loop {
                        let b = ids[rng.gen_range(0..ids.len())];
                        if b != a {
                            return vec![a, b];
                        }
                    }
                })
                .collect()
        }
        other => return Err(Error::Config(format!("unsupported arity {other}"))),
    };

    let mut out = Vec::with_capacity(subject_sets.len());
    for subjects in subject_sets {
        let recs: Vec<&PersonRecord> =
            subjects.iter().map(|&id| record_of(id)).collect::<Result<_>>()?;
        let with_hint = hint_probability > 0.0 && rng.gen_bool(hint_probability);
        let hint = if with_hint { hint_text(task, &recs)? } else { None };
        let example = QaExample {
            task,
            subjects: subjects.clone(),
            question: question_text(task, &recs)?,
            hint,
            answer: String::new(), // filled below via the oracle
            split,
            hint_mode_marker: if with_hint { HintMarker::Hint } else { HintMarker::NoHint },
        };
        out.push(example);
    }
    Ok(out)
}

/// Fill in canonical answers via the oracle. Separated from example layout so
/// tests can verify the closure property (answers always equal the oracle).
pub fn with_oracle_answers(
    mut examples: Vec<QaExample>,
    records: &[PersonRecord],
    pools: &AttributePools,
) -> Result<Vec<QaExample>> {
    for ex in &mut examples {
        let recs: Vec<&PersonRecord> = ex
            .subjects
            .iter()
            .map(|&id| {
                records
                    .get(id as usize)
                    .filter(|r| r.person_id == id)
                    .ok_or_else(|| Error::Config(format!("person id {id} not in records table")))
            })
            .collect::<Result<_>>()?;
        ex.answer = oracle_answer(ex.task, &recs, pools)?;
    }
    Ok(examples)
}

/// Convenience: layout plus oracle answers in one call.
#[allow(clippy::too_many_arguments)]
pub fn generate_examples(
    task: TaskSpec,
    records: &[PersonRecord],
    pools: &AttributePools,
    ids: &[u32],
    split: Split,
    hint_probability: f64,
    count: Option<usize>,
    seed: u64,
) -> Result<Vec<QaExample>> {
    let examples = make_examples(task, records, ids, split, hint_probability, count, seed)?;
    with_oracle_answers(examples, records, pools)
}

// ---------------------------------------------------------------------------
// Analytic baselines
// ---------------------------------------------------------------------------

/// Majority-class / uniform-guess accuracy for a task, in closed form.
pub fn baseline_accuracy(task: TaskSpec, pools: &AttributePools) -> f64 {
    let attr_baseline = |kind: AttrKind| -> f64 {
        match kind {
            AttrKind::Bdate => 1.0 / (pools.birth_years.len() as f64 * 12.0 * 28.0),
            AttrKind::Bcity => 1.0 / pools.birth_cities.len() as f64,
            AttrKind::Univ => 1.0 / pools.universities.len() as f64,
            AttrKind::Major => 1.0 / pools.majors.len() as f64,
            AttrKind::Cname => 1.0 / pools.companies.len() as f64,
            // Majority class: always guess the dominant headquarters city.
            AttrKind::Ccity => {
                let dominant = pools.dominant_city();
                let share = pools
                    .companies
                    .iter()
                    .filter(|c| Some(c.hq_city.as_str()) == dominant)
                    .count();
                share.max(1) as f64 / pools.companies.len() as f64
            }
        }
    };
    match task {
        TaskSpec::Extract(kind) => attr_baseline(kind),
        TaskSpec::Partial(PartialAttr::Bday) => 1.0 / 28.0,
        TaskSpec::Partial(PartialAttr::Byear) => 1.0 / pools.birth_years.len() as f64,
        TaskSpec::Dual(a, b) => {
            // Company city is determined by company name, so guessing the
            // pair jointly succeeds with the company-name probability.
            let pair = [a, b];
            if pair.contains(&AttrKind::Cname) && pair.contains(&AttrKind::Ccity) {
                attr_baseline(AttrKind::Cname)
            } else {
                attr_baseline(a) * attr_baseline(b)
            }
        }
        TaskSpec::ClassifyBirthMonth { modulus: 2 } => 0.5,
        TaskSpec::ClassifyBirthMonth { modulus } => 1.0 / modulus as f64,
        TaskSpec::ClassifyLuckiness { modulus } => 1.0 / modulus as f64,
        // Always answer "No": correct unless strictly greater, i.e. with
        // probability (1 + 1/d) / 2 over uniform ordered pairs.
        TaskSpec::Rank(attr) => {
            let d = attr.cardinality() as f64;
            (1.0 + 1.0 / d) / 2.0
        }
        // Always answer 0: correct with probability 1/d.
        TaskSpec::Subtract(attr) => 1.0 / attr.cardinality() as f64,
        TaskSpec::Inverse { target, .. } => match target {
            NameTarget::First => 1.0 / pools.first_names.len() as f64,
            NameTarget::Full => {
                1.0 / (pools.first_names.len() as f64
                    * pools.middle_names.len() as f64
                    * pools.last_names.len() as f64)
            }
        },
    }
}

/// Brute-force enumeration of the baseline over the full attribute product;
/// must equal [`baseline_accuracy`] exactly for classify/rank/subtract.
pub fn baseline_by_enumeration(task: TaskSpec, pools: &AttributePools) -> Option<f64> {
    let values: Vec<i64> = match task {
        TaskSpec::ClassifyBirthMonth { .. } | TaskSpec::Rank(CompareAttr::BirthMonth)
        | TaskSpec::Subtract(CompareAttr::BirthMonth) => (1..=12).collect(),
        TaskSpec::Rank(CompareAttr::BirthDay) | TaskSpec::Subtract(CompareAttr::BirthDay) => {
            (1..=28).collect()
        }
        TaskSpec::ClassifyLuckiness { .. }
        | TaskSpec::Rank(CompareAttr::Major)
        | TaskSpec::Subtract(CompareAttr::Major) => {
            (0..pools.majors.len() as i64).collect()
        }
        _ => return None,
    };
    let n = values.len() as f64;
    Some(match task {
        TaskSpec::ClassifyBirthMonth { modulus } | TaskSpec::ClassifyLuckiness { modulus } => {
            // Majority residue class frequency.
            let mut counts = std::collections::HashMap::new();
            for &v in &values {
                *counts.entry(v.rem_euclid(modulus as i64)).or_insert(0usize) += 1;
            }
            *counts.values().max().expect("nonempty") as f64 / n
        }
        TaskSpec::Rank(_) => {
            // Count ordered pairs where "No" is correct (not strictly greater).
            let mut no = 0usize;
            for &a in &values {
                for &b in &values {
                    if a <= b {
                        no += 1;
                    }
                }
            }
            no as f64 / (n * n)
        }
        TaskSpec::Subtract(_) => {
            // Count ordered pairs whose difference is the modal difference 0.
            let mut zero = 0usize;
            for &a in &values {
                for &b in &values {
                    if a == b {
                        zero += 1;
                    }
                }
            }
            zero as f64 / (n * n)
        }
        _ => unreachable!("filtered above"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{sample_persons, Pronoun};

    fn anya() -> PersonRecord {
        PersonRecord {
            person_id: 0,
            first: "Anya".into(),
            middle: "Briar".into(),
            last: "Forger".into(),
            pronoun: Pronoun::She,
            birth_month: 10,
            birth_day: 2,
            birth_year: 1996,
            birth_city: "Princeton, NJ".into(),
            university: "Massachusetts Institute of Technology".into(),
            major: "Communications".into(),
            company: "Meta Platforms".into(),
            company_city: "Menlo Park, CA".into(),
        }
    }

    fn sabrina() -> PersonRecord {
        PersonRecord {
            person_id: 1,
            first: "Sabrina".into(),
            middle: "Eugeo".into(),
            last: "Zuberger".into(),
            pronoun: Pronoun::She,
            birth_month: 9,
            birth_day: 17,
            birth_year: 1972,
            birth_city: "Durham, NC".into(),
            university: "Princeton University".into(),
            major: "Music".into(),
            company: "Johnson & Johnson".into(),
            company_city: "New Brunswick, NJ".into(),
        }
    }

    fn pools() -> AttributePools {
        AttributePools::builtin()
    }

    #[test]
    fn classification_oracles_match_reference_examples() {
        let p = pools();
        let a = anya();
        let one = [&a];
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyBirthMonth { modulus: 2 }, &one, &p).unwrap(),
            "Yes"
        );
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyBirthMonth { modulus: 6 }, &one, &p).unwrap(),
            "4"
        );
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyBirthMonth { modulus: 12 }, &one, &p).unwrap(),
            "10"
        );
        // Communications has luckiness 28.
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyLuckiness { modulus: 20 }, &one, &p).unwrap(),
            "8"
        );
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyLuckiness { modulus: 5 }, &one, &p).unwrap(),
            "3"
        );
        assert_eq!(
            oracle_answer(TaskSpec::ClassifyLuckiness { modulus: 100 }, &one, &p).unwrap(),
            "28"
        );
    }

    #[test]
    fn comparison_oracles_match_reference_examples() {
        let p = pools();
        let a = anya();
        let s = sabrina();
        let pair = [&a, &s];
        // Communications (28) minus Music (99).
        assert_eq!(
            oracle_answer(TaskSpec::Subtract(CompareAttr::Major), &pair, &p).unwrap(),
            "-71"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Subtract(CompareAttr::BirthMonth), &pair, &p).unwrap(),
            "1"
        );
        // October is strictly later than September.
        assert_eq!(
            oracle_answer(TaskSpec::Rank(CompareAttr::BirthMonth), &pair, &p).unwrap(),
            "Yes"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Rank(CompareAttr::Major), &pair, &p).unwrap(),
            "No"
        );
        // Ties answer "No" under strict comparison.
        let mut twin = s.clone();
        twin.birth_month = a.birth_month;
        assert_eq!(
            oracle_answer(TaskSpec::Rank(CompareAttr::BirthMonth), &[&a, &twin], &p).unwrap(),
            "No"
        );
    }

    #[test]
    fn retrieval_oracles_match_reference_examples() {
        let p = pools();
        let a = anya();
        let one = [&a];
        assert_eq!(
            oracle_answer(TaskSpec::Partial(PartialAttr::Bday), &one, &p).unwrap(),
            "2"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Partial(PartialAttr::Byear), &one, &p).unwrap(),
            "1996"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Extract(AttrKind::Bdate), &one, &p).unwrap(),
            "October 2, 1996"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Dual(AttrKind::Bcity, AttrKind::Cname), &one, &p).unwrap(),
            "Princeton, NJ; Meta Platforms"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Dual(AttrKind::Cname, AttrKind::Bcity), &one, &p).unwrap(),
            "Meta Platforms; Princeton, NJ"
        );
        assert_eq!(
            oracle_answer(TaskSpec::Dual(AttrKind::Cname, AttrKind::Ccity), &one, &p).unwrap(),
            "Meta Platforms; Menlo Park, CA"
        );
    }

    #[test]
    fn question_phrasings_match_reference_wordings() {
        let a = anya();
        let s = sabrina();
        assert_eq!(
            question_text(TaskSpec::Partial(PartialAttr::Byear), &[&a]).unwrap(),
            "What is the birth year of Anya Briar Forger?"
        );
        assert_eq!(
            question_text(TaskSpec::Dual(AttrKind::Cname, AttrKind::Ccity), &[&a]).unwrap(),
            "Which company and where did Anya Briar Forger work for?"
        );
        assert_eq!(
            question_text(TaskSpec::ClassifyBirthMonth { modulus: 2 }, &[&a]).unwrap(),
            "Was Anya Briar Forger born in an even month?"
        );
        assert_eq!(
            question_text(TaskSpec::ClassifyBirthMonth { modulus: 12 }, &[&a]).unwrap(),
            "What is Anya Briar Forger's birth month in numerics?"
        );
        assert_eq!(
            question_text(TaskSpec::ClassifyLuckiness { modulus: 20 }, &[&a]).unwrap(),
            "What is the luckiness of Anya Briar Forger's major modulo 20?"
        );
        assert_eq!(
            question_text(TaskSpec::Rank(CompareAttr::Major), &[&a, &s]).unwrap(),
            "Did Anya Briar Forger major in a field luckier than Sabrina Eugeo Zuberger?"
        );
        assert_eq!(
            question_text(TaskSpec::Subtract(CompareAttr::BirthMonth), &[&a, &s]).unwrap(),
            "What is Anya Briar Forger's birth month minus Sabrina Eugeo Zuberger's birth month?"
        );
        assert_eq!(
            question_text(TaskSpec::Subtract(CompareAttr::Major), &[&a, &s]).unwrap(),
            "How luckier is Anya Briar Forger's major compared with Sabrina Eugeo Zuberger's major?"
        );
        assert_eq!(
            question_text(
                TaskSpec::Inverse { scope: InverseScope::All, target: NameTarget::First },
                &[&a]
            )
            .unwrap(),
            "Give me the first name of the person who studied Communications at \
             Massachusetts Institute of Technology, was born on October 2, 1996 in \
             Princeton, NJ, and worked for Meta Platforms at Menlo Park, CA?"
        );
        assert_eq!(
            question_text(
                TaskSpec::Inverse { scope: InverseScope::Bdate, target: NameTarget::Full },
                &[&a]
            )
            .unwrap(),
            "Give me the full name of the person born on October 2, 1996?"
        );
    }

    #[test]
    fn inverse_answers_are_names() {
        let p = pools();
        let a = anya();
        assert_eq!(
            oracle_answer(
                TaskSpec::Inverse { scope: InverseScope::All, target: NameTarget::First },
                &[&a],
                &p
            )
            .unwrap(),
            "Anya"
        );
        assert_eq!(
            oracle_answer(
                TaskSpec::Inverse { scope: InverseScope::Bdate, target: NameTarget::Full },
                &[&a],
                &p
            )
            .unwrap(),
            "Anya Briar Forger"
        );
    }

    #[test]
    fn hints_state_attribute_values() {
        let a = anya();
        let s = sabrina();
        assert_eq!(
            hint_text(TaskSpec::Rank(CompareAttr::BirthMonth), &[&a, &s]).unwrap(),
            Some("October; September".into())
        );
        assert_eq!(
            hint_text(TaskSpec::Subtract(CompareAttr::Major), &[&a, &s]).unwrap(),
            Some("Communications; Music".into())
        );
        assert_eq!(
            hint_text(TaskSpec::ClassifyLuckiness { modulus: 20 }, &[&a]).unwrap(),
            Some("Communications".into())
        );
        assert_eq!(
            hint_text(TaskSpec::ClassifyBirthMonth { modulus: 2 }, &[&a]).unwrap(),
            Some("October".into())
        );
        assert_eq!(
            hint_text(TaskSpec::Partial(PartialAttr::Byear), &[&a]).unwrap(),
            Some("October 2, 1996".into())
        );
        assert_eq!(hint_text(TaskSpec::Extract(AttrKind::Bdate), &[&a]).unwrap(), None);
    }

    #[test]
    fn target_text_layers_hint_before_answer() {
        let p = pools();
        let a = anya();
        let s = sabrina();
        let mut examples = make_examples(
            TaskSpec::Subtract(CompareAttr::Major),
            &[a, s],
            &[0, 1],
            Split::Train,
            1.0,
            Some(1),
            9,
        )
        .unwrap();
        examples = with_oracle_answers(examples, &[anya(), sabrina()], &p).unwrap();
        let ex = &examples[0];
        assert_eq!(ex.hint_mode_marker, HintMarker::Hint);
        let t = ex.target_text();
        assert!(
            t == "Communications; Music. -71." || t == "Music; Communications. 71.",
            "unexpected target {t:?}"
        );
    }

    #[test]
    fn split_is_deterministic_equal_and_disjoint() {
        let s4 = split_persons(4, 7);
        assert_eq!(s4.train_ids.len(), 2);
        assert_eq!(s4.test_ids.len(), 2);
        let all: std::collections::HashSet<u32> =
            s4.train_ids.iter().chain(&s4.test_ids).copied().collect();
        assert_eq!(all.len(), 4);

        let big = split_persons(100_000, 7);
        assert_eq!(big.train_ids.len(), 50_000);
        assert_eq!(big.test_ids.len(), 50_000);
        let again = split_persons(100_000, 7);
        assert_eq!(big.train_ids, again.train_ids);
        assert_eq!(big.test_ids, again.test_ids);
        let other = split_persons(100_000, 8);
        assert_ne!(big.train_ids, other.train_ids);

        // Odd N: the final id lands on the train side.
        let odd = split_persons(5, 7);
        assert_eq!(odd.train_ids.len(), 3);
        assert_eq!(odd.test_ids.len(), 2);
        assert!(odd.train_ids.contains(&4));
    }

    #[test]
    fn examples_respect_hint_probability_and_split_hygiene() {
        let p = pools();
        let records = sample_persons(&p, 200, 21).unwrap();
        let split = split_persons(200, 21);

        // hint_probability = 1: every example hinted, marker <hint>.
        let hinted = generate_examples(
            TaskSpec::ClassifyBirthMonth { modulus: 2 },
            &records,
            &p,
            &split.train_ids,
            Split::Train,
            1.0,
            None,
            3,
        )
        .unwrap();
        assert_eq!(hinted.len(), split.train_ids.len());
        assert!(hinted.iter().all(|e| e.hint.is_some()));
        assert!(hinted.iter().all(|e| e.hint_mode_marker == HintMarker::Hint));

        // hint_probability = 0: none.
        let bare = generate_examples(
            TaskSpec::Rank(CompareAttr::BirthMonth),
            &records,
            &p,
            &split.test_ids,
            Split::Test,
            0.0,
            Some(500),
            3,
        )
        .unwrap();
        assert!(bare.iter().all(|e| e.hint.is_none()));
        assert!(bare.iter().all(|e| e.hint_mode_marker == HintMarker::NoHint));
        // Pair hygiene: both subjects on the requested side, never equal.
        let test_set: std::collections::HashSet<u32> =
            split.test_ids.iter().copied().collect();
        for e in &bare {
            assert_eq!(e.subjects.len(), 2);
            assert_ne!(e.subjects[0], e.subjects[1]);
            assert!(e.subjects.iter().all(|id| test_set.contains(id)));
            assert_eq!(e.split, Split::Test);
        }

        // Empirical hint rate within 3 sigma of 0.5.
        let n = 10_000;
        let half = generate_examples(
            TaskSpec::Subtract(CompareAttr::BirthDay),
            &records,
            &p,
            &split.train_ids,
            Split::Train,
            0.5,
            Some(n),
            4,
        )
        .unwrap();
        let hints = half.iter().filter(|e| e.hint.is_some()).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!(
            (hints - n as f64 * 0.5).abs() < 3.0 * sigma,
            "hint count {hints} not within 3 sigma of {}",
            n as f64 * 0.5
        );

        // Hints on a task without them is a config error.
        assert!(make_examples(
            TaskSpec::Extract(AttrKind::Bcity),
            &records,
            &split.train_ids,
            Split::Train,
            0.5,
            None,
            5,
        )
        .is_err());
    }

    #[test]
    fn oracle_closure_holds_over_the_full_grid() {
        let p = pools();
        let records = sample_persons(&p, 60, 31).unwrap();
        let split = split_persons(60, 31);
        for task in TaskSpec::full_grid() {
            for side in [Split::Train, Split::Test] {
                let hint_p = if task.supports_hint() { 0.5 } else { 0.0 };
                let count = if task.arity() == 2 { Some(40) } else { None };
                let examples = generate_examples(
                    task,
                    &records,
                    &p,
                    split.side(side),
                    side,
                    hint_p,
                    count,
                    11,
                )
                .unwrap();
                assert!(!examples.is_empty());
                for e in &examples {
                    let recs: Vec<&PersonRecord> =
                        e.subjects.iter().map(|&id| &records[id as usize]).collect();
                    assert_eq!(
                        e.answer,
                        oracle_answer(task, &recs, &p).unwrap(),
                        "task {task}"
                    );
                    if let Some(h) = &e.hint {
                        assert_eq!(h, &hint_text(task, &recs).unwrap().unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_baseline_table_to_one_decimal() {
        let p = pools();
        let pct = |task: TaskSpec| -> f64 {
            (baseline_accuracy(task, &p) * 1000.0).round() / 10.0
        };
        assert_eq!(pct(TaskSpec::ClassifyBirthMonth { modulus: 2 }), 50.0);
        assert_eq!(pct(TaskSpec::ClassifyBirthMonth { modulus: 6 }), 16.7);
        assert_eq!(pct(TaskSpec::ClassifyBirthMonth { modulus: 12 }), 8.3);
        assert_eq!(pct(TaskSpec::Rank(CompareAttr::BirthMonth)), 54.2);
        assert_eq!(pct(TaskSpec::Subtract(CompareAttr::BirthMonth)), 8.3);
        assert_eq!(pct(TaskSpec::ClassifyLuckiness { modulus: 5 }), 20.0);
        assert_eq!(pct(TaskSpec::ClassifyLuckiness { modulus: 20 }), 5.0);
        assert_eq!(pct(TaskSpec::ClassifyLuckiness { modulus: 100 }), 1.0);
        assert_eq!(pct(TaskSpec::Rank(CompareAttr::Major)), 50.5);
        assert_eq!(pct(TaskSpec::Subtract(CompareAttr::Major)), 1.0);
        assert_eq!(pct(TaskSpec::Rank(CompareAttr::BirthDay)), 51.8);
        assert_eq!(pct(TaskSpec::Subtract(CompareAttr::BirthDay)), 3.6);
    }

    #[test]
    fn baselines_equal_brute_force_enumeration() {
        let p = pools();
        for task in TaskSpec::full_grid() {
            if let Some(enumerated) = baseline_by_enumeration(task, &p) {
                let closed = baseline_accuracy(task, &p);
                assert!(
                    (closed - enumerated).abs() < 1e-12,
                    "task {task}: closed {closed} vs enumerated {enumerated}"
                );
            }
        }
    }

    #[test]
    fn attribute_and_dual_baselines() {
        let p = pools();
        let b = |t| baseline_accuracy(t, &p);
        assert!((b(TaskSpec::Extract(AttrKind::Ccity)) - 37.0 / 263.0).abs() < 1e-12);
        assert!((b(TaskSpec::Extract(AttrKind::Major)) - 0.01).abs() < 1e-12);
        assert!((b(TaskSpec::Partial(PartialAttr::Bday)) - 1.0 / 28.0).abs() < 1e-12);
        assert!((b(TaskSpec::Partial(PartialAttr::Byear)) - 1.0 / 200.0).abs() < 1e-12);
        // Company city is determined by the company, so both orders share the
        // company-name baseline.
        assert!(
            (b(TaskSpec::Dual(AttrKind::Cname, AttrKind::Ccity)) - 1.0 / 263.0).abs() < 1e-12
        );
        assert!(
            (b(TaskSpec::Dual(AttrKind::Ccity, AttrKind::Cname)) - 1.0 / 263.0).abs() < 1e-12
        );
        assert!(
            (b(TaskSpec::Dual(AttrKind::Bcity, AttrKind::Cname)) - 1.0 / (200.0 * 263.0)).abs()
                < 1e-15
        );
        assert!(
            (b(TaskSpec::Inverse { scope: InverseScope::All, target: NameTarget::First })
                - 1.0 / 400.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn task_names_roundtrip() {
        let grid = TaskSpec::full_grid();
        assert_eq!(grid.len(), 36);
        for task in grid {
            let name = task.name();
            let parsed: TaskSpec = name.parse().unwrap();
            assert_eq!(parsed, task, "{name}");
        }
        assert!("extract.nonsense".parse::<TaskSpec>().is_err());
        assert_eq!(
            TaskSpec::Inverse { scope: InverseScope::All, target: NameTarget::First }.name(),
            "inverse.all.to.first"
        );
        assert_eq!(
            TaskSpec::ClassifyLuckiness { modulus: 20 }.name(),
            "classify.luckiness%20"
        );
    }

    #[test]
    fn example_tokens_compose_question_marker_target() {
        let p = pools();
        let a = anya();
        let s = sabrina();
        let records = vec![a, s];
        let examples = generate_examples(
            TaskSpec::Rank(CompareAttr::BirthMonth),
            &records,
            &p,
            &[0, 1],
            Split::Train,
            1.0,
            Some(1),
            2,
        )
        .unwrap();
        let ex = &examples[0];
        let corpus_lines: Vec<String> = vec![ex.question.clone(), ex.target_text()];
        let vocab = crate::tokenizer::Vocab::build(
            corpus_lines.iter().map(|s| s.as_str()),
            std::iter::empty(),
            Default::default(),
        );
        let ids = ex.tokens(&vocab).unwrap();
        let marker_pos = ids.iter().position(|&id| id == HINT_MARKER).unwrap();
        let question_ids = vocab.encode(&ex.question).unwrap();
        assert_eq!(&ids[..marker_pos], &question_ids[..]);
        let target_ids = vocab.encode(&ex.target_text()).unwrap();
        assert_eq!(&ids[marker_pos + 1..], &target_ids[..]);
        let prompt = ex.prompt_tokens(&vocab, HintMarker::NoHint).unwrap();
        assert_eq!(*prompt.last().unwrap(), NOHINT_MARKER);
    }
}
