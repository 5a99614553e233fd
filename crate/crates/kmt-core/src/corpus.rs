//! Synthetic biography corpus: attribute pools, deterministic person sampling,
//! and templated rendering with knowledge augmentations.
//!
//! Every person has six attributes (birth date, birth city, university, major,
//! company name, company city). A biography entry is six templated sentences,
//! one per attribute. Augmentations control multiplicity, sentence order,
//! subject rendering, and where the person's name first appears.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

pub const MONTH_NAMES: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August",
    "September", "October", "November", "December",
];

/// The six biography attributes, in canonical sentence order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum AttrKind {
    #[serde(rename = "bdate")]
    Bdate,
    #[serde(rename = "bcity")]
    Bcity,
    #[serde(rename = "univ")]
    Univ,
    #[serde(rename = "major")]
    Major,
    #[serde(rename = "cname")]
    Cname,
    #[serde(rename = "ccity")]
    Ccity,
}

impl AttrKind {
    pub const ALL: [AttrKind; 6] = [
        AttrKind::Bdate,
        AttrKind::Bcity,
        AttrKind::Univ,
        AttrKind::Major,
        AttrKind::Cname,
        AttrKind::Ccity,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AttrKind::Bdate => "bdate",
            AttrKind::Bcity => "bcity",
            AttrKind::Univ => "univ",
            AttrKind::Major => "major",
            AttrKind::Cname => "cname",
            AttrKind::Ccity => "ccity",
        }
    }

    /// Key used by the template data file.
    pub fn template_key(self) -> &'static str {
        match self {
            AttrKind::Bdate => "birth_date",
            AttrKind::Bcity => "birth_city",
            AttrKind::Univ => "university",
            AttrKind::Major => "major",
            AttrKind::Cname => "company_name",
            AttrKind::Ccity => "company_city",
        }
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Pronoun {
    #[serde(rename = "she")]
    She,
    #[serde(rename = "he")]
    He,
    #[serde(rename = "they")]
    They,
}

impl Pronoun {
    /// Sentence-initial subject form.
    pub fn subject(self) -> &'static str {
        match self {
            Pronoun::She => "She",
            Pronoun::He => "He",
            Pronoun::They => "They",
        }
    }

    /// Sentence-initial possessive subject form.
    pub fn subject_possessive(self) -> &'static str {
        match self {
            Pronoun::She => "Her",
            Pronoun::He => "His",
            Pronoun::They => "Their",
        }
    }

    /// Mid-sentence possessive determiner.
    pub fn possessive(self) -> &'static str {
        match self {
            Pronoun::She => "her",
            Pronoun::He => "his",
            Pronoun::They => "their",
        }
    }
}

// ---------------------------------------------------------------------------
// Attribute pools
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MajorEntry {
    pub name: String,
    pub luckiness: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompanyEntry {
    pub name: String,
    pub hq_city: String,
}

/// The closed universes every attribute is drawn from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributePools {
    pub version: u32,
    pub first_names: Vec<String>,
    pub middle_names: Vec<String>,
    pub last_names: Vec<String>,
    pub birth_years: Vec<i32>,
    pub birth_cities: Vec<String>,
    pub universities: Vec<String>,
    pub majors: Vec<MajorEntry>,
    pub companies: Vec<CompanyEntry>,
}

/// Fraction of companies sharing the dominant headquarters city.
pub const DOMINANT_HQ_FRACTION: f64 = 0.137;

/// Number of companies that must share the dominant city for a pool of size k.
pub fn dominant_company_count(k: usize) -> usize {
    (DOMINANT_HQ_FRACTION * k as f64).ceil() as usize
}

/// Optional downward overrides for pool sizes (desk-scale corpora).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoolSizes {
    pub first_names: Option<usize>,
    pub middle_names: Option<usize>,
    pub last_names: Option<usize>,
    pub birth_years: Option<usize>,
    pub birth_cities: Option<usize>,
    pub universities: Option<usize>,
    pub majors: Option<usize>,
    pub companies: Option<usize>,
}

impl AttributePools {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let pools: AttributePools =
            serde_json::from_str(s).map_err(|e| Error::DataFile(format!("pools: {e}")))?;
        pools.validate()?;
        Ok(pools)
    }

    /// The pool set shipped with the crate (full default sizes).
    pub fn builtin() -> Self {
        Self::from_json_str(include_str!("../data/pools.json"))
            .expect("built-in pools must be valid")
    }

    pub fn validate(&self) -> Result<()> {
        fn distinct(name: &str, values: &[String]) -> Result<()> {
            if values.is_empty() {
                return Err(Error::Config(format!("pool {name} is empty")));
            }
            let set: HashSet<&str> = values.iter().map(|s| s.as_str()).collect();
            if set.len() != values.len() {
                return Err(Error::Config(format!("pool {name} has duplicates")));
            }
            Ok(())
        }
        distinct("first_names", &self.first_names)?;
        distinct("middle_names", &self.middle_names)?;
        distinct("last_names", &self.last_names)?;
        distinct("birth_cities", &self.birth_cities)?;
        distinct("universities", &self.universities)?;
        if self.birth_years.is_empty() {
            return Err(Error::Config("pool birth_years is empty".into()));
        }
        let years: HashSet<i32> = self.birth_years.iter().copied().collect();
        if years.len() != self.birth_years.len() {
            return Err(Error::Config("pool birth_years has duplicates".into()));
        }

        // Luckiness must be a bijection majors -> {0..n-1}.
        let names: Vec<String> = self.majors.iter().map(|m| m.name.clone()).collect();
        distinct("majors", &names)?;
        let mut scores: Vec<usize> = self.majors.iter().map(|m| m.luckiness as usize).collect();
        scores.sort_unstable();
        if scores != (0..self.majors.len()).collect::<Vec<_>>() {
            return Err(Error::Config(
                "major luckiness scores are not a bijection onto 0..n-1".into(),
            ));
        }

        // Companies: distinct names; exactly one city is shared by the dominant
        // fraction, all other cities are unique to their company.
        let cnames: Vec<String> = self.companies.iter().map(|c| c.name.clone()).collect();
        distinct("companies", &cnames)?;
        let mut by_city: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &self.companies {
            *by_city.entry(c.hq_city.as_str()).or_default() += 1;
        }
        let expect = dominant_company_count(self.companies.len());
        let dominant: Vec<(&str, usize)> =
            by_city.iter().filter(|(_, &n)| n > 1).map(|(c, &n)| (*c, n)).collect();
        if expect > 1 {
            if dominant.len() != 1 || dominant[0].1 != expect {
                return Err(Error::Config(format!(
                    "companies must have exactly one city shared by {expect} of {} entries",
                    self.companies.len()
                )));
            }
        } else if !dominant.is_empty() {
            return Err(Error::Config("company hq cities must be distinct".into()));
        }
        Ok(())
    }

    /// The headquarters city shared by the dominant fraction of companies.
    pub fn dominant_city(&self) -> Option<&str> {
        let mut by_city: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &self.companies {
            *by_city.entry(c.hq_city.as_str()).or_default() += 1;
        }
        by_city
            .into_iter()
            .max_by_key(|&(_, n)| n)
            .filter(|&(_, n)| n > 1)
            .map(|(c, _)| c)
    }

    /// Luckiness score of a major (a bijection onto 0..n-1).
    pub fn luckiness(&self, major: &str) -> Result<u8> {
        self.majors
            .iter()
            .find(|m| m.name == major)
            .map(|m| m.luckiness)
            .ok_or_else(|| Error::Config(format!("unknown major {major:?}")))
    }

    /// Shrink pools for desk-scale corpora. Majors are re-ranked so luckiness
    /// stays a bijection; companies keep the dominant-city share at the
    /// configured fraction of the new size.
    pub fn truncated(&self, sizes: &PoolSizes) -> Result<Self> {
        fn take(name: &str, values: &[String], n: Option<usize>) -> Result<Vec<String>> {
            match n {
                None => Ok(values.to_vec()),
                Some(0) => Err(Error::Config(format!("pool {name}: size 0"))),
                Some(n) if n > values.len() => Err(Error::Config(format!(
                    "pool {name}: requested {n} but only {} available",
                    values.len()
                ))),
                Some(n) => Ok(values[..n].to_vec()),
            }
        }
        let mut out = AttributePools {
            version: self.version,
            first_names: take("first_names", &self.first_names, sizes.first_names)?,
            middle_names: take("middle_names", &self.middle_names, sizes.middle_names)?,
            last_names: take("last_names", &self.last_names, sizes.last_names)?,
            birth_years: match sizes.birth_years {
                None => self.birth_years.clone(),
                Some(n) if n == 0 || n > self.birth_years.len() => {
                    return Err(Error::Config(format!("pool birth_years: bad size {n}")))
                }
                Some(n) => self.birth_years[..n].to_vec(),
            },
            birth_cities: take("birth_cities", &self.birth_cities, sizes.birth_cities)?,
            universities: take("universities", &self.universities, sizes.universities)?,
            majors: self.majors.clone(),
            companies: self.companies.clone(),
        };

        if let Some(n) = sizes.majors {
            if n == 0 || n > self.majors.len() {
                return Err(Error::Config(format!("pool majors: bad size {n}")));
            }
            let mut kept = self.majors[..n].to_vec();
            // Dense re-rank preserving the original order of scores.
            let mut order: Vec<usize> = (0..kept.len()).collect();
            order.sort_by_key(|&i| kept[i].luckiness);
            for (rank, idx) in order.into_iter().enumerate() {
                kept[idx].luckiness = rank as u8;
            }
            out.majors = kept;
        }

        if let Some(k) = sizes.companies {
            if k == 0 || k > self.companies.len() {
                return Err(Error::Config(format!("pool companies: bad size {k}")));
            }
            let dominant = self
                .dominant_city()
                .ok_or_else(|| Error::Config("companies: no dominant city".into()))?
                .to_string();
            let n_dom = dominant_company_count(k);
            let dom: Vec<CompanyEntry> = self
                .companies
                .iter()
                .filter(|c| c.hq_city == dominant)
                .take(n_dom)
                .cloned()
                .collect();
            let rest: Vec<CompanyEntry> = self
                .companies
                .iter()
                .filter(|c| c.hq_city != dominant)
                .take(k - n_dom)
                .cloned()
                .collect();
            if dom.len() < n_dom || rest.len() < k - n_dom {
                return Err(Error::Config(format!(
                    "pool companies: cannot keep {n_dom} dominant + {} distinct entries",
                    k - n_dom
                )));
            }
            out.companies = dom.into_iter().chain(rest).collect();
        }

        out.validate()?;
        Ok(out)
    }

    /// Canonical content hash (stable JSON serialization).
    pub fn content_hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("pools serialize").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Person records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: u32,
    pub first: String,
    pub middle: String,
    pub last: String,
    pub pronoun: Pronoun,
    pub birth_month: u8,
    pub birth_day: u8,
    pub birth_year: i32,
    pub birth_city: String,
    pub university: String,
    pub major: String,
    pub company: String,
    pub company_city: String,
}

impl PersonRecord {
    pub fn full_name(&self) -> String {
        format!("{} {} {}", self.first, self.middle, self.last)
    }

    pub fn month_name(&self) -> &'static str {
        MONTH_NAMES[(self.birth_month - 1) as usize]
    }

    /// US-format date, e.g. "October 2, 1996".
    pub fn birth_date_text(&self) -> String {
        format!("{} {}, {}", self.month_name(), self.birth_day, self.birth_year)
    }

    pub fn attribute_value(&self, kind: AttrKind) -> String {
        match kind {
            AttrKind::Bdate => self.birth_date_text(),
            AttrKind::Bcity => self.birth_city.clone(),
            AttrKind::Univ => self.university.clone(),
            AttrKind::Major => self.major.clone(),
            AttrKind::Cname => self.company.clone(),
            AttrKind::Ccity => self.company_city.clone(),
        }
    }
}

/// Draw one person. Attribute draws and name draws use separate streams so a
/// full-name collision can re-draw the name triple without disturbing the
/// attributes. Field order within each stream is frozen; changing it would
/// silently regenerate every downstream artifact.
fn sample_person_attempt(
    pools: &AttributePools,
    person_id: u32,
    seed: u64,
    attempt: u64,
) -> PersonRecord {
    let mut attrs = stream(seed, Domain::Person, &[person_id as u64]);
    let birth_month = attrs.gen_range(1..=12u8);
    let birth_day = attrs.gen_range(1..=28u8);
    let birth_year = pools.birth_years[attrs.gen_range(0..pools.birth_years.len())];
    let birth_city = pools.birth_cities[attrs.gen_range(0..pools.birth_cities.len())].clone();
    let university = pools.universities[attrs.gen_range(0..pools.universities.len())].clone();
    let major = pools.majors[attrs.gen_range(0..pools.majors.len())].name.clone();
    let company = &pools.companies[attrs.gen_range(0..pools.companies.len())];
    let pronoun = match attrs.gen_range(0..3u8) {
        0 => Pronoun::She,
        1 => Pronoun::He,
        _ => Pronoun::They,
    };

    let mut names = stream(seed, Domain::Person, &[person_id as u64, attempt]);
    let first = pools.first_names[names.gen_range(0..pools.first_names.len())].clone();
    let middle = pools.middle_names[names.gen_range(0..pools.middle_names.len())].clone();
    let last = pools.last_names[names.gen_range(0..pools.last_names.len())].clone();

    PersonRecord {
        person_id,
        first,
        middle,
        last,
        pronoun,
        birth_month,
        birth_day,
        birth_year,
        birth_city,
        university,
        major,
        company: company.name.clone(),
        company_city: company.hq_city.clone(),
    }
}

/// Sample a single person (no corpus-wide uniqueness; see [`sample_persons`]).
pub fn sample_person(pools: &AttributePools, person_id: u32, seed: u64) -> PersonRecord {
    sample_person_attempt(pools, person_id, seed, 0)
}

const MAX_NAME_ATTEMPTS: u64 = 10_000;

/// Sample `n` persons with corpus-wide unique full names (rejection sampling
/// on the name triple only).
pub fn sample_persons(pools: &AttributePools, n: u32, seed: u64) -> Result<Vec<PersonRecord>> {
    let combos = pools.first_names.len() as u128
        * pools.middle_names.len() as u128
        * pools.last_names.len() as u128;
    if (n as u128) > combos {
        return Err(Error::PoolExhausted(format!(
            "{n} persons requested but only {combos} distinct full-name combinations exist \
             ({} first x {} middle x {} last)",
            pools.first_names.len(),
            pools.middle_names.len(),
            pools.last_names.len()
        )));
    }
    let mut used: HashSet<String> = HashSet::with_capacity(n as usize);
    let mut out = Vec::with_capacity(n as usize);
    for id in 0..n {
        let mut attempt = 0u64;
        let record = loop {
            let record = sample_person_attempt(pools, id, seed, attempt);
            if used.insert(record.full_name()) {
                break record;
            }
            attempt += 1;
            if attempt >= MAX_NAME_ATTEMPTS {
                return Err(Error::PoolExhausted(format!(
                    "full-name rejection sampling for person {id} exceeded \
                     {MAX_NAME_ATTEMPTS} attempts; name pools too small for {n} persons"
                )));
            }
        };
        out.push(record);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sentence templates
// ---------------------------------------------------------------------------

/// One parsed slot-pattern segment.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Seg {
    Lit(String),
    /// Sentence-initial subject ("Anya Briar Forger" / "She" / "The person").
    Subj,
    /// Sentence-initial possessive subject ("Anya Briar Forger's" / "Her").
    SubjPoss,
    /// Mid-sentence possessive determiner, always the person's pronoun.
    Poss,
    /// The attribute value.
    Value,
    /// Verb agreeing with the surface subject: plural only for "They".
    Verb { singular: String, plural: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pattern: String,
    segs: Vec<Seg>,
}

/// How the subject of a sentence is rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubjectStyle {
    FullName,
    Pronoun,
    ThePerson,
}

impl Template {
    pub fn parse(pattern: &str) -> Result<Template> {
        let mut segs = Vec::new();
        let mut lit = String::new();
        let mut rest = pattern;
        while let Some(open) = rest.find('{') {
            lit.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::DataFile(format!("unclosed slot in {pattern:?}")))?
                + open;
            let slot = &rest[open + 1..close];
            if !lit.is_empty() {
                segs.push(Seg::Lit(std::mem::take(&mut lit)));
            }
            match slot {
                "subj" => segs.push(Seg::Subj),
                "subj_poss" => segs.push(Seg::SubjPoss),
                "poss" => segs.push(Seg::Poss),
                "value" => segs.push(Seg::Value),
                v if v.starts_with("v:") => {
                    let (sing, plur) = v[2..]
                        .split_once('|')
                        .ok_or_else(|| Error::DataFile(format!("bad verb slot in {pattern:?}")))?;
                    segs.push(Seg::Verb { singular: sing.to_string(), plural: plur.to_string() });
                }
                other => {
                    return Err(Error::DataFile(format!(
                        "unknown slot {other:?} in {pattern:?}"
                    )))
                }
            }
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            lit.push_str(rest);
        }
        if !lit.is_empty() {
            segs.push(Seg::Lit(lit));
        }

        // Structural invariants: exactly one subject slot, leading; exactly one
        // value slot; sentence ends with a period.
        let subj_count = segs
            .iter()
            .filter(|s| matches!(s, Seg::Subj | Seg::SubjPoss))
            .count();
        if subj_count != 1 || !matches!(segs.first(), Some(Seg::Subj | Seg::SubjPoss)) {
            return Err(Error::DataFile(format!(
                "template must start with its single subject slot: {pattern:?}"
            )));
        }
        if segs.iter().filter(|s| matches!(s, Seg::Value)).count() != 1 {
            return Err(Error::DataFile(format!(
                "template must contain exactly one value slot: {pattern:?}"
            )));
        }
        if !pattern.ends_with('.') {
            return Err(Error::DataFile(format!("template must end with '.': {pattern:?}")));
        }
        Ok(Template { pattern: pattern.to_string(), segs })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Render with an explicit subject style and attribute value.
    pub fn render(&self, record: &PersonRecord, style: SubjectStyle, value: &str) -> String {
        let plural_subject =
            style == SubjectStyle::Pronoun && record.pronoun == Pronoun::They;
        let mut out = String::with_capacity(self.pattern.len() + value.len() + 24);
        for seg in &self.segs {
            match seg {
                Seg::Lit(s) => out.push_str(s),
                Seg::Subj => match style {
                    SubjectStyle::FullName => out.push_str(&record.full_name()),
                    SubjectStyle::Pronoun => out.push_str(record.pronoun.subject()),
                    SubjectStyle::ThePerson => out.push_str("The person"),
                },
                Seg::SubjPoss => match style {
                    SubjectStyle::FullName => {
                        out.push_str(&record.full_name());
                        out.push_str("'s");
                    }
                    SubjectStyle::Pronoun => out.push_str(record.pronoun.subject_possessive()),
                    SubjectStyle::ThePerson => out.push_str("The person's"),
                },
                Seg::Poss => out.push_str(record.pronoun.possessive()),
                Seg::Value => out.push_str(value),
                Seg::Verb { singular, plural } => {
                    out.push_str(if plural_subject { plural } else { singular })
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub version: u32,
    kinds: [Vec<Template>; 6],
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    kinds: BTreeMap<String, Vec<String>>,
}

impl TemplateSet {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: TemplateFile =
            serde_json::from_str(s).map_err(|e| Error::DataFile(format!("templates: {e}")))?;
        let mut kinds: [Vec<Template>; 6] = Default::default();
        for kind in AttrKind::ALL {
            let patterns = file.kinds.get(kind.template_key()).ok_or_else(|| {
                Error::DataFile(format!("templates missing kind {:?}", kind.template_key()))
            })?;
            let parsed: Result<Vec<Template>> =
                patterns.iter().map(|p| Template::parse(p)).collect();
            let parsed = parsed?;
            if parsed.is_empty() {
                return Err(Error::DataFile(format!("no templates for {kind}")));
            }
            let distinct: HashSet<&str> = parsed.iter().map(|t| t.pattern.as_str()).collect();
            if distinct.len() != parsed.len() {
                return Err(Error::DataFile(format!("duplicate templates for {kind}")));
            }
            kinds[kind as usize] = parsed;
        }
        Ok(TemplateSet { version: file.version, kinds })
    }

    /// The template set shipped with the crate (>= 50 per attribute).
    pub fn builtin() -> Self {
        Self::from_json_str(include_str!("../data/templates.json"))
            .expect("built-in templates must be valid")
    }

    /// A set with exactly one fixed template per attribute (tests, examples).
    pub fn single(patterns: [&str; 6]) -> Result<Self> {
        let mut kinds: [Vec<Template>; 6] = Default::default();
        for (kind, pattern) in AttrKind::ALL.into_iter().zip(patterns) {
            kinds[kind as usize] = vec![Template::parse(pattern)?];
        }
        Ok(TemplateSet { version: 0, kinds })
    }

    pub fn for_kind(&self, kind: AttrKind) -> &[Template] {
        &self.kinds[kind as usize]
    }

    pub fn min_templates_per_kind(&self) -> usize {
        self.kinds.iter().map(|v| v.len()).min().unwrap_or(0)
    }

    pub fn content_hash(&self) -> String {
        let mut canon = String::new();
        for kind in AttrKind::ALL {
            for t in self.for_kind(kind) {
                canon.push_str(kind.key());
                canon.push('\t');
                canon.push_str(&t.pattern);
                canon.push('\n');
            }
        }
        crate::sha256_hex(canon.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Augmentations and rendering
// ---------------------------------------------------------------------------

/// Sentence index after which the person's full name first appears.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[derive(Default)]
pub enum ReversePos {
    #[serde(rename = "none")]
    #[default]
    None,
    #[serde(rename = "1")]
    After1,
    #[serde(rename = "2")]
    After2,
    #[serde(rename = "6")]
    After6,
}


#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Biography entries per person (multi-M).
    pub multiplicity: u32,
    /// Randomly permute the six attribute sentences per entry.
    pub permute: bool,
    /// Use the full name as subject of every sentence instead of pronouns.
    pub fullname: bool,
    /// Delay the first appearance of the full name.
    #[serde(default)]
    pub reverse_pos: ReversePos,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            multiplicity: 1,
            permute: false,
            fullname: false,
            reverse_pos: ReversePos::None,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.multiplicity == 0 {
            return Err(Error::Config("multiplicity must be >= 1".into()));
        }
        if self.reverse_pos != ReversePos::None && self.fullname {
            return Err(Error::Config(
                "reverse_pos requires fullname=false (the name appears exactly once)".into(),
            ));
        }
        Ok(())
    }

    /// Short label used in run manifests and charts, e.g. "multi5+permute".
    pub fn label(&self) -> String {
        let mut s = if self.multiplicity == 1 {
            "single".to_string()
        } else {
            format!("multi{}", self.multiplicity)
        };
        if self.permute {
            s.push_str("+permute");
        }
        if self.fullname {
            s.push_str("+fullname");
        }
        match self.reverse_pos {
            ReversePos::None => {}
            ReversePos::After1 => s.push_str("+reverse1"),
            ReversePos::After2 => s.push_str("+reverse2"),
            ReversePos::After6 => s.push_str("+reverse6"),
        }
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BioDocument {
    pub person_id: u32,
    pub entry_index: u32,
    pub sentences: Vec<String>,
    pub text: String,
}

/// Render one biography entry. Deterministic in (record, spec, entry_index,
/// seed); templates are re-sampled per entry.
pub fn render_biography(
    record: &PersonRecord,
    templates: &TemplateSet,
    spec: &AugmentationSpec,
    entry_index: u32,
    seed: u64,
) -> Result<BioDocument> {
    spec.validate()?;
    if entry_index >= spec.multiplicity {
        return Err(Error::Config(format!(
            "entry_index {entry_index} out of range for multiplicity {}",
            spec.multiplicity
        )));
    }
    let mut rng = stream(seed, Domain::Entry, &[record.person_id as u64, entry_index as u64]);

    // Template choice per attribute, drawn in canonical order.
    let mut chosen: Vec<(AttrKind, &Template)> = AttrKind::ALL
        .into_iter()
        .map(|kind| {
            let pool = templates.for_kind(kind);
            (kind, &pool[rng.gen_range(0..pool.len())])
        })
        .collect();
    if spec.permute {
        chosen.shuffle(&mut rng);
    }

    // Index of the sentence whose subject is the full name (None = reverse6:
    // the name only appears in an appended closing sentence).
    let name_at: Option<usize> = match spec.reverse_pos {
        ReversePos::None => Some(0),
        ReversePos::After1 => Some(1),
        ReversePos::After2 => Some(2),
        ReversePos::After6 => None,
    };

    let mut sentences = Vec::with_capacity(7);
    for (i, (kind, template)) in chosen.iter().enumerate() {
        let style = if spec.fullname {
            SubjectStyle::FullName
        } else if spec.reverse_pos == ReversePos::None {
            if i == 0 {
                SubjectStyle::FullName
            } else {
                SubjectStyle::Pronoun
            }
        } else if Some(i) == name_at {
            SubjectStyle::FullName
        } else if i == 0 {
            SubjectStyle::ThePerson
        } else {
            SubjectStyle::Pronoun
        };
        let value = record.attribute_value(*kind);
        sentences.push(template.render(record, style, &value));
    }
    if spec.reverse_pos == ReversePos::After6 {
        sentences.push(format!("The person's name is {}.", record.full_name()));
    }
    let text = sentences.join(" ");
    Ok(BioDocument {
        person_id: record.person_id,
        entry_index,
        sentences,
        text,
    })
}

/// All biography entries for a set of persons, ordered by person then entry.
pub fn generate_documents<'a>(
    persons: &'a [PersonRecord],
    templates: &'a TemplateSet,
    spec: &'a AugmentationSpec,
    seed: u64,
) -> impl Iterator<Item = Result<BioDocument>> + 'a {
    persons.iter().flat_map(move |record| {
        (0..spec.multiplicity)
            .map(move |entry| render_biography(record, templates, spec, entry, seed))
    })
}

/// Convenience wrapper: sample persons and render every document.
pub fn generate_corpus(
    pools: &AttributePools,
    templates: &TemplateSet,
    n: u32,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<(Vec<PersonRecord>, Vec<BioDocument>)> {
    spec.validate()?;
    let persons = sample_persons(pools, n, seed)?;
    let docs: Result<Vec<BioDocument>> =
        generate_documents(&persons, templates, spec, seed).collect();
    Ok((persons, docs?))
}

// ---------------------------------------------------------------------------
// Parse-back oracle
// ---------------------------------------------------------------------------

/// What a parsed sentence says about its subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubjectObservation {
    Pronoun(Pronoun),
    ThePerson,
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedSentence {
    pub kind: AttrKind,
    pub value: String,
    pub subject: SubjectObservation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedDocument {
    /// One entry per attribute sentence, in document order.
    pub sentences: Vec<ParsedSentence>,
    /// Full name stated by a closing "The person's name is ..." sentence.
    pub closing_name: Option<String>,
}

impl ParsedDocument {
    pub fn value_of(&self, kind: AttrKind) -> Option<&str> {
        self.sentences
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| s.value.as_str())
    }
}

/// Split a document text into sentences. Periods only occur as sentence
/// terminators in this corpus (attribute values contain none).
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split_inclusive(". ")
        .map(|s| s.trim_end().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Structural inverse of sentence rendering: recover (attribute, value,
/// subject) from a rendered sentence without regexes and without knowing the
/// person. Used as the independent oracle for corpus tests; fails loudly on
/// zero or ambiguous parses.
pub fn parse_sentence(sentence: &str, templates: &TemplateSet) -> Result<ParsedSentence> {
    let mut matches: Vec<ParsedSentence> = Vec::new();
    for kind in AttrKind::ALL {
        for template in templates.for_kind(kind) {
            for candidate in match_template(sentence, template, kind) {
                // Prefer the earliest (most-literal) subject interpretation;
                // drop duplicates that recover the same attribute value.
                if !matches.iter().any(|m| m.kind == candidate.kind && m.value == candidate.value)
                {
                    matches.push(candidate);
                }
            }
        }
    }
    match matches.len() {
        0 => Err(Error::DataFile(format!("no template parses sentence {sentence:?}"))),
        1 => Ok(matches.pop().expect("len checked")),
        _ => Err(Error::DataFile(format!(
            "ambiguous sentence {sentence:?}: {matches:?}"
        ))),
    }
}

/// Enumerate every (subject, pronoun) interpretation of `template` that
/// matches `sentence`, most-literal subjects first.
fn match_template(sentence: &str, template: &Template, kind: AttrKind) -> Vec<ParsedSentence> {
    let possessive_subject = matches!(template.segs[0], Seg::SubjPoss);

    // Candidate surface subjects with known literals, then the open-name case.
    // Pronoun subjects fix the person's pronoun; other subjects leave it free.
    let mut out = Vec::new();
    let pronouns = [Pronoun::She, Pronoun::He, Pronoun::They];
    let mut known: Vec<(String, SubjectObservation, Vec<Pronoun>)> = Vec::new();
    for p in pronouns {
        let lit = if possessive_subject { p.subject_possessive() } else { p.subject() };
        known.push((lit.to_string(), SubjectObservation::Pronoun(p), vec![p]));
    }
    known.push((
        if possessive_subject { "The person's".to_string() } else { "The person".to_string() },
        SubjectObservation::ThePerson,
        pronouns.to_vec(),
    ));

    for (subject_lit, observation, poss_choices) in &known {
        for &poss in poss_choices {
            let plural = matches!(observation, SubjectObservation::Pronoun(Pronoun::They));
            if let Some((prefix, suffix)) = template.tail_literals(poss, plural) {
                let full_prefix = format!("{subject_lit}{prefix}");
                if let Some(value) = extract_between(sentence, &full_prefix, &suffix) {
                    out.push(ParsedSentence {
                        kind,
                        value,
                        subject: observation.clone(),
                    });
                }
            }
        }
    }

    // Open-name subject: the sentence starts with an unknown name (possibly
    // possessive), followed by the template tail.
    for &poss in &pronouns {
        if let Some((prefix, suffix)) = template.tail_literals(poss, false) {
            if !sentence.ends_with(suffix.as_str()) {
                continue;
            }
            if let Some(idx) = sentence.find(prefix.as_str()) {
                if idx == 0 {
                    continue;
                }
                let mut name = &sentence[..idx];
                if possessive_subject {
                    match name.strip_suffix("'s") {
                        Some(n) => name = n,
                        None => continue,
                    }
                }
                let value_start = idx + prefix.len();
                let value_end = sentence.len() - suffix.len();
                if value_start >= value_end {
                    continue;
                }
                let value = &sentence[value_start..value_end];
                // Full names are exactly three capitalized words; anything
                // else (e.g. "His transcript") is a mid-sentence fragment.
                let words: Vec<&str> = name.split_whitespace().collect();
                let name_like = words.len() == 3
                    && words
                        .iter()
                        .all(|w| w.chars().next().is_some_and(|c| c.is_ascii_uppercase()));
                if !name_like || value.starts_with(' ') || value.ends_with(' ') {
                    continue;
                }
                out.push(ParsedSentence {
                    kind,
                    value: value.to_string(),
                    subject: SubjectObservation::Name(name.to_string()),
                });
            }
        }
    }
    out
}

impl Template {
    /// The literal text between the subject slot and the value slot, and
    /// between the value slot and the end, for one (possessive, plurality)
    /// interpretation. None when the value precedes a non-literal segment
    /// pattern this simple matcher cannot anchor (never the case for the
    /// shipped templates).
    fn tail_literals(&self, poss: Pronoun, plural: bool) -> Option<(String, String)> {
        let mut prefix = String::new();
        let mut suffix = String::new();
        let mut seen_value = false;
        for seg in &self.segs[1..] {
            let target = if seen_value { &mut suffix } else { &mut prefix };
            match seg {
                Seg::Lit(s) => target.push_str(s),
                Seg::Poss => target.push_str(poss.possessive()),
                Seg::Verb { singular, plural: pl } => {
                    target.push_str(if plural { pl } else { singular })
                }
                Seg::Value => {
                    if seen_value {
                        return None;
                    }
                    seen_value = true;
                }
                Seg::Subj | Seg::SubjPoss => return None,
            }
        }
        Some((prefix, suffix))
    }
}

fn extract_between(sentence: &str, prefix: &str, suffix: &str) -> Option<String> {
    let rest = sentence.strip_prefix(prefix)?;
    let value = rest.strip_suffix(suffix)?;
    if value.is_empty() || value.starts_with(' ') || value.ends_with(' ') {
        return None;
    }
    Some(value.to_string())
}

/// Parse a full biography text back into attribute values.
pub fn parse_document(text: &str, templates: &TemplateSet) -> Result<ParsedDocument> {
    let mut sentences = Vec::new();
    let mut closing_name = None;
    for sentence in split_sentences(text) {
        if let Some(rest) = sentence.strip_prefix("The person's name is ") {
            if let Some(name) = rest.strip_suffix('.') {
                closing_name = Some(name.to_string());
                continue;
            }
        }
        sentences.push(parse_sentence(&sentence, templates)?);
    }
    Ok(ParsedDocument { sentences, closing_name })
}
