//! Cohort data model: one record per pregnancy, CSV ingestion, observed-group
//! classification and the outcome summary tables.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};
use std::fmt;

/// Pregnancies ending at or after this gestational week are stillbirths
/// rather than spontaneous abortions. Only used for reporting.
pub const STILLBIRTH_WEEK: f64 = 20.0;

const FIXED_COLUMNS: [&str; 6] = ["id", "exposed", "defect", "enroll_ga", "end_ga", "end_reason"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    SabStillbirth,
    Livebirth,
    Tab,
    Ltfu,
}

impl EndReason {
    pub const ALL: [EndReason; 4] =
        [EndReason::Livebirth, EndReason::SabStillbirth, EndReason::Tab, EndReason::Ltfu];

    pub fn token(self) -> &'static str {
        match self {
            EndReason::SabStillbirth => "sab_stillbirth",
            EndReason::Livebirth => "livebirth",
            EndReason::Tab => "tab",
            EndReason::Ltfu => "ltfu",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token.trim() {
            "sab_stillbirth" | "sab" | "stillbirth" => Some(EndReason::SabStillbirth),
            "livebirth" | "live_birth" => Some(EndReason::Livebirth),
            "tab" => Some(EndReason::Tab),
            "ltfu" => Some(EndReason::Ltfu),
            _ => None,
        }
    }

    /// Event indicator for time to SAB/stillbirth.
    #[inline]
    pub fn is_event(self) -> bool {
        self == EndReason::SabStillbirth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Defect {
    Yes,
    No,
    Missing,
}

impl Defect {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim() {
            "1" | "yes" | "Yes" | "TRUE" | "true" => Some(Defect::Yes),
            "0" | "no" | "No" | "FALSE" | "false" => Some(Defect::No),
            "NA" | "na" | "" => Some(Defect::Missing),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Defect::Yes => "1",
            Defect::No => "0",
            Defect::Missing => "NA",
        }
    }

    #[inline]
    pub fn observed(self) -> Option<bool> {
        match self {
            Defect::Yes => Some(true),
            Defect::No => Some(false),
            Defect::Missing => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateKind {
    Real,
    Binary,
    /// Levels in order; the first one is the reference level.
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CovariateSchema {
    pub columns: Vec<CovariateSpec>,
}

impl CovariateSchema {
    pub fn new(columns: Vec<CovariateSpec>) -> Self {
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Parses `name:kind,...` where kind is `real`, `binary`, `categorical`
    /// or `categorical(A|B|C)`. Undeclared categorical levels are collected
    /// from the data in sorted order.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, kind) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("covariate spec `{item}` lacks `:kind`")))?;
            let kind = match kind.trim() {
                "real" => CovariateKind::Real,
                "binary" => CovariateKind::Binary,
                "categorical" => CovariateKind::Categorical(Vec::new()),
                k if k.starts_with("categorical(") && k.ends_with(')') => CovariateKind::Categorical(
                    k["categorical(".len()..k.len() - 1].split('|').map(|s| s.trim().to_string()).collect(),
                ),
                other => return Err(Error::Config(format!("unknown covariate kind `{other}`"))),
            };
            columns.push(CovariateSpec { name: name.trim().to_string(), kind });
        }
        Ok(Self { columns })
    }

    /// Infers a schema from the covariate columns of a cohort CSV: {0,1}
    /// columns are binary, numeric columns real, anything else categorical.
    pub fn infer(csv_text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
        let headers = rdr.headers()?.clone();
        check_header(&headers)?;
        let names: Vec<String> = headers.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
        let mut values: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (j, v) in rec.iter().skip(FIXED_COLUMNS.len()).enumerate() {
                if j < values.len() {
                    values[j].push(v.to_string());
                }
            }
        }
        let columns = names
            .into_iter()
            .zip(values)
            .map(|(name, vals)| {
                let kind = if !vals.is_empty() && vals.iter().all(|v| v == "0" || v == "1") {
                    CovariateKind::Binary
                } else if vals.iter().all(|v| v.parse::<f64>().is_ok()) {
                    CovariateKind::Real
                } else {
                    CovariateKind::Categorical(Vec::new())
                };
                CovariateSpec { name, kind }
            })
            .collect();
        Ok(Self { columns })
    }

    fn describe(&self) -> String {
        self.columns
            .iter()
            .map(|c| match &c.kind {
                CovariateKind::Real => format!("{}:real", c.name),
                CovariateKind::Binary => format!("{}:binary", c.name),
                CovariateKind::Categorical(l) => format!("{}:categorical({})", c.name, l.join("|")),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for CovariateSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateValue<T> {
    Real(T),
    Binary(bool),
    /// Index into the schema's level list.
    Level(usize),
}

/// One pregnancy.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord<T> {
    pub id: String,
    pub exposed: bool,
    pub defect: Defect,
    /// Gestational age at enrollment (left truncation time), weeks.
    pub enroll_time: T,
    /// Gestational age at end of follow-up, weeks.
    pub end_time: T,
    pub end_reason: EndReason,
    pub covariates: Vec<CovariateValue<T>>,
}

impl<T: Scalar> SubjectRecord<T> {
    #[inline]
    pub fn is_event(&self) -> bool {
        self.end_reason.is_event()
    }

    #[inline]
    pub fn defect_observed(&self) -> bool {
        self.defect != Defect::Missing
    }

    pub fn validate(&self, row: Option<usize>) -> Result<()> {
        let q = self.enroll_time;
        let x = self.end_time;
        if !q.is_finite() || !x.is_finite() {
            return Err(Error::validation(row, format!("subject `{}` has non-finite times", self.id)));
        }
        if q < T::zero() {
            return Err(Error::validation(row, format!("subject `{}` has negative enrollment time", self.id)));
        }
        if q > x {
            return Err(Error::validation(
                row,
                format!("subject `{}` enrolled at {} after end of follow-up {}", self.id, q, x),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MObs {
    Zero,
    One,
    Unknown,
}

/// The six `O(D, M^obs)` groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObservedGroup {
    pub exposed: bool,
    pub m_obs: MObs,
}

impl ObservedGroup {
    pub const ALL: [ObservedGroup; 6] = [
        ObservedGroup { exposed: false, m_obs: MObs::Zero },
        ObservedGroup { exposed: false, m_obs: MObs::One },
        ObservedGroup { exposed: false, m_obs: MObs::Unknown },
        ObservedGroup { exposed: true, m_obs: MObs::Zero },
        ObservedGroup { exposed: true, m_obs: MObs::One },
        ObservedGroup { exposed: true, m_obs: MObs::Unknown },
    ];

    pub fn label(self) -> String {
        let m = match self.m_obs {
            MObs::Zero => "0",
            MObs::One => "1",
            MObs::Unknown => "?",
        };
        format!("O({},{})", u8::from(self.exposed), m)
    }

    pub fn index(self) -> usize {
        usize::from(self.exposed) * 3
            + match self.m_obs {
                MObs::Zero => 0,
                MObs::One => 1,
                MObs::Unknown => 2,
            }
    }
}

impl fmt::Display for ObservedGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub fn classify_observed_group<T>(record: &SubjectRecord<T>) -> ObservedGroup {
    let m_obs = match record.end_reason {
        EndReason::SabStillbirth => MObs::One,
        EndReason::Livebirth => MObs::Zero,
        EndReason::Tab | EndReason::Ltfu => MObs::Unknown,
    };
    ObservedGroup { exposed: record.exposed, m_obs }
}

/// Validated, immutable cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort<T> {
    records: Vec<SubjectRecord<T>>,
    schema: CovariateSchema,
}

impl<T: Scalar> Cohort<T> {
    pub fn new(records: Vec<SubjectRecord<T>>, schema: CovariateSchema) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(Some(i + 1))?;
            if r.covariates.len() != schema.len() {
                return Err(Error::validation(
                    Some(i + 1),
                    format!("expected {} covariates, found {}", schema.len(), r.covariates.len()),
                ));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(Some(i + 1), format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(Self { records, schema })
    }

    pub fn empty(schema: CovariateSchema) -> Self {
        Self { records: Vec::new(), schema }
    }

    #[inline]
    pub fn records(&self) -> &[SubjectRecord<T>] {
        &self.records
    }

    #[inline]
    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_exposed(&self) -> usize {
        self.records.iter().filter(|r| r.exposed).count()
    }

    /// Estimation needs both exposure arms.
    pub fn require_both_arms(&self) -> Result<()> {
        let n1 = self.n_exposed();
        if n1 == 0 || n1 == self.len() {
            return Err(Error::validation(None, "cohort needs at least one subject in each exposure arm"));
        }
        Ok(())
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.is_event()).count()
    }

    /// Bootstrap resample; ids get a `~k` suffix to stay unique.
    pub fn resample(&self, indices: &[usize]) -> Self {
        let records = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut r = self.records[i].clone();
                r.id = format!("{}~{}", r.id, k);
                r
            })
            .collect();
        Self { records, schema: self.schema.clone() }
    }

    /// Returns a copy with every record transformed; revalidates.
    pub fn map_records(&self, f: impl Fn(&SubjectRecord<T>) -> SubjectRecord<T>) -> Result<Self> {
        Self::new(self.records.iter().map(f).collect(), self.schema.clone())
    }

    /// Serializes to the cohort CSV format accepted by [`parse_cohort`].
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
        header.extend(self.schema.columns.iter().map(|c| c.name.as_str()));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.records {
            let mut cells = vec![
                r.id.clone(),
                u8::from(r.exposed).to_string(),
                r.defect.token().to_string(),
                r.enroll_time.to_string(),
                r.end_time.to_string(),
                r.end_reason.token().to_string(),
            ];
            for (v, spec) in r.covariates.iter().zip(&self.schema.columns) {
                cells.push(match (v, &spec.kind) {
                    (CovariateValue::Real(x), _) => x.to_string(),
                    (CovariateValue::Binary(b), _) => u8::from(*b).to_string(),
                    (CovariateValue::Level(l), CovariateKind::Categorical(levels)) => levels[*l].clone(),
                    (CovariateValue::Level(l), _) => l.to_string(),
                });
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_header(headers: &csv::StringRecord) -> Result<()> {
    for (j, expected) in FIXED_COLUMNS.iter().enumerate() {
        match headers.get(j) {
            Some(h) if h.trim() == *expected => {}
            other => {
                return Err(Error::Parse {
                    row: 0,
                    column: expected.to_string(),
                    message: format!("header column {} should be `{expected}`, found {other:?}", j + 1),
                })
            }
        }
    }
    Ok(())
}

/// Parses and validates a cohort CSV. Row indices in errors are 1-based data
/// rows (the header is row 0).
pub fn parse_cohort<T: Scalar>(csv_text: &str, schema: &CovariateSchema) -> Result<Cohort<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    check_header(&headers)?;
    let cov_headers: Vec<&str> = headers.iter().skip(FIXED_COLUMNS.len()).collect();
    // map schema columns onto csv positions
    let mut positions = Vec::with_capacity(schema.len());
    for spec in &schema.columns {
        let pos = cov_headers.iter().position(|h| *h == spec.name).ok_or_else(|| Error::Parse {
            row: 0,
            column: spec.name.clone(),
            message: "covariate column missing from header".into(),
        })?;
        positions.push(FIXED_COLUMNS.len() + pos);
    }

    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut schema = schema.clone();
    // collect undeclared categorical levels
    for (spec, &pos) in schema.columns.iter_mut().zip(&positions) {
        if let CovariateKind::Categorical(levels) = &mut spec.kind {
            if levels.is_empty() {
                let mut seen: Vec<String> = rows.iter().filter_map(|r| r.get(pos).map(str::to_string)).collect();
                seen.sort();
                seen.dedup();
                *levels = seen;
            }
        }
    }

    let parse_num = |row: usize, column: &str, s: &str| -> Result<T> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(T::c)
            .ok_or_else(|| Error::Parse { row, column: column.into(), message: format!("`{s}` is not a finite number") })
    };

    let mut records = Vec::with_capacity(rows.len());
    for (i, rec) in rows.iter().enumerate() {
        let row = i + 1;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        let exposed = match cell(1) {
            "1" => true,
            "0" => false,
            s => {
                return Err(Error::Parse { row, column: "exposed".into(), message: format!("`{s}` is not 0/1") })
            }
        };
        let defect = Defect::parse(cell(2)).ok_or_else(|| Error::Parse {
            row,
            column: "defect".into(),
            message: format!("`{}` is not 0/1/NA", cell(2)),
        })?;
        let enroll_time = parse_num(row, "enroll_ga", cell(3))?;
        let end_time = parse_num(row, "end_ga", cell(4))?;
        let end_reason = EndReason::parse(cell(5))
            .ok_or_else(|| Error::validation(Some(row), format!("unknown end_reason `{}`", cell(5))))?;
        let mut covariates = Vec::with_capacity(schema.len());
        for (spec, &pos) in schema.columns.iter().zip(&positions) {
            let s = cell(pos);
            let v = match &spec.kind {
                CovariateKind::Real => CovariateValue::Real(parse_num(row, &spec.name, s)?),
                CovariateKind::Binary => match s {
                    "1" => CovariateValue::Binary(true),
                    "0" => CovariateValue::Binary(false),
                    _ => {
                        return Err(Error::Parse {
                            row,
                            column: spec.name.clone(),
                            message: format!("`{s}` is not 0/1"),
                        })
                    }
                },
                CovariateKind::Categorical(levels) => {
                    CovariateValue::Level(levels.iter().position(|l| l == s).ok_or_else(|| Error::Parse {
                        row,
                        column: spec.name.clone(),
                        message: format!("unknown level `{s}`"),
                    })?)
                }
            };
            covariates.push(v);
        }
        records.push(SubjectRecord { id: cell(0).to_string(), exposed, defect, enroll_time, end_time, end_reason, covariates });
    }
    Cohort::new(records, schema)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DefectCounts {
    pub yes: usize,
    pub no: usize,
    pub missing: usize,
}

impl DefectCounts {
    fn add(&mut self, d: Defect) {
        match d {
            Defect::Yes => self.yes += 1,
            Defect::No => self.no += 1,
            Defect::Missing => self.missing += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.yes + self.no + self.missing
    }
}

/// Outcome rows for one exposure arm. `sab` and `stillbirth` split the
/// merged `sab_stillbirth` row at 20 weeks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ArmOutcomes {
    pub n: usize,
    pub live_birth: DefectCounts,
    pub sab_stillbirth: DefectCounts,
    pub sab: DefectCounts,
    pub stillbirth: DefectCounts,
    pub tab: DefectCounts,
    pub ltfu: DefectCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupRow {
    pub group: String,
    pub size: usize,
    pub birth_defects: usize,
    pub missing_defects: usize,
    pub principal_strata: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CohortSummary {
    pub n: usize,
    pub exposed: ArmOutcomes,
    pub unexposed: ArmOutcomes,
    pub observed_groups: Vec<GroupRow>,
}

impl CohortSummary {
    pub fn group(&self, g: ObservedGroup) -> &GroupRow {
        &self.observed_groups[g.index()]
    }

    pub fn group_sizes(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for (o, g) in out.iter_mut().zip(&self.observed_groups) {
            *o = g.size;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn summarize<T: Scalar>(cohort: &Cohort<T>) -> CohortSummary {
    let mut arms: BTreeMap<bool, ArmOutcomes> = BTreeMap::new();
    arms.insert(false, ArmOutcomes::default());
    arms.insert(true, ArmOutcomes::default());
    let mut groups = [(0usize, 0usize, 0usize); 6];
    let still = T::c(STILLBIRTH_WEEK);
    for r in cohort.records() {
        let arm = arms.get_mut(&r.exposed).expect("both arms present");
        arm.n += 1;
        match r.end_reason {
            EndReason::Livebirth => arm.live_birth.add(r.defect),
            EndReason::SabStillbirth => {
                arm.sab_stillbirth.add(r.defect);
                if r.end_time >= still {
                    arm.stillbirth.add(r.defect);
                } else {
                    arm.sab.add(r.defect);
                }
            }
            EndReason::Tab => arm.tab.add(r.defect),
            EndReason::Ltfu => arm.ltfu.add(r.defect),
        }
        let g = &mut groups[classify_observed_group(r).index()];
        g.0 += 1;
        if r.defect == Defect::Yes {
            g.1 += 1;
        }
        if r.defect == Defect::Missing {
            g.2 += 1;
        }
    }
    let observed_groups = ObservedGroup::ALL
        .iter()
        .zip(groups)
        .map(|(g, (size, yes, missing))| GroupRow {
            group: g.label(),
            size,
            birth_defects: yes,
            missing_defects: missing,
            principal_strata: crate::strata::consistent_strata(*g)
                .iter()
                .map(|s| s.label())
                .collect::<Vec<_>>()
                .join(", "),
        })
        .collect();
    CohortSummary {
        n: cohort.len(),
        unexposed: arms.remove(&false).unwrap_or_default(),
        exposed: arms.remove(&true).unwrap_or_default(),
        observed_groups,
    }
}
