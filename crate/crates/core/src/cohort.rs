//! Pathology-driven breast labels and test-set exam filtering.

use std::collections::{BTreeMap, HashMap};

use chrono::{Days, Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Laterality;

/// Pathology within this many days after the exam labels it.
pub const LABEL_WINDOW_DAYS: u64 = 120;
pub const FOLLOW_UP_MONTHS: u32 = 6;
pub const NEGATIVE_CONFIRMATION_MONTHS: u32 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExamKind {
    ScreeningMammo,
    DiagnosticMammo,
    OtherBreastImaging,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub kind: ExamKind,
    pub birads: Option<u8>,
    #[serde(default)]
    pub occult_left: bool,
    #[serde(default)]
    pub occult_right: bool,
}

impl ExamRecord {
    pub fn validate(&self) -> Result<()> {
        match self.birads {
            Some(b) if b > 6 => Err(Error::invalid(format!(
                "exam {}: BI-RADS {b} outside 0-6",
                self.exam_id
            ))),
            _ => Ok(()),
        }
    }

    pub fn occult(&self, lat: Laterality) -> bool {
        match lat {
            Laterality::Left => self.occult_left,
            Laterality::Right => self.occult_right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub laterality: Laterality,
    pub malignant: bool,
    pub benign: bool,
}

impl PathologyRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.malignant && !self.benign {
            return Err(Error::invalid(format!(
                "pathology record for patient {} on {} sets neither flag",
                self.patient_id, self.date
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BreastLabels {
    pub malignant: bool,
    pub benign: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExamLabels {
    pub left: BreastLabels,
    pub right: BreastLabels,
}

impl ExamLabels {
    pub fn get(&self, lat: Laterality) -> BreastLabels {
        match lat {
            Laterality::Left => self.left,
            Laterality::Right => self.right,
        }
    }
}

/// Inclusive `[date, date + months]`, end clamped to the month's last day.
pub fn month_window(date: NaiveDate, months: u32) -> (NaiveDate, NaiveDate) {
    let end = date.checked_add_months(Months::new(months)).unwrap_or(NaiveDate::MAX);
    (date, end)
}

fn in_label_window(exam: &ExamRecord, p: &PathologyRecord) -> bool {
    let end = exam
        .date
        .checked_add_days(Days::new(LABEL_WINDOW_DAYS))
        .unwrap_or(NaiveDate::MAX);
    p.patient_id == exam.patient_id && exam.date <= p.date && p.date <= end
}

/// Per-breast flags from pathology dated 0 to 120 days after the exam.
pub fn assign_breast_labels(exam: &ExamRecord, pathology: &[PathologyRecord]) -> ExamLabels {
    let mut out = ExamLabels::default();
    for p in pathology.iter().filter(|p| in_label_window(exam, p)) {
        let slot = match p.laterality {
            Laterality::Left => &mut out.left,
            Laterality::Right => &mut out.right,
        };
        slot.malignant |= p.malignant;
        slot.benign |= p.benign;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Malignant,
    Benign,
    Negative,
}

pub fn initial_assignment(exam: &ExamRecord, pathology: &[PathologyRecord]) -> Assignment {
    let l = assign_breast_labels(exam, pathology);
    if l.left.malignant || l.right.malignant {
        Assignment::Malignant
    } else if l.left.benign || l.right.benign {
        Assignment::Benign
    } else {
        Assignment::Negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    E1,
    E2,
    E3,
    E4,
    E5,
    OccultOnly,
    Pass,
}

pub const DEFAULT_RULE_ORDER: [Rule; 6] = [Rule::E1, Rule::E2, Rule::E3, Rule::E4, Rule::E5, Rule::OccultOnly];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub exam_id: String,
    pub included: bool,
    pub rule: Rule,
    pub assignment: Assignment,
}

/// All imaging and pathology records.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub exams: Vec<ExamRecord>,
    pub pathology: Vec<PathologyRecord>,
}

struct PatientView<'a> {
    exams: Vec<&'a ExamRecord>,
    pathology: Vec<PathologyRecord>,
}

fn others_in<'a>(
    view: &'a PatientView<'_>,
    exam: &'a ExamRecord,
    months: u32,
) -> impl Iterator<Item = &'a ExamRecord> + 'a {
    let (start, end) = month_window(exam.date, months);
    view.exams
        .iter()
        .copied()
        .filter(move |e| e.exam_id != exam.exam_id && start <= e.date && e.date <= end)
}

fn triggers(rule: Rule, exam: &ExamRecord, assignment: Assignment, view: &PatientView<'_>) -> bool {
    let birads = exam.birads;
    let negative_birads = matches!(birads, Some(1 | 2));
    match rule {
        Rule::E1 => !matches!(birads, Some(0..=2)),
        Rule::E2 => assignment == Assignment::Malignant && negative_birads,
        Rule::E3 => assignment == Assignment::Benign && negative_birads,
        Rule::E4 => {
            if assignment != Assignment::Negative || birads != Some(0) {
                return false;
            }
            let follow_ups: Vec<&ExamRecord> = others_in(view, exam, FOLLOW_UP_MONTHS).collect();
            follow_ups.is_empty() || !follow_ups.iter().all(|e| matches!(e.birads, Some(1..=3)))
        }
        Rule::E5 => {
            assignment == Assignment::Negative
                && negative_birads
                && others_in(view, exam, NEGATIVE_CONFIRMATION_MONTHS).next().is_some()
        }
        Rule::OccultOnly => {
            if assignment != Assignment::Malignant {
                return false;
            }
            let labels = assign_breast_labels(exam, &view.pathology);
            Laterality::BOTH
                .iter()
                .filter(|&&lat| labels.get(lat).malignant)
                .all(|&lat| exam.occult(lat))
        }
        Rule::Pass => false,
    }
}

/// Apply the exclusion rules to every screening exam with the default
/// precedence.
pub fn filter_test_set(timeline: &Timeline) -> Result<Vec<FilterOutcome>> {
    filter_test_set_with(timeline, &DEFAULT_RULE_ORDER)
}

/// As [`filter_test_set`] with an explicit rule precedence.
pub fn filter_test_set_with(timeline: &Timeline, order: &[Rule]) -> Result<Vec<FilterOutcome>> {
    let mut patients: BTreeMap<&str, PatientView<'_>> = BTreeMap::new();
    for e in &timeline.exams {
        e.validate()?;
        let v = patients.entry(e.patient_id.as_str()).or_insert_with(|| PatientView {
            exams: Vec::new(),
            pathology: Vec::new(),
        });
        if let Some(prev) = v.exams.last() {
            if prev.date > e.date {
                return Err(Error::invalid(format!(
                    "timeline for patient {} is not sorted by date at exam {}",
                    e.patient_id, e.exam_id
                )));
            }
        }
        v.exams.push(e);
    }
    for p in &timeline.pathology {
        p.validate()?;
        if let Some(v) = patients.get_mut(p.patient_id.as_str()) {
            v.pathology.push(p.clone());
        }
    }
    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, e) in timeline.exams.iter().enumerate() {
        if position.insert(e.exam_id.as_str(), i).is_some() {
            return Err(Error::invalid(format!("exam id {} appears twice", e.exam_id)));
        }
    }

    let per_patient: Vec<Vec<(usize, FilterOutcome)>> = patients
        .par_iter()
        .map(|(_, view)| {
            view.exams
                .iter()
                .filter(|e| e.kind == ExamKind::ScreeningMammo)
                .map(|&exam| {
                    let assignment = initial_assignment(exam, &view.pathology);
                    let rule = order
                        .iter()
                        .copied()
                        .find(|&r| triggers(r, exam, assignment, view))
                        .unwrap_or(Rule::Pass);
                    (
                        position[exam.exam_id.as_str()],
                        FilterOutcome {
                            exam_id: exam.exam_id.clone(),
                            included: rule == Rule::Pass,
                            rule,
                            assignment,
                        },
                    )
                })
                .collect()
        })
        .collect();
    let mut all: Vec<(usize, FilterOutcome)> = per_patient.into_iter().flatten().collect();
    all.sort_by_key(|(pos, _)| *pos);
    Ok(all.into_iter().map(|(_, o)| o).collect())
}

/// Outcome counts per rule.
pub fn rule_histogram(outcomes: &[FilterOutcome]) -> BTreeMap<Rule, usize> {
    let mut h = BTreeMap::new();
    for o in outcomes {
        *h.entry(o.rule).or_insert(0) += 1;
    }
    h
}
