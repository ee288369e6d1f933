//! Label exams from pathology and apply the test-set exclusion rules to a
//! few short patient histories.

use chrono::NaiveDate;

use mammoscreen::cohort::{filter_test_set, rule_histogram, ExamKind, ExamRecord, PathologyRecord, Timeline};
use mammoscreen::Laterality;

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn exam(id: &str, patient: &str, day: &str, kind: ExamKind, birads: u8) -> ExamRecord {
    ExamRecord {
        exam_id: id.into(),
        patient_id: patient.into(),
        date: date(day),
        kind,
        birads: Some(birads),
        occult_left: false,
        occult_right: false,
    }
}

fn main() -> mammoscreen::Result<()> {
    use ExamKind::*;
    let timeline = Timeline {
        exams: vec![
            exam("a-2020", "a", "2020-01-10", ScreeningMammo, 1),
            exam("a-2021", "a", "2021-01-12", ScreeningMammo, 1),
            exam("b-recall", "b", "2021-02-01", ScreeningMammo, 0),
            exam("b-diag", "b", "2021-03-01", DiagnosticMammo, 2),
            exam("c-recall", "c", "2021-04-05", ScreeningMammo, 0),
            exam("d-screen", "d", "2021-05-20", ScreeningMammo, 2),
            exam("e-screen", "e", "2021-06-01", ScreeningMammo, 4),
            exam("f-screen", "f", "2021-06-15", ScreeningMammo, 0),
        ],
        pathology: vec![
            PathologyRecord {
                patient_id: "d".into(),
                date: date("2021-07-01"),
                laterality: Laterality::Right,
                malignant: true,
                benign: false,
            },
            PathologyRecord {
                patient_id: "f".into(),
                date: date("2021-07-10"),
                laterality: Laterality::Left,
                malignant: true,
                benign: false,
            },
        ],
    };
    let outcomes = filter_test_set(&timeline)?;
    for o in &outcomes {
        let verdict = if o.included { "keep" } else { "drop" };
        println!("{:<10} {:?} -> {verdict} ({:?})", o.exam_id, o.assignment, o.rule);
    }
    println!("{:?}", rule_histogram(&outcomes));
    Ok(())
}
