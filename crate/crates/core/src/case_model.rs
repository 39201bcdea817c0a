//! Domain types for inpatient cases: the department / disease / treatment
//! taxonomies, diagnosis records, and the JSON-lines case wire format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaseError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown {task} label: {token:?}")]
    UnknownLabel { task: Task, token: String },
}

/// The three classification tasks along the inpatient pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Triage,
    Diagnosis,
    Treatment,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Triage => "triage",
            Task::Diagnosis => "diagnosis",
            Task::Treatment => "treatment",
        }
    }

    /// Number of answer options for this task (9 / 17 / 16).
    pub fn n_classes(&self) -> usize {
        match self {
            Task::Triage => DEPARTMENTS.len(),
            Task::Diagnosis => DISEASE_CATEGORIES.len(),
            Task::Treatment => TREATMENTS.len(),
        }
    }

    /// Canonical (code, long title) pairs for this task's options.
    pub fn options(&self) -> Vec<(&'static str, &'static str)> {
        match self {
            Task::Triage => DEPARTMENTS.iter().map(|d| (d.code, d.long_title)).collect(),
            Task::Diagnosis => DISEASE_CATEGORIES
                .iter()
                .map(|d| (d.code, d.long_title))
                .collect(),
            Task::Treatment => TREATMENTS.iter().map(|t| (t.code, t.long_title)).collect(),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

struct LabelEntry {
    code: &'static str,
    long_title: &'static str,
}

/// The nine ICU-level triage departments.
static DEPARTMENTS: [LabelEntry; 9] = [
    LabelEntry { code: "CVICU", long_title: "Cardiac Vascular Intensive Care Unit" },
    LabelEntry { code: "CCU", long_title: "Coronary Care Unit" },
    LabelEntry { code: "MICU", long_title: "Medical Intensive Care Unit" },
    LabelEntry { code: "MSICU", long_title: "Medical and Surgical Intensive Care Unit" },
    LabelEntry { code: "Neuro Intermediate", long_title: "Neuro Intermediate" },
    LabelEntry { code: "Neuro Stepdown", long_title: "Neuro Stepdown" },
    LabelEntry { code: "Neuro SICU", long_title: "Neuro Surgical Intensive Care Unit" },
    LabelEntry { code: "SICU", long_title: "Surgical Intensive Care Unit" },
    LabelEntry { code: "TSICU", long_title: "Trauma Surgical Intensive Care Unit" },
];

/// The seventeen broad disease categories, D1..D17.
static DISEASE_CATEGORIES: [LabelEntry; 17] = [
    LabelEntry {
        code: "D1",
        long_title:
            "Symptoms, signs, and abnormal clinical and laboratory findings, not elsewhere classified",
    },
    LabelEntry {
        code: "D2",
        long_title: "Symptoms, signs and abnormal clinical and laboratory findings",
    },
    LabelEntry { code: "D3", long_title: "Pregnancy, childbirth and the puerperium" },
    LabelEntry { code: "D4", long_title: "Neoplasms" },
    LabelEntry { code: "D5", long_title: "Mental and behavioral disorders" },
    LabelEntry {
        code: "D6",
        long_title: "Injury, poisoning, and certain other consequences of external causes",
    },
    LabelEntry { code: "D7", long_title: "Endocrine, nutritional and metabolic diseases" },
    LabelEntry { code: "D8", long_title: "Diseases of the skin and subcutaneous tissue" },
    LabelEntry { code: "D9", long_title: "Diseases of the respiratory system" },
    LabelEntry { code: "D10", long_title: "Diseases of the nervous system and sense organs" },
    LabelEntry {
        code: "D11",
        long_title: "Diseases of the musculoskeletal system and connective tissue",
    },
    LabelEntry { code: "D12", long_title: "Diseases of the genitourinary system" },
    LabelEntry { code: "D13", long_title: "Diseases of the digestive system" },
    LabelEntry { code: "D14", long_title: "Diseases of the circulatory system" },
    LabelEntry {
        code: "D15",
        long_title:
            "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism",
    },
    LabelEntry {
        code: "D16",
        long_title: "Congenital malformations, deformations and chromosomal abnormalities",
    },
    LabelEntry { code: "D17", long_title: "Certain infectious and parasitic diseases" },
];

/// The sixteen standardized treatment pathway options, T1..T16.
static TREATMENTS: [LabelEntry; 16] = [
    LabelEntry {
        code: "T1",
        long_title: "Vascular surgery, mainly refers to surgery related to the circulatory system",
    },
    LabelEntry {
        code: "T2",
        long_title: "Thoracic surgery, mainly refers to chest surgery between the abdomen and the neck",
    },
    LabelEntry {
        code: "T3",
        long_title:
            "Trauma surgical treatment, physical injury or damage caused by external physical factors",
    },
    LabelEntry {
        code: "T4",
        long_title:
            "General surgical treatment, mainly refers to types of surgery that cannot be classified by specialty",
    },
    LabelEntry {
        code: "T5",
        long_title: "Plastic treatment, mainly for the repair or reconstruction of the human body",
    },
    LabelEntry {
        code: "T6",
        long_title: "Orthopedic surgical treatment, mainly involving the musculoskeletal system",
    },
    LabelEntry {
        code: "T7",
        long_title: "Orthopedic treatment, mainly involving the musculoskeletal system",
    },
    LabelEntry { code: "T8", long_title: "Obstetrics, maternal classification and refusal" },
    LabelEntry {
        code: "T9",
        long_title: "Neurosurgery treatment, surgical treatment related to the brain",
    },
    LabelEntry {
        code: "T10",
        long_title: "Neurology treatment, non-surgical treatment related to the brain",
    },
    LabelEntry { code: "T11", long_title: "General medical treatment" },
    LabelEntry {
        code: "T12",
        long_title: "Gynecological treatment, female reproductive system and breasts, etc.",
    },
    LabelEntry {
        code: "T13",
        long_title: "Urogenital treatment, urinary system and reproductive system",
    },
    LabelEntry {
        code: "T14",
        long_title: "Otolaryngology treatment mainly for the ear, nose and throat-related areas",
    },
    LabelEntry {
        code: "T15",
        long_title: "Cardiovascular surgery treatment, surgical treatment of cardiovascular diseases",
    },
    LabelEntry {
        code: "T16",
        long_title: "Cardiovascular medicine treatment, conservative treatment of cardiovascular diseases",
    },
];

macro_rules! label_type {
    ($(#[$meta:meta])* $name:ident, $table:ident, $task:expr) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(usize);

        impl $name {
            pub fn all() -> impl Iterator<Item = $name> {
                (0..$table.len()).map($name)
            }

            /// Zero-based position in the canonical option table.
            pub fn index(&self) -> usize {
                self.0
            }

            pub fn code(&self) -> &'static str {
                $table[self.0].code
            }

            pub fn long_title(&self) -> &'static str {
                $table[self.0].long_title
            }

            pub fn from_token(token: &str) -> Result<$name, CaseError> {
                match label_from_token($task, token)? {
                    Label::$name(v) => Ok(v),
                    _ => unreachable!("task/label variant mismatch"),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.code())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.code())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let token = String::deserialize(d)?;
                $name::from_token(&token).map_err(serde::de::Error::custom)
            }
        }
    };
}

label_type!(
    /// One of the nine triage departments (e.g. `CCU`).
    DepartmentLabel, DEPARTMENTS, Task::Triage
);
label_type!(
    /// One of the seventeen disease categories, `D1`..`D17`.
    DiseaseCategory, DISEASE_CATEGORIES, Task::Diagnosis
);
label_type!(
    /// One of the sixteen treatment options, `T1`..`T16`.
    TreatmentLabel, TREATMENTS, Task::Treatment
);

/// A resolved answer label for any of the three tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    DepartmentLabel(DepartmentLabel),
    DiseaseCategory(DiseaseCategory),
    TreatmentLabel(TreatmentLabel),
}

impl Label {
    pub fn code(&self) -> &'static str {
        match self {
            Label::DepartmentLabel(v) => v.code(),
            Label::DiseaseCategory(v) => v.code(),
            Label::TreatmentLabel(v) => v.code(),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Label::DepartmentLabel(v) => v.index(),
            Label::DiseaseCategory(v) => v.index(),
            Label::TreatmentLabel(v) => v.index(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Label::DepartmentLabel(_) => Task::Triage,
            Label::DiseaseCategory(_) => Task::Diagnosis,
            Label::TreatmentLabel(_) => Task::Treatment,
        }
    }
}

/// Canonicalize a free-form token into the matching label for `task`.
///
/// Matching proceeds in three rounds, all case-insensitive on trimmed input:
/// code equality, whole long-title equality, then unique substring of a long
/// title. Anything that fails all three (or matches more than one title in
/// the substring round) is an `UnknownLabel`.
pub fn label_from_token(task: Task, token: &str) -> Result<Label, CaseError> {
    let table: &[LabelEntry] = match task {
        Task::Triage => &DEPARTMENTS,
        Task::Diagnosis => &DISEASE_CATEGORIES,
        Task::Treatment => &TREATMENTS,
    };
    let wrap = |idx: usize| match task {
        Task::Triage => Label::DepartmentLabel(DepartmentLabel(idx)),
        Task::Diagnosis => Label::DiseaseCategory(DiseaseCategory(idx)),
        Task::Treatment => Label::TreatmentLabel(TreatmentLabel(idx)),
    };
    let needle = token.trim().to_lowercase();
    if needle.is_empty() {
        return Err(CaseError::UnknownLabel { task, token: token.to_string() });
    }
    if let Some(idx) = table.iter().position(|e| e.code.to_lowercase() == needle) {
        return Ok(wrap(idx));
    }
    if let Some(idx) = table.iter().position(|e| e.long_title.to_lowercase() == needle) {
        return Ok(wrap(idx));
    }
    let mut hits = table
        .iter()
        .enumerate()
        .filter(|(_, e)| e.long_title.to_lowercase().contains(&needle));
    match (hits.next(), hits.next()) {
        (Some((idx, _)), None) => Ok(wrap(idx)),
        _ => Err(CaseError::UnknownLabel { task, token: token.to_string() }),
    }
}

/// One diagnosis row attached to a case. `priority` 1 is the primary
/// diagnosis and the gold label for the diagnosis task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub icd_code: String,
    pub icd_version: u8,
    pub long_title: String,
    pub category: DiseaseCategory,
    pub priority: u32,
}

pub const UNKNOWN_DEMOGRAPHIC: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub language: String,
    pub marital_status: String,
    pub race: String,
    pub gender: String,
}

impl Demographics {
    /// All four fields set to the `UNKNOWN` token.
    pub fn unknown() -> Self {
        Demographics {
            language: UNKNOWN_DEMOGRAPHIC.into(),
            marital_status: UNKNOWN_DEMOGRAPHIC.into(),
            race: UNKNOWN_DEMOGRAPHIC.into(),
            gender: UNKNOWN_DEMOGRAPHIC.into(),
        }
    }
}

/// One inpatient episode with its gold labels for all three tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientCase {
    pub case_id: String,
    pub demographics: Demographics,
    pub radiology_report: String,
    pub medical_history: String,
    pub diagnoses: Vec<DiagnosisRecord>,
    pub department: DepartmentLabel,
    pub treatment: TreatmentLabel,
}

impl PatientCase {
    /// The priority-1 disease category, the gold label for diagnosis.
    pub fn primary_diagnosis(&self) -> DiseaseCategory {
        self.diagnoses[0].category
    }

    fn validate(mut self) -> Result<Self, CaseError> {
        if self.case_id.trim().is_empty() {
            return Err(CaseError::MalformedRecord("empty case_id".into()));
        }
        if self.radiology_report.trim().is_empty() {
            return Err(CaseError::MalformedRecord(format!(
                "case {}: empty radiology_report",
                self.case_id
            )));
        }
        if self.diagnoses.is_empty() {
            return Err(CaseError::MalformedRecord(format!(
                "case {}: no diagnoses",
                self.case_id
            )));
        }
        if self.diagnoses.len() > 3 {
            return Err(CaseError::MalformedRecord(format!(
                "case {}: {} diagnoses, at most 3 allowed",
                self.case_id,
                self.diagnoses.len()
            )));
        }
        if self.diagnoses.iter().any(|d| d.priority < 1) {
            return Err(CaseError::MalformedRecord(format!(
                "case {}: diagnosis priority below 1",
                self.case_id
            )));
        }
        if self.diagnoses.iter().any(|d| d.icd_version != 9 && d.icd_version != 10) {
            return Err(CaseError::MalformedRecord(format!(
                "case {}: icd_version outside {{9,10}}",
                self.case_id
            )));
        }
        self.diagnoses.sort_by_key(|d| d.priority);
        for field in [
            &mut self.demographics.language,
            &mut self.demographics.marital_status,
            &mut self.demographics.race,
            &mut self.demographics.gender,
        ] {
            if field.trim().is_empty() {
                *field = UNKNOWN_DEMOGRAPHIC.into();
            }
        }
        Ok(self)
    }
}

/// Parse one JSON-lines record into a validated `PatientCase`.
///
/// Diagnoses are re-sorted ascending by priority; blank demographic values
/// become the `UNKNOWN` token.
pub fn parse_case(line: &str) -> Result<PatientCase, CaseError> {
    let case: PatientCase = serde_json::from_str(line)
        .map_err(|e| CaseError::MalformedRecord(e.to_string()))?;
    case.validate()
}

/// Serialize a case to its single-line JSON wire form.
pub fn serialize_case(case: &PatientCase) -> String {
    serde_json::to_string(case).expect("case serialization is infallible")
}

/// A seeded train/test partition of the built dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PatientCase>,
    pub test: Vec<PatientCase>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{"case_id":"10001-2001","demographics":{"language":"English","marital_status":"MARRIED","race":"WHITE","gender":"F"},"radiology_report":"Chest x-ray shows clear lungs.","medical_history":"HTN, HLD","diagnoses":[{"icd_code":"I214","icd_version":10,"long_title":"NSTEMI","category":"D14","priority":1}],"department":"CCU","treatment":"T16"}"#
            .to_string()
    }

    #[test]
    fn taxonomy_cardinalities() {
        assert_eq!(DepartmentLabel::all().count(), 9);
        assert_eq!(DiseaseCategory::all().count(), 17);
        assert_eq!(TreatmentLabel::all().count(), 16);
    }

    #[test]
    fn department_codes_and_titles_are_bijective() {
        let codes: std::collections::HashSet<_> =
            DepartmentLabel::all().map(|d| d.code()).collect();
        let titles: std::collections::HashSet<_> =
            DepartmentLabel::all().map(|d| d.long_title()).collect();
        assert_eq!(codes.len(), 9);
        assert_eq!(titles.len(), 9);
    }

    #[test]
    fn parse_case_maps_fields() {
        let case = parse_case(&sample_json()).unwrap();
        assert_eq!(case.department.code(), "CCU");
        assert_eq!(case.primary_diagnosis().code(), "D14");
        assert_eq!(case.treatment.code(), "T16");
    }

    #[test]
    fn parse_case_rejects_empty_radiology() {
        let line = sample_json().replace("Chest x-ray shows clear lungs.", "");
        let err = parse_case(&line).unwrap_err();
        assert!(matches!(err, CaseError::MalformedRecord(_)));
    }

    #[test]
    fn parse_case_sorts_diagnoses_by_priority() {
        let line = r#"{"case_id":"1-1","demographics":{"language":"","marital_status":"","race":"","gender":""},"radiology_report":"r","medical_history":"","diagnoses":[{"icd_code":"B","icd_version":10,"long_title":"b","category":"D2","priority":2},{"icd_code":"A","icd_version":10,"long_title":"a","category":"D1","priority":1},{"icd_code":"C","icd_version":10,"long_title":"c","category":"D3","priority":3}],"department":"MICU","treatment":"T11"}"#;
        let case = parse_case(line).unwrap();
        let priorities: Vec<u32> = case.diagnoses.iter().map(|d| d.priority).collect();
        assert_eq!(priorities, vec![1, 2, 3]);
        assert_eq!(case.primary_diagnosis().code(), "D1");
        // blank demographics normalize to the UNKNOWN token
        assert_eq!(case.demographics.language, UNKNOWN_DEMOGRAPHIC);
    }

    #[test]
    fn parse_case_rejects_four_diagnoses() {
        let line = r#"{"case_id":"1-1","demographics":{"language":"x","marital_status":"x","race":"x","gender":"x"},"radiology_report":"r","medical_history":"","diagnoses":[{"icd_code":"A","icd_version":10,"long_title":"a","category":"D1","priority":1},{"icd_code":"B","icd_version":10,"long_title":"b","category":"D2","priority":2},{"icd_code":"C","icd_version":10,"long_title":"c","category":"D3","priority":3},{"icd_code":"D","icd_version":10,"long_title":"d","category":"D4","priority":4}],"department":"MICU","treatment":"T11"}"#;
        assert!(parse_case(line).is_err());
    }

    #[test]
    fn serialize_round_trips() {
        let case = parse_case(&sample_json()).unwrap();
        let again = parse_case(&serialize_case(&case)).unwrap();
        assert_eq!(case, again);
    }

    #[test]
    fn label_from_token_code_case_insensitive() {
        let label = label_from_token(Task::Diagnosis, "d5").unwrap();
        assert_eq!(label.code(), "D5");
    }

    #[test]
    fn label_from_token_long_title() {
        let label = label_from_token(Task::Triage, "Coronary Care Unit").unwrap();
        assert_eq!(label.code(), "CCU");
    }

    #[test]
    fn label_from_token_out_of_range() {
        let err = label_from_token(Task::Treatment, "T99").unwrap_err();
        assert!(matches!(err, CaseError::UnknownLabel { .. }));
    }

    #[test]
    fn label_from_token_unique_substring() {
        let label = label_from_token(Task::Diagnosis, "respiratory").unwrap();
        assert_eq!(label.code(), "D9");
        // shared substring of D1 and D2 titles must not resolve
        assert!(label_from_token(Task::Diagnosis, "abnormal clinical and laboratory findings")
            .is_err());
    }

    #[test]
    fn label_from_token_total_over_codes_and_titles() {
        for task in [Task::Triage, Task::Diagnosis, Task::Treatment] {
            for (code, title) in task.options() {
                assert_eq!(label_from_token(task, code).unwrap().code(), code);
                assert_eq!(label_from_token(task, title).unwrap().code(), code);
            }
        }
    }

    #[test]
    fn near_duplicate_disease_titles_stay_distinct() {
        let d1 = label_from_token(
            Task::Diagnosis,
            "Symptoms, signs, and abnormal clinical and laboratory findings, not elsewhere classified",
        )
        .unwrap();
        let d2 = label_from_token(
            Task::Diagnosis,
            "Symptoms, signs and abnormal clinical and laboratory findings",
        )
        .unwrap();
        assert_eq!(d1.code(), "D1");
        assert_eq!(d2.code(), "D2");
    }
}
