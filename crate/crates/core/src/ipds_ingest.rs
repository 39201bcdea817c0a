//! Dataset construction from MIMIC-shaped CSV tables: multi-table joins,
//! null-radiology filtering, ICD recategorization, priority-diagnosis
//! selection, service-to-treatment mapping, and the seeded train/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_model::{
    label_from_token, serialize_case, DatasetSplit, Demographics, DepartmentLabel,
    DiagnosisRecord, DiseaseCategory, Label, PatientCase, Task, TreatmentLabel,
    UNKNOWN_DEMOGRAPHIC,
};
use crate::model_backends::EmbedBackend;
use crate::record_review::{review_history, ReviewConfig};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing table: {0}")]
    MissingTable(String),
    #[error("table {table} missing column {column}")]
    MissingColumn { table: String, column: String },
    #[error("insufficient cases: have {have}, need more than {need}")]
    InsufficientCases { have: usize, need: usize },
    #[error("unmapped ICD code {code:?} (version {version})")]
    UnmappedCode { code: String, version: u8 },
    #[error("bad mapping file {file}: line {line}: {reason}")]
    BadMapFile { file: String, line: usize, reason: String },
    #[error("csv error in {0}: {1}")]
    Csv(String, #[source] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fully materialized CSV table with by-name column access.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    col_index: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn load(dir: &Path, file: &str, required: &[&str]) -> Result<Table, IngestError> {
        let path = dir.join(file);
        if !path.exists() {
            return Err(IngestError::MissingTable(file.to_string()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| IngestError::Csv(file.to_string(), e))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| IngestError::Csv(file.to_string(), e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let col_index: HashMap<String, usize> =
            headers.into_iter().enumerate().map(|(i, h)| (h, i)).collect();
        for col in required {
            if !col_index.contains_key(*col) {
                return Err(IngestError::MissingColumn {
                    table: file.to_string(),
                    column: col.to_string(),
                });
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| IngestError::Csv(file.to_string(), e))?;
            rows.push(record.iter().map(|f| f.to_string()).collect());
        }
        Ok(Table { name: file.to_string(), col_index, rows })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.col_index.contains_key(name)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn get<'a>(&'a self, row: &'a [String], col: &str) -> &'a str {
        self.col_index.get(col).map(|&i| row.get(i).map_or("", |s| s.as_str())).unwrap_or("")
    }

    fn rows(&self) -> impl Iterator<Item = &Vec<String>> {
        self.rows.iter()
    }
}

/// The eight source tables the builder consumes.
#[derive(Debug)]
pub struct SourceTables {
    pub admissions: Table,
    pub patients: Table,
    pub d_icd_diagnoses: Table,
    pub diagnoses_icd: Table,
    pub services: Table,
    pub discharge: Table,
    pub radiology: Table,
    pub icustays: Table,
}

/// Load and column-validate the source CSVs from one directory.
pub fn load_source_tables(dir: &Path) -> Result<SourceTables, IngestError> {
    Ok(SourceTables {
        admissions: Table::load(
            dir,
            "admissions.csv",
            &["subject_id", "hadm_id", "language", "marital_status", "race"],
        )?,
        patients: Table::load(dir, "patients.csv", &["subject_id", "gender"])?,
        d_icd_diagnoses: Table::load(
            dir,
            "d_icd_diagnoses.csv",
            &["icd_code", "icd_version", "long_title"],
        )?,
        diagnoses_icd: Table::load(
            dir,
            "diagnoses_icd.csv",
            &["subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"],
        )?,
        services: Table::load(dir, "services.csv", &["subject_id", "hadm_id", "curr_service"])?,
        discharge: Table::load(dir, "discharge.csv", &["subject_id", "hadm_id", "text"])?,
        radiology: Table::load(dir, "radiology.csv", &["subject_id", "hadm_id", "text"])?,
        icustays: Table::load(
            dir,
            "icustays.csv",
            &["subject_id", "hadm_id", "first_careunit", "intime"],
        )?,
    })
}

/// One code-prefix interval mapped to a disease category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcdRange {
    pub version: u8,
    pub lo: String,
    pub hi: String,
    pub category: DiseaseCategory,
}

/// Interval map from ICD code prefixes to the 17 categories. Longest-prefix
/// interval wins; same-length intervals must not overlap within a version.
#[derive(Debug, Clone)]
pub struct IcdCategoryMap {
    ranges: Vec<IcdRange>,
}

const DEFAULT_ICD_MAP: &str = include_str!("../data/icd_map.tsv");

impl IcdCategoryMap {
    pub fn parse(text: &str, file: &str) -> Result<IcdCategoryMap, IngestError> {
        let mut ranges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("version\t") {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(IngestError::BadMapFile {
                    file: file.to_string(),
                    line: lineno + 1,
                    reason: format!("expected 4 tab-separated fields, got {}", parts.len()),
                });
            }
            let version: u8 = parts[0].parse().map_err(|_| IngestError::BadMapFile {
                file: file.to_string(),
                line: lineno + 1,
                reason: format!("bad version {:?}", parts[0]),
            })?;
            if version != 9 && version != 10 {
                return Err(IngestError::BadMapFile {
                    file: file.to_string(),
                    line: lineno + 1,
                    reason: format!("version {version} not in {{9,10}}"),
                });
            }
            let lo = normalize_icd(parts[1]);
            let hi = normalize_icd(parts[2]);
            if lo.is_empty() || lo.len() != hi.len() || lo > hi {
                return Err(IngestError::BadMapFile {
                    file: file.to_string(),
                    line: lineno + 1,
                    reason: format!("bad interval {:?}..{:?}", parts[1], parts[2]),
                });
            }
            let category = match label_from_token(Task::Diagnosis, parts[3]) {
                Ok(Label::DiseaseCategory(c)) => c,
                _ => {
                    return Err(IngestError::BadMapFile {
                        file: file.to_string(),
                        line: lineno + 1,
                        reason: format!("unknown category {:?}", parts[3]),
                    })
                }
            };
            ranges.push(IcdRange { version, lo, hi, category });
        }
        // same-length intervals within a version must be disjoint
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.version == b.version && a.lo.len() == b.lo.len() && a.lo <= b.hi && b.lo <= a.hi
                {
                    return Err(IngestError::BadMapFile {
                        file: file.to_string(),
                        line: 0,
                        reason: format!(
                            "overlapping intervals {}..{} and {}..{}",
                            a.lo, a.hi, b.lo, b.hi
                        ),
                    });
                }
            }
        }
        Ok(IcdCategoryMap { ranges })
    }

    pub fn load(path: &Path) -> Result<IcdCategoryMap, IngestError> {
        let text = std::fs::read_to_string(path)?;
        IcdCategoryMap::parse(&text, &path.display().to_string())
    }

    /// The ICD-chapter map shipped with the repo.
    pub fn default_map() -> IcdCategoryMap {
        IcdCategoryMap::parse(DEFAULT_ICD_MAP, "data/icd_map.tsv")
            .expect("bundled icd map is valid")
    }
}

fn normalize_icd(code: &str) -> String {
    code.trim().chars().filter(|c| *c != '.').collect::<String>().to_uppercase()
}

/// Deterministic longest-prefix interval lookup.
pub fn map_icd_to_category(
    code: &str,
    version: u8,
    icd_map: &IcdCategoryMap,
) -> Result<DiseaseCategory, IngestError> {
    let norm = normalize_icd(code);
    if norm.is_empty() {
        return Err(IngestError::UnmappedCode { code: code.to_string(), version });
    }
    let mut best: Option<&IcdRange> = None;
    for range in &icd_map.ranges {
        if range.version != version || norm.len() < range.lo.len() {
            continue;
        }
        let prefix = &norm[..range.lo.len()];
        if range.lo.as_str() <= prefix && prefix <= range.hi.as_str() {
            match best {
                Some(b) if b.lo.len() >= range.lo.len() => {}
                _ => best = Some(range),
            }
        }
    }
    best.map(|r| r.category)
        .ok_or_else(|| IngestError::UnmappedCode { code: code.to_string(), version })
}

/// curr_service token -> treatment option.
#[derive(Debug, Clone)]
pub struct ServiceTreatmentMap {
    entries: BTreeMap<String, TreatmentLabel>,
}

const DEFAULT_SVC_MAP: &str = include_str!("../data/svc_map.tsv");

impl ServiceTreatmentMap {
    pub fn parse(text: &str, file: &str) -> Result<ServiceTreatmentMap, IngestError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("service\t") {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 2 {
                return Err(IngestError::BadMapFile {
                    file: file.to_string(),
                    line: lineno + 1,
                    reason: format!("expected 2 tab-separated fields, got {}", parts.len()),
                });
            }
            let treatment = match label_from_token(Task::Treatment, parts[1]) {
                Ok(Label::TreatmentLabel(t)) => t,
                _ => {
                    return Err(IngestError::BadMapFile {
                        file: file.to_string(),
                        line: lineno + 1,
                        reason: format!("unknown treatment {:?}", parts[1]),
                    })
                }
            };
            entries.insert(parts[0].trim().to_uppercase(), treatment);
        }
        Ok(ServiceTreatmentMap { entries })
    }

    pub fn load(path: &Path) -> Result<ServiceTreatmentMap, IngestError> {
        let text = std::fs::read_to_string(path)?;
        ServiceTreatmentMap::parse(&text, &path.display().to_string())
    }

    pub fn default_map() -> ServiceTreatmentMap {
        ServiceTreatmentMap::parse(DEFAULT_SVC_MAP, "data/svc_map.tsv")
            .expect("bundled service map is valid")
    }

    pub fn lookup(&self, service: &str) -> Option<TreatmentLabel> {
        self.entries.get(&service.trim().to_uppercase()).copied()
    }
}

/// MIMIC care-unit strings that do not resolve through the label table.
fn careunit_alias(raw: &str) -> Option<&'static str> {
    match raw.trim().to_uppercase().as_str() {
        "MEDICAL/SURGICAL INTENSIVE CARE UNIT (MICU/SICU)"
        | "MEDICAL/SURGICAL INTENSIVE CARE UNIT"
        | "MICU/SICU" => Some("MSICU"),
        "TRAUMA SICU (TSICU)" | "TRAUMA SICU" => Some("TSICU"),
        _ => None,
    }
}

/// Resolve a first_careunit string to a department label.
pub fn department_from_careunit(raw: &str) -> Option<DepartmentLabel> {
    let resolve = |token: &str| -> Option<DepartmentLabel> {
        if let Some(alias) = careunit_alias(token) {
            return match label_from_token(Task::Triage, alias) {
                Ok(Label::DepartmentLabel(d)) => Some(d),
                _ => None,
            };
        }
        match label_from_token(Task::Triage, token) {
            Ok(Label::DepartmentLabel(d)) => Some(d),
            _ => None,
        }
    };
    if let Some(dep) = resolve(raw) {
        return Some(dep);
    }
    // "Coronary Care Unit (CCU)" style: try the parenthesized token
    if let (Some(open), Some(close)) = (raw.find('('), raw.rfind(')')) {
        if open < close {
            if let Some(dep) = resolve(&raw[open + 1..close]) {
                return Some(dep);
            }
        }
    }
    None
}

/// Pull the text between the "past medical history" header and the next
/// section header (an all-caps line, or a capitalized phrase ending in a
/// colon at line start). Empty when the header is absent.
pub fn extract_history(discharge_text: &str) -> String {
    let header = Regex::new(r"(?i)past\s+medical\s+history\s*:?").unwrap();
    let m = match header.find(discharge_text) {
        Some(m) => m,
        None => return String::new(),
    };
    let rest = &discharge_text[m.end()..];
    let colon_header = Regex::new(r"^[A-Z][^:\n]{0,60}:").unwrap();
    let mut kept: Vec<&str> = Vec::new();
    for (i, line) in rest.lines().enumerate() {
        if i > 0 {
            let trimmed = line.trim();
            let alpha: Vec<char> = trimmed.chars().filter(|c| c.is_alphabetic()).collect();
            // A lone all-caps token is usually an abbreviation (COPD, HTN);
            // require a second word or a colon before treating it as a header.
            let all_caps = alpha.len() >= 2
                && alpha.iter().all(|c| c.is_uppercase())
                && (trimmed.contains(char::is_whitespace) || trimmed.ends_with(':'));
            if (all_caps && trimmed.len() <= 80) || colon_header.is_match(trimmed) {
                break;
            }
        }
        kept.push(line);
    }
    kept.join("\n").trim().to_string()
}

/// Counters and anomaly lists accumulated by the builder. A case failing
/// multiple checks is counted once, under the first failing check in the
/// order: radiology, department, diagnosis, service.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub distinct_icu_admissions: u64,
    pub emitted_cases: u64,
    pub dropped_null_radiology: u64,
    pub dropped_unmapped_department: u64,
    pub dropped_no_diagnosis: u64,
    pub dropped_unmapped_service: u64,
    pub unmapped_icd_codes: Vec<String>,
    pub unmapped_services: Vec<String>,
    pub unmapped_careunits: Vec<String>,
    pub missing_history_count: u64,
    pub missing_admission_rows: u64,
    pub missing_dictionary_titles: u64,
    pub history_screen_blanked: u64,
    /// Multiple admissions of one subject are all kept.
    pub keeps_all_admissions_per_subject: bool,
}

impl BuildReport {
    pub fn dropped_total(&self) -> u64 {
        self.dropped_null_radiology
            + self.dropped_unmapped_department
            + self.dropped_no_diagnosis
            + self.dropped_unmapped_service
    }
}

type AdmKey = (u64, u64);

fn adm_key(subject_id: &str, hadm_id: &str) -> Option<AdmKey> {
    Some((subject_id.trim().parse().ok()?, hadm_id.trim().parse().ok()?))
}

fn or_unknown(s: &str) -> String {
    let t = s.trim();
    if t.is_empty() {
        UNKNOWN_DEMOGRAPHIC.to_string()
    } else {
        t.to_string()
    }
}

/// Join the source tables into validated cases, one per qualifying ICU
/// admission, accumulating anomalies in the report.
pub fn join_cases(
    tables: &SourceTables,
    icd_map: &IcdCategoryMap,
    svc_map: &ServiceTreatmentMap,
) -> (Vec<PatientCase>, BuildReport) {
    let mut report =
        BuildReport { keeps_all_admissions_per_subject: true, ..BuildReport::default() };

    // admission -> (first_careunit, intime), earliest stay wins
    let mut first_stay: BTreeMap<AdmKey, (String, String)> = BTreeMap::new();
    for row in tables.icustays.rows() {
        let key = match adm_key(
            tables.icustays.get(row, "subject_id"),
            tables.icustays.get(row, "hadm_id"),
        ) {
            Some(k) => k,
            None => continue,
        };
        let unit = tables.icustays.get(row, "first_careunit").to_string();
        let intime = tables.icustays.get(row, "intime").to_string();
        match first_stay.get(&key) {
            Some((_, existing)) if existing.as_str() <= intime.as_str() => {}
            _ => {
                first_stay.insert(key, (unit, intime));
            }
        }
    }
    report.distinct_icu_admissions = first_stay.len() as u64;

    let mut demographics: HashMap<AdmKey, (String, String, String)> = HashMap::new();
    for row in tables.admissions.rows() {
        if let Some(key) = adm_key(
            tables.admissions.get(row, "subject_id"),
            tables.admissions.get(row, "hadm_id"),
        ) {
            demographics.entry(key).or_insert_with(|| {
                (
                    or_unknown(tables.admissions.get(row, "language")),
                    or_unknown(tables.admissions.get(row, "marital_status")),
                    or_unknown(tables.admissions.get(row, "race")),
                )
            });
        }
    }

    let mut genders: HashMap<u64, String> = HashMap::new();
    for row in tables.patients.rows() {
        if let Ok(sid) = tables.patients.get(row, "subject_id").trim().parse::<u64>() {
            genders
                .entry(sid)
                .or_insert_with(|| or_unknown(tables.patients.get(row, "gender")));
        }
    }

    // ICD dictionary: (code, version) -> long title
    let mut icd_titles: HashMap<(String, u8), String> = HashMap::new();
    for row in tables.d_icd_diagnoses.rows() {
        let code = normalize_icd(tables.d_icd_diagnoses.get(row, "icd_code"));
        if let Ok(version) = tables.d_icd_diagnoses.get(row, "icd_version").trim().parse::<u8>() {
            icd_titles
                .entry((code, version))
                .or_insert_with(|| tables.d_icd_diagnoses.get(row, "long_title").to_string());
        }
    }

    // diagnosis rows per admission: (seq_num, code, version)
    let mut dx_rows: HashMap<AdmKey, Vec<(u32, String, u8)>> = HashMap::new();
    for row in tables.diagnoses_icd.rows() {
        let key = match adm_key(
            tables.diagnoses_icd.get(row, "subject_id"),
            tables.diagnoses_icd.get(row, "hadm_id"),
        ) {
            Some(k) => k,
            None => continue,
        };
        let seq: u32 = match tables.diagnoses_icd.get(row, "seq_num").trim().parse() {
            Ok(s) => s,
            Err(_) => continue,
        };
        let version: u8 = match tables.diagnoses_icd.get(row, "icd_version").trim().parse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        dx_rows.entry(key).or_default().push((
            seq,
            tables.diagnoses_icd.get(row, "icd_code").to_string(),
            version,
        ));
    }

    // first service row per admission (by transfertime when present)
    let has_transfertime = tables.services.has_column("transfertime");
    let mut services: HashMap<AdmKey, (String, String)> = HashMap::new();
    for row in tables.services.rows() {
        let key = match adm_key(
            tables.services.get(row, "subject_id"),
            tables.services.get(row, "hadm_id"),
        ) {
            Some(k) => k,
            None => continue,
        };
        let service = tables.services.get(row, "curr_service").to_string();
        let stamp = if has_transfertime {
            tables.services.get(row, "transfertime").to_string()
        } else {
            String::new()
        };
        match services.get(&key) {
            Some((_, existing)) if has_transfertime && existing.as_str() <= stamp.as_str() => {}
            Some(_) if !has_transfertime => {}
            _ => {
                services.insert(key, (service, stamp));
            }
        }
    }

    // concatenated radiology text per admission, file order
    let mut radiology: HashMap<AdmKey, Vec<String>> = HashMap::new();
    for row in tables.radiology.rows() {
        if let Some(key) = adm_key(
            tables.radiology.get(row, "subject_id"),
            tables.radiology.get(row, "hadm_id"),
        ) {
            let text = tables.radiology.get(row, "text").trim().to_string();
            if !text.is_empty() {
                radiology.entry(key).or_default().push(text);
            }
        }
    }

    let mut discharge: HashMap<AdmKey, String> = HashMap::new();
    for row in tables.discharge.rows() {
        if let Some(key) = adm_key(
            tables.discharge.get(row, "subject_id"),
            tables.discharge.get(row, "hadm_id"),
        ) {
            discharge
                .entry(key)
                .or_insert_with(|| tables.discharge.get(row, "text").to_string());
        }
    }

    let mut unmapped_icd: BTreeSet<String> = BTreeSet::new();
    let mut unmapped_svc: BTreeSet<String> = BTreeSet::new();
    let mut unmapped_unit: BTreeSet<String> = BTreeSet::new();
    let mut cases = Vec::new();

    for (key, (careunit, _)) in &first_stay {
        let radiology_report = match radiology.get(key) {
            Some(texts) if !texts.is_empty() => texts.join("\n\n"),
            _ => {
                report.dropped_null_radiology += 1;
                continue;
            }
        };
        let department = match department_from_careunit(careunit) {
            Some(d) => d,
            None => {
                unmapped_unit.insert(careunit.clone());
                report.dropped_unmapped_department += 1;
                continue;
            }
        };
        let mut rows = dx_rows.get(key).cloned().unwrap_or_default();
        rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let mut diagnoses = Vec::new();
        for (seq, code, version) in rows {
            if diagnoses.len() == 3 {
                break;
            }
            match map_icd_to_category(&code, version, icd_map) {
                Ok(category) => {
                    let norm = normalize_icd(&code);
                    let long_title = match icd_titles.get(&(norm.clone(), version)) {
                        Some(t) => t.clone(),
                        None => {
                            report.missing_dictionary_titles += 1;
                            norm.clone()
                        }
                    };
                    diagnoses.push(DiagnosisRecord {
                        icd_code: norm,
                        icd_version: version,
                        long_title,
                        category,
                        priority: seq,
                    });
                }
                Err(_) => {
                    unmapped_icd.insert(format!("{}:{}", version, normalize_icd(&code)));
                }
            }
        }
        if diagnoses.is_empty() {
            report.dropped_no_diagnosis += 1;
            continue;
        }
        // re-rank the kept rows 1..=3 so priority 1 is always present
        for (i, d) in diagnoses.iter_mut().enumerate() {
            d.priority = (i + 1) as u32;
        }
        let treatment = match services.get(key).and_then(|(svc, _)| {
            let mapped = svc_map.lookup(svc);
            if mapped.is_none() && !svc.trim().is_empty() {
                unmapped_svc.insert(svc.trim().to_uppercase());
            }
            mapped
        }) {
            Some(t) => t,
            None => {
                report.dropped_unmapped_service += 1;
                continue;
            }
        };
        let (language, marital_status, race) = match demographics.get(key) {
            Some(d) => d.clone(),
            None => {
                report.missing_admission_rows += 1;
                (
                    UNKNOWN_DEMOGRAPHIC.to_string(),
                    UNKNOWN_DEMOGRAPHIC.to_string(),
                    UNKNOWN_DEMOGRAPHIC.to_string(),
                )
            }
        };
        let gender =
            genders.get(&key.0).cloned().unwrap_or_else(|| UNKNOWN_DEMOGRAPHIC.to_string());
        let medical_history = match discharge.get(key) {
            Some(text) => {
                let history = extract_history(text);
                if history.is_empty() {
                    report.missing_history_count += 1;
                }
                history
            }
            None => {
                report.missing_history_count += 1;
                String::new()
            }
        };
        cases.push(PatientCase {
            case_id: format!("{}-{}", key.0, key.1),
            demographics: Demographics { language, marital_status, race, gender },
            radiology_report,
            medical_history,
            diagnoses,
            department,
            treatment,
        });
        report.emitted_cases += 1;
    }

    report.unmapped_icd_codes = unmapped_icd.into_iter().collect();
    report.unmapped_services = unmapped_svc.into_iter().collect();
    report.unmapped_careunits = unmapped_unit.into_iter().collect();
    (cases, report)
}

/// Optional build-time contradiction screen: blank each history whose every
/// entity scores below the review threshold against its own report.
pub fn apply_history_screen(
    cases: &mut [PatientCase],
    embed_backend: &dyn EmbedBackend,
    review: &ReviewConfig,
    report: &mut BuildReport,
) -> Result<(), crate::model_backends::BackendError> {
    for case in cases.iter_mut() {
        if case.medical_history.is_empty() {
            continue;
        }
        let result = review_history(
            &case.medical_history,
            &case.radiology_report,
            embed_backend,
            review,
            None,
        )?;
        if result.retained.is_empty() {
            case.medical_history = String::new();
            report.history_screen_blanked += 1;
        }
    }
    Ok(())
}

/// Seeded Fisher-Yates shuffle, then the first `test_size` cases become the
/// test split. Stable across runs and platforms for a fixed seed.
pub fn split_dataset(
    cases: Vec<PatientCase>,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit, IngestError> {
    if cases.len() <= test_size {
        return Err(IngestError::InsufficientCases { have: cases.len(), need: test_size });
    }
    let mut shuffled = cases;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..shuffled.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        shuffled.swap(i, j);
    }
    let train = shuffled.split_off(test_size);
    Ok(DatasetSplit { train, test: shuffled, seed })
}

/// Write cases as JSON lines.
pub fn write_cases_jsonl(cases: &[PatientCase], path: &Path) -> Result<(), IngestError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for case in cases {
        writeln!(file, "{}", serialize_case(case))?;
    }
    Ok(())
}

/// Read a JSON-lines case file, skipping blank lines.
pub fn read_cases_jsonl(path: &Path) -> Result<Vec<PatientCase>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    let mut cases = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case = crate::case_model::parse_case(line).map_err(|e| {
            IngestError::BadMapFile {
                file: path.display().to_string(),
                line: lineno + 1,
                reason: e.to_string(),
            }
        })?;
        cases.push(case);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, file: &str, content: &str) {
        std::fs::write(dir.join(file), content).unwrap();
    }

    /// Ten admissions, two without radiology notes; everything else mapped.
    fn fixture_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let mut admissions = String::from("subject_id,hadm_id,language,marital_status,race\n");
        let mut patients = String::from("subject_id,gender\n");
        let mut diagnoses = String::from("subject_id,hadm_id,seq_num,icd_code,icd_version\n");
        let mut services = String::from("subject_id,hadm_id,curr_service\n");
        let mut discharge = String::from("subject_id,hadm_id,text\n");
        let mut radiology = String::from("subject_id,hadm_id,text\n");
        let mut icustays = String::from("subject_id,hadm_id,first_careunit,intime\n");
        for i in 0..10 {
            let sid = 100 + i;
            let hadm = 2000 + i;
            admissions.push_str(&format!("{sid},{hadm},English,MARRIED,WHITE\n"));
            patients.push_str(&format!("{sid},F\n"));
            diagnoses.push_str(&format!("{sid},{hadm},1,I21,10\n"));
            diagnoses.push_str(&format!("{sid},{hadm},2,J18,10\n"));
            services.push_str(&format!("{sid},{hadm},CMED\n"));
            discharge.push_str(&format!(
                "{sid},{hadm},\"Past Medical History: HTN, HLD\nSocial History: none\"\n"
            ));
            if i >= 2 {
                radiology.push_str(&format!("{sid},{hadm},Chest x-ray clear lungs.\n"));
            }
            icustays.push_str(&format!("{sid},{hadm},CCU,2150-01-0{} 10:00:00\n", i % 9 + 1));
        }
        write_fixture(p, "admissions.csv", &admissions);
        write_fixture(p, "patients.csv", &patients);
        write_fixture(
            p,
            "d_icd_diagnoses.csv",
            "icd_code,icd_version,long_title\nI21,10,Acute myocardial infarction\nJ18,10,Pneumonia organism unspecified\n",
        );
        write_fixture(p, "diagnoses_icd.csv", &diagnoses);
        write_fixture(p, "services.csv", &services);
        write_fixture(p, "discharge.csv", &discharge);
        write_fixture(p, "radiology.csv", &radiology);
        write_fixture(p, "icustays.csv", &icustays);
        dir
    }

    #[test]
    fn load_source_tables_happy_path() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        assert_eq!(tables.admissions.n_rows(), 10);
        assert_eq!(tables.icustays.n_rows(), 10);
    }

    #[test]
    fn load_source_tables_missing_table() {
        let dir = fixture_dir();
        std::fs::remove_file(dir.path().join("radiology.csv")).unwrap();
        match load_source_tables(dir.path()) {
            Err(IngestError::MissingTable(name)) => assert_eq!(name, "radiology.csv"),
            other => panic!("expected MissingTable, got {other:?}"),
        }
    }

    #[test]
    fn load_source_tables_missing_column() {
        let dir = fixture_dir();
        std::fs::write(
            dir.path().join("admissions.csv"),
            "subject_id,hadm_id,language,race\n1,2,English,WHITE\n",
        )
        .unwrap();
        match load_source_tables(dir.path()) {
            Err(IngestError::MissingColumn { table, column }) => {
                assert_eq!(table, "admissions.csv");
                assert_eq!(column, "marital_status");
            }
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn join_drops_null_radiology_and_counts() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, report) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        assert_eq!(cases.len(), 8);
        assert_eq!(report.dropped_null_radiology, 2);
        assert_eq!(report.distinct_icu_admissions, 10);
        assert_eq!(report.emitted_cases + report.dropped_total(), 10);
        assert!(cases.iter().all(|c| !c.radiology_report.is_empty()));
        assert_eq!(cases[0].medical_history, "HTN, HLD");
    }

    #[test]
    fn join_keeps_three_lowest_seq_nums() {
        let dir = fixture_dir();
        // admission 102/2002 gets five diagnosis rows at seq 5,4,3,2,1
        // (admissions 100 and 101 have no radiology note and are dropped)
        let mut diagnoses =
            String::from("subject_id,hadm_id,seq_num,icd_code,icd_version\n");
        for (seq, code) in [(5, "I21"), (4, "J18"), (3, "K52"), (2, "F10.2"), (1, "A41")] {
            diagnoses.push_str(&format!("102,2002,{seq},{code},10\n"));
        }
        for i in 0..10 {
            if i != 2 {
                diagnoses.push_str(&format!("{},{},1,I21,10\n", 100 + i, 2000 + i));
            }
        }
        std::fs::write(dir.path().join("diagnoses_icd.csv"), diagnoses).unwrap();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, _) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        let case = cases.iter().find(|c| c.case_id == "102-2002").unwrap();
        assert_eq!(case.diagnoses.len(), 3);
        // seq 1,2,3 kept: A41 -> D17, F10.2 -> D5, K52 -> D13
        assert_eq!(case.diagnoses[0].category.code(), "D17");
        assert_eq!(case.diagnoses[1].category.code(), "D5");
        assert_eq!(case.diagnoses[2].category.code(), "D13");
        assert_eq!(case.primary_diagnosis().code(), "D17");
    }

    #[test]
    fn icd_f_prefix_maps_to_mental_disorders() {
        let map = IcdCategoryMap::default_map();
        assert_eq!(map_icd_to_category("F10.2", 10, &map).unwrap().code(), "D5");
    }

    #[test]
    fn icd_chapter_lookup_examples() {
        let map = IcdCategoryMap::default_map();
        assert_eq!(map_icd_to_category("I21", 10, &map).unwrap().code(), "D14");
        assert_eq!(map_icd_to_category("J18", 10, &map).unwrap().code(), "D9");
        assert_eq!(map_icd_to_category("41071", 9, &map).unwrap().code(), "D14");
        assert_eq!(map_icd_to_category("0389", 9, &map).unwrap().code(), "D17");
    }

    #[test]
    fn icd_empty_code_is_unmapped() {
        let map = IcdCategoryMap::default_map();
        assert!(matches!(
            map_icd_to_category("", 10, &map),
            Err(IngestError::UnmappedCode { .. })
        ));
    }

    #[test]
    fn icd_longest_prefix_wins() {
        let text = "10\tI00\tI99\tD14\n10\tI210\tI219\tD1\n";
        let map = IcdCategoryMap::parse(text, "t").unwrap();
        assert_eq!(map_icd_to_category("I214", 10, &map).unwrap().code(), "D1");
        assert_eq!(map_icd_to_category("I50", 10, &map).unwrap().code(), "D14");
        // too short for the nested interval, falls back to the chapter
        assert_eq!(map_icd_to_category("I21", 10, &map).unwrap().code(), "D14");
    }

    #[test]
    fn icd_map_rejects_overlap() {
        let text = "10\tA00\tB99\tD17\n10\tB50\tC10\tD4\n";
        assert!(IcdCategoryMap::parse(text, "t").is_err());
    }

    #[test]
    fn extract_history_between_headers() {
        let text = "Chief Complaint: pain\nPast Medical History: HTN, HLD\nSocial History: smoker";
        assert_eq!(extract_history(text), "HTN, HLD");
    }

    #[test]
    fn extract_history_absent_header() {
        assert_eq!(extract_history("no sections here"), "");
    }

    #[test]
    fn extract_history_runs_to_end_of_note() {
        let text = "Past Medical History:\nCOPD\nasthma";
        assert_eq!(extract_history(text), "COPD\nasthma");
    }

    #[test]
    fn extract_history_stops_at_all_caps() {
        let text = "Past Medical History: gout\nMEDICATIONS ON ADMISSION\naspirin";
        assert_eq!(extract_history(text), "gout");
    }

    #[test]
    fn extract_history_keeps_bare_abbreviations() {
        let text = "Past Medical History:\nCOPD\nHTN\nDischarge Diagnosis: pneumonia";
        assert_eq!(extract_history(text), "COPD\nHTN");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, _) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        let a = split_dataset(cases.clone(), 3, 17).unwrap();
        let b = split_dataset(cases.clone(), 3, 17).unwrap();
        assert_eq!(a.test.len(), 3);
        assert_eq!(a.train.len(), 5);
        let ids = |cs: &[PatientCase]| -> Vec<String> {
            cs.iter().map(|c| c.case_id.clone()).collect()
        };
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!(ids(&a.train), ids(&b.train));
        // different seed, different membership (overwhelmingly likely)
        let c = split_dataset(cases, 3, 18).unwrap();
        assert!(ids(&a.test) != ids(&c.test) || ids(&a.train) != ids(&c.train));
    }

    #[test]
    fn split_insufficient_cases() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, _) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        assert!(matches!(
            split_dataset(cases, 1000, 17),
            Err(IngestError::InsufficientCases { .. })
        ));
    }

    #[test]
    fn train_test_disjoint() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, _) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        let split = split_dataset(cases, 4, 7).unwrap();
        let test_ids: std::collections::HashSet<_> =
            split.test.iter().map(|c| c.case_id.clone()).collect();
        assert!(split.train.iter().all(|c| !test_ids.contains(&c.case_id)));
    }

    #[test]
    fn department_from_careunit_variants() {
        assert_eq!(department_from_careunit("CCU").unwrap().code(), "CCU");
        assert_eq!(
            department_from_careunit("Coronary Care Unit (CCU)").unwrap().code(),
            "CCU"
        );
        assert_eq!(
            department_from_careunit("Medical/Surgical Intensive Care Unit (MICU/SICU)")
                .unwrap()
                .code(),
            "MSICU"
        );
        assert_eq!(department_from_careunit("Trauma SICU (TSICU)").unwrap().code(), "TSICU");
        assert_eq!(department_from_careunit("Neuro Stepdown").unwrap().code(), "Neuro Stepdown");
        assert!(department_from_careunit("Cafeteria").is_none());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = fixture_dir();
        let tables = load_source_tables(dir.path()).unwrap();
        let (cases, _) = join_cases(
            &tables,
            &IcdCategoryMap::default_map(),
            &ServiceTreatmentMap::default_map(),
        );
        let out = tempfile::tempdir().unwrap();
        let path = out.path().join("cases.jsonl");
        write_cases_jsonl(&cases, &path).unwrap();
        let loaded = read_cases_jsonl(&path).unwrap();
        assert_eq!(cases, loaded);
    }

    #[test]
    fn service_map_defaults_cover_paper_options() {
        let map = ServiceTreatmentMap::default_map();
        assert_eq!(map.lookup("CMED").unwrap().code(), "T16");
        assert_eq!(map.lookup("vsurg").unwrap().code(), "T1");
        assert!(map.lookup("PSYCH").is_none());
    }
}
