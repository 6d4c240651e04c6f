//! File ingestion and persistence.
//!
//! Input formats:
//! - responses: CSV with columns `student_id,room_id,answers`, where
//!   `answers` is a fixed-width string over `A..` (one letter per question)
//!   and `*` marks a missing answer. A header row is skipped if present.
//! - answer key: a single line of option letters, one per question.
//!
//! Fitted models and detection results are written as self-describing,
//! versioned JSON containers carrying an exam fingerprint (hash of the key
//! and dimensions) so a model cannot silently be applied to the wrong exam.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{NominalModel, WesolowskyItemModel};

/// Character encoding a missing answer in response files.
pub const MISSING_CHAR: char = '*';

/// Current model-file format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_FORMAT_MAGIC: &str = "copydetect-model";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty key")]
    EmptyKey,
    #[error("option {letter} out of range (exam has {n_options} options)")]
    KeyOptionOutOfRange { letter: char, n_options: usize },
    #[error("invalid exam design: {0}")]
    InvalidDesign(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    BadFieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: expected {expected} answers, found {found}")]
    BadAnswerLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: option {letter} out of range (exam has {n_options} options)")]
    AnswerOutOfRange {
        row: usize,
        letter: char,
        n_options: usize,
    },
    #[error("row {row}: duplicate student_id {student_id}")]
    DuplicateStudent { row: usize, student_id: String },
    #[error("row {row}: empty student_id")]
    EmptyStudentId { row: usize },
    #[error("model file {path}: not a model file (bad magic {found:?})")]
    BadMagic { path: String, found: String },
    #[error("model file {path}: format version mismatch (expected {expected}, found {found})")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("model file {path}: malformed: {source}")]
    MalformedModel {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("exam fingerprint mismatch: model was fitted for {expected}, data is {found}")]
    FingerprintMismatch { expected: String, found: String },
}

/// Shape of an exam: question count, uniform option count, answer key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamDesign {
    num_questions: usize,
    options_per_question: usize,
    /// Correct option per question, 0-based.
    key: Vec<u8>,
}

impl ExamDesign {
    pub fn new(options_per_question: usize, key: Vec<u8>) -> Result<Self, DataError> {
        if key.is_empty() {
            return Err(DataError::InvalidDesign(
                "exam must have at least one question".into(),
            ));
        }
        if !(2..=26).contains(&options_per_question) {
            return Err(DataError::InvalidDesign(format!(
                "options per question must be in 2..=26, got {options_per_question}"
            )));
        }
        if let Some(&bad) = key.iter().find(|&&k| k as usize >= options_per_question) {
            return Err(DataError::InvalidDesign(format!(
                "key option {} out of range for {} options",
                option_letter(bad),
                options_per_question
            )));
        }
        Ok(Self {
            num_questions: key.len(),
            options_per_question,
            key,
        })
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn options_per_question(&self) -> usize {
        self.options_per_question
    }

    /// Correct option (0-based) for each question.
    pub fn key(&self) -> &[u8] {
        &self.key
    }

    /// Hex digest of (dimensions, key); stamped into model files.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_questions as u64).to_le_bytes());
        hasher.update((self.options_per_question as u64).to_le_bytes());
        hasher.update(&self.key);
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// One student's row: identifiers plus the answer vector
/// (`None` = missing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentRecord {
    pub student_id: String,
    pub room_id: String,
    pub responses: Vec<Option<u8>>,
}

impl StudentRecord {
    pub fn num_answered(&self) -> usize {
        self.responses.iter().filter(|r| r.is_some()).count()
    }
}

/// All student records for one exam.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    design: ExamDesign,
    records: Vec<StudentRecord>,
}

impl ResponseMatrix {
    pub fn new(design: ExamDesign, records: Vec<StudentRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (idx, record) in records.iter().enumerate() {
            let row = idx + 1;
            if record.student_id.is_empty() {
                return Err(DataError::EmptyStudentId { row });
            }
            if record.responses.len() != design.num_questions() {
                return Err(DataError::BadAnswerLength {
                    row,
                    expected: design.num_questions(),
                    found: record.responses.len(),
                });
            }
            if let Some(bad) = record
                .responses
                .iter()
                .flatten()
                .find(|&&v| v as usize >= design.options_per_question())
            {
                return Err(DataError::AnswerOutOfRange {
                    row,
                    letter: option_letter(*bad),
                    n_options: design.options_per_question(),
                });
            }
            if !seen.insert(record.student_id.as_str()) {
                return Err(DataError::DuplicateStudent {
                    row,
                    student_id: record.student_id.clone(),
                });
            }
        }
        Ok(Self { design, records })
    }

    pub fn design(&self) -> &ExamDesign {
        &self.design
    }

    pub fn records(&self) -> &[StudentRecord] {
        &self.records
    }

    pub fn num_students(&self) -> usize {
        self.records.len()
    }

    /// Room ids in order of first appearance, each with the record indices
    /// of its members in file order.
    pub fn rooms(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut members: std::collections::HashMap<&str, Vec<usize>> =
            std::collections::HashMap::new();
        for (idx, record) in self.records.iter().enumerate() {
            let entry = members.entry(record.room_id.as_str()).or_default();
            if entry.is_empty() {
                order.push(record.room_id.clone());
            }
            entry.push(idx);
        }
        order
            .into_iter()
            .map(|room| {
                let idxs = members[room.as_str()].clone();
                (room, idxs)
            })
            .collect()
    }
}

fn option_letter(index: u8) -> char {
    (b'A' + index) as char
}

fn letter_to_option(letter: char, n_options: usize) -> Option<u8> {
    let upper = letter.to_ascii_uppercase();
    if !upper.is_ascii_uppercase() {
        return None;
    }
    let index = upper as u8 - b'A';
    ((index as usize) < n_options).then_some(index)
}

/// Parses a one-line answer key of option letters into an [`ExamDesign`].
pub fn parse_key(path: &Path, n_options: usize) -> Result<ExamDesign, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_key_str(text.trim_start_matches('\u{feff}').trim(), n_options)
}

pub fn parse_key_str(line: &str, n_options: usize) -> Result<ExamDesign, DataError> {
    let line = line.trim();
    if line.is_empty() {
        return Err(DataError::EmptyKey);
    }
    let mut key = Vec::with_capacity(line.len());
    for letter in line.chars() {
        let option = letter_to_option(letter, n_options)
            .ok_or(DataError::KeyOptionOutOfRange { letter, n_options })?;
        key.push(option);
    }
    ExamDesign::new(n_options, key)
}

/// Parses a responses CSV against a known design.
pub fn parse_responses(path: &Path, design: &ExamDesign) -> Result<ResponseMatrix, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_responses_reader(file, design)
}

pub fn parse_responses_reader<R: io::Read>(
    mut reader: R,
    design: &ExamDesign,
) -> Result<ResponseMatrix, DataError> {
    // Spreadsheet exports often lead with a byte-order mark; drop it so
    // the first student id comes out clean.
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|source| DataError::Io {
        path: "<reader>".into(),
        source,
    })?;
    let body = bytes.strip_prefix(b"\xef\xbb\xbf").unwrap_or(&bytes);
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(body);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, row) in csv_reader.records().enumerate() {
        let row_number = idx + 1;
        let row = row?;
        if row_number == 1 && is_header_row(&row) {
            continue;
        }
        if row.len() != 3 {
            return Err(DataError::BadFieldCount {
                row: row_number,
                expected: 3,
                found: row.len(),
            });
        }
        let student_id = row[0].trim().to_string();
        let room_id = row[1].trim().to_string();
        let answers = row[2].trim();
        if student_id.is_empty() {
            return Err(DataError::EmptyStudentId { row: row_number });
        }
        if !seen.insert(student_id.clone()) {
            return Err(DataError::DuplicateStudent {
                row: row_number,
                student_id,
            });
        }
        let responses = parse_answer_string(answers, design, row_number)?;
        records.push(StudentRecord {
            student_id,
            room_id,
            responses,
        });
    }
    ResponseMatrix::new(design.clone(), records)
}

fn is_header_row(row: &csv::StringRecord) -> bool {
    row.len() == 3
        && row[0].trim().eq_ignore_ascii_case("student_id")
        && row[1].trim().eq_ignore_ascii_case("room_id")
        && row[2].trim().eq_ignore_ascii_case("answers")
}

fn parse_answer_string(
    answers: &str,
    design: &ExamDesign,
    row: usize,
) -> Result<Vec<Option<u8>>, DataError> {
    let chars: Vec<char> = answers.chars().collect();
    if chars.len() != design.num_questions() {
        return Err(DataError::BadAnswerLength {
            row,
            expected: design.num_questions(),
            found: chars.len(),
        });
    }
    chars
        .into_iter()
        .map(|letter| {
            if letter == MISSING_CHAR {
                return Ok(None);
            }
            letter_to_option(letter, design.options_per_question())
                .map(Some)
                .ok_or(DataError::AnswerOutOfRange {
                    row,
                    letter,
                    n_options: design.options_per_question(),
                })
        })
        .collect()
}

/// Writes a matrix back to the responses CSV format (with header).
pub fn write_responses<W: io::Write>(writer: W, matrix: &ResponseMatrix) -> Result<(), DataError> {
    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer.write_record(["student_id", "room_id", "answers"])?;
    for record in matrix.records() {
        let answers: String = record
            .responses
            .iter()
            .map(|response| match response {
                Some(option) => option_letter(*option),
                None => MISSING_CHAR,
            })
            .collect();
        csv_writer.write_record([&record.student_id, &record.room_id, &answers])?;
    }
    csv_writer.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// A fitted behavioral model as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SavedModel {
    Nominal(NominalModel),
    Wesolowsky(WesolowskyItemModel),
}

impl SavedModel {
    pub fn family_name(&self) -> &'static str {
        match self {
            SavedModel::Nominal(_) => "nominal",
            SavedModel::Wesolowsky(_) => "wesolowsky",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    exam_fingerprint: String,
    num_questions: usize,
    options_per_question: usize,
    model: serde_json::Value,
}

/// Serializes a fitted model with format/version header and exam fingerprint.
pub fn save_model(model: &SavedModel, design: &ExamDesign, path: &Path) -> Result<(), DataError> {
    let file = ModelFile {
        format: MODEL_FORMAT_MAGIC.to_string(),
        version: MODEL_FORMAT_VERSION,
        exam_fingerprint: design.fingerprint(),
        num_questions: design.num_questions(),
        options_per_question: design.options_per_question(),
        model: serde_json::to_value(model).expect("model serialization cannot fail"),
    };
    let text = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a model file, checking magic and version. Returns the model and
/// the exam fingerprint it was fitted for.
pub fn load_model(path: &Path) -> Result<(SavedModel, String), DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    // Inspect the header first so magic/version problems get specific errors.
    let header: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| DataError::MalformedModel {
            path: path_str.clone(),
            source,
        })?;
    let magic = header.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if magic != MODEL_FORMAT_MAGIC {
        return Err(DataError::BadMagic {
            path: path_str,
            found: magic.to_string(),
        });
    }
    let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            path: path_str,
            expected: MODEL_FORMAT_VERSION,
            found: version,
        });
    }
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|source| DataError::MalformedModel {
            path: path_str.clone(),
            source,
        })?;
    let model: SavedModel =
        serde_json::from_value(file.model).map_err(|source| DataError::MalformedModel {
            path: path_str,
            source,
        })?;
    Ok((model, file.exam_fingerprint))
}

/// Fails unless the model file's fingerprint matches the design in hand.
pub fn check_fingerprint(expected: &str, design: &ExamDesign) -> Result<(), DataError> {
    let found = design.fingerprint();
    if expected != found {
        return Err(DataError::FingerprintMismatch {
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design4() -> ExamDesign {
        parse_key_str("ACBD", 4).unwrap()
    }

    #[test]
    fn key_parses_letters() {
        let design = design4();
        assert_eq!(design.key(), &[0, 2, 1, 3]);
        assert_eq!(design.num_questions(), 4);
    }

    #[test]
    fn key_rejects_out_of_range_letter() {
        let err = parse_key_str("ACBE", 4).unwrap_err();
        assert!(matches!(
            err,
            DataError::KeyOptionOutOfRange { letter: 'E', .. }
        ));
    }

    #[test]
    fn key_rejects_empty() {
        assert!(matches!(parse_key_str("", 4), Err(DataError::EmptyKey)));
        assert!(matches!(parse_key_str("  \n", 4), Err(DataError::EmptyKey)));
    }

    #[test]
    fn responses_parse_happy_path() {
        let csv = "s1,r1,ACBD\ns2,r1,A*BD\n";
        let matrix = parse_responses_reader(csv.as_bytes(), &design4()).unwrap();
        assert_eq!(
            matrix.records()[0].responses,
            vec![Some(0), Some(2), Some(1), Some(3)]
        );
        assert_eq!(
            matrix.records()[1].responses,
            vec![Some(0), None, Some(1), Some(3)]
        );
    }

    #[test]
    fn responses_skip_header() {
        let csv = "student_id,room_id,answers\ns1,r1,ACBD\n";
        let matrix = parse_responses_reader(csv.as_bytes(), &design4()).unwrap();
        assert_eq!(matrix.num_students(), 1);
    }

    #[test]
    fn byte_order_marks_are_ignored() {
        let csv = "\u{feff}s1,r1,ACBD\n";
        let matrix = parse_responses_reader(csv.as_bytes(), &design4()).unwrap();
        assert_eq!(matrix.records()[0].student_id, "s1");
        let key = parse_key_str("\u{feff}ACBD".trim_start_matches('\u{feff}'), 4).unwrap();
        assert_eq!(key.key(), &[0, 2, 1, 3]);
    }

    #[test]
    fn responses_error_names_row_on_short_answer() {
        let csv = "s1,r1,ACBD\ns2,r1,ACBD\ns3,r1,ACB\n";
        let err = parse_responses_reader(csv.as_bytes(), &design4()).unwrap_err();
        match err {
            DataError::BadAnswerLength {
                row,
                expected,
                found,
            } => {
                assert_eq!((row, expected, found), (3, 4, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("row 3: expected 4 answers"));
    }

    #[test]
    fn responses_error_on_duplicate_student() {
        let csv = "s1,r1,ACBD\ns1,r2,ACBD\n";
        let err = parse_responses_reader(csv.as_bytes(), &design4()).unwrap_err();
        assert!(matches!(err, DataError::DuplicateStudent { row: 2, .. }));
    }

    #[test]
    fn responses_error_on_bad_option() {
        let csv = "s1,r1,ACBZ\n";
        let err = parse_responses_reader(csv.as_bytes(), &design4()).unwrap_err();
        assert!(matches!(
            err,
            DataError::AnswerOutOfRange {
                row: 1,
                letter: 'Z',
                ..
            }
        ));
    }

    #[test]
    fn round_trip_preserves_matrix() {
        let csv = "s1,r1,ACBD\ns2,r1,A*BD\ns3,r2,DDDD\n";
        let matrix = parse_responses_reader(csv.as_bytes(), &design4()).unwrap();
        let mut buffer = Vec::new();
        write_responses(&mut buffer, &matrix).unwrap();
        let reparsed = parse_responses_reader(buffer.as_slice(), &design4()).unwrap();
        assert_eq!(matrix, reparsed);
    }

    #[test]
    fn rooms_group_in_first_appearance_order() {
        let csv = "s1,r2,ACBD\ns2,r1,ACBD\ns3,r2,ACBD\n";
        let matrix = parse_responses_reader(csv.as_bytes(), &design4()).unwrap();
        let rooms = matrix.rooms();
        assert_eq!(rooms[0], ("r2".to_string(), vec![0, 2]));
        assert_eq!(rooms[1], ("r1".to_string(), vec![1]));
    }

    #[test]
    fn fingerprint_changes_with_key() {
        let a = parse_key_str("ACBD", 4).unwrap();
        let b = parse_key_str("ACBA", 4).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(
            a.fingerprint(),
            parse_key_str("ACBD", 4).unwrap().fingerprint()
        );
    }

    mod model_files {
        use super::*;
        use crate::models::{ItemFlag, NominalItem, NominalModel, WesolowskyItemModel};

        fn nominal_fixture() -> NominalModel {
            let items = vec![
                NominalItem {
                    intercepts: vec![0.123456789012345, -0.2, 0.0766543210987, 0.0],
                    slopes: vec![1.0 / 3.0, -0.111, -0.1, -0.12233333333333],
                    flag: ItemFlag::Fitted,
                },
                NominalItem {
                    intercepts: vec![0.0; 4],
                    slopes: vec![0.0; 4],
                    flag: ItemFlag::Degenerate,
                },
            ];
            NominalModel::from_parameters(items, 4, 21).unwrap()
        }

        #[test]
        fn nominal_round_trip_is_bit_exact() {
            let design = parse_key_str("AB", 4).unwrap();
            let model = nominal_fixture();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            save_model(&SavedModel::Nominal(model.clone()), &design, &path).unwrap();
            let (loaded, fingerprint) = load_model(&path).unwrap();
            assert_eq!(fingerprint, design.fingerprint());
            match loaded {
                SavedModel::Nominal(reloaded) => assert_eq!(reloaded, model),
                other => panic!("wrong family {other:?}"),
            }
        }

        #[test]
        fn wesolowsky_round_trip_is_bit_exact() {
            let design = parse_key_str("AB", 4).unwrap();
            let model = WesolowskyItemModel {
                key: vec![0, 1],
                proportion_correct: vec![0.6123456789, 1.0 / 7.0],
                incorrect_shares: vec![
                    vec![0.0, 0.5, 0.25, 0.25],
                    vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0],
                ],
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            save_model(&SavedModel::Wesolowsky(model.clone()), &design, &path).unwrap();
            let (loaded, _) = load_model(&path).unwrap();
            match loaded {
                SavedModel::Wesolowsky(reloaded) => assert_eq!(reloaded, model),
                other => panic!("wrong family {other:?}"),
            }
        }

        #[test]
        fn wrong_magic_is_rejected() {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("bad.json");
            fs::write(&path, r#"{"format":"something-else","version":1}"#).unwrap();
            assert!(matches!(load_model(&path), Err(DataError::BadMagic { .. })));
        }

        #[test]
        fn version_mismatch_names_versions() {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("old.json");
            fs::write(&path, r#"{"format":"copydetect-model","version":99}"#).unwrap();
            let err = load_model(&path).unwrap_err();
            match &err {
                DataError::VersionMismatch {
                    expected, found, ..
                } => {
                    assert_eq!((*expected, *found), (MODEL_FORMAT_VERSION, 99));
                }
                other => panic!("unexpected error {other:?}"),
            }
            assert!(err.to_string().contains("expected 1"));
            assert!(err.to_string().contains("found 99"));
        }

        #[test]
        fn truncated_file_is_rejected() {
            let design = parse_key_str("AB", 4).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            save_model(&SavedModel::Nominal(nominal_fixture()), &design, &path).unwrap();
            let text = fs::read_to_string(&path).unwrap();
            fs::write(&path, &text[..text.len() / 2]).unwrap();
            assert!(matches!(
                load_model(&path),
                Err(DataError::MalformedModel { .. })
            ));
        }

        #[test]
        fn fingerprint_check_catches_wrong_exam() {
            let fitted_for = parse_key_str("ACBD", 4).unwrap();
            let applied_to = parse_key_str("DBCA", 4).unwrap();
            assert!(check_fingerprint(&fitted_for.fingerprint(), &fitted_for).is_ok());
            assert!(matches!(
                check_fingerprint(&fitted_for.fingerprint(), &applied_to),
                Err(DataError::FingerprintMismatch { .. })
            ));
        }
    }
}
