//! Similarity indices over ordered student pairs.
//!
//! Eight variants arise from three switches:
//! - family: which behavioral model supplies the probabilities
//!   (omega = nominal response model, gamma = proportion-correct model);
//! - conditioning: unconditional treats both answer vectors as random
//!   (`pi_i = sum_v P_c(v) P_s(v)`), conditional fixes the source's
//!   observed answer (`pi_i = P_c(v_s)`);
//! - tail: exact Poisson-binomial upper tail, or the normal approximation
//!   from the match count's mean and variance.
//!
//! Questions where either student is missing are dropped from both the
//! match count and the profile.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::dataio::ResponseMatrix;
use crate::models::{NominalModel, WesolowskyModel};
use crate::pbd::{MatchProfile, PbdError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("answer vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no overlapping answered questions between {copier_id} and {source_id}")]
    NoOverlap {
        copier_id: String,
        source_id: String,
    },
    #[error("variant {variant} needs the {needed} model but the scorer holds {held}")]
    FamilyMismatch {
        variant: String,
        needed: &'static str,
        held: &'static str,
    },
    #[error("student record {index} out of range ({len} records)")]
    RecordOutOfRange { index: usize, len: usize },
    #[error("student {student_id} is ineligible for pairwise detection (no answered questions)")]
    Ineligible { student_id: String },
    #[error(transparent)]
    Pbd(#[from] PbdError),
    #[error("scorer dimensions do not match the matrix: {0}")]
    DimensionMismatch(String),
    #[error("unknown index variant {0:?}")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Omega,
    Gamma,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Omega => "omega",
            Family::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Unconditional,
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMethod {
    Exact,
    Standardized,
}

/// One of the eight index variants. The short names follow the usual
/// subscript convention: 1 = unconditional, 2 = conditional, trailing
/// `s` = standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexVariant {
    pub family: Family,
    pub conditioning: Conditioning,
    pub tail: TailMethod,
}

impl IndexVariant {
    pub const ALL: [IndexVariant; 8] = [
        Self::named(
            Family::Omega,
            Conditioning::Unconditional,
            TailMethod::Exact,
        ),
        Self::named(Family::Omega, Conditioning::Conditional, TailMethod::Exact),
        Self::named(
            Family::Omega,
            Conditioning::Unconditional,
            TailMethod::Standardized,
        ),
        Self::named(
            Family::Omega,
            Conditioning::Conditional,
            TailMethod::Standardized,
        ),
        Self::named(
            Family::Gamma,
            Conditioning::Unconditional,
            TailMethod::Exact,
        ),
        Self::named(Family::Gamma, Conditioning::Conditional, TailMethod::Exact),
        Self::named(
            Family::Gamma,
            Conditioning::Unconditional,
            TailMethod::Standardized,
        ),
        Self::named(
            Family::Gamma,
            Conditioning::Conditional,
            TailMethod::Standardized,
        ),
    ];

    const fn named(family: Family, conditioning: Conditioning, tail: TailMethod) -> Self {
        Self {
            family,
            conditioning,
            tail,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.family, self.conditioning, self.tail) {
            (Family::Omega, Conditioning::Unconditional, TailMethod::Exact) => "omega1",
            (Family::Omega, Conditioning::Conditional, TailMethod::Exact) => "omega2",
            (Family::Omega, Conditioning::Unconditional, TailMethod::Standardized) => "omega1s",
            (Family::Omega, Conditioning::Conditional, TailMethod::Standardized) => "omega2s",
            (Family::Gamma, Conditioning::Unconditional, TailMethod::Exact) => "gamma1",
            (Family::Gamma, Conditioning::Conditional, TailMethod::Exact) => "gamma2",
            (Family::Gamma, Conditioning::Unconditional, TailMethod::Standardized) => "gamma1s",
            (Family::Gamma, Conditioning::Conditional, TailMethod::Standardized) => "gamma2s",
        }
    }
}

impl std::fmt::Display for IndexVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for IndexVariant {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|v| v.name() == s.trim().to_ascii_lowercase())
            .copied()
            .ok_or_else(|| IndexError::UnknownVariant(s.to_string()))
    }
}

/// Per-student, per-item option probabilities from one fitted model,
/// frozen for detection. Probabilities depend only on the model and each
/// student's original answers, so injected copies never change them.
#[derive(Debug, Clone)]
pub struct Scorer {
    family: Family,
    num_items: usize,
    num_options: usize,
    /// Flat [record][item][option].
    probs: Vec<f64>,
    eligible: Vec<bool>,
}

impl Scorer {
    pub fn from_nominal(model: &NominalModel, matrix: &ResponseMatrix) -> Result<Self, IndexError> {
        let design = matrix.design();
        if model.num_items() != design.num_questions()
            || model.num_options() != design.options_per_question()
        {
            return Err(IndexError::DimensionMismatch(format!(
                "model is {}x{}, data is {}x{}",
                model.num_items(),
                model.num_options(),
                design.num_questions(),
                design.options_per_question()
            )));
        }
        let num_items = model.num_items();
        let num_options = model.num_options();
        let per_record = num_items * num_options;
        let tables: Vec<Vec<f64>> = matrix
            .records()
            .par_iter()
            .map(|record| {
                let ability = model.eap(&record.responses);
                let mut table = vec![0.0; per_record];
                for item in 0..num_items {
                    model.option_probs(
                        ability.theta,
                        item,
                        &mut table[item * num_options..(item + 1) * num_options],
                    );
                }
                table
            })
            .collect();
        let mut probs = Vec::with_capacity(matrix.num_students() * per_record);
        for table in tables {
            probs.extend(table);
        }
        let eligible = matrix
            .records()
            .iter()
            .map(|r| r.num_answered() > 0)
            .collect();
        Ok(Self {
            family: Family::Omega,
            num_items,
            num_options,
            probs,
            eligible,
        })
    }

    pub fn from_wesolowsky(
        model: &WesolowskyModel,
        matrix: &ResponseMatrix,
    ) -> Result<Self, IndexError> {
        let design = matrix.design();
        if model.num_items() != design.num_questions()
            || model.num_options() != design.options_per_question()
            || model.students.len() != matrix.num_students()
        {
            return Err(IndexError::DimensionMismatch(format!(
                "model is {}x{} for {} students, data is {}x{} with {} students",
                model.num_items(),
                model.num_options(),
                model.students.len(),
                design.num_questions(),
                design.options_per_question(),
                matrix.num_students()
            )));
        }
        let num_items = model.num_items();
        let num_options = model.num_options();
        let per_record = num_items * num_options;
        let mut probs = vec![0.0; matrix.num_students() * per_record];
        for student in 0..matrix.num_students() {
            for item in 0..num_items {
                for option in 0..num_options {
                    probs[student * per_record + item * num_options + option] =
                        model.prob(student, item, option);
                }
            }
        }
        let eligible = model.students.iter().map(|s| s.eligible()).collect();
        Ok(Self {
            family: Family::Gamma,
            num_items,
            num_options,
            probs,
            eligible,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_options(&self) -> usize {
        self.num_options
    }

    pub fn num_students(&self) -> usize {
        self.eligible.len()
    }

    pub fn is_eligible(&self, record: usize) -> bool {
        self.eligible[record]
    }

    /// Record indices eligible for pairwise detection.
    pub fn eligibility(&self) -> &[bool] {
        &self.eligible
    }

    fn option_probs(&self, record: usize, item: usize) -> &[f64] {
        let per_record = self.num_items * self.num_options;
        let offset = record * per_record + item * self.num_options;
        &self.probs[offset..offset + self.num_options]
    }
}

/// Count of positions where both answered and the answers agree.
pub fn count_matches(left: &[Option<u8>], right: &[Option<u8>]) -> Result<usize, IndexError> {
    if left.len() != right.len() {
        return Err(IndexError::LengthMismatch {
            left: left.len(),
            right: right.len(),
        });
    }
    Ok(left
        .iter()
        .zip(right)
        .filter(|(a, b)| matches!((a, b), (Some(x), Some(y)) if x == y))
        .count())
}

/// Builds the match profile for an ordered (copier, source) pair along
/// with the observed match count over the scored questions.
pub fn match_profile(
    scorer: &Scorer,
    conditioning: Conditioning,
    copier: usize,
    source: usize,
    resp_copier: &[Option<u8>],
    resp_source: &[Option<u8>],
) -> Result<(MatchProfile, usize), IndexError> {
    if resp_copier.len() != resp_source.len() {
        return Err(IndexError::LengthMismatch {
            left: resp_copier.len(),
            right: resp_source.len(),
        });
    }
    let mut pis = Vec::with_capacity(resp_copier.len());
    let mut matches = 0usize;
    for item in 0..resp_copier.len() {
        let (Some(answer_c), Some(answer_s)) = (resp_copier[item], resp_source[item]) else {
            continue;
        };
        if answer_c == answer_s {
            matches += 1;
        }
        let probs_c = scorer.option_probs(copier, item);
        let pi = match conditioning {
            Conditioning::Unconditional => {
                let probs_s = scorer.option_probs(source, item);
                probs_c.iter().zip(probs_s).map(|(a, b)| a * b).sum()
            }
            Conditioning::Conditional => probs_c[answer_s as usize],
        };
        pis.push(pi);
    }
    if pis.is_empty() {
        return Err(IndexError::NoOverlap {
            copier_id: format!("record {copier}"),
            source_id: format!("record {source}"),
        });
    }
    Ok((MatchProfile::new(pis)?, matches))
}

/// Exact p-value: inclusive Poisson-binomial upper tail at the match count.
pub fn exact_p(profile: &MatchProfile, matches: usize) -> Result<f64, IndexError> {
    Ok(profile.upper_tail(matches)?)
}

/// Standardized statistic and one-sided normal p-value. With
/// `continuity_correction` the count is shifted by a half point.
pub fn standardized_p(
    profile: &MatchProfile,
    matches: usize,
    continuity_correction: bool,
) -> (f64, f64) {
    let mean = profile.mean();
    let sd = profile.variance().sqrt();
    let adjusted = if continuity_correction {
        matches as f64 - 0.5
    } else {
        matches as f64
    };
    let z = (adjusted - mean) / sd;
    (z, normal_upper_tail(z))
}

/// P(Z >= z) for standard normal Z.
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Statistic and p-value for one ordered pair under one variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub matches: usize,
    pub n_scored: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Evaluates one ordered (copier, source) pair with explicit answer
/// vectors; the simulation protocol passes modified copies through here.
pub fn evaluate_pair(
    scorer: &Scorer,
    copier: usize,
    source: usize,
    resp_copier: &[Option<u8>],
    resp_source: &[Option<u8>],
    variant: IndexVariant,
    continuity_correction: bool,
) -> Result<PairOutcome, IndexError> {
    if variant.family != scorer.family {
        return Err(IndexError::FamilyMismatch {
            variant: variant.name().to_string(),
            needed: variant.family.name(),
            held: scorer.family.name(),
        });
    }
    let (profile, matches) = match_profile(
        scorer,
        variant.conditioning,
        copier,
        source,
        resp_copier,
        resp_source,
    )?;
    let n_scored = profile.len();
    match variant.tail {
        TailMethod::Exact => {
            let p_value = exact_p(&profile, matches)?;
            Ok(PairOutcome {
                matches,
                n_scored,
                statistic: matches as f64,
                p_value,
            })
        }
        TailMethod::Standardized => {
            let (z, p_value) = standardized_p(&profile, matches, continuity_correction);
            Ok(PairOutcome {
                matches,
                n_scored,
                statistic: z,
                p_value,
            })
        }
    }
}

/// A scored ordered pair, ready for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub copier_id: String,
    pub source_id: String,
    pub room_id: String,
    pub variant: IndexVariant,
    pub matches: usize,
    pub n_scored: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Tests the ordered hypothesis "copier copied from source".
pub fn detect_pair(
    matrix: &ResponseMatrix,
    scorer: &Scorer,
    copier: usize,
    source: usize,
    variant: IndexVariant,
    continuity_correction: bool,
) -> Result<PairResult, IndexError> {
    let records = matrix.records();
    for index in [copier, source] {
        if index >= records.len() {
            return Err(IndexError::RecordOutOfRange {
                index,
                len: records.len(),
            });
        }
        if !scorer.is_eligible(index) {
            return Err(IndexError::Ineligible {
                student_id: records[index].student_id.clone(),
            });
        }
    }
    let outcome = evaluate_pair(
        scorer,
        copier,
        source,
        &records[copier].responses,
        &records[source].responses,
        variant,
        continuity_correction,
    )
    .map_err(|error| match error {
        // Name the students, not the record slots.
        IndexError::NoOverlap { .. } => IndexError::NoOverlap {
            copier_id: records[copier].student_id.clone(),
            source_id: records[source].student_id.clone(),
        },
        other => other,
    })?;
    Ok(PairResult {
        copier_id: records[copier].student_id.clone(),
        source_id: records[source].student_id.clone(),
        room_id: records[copier].room_id.clone(),
        variant,
        matches: outcome.matches,
        n_scored: outcome.n_scored,
        statistic: outcome.statistic,
        p_value: outcome.p_value,
    })
}

/// Detection output for one room.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomDetection {
    pub room_id: String,
    pub results: Vec<PairResult>,
    /// True when the room had fewer than two eligible students.
    pub skipped: bool,
}

/// Runs every ordered pair among a room's eligible students; output is
/// ordered by (copier_id, source_id) regardless of parallel schedule.
pub fn detect_room(
    matrix: &ResponseMatrix,
    scorer: &Scorer,
    room_id: &str,
    members: &[usize],
    variant: IndexVariant,
    continuity_correction: bool,
) -> Result<RoomDetection, IndexError> {
    let records = matrix.records();
    let mut eligible: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&index| index < records.len() && scorer.is_eligible(index))
        .collect();
    eligible.sort_by(|&a, &b| records[a].student_id.cmp(&records[b].student_id));
    if eligible.len() < 2 {
        return Ok(RoomDetection {
            room_id: room_id.to_string(),
            results: Vec::new(),
            skipped: true,
        });
    }
    let pairs: Vec<(usize, usize)> = eligible
        .iter()
        .flat_map(|&copier| {
            eligible
                .iter()
                .filter_map(move |&source| (copier != source).then_some((copier, source)))
        })
        .collect();
    let results: Result<Vec<PairResult>, IndexError> = pairs
        .par_iter()
        .map(|&(copier, source)| {
            detect_pair(
                matrix,
                scorer,
                copier,
                source,
                variant,
                continuity_correction,
            )
        })
        .collect();
    Ok(RoomDetection {
        room_id: room_id.to_string(),
        results: results?,
        skipped: false,
    })
}

/// Room-by-room detection over the whole matrix, rooms in first-appearance
/// order.
pub fn detect_all_rooms(
    matrix: &ResponseMatrix,
    scorer: &Scorer,
    variant: IndexVariant,
    continuity_correction: bool,
) -> Result<Vec<RoomDetection>, IndexError> {
    matrix
        .rooms()
        .into_iter()
        .map(|(room_id, members)| {
            detect_room(
                matrix,
                scorer,
                &room_id,
                &members,
                variant,
                continuity_correction,
            )
        })
        .collect()
}
