//! Per-room multiple-testing control and massive-cheating flags.
//!
//! Within one examination room the index runs n(n-1) times, so raw
//! p-values need false-discovery-rate control before anyone is counted as
//! suspected. The step-up procedure of Benjamini-Hochberg is applied room
//! by room; a room is flagged as massive cheating when the share of
//! suspected students exceeds a threshold (0.6 by default).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indices::PairResult;

#[derive(Debug, Error)]
pub enum MtpError {
    #[error("p-value at index {index} is {value}, outside [0, 1]")]
    InvalidPValue { index: usize, value: f64 },
    #[error("p_star = {0} must lie strictly inside (0, 1)")]
    InvalidPStar(f64),
    #[error("threshold = {0} must be non-negative")]
    InvalidThreshold(f64),
    #[error("results mix rooms: {first} and {second}")]
    MixedRooms { first: String, second: String },
    #[error("results mix variants: {first} and {second}")]
    MixedVariants { first: String, second: String },
}

/// Step-up false-discovery-rate control: sort ascending, find the largest
/// rank i with `P_(i) <= (i/m) p_star`, reject everything up to it.
/// Returns the indices of rejected hypotheses in the original order.
/// The rejected set is a p-value cutoff, so ties never straddle the
/// boundary and input permutation cannot change the outcome.
pub fn bh_reject(p_values: &[f64], p_star: f64) -> Result<Vec<usize>, MtpError> {
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(MtpError::InvalidPStar(p_star));
    }
    for (index, &value) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) || value.is_nan() {
            return Err(MtpError::InvalidPValue { index, value });
        }
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut cutoff_rank = None;
    for (rank, &index) in order.iter().enumerate() {
        if p_values[index] <= (rank + 1) as f64 / m as f64 * p_star {
            cutoff_rank = Some(rank);
        }
    }
    let Some(cutoff_rank) = cutoff_rank else {
        return Ok(Vec::new());
    };
    let mut rejected: Vec<usize> = order[..=cutoff_rank].to_vec();
    rejected.sort_unstable();
    Ok(rejected)
}

/// How a rejected ordered pair implicates students.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspectRule {
    /// Only the copier side of a rejected pair is suspected (default).
    Copier,
    /// Both members of a rejected pair are suspected.
    EitherRole,
}

/// Screening outcome for one examination room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomReport {
    pub room_id: String,
    pub num_students: usize,
    pub num_tests: usize,
    /// (copier_id, source_id) of each rejected ordered pair.
    pub rejected_pairs: Vec<(String, String)>,
    pub suspected_students: BTreeSet<String>,
    pub suspected_share: f64,
    pub massive_flag: bool,
    pub p_star: f64,
    pub threshold: f64,
    /// True when the room had no testable pairs and was skipped.
    pub skipped: bool,
}

/// Applies FDR control to one room's ordered-pair results and aggregates
/// rejections into suspected students.
pub fn room_report(
    room_id: &str,
    num_students: usize,
    results: &[PairResult],
    p_star: f64,
    threshold: f64,
    rule: SuspectRule,
) -> Result<RoomReport, MtpError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(MtpError::InvalidThreshold(threshold));
    }
    if results.is_empty() {
        if !(p_star > 0.0 && p_star < 1.0) {
            return Err(MtpError::InvalidPStar(p_star));
        }
        return Ok(RoomReport {
            room_id: room_id.to_string(),
            num_students,
            num_tests: 0,
            rejected_pairs: Vec::new(),
            suspected_students: BTreeSet::new(),
            suspected_share: 0.0,
            massive_flag: false,
            p_star,
            threshold,
            skipped: true,
        });
    }
    for result in results {
        if result.room_id != room_id {
            return Err(MtpError::MixedRooms {
                first: room_id.to_string(),
                second: result.room_id.clone(),
            });
        }
        if result.variant != results[0].variant {
            return Err(MtpError::MixedVariants {
                first: results[0].variant.name().to_string(),
                second: result.variant.name().to_string(),
            });
        }
    }
    let p_values: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let rejected = bh_reject(&p_values, p_star)?;
    let rejected_pairs: Vec<(String, String)> = rejected
        .iter()
        .map(|&i| (results[i].copier_id.clone(), results[i].source_id.clone()))
        .collect();
    let mut suspected = BTreeSet::new();
    for (copier, source) in &rejected_pairs {
        suspected.insert(copier.clone());
        if rule == SuspectRule::EitherRole {
            suspected.insert(source.clone());
        }
    }
    let suspected_share = if num_students == 0 {
        0.0
    } else {
        suspected.len() as f64 / num_students as f64
    };
    Ok(RoomReport {
        room_id: room_id.to_string(),
        num_students,
        num_tests: results.len(),
        rejected_pairs,
        suspected_students: suspected,
        suspected_share,
        massive_flag: suspected_share > threshold,
        p_star,
        threshold,
        skipped: false,
    })
}

/// Share of rooms flagged as massive cheating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassiveSummary {
    pub num_rooms: usize,
    pub num_flagged: usize,
    pub proportion: f64,
}

pub fn massive_summary(reports: &[RoomReport]) -> MassiveSummary {
    let num_rooms = reports.len();
    let num_flagged = reports.iter().filter(|r| r.massive_flag).count();
    let proportion = if num_rooms == 0 {
        0.0
    } else {
        num_flagged as f64 / num_rooms as f64
    };
    MassiveSummary {
        num_rooms,
        num_flagged,
        proportion,
    }
}
