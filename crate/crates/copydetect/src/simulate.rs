//! Monte-Carlo validation protocol.
//!
//! Type-I error: pair students from different examination rooms (who
//! cannot have copied), run an index, and count rejections. Power: take
//! the same pairs, overwrite k of the copier's answers with the source's,
//! and count rejections per copying level k.
//!
//! Determinism: every random stream is derived from (seed, stream id), so
//! a run is reproducible for any thread count. Power levels reuse the
//! same pairs, and each pair draws one question permutation whose first k
//! entries are the copied positions, so the injected sets are nested
//! across levels. Positions are chosen blindly: copying a question that
//! already matched still counts toward k.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::{DataError, ExamDesign, ResponseMatrix, StudentRecord};
use crate::indices::{evaluate_pair, Family, IndexError, IndexVariant, Scorer};
use crate::models::{ItemFlag, NominalItem, NominalModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cross-room pairing needs at least two rooms with eligible students")]
    NotEnoughRooms,
    #[error("requested {requested} cross-room pairs but only {available} exist")]
    TooManyPairs { requested: u64, available: u64 },
    #[error("copy level {k} out of range for {n} questions")]
    CopyLevelOutOfRange { k: usize, n: usize },
    #[error("copy position {position} out of range for {n} questions")]
    PositionOutOfRange { position: usize, n: usize },
    #[error("answer vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no {family} scorer supplied but a {family} variant was requested")]
    MissingScorer { family: &'static str },
    #[error("no index variants requested")]
    NoVariants,
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Knobs for one protocol run.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub num_pairs: usize,
    pub alpha: f64,
    /// Copying levels k; each must lie in 0..=N.
    pub copy_levels: Vec<usize>,
    pub seed: u64,
    pub continuity_correction: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_pairs: 100_000,
            alpha: 0.001,
            copy_levels: Vec::new(),
            seed: 0,
            continuity_correction: false,
        }
    }
}

impl SimulationConfig {
    fn validate(&self, num_questions: usize) -> Result<(), SimError> {
        if self.num_pairs == 0 {
            return Err(SimError::BadConfig("num_pairs must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SimError::BadConfig(format!(
                "alpha = {} outside (0, 1]",
                self.alpha
            )));
        }
        if let Some(&k) = self.copy_levels.iter().find(|&&k| k > num_questions) {
            return Err(SimError::CopyLevelOutOfRange {
                k,
                n: num_questions,
            });
        }
        Ok(())
    }
}

/// The copying-level grid used throughout: 1, 5, 10, 15, ... and finally N.
pub fn default_copy_levels(num_questions: usize) -> Vec<usize> {
    let mut levels = vec![1];
    let mut k = 5;
    while k < num_questions {
        levels.push(k);
        k += 5;
    }
    if num_questions > 1 {
        levels.push(num_questions);
    }
    levels.dedup();
    levels
}

/// Deterministic stream derivation: splitmix64 over (seed, stream) fills
/// the ChaCha key, so parallel and serial runs see identical randomness.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const STREAM_PAIR_SAMPLING: u64 = 0;
const STREAM_PAIR_BASE: u64 = 1 << 32;

/// Samples `count` ordered (copier, source) pairs uniformly among pairs of
/// eligible students from different rooms, without replacement.
pub fn sample_cross_room_pairs(
    matrix: &ResponseMatrix,
    eligible: &[bool],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, SimError> {
    let rooms = matrix.rooms();
    let students: Vec<usize> = (0..matrix.num_students())
        .filter(|&i| eligible[i])
        .collect();
    let total: u64 = students.len() as u64;
    let mut room_sizes: Vec<u64> = Vec::new();
    for (_, members) in &rooms {
        let size = members.iter().filter(|&&i| eligible[i]).count() as u64;
        if size > 0 {
            room_sizes.push(size);
        }
    }
    if room_sizes.len() < 2 {
        return Err(SimError::NotEnoughRooms);
    }
    let available: u64 = total * total - room_sizes.iter().map(|s| s * s).sum::<u64>();
    if count as u64 > available {
        return Err(SimError::TooManyPairs {
            requested: count as u64,
            available,
        });
    }

    // Dense requests enumerate and shuffle; sparse ones use rejection.
    if available <= 2 * count as u64 || available <= 1 << 16 {
        let records = matrix.records();
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(available as usize);
        for &copier in &students {
            for &source in &students {
                if records[copier].room_id != records[source].room_id {
                    pairs.push((copier, source));
                }
            }
        }
        pairs.partial_shuffle(rng, count);
        pairs.truncate(count);
        Ok(pairs)
    } else {
        let records = matrix.records();
        let mut seen = std::collections::HashSet::with_capacity(count * 2);
        let mut pairs = Vec::with_capacity(count);
        while pairs.len() < count {
            let copier = students[rng.gen_range(0..students.len())];
            let source = students[rng.gen_range(0..students.len())];
            if records[copier].room_id == records[source].room_id {
                continue;
            }
            if seen.insert((copier, source)) {
                pairs.push((copier, source));
            }
        }
        Ok(pairs)
    }
}

/// Overwrites the copier's answers at the given positions with the
/// source's values (missing included: the source pattern is replicated
/// literally).
pub fn inject_copy_at(
    resp_copier: &mut [Option<u8>],
    resp_source: &[Option<u8>],
    positions: &[usize],
) -> Result<(), SimError> {
    if resp_copier.len() != resp_source.len() {
        return Err(SimError::LengthMismatch {
            left: resp_copier.len(),
            right: resp_source.len(),
        });
    }
    for &position in positions {
        if position >= resp_copier.len() {
            return Err(SimError::PositionOutOfRange {
                position,
                n: resp_copier.len(),
            });
        }
        resp_copier[position] = resp_source[position];
    }
    Ok(())
}

/// Chooses k distinct positions uniformly at random and copies the
/// source's answers there. Returns the chosen positions.
pub fn inject_copy(
    resp_copier: &mut [Option<u8>],
    resp_source: &[Option<u8>],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, SimError> {
    let n = resp_copier.len();
    if k > n {
        return Err(SimError::CopyLevelOutOfRange { k, n });
    }
    let positions: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    inject_copy_at(resp_copier, resp_source, &positions)?;
    Ok(positions)
}

/// Rejection rate with its binomial Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub rate: f64,
    pub se: f64,
    pub rejections: usize,
    pub num_pairs: usize,
}

impl RatePoint {
    fn from_counts(rejections: usize, num_pairs: usize) -> Self {
        let rate = rejections as f64 / num_pairs as f64;
        let se = (rate * (1.0 - rate) / num_pairs as f64).sqrt();
        Self {
            rate,
            se,
            rejections,
            num_pairs,
        }
    }

    /// Rejections per 1000 pairs, the conventional reporting unit.
    pub fn per_thousand(&self) -> f64 {
        self.rate * 1000.0
    }
}

/// Power at one copying level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub copy_level: usize,
    pub rate: f64,
    pub se: f64,
    pub rejections: usize,
    pub num_pairs: usize,
}

/// Type-I rate and power curve for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRates {
    pub variant: IndexVariant,
    pub type1: RatePoint,
    pub power: Vec<PowerPoint>,
}

/// Scorers available to a protocol run, at most one per family.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScorerSet<'a> {
    pub omega: Option<&'a Scorer>,
    pub gamma: Option<&'a Scorer>,
}

impl<'a> ScorerSet<'a> {
    pub fn scorer_for(&self, family: Family) -> Result<&'a Scorer, SimError> {
        let held = match family {
            Family::Omega => self.omega,
            Family::Gamma => self.gamma,
        };
        held.ok_or(SimError::MissingScorer {
            family: family.name(),
        })
    }

    fn joint_eligibility(&self, num_students: usize) -> Vec<bool> {
        (0..num_students)
            .map(|i| {
                self.omega.is_none_or(|s| s.is_eligible(i))
                    && self.gamma.is_none_or(|s| s.is_eligible(i))
            })
            .collect()
    }
}

/// Runs the full protocol: sample cross-room pairs once, measure the
/// type-I rate on them, then measure power at each copying level with the
/// same pairs. Model probabilities are never refitted after injection.
pub fn run_protocol(
    matrix: &ResponseMatrix,
    scorers: &ScorerSet,
    variants: &[IndexVariant],
    config: &SimulationConfig,
) -> Result<Vec<VariantRates>, SimError> {
    let num_questions = matrix.design().num_questions();
    config.validate(num_questions)?;
    if variants.is_empty() {
        return Err(SimError::NoVariants);
    }
    let resolved: Vec<(IndexVariant, &Scorer)> = variants
        .iter()
        .map(|&variant| Ok((variant, scorers.scorer_for(variant.family)?)))
        .collect::<Result<_, SimError>>()?;

    let eligible = scorers.joint_eligibility(matrix.num_students());
    let mut sampling_rng = rng_for(config.seed, STREAM_PAIR_SAMPLING);
    let pairs = sample_cross_room_pairs(matrix, &eligible, config.num_pairs, &mut sampling_rng)?;

    let mut levels: Vec<usize> = config.copy_levels.clone();
    levels.sort_unstable();
    levels.dedup();

    let num_variants = resolved.len();
    let num_levels = levels.len();
    let records = matrix.records();
    let alpha = config.alpha;
    let cc = config.continuity_correction;

    // Rejection counters: [variant][1 + level]; slot 0 is the null run.
    // Integer totals make the parallel reduction order irrelevant.
    let counts: Result<Vec<u64>, SimError> = pairs
        .par_iter()
        .enumerate()
        .try_fold(
            || vec![0u64; num_variants * (1 + num_levels)],
            |mut local, (pair_index, &(copier, source))| {
                let resp_source = &records[source].responses;
                let resp_original = &records[copier].responses;
                for (slot, &(variant, scorer)) in resolved.iter().enumerate() {
                    let outcome = evaluate_pair(
                        scorer,
                        copier,
                        source,
                        resp_original,
                        resp_source,
                        variant,
                        cc,
                    )?;
                    if outcome.p_value <= alpha {
                        local[slot * (1 + num_levels)] += 1;
                    }
                }
                if !levels.is_empty() {
                    let mut order: Vec<usize> = (0..num_questions).collect();
                    let mut pair_rng = rng_for(config.seed, STREAM_PAIR_BASE + pair_index as u64);
                    order.shuffle(&mut pair_rng);
                    let mut modified = resp_original.clone();
                    let mut applied = 0usize;
                    for (level_index, &k) in levels.iter().enumerate() {
                        inject_copy_at(&mut modified, resp_source, &order[applied..k])?;
                        applied = k;
                        for (slot, &(variant, scorer)) in resolved.iter().enumerate() {
                            let outcome = evaluate_pair(
                                scorer,
                                copier,
                                source,
                                &modified,
                                resp_source,
                                variant,
                                cc,
                            )?;
                            if outcome.p_value <= alpha {
                                local[slot * (1 + num_levels) + 1 + level_index] += 1;
                            }
                        }
                    }
                }
                Ok(local)
            },
        )
        .try_reduce(
            || vec![0u64; num_variants * (1 + num_levels)],
            |mut left, right| {
                for (a, b) in left.iter_mut().zip(right) {
                    *a += b;
                }
                Ok(left)
            },
        );
    let counts = counts?;

    let num_pairs = pairs.len();
    Ok(resolved
        .iter()
        .enumerate()
        .map(|(slot, &(variant, _))| {
            let base = slot * (1 + num_levels);
            let type1 = RatePoint::from_counts(counts[base] as usize, num_pairs);
            let power = levels
                .iter()
                .enumerate()
                .map(|(level_index, &k)| {
                    let point = if k == 0 {
                        // No injection: identical to the null run.
                        RatePoint::from_counts(counts[base] as usize, num_pairs)
                    } else {
                        RatePoint::from_counts(counts[base + 1 + level_index] as usize, num_pairs)
                    };
                    PowerPoint {
                        copy_level: k,
                        rate: point.rate,
                        se: point.se,
                        rejections: point.rejections,
                        num_pairs: point.num_pairs,
                    }
                })
                .collect();
            VariantRates {
                variant,
                type1,
                power,
            }
        })
        .collect())
}

/// Type-I rate only (no power levels).
pub fn type1_rate(
    matrix: &ResponseMatrix,
    scorers: &ScorerSet,
    variant: IndexVariant,
    config: &SimulationConfig,
) -> Result<RatePoint, SimError> {
    let mut stripped = config.clone();
    stripped.copy_levels = Vec::new();
    let rates = run_protocol(matrix, scorers, &[variant], &stripped)?;
    Ok(rates[0].type1)
}

/// Draws a complete synthetic response matrix from a nominal model:
/// abilities are standard normal, answers follow the model's option
/// probabilities, rooms are assigned round-robin.
pub fn generate_synthetic(
    model: &NominalModel,
    design: &ExamDesign,
    num_students: usize,
    num_rooms: usize,
    seed: u64,
) -> Result<ResponseMatrix, SimError> {
    if model.num_items() != design.num_questions()
        || model.num_options() != design.options_per_question()
    {
        return Err(SimError::BadConfig(format!(
            "model is {}x{}, design is {}x{}",
            model.num_items(),
            model.num_options(),
            design.num_questions(),
            design.options_per_question()
        )));
    }
    if num_students == 0 || num_rooms == 0 {
        return Err(SimError::BadConfig(
            "need at least one student and one room".into(),
        ));
    }
    let mut rng = rng_for(seed, 2 << 60);
    let num_items = model.num_items();
    let num_options = model.num_options();
    let id_width = num_students.to_string().len().max(4);
    let room_width = num_rooms.to_string().len().max(2);
    let mut probs = vec![0.0; num_options];
    let records: Vec<StudentRecord> = (0..num_students)
        .map(|student| {
            let theta: f64 = rng.sample(StandardNormal);
            let responses: Vec<Option<u8>> = (0..num_items)
                .map(|item| {
                    model.option_probs(theta, item, &mut probs);
                    let draw: f64 = rng.gen();
                    let mut cumulative = 0.0;
                    let mut chosen = num_options - 1;
                    for (option, &p) in probs.iter().enumerate() {
                        cumulative += p;
                        if draw < cumulative {
                            chosen = option;
                            break;
                        }
                    }
                    Some(chosen as u8)
                })
                .collect();
            StudentRecord {
                student_id: format!("s{student:0id_width$}"),
                room_id: format!("r{:0room_width$}", student % num_rooms),
                responses,
            }
        })
        .collect();
    Ok(ResponseMatrix::new(design.clone(), records)?)
}

/// Shape of a synthetic exam population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub items: usize,
    pub options: usize,
    pub students: usize,
    pub rooms: usize,
}

/// Draws a plausible "true" nominal model and its answer key: every item
/// gives the keyed option the largest slope, so higher ability means more
/// correct answers.
pub fn random_true_model(
    items: usize,
    options: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(NominalModel, ExamDesign), SimError> {
    if items == 0 || options < 2 {
        return Err(SimError::BadConfig(
            "need at least one item and two options".into(),
        ));
    }
    let mut key = Vec::with_capacity(items);
    let mut model_items = Vec::with_capacity(items);
    for _ in 0..items {
        let keyed: u8 = rng.gen_range(0..options as u8);
        key.push(keyed);
        let mut intercepts: Vec<f64> = (0..options).map(|_| rng.gen_range(-0.7..0.7)).collect();
        // Moderate discriminations, in line with operational
        // multiple-choice items.
        let mut slopes: Vec<f64> = (0..options)
            .map(|v| {
                if v as u8 == keyed {
                    rng.gen_range(0.5..1.3)
                } else {
                    rng.gen_range(-0.6..-0.1)
                }
            })
            .collect();
        let mean_intercept = intercepts.iter().sum::<f64>() / options as f64;
        let mean_slope = slopes.iter().sum::<f64>() / options as f64;
        intercepts.iter_mut().for_each(|x| *x -= mean_intercept);
        slopes.iter_mut().for_each(|x| *x -= mean_slope);
        model_items.push(NominalItem {
            intercepts,
            slopes,
            flag: ItemFlag::Fitted,
        });
    }
    let design = ExamDesign::new(options, key)?;
    let model = NominalModel::from_parameters(model_items, options, 21)
        .map_err(|e| SimError::BadConfig(e.to_string()))?;
    Ok((model, design))
}

/// Convenience wrapper: true model + synthetic matrix for a spec.
pub fn synthetic_population(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(NominalModel, ResponseMatrix), SimError> {
    let mut rng = rng_for(seed, 3 << 60);
    let (model, design) = random_true_model(spec.items, spec.options, &mut rng)?;
    let matrix = generate_synthetic(&model, &design, spec.students, spec.rooms, seed)?;
    Ok((model, matrix))
}
