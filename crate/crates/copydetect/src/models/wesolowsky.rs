//! Proportion-correct response model in the style of Wesolowsky.
//!
//! Item side: `r_i` is the observed proportion correct on question `i` and
//! `q_iv` the share of each incorrect option among incorrect answers.
//! Student side: a single parameter `a_j > 0` bends the item curve
//! `p_i = (1 - (1 - r_i)^a)^(1/a)` until the student's mean predicted
//! correct-rate over their answered questions equals their observed
//! proportion correct `c_j`. The mean is strictly increasing in `a`, so a
//! bracketed bisection on log(a) finds the root.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataio::ResponseMatrix;

/// Clamp for observed proportions so the transform stays interior.
pub const PROPORTION_EPS: f64 = 1e-6;
/// Bracket for the student parameter `a`.
pub const A_MIN: f64 = 1e-3;
pub const A_MAX: f64 = 1e3;
const ROOT_RESIDUAL_TOL: f64 = 1e-8;
const MAX_BISECTIONS: usize = 200;

/// Item-level parameters; this is what gets persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WesolowskyItemModel {
    /// Correct option per question, 0-based.
    pub key: Vec<u8>,
    /// Clamped proportion correct per question.
    pub proportion_correct: Vec<f64>,
    /// Per question, per option: share among incorrect answers. The keyed
    /// option's slot is zero; the rest sum to one.
    pub incorrect_shares: Vec<Vec<f64>>,
}

impl WesolowskyItemModel {
    pub fn num_items(&self) -> usize {
        self.key.len()
    }

    pub fn num_options(&self) -> usize {
        self.incorrect_shares.first().map_or(0, Vec::len)
    }

    /// Probability the student answers question `item` correctly.
    pub fn correct_prob(&self, ability: f64, item: usize) -> f64 {
        item_curve(self.proportion_correct[item], ability)
    }
}

/// Per-student parameters recomputed from the item model and a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WesolowskyStudent {
    /// Solved curve parameter; NaN when the student answered nothing.
    pub ability: f64,
    /// Observed (clamped) proportion correct over answered questions.
    pub proportion_correct: f64,
    pub num_answered: usize,
    /// True when the root left the bracket and `ability` was clamped.
    pub boundary_clamped: bool,
    /// Residual |mean p - c| at the returned ability.
    pub residual: f64,
}

impl WesolowskyStudent {
    pub fn eligible(&self) -> bool {
        self.num_answered > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WesolowskyModel {
    pub items: WesolowskyItemModel,
    pub students: Vec<WesolowskyStudent>,
}

impl WesolowskyModel {
    pub fn num_items(&self) -> usize {
        self.items.num_items()
    }

    pub fn num_options(&self) -> usize {
        self.items.num_options()
    }

    /// P(option | student, item): the item curve value on the keyed option,
    /// the complement split by incorrect shares elsewhere. Sums to one.
    pub fn prob(&self, student: usize, item: usize, option: usize) -> f64 {
        let info = &self.students[student];
        let n = self.num_options();
        if !info.ability.is_finite() {
            return 1.0 / n as f64;
        }
        let p_correct = self.items.correct_prob(info.ability, item);
        if option as u8 == self.items.key[item] {
            p_correct
        } else {
            (1.0 - p_correct) * self.items.incorrect_shares[item][option]
        }
    }
}

/// `p(a) = (1 - (1 - r)^a)^(1/a)`, evaluated in log space.
fn item_curve(r: f64, a: f64) -> f64 {
    let u = a * (1.0 - r).ln(); // <= 0
    (log1m_exp(u) / a).exp()
}

/// ln(1 - e^u) for u < 0, stable near both ends.
fn log1m_exp(u: f64) -> f64 {
    if u > -std::f64::consts::LN_2 {
        (-u.exp_m1()).ln()
    } else {
        (-u.exp()).ln_1p()
    }
}

/// Fits item- and student-level parameters from a response matrix.
pub fn fit_wesolowsky(matrix: &ResponseMatrix) -> Result<WesolowskyModel, ModelError> {
    if matrix.num_students() < 2 {
        return Err(ModelError::TooFewRecords {
            found: matrix.num_students(),
            required: 2,
        });
    }
    let design = matrix.design();
    let num_items = design.num_questions();
    let num_options = design.options_per_question();
    let key = design.key().to_vec();

    let mut answered = vec![0usize; num_items];
    let mut correct = vec![0usize; num_items];
    let mut option_counts = vec![vec![0usize; num_options]; num_items];
    for record in matrix.records() {
        for (item, response) in record.responses.iter().enumerate() {
            if let Some(option) = response {
                answered[item] += 1;
                if *option == key[item] {
                    correct[item] += 1;
                } else {
                    option_counts[item][*option as usize] += 1;
                }
            }
        }
    }

    let proportion_correct: Vec<f64> = (0..num_items)
        .map(|item| {
            let raw = if answered[item] == 0 {
                // Nobody reached the question; fall back to indifference.
                0.5
            } else {
                correct[item] as f64 / answered[item] as f64
            };
            raw.clamp(PROPORTION_EPS, 1.0 - PROPORTION_EPS)
        })
        .collect();

    let incorrect_shares: Vec<Vec<f64>> = (0..num_items)
        .map(|item| {
            let total: usize = option_counts[item].iter().sum();
            let mut shares = vec![0.0; num_options];
            if total == 0 {
                // No incorrect answers observed; split evenly.
                let uniform = 1.0 / (num_options as f64 - 1.0);
                for (option, share) in shares.iter_mut().enumerate() {
                    if option as u8 != key[item] {
                        *share = uniform;
                    }
                }
            } else {
                for (option, share) in shares.iter_mut().enumerate() {
                    *share = option_counts[item][option] as f64 / total as f64;
                }
            }
            shares
        })
        .collect();

    let items = WesolowskyItemModel {
        key,
        proportion_correct,
        incorrect_shares,
    };
    let students = solve_students(&items, matrix);
    Ok(WesolowskyModel { items, students })
}

/// Solves the per-student curve parameter against a (possibly different)
/// response matrix; used both at fit time and when a persisted item model
/// is applied to fresh data.
pub fn solve_students(
    items: &WesolowskyItemModel,
    matrix: &ResponseMatrix,
) -> Vec<WesolowskyStudent> {
    let key = &items.key;
    matrix
        .records()
        .par_iter()
        .map(|record| {
            let mut answered_items: Vec<usize> = Vec::new();
            let mut num_correct = 0usize;
            for (item, response) in record.responses.iter().enumerate() {
                if let Some(option) = response {
                    answered_items.push(item);
                    if *option == key[item] {
                        num_correct += 1;
                    }
                }
            }
            if answered_items.is_empty() {
                return WesolowskyStudent {
                    ability: f64::NAN,
                    proportion_correct: f64::NAN,
                    num_answered: 0,
                    boundary_clamped: false,
                    residual: f64::NAN,
                };
            }
            let c = (num_correct as f64 / answered_items.len() as f64)
                .clamp(PROPORTION_EPS, 1.0 - PROPORTION_EPS);
            solve_one(items, &answered_items, c)
        })
        .collect()
}

fn mean_curve(items: &WesolowskyItemModel, answered: &[usize], a: f64) -> f64 {
    let total: f64 = answered
        .iter()
        .map(|&item| item_curve(items.proportion_correct[item], a))
        .sum();
    total / answered.len() as f64
}

fn solve_one(items: &WesolowskyItemModel, answered: &[usize], c: f64) -> WesolowskyStudent {
    let make = |ability: f64, clamped: bool| {
        let residual = (mean_curve(items, answered, ability) - c).abs();
        WesolowskyStudent {
            ability,
            proportion_correct: c,
            num_answered: answered.len(),
            boundary_clamped: clamped,
            residual,
        }
    };
    let mut lo = A_MIN.ln();
    let mut hi = A_MAX.ln();
    let g = |t: f64| mean_curve(items, answered, t.exp()) - c;
    let g_lo = g(lo);
    let g_hi = g(hi);
    if g_lo >= 0.0 {
        return make(A_MIN, true);
    }
    if g_hi <= 0.0 {
        return make(A_MAX, true);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let value = g(mid);
        if value.abs() <= ROOT_RESIDUAL_TOL {
            return make(mid.exp(), false);
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    make((0.5 * (lo + hi)).exp(), false)
}
