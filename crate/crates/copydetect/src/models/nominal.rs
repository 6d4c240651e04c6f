//! Nominal response model: per-option softmax in a latent ability.
//!
//! Item parameters are estimated by marginal maximum likelihood with an
//! EM algorithm over a fixed Gauss-Hermite quadrature of the
//! standard-normal ability prior. Abilities are scored afterwards by the
//! posterior mean (EAP). Identification is by per-item sum-to-zero
//! constraints on intercepts and slopes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quadrature::GaussHermite;
use super::ModelError;
use crate::dataio::ResponseMatrix;

/// Records processed per E-step work unit. Fixed so the floating-point
/// reduction tree, and therefore the fit, is identical for any thread count.
const ESTEP_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemFlag {
    /// All options observed; parameters freely estimated.
    Fitted,
    /// Some options never chosen; their parameters are pinned at zero and
    /// the remaining options are estimated against that anchor.
    PinnedOptions,
    /// At most one option observed; the item carries no information and
    /// falls back to the uniform model.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalItem {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub flag: ItemFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    items: Vec<NominalItem>,
    num_options: usize,
    quadrature: GaussHermite,
}

/// EAP ability score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbilityEstimate {
    pub theta: f64,
    pub posterior_sd: f64,
    /// True when no item carried information (all answers missing), in
    /// which case the estimate is just the prior.
    pub all_missing: bool,
}

impl NominalModel {
    pub fn from_parameters(
        items: Vec<NominalItem>,
        num_options: usize,
        quad_nodes: usize,
    ) -> Result<Self, ModelError> {
        if num_options < 2 {
            return Err(ModelError::BadParameters(
                "need at least two options".into(),
            ));
        }
        if items.is_empty() {
            return Err(ModelError::BadParameters("need at least one item".into()));
        }
        for (idx, item) in items.iter().enumerate() {
            if item.intercepts.len() != num_options || item.slopes.len() != num_options {
                return Err(ModelError::BadParameters(format!(
                    "item {idx}: expected {num_options} intercepts and slopes"
                )));
            }
            if item
                .intercepts
                .iter()
                .chain(&item.slopes)
                .any(|v| !v.is_finite())
            {
                return Err(ModelError::BadParameters(format!(
                    "item {idx}: non-finite parameter"
                )));
            }
        }
        if quad_nodes < 2 {
            return Err(ModelError::BadParameters(
                "need at least two quadrature nodes".into(),
            ));
        }
        Ok(Self {
            items,
            num_options,
            quadrature: GaussHermite::new(quad_nodes),
        })
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_options(&self) -> usize {
        self.num_options
    }

    pub fn items(&self) -> &[NominalItem] {
        &self.items
    }

    pub fn quadrature(&self) -> &GaussHermite {
        &self.quadrature
    }

    /// P(option | theta, item): softmax of intercept + slope * theta over
    /// the item's options, computed with max subtraction so any finite
    /// parameters are safe.
    pub fn prob(&self, theta: f64, item: usize, option: usize) -> f64 {
        let mut probs = vec![0.0; self.num_options];
        self.option_probs(theta, item, &mut probs);
        probs[option]
    }

    /// Fills `out` with the full option distribution for one item.
    pub fn option_probs(&self, theta: f64, item: usize, out: &mut [f64]) {
        let params = &self.items[item];
        debug_assert_eq!(out.len(), self.num_options);
        let mut max = f64::NEG_INFINITY;
        for (v, value) in out.iter_mut().enumerate() {
            let logit = params.intercepts[v] + params.slopes[v] * theta;
            *value = logit;
            if logit > max {
                max = logit;
            }
        }
        let mut total = 0.0;
        for value in out.iter_mut() {
            *value = (*value - max).exp();
            total += *value;
        }
        for value in out.iter_mut() {
            *value /= total;
        }
    }

    /// Log-likelihood of a response vector at a fixed ability; missing
    /// answers contribute nothing.
    pub fn log_likelihood_at(&self, responses: &[Option<u8>], theta: f64) -> f64 {
        let mut probs = vec![0.0; self.num_options];
        let mut total = 0.0;
        for (item, response) in responses.iter().enumerate() {
            if let Some(option) = response {
                self.option_probs(theta, item, &mut probs);
                total += probs[*option as usize].max(f64::MIN_POSITIVE).ln();
            }
        }
        total
    }

    /// Posterior-mean ability under the standard-normal prior, using the
    /// model's quadrature.
    pub fn eap(&self, responses: &[Option<u8>]) -> AbilityEstimate {
        let all_missing = responses.iter().all(Option::is_none);
        let nodes = self.quadrature.nodes();
        let weights = self.quadrature.weights();
        let mut log_posts: Vec<f64> = nodes
            .iter()
            .zip(weights)
            .map(|(&theta, &weight)| weight.ln() + self.log_likelihood_at(responses, theta))
            .collect();
        let max = log_posts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for value in log_posts.iter_mut() {
            *value = (*value - max).exp();
            total += *value;
        }
        let mut mean = 0.0;
        let mut second = 0.0;
        for (post, &theta) in log_posts.iter().zip(nodes) {
            let p = post / total;
            mean += p * theta;
            second += p * theta * theta;
        }
        let variance = (second - mean * mean).max(0.0);
        AbilityEstimate {
            theta: mean,
            posterior_sd: variance.sqrt(),
            all_missing,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NrmFitConfig {
    /// Gauss-Hermite nodes for the ability prior.
    pub quad_nodes: usize,
    /// EM cycle cap.
    pub max_cycles: usize,
    /// Convergence: max absolute parameter change below this ends the fit.
    pub tol: f64,
    /// Minimum records required to attempt a fit.
    pub min_examinees: usize,
}

impl Default for NrmFitConfig {
    fn default() -> Self {
        Self {
            quad_nodes: 21,
            max_cycles: 200,
            tol: 1e-4,
            min_examinees: 200,
        }
    }
}

/// Result of an EM fit: the model plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct NrmFit {
    pub model: NominalModel,
    pub converged: bool,
    pub cycles: usize,
    /// Marginal log-likelihood after each cycle; non-decreasing.
    pub loglik_history: Vec<f64>,
}

/// Fits the nominal response model by EM over the quadrature prior.
///
/// Starting values use the answer key to break the symmetry of the
/// all-zero point (which is an EM fixed point): the keyed option starts
/// with a positive slope. Items where an option was never chosen keep
/// that option pinned at zero and are flagged; items where everyone gave
/// the same answer fall back to the uniform model.
pub fn fit_nominal_mml(
    matrix: &ResponseMatrix,
    config: &NrmFitConfig,
) -> Result<NrmFit, ModelError> {
    let num_records = matrix.num_students();
    if num_records < config.min_examinees {
        return Err(ModelError::InsufficientExaminees {
            found: num_records,
            required: config.min_examinees,
        });
    }
    if config.quad_nodes < 2 {
        return Err(ModelError::BadConfig(
            "need at least two quadrature nodes".into(),
        ));
    }
    if config.max_cycles == 0 {
        return Err(ModelError::BadConfig("need at least one EM cycle".into()));
    }
    if config.tol.is_nan() || config.tol <= 0.0 {
        return Err(ModelError::BadConfig("tolerance must be positive".into()));
    }

    let design = matrix.design();
    let num_items = design.num_questions();
    let num_options = design.options_per_question();
    let quadrature = GaussHermite::new(config.quad_nodes);
    let num_nodes = quadrature.len();

    // Observed option counts drive the per-item flags.
    let mut counts = vec![vec![0usize; num_options]; num_items];
    for record in matrix.records() {
        for (item, response) in record.responses.iter().enumerate() {
            if let Some(option) = response {
                counts[item][*option as usize] += 1;
            }
        }
    }
    let mut items: Vec<NominalItem> = Vec::with_capacity(num_items);
    let mut free_options: Vec<Vec<usize>> = Vec::with_capacity(num_items);
    for (item, item_counts) in counts.iter().enumerate() {
        let observed: Vec<usize> = (0..num_options).filter(|&v| item_counts[v] > 0).collect();
        let (flag, free) = if observed.len() <= 1 {
            (ItemFlag::Degenerate, Vec::new())
        } else if observed.len() < num_options {
            (ItemFlag::PinnedOptions, observed)
        } else {
            // Fully observed: optimize relative to option 0 and re-center.
            (ItemFlag::Fitted, (1..num_options).collect())
        };
        let intercepts = vec![0.0; num_options];
        let mut slopes = vec![0.0; num_options];
        if flag != ItemFlag::Degenerate {
            // Key-informed start; the all-zero point is an EM fixed point.
            let key = design.key()[item] as usize;
            for (option, slope) in slopes.iter_mut().enumerate() {
                *slope = if option == key {
                    1.0
                } else {
                    -1.0 / (num_options as f64 - 1.0)
                };
            }
            if flag == ItemFlag::PinnedOptions {
                for (v, slope) in slopes.iter_mut().enumerate() {
                    if !free.contains(&v) {
                        *slope = 0.0;
                    }
                }
            }
        }
        items.push(NominalItem {
            intercepts,
            slopes,
            flag,
        });
        free_options.push(free);
    }

    // Responses flattened for the E-step scans.
    let responses: Vec<&[Option<u8>]> = matrix
        .records()
        .iter()
        .map(|r| r.responses.as_slice())
        .collect();

    let nodes = quadrature.nodes().to_vec();
    let log_weights: Vec<f64> = quadrature.weights().iter().map(|w| w.ln()).collect();

    let mut loglik_history = Vec::with_capacity(config.max_cycles);
    let mut converged = false;
    let mut cycles = 0;

    for _cycle in 0..config.max_cycles {
        cycles += 1;
        // Per-cycle log-probability table: [item][node][option].
        let log_probs = log_prob_table(&items, num_options, &nodes);

        let (expected_counts, loglik) = e_step(
            &responses,
            &log_probs,
            &log_weights,
            num_items,
            num_nodes,
            num_options,
        );
        loglik_history.push(loglik);

        // M-step: independent concave maximization per item.
        let updates: Vec<(Vec<f64>, Vec<f64>)> = (0..num_items)
            .into_par_iter()
            .map(|item| {
                let base = item * num_nodes * num_options;
                let item_counts = &expected_counts[base..base + num_nodes * num_options];
                m_step_item(
                    &items[item],
                    &free_options[item],
                    item_counts,
                    &nodes,
                    num_options,
                )
            })
            .collect();

        let mut max_change = 0.0f64;
        for (item, (intercepts, slopes)) in updates.into_iter().enumerate() {
            for v in 0..num_options {
                max_change = max_change
                    .max((intercepts[v] - items[item].intercepts[v]).abs())
                    .max((slopes[v] - items[item].slopes[v]).abs());
            }
            items[item].intercepts = intercepts;
            items[item].slopes = slopes;
        }
        if max_change < config.tol {
            converged = true;
            break;
        }
    }

    let model = NominalModel {
        items,
        num_options,
        quadrature,
    };
    Ok(NrmFit {
        model,
        converged,
        cycles,
        loglik_history,
    })
}

fn log_prob_table(items: &[NominalItem], num_options: usize, nodes: &[f64]) -> Vec<f64> {
    let num_nodes = nodes.len();
    let mut table = vec![0.0; items.len() * num_nodes * num_options];
    for (item_idx, item) in items.iter().enumerate() {
        for (node_idx, &theta) in nodes.iter().enumerate() {
            let offset = (item_idx * num_nodes + node_idx) * num_options;
            let slot = &mut table[offset..offset + num_options];
            let mut max = f64::NEG_INFINITY;
            for (v, value) in slot.iter_mut().enumerate() {
                let logit = item.intercepts[v] + item.slopes[v] * theta;
                *value = logit;
                max = max.max(logit);
            }
            let mut total = 0.0;
            for value in slot.iter() {
                total += (value - max).exp();
            }
            let log_norm = max + total.ln();
            for value in slot.iter_mut() {
                *value -= log_norm;
            }
        }
    }
    table
}

/// Expected per-(item, node, option) counts plus the marginal
/// log-likelihood. Chunked so the reduction order is fixed.
fn e_step(
    responses: &[&[Option<u8>]],
    log_probs: &[f64],
    log_weights: &[f64],
    num_items: usize,
    num_nodes: usize,
    num_options: usize,
) -> (Vec<f64>, f64) {
    struct Partial {
        counts: Vec<f64>,
        loglik: f64,
    }

    let partials: Vec<Partial> = responses
        .par_chunks(ESTEP_CHUNK)
        .map(|chunk| {
            let mut counts = vec![0.0; num_items * num_nodes * num_options];
            let mut loglik = 0.0;
            let mut log_post = vec![0.0; num_nodes];
            for record in chunk {
                // Posterior over nodes for one record.
                for (node, value) in log_post.iter_mut().enumerate() {
                    let mut acc = log_weights[node];
                    for (item, response) in record.iter().enumerate() {
                        if let Some(option) = response {
                            acc += log_probs
                                [(item * num_nodes + node) * num_options + *option as usize];
                        }
                    }
                    *value = acc;
                }
                let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for value in log_post.iter_mut() {
                    *value = (*value - max).exp();
                    total += *value;
                }
                loglik += max + total.ln();
                for (item, response) in record.iter().enumerate() {
                    if let Some(option) = response {
                        let base = (item * num_nodes) * num_options + *option as usize;
                        for node in 0..num_nodes {
                            counts[base + node * num_options] += log_post[node] / total;
                        }
                    }
                }
            }
            Partial { counts, loglik }
        })
        .collect();

    let mut counts = vec![0.0; num_items * num_nodes * num_options];
    let mut loglik = 0.0;
    for partial in partials {
        for (total, value) in counts.iter_mut().zip(partial.counts) {
            *total += value;
        }
        loglik += partial.loglik;
    }
    (counts, loglik)
}

/// Maximizes the expected complete-data log-likelihood for one item by
/// Newton iteration with step halving. `item_counts` is laid out
/// [node][option]. Returns the new (intercepts, slopes).
fn m_step_item(
    current: &NominalItem,
    free: &[usize],
    item_counts: &[f64],
    nodes: &[f64],
    num_options: usize,
) -> (Vec<f64>, Vec<f64>) {
    if current.flag == ItemFlag::Degenerate || free.is_empty() {
        return (current.intercepts.clone(), current.slopes.clone());
    }
    let num_nodes = nodes.len();
    // Node totals: posterior mass of everyone who answered this item.
    let node_totals: Vec<f64> = (0..num_nodes)
        .map(|q| {
            item_counts[q * num_options..(q + 1) * num_options]
                .iter()
                .sum()
        })
        .collect();

    let mut intercepts = current.intercepts.clone();
    let mut slopes = current.slopes.clone();
    // For fully observed items the optimization runs relative to option 0;
    // shift invariance lets us re-center afterwards.
    if current.flag == ItemFlag::Fitted {
        let i0 = intercepts[0];
        let s0 = slopes[0];
        for v in 0..num_options {
            intercepts[v] -= i0;
            slopes[v] -= s0;
        }
    }

    let dim = 2 * free.len();
    let mut probs = vec![0.0; num_nodes * num_options];
    let mut gradient = vec![0.0; dim];
    let mut hessian = vec![0.0; dim * dim];
    let mut objective = item_objective(
        &intercepts,
        &slopes,
        item_counts,
        nodes,
        num_options,
        &mut probs,
    );

    const MAX_NEWTON: usize = 50;
    for _ in 0..MAX_NEWTON {
        // Gradient and (negated) Hessian at the current point; `probs` is
        // fresh from the last objective evaluation.
        gradient.iter_mut().for_each(|g| *g = 0.0);
        hessian.iter_mut().for_each(|h| *h = 0.0);
        for q in 0..num_nodes {
            let theta = nodes[q];
            let total = node_totals[q];
            if total <= 0.0 {
                continue;
            }
            let prob_row = &probs[q * num_options..(q + 1) * num_options];
            let count_row = &item_counts[q * num_options..(q + 1) * num_options];
            for (a, &v) in free.iter().enumerate() {
                let residual = count_row[v] - total * prob_row[v];
                gradient[2 * a] += residual;
                gradient[2 * a + 1] += residual * theta;
                for (b, &w) in free.iter().enumerate() {
                    let delta = if v == w { 1.0 } else { 0.0 };
                    let curvature = total * prob_row[v] * (delta - prob_row[w]);
                    hessian[(2 * a) * dim + 2 * b] += curvature;
                    hessian[(2 * a) * dim + 2 * b + 1] += curvature * theta;
                    hessian[(2 * a + 1) * dim + 2 * b] += curvature * theta;
                    hessian[(2 * a + 1) * dim + 2 * b + 1] += curvature * theta * theta;
                }
            }
        }
        let grad_norm = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < 1e-10 {
            break;
        }
        // Tiny ridge keeps the solve stable when an option's mass is thin.
        for d in 0..dim {
            hessian[d * dim + d] += 1e-12;
        }
        let Some(step) = solve_dense(&mut hessian, &gradient) else {
            break;
        };
        // Step halving against the concave objective.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial_intercepts = intercepts.clone();
            let mut trial_slopes = slopes.clone();
            for (a, &v) in free.iter().enumerate() {
                trial_intercepts[v] += scale * step[2 * a];
                trial_slopes[v] += scale * step[2 * a + 1];
            }
            let trial_objective = item_objective(
                &trial_intercepts,
                &trial_slopes,
                item_counts,
                nodes,
                num_options,
                &mut probs,
            );
            if trial_objective >= objective - 1e-12 * objective.abs().max(1.0) {
                intercepts = trial_intercepts;
                slopes = trial_slopes;
                let improved = trial_objective > objective;
                objective = trial_objective;
                accepted = true;
                if !improved && scale < 1.0 {
                    // No longer making progress.
                    accepted = false;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // Restore `probs` for the accepted point before leaving.
            item_objective(
                &intercepts,
                &slopes,
                item_counts,
                nodes,
                num_options,
                &mut probs,
            );
            break;
        }
    }

    if current.flag == ItemFlag::Fitted {
        let mean_intercept = intercepts.iter().sum::<f64>() / num_options as f64;
        let mean_slope = slopes.iter().sum::<f64>() / num_options as f64;
        for v in 0..num_options {
            intercepts[v] -= mean_intercept;
            slopes[v] -= mean_slope;
        }
    }
    (intercepts, slopes)
}

/// Expected complete-data log-likelihood for one item; also leaves the
/// per-node option probabilities in `probs`.
fn item_objective(
    intercepts: &[f64],
    slopes: &[f64],
    item_counts: &[f64],
    nodes: &[f64],
    num_options: usize,
    probs: &mut [f64],
) -> f64 {
    let mut objective = 0.0;
    for (q, &theta) in nodes.iter().enumerate() {
        let row = &mut probs[q * num_options..(q + 1) * num_options];
        let mut max = f64::NEG_INFINITY;
        for v in 0..num_options {
            let logit = intercepts[v] + slopes[v] * theta;
            row[v] = logit;
            max = max.max(logit);
        }
        let mut total = 0.0;
        for value in row.iter() {
            total += (value - max).exp();
        }
        let log_norm = max + total.ln();
        let counts = &item_counts[q * num_options..(q + 1) * num_options];
        for v in 0..num_options {
            if counts[v] > 0.0 {
                objective += counts[v] * (row[v] - log_norm);
            }
            row[v] = (row[v] - log_norm).exp();
        }
    }
    objective
}

/// Gaussian elimination with partial pivoting; consumes the matrix.
/// Returns None when a pivot collapses.
fn solve_dense(matrix: &mut [f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    debug_assert_eq!(matrix.len(), n * n);
    let mut x = rhs.to_vec();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = matrix[col * n + col].abs();
        for row in (col + 1)..n {
            let candidate = matrix[row * n + col].abs();
            if candidate > pivot_val {
                pivot_row = row;
                pivot_val = candidate;
            }
        }
        if pivot_val < 1e-300 {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                matrix.swap(col * n + k, pivot_row * n + k);
            }
            x.swap(col, pivot_row);
        }
        let pivot = matrix[col * n + col];
        for row in (col + 1)..n {
            let factor = matrix[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                matrix[row * n + k] -= factor * matrix[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut value = x[col];
        for k in (col + 1)..n {
            value -= matrix[col * n + k] * x[k];
        }
        x[col] = value / matrix[col * n + col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_key_str, ExamDesign, ResponseMatrix, StudentRecord};

    fn uniform_model(num_items: usize, num_options: usize) -> NominalModel {
        let items = (0..num_items)
            .map(|_| NominalItem {
                intercepts: vec![0.0; num_options],
                slopes: vec![0.0; num_options],
                flag: ItemFlag::Fitted,
            })
            .collect();
        NominalModel::from_parameters(items, num_options, 21).unwrap()
    }

    #[test]
    fn uniform_parameters_give_uniform_probs() {
        let model = uniform_model(3, 4);
        for option in 0..4 {
            assert!((model.prob(1.3, 1, option) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_option_softmax() {
        let items = vec![NominalItem {
            intercepts: vec![0.0, 0.0],
            slopes: vec![0.0, 1.0],
            flag: ItemFlag::Fitted,
        }];
        let model = NominalModel::from_parameters(items, 2, 21).unwrap();
        assert!((model.prob(0.0, 0, 0) - 0.5).abs() < 1e-15);
        let theta = 3f64.ln();
        assert!((model.prob(theta, 0, 0) - 0.25).abs() < 1e-12);
        assert!((model.prob(theta, 0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn probs_sum_to_one_even_for_extreme_parameters() {
        let items = vec![NominalItem {
            intercepts: vec![200.0, -150.0, 0.0],
            slopes: vec![30.0, -20.0, 5.0],
            flag: ItemFlag::Fitted,
        }];
        let model = NominalModel::from_parameters(items, 3, 5).unwrap();
        for theta in [-6.0, 0.0, 6.0] {
            let total: f64 = (0..3).map(|v| model.prob(theta, 0, v)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let items = vec![NominalItem {
            intercepts: vec![0.3, -0.1, 0.6, -0.8],
            slopes: vec![1.0, -0.4, -0.3, -0.3],
            flag: ItemFlag::Fitted,
        }];
        let shifted = vec![NominalItem {
            intercepts: vec![0.3 + 2.5, -0.1 + 2.5, 0.6 + 2.5, -0.8 + 2.5],
            slopes: vec![1.0 - 1.0, -0.4 - 1.0, -0.3 - 1.0, -0.3 - 1.0],
            flag: ItemFlag::Fitted,
        }];
        let a = NominalModel::from_parameters(items, 4, 11).unwrap();
        let b = NominalModel::from_parameters(shifted, 4, 11).unwrap();
        for option in 0..4 {
            assert!((a.prob(0.7, 0, option) - b.prob(0.7, 0, option)).abs() < 1e-12);
        }
    }

    #[test]
    fn eap_all_missing_returns_prior() {
        let model = uniform_model(5, 4);
        let estimate = model.eap(&[None, None, None, None, None]);
        assert!(estimate.all_missing);
        assert!(estimate.theta.abs() < 1e-12);
        assert!((estimate.posterior_sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eap_orders_correct_above_wrong() {
        // Positive slope on option 0 of every item.
        let items: Vec<NominalItem> = (0..10)
            .map(|_| NominalItem {
                intercepts: vec![0.0; 4],
                slopes: vec![1.2, -0.4, -0.4, -0.4],
                flag: ItemFlag::Fitted,
            })
            .collect();
        let model = NominalModel::from_parameters(items, 4, 21).unwrap();
        let all_correct: Vec<Option<u8>> = vec![Some(0); 10];
        let all_wrong: Vec<Option<u8>> = vec![Some(1); 10];
        let high = model.eap(&all_correct);
        let low = model.eap(&all_wrong);
        assert!(high.theta > low.theta);
        assert!(high.theta.abs() <= model.quadrature().nodes().last().unwrap().abs());
    }

    fn tiny_matrix(rows: &[(&str, &str, &str)], key: &str, n_options: usize) -> ResponseMatrix {
        let design: ExamDesign = parse_key_str(key, n_options).unwrap();
        let records = rows
            .iter()
            .map(|(id, room, answers)| {
                let responses = answers
                    .chars()
                    .map(|ch| {
                        if ch == '*' {
                            None
                        } else {
                            Some(ch as u8 - b'A')
                        }
                    })
                    .collect();
                StudentRecord {
                    student_id: id.to_string(),
                    room_id: room.to_string(),
                    responses,
                }
            })
            .collect();
        ResponseMatrix::new(design, records).unwrap()
    }

    #[test]
    fn fit_rejects_insufficient_examinees() {
        let matrix = tiny_matrix(&[("a", "r", "AB"), ("b", "r", "BA")], "AB", 2);
        let err = fit_nominal_mml(&matrix, &NrmFitConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            ModelError::InsufficientExaminees {
                found: 2,
                required: 200
            }
        ));
    }

    #[test]
    fn fit_flags_degenerate_and_pinned_items() {
        // Item 0: everyone answers A (degenerate). Item 1: option D never
        // chosen (pinned). Item 2: all options seen.
        let rows: Vec<(String, String, String)> = (0..40)
            .map(|i| {
                let second = ['A', 'B', 'C'][i % 3];
                let third = ['A', 'B', 'C', 'D'][i % 4];
                (
                    format!("s{i}"),
                    "r".to_string(),
                    format!("A{second}{third}"),
                )
            })
            .collect();
        let rows_ref: Vec<(&str, &str, &str)> = rows
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        let matrix = tiny_matrix(&rows_ref, "ABC", 4);
        let config = NrmFitConfig {
            min_examinees: 10,
            max_cycles: 30,
            ..Default::default()
        };
        let fit = fit_nominal_mml(&matrix, &config).unwrap();
        assert_eq!(fit.model.items()[0].flag, ItemFlag::Degenerate);
        assert_eq!(fit.model.items()[1].flag, ItemFlag::PinnedOptions);
        assert_eq!(fit.model.items()[2].flag, ItemFlag::Fitted);
        // Degenerate item falls back to uniform.
        assert!((fit.model.prob(0.0, 0, 0) - 0.25).abs() < 1e-12);
        // Pinned option keeps zero parameters.
        assert_eq!(fit.model.items()[1].intercepts[3], 0.0);
        assert_eq!(fit.model.items()[1].slopes[3], 0.0);
        // Probabilities still sum to one everywhere.
        for item in 0..3 {
            let total: f64 = (0..4).map(|v| fit.model.prob(0.4, item, v)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let rows: Vec<(String, String, String)> = (0..60)
            .map(|i| {
                let a = ['A', 'B', 'C', 'D'][i % 4];
                let b = ['A', 'B', 'C', 'D'][(i / 4) % 4];
                let c = ['A', 'B', 'C', 'D'][(i / 2) % 4];
                (format!("s{i}"), "r".to_string(), format!("{a}{b}{c}"))
            })
            .collect();
        let rows_ref: Vec<(&str, &str, &str)> = rows
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        let matrix = tiny_matrix(&rows_ref, "ABC", 4);
        let config = NrmFitConfig {
            min_examinees: 10,
            max_cycles: 25,
            ..Default::default()
        };
        let first = fit_nominal_mml(&matrix, &config).unwrap();
        let second = fit_nominal_mml(&matrix, &config).unwrap();
        assert_eq!(first.model, second.model);
        assert_eq!(first.loglik_history, second.loglik_history);
    }

    #[test]
    fn fit_loglik_non_decreasing() {
        let rows: Vec<(String, String, String)> = (0..80)
            .map(|i| {
                let a = ['A', 'B'][i % 2];
                let b = ['A', 'B', 'C', 'D'][i % 4];
                let c = ['D', 'C', 'B', 'A'][(i / 3) % 4];
                let d = ['A', 'C'][(i / 5) % 2];
                (format!("s{i}"), "r".to_string(), format!("{a}{b}{c}{d}"))
            })
            .collect();
        let rows_ref: Vec<(&str, &str, &str)> = rows
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        let matrix = tiny_matrix(&rows_ref, "ABCD", 4);
        let config = NrmFitConfig {
            min_examinees: 10,
            ..Default::default()
        };
        let fit = fit_nominal_mml(&matrix, &config).unwrap();
        for pair in fit.loglik_history.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-8,
                "loglik decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        // Identification: per-item sum-to-zero on both parameter sets.
        for item in fit.model.items() {
            if item.flag == ItemFlag::Fitted {
                assert!(item.intercepts.iter().sum::<f64>().abs() < 1e-8);
                assert!(item.slopes.iter().sum::<f64>().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn eap_recovers_unit_ability_on_average() {
        use rand::Rng;
        // 30 discriminating items; 500 simulated examinees all at theta = 1.
        // EAP shrinks toward the prior mean, so the tolerance is loose.
        let items: Vec<NominalItem> = (0..30)
            .map(|_| NominalItem {
                intercepts: vec![0.0; 4],
                slopes: vec![1.5, -0.5, -0.5, -0.5],
                flag: ItemFlag::Fitted,
            })
            .collect();
        let model = NominalModel::from_parameters(items, 4, 21).unwrap();
        let mut rng = crate::simulate::rng_for(0xEA9, 0);
        let mut probs = vec![0.0; 4];
        let mut total = 0.0;
        let replicates = 500;
        for _ in 0..replicates {
            let responses: Vec<Option<u8>> = (0..30)
                .map(|item| {
                    model.option_probs(1.0, item, &mut probs);
                    let draw: f64 = rng.gen();
                    let mut cumulative = 0.0;
                    for (option, &p) in probs.iter().enumerate() {
                        cumulative += p;
                        if draw < cumulative {
                            return Some(option as u8);
                        }
                    }
                    Some(3)
                })
                .collect();
            total += model.eap(&responses).theta;
        }
        let mean = total / replicates as f64;
        assert!((mean - 1.0).abs() <= 0.15, "mean EAP {mean}");
    }

    #[test]
    fn solve_dense_matches_known_system() {
        let mut matrix = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0];
        let rhs = vec![1.0, 2.0, 3.0];
        let x = solve_dense(&mut matrix, &rhs).unwrap();
        let a = [[4.0, 1.0, 2.0], [1.0, 3.0, 0.5], [2.0, 0.5, 5.0]];
        for row in 0..3 {
            let recovered: f64 = (0..3).map(|col| a[row][col] * x[col]).sum();
            assert!((recovered - rhs[row]).abs() < 1e-10);
        }
    }
}
