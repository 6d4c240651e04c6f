//! Gauss-Hermite quadrature against the standard-normal weight.
//!
//! Nodes are found by Newton iteration on the orthonormal Hermite
//! recurrence, starting from the usual asymptotic guesses, then rescaled
//! from the physicists' weight exp(-x^2) to the normal density. Weights
//! sum to one.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule. Exact for polynomial integrands up to
    /// degree `2n - 1` under the standard-normal measure.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let (mut nodes, mut weights) = physicists_rule(n);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for node in &mut nodes {
            *node *= std::f64::consts::SQRT_2;
        }
        for weight in &mut weights {
            *weight /= sqrt_pi;
        }
        // Ascending node order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| nodes[a].total_cmp(&nodes[b]));
        let nodes_sorted: Vec<f64> = order.iter().map(|&i| nodes[i]).collect();
        let weights_sorted: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        Self {
            nodes: nodes_sorted,
            weights: weights_sorted,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Orthonormal-Hermite Newton solver for the physicists' rule
/// (weight exp(-x^2); weights sum to sqrt(pi)).
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    const MAX_NEWTON: usize = 100;
    const TOL: f64 = 1e-15;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut x = 0.0f64;
    for i in 0..half {
        x = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => x - 1.14 * nf.powf(0.426) / x,
            2 => 1.86 * x - 0.86 * nodes[0],
            3 => 1.91 * x - 0.91 * nodes[1],
            _ => 2.0 * x - nodes[i - 2],
        };
        let mut derivative = 0.0;
        for _ in 0..MAX_NEWTON {
            // Evaluate the orthonormal Hermite polynomial of degree n at x.
            let mut p_curr = std::f64::consts::PI.powf(-0.25);
            let mut p_prev = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p_next = x * (2.0 / jf).sqrt() * p_curr - ((jf - 1.0) / jf).sqrt() * p_prev;
                p_prev = p_curr;
                p_curr = p_next;
            }
            derivative = (2.0 * nf).sqrt() * p_prev;
            let step = p_curr / derivative;
            x -= step;
            if step.abs() <= TOL {
                break;
            }
        }
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = 2.0 / (derivative * derivative);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}
