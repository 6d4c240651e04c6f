//! Exact Poisson-binomial distribution engine.
//!
//! The match count between two answer vectors is, under the no-copying
//! null, a sum of independent Bernoulli variables with heterogeneous
//! success probabilities — a Poisson-binomial. This module computes its
//! pmf exactly by a stable dynamic-programming convolution (O(N^2) time,
//! O(N) space), plus the pieces the optimal-test argument needs: inclusive
//! upper tails, critical values, the "spiked" pmf where copied questions
//! are forced to match, and the likelihood ratio between the two.

use thiserror::Error;

/// Lower clamp applied to every match probability on construction.
pub const PI_FLOOR: f64 = 1e-9;
/// Upper clamp applied to every match probability on construction.
pub const PI_CEIL: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum PbdError {
    #[error("match profile must contain at least one probability")]
    EmptyProfile,
    #[error("match probability at position {index} is not finite")]
    NonFiniteProbability { index: usize },
    #[error("x = {x} out of range for a profile of length {n} (valid 0..={max})")]
    OutOfRange { x: usize, n: usize, max: usize },
    #[error("alpha = {0} must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),
    #[error("copied-question index {index} out of range for {n} questions")]
    CopyIndexOutOfRange { index: usize, n: usize },
    #[error("null pmf vanishes at x = {x}; likelihood ratio undefined")]
    NullPmfVanishes { x: usize },
}

/// Per-question probabilities that a pair of students answers identically
/// under the null of no copying.
///
/// Probabilities are clamped to `[PI_FLOOR, PI_CEIL]` on construction so
/// spiked/null ratios and standardized variances stay defined.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProfile {
    pis: Vec<f64>,
}

impl MatchProfile {
    pub fn new(pis: Vec<f64>) -> Result<Self, PbdError> {
        if pis.is_empty() {
            return Err(PbdError::EmptyProfile);
        }
        if let Some(index) = pis.iter().position(|p| !p.is_finite()) {
            return Err(PbdError::NonFiniteProbability { index });
        }
        let pis = pis
            .into_iter()
            .map(|p| p.clamp(PI_FLOOR, PI_CEIL))
            .collect();
        Ok(Self { pis })
    }

    /// Number of questions contributing to the profile.
    pub fn len(&self) -> usize {
        self.pis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pis.is_empty()
    }

    pub fn pis(&self) -> &[f64] {
        &self.pis
    }

    /// Expected match count under the null.
    pub fn mean(&self) -> f64 {
        self.pis.iter().sum()
    }

    /// Variance of the match count under the null.
    pub fn variance(&self) -> f64 {
        self.pis.iter().map(|p| p * (1.0 - p)).sum()
    }

    /// Full pmf table `[P(M = 0), ..., P(M = N)]`.
    ///
    /// Standard convolution: fold questions in one at a time, updating the
    /// partial distribution from the top down so each entry is touched once.
    pub fn pmf_table(&self) -> Vec<f64> {
        pmf_table_of(&self.pis)
    }

    /// P(M = x).
    pub fn pmf(&self, x: usize) -> Result<f64, PbdError> {
        let n = self.len();
        if x > n {
            return Err(PbdError::OutOfRange { x, n, max: n });
        }
        Ok(self.pmf_table()[x])
    }

    /// Inclusive upper tail P(M >= x). Defined for x in 0..=N+1 with
    /// `upper_tail(0) = 1` and `upper_tail(N + 1) = 0`.
    pub fn upper_tail(&self, x: usize) -> Result<f64, PbdError> {
        let n = self.len();
        if x > n + 1 {
            return Err(PbdError::OutOfRange { x, n, max: n + 1 });
        }
        Ok(tail_from(&self.pmf_table(), x))
    }

    /// Smallest k* such that P(M > k*) <= alpha; rejecting when the match
    /// count exceeds k* gives a test of size at most alpha.
    pub fn critical_value(&self, alpha: f64) -> Result<usize, PbdError> {
        if !(alpha > 0.0 && alpha < 1.0) || alpha.is_nan() {
            return Err(PbdError::InvalidAlpha(alpha));
        }
        let table = self.pmf_table();
        let n = self.len();
        // P(M > k) = tail at k + 1; scan from the top so the running sum
        // accumulates small terms first.
        let mut tail = 0.0;
        let mut k_star = n;
        for k in (0..n).rev() {
            tail += table[k + 1];
            if tail <= alpha {
                k_star = k;
            } else {
                break;
            }
        }
        Ok(k_star)
    }

    /// Pmf of the match count when every question in `copied` is forced to
    /// match: those probabilities are replaced by 1, which shifts the
    /// distribution of the remaining questions up by |A|.
    pub fn spiked_pmf(&self, copied: &CopySet, x: usize) -> Result<f64, PbdError> {
        let n = self.len();
        if x > n {
            return Err(PbdError::OutOfRange { x, n, max: n });
        }
        if let Some(&index) = copied.indices.iter().find(|&&i| i >= n) {
            return Err(PbdError::CopyIndexOutOfRange { index, n });
        }
        let k = copied.len();
        if x < k {
            return Ok(0.0);
        }
        let rest: Vec<f64> = (0..n)
            .filter(|i| !copied.contains(*i))
            .map(|i| self.pis[i])
            .collect();
        if rest.is_empty() {
            return Ok(if x == k { 1.0 } else { 0.0 });
        }
        Ok(pmf_table_of(&rest)[x - k])
    }

    /// Likelihood ratio spiked/null at x. Non-decreasing in x over its
    /// support, which is what makes the count itself the optimal statistic.
    pub fn likelihood_ratio(&self, copied: &CopySet, x: usize) -> Result<f64, PbdError> {
        let numerator = self.spiked_pmf(copied, x)?;
        let denominator = self.pmf(x)?;
        if denominator <= 0.0 {
            return Err(PbdError::NullPmfVanishes { x });
        }
        Ok(numerator / denominator)
    }
}

/// Set of question positions (0-based) assumed copied.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CopySet {
    indices: std::collections::BTreeSet<usize>,
}

impl CopySet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a copy set, rejecting positions outside `0..n`.
    pub fn new<I: IntoIterator<Item = usize>>(indices: I, n: usize) -> Result<Self, PbdError> {
        let indices: std::collections::BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&index) = indices.iter().find(|&&i| i >= n) {
            return Err(PbdError::CopyIndexOutOfRange { index, n });
        }
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

fn pmf_table_of(pis: &[f64]) -> Vec<f64> {
    let mut table = vec![0.0; pis.len() + 1];
    table[0] = 1.0;
    for (count, &p) in pis.iter().enumerate() {
        let q = 1.0 - p;
        table[count + 1] = table[count] * p;
        for x in (1..=count).rev() {
            table[x] = table[x] * q + table[x - 1] * p;
        }
        table[0] *= q;
    }
    table
}

fn tail_from(table: &[f64], x: usize) -> f64 {
    if x == 0 {
        return 1.0; // exhaustive event, exactly
    }
    // Sum from the top so the smallest terms accumulate first.
    let tail: f64 = table[x.min(table.len())..].iter().rev().sum();
    tail.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force pmf by enumerating all 2^N match patterns.
    pub(crate) fn enumerate_pmf(pis: &[f64], x: usize) -> f64 {
        let n = pis.len();
        assert!(n <= 20, "enumeration oracle is exponential");
        let mut total = 0.0;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != x {
                continue;
            }
            let mut prob = 1.0;
            for (i, &p) in pis.iter().enumerate() {
                prob *= if mask & (1 << i) != 0 { p } else { 1.0 - p };
            }
            total += prob;
        }
        total
    }

    fn binomial_pmf(n: usize, p: f64, x: usize) -> f64 {
        let mut choose = 1.0;
        for i in 0..x {
            choose = choose * (n - i) as f64 / (i + 1) as f64;
        }
        choose * p.powi(x as i32) * (1.0 - p).powi((n - x) as i32)
    }

    #[test]
    fn pmf_symmetric_binomial() {
        let profile = MatchProfile::new(vec![0.5, 0.5]).unwrap();
        assert!((profile.pmf(1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pmf_single_question() {
        let profile = MatchProfile::new(vec![0.37]).unwrap();
        assert!((profile.pmf(1).unwrap() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn pmf_matches_enumeration_fixture() {
        let profile = MatchProfile::new(vec![0.2, 0.3, 0.7]).unwrap();
        // 0.018 + 0.098 + 0.168, by enumerating the three two-match patterns
        assert!((profile.pmf(2).unwrap() - 0.284).abs() < 1e-12);
        assert!((enumerate_pmf(profile.pis(), 2) - 0.284).abs() < 1e-12);
    }

    #[test]
    fn pmf_rejects_out_of_range() {
        let profile = MatchProfile::new(vec![0.2, 0.3]).unwrap();
        assert!(matches!(profile.pmf(3), Err(PbdError::OutOfRange { .. })));
    }

    #[test]
    fn empty_profile_rejected() {
        assert!(matches!(
            MatchProfile::new(vec![]),
            Err(PbdError::EmptyProfile)
        ));
    }

    #[test]
    fn clamping_applies_on_construction() {
        let profile = MatchProfile::new(vec![0.0, 1.0, 0.5]).unwrap();
        assert_eq!(profile.pis()[0], PI_FLOOR);
        assert_eq!(profile.pis()[1], PI_CEIL);
        assert_eq!(profile.pis()[2], 0.5);
    }

    #[test]
    fn upper_tail_boundaries() {
        let profile = MatchProfile::new(vec![0.2, 0.3, 0.7]).unwrap();
        assert_eq!(profile.upper_tail(0).unwrap(), 1.0);
        assert_eq!(profile.upper_tail(4).unwrap(), 0.0);
        assert!((profile.upper_tail(2).unwrap() - 0.326).abs() < 1e-12);
        assert!(matches!(
            profile.upper_tail(5),
            Err(PbdError::OutOfRange { .. })
        ));
    }

    #[test]
    fn upper_tail_binomial_top() {
        let profile = MatchProfile::new(vec![0.5; 10]).unwrap();
        assert!((profile.upper_tail(10).unwrap() - 1.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn upper_tail_non_increasing() {
        let profile = MatchProfile::new(vec![0.1, 0.4, 0.8, 0.33, 0.6]).unwrap();
        let tails: Vec<f64> = (0..=6).map(|x| profile.upper_tail(x).unwrap()).collect();
        for pair in tails.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
    }

    #[test]
    fn critical_value_binomial_table() {
        let profile = MatchProfile::new(vec![0.5; 10]).unwrap();
        assert_eq!(profile.critical_value(0.001).unwrap(), 9);
    }

    #[test]
    fn critical_value_single_question() {
        let profile = MatchProfile::new(vec![0.3]).unwrap();
        assert_eq!(profile.critical_value(0.3).unwrap(), 0);
        assert_eq!(profile.critical_value(0.5).unwrap(), 0);
        assert_eq!(profile.critical_value(0.2).unwrap(), 1);
    }

    #[test]
    fn critical_value_half() {
        let profile = MatchProfile::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(profile.critical_value(0.5).unwrap(), 1);
    }

    #[test]
    fn critical_value_rejects_bad_alpha() {
        let profile = MatchProfile::new(vec![0.5]).unwrap();
        assert!(matches!(
            profile.critical_value(0.0),
            Err(PbdError::InvalidAlpha(_))
        ));
        assert!(matches!(
            profile.critical_value(1.0),
            Err(PbdError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn spiked_pmf_empty_set_is_pmf() {
        let profile = MatchProfile::new(vec![0.2, 0.6, 0.9]).unwrap();
        let empty = CopySet::empty();
        for x in 0..=3 {
            assert_eq!(
                profile.spiked_pmf(&empty, x).unwrap(),
                profile.pmf(x).unwrap()
            );
        }
    }

    #[test]
    fn spiked_pmf_below_copy_count_is_zero() {
        let profile = MatchProfile::new(vec![0.2, 0.6, 0.9]).unwrap();
        let copied = CopySet::new([0, 2], 3).unwrap();
        assert_eq!(profile.spiked_pmf(&copied, 0).unwrap(), 0.0);
        assert_eq!(profile.spiked_pmf(&copied, 1).unwrap(), 0.0);
    }

    #[test]
    fn spiked_pmf_reduces_to_remaining_questions() {
        let profile = MatchProfile::new(vec![0.5, 0.5]).unwrap();
        let copied = CopySet::new([0], 2).unwrap();
        assert!((profile.spiked_pmf(&copied, 2).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn likelihood_ratio_two_questions() {
        let profile = MatchProfile::new(vec![0.5, 0.5]).unwrap();
        let copied = CopySet::new([0], 2).unwrap();
        assert!((profile.likelihood_ratio(&copied, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((profile.likelihood_ratio(&copied, 2).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(profile.likelihood_ratio(&copied, 0).unwrap(), 0.0);
    }

    #[test]
    fn likelihood_ratio_empty_set_is_one() {
        let profile = MatchProfile::new(vec![0.1, 0.8, 0.44]).unwrap();
        let empty = CopySet::empty();
        for x in 0..=3 {
            assert!((profile.likelihood_ratio(&empty, x).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_set_rejects_out_of_range() {
        assert!(matches!(
            CopySet::new([3], 3),
            Err(PbdError::CopyIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn normalization_holds_at_n_200() {
        let pis: Vec<f64> = (0..200)
            .map(|i| 0.02 + 0.96 * ((i * 37 % 200) as f64 / 199.0))
            .collect();
        let profile = MatchProfile::new(pis).unwrap();
        let total: f64 = profile.pmf_table().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_reduction() {
        let n = 12;
        let p = 0.37;
        let profile = MatchProfile::new(vec![p; n]).unwrap();
        let table = profile.pmf_table();
        for (x, &value) in table.iter().enumerate() {
            assert!((value - binomial_pmf(n, p, x)).abs() < 1e-13);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn profile_strategy(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.02f64..0.98, 1..=max_n)
        }

        proptest! {
            #[test]
            fn matches_enumeration(pis in profile_strategy(10)) {
                let profile = MatchProfile::new(pis).unwrap();
                for x in 0..=profile.len() {
                    let exact = profile.pmf(x).unwrap();
                    let brute = enumerate_pmf(profile.pis(), x);
                    prop_assert!((exact - brute).abs() < 1e-12);
                }
            }

            #[test]
            fn normalizes(pis in profile_strategy(60)) {
                let profile = MatchProfile::new(pis).unwrap();
                let total: f64 = profile.pmf_table().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn tail_matches_rejection_region(pis in profile_strategy(25), alpha in 1e-6f64..0.5) {
                let profile = MatchProfile::new(pis).unwrap();
                let k_star = profile.critical_value(alpha).unwrap();
                for m in 0..=profile.len() {
                    let reject_by_p = profile.upper_tail(m).unwrap() <= alpha;
                    prop_assert_eq!(reject_by_p, m > k_star);
                }
            }

            #[test]
            fn spiked_pmf_is_shifted_remainder(pis in profile_strategy(12), raw_set in prop::collection::btree_set(0usize..12, 0..6)) {
                let profile = MatchProfile::new(pis).unwrap();
                let n = profile.len();
                let indices: Vec<usize> = raw_set.into_iter().filter(|&i| i < n).collect();
                let copied = CopySet::new(indices.iter().copied(), n).unwrap();
                let rest: Vec<f64> = (0..n)
                    .filter(|i| !copied.contains(*i))
                    .map(|i| profile.pis()[i])
                    .collect();
                let mut total = 0.0;
                for x in 0..=n {
                    let spiked = profile.spiked_pmf(&copied, x).unwrap();
                    total += spiked;
                    let expected = if x < copied.len() {
                        0.0
                    } else if rest.is_empty() {
                        f64::from(u8::from(x == copied.len()))
                    } else {
                        enumerate_pmf(&rest, x - copied.len())
                    };
                    prop_assert!((spiked - expected).abs() < 1e-12);
                }
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn log_concave(pis in profile_strategy(40)) {
                let profile = MatchProfile::new(pis).unwrap();
                let table = profile.pmf_table();
                let n = profile.len();
                for x in 1..n {
                    if table[x - 1] > 1e-300 && table[x] > 1e-300 && table[x + 1] > 1e-300 {
                        prop_assert!(table[x] * table[x] >= table[x + 1] * table[x - 1] * (1.0 - 1e-12));
                    }
                }
            }
        }
    }
}
