use std::collections::HashMap;

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::error::CountingError;
use crate::instance::Instance;

/// Exact non-negative count. The DP never rounds.
pub type BigCount = BigUint;

/// Largest admissible member weight.
pub const MAX_WEIGHT: u64 = 1_000_000_000_000;

/// Strictly positive integer member weights, indexed by pool position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightVector {
    weights: Vec<u64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self { weights: vec![1; n] }
    }

    pub fn new(weights: Vec<u64>) -> Result<Self, CountingError> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, &w)| w == 0 || w > MAX_WEIGHT)
        {
            return Err(CountingError::InvalidWeights(format!(
                "weight {w} of member {i} outside [1, {MAX_WEIGHT}]"
            )));
        }
        Ok(Self { weights })
    }

    /// Weights keyed by member id; every pool member must be present.
    pub fn from_map(instance: &Instance, map: &HashMap<String, u64>) -> Result<Self, CountingError> {
        let mut weights = vec![0; instance.pool_size()];
        for (id, &w) in map {
            let i = instance
                .member_index(id)
                .ok_or_else(|| CountingError::InvalidWeights(format!("unknown member '{id}'")))?;
            weights[i] = w;
        }
        if let Some(i) = weights.iter().position(|&w| w == 0) {
            return Err(CountingError::InvalidWeights(format!(
                "missing or zero weight for member '{}'",
                instance.member_id(i)
            )));
        }
        Self::new(weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, member: usize) -> u64 {
        self.weights[member]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] == w[1])
    }
}

/// Coefficients of `prod_{i in members} (1 + mu_i x)`, i.e. the weighted
/// number of ways to pick `d` of the members, for `d = 0..=members.len()`.
pub fn convolution_coeffs(members: &[usize], weights: &WeightVector) -> Vec<BigCount> {
    let mut coeffs = vec![BigCount::one()];
    for &m in members {
        let mu = BigCount::from(weights.get(m));
        coeffs.push(BigCount::zero());
        for d in (1..coeffs.len()).rev() {
            let add = &coeffs[d - 1] * &mu;
            coeffs[d] += add;
        }
    }
    coeffs
}

/// Suffix coefficient tables for drawing a weighted `d`-subset of a group
/// by sequential inclusion: `table[t][e]` is the weighted number of
/// `e`-subsets of `members[t..]`, for `e <= cap`.
pub(crate) fn suffix_coeffs(members: &[usize], weights: &WeightVector, cap: usize) -> Vec<Vec<BigCount>> {
    let n = members.len();
    let mut table = vec![Vec::new(); n + 1];
    table[n] = vec![BigCount::one()];
    for t in (0..n).rev() {
        let mu = BigCount::from(weights.get(members[t]));
        let len = (n - t).min(cap) + 1;
        let next = &table[t + 1];
        let mut row = Vec::with_capacity(len);
        for e in 0..len {
            let mut v = next.get(e).cloned().unwrap_or_default();
            if e > 0 {
                v += &next[e - 1] * &mu;
            }
            row.push(v);
        }
        table[t] = row;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(v: &[u64]) -> Vec<BigCount> {
        v.iter().map(|&x| BigCount::from(x)).collect()
    }

    #[test]
    fn binomial_coefficients_for_unit_weights() {
        let w = WeightVector::uniform(3);
        assert_eq!(convolution_coeffs(&[0, 1], &w), big(&[1, 2, 1]));
        assert_eq!(convolution_coeffs(&[0, 1, 2], &w), big(&[1, 3, 3, 1]));
    }

    #[test]
    fn weighted_coefficients() {
        // (1 + 2x)(1 + x) = 1 + 3x + 2x^2
        let w = WeightVector::new(vec![2, 1]).unwrap();
        assert_eq!(convolution_coeffs(&[0, 1], &w), big(&[1, 3, 2]));
    }

    #[test]
    fn suffix_table_matches_direct_coefficients() {
        let w = WeightVector::new(vec![3, 1, 4, 1, 5]).unwrap();
        let members = [0, 1, 2, 3, 4];
        let table = suffix_coeffs(&members, &w, 5);
        for t in 0..=5 {
            assert_eq!(table[t], convolution_coeffs(&members[t..], &w));
        }
        let capped = suffix_coeffs(&members, &w, 2);
        assert_eq!(capped[0], convolution_coeffs(&members, &w)[..3].to_vec());
    }

    #[test]
    fn weights_are_range_checked() {
        assert!(WeightVector::new(vec![1, 0]).is_err());
        assert!(WeightVector::new(vec![MAX_WEIGHT + 1]).is_err());
        assert!(WeightVector::new(vec![1, MAX_WEIGHT]).is_ok());
    }
}
