use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::error::{RemError, Result};

/// Length-`|V|` seed indicator. Binary for simulation, relaxed to `[0, 1]`
/// for decoder outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVector {
    values: Vec<f64>,
}

impl SeedVector {
    pub fn zeros(n: usize) -> Self {
        SeedVector {
            values: vec![0.0; n],
        }
    }

    pub fn from_nodes(n: usize, nodes: &[u32]) -> Result<Self> {
        let mut values = vec![0.0; n];
        for &v in nodes {
            let slot = values.get_mut(v as usize).ok_or_else(|| {
                RemError::Contract(format!("seed node {v} outside node universe of size {n}"))
            })?;
            *slot = 1.0;
        }
        Ok(SeedVector { values })
    }

    pub fn relaxed(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RemError::Contract(format!(
                "relaxed seed entry {v} outside [0, 1]"
            )));
        }
        Ok(SeedVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Sum of entries (cardinality when binary).
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Indices of entries equal to one.
    pub fn nodes(&self) -> Vec<u32> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes().into_iter().map(NodeId).collect()
    }

    /// Errors unless binary with at most `budget` ones.
    pub fn check_feasible(&self, budget: usize) -> Result<()> {
        if !self.is_binary() {
            return Err(RemError::Contract("seed vector is not binary".into()));
        }
        let k = self.nodes().len();
        if k > budget {
            return Err(RemError::Contract(format!(
                "seed set has {k} nodes, budget is {budget}"
            )));
        }
        Ok(())
    }
}

/// Project a relaxed vector onto exactly `b` ones: the `b` largest entries
/// win, ties go to the lower index. NaN ranks below everything.
pub fn binarize_topb(x: &[f64], b: usize) -> SeedVector {
    let n = x.len();
    let b = b.min(n);
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| key(x[j]).total_cmp(&key(x[i])).then(i.cmp(&j)));
    let mut values = vec![0.0; n];
    for &i in &order[..b] {
        values[i] = 1.0;
    }
    SeedVector { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn picks_largest() {
        assert_eq!(binarize_topb(&[0.9, 0.1, 0.8], 2).values(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_break_low_index() {
        assert_eq!(binarize_topb(&[0.5, 0.5, 0.5], 1).values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn full_budget_is_all_ones() {
        assert_eq!(binarize_topb(&[0.2, 0.0, 0.7], 3).values(), &[1.0; 3]);
    }

    #[test]
    fn zeros_fill_the_budget() {
        let s = binarize_topb(&[0.0, 0.3, 0.0, 0.0], 3);
        assert_eq!(s.nodes(), vec![0, 1, 2]);
    }

    #[test]
    fn feasibility() {
        let s = SeedVector::from_nodes(4, &[0, 2]).unwrap();
        assert!(s.check_feasible(2).is_ok());
        assert!(s.check_feasible(1).is_err());
        assert!(SeedVector::from_nodes(2, &[5]).is_err());
        assert!(SeedVector::relaxed(vec![0.5, 1.2]).is_err());
    }

    proptest! {
        #[test]
        fn exactly_b_ones(x in prop::collection::vec(0.0f64..=1.0, 1..60), b in 0usize..70) {
            let s = binarize_topb(&x, b);
            prop_assert!(s.is_binary());
            prop_assert_eq!(s.nodes().len(), b.min(x.len()));
            // every chosen entry dominates every unchosen one
            let chosen: Vec<f64> = s.nodes().iter().map(|&i| x[i as usize]).collect();
            let min_chosen = chosen.iter().cloned().fold(f64::INFINITY, f64::min);
            for (i, &v) in x.iter().enumerate() {
                if s.values()[i] == 0.0 {
                    prop_assert!(v <= min_chosen);
                }
            }
        }
    }
}
