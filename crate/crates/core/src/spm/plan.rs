use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered `(semantic_layer, spatial_layer)` pairs, 1-based, at which VCA fires.
///
/// A pair `(s, m)` fuses the output of semantic layer `s` into the output of
/// spatial layer `m`; the fused tokens feed spatial layer `m + 1`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FusionPlan(pub Vec<(usize, usize)>);

impl FusionPlan {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// `count` evenly spaced pairs ending at the last layer of both stacks.
    pub fn evenly_spaced(semantic_depth: usize, spatial_depth: usize, count: usize) -> Self {
        let count = count.min(spatial_depth).min(semantic_depth);
        Self(
            (1..=count)
                .map(|k| (k * semantic_depth / count, k * spatial_depth / count))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn validate(&self, semantic_depth: usize, spatial_depth: usize) -> Result<()> {
        let mut last = 0;
        for &(s, m) in &self.0 {
            if s == 0 || s > semantic_depth {
                return Err(Error::Config(format!(
                    "fusion semantic layer {s} outside 1..={semantic_depth}"
                )));
            }
            if m == 0 || m > spatial_depth {
                return Err(Error::Config(format!(
                    "fusion spatial layer {m} outside 1..={spatial_depth}"
                )));
            }
            if m <= last {
                return Err(Error::Config("fusion spatial layers must be strictly increasing".into()));
            }
            last = m;
        }
        Ok(())
    }

    /// Index into the plan of the pair firing after spatial layer `m` (1-based).
    pub fn firing_after(&self, m: usize) -> Option<(usize, usize)> {
        self.0.iter().position(|&(_, sm)| sm == m).map(|k| (k, self.0[k].0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_full_scale_plan() {
        let p = FusionPlan::evenly_spaced(24, 12, 4);
        assert_eq!(p.0, vec![(6, 3), (12, 6), (18, 9), (24, 12)]);
        p.validate(24, 12).unwrap();
    }

    #[test]
    fn rejects_non_increasing_and_out_of_range() {
        assert!(FusionPlan(vec![(1, 2), (2, 2)]).validate(4, 4).is_err());
        assert!(FusionPlan(vec![(5, 1)]).validate(4, 4).is_err());
        assert!(FusionPlan(vec![(1, 0)]).validate(4, 4).is_err());
    }
}
