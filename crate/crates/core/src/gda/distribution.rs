use std::collections::BTreeMap;

use crate::error::{bail, Result};

/// A discrete distribution on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Distribution {
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let d = Distribution { support, weights };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len();
        Distribution::new(support, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn point_mass(x: f64) -> Result<Self> {
        Distribution::new(vec![x], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            bail!(Domain, "empty distribution");
        }
        if self.support.len() != self.weights.len() {
            bail!(Dimension, "support and weights differ in length");
        }
        if self.support.iter().any(|x| !(0.0..=1.0).contains(x)) {
            bail!(Domain, "support values must lie in [0, 1]");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            bail!(Domain, "weights must be finite and nonnegative");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            bail!(Domain, "weights sum to {total}, expected 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Authenticity {
    Real,
    Fake,
}

impl Authenticity {
    pub fn from_label(label: usize) -> Self {
        if label == 0 {
            Authenticity::Real
        } else {
            Authenticity::Fake
        }
    }
}

/// Predictions of one (group, class) cell, or of a whole class when `group`
/// is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDistribution {
    pub group: Option<u32>,
    pub class: Authenticity,
    pub dist: Distribution,
    /// Batch positions of the support points.
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupCells {
    pub real: Option<GroupDistribution>,
    pub fake: Option<GroupDistribution>,
}

impl GroupCells {
    pub fn is_empty(&self) -> bool {
        self.real.is_none() && self.fake.is_none()
    }
}

/// Per-group cells plus the batch-wide real and fake distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedPredictions {
    pub global_real: Option<GroupDistribution>,
    pub global_fake: Option<GroupDistribution>,
    /// Only groups with at least one emitted cell appear.
    pub groups: BTreeMap<u32, GroupCells>,
}

impl GroupedPredictions {
    pub fn cell_count(&self) -> usize {
        self.groups
            .values()
            .map(|c| usize::from(c.real.is_some()) + usize::from(c.fake.is_some()))
            .sum()
    }
}

fn cell(probs: &[f64], members: Vec<usize>, group: Option<u32>, class: Authenticity) -> Result<GroupDistribution> {
    let support = members.iter().map(|&i| probs[i]).collect();
    Ok(GroupDistribution {
        group,
        class,
        dist: Distribution::uniform(support)?,
        members,
    })
}

/// Split a batch's fake-probabilities by group and authenticity.
///
/// A (group, class) cell is emitted when it holds at least `min_cell`
/// samples; the global real/fake distributions are emitted when the batch
/// has any sample of that class. All weights are uniform.
pub fn group_predictions(
    fake_probs: &[f64],
    labels: &[usize],
    groups: &[u32],
    min_cell: usize,
) -> Result<GroupedPredictions> {
    let b = fake_probs.len();
    if b == 0 {
        bail!(Domain, "empty batch");
    }
    if labels.len() != b || groups.len() != b {
        bail!(Dimension, "batch of {b} with {} labels and {} group ids", labels.len(), groups.len());
    }
    let mut real = Vec::new();
    let mut fake = Vec::new();
    let mut by_cell: BTreeMap<(u32, Authenticity), Vec<usize>> = BTreeMap::new();
    for i in 0..b {
        let class = Authenticity::from_label(labels[i]);
        match class {
            Authenticity::Real => real.push(i),
            Authenticity::Fake => fake.push(i),
        }
        by_cell.entry((groups[i], class)).or_default().push(i);
    }
    let global_real = (!real.is_empty())
        .then(|| cell(fake_probs, real, None, Authenticity::Real))
        .transpose()?;
    let global_fake = (!fake.is_empty())
        .then(|| cell(fake_probs, fake, None, Authenticity::Fake))
        .transpose()?;
    let mut out: BTreeMap<u32, GroupCells> = BTreeMap::new();
    for ((group, class), members) in by_cell {
        if members.len() < min_cell.max(1) {
            continue;
        }
        let d = cell(fake_probs, members, Some(group), class)?;
        let entry = out.entry(group).or_default();
        match class {
            Authenticity::Real => entry.real = Some(d),
            Authenticity::Fake => entry.fake = Some(d),
        }
    }
    Ok(GroupedPredictions {
        global_real,
        global_fake,
        groups: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_count() {
        let g = group_predictions(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(g.cell_count(), 2);
        assert!(g.groups[&0].real.is_some() && g.groups[&0].fake.is_none());
        assert!(g.groups[&1].fake.is_some() && g.groups[&1].real.is_none());
        assert!(g.global_real.is_some() && g.global_fake.is_some());
    }

    #[test]
    fn single_group_matches_global() {
        let g = group_predictions(&[0.1, 0.3, 0.7], &[0, 0, 1], &[4, 4, 4], 2).unwrap();
        let real = g.groups[&4].real.as_ref().unwrap();
        assert_eq!(real.dist, g.global_real.as_ref().unwrap().dist);
        assert!(g.groups[&4].fake.is_none());
    }

    #[test]
    fn thin_cells_and_missing_class() {
        let g = group_predictions(&[0.1, 0.2, 0.3], &[0, 0, 0], &[0, 0, 1], 2).unwrap();
        assert!(g.global_fake.is_none());
        assert!(!g.groups.contains_key(&1));
        assert!(group_predictions(&[], &[], &[], 2).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 1.5], vec![0.5, 0.5]).is_err());
        assert!(Distribution::new(vec![0.5, 0.6], vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![], vec![]).is_err());
        assert!(Distribution::uniform(vec![0.0, 0.5, 1.0]).is_ok());
    }
}
