//! Efficiency and equity metrics.
//!
//! `wasserstein1` integrates the absolute difference of the two empirical
//! quantile functions over (0, 1). Both quantile functions are step
//! functions with breakpoints at `i/n` and `j/m`, so walking the merged
//! breakpoint list gives the exact integral for any pair of sample sizes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{EpisodeOutcome, PredictionInterval, SensitiveGroup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least two groups, found {0}")]
    FewerThanTwoGroups(usize),
    #[error("group {0} has no samples")]
    EmptyGroup(SensitiveGroup),
}

/// Outage samples keyed by group. Every stored group is nonempty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedSamples {
    samples: BTreeMap<SensitiveGroup, Vec<f64>>,
}

impl GroupedSamples {
    pub fn new(samples: BTreeMap<SensitiveGroup, Vec<f64>>) -> Result<Self, MetricsError> {
        if let Some((g, _)) = samples.iter().find(|(_, v)| v.is_empty()) {
            return Err(MetricsError::EmptyGroup(*g));
        }
        Ok(Self { samples })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (SensitiveGroup, f64)>) -> Self {
        let mut samples: BTreeMap<SensitiveGroup, Vec<f64>> = BTreeMap::new();
        for (g, v) in pairs {
            samples.entry(g).or_default().push(v);
        }
        Self { samples }
    }

    pub fn get(&self, g: SensitiveGroup) -> Option<&[f64]> {
        self.samples.get(&g).map(Vec::as_slice)
    }

    pub fn groups(&self) -> impl Iterator<Item = SensitiveGroup> + '_ {
        self.samples.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SensitiveGroup, &[f64])> {
        self.samples.iter().map(|(g, v)| (*g, v.as_slice()))
    }

    pub fn extend(&mut self, other: &GroupedSamples) {
        for (g, v) in &other.samples {
            self.samples.entry(*g).or_default().extend_from_slice(v);
        }
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Order-1 Wasserstein distance between two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let a = sorted(a);
    let b = sorted(b);
    let (n, m) = (a.len() as u64, b.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        // compare (i+1)/n with (j+1)/m without rounding
        let lhs = (i as u64 + 1) * m;
        let rhs = (j as u64 + 1) * n;
        let next = if lhs <= rhs {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total)
}

/// Largest pairwise W1 distance across groups.
pub fn wd_inequity(g: &GroupedSamples) -> Result<f64, MetricsError> {
    if g.len() < 2 {
        return Err(MetricsError::FewerThanTwoGroups(g.len()));
    }
    let groups: Vec<&[f64]> = g.samples.values().map(Vec::as_slice).collect();
    let mut worst: f64 = 0.0;
    for x in 0..groups.len() {
        for y in (x + 1)..groups.len() {
            worst = worst.max(wasserstein1(groups[x], groups[y])?);
        }
    }
    Ok(worst)
}

/// Mean outage over every (episode, region) pair.
pub fn avg_outage(outcomes: &[EpisodeOutcome]) -> Result<f64, MetricsError> {
    let (sum, count) = outcomes
        .iter()
        .flat_map(|o| o.outage_by_region.iter())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / count as f64)
}

/// Mean interval width per group.
pub fn interval_stats(
    intervals: &BTreeMap<SensitiveGroup, Vec<PredictionInterval>>,
) -> Result<BTreeMap<SensitiveGroup, f64>, MetricsError> {
    if intervals.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    intervals
        .iter()
        .map(|(g, v)| {
            if v.is_empty() {
                return Err(MetricsError::EmptyInput);
            }
            let mean = v.iter().map(PredictionInterval::width).sum::<f64>() / v.len() as f64;
            Ok((*g, mean))
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
