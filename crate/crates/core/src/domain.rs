//! Core value types shared by the prediction and sequencing stages.
//!
//! Everything here is plain data: constructed once, validated, then shared
//! read-only. Region ids are dense (`0..n`) so per-region tables are stored
//! as vectors indexed by id.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::metrics;

/// Width of the per-region covariate vector.
pub const FEATURE_DIM: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("expected {expected} features, found {found}")]
    FeatureDimension { expected: usize, found: usize },
    #[error("request count must be non-negative, got {0}")]
    NegativeRequestCount(i64),
    #[error("repair duration must be strictly positive and finite, got {0}")]
    NonPositiveDuration(f64),
    #[error("interval bounds are inverted: lo={lo} > hi={hi}")]
    InvertedInterval { lo: f64, hi: f64 },
    #[error("repair sequence is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("outage table has {outages} entries but {groups} group labels")]
    LengthMismatch { outages: usize, groups: usize },
}

/// Income tier used for equity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensitiveGroup {
    Low = 0,
    Middle = 1,
    High = 2,
}

impl SensitiveGroup {
    pub const ALL: [SensitiveGroup; 3] = [Self::Low, Self::Middle, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "Low",
            Self::Middle => "Middle",
            Self::High => "High",
        }
    }
}

impl fmt::Display for SensitiveGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Planar position in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A repairable service area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub coord: Point,
    pub features: Vec<f64>,
    pub group: SensitiveGroup,
    /// Historical repair requests filed from this region.
    pub request_count: i64,
}

impl Region {
    pub fn validate(&self) -> Result<(), DomainError> {
        validate_region(self)
    }
}

pub fn validate_region(r: &Region) -> Result<(), DomainError> {
    check_features(&r.features)?;
    if r.request_count < 0 {
        return Err(DomainError::NegativeRequestCount(r.request_count));
    }
    Ok(())
}

fn check_features(features: &[f64]) -> Result<(), DomainError> {
    if features.len() != FEATURE_DIM {
        return Err(DomainError::FeatureDimension {
            expected: FEATURE_DIM,
            found: features.len(),
        });
    }
    Ok(())
}

/// One historical repair: covariates, group and observed duration in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub region_id: usize,
    pub features: Vec<f64>,
    pub group: SensitiveGroup,
    pub repair_duration: f64,
}

impl RepairRecord {
    pub fn new(
        region_id: usize,
        features: Vec<f64>,
        group: SensitiveGroup,
        repair_duration: f64,
    ) -> Result<Self, DomainError> {
        let rec = Self {
            region_id,
            features,
            group,
            repair_duration,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        check_features(&self.features)?;
        if !(self.repair_duration > 0.0 && self.repair_duration.is_finite()) {
            return Err(DomainError::NonPositiveDuration(self.repair_duration));
        }
        Ok(())
    }
}

/// Repair-duration interval in hours. Bounds may be infinite when the
/// calibration factor for a group is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl PredictionInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DomainError> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(DomainError::InvertedInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// Result of one full restoration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    /// Outage duration per region, indexed by region id.
    pub outage_by_region: Vec<f64>,
    /// Group of each region, indexed by region id.
    pub group_by_region: Vec<SensitiveGroup>,
    /// Order in which regions were repaired.
    pub sequence: Vec<usize>,
    /// Negative mean outage.
    pub reward: f64,
    /// Largest pairwise W1 distance between per-group outage samples.
    pub cost: f64,
    pub makespan: f64,
}

impl EpisodeOutcome {
    pub fn new(
        outage_by_region: Vec<f64>,
        group_by_region: Vec<SensitiveGroup>,
        sequence: Vec<usize>,
        makespan: f64,
    ) -> Result<Self, DomainError> {
        let n = outage_by_region.len();
        if group_by_region.len() != n {
            return Err(DomainError::LengthMismatch {
                outages: n,
                groups: group_by_region.len(),
            });
        }
        if !is_permutation(&sequence, n) {
            return Err(DomainError::NotAPermutation(n));
        }
        let reward = -mean(&outage_by_region);
        let cost = episode_cost(&outage_by_region, &group_by_region);
        Ok(Self {
            outage_by_region,
            group_by_region,
            sequence,
            reward,
            cost,
            makespan,
        })
    }

    pub fn mean_outage(&self) -> f64 {
        -self.reward
    }

    /// Outage samples split by group, in region-id order.
    pub fn grouped(&self) -> metrics::GroupedSamples {
        metrics::GroupedSamples::from_pairs(
            self.group_by_region
                .iter()
                .copied()
                .zip(self.outage_by_region.iter().copied()),
        )
    }
}

/// Equity cost of one episode; zero when fewer than two groups are present.
pub fn episode_cost(outages: &[f64], groups: &[SensitiveGroup]) -> f64 {
    let grouped =
        metrics::GroupedSamples::from_pairs(groups.iter().copied().zip(outages.iter().copied()));
    metrics::wd_inequity(&grouped).unwrap_or(0.0)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn is_permutation(seq: &[usize], n: usize) -> bool {
    if seq.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &id in seq {
        if id >= n || seen[id] {
            return false;
        }
        seen[id] = true;
    }
    true
}
