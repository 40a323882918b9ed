//! Quantile regression forest.
//!
//! Trees are grown CART-style on bootstrap resamples, splitting on squared
//! error reduction. After a tree is grown, every original training record is
//! routed down it and its target stored in the leaf it reaches, so a leaf
//! keeps the raw targets rather than a mean. A query point then induces a
//! weighted empirical distribution: each tree contributes total weight
//! `1/n_trees`, shared equally among the targets in the leaf the point falls
//! into. Quantiles are read off that distribution with the lower (infimum)
//! inverse-CDF convention.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PredictionInterval, RepairRecord, FEATURE_DIM};

pub const QRF_MAGIC: &str = "QRF1";
const QRF_VERSION: u32 = 1;

/// Slack when comparing a cumulative weight against the target level, so
/// that e.g. five weights of 0.1 still reach 0.5.
const CDF_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("quantile level {0} outside (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("not a {QRF_MAGIC} checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrfParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// `None` grows until leaves cannot be split further.
    pub max_depth: Option<usize>,
    /// Features considered at each split.
    pub feature_subsample: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for QrfParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            min_leaf: 5,
            max_depth: None,
            feature_subsample: 3,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl QrfParams {
    fn validate(&self) -> Result<(), ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidParams(m.into()));
        if self.n_trees == 0 {
            return bad("n_trees must be positive");
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be positive");
        }
        if self.feature_subsample == 0 || self.feature_subsample > FEATURE_DIM {
            return bad("feature_subsample must be in 1..=9");
        }
        Ok(())
    }
}

/// Symmetric central interval levels for a nominal coverage `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub alpha: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

impl QuantilePair {
    pub fn new(alpha: f64) -> Result<Self, ForestError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ForestError::AlphaOutOfRange(alpha));
        }
        Ok(Self {
            alpha,
            alpha_lo: (1.0 - alpha) / 2.0,
            alpha_hi: (1.0 + alpha) / 2.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Targets sorted ascending.
    Leaf { targets: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn leaf_targets(&self, x: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { targets } => targets,
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { targets } => Some(targets.as_slice()),
            Node::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrfModel {
    pub params: QrfParams,
    pub trees: Vec<Tree>,
}

/// Training rows in canonical order.
struct TrainSet {
    x: Vec<[f64; FEATURE_DIM]>,
    y: Vec<f64>,
}

fn canonical(train: &[RepairRecord]) -> Result<TrainSet, ForestError> {
    for r in train {
        if r.features.len() != FEATURE_DIM {
            return Err(ForestError::DimensionMismatch {
                expected: FEATURE_DIM,
                found: r.features.len(),
            });
        }
    }
    let mut order: Vec<&RepairRecord> = train.iter().collect();
    order.sort_by(|a, b| {
        a.region_id
            .cmp(&b.region_id)
            .then(a.repair_duration.total_cmp(&b.repair_duration))
            .then_with(|| {
                a.features
                    .iter()
                    .zip(&b.features)
                    .map(|(p, q)| p.to_bits().cmp(&q.to_bits()))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    let x = order
        .iter()
        .map(|r| {
            let mut row = [0.0; FEATURE_DIM];
            row.copy_from_slice(&r.features);
            row
        })
        .collect();
    let y = order.iter().map(|r| r.repair_duration).collect();
    Ok(TrainSet { x, y })
}

/// In-bag sample: record index and bootstrap multiplicity.
#[derive(Clone, Copy)]
struct Bag {
    idx: usize,
    mult: f64,
}

struct Grower<'a> {
    data: &'a TrainSet,
    params: &'a QrfParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&mut self, bag: Vec<Bag>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { targets: vec![] });
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || bag.len() < 2 * self.params.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(&bag) else {
            return id;
        };
        let (l, r): (Vec<Bag>, Vec<Bag>) = bag
            .into_iter()
            .partition(|b| self.data.x[b.idx][best.feature] <= best.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, bag: &[Bag]) -> Option<BestSplit> {
        let min_leaf = self.params.min_leaf;
        let features = sample(&mut self.rng, FEATURE_DIM, self.params.feature_subsample).into_vec();
        let (tw, ty, ty2) = bag.iter().fold((0.0, 0.0, 0.0), |(w, s, s2), b| {
            let y = self.data.y[b.idx];
            (w + b.mult, s + b.mult * y, s2 + b.mult * y * y)
        });
        let parent_sse = ty2 - ty * ty / tw;
        if parent_sse <= 1e-12 * tw.max(1.0) {
            return None;
        }
        let mut best: Option<BestSplit> = None;
        let mut sorted = bag.to_vec();
        for f in features {
            sorted.sort_by(|a, b| {
                self.data.x[a.idx][f]
                    .total_cmp(&self.data.x[b.idx][f])
                    .then(a.idx.cmp(&b.idx))
            });
            let (mut lw, mut ly, mut ly2) = (0.0, 0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let b = sorted[k];
                let y = self.data.y[b.idx];
                lw += b.mult;
                ly += b.mult * y;
                ly2 += b.mult * y * y;
                let here = self.data.x[b.idx][f];
                let next = self.data.x[sorted[k + 1].idx][f];
                // each side needs `min_leaf` distinct records
                if here == next || k + 1 < min_leaf || sorted.len() - (k + 1) < min_leaf {
                    continue;
                }
                let rw = tw - lw;
                let (ry, ry2) = (ty - ly, ty2 - ly2);
                let sse = (ly2 - ly * ly / lw) + (ry2 - ry * ry / rw);
                let gain = parent_sse - sse;
                if best.as_ref().is_none_or(|bs| gain > bs.gain) {
                    let mut threshold = 0.5 * (here + next);
                    if threshold >= next {
                        threshold = here;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > 0.0)
    }
}

fn grow_tree(data: &TrainSet, params: &QrfParams, tree_index: usize) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(tree_index as u64);
    let n = data.y.len();
    let bag: Vec<Bag> = if params.bootstrap {
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.gen_range(0..n)] += 1;
        }
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(idx, &c)| Bag {
                idx,
                mult: c as f64,
            })
            .collect()
    } else {
        (0..n).map(|idx| Bag { idx, mult: 1.0 }).collect()
    };
    let mut g = Grower {
        data,
        params,
        rng,
        nodes: Vec::new(),
    };
    g.grow(bag, 0);
    let mut tree = Tree { nodes: g.nodes };

    // populate leaves with every training target, in or out of bag
    let mut leaf_targets: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes.len()];
    for (x, &y) in data.x.iter().zip(&data.y) {
        leaf_targets[tree.leaf_index(x)].push(y);
    }
    for (node, mut targets) in tree.nodes.iter_mut().zip(leaf_targets) {
        if let Node::Leaf { targets: slot } = node {
            targets.sort_by(f64::total_cmp);
            *slot = targets;
        }
    }
    tree
}

pub fn fit(train: &[RepairRecord], params: &QrfParams) -> Result<QrfModel, ForestError> {
    if train.is_empty() {
        return Err(ForestError::EmptyTrainingSet);
    }
    params.validate()?;
    let data = canonical(train)?;
    let trees = (0..params.n_trees)
        .map(|t| grow_tree(&data, params, t))
        .collect();
    Ok(QrfModel {
        params: params.clone(),
        trees,
    })
}

/// Weighted empirical conditional distribution at one query point, sorted
/// by value.
#[derive(Debug, Clone)]
pub struct ConditionalDistribution {
    atoms: Vec<(f64, f64)>,
}

impl ConditionalDistribution {
    /// Lowest value whose cumulative weight reaches `alpha`.
    pub fn quantile(&self, alpha: f64) -> Result<f64, ForestError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ForestError::AlphaOutOfRange(alpha));
        }
        let mut cum = 0.0;
        for &(v, w) in &self.atoms {
            cum += w;
            if cum >= alpha - CDF_EPS {
                return Ok(v);
            }
        }
        Ok(self.atoms.last().expect("nonempty").0)
    }
}

impl QrfModel {
    fn check_x(x: &[f64]) -> Result<(), ForestError> {
        if x.len() != FEATURE_DIM {
            return Err(ForestError::DimensionMismatch {
                expected: FEATURE_DIM,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn conditional(&self, x: &[f64]) -> Result<ConditionalDistribution, ForestError> {
        Self::check_x(x)?;
        let per_tree = 1.0 / self.trees.len() as f64;
        let mut atoms = Vec::new();
        for tree in &self.trees {
            let leaf = tree.leaf_targets(x);
            let w = per_tree / leaf.len() as f64;
            atoms.extend(leaf.iter().map(|&v| (v, w)));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(ConditionalDistribution { atoms })
    }

    pub fn predict_quantile(&self, x: &[f64], alpha: f64) -> Result<f64, ForestError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ForestError::AlphaOutOfRange(alpha));
        }
        self.conditional(x)?.quantile(alpha)
    }

    /// Uncalibrated central interval `[q(alpha_lo), q(alpha_hi)]`.
    pub fn predict_interval_raw(
        &self,
        x: &[f64],
        qp: &QuantilePair,
    ) -> Result<PredictionInterval, ForestError> {
        let dist = self.conditional(x)?;
        Ok(PredictionInterval {
            lo: dist.quantile(qp.alpha_lo)?,
            hi: dist.quantile(qp.alpha_hi)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        let file = QrfFile {
            magic: QRF_MAGIC.to_string(),
            version: QRF_VERSION,
            model: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        let bytes = fs::read(path)?;
        let file: QrfFile = serde_json::from_slice(&bytes)?;
        file.check()?;
        Ok(file.model)
    }
}

/// On-disk layout of a forest checkpoint. Extra top-level sections (such as
/// calibration factors) are tolerated and ignored here.
#[derive(Debug, Serialize, Deserialize)]
pub struct QrfFile {
    pub magic: String,
    pub version: u32,
    pub model: QrfModel,
}

impl QrfFile {
    pub fn check(&self) -> Result<(), ForestError> {
        if self.magic != QRF_MAGIC {
            return Err(ForestError::BadCheckpoint(format!(
                "magic {:?}",
                self.magic
            )));
        }
        if self.version != QRF_VERSION {
            return Err(ForestError::BadCheckpoint(format!(
                "version {}",
                self.version
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SensitiveGroup;
    use proptest::prelude::*;

    fn rec(x: [f64; 9], y: f64, region: usize) -> RepairRecord {
        RepairRecord {
            region_id: region,
            features: x.to_vec(),
            group: SensitiveGroup::Middle,
            repair_duration: y,
        }
    }

    fn ramp(n: usize) -> Vec<RepairRecord> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                rec(
                    [t, 1.0 - t, 0.5, t * t, 0.1, 0.2, 0.3, 0.4, 0.5],
                    1.0 + (i % 10) as f64,
                    i,
                )
            })
            .collect()
    }

    fn single_leaf(ys: &[f64]) -> QrfModel {
        let train: Vec<_> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| rec([i as f64; 9], y, i))
            .collect();
        let params = QrfParams {
            n_trees: 1,
            min_leaf: ys.len(),
            ..QrfParams::default()
        };
        fit(&train, &params).unwrap()
    }

    /// Lowest order statistic whose rank/n reaches alpha.
    fn empirical_quantile(ys: &[f64], alpha: f64) -> f64 {
        let mut s = ys.to_vec();
        s.sort_by(f64::total_cmp);
        let k = (alpha * s.len() as f64 - 1e-9).ceil().max(1.0) as usize;
        s[k - 1]
    }

    #[test]
    fn constant_targets_predict_constant() {
        let train: Vec<_> = ramp(60)
            .into_iter()
            .map(|mut r| {
                r.repair_duration = 7.0;
                r
            })
            .collect();
        let m = fit(
            &train,
            &QrfParams {
                n_trees: 10,
                ..QrfParams::default()
            },
        )
        .unwrap();
        for r in &train {
            for a in [0.05, 0.5, 0.95] {
                assert_eq!(m.predict_quantile(&r.features, a).unwrap(), 7.0);
            }
        }
        let qp = QuantilePair::new(0.9).unwrap();
        let pi = m.predict_interval_raw(&train[3].features, &qp).unwrap();
        assert_eq!((pi.lo, pi.hi), (7.0, 7.0));
    }

    #[test]
    fn single_leaf_matches_empirical_quantiles() {
        let ys: Vec<f64> = vec![3.5, 1.0, 9.25, 4.0, 4.0, 12.0, 0.5, 7.0, 2.0, 6.5, 8.0];
        let m = single_leaf(&ys);
        assert_eq!(m.trees[0].nodes.len(), 1);
        for a in [0.01, 0.1, 0.25, 0.3, 0.5, 0.77, 0.9, 0.99] {
            assert_eq!(
                m.predict_quantile(&[0.0; 9], a).unwrap(),
                empirical_quantile(&ys, a),
                "alpha {a}"
            );
        }
    }

    #[test]
    fn median_of_one_to_ten_is_five() {
        let ys: Vec<f64> = (1..=10).map(f64::from).collect();
        let m = single_leaf(&ys);
        assert_eq!(m.predict_quantile(&[0.0; 9], 0.5).unwrap(), 5.0);
        let pi = m
            .predict_interval_raw(&[0.0; 9], &QuantilePair::new(0.8).unwrap())
            .unwrap();
        assert_eq!((pi.lo, pi.hi), (1.0, 9.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            fit(&[], &QrfParams::default()),
            Err(ForestError::EmptyTrainingSet)
        ));
        let m = single_leaf(&[1.0, 2.0]);
        assert!(matches!(
            m.predict_quantile(&[0.0; 9], 1.2),
            Err(ForestError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            m.predict_quantile(&[0.0; 8], 0.5),
            Err(ForestError::DimensionMismatch { .. })
        ));
        assert!(QuantilePair::new(0.0).is_err());
    }

    #[test]
    fn leaves_partition_training_targets() {
        let train = ramp(80);
        let params = QrfParams {
            n_trees: 5,
            ..QrfParams::default()
        };
        let m = fit(&train, &params).unwrap();
        let mut all: Vec<f64> = train.iter().map(|r| r.repair_duration).collect();
        all.sort_by(f64::total_cmp);
        for tree in &m.trees {
            let mut seen: Vec<f64> = tree.leaves().flatten().copied().collect();
            seen.sort_by(f64::total_cmp);
            assert_eq!(seen, all);
            assert!(tree.leaves().all(|l| l.len() >= params.min_leaf));
        }
    }

    #[test]
    fn record_order_does_not_matter() {
        let train = ramp(50);
        let mut shuffled = train.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let p = QrfParams {
            n_trees: 8,
            seed: 42,
            ..QrfParams::default()
        };
        assert_eq!(fit(&train, &p).unwrap(), fit(&shuffled, &p).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = fit(
            &ramp(40),
            &QrfParams {
                n_trees: 4,
                ..QrfParams::default()
            },
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("qrf-rt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.json");
        m.save(&p).unwrap();
        assert_eq!(QrfModel::load(&p).unwrap(), m);
        fs::write(
            &p,
            br#"{"magic":"NOPE","version":1,"model":{"params":{},"trees":[]}}"#,
        )
        .unwrap();
        assert!(matches!(
            QrfModel::load(&p),
            Err(ForestError::BadCheckpoint(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quantiles_monotone_in_alpha(
            seed in 0u64..1000,
            ys in proptest::collection::vec(0.1f64..50.0, 12..40),
            q in proptest::collection::vec(0.0f64..1.0, 9),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
        ) {
            let train: Vec<_> = ys.iter().enumerate().map(|(i, &y)| {
                let mut x = [0.0; 9];
                for (k, v) in x.iter_mut().enumerate() {
                    *v = ((i * (k + 3)) % 7) as f64 / 7.0;
                }
                rec(x, y, i)
            }).collect();
            let m = fit(&train, &QrfParams { n_trees: 6, min_leaf: 2, seed, ..QrfParams::default() }).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(m.predict_quantile(&q, lo).unwrap() <= m.predict_quantile(&q, hi).unwrap());
        }
    }
}
