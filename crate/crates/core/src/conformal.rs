//! Split-conformal calibration of forest intervals.
//!
//! Three calibrators share one code path:
//!
//! * `Cp`: symmetric band around the raw-interval midpoint, scored by
//!   `|y - mid|`.
//! * `Cqr`: conformity scores `max(lo - y, y - hi)` pooled over the whole
//!   calibration set, one additive factor for everybody.
//! * `Ecqr`: the same scores, but the calibration set is partitioned by
//!   income group and each group gets its own factor. Coverage then holds
//!   within every group rather than only on average.
//!
//! The factor is the `ceil(alpha (n + 1))`-th smallest score. When that rank
//! exceeds `n` the factor is `+inf` and the resulting interval is unbounded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PredictionInterval, RepairRecord, SensitiveGroup};
use crate::forest::{ForestError, QrfFile, QrfModel, QuantilePair, QRF_MAGIC};

pub const CAL_MAGIC: &str = "CAL1";

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("no conformity scores")]
    EmptyScores,
    #[error("no scores for group {0}")]
    EmptyGroupScores(SensitiveGroup),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("no calibration factor for group {0}")]
    UnknownGroup(SensitiveGroup),
    #[error("coverage level {0} outside (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("unknown calibration method {0:?} (expected cp, cqr or ecqr)")]
    UnknownMethod(String),
    #[error("checkpoint has no calibration section")]
    MissingCalibration,
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cp,
    Cqr,
    Ecqr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cp, Method::Cqr, Method::Ecqr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cp => "CP",
            Method::Cqr => "CQR",
            Method::Ecqr => "ECQR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ConformalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cp" => Ok(Method::Cp),
            "cqr" => Ok(Method::Cqr),
            "ecqr" => Ok(Method::Ecqr),
            _ => Err(ConformalError::UnknownMethod(s.to_string())),
        }
    }
}

/// Serializes non-finite floats as strings so they survive JSON.
pub(crate) mod ext_f64 {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if v.is_nan() {
            Repr::Text("nan".into()).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }

    pub mod map {
        use super::*;
        use std::collections::BTreeMap;

        use crate::domain::SensitiveGroup;

        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(
            m: &BTreeMap<SensitiveGroup, f64>,
            s: S,
        ) -> Result<S::Ok, S::Error> {
            let m: BTreeMap<SensitiveGroup, W> = m.iter().map(|(k, v)| (*k, W(*v))).collect();
            m.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<BTreeMap<SensitiveGroup, f64>, D::Error> {
            let m: BTreeMap<SensitiveGroup, W> = BTreeMap::deserialize(d)?;
            Ok(m.into_iter().map(|(k, v)| (k, v.0)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFactor {
    pub method: Method,
    /// Target coverage used for the calibration rank.
    pub alpha: f64,
    /// Forest quantile levels the raw intervals are built from.
    pub quantiles: QuantilePair,
    /// Pooled factor; the one applied by `Cp` and `Cqr`.
    #[serde(with = "ext_f64")]
    pub global_q: f64,
    /// Per-group factors; the ones applied by `Ecqr`.
    #[serde(with = "ext_f64::map")]
    pub per_group_q: BTreeMap<SensitiveGroup, f64>,
    pub per_group_n: BTreeMap<SensitiveGroup, usize>,
}

impl CalibrationFactor {
    /// Additive widening applied to intervals for `group`.
    pub fn factor_for(&self, group: SensitiveGroup) -> Result<f64, ConformalError> {
        match self.method {
            Method::Cp | Method::Cqr => Ok(self.global_q),
            Method::Ecqr => self
                .per_group_q
                .get(&group)
                .copied()
                .ok_or(ConformalError::UnknownGroup(group)),
        }
    }

    /// Human-readable notes about unbounded factors.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.method {
            Method::Ecqr => {
                for (g, q) in &self.per_group_q {
                    if q.is_infinite() {
                        out.push(format!(
                            "group {g}: {} calibration records are too few for alpha={}, intervals are unbounded",
                            self.per_group_n.get(g).copied().unwrap_or(0),
                            self.alpha
                        ));
                    }
                }
            }
            _ if self.global_q.is_infinite() => out.push(format!(
                "calibration set too small for alpha={}, intervals are unbounded",
                self.alpha
            )),
            _ => {}
        }
        out
    }
}

/// Signed distance of `y` outside the interval; negative strictly inside.
pub fn conformity_score(pi: &PredictionInterval, y: f64) -> f64 {
    (pi.lo - y).max(y - pi.hi)
}

/// Rank `ceil(alpha (n + 1))`, tolerant of the rounding in `alpha * (n + 1)`.
pub fn calibration_rank(n: usize, alpha: f64) -> usize {
    let prod = alpha * (n as f64 + 1.0);
    (prod - 1e-12 * prod.max(1.0)).ceil().max(1.0) as usize
}

/// The `ceil(alpha (n + 1))`-th smallest score, or `+inf` if that rank
/// exceeds the number of scores.
pub fn calibration_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::AlphaOutOfRange(alpha));
    }
    let k = calibration_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s[k - 1])
}

fn score(method: Method, raw: &PredictionInterval, y: f64) -> f64 {
    match method {
        Method::Cp => (y - raw.midpoint()).abs(),
        Method::Cqr | Method::Ecqr => conformity_score(raw, y),
    }
}

pub fn calibrate(
    model: &QrfModel,
    cal: &[RepairRecord],
    alpha: f64,
    method: Method,
) -> Result<CalibrationFactor, ConformalError> {
    let qp = QuantilePair::new(alpha).map_err(|_| ConformalError::AlphaOutOfRange(alpha))?;
    calibrate_with_quantiles(model, cal, qp, alpha, method)
}

/// Calibrates intervals built from `qp` to coverage `alpha`; `calibrate`
/// uses the quantile pair derived from `alpha` itself.
pub fn calibrate_with_quantiles(
    model: &QrfModel,
    cal: &[RepairRecord],
    qp: QuantilePair,
    alpha: f64,
    method: Method,
) -> Result<CalibrationFactor, ConformalError> {
    if cal.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let mut all = Vec::with_capacity(cal.len());
    let mut by_group: BTreeMap<SensitiveGroup, Vec<f64>> = BTreeMap::new();
    for r in cal {
        let raw = model.predict_interval_raw(&r.features, &qp)?;
        let s = score(method, &raw, r.repair_duration);
        all.push(s);
        by_group.entry(r.group).or_default().push(s);
    }
    let global_q = calibration_quantile(&all, alpha)?;
    let per_group_n = by_group.iter().map(|(g, v)| (*g, v.len())).collect();
    let per_group_q = match method {
        Method::Ecqr => by_group
            .iter()
            .map(|(g, v)| {
                calibration_quantile(v, alpha)
                    .map(|q| (*g, q))
                    .map_err(|_| ConformalError::EmptyGroupScores(*g))
            })
            .collect::<Result<_, _>>()?,
        Method::Cp | Method::Cqr => BTreeMap::new(),
    };
    Ok(CalibrationFactor {
        method,
        alpha,
        quantiles: qp,
        global_q,
        per_group_q,
        per_group_n,
    })
}

/// Applies an additive factor to a raw interval, collapsing to the midpoint
/// when a negative factor would invert it.
pub fn widen(raw: &PredictionInterval, q: f64) -> PredictionInterval {
    let lo = raw.lo - q;
    let hi = raw.hi + q;
    if lo > hi {
        PredictionInterval::point(raw.midpoint())
    } else {
        PredictionInterval { lo, hi }
    }
}

pub fn predict_interval(
    model: &QrfModel,
    factor: &CalibrationFactor,
    x: &[f64],
    group: SensitiveGroup,
) -> Result<PredictionInterval, ConformalError> {
    let q = factor.factor_for(group)?;
    let raw = model.predict_interval_raw(x, &factor.quantiles)?;
    Ok(match factor.method {
        Method::Cp => widen(&PredictionInterval::point(raw.midpoint()), q),
        Method::Cqr | Method::Ecqr => widen(&raw, q),
    })
}

/// Fraction of test records inside their calibrated interval, per group.
pub fn coverage_by_group(
    model: &QrfModel,
    factor: &CalibrationFactor,
    test: &[RepairRecord],
) -> Result<BTreeMap<SensitiveGroup, f64>, ConformalError> {
    let mut hits: BTreeMap<SensitiveGroup, (usize, usize)> = BTreeMap::new();
    for r in test {
        let pi = predict_interval(model, factor, &r.features, r.group)?;
        let e = hits.entry(r.group).or_default();
        e.0 += usize::from(pi.contains(r.repair_duration));
        e.1 += 1;
    }
    Ok(hits
        .into_iter()
        .map(|(g, (h, n))| (g, h as f64 / n as f64))
        .collect())
}

/// A fitted forest together with one calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedPredictor {
    pub model: QrfModel,
    pub factor: CalibrationFactor,
}

impl CalibratedPredictor {
    pub fn interval(
        &self,
        x: &[f64],
        group: SensitiveGroup,
    ) -> Result<PredictionInterval, ConformalError> {
        predict_interval(&self.model, &self.factor, x, group)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalSection {
    pub magic: String,
    #[serde(flatten)]
    pub factor: CalibrationFactor,
}

/// Forest checkpoint with any number of appended calibration sections.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictorFile {
    pub magic: String,
    pub version: u32,
    pub model: QrfModel,
    #[serde(default)]
    pub calibrations: Vec<CalSection>,
}

impl PredictorFile {
    pub fn load(path: &Path) -> Result<Self, ConformalError> {
        let bytes = fs::read(path)?;
        let file: PredictorFile = serde_json::from_slice(&bytes)?;
        QrfFile {
            magic: file.magic.clone(),
            version: file.version,
            model: QrfModel {
                params: file.model.params.clone(),
                trees: vec![],
            },
        }
        .check()?;
        if let Some(bad) = file.calibrations.iter().find(|c| c.magic != CAL_MAGIC) {
            return Err(
                ForestError::BadCheckpoint(format!("section magic {:?}", bad.magic)).into(),
            );
        }
        Ok(file)
    }

    pub fn from_model(model: QrfModel) -> Self {
        Self {
            magic: QRF_MAGIC.into(),
            version: 1,
            model,
            calibrations: vec![],
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ConformalError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Appends a calibration, replacing an earlier one with the same method.
    pub fn push(&mut self, factor: CalibrationFactor) {
        self.calibrations
            .retain(|c| c.factor.method != factor.method);
        self.calibrations.push(CalSection {
            magic: CAL_MAGIC.into(),
            factor,
        });
    }

    /// The calibration for `method`, or the most recent one.
    pub fn predictor(&self, method: Option<Method>) -> Result<CalibratedPredictor, ConformalError> {
        let section = match method {
            Some(m) => self
                .calibrations
                .iter()
                .rev()
                .find(|c| c.factor.method == m),
            None => self.calibrations.last(),
        }
        .ok_or(ConformalError::MissingCalibration)?;
        Ok(CalibratedPredictor {
            model: self.model.clone(),
            factor: section.factor.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{fit, QrfParams};
    use proptest::prelude::*;
    use SensitiveGroup::*;

    fn pi(lo: f64, hi: f64) -> PredictionInterval {
        PredictionInterval::new(lo, hi).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(conformity_score(&pi(2.0, 5.0), 6.0), 1.0);
        assert_eq!(conformity_score(&pi(2.0, 5.0), 3.0), -1.0);
        assert_eq!(conformity_score(&pi(4.0, 4.0), 4.0), 0.0);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(calibration_quantile(&[0.5, 1.0, 1.5], 0.5).unwrap(), 1.0);
        let tens: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(calibration_quantile(&tens, 0.9).unwrap(), 10.0);
        assert_eq!(
            calibration_quantile(&[1.0, 2.0], 0.9).unwrap(),
            f64::INFINITY
        );
        assert!(matches!(
            calibration_quantile(&[], 0.9),
            Err(ConformalError::EmptyScores)
        ));
    }

    #[test]
    fn widen_examples() {
        assert_eq!(widen(&pi(3.0, 6.0), 1.0), pi(2.0, 7.0));
        assert_eq!(widen(&pi(3.0, 6.0), 0.0), pi(3.0, 6.0));
        // over-covering raw interval collapses to its midpoint
        assert_eq!(widen(&pi(3.0, 6.0), -2.0), PredictionInterval::point(4.5));
        assert_eq!(widen(&pi(3.0, 6.0), -1.5), pi(4.5, 4.5));
    }

    /// Forest whose raw interval is the same everywhere: one leaf over `ys`.
    fn flat_model(ys: &[f64]) -> QrfModel {
        let train: Vec<_> = ys
            .iter()
            .map(|&y| RepairRecord {
                region_id: 0,
                features: vec![0.0; 9],
                group: Middle,
                repair_duration: y,
            })
            .collect();
        fit(
            &train,
            &QrfParams {
                n_trees: 1,
                min_leaf: ys.len(),
                ..QrfParams::default()
            },
        )
        .unwrap()
    }

    fn cal_rec(g: SensitiveGroup, y: f64) -> RepairRecord {
        RepairRecord {
            region_id: 0,
            features: vec![0.0; 9],
            group: g,
            repair_duration: y,
        }
    }

    #[test]
    fn ecqr_per_group_factors() {
        // raw interval at alpha = 0.5 over {1..8}: levels 0.25 / 0.75 -> [2, 6]
        let m = flat_model(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let raw = m
            .predict_interval_raw(&[0.0; 9], &QuantilePair::new(0.5).unwrap())
            .unwrap();
        assert_eq!(raw, pi(2.0, 6.0));
        // Low scores {2,2,2}: y = 8; High scores {0,0,0}: y = 6
        let cal = vec![
            cal_rec(Low, 8.0),
            cal_rec(Low, 8.0),
            cal_rec(Low, 8.0),
            cal_rec(High, 6.0),
            cal_rec(High, 6.0),
            cal_rec(High, 6.0),
        ];
        let f = calibrate(&m, &cal, 0.5, Method::Ecqr).unwrap();
        assert_eq!(f.per_group_q[&Low], 2.0);
        assert_eq!(f.per_group_q[&High], 0.0);
        assert_eq!(f.per_group_n[&Low], 3);
        assert_eq!(
            predict_interval(&m, &f, &[0.0; 9], Low).unwrap(),
            pi(0.0, 8.0)
        );
        assert!(matches!(
            predict_interval(&m, &f, &[0.0; 9], Middle),
            Err(ConformalError::UnknownGroup(Middle))
        ));
    }

    #[test]
    fn single_group_ecqr_equals_cqr() {
        let m = flat_model(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let cal: Vec<_> = [0.5, 9.0, 3.0, 7.5, 2.25, 11.0, 4.0]
            .iter()
            .map(|&y| cal_rec(Low, y))
            .collect();
        let cqr = calibrate(&m, &cal, 0.8, Method::Cqr).unwrap();
        let ecqr = calibrate(&m, &cal, 0.8, Method::Ecqr).unwrap();
        assert_eq!(cqr.global_q.to_bits(), ecqr.per_group_q[&Low].to_bits());
        assert_eq!(
            predict_interval(&m, &cqr, &[0.0; 9], Low).unwrap(),
            predict_interval(&m, &ecqr, &[0.0; 9], Low).unwrap()
        );
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = flat_model(&[1.0, 2.0]);
        assert!(matches!(
            calibrate(&m, &[], 0.9, Method::Ecqr),
            Err(ConformalError::EmptyCalibration)
        ));
    }

    #[test]
    fn cp_is_symmetric_about_midpoint() {
        let m = flat_model(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let cal: Vec<_> = [1.0, 3.0, 4.0, 6.0, 9.0]
            .iter()
            .map(|&y| cal_rec(High, y))
            .collect();
        let f = calibrate(&m, &cal, 0.5, Method::Cp).unwrap();
        // mid of [2,6] = 4; scores {3,1,0,2,5}; rank ceil(0.5*6)=3 -> 2
        assert_eq!(f.global_q, 2.0);
        assert_eq!(
            predict_interval(&m, &f, &[0.0; 9], Low).unwrap(),
            pi(2.0, 6.0)
        );
    }

    #[test]
    fn infinite_factor_covers_everything() {
        let m = flat_model(&[1.0, 2.0, 3.0, 4.0]);
        let cal = vec![cal_rec(Low, 100.0), cal_rec(High, -50.0 + 60.0)];
        let f = calibrate(&m, &cal, 0.9, Method::Ecqr).unwrap();
        assert!(f.per_group_q.values().all(|q| q.is_infinite()));
        assert_eq!(f.warnings().len(), 2);
        let test = vec![cal_rec(Low, 1e6), cal_rec(High, 1e-6)];
        let cov = coverage_by_group(&m, &f, &test).unwrap();
        assert_eq!(cov[&Low], 1.0);
        assert_eq!(cov[&High], 1.0);
    }

    #[test]
    fn boundary_counts_as_covered() {
        let m = flat_model(&[5.0, 5.0, 5.0]);
        let cal = vec![cal_rec(Low, 5.0); 20];
        let f = calibrate(&m, &cal, 0.9, Method::Cqr).unwrap();
        assert_eq!(f.global_q, 0.0);
        let cov = coverage_by_group(&m, &f, &[cal_rec(Low, 5.0)]).unwrap();
        assert_eq!(cov[&Low], 1.0);
    }

    #[test]
    fn factor_json_keeps_infinity() {
        let m = flat_model(&[1.0, 2.0, 3.0, 4.0]);
        let f = calibrate(
            &m,
            &[cal_rec(Low, 2.0), cal_rec(Low, 3.0)],
            0.9,
            Method::Ecqr,
        )
        .unwrap();
        let text = serde_json::to_string(&f).unwrap();
        let back: CalibrationFactor = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("ECQR".parse::<Method>().unwrap(), Method::Ecqr);
        assert!("qr".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn score_sign_matches_membership(lo in -10.0f64..10.0, w in 0.0f64..10.0, y in -25.0f64..25.0) {
            let p = pi(lo, lo + w);
            prop_assert_eq!(conformity_score(&p, y) <= 0.0, p.contains(y));
        }

        #[test]
        fn larger_alpha_never_shrinks(
            ys in proptest::collection::vec(0.5f64..30.0, 20..40),
            base in 0.3f64..0.9,
            a in 0.3f64..0.7,
            delta in 0.0f64..0.25,
        ) {
            let m = flat_model(&ys[..10]);
            let cal: Vec<_> = ys[10..].iter().map(|&y| cal_rec(Middle, y)).collect();
            let qp = QuantilePair::new(base).unwrap();
            for method in Method::ALL {
                let small = calibrate_with_quantiles(&m, &cal, qp, a, method).unwrap();
                let large = calibrate_with_quantiles(&m, &cal, qp, a + delta, method).unwrap();
                let ps = predict_interval(&m, &small, &[0.0; 9], Middle).unwrap();
                let pl = predict_interval(&m, &large, &[0.0; 9], Middle).unwrap();
                prop_assert!(pl.lo <= ps.lo && ps.hi <= pl.hi);
            }
        }
    }
}
