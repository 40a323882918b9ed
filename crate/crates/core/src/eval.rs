//! Multi-seed evaluation, comparison tables and prediction reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    calibrate, coverage_by_group, predict_interval, CalibratedPredictor, ConformalError, Method,
};
use crate::datagen::{Dataset, Split};
use crate::domain::{EpisodeOutcome, SensitiveGroup};
use crate::forest::{fit, ForestError, QrfModel, QrfParams};
use crate::metrics::{self, mean_std, GroupedSamples, MetricsError};
use crate::simenv::{rollout, EnvConfig, EnvError, Policy, TravelModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Builds a fresh policy for one episode index.
pub type PolicyFactory<'a> = dyn Fn(u64) -> Box<dyn Policy + 'a> + Sync + 'a;

/// Seed of episode `i` in a run seeded with `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub avg_outage: f64,
    /// Mean of per-episode equity costs.
    pub wd_inequity: f64,
    /// Equity cost of all episodes' samples pooled together.
    pub wd_pooled: f64,
    pub samples: GroupedSamples,
    pub outcomes: Vec<EpisodeOutcome>,
}

/// Runs `n_episodes` seeded rollouts, split across `jobs` threads. The
/// result does not depend on `jobs`.
pub fn evaluate_policy(
    env: &EnvConfig,
    make_policy: &PolicyFactory<'_>,
    n_episodes: usize,
    seed: u64,
    jobs: usize,
) -> Result<EvalResult, EvalError> {
    if n_episodes == 0 {
        return Err(EvalError::Precondition(
            "n_episodes must be at least 1".into(),
        ));
    }
    let run = |i: usize| -> Result<EpisodeOutcome, EnvError> {
        let s = episode_seed(seed, i);
        let mut p = make_policy(s);
        rollout(env, p.as_mut(), s)
    };
    let jobs = jobs.clamp(1, n_episodes);
    let outcomes: Vec<EpisodeOutcome> = if jobs == 1 {
        (0..n_episodes).map(run).collect::<Result<_, _>>()?
    } else {
        let chunk = n_episodes.div_ceil(jobs);
        let parts: Vec<Result<Vec<EpisodeOutcome>, EnvError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let run = &run;
                    sc.spawn(move || {
                        (j * chunk..((j + 1) * chunk).min(n_episodes))
                            .map(run)
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(n_episodes);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    summarize(outcomes)
}

pub fn summarize(outcomes: Vec<EpisodeOutcome>) -> Result<EvalResult, EvalError> {
    let avg_outage = metrics::avg_outage(&outcomes)?;
    let wd_inequity = outcomes.iter().map(|o| o.cost).sum::<f64>() / outcomes.len() as f64;
    let mut samples = GroupedSamples::default();
    for o in &outcomes {
        samples.extend(&o.grouped());
    }
    let wd_pooled = metrics::wd_inequity(&samples).unwrap_or(0.0);
    Ok(EvalResult {
        avg_outage,
        wd_inequity,
        wd_pooled,
        samples,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub outage_mean: f64,
    pub outage_std: f64,
    pub wd_mean: f64,
    pub wd_std: f64,
    pub wd_pooled_mean: f64,
    pub per_seed: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,avg_outage_mean,avg_outage_std,wd_inequity_mean,wd_inequity_std,wd_pooled_mean\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.policy, r.outage_mean, r.outage_std, r.wd_mean, r.wd_std, r.wd_pooled_mean
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>20} {:>20}\n",
            "policy", "avg outage (h)", "WD inequity"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>20} {:>20}",
                r.policy,
                format!("{:.3} ± {:.3}", r.outage_mean, r.outage_std),
                format!("{:.3} ± {:.3}", r.wd_mean, r.wd_std)
            );
        }
        s
    }
}

/// Evaluates every policy on every seed; mean and spread are over seeds.
pub fn compare(
    env: &EnvConfig,
    policies: &[(String, &PolicyFactory<'_>)],
    n_episodes: usize,
    seeds: &[u64],
    jobs: usize,
    mut on_eval: impl FnMut(&str, u64, &EvalResult),
) -> Result<ComparisonTable, EvalError> {
    if policies.len() < 2 {
        return Err(EvalError::Precondition(
            "compare needs at least two policies".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(EvalError::Precondition(
            "compare needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for (name, factory) in policies {
        let mut per_seed = Vec::new();
        let mut pooled = Vec::new();
        for &seed in seeds {
            let r = evaluate_policy(env, *factory, n_episodes, seed, jobs)?;
            on_eval(name, seed, &r);
            per_seed.push((seed, r.avg_outage, r.wd_inequity));
            pooled.push(r.wd_pooled);
        }
        let (om, os) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
        let (wm, ws) = mean_std(&per_seed.iter().map(|p| p.2).collect::<Vec<_>>());
        rows.push(ComparisonRow {
            policy: name.clone(),
            outage_mean: om,
            outage_std: os,
            wd_mean: wm,
            wd_std: ws,
            wd_pooled_mean: mean_std(&pooled).0,
            per_seed,
        });
    }
    Ok(ComparisonTable { rows })
}

/// Per-region outage samples as CSV rows.
pub fn samples_csv(policy: &str, seed: u64, outcomes: &[EpisodeOutcome]) -> String {
    let mut s = String::new();
    for (e, o) in outcomes.iter().enumerate() {
        for (r, (v, g)) in o
            .outage_by_region
            .iter()
            .zip(&o.group_by_region)
            .enumerate()
        {
            let _ = writeln!(s, "{policy},{seed},{e},{r},{g},{v}");
        }
    }
    s
}

pub const SAMPLES_HEADER: &str = "policy,seed,episode,region,group,outage\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub group: SensitiveGroup,
    pub coverage: f64,
    pub mean_length: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub alpha: f64,
    pub rows: Vec<ReportRow>,
}

impl PredictionReport {
    /// Largest minus smallest group coverage for `method`.
    pub fn coverage_gap(&self, method: Method) -> f64 {
        let cov: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.coverage)
            .collect();
        cov.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - cov.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn coverage(&self, method: Method, group: SensitiveGroup) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.group == group)
            .map(|r| r.coverage)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,group,coverage,mean_length,n_test,target\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.method, r.group, r.coverage, r.mean_length, r.n_test, self.alpha
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("target coverage {:.3}\n", self.alpha);
        let _ = writeln!(
            s,
            "{:<6} {:<7} {:>9} {:>12} {:>7}",
            "method", "group", "coverage", "mean length", "n"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:<7} {:>9.3} {:>12.3} {:>7}",
                r.method.name(),
                r.group.name(),
                r.coverage,
                r.mean_length,
                r.n_test
            );
        }
        s
    }
}

/// Per-group coverage and mean width on the test split for each method,
/// using an already fitted forest.
pub fn prediction_report_with(
    model: &QrfModel,
    data: &Dataset,
    methods: &[Method],
    alpha: f64,
) -> Result<PredictionReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Precondition("methods list is empty".into()));
    }
    let cal = data.part(Split::Calibrate);
    let test = data.part(Split::Test);
    if cal.is_empty() || test.is_empty() || data.part(Split::Train).is_empty() {
        return Err(EvalError::Precondition(
            "dataset needs train, calibration and test records".into(),
        ));
    }
    let mut rows = Vec::new();
    for &m in methods {
        let f = calibrate(model, &cal, alpha, m)?;
        let cov = coverage_by_group(model, &f, &test)?;
        let mut widths: BTreeMap<SensitiveGroup, (f64, usize)> = BTreeMap::new();
        for r in &test {
            let pi = predict_interval(model, &f, &r.features, r.group)?;
            let e = widths.entry(r.group).or_default();
            e.0 += pi.width();
            e.1 += 1;
        }
        for (g, c) in cov {
            let (w, n) = widths[&g];
            rows.push(ReportRow {
                method: m,
                group: g,
                coverage: c,
                mean_length: w / n as f64,
                n_test: n,
            });
        }
    }
    Ok(PredictionReport { alpha, rows })
}

/// Fits a forest on the training split, then reports every method.
pub fn prediction_report(
    data: &Dataset,
    methods: &[Method],
    alpha: f64,
    params: &QrfParams,
) -> Result<PredictionReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Precondition("methods list is empty".into()));
    }
    let model = fit(&data.part(Split::Train), params)?;
    prediction_report_with(&model, data, methods, alpha)
}

/// Fits and calibrates a predictor, then builds the restoration instance.
pub fn build_instance(
    data: &Dataset,
    params: &QrfParams,
    method: Method,
    alpha: f64,
    travel: TravelModel,
    d_limit: f64,
) -> Result<(CalibratedPredictor, EnvConfig), EvalError> {
    let model = fit(&data.part(Split::Train), params)?;
    let factor = calibrate(&model, &data.part(Split::Calibrate), alpha, method)?;
    let predictor = CalibratedPredictor { model, factor };
    let env = EnvConfig::from_dataset(data, &predictor, travel, d_limit)?;
    Ok((predictor, env))
}

/// `results/<run-id>/` writer.
#[derive(Debug, Clone)]
pub struct ResultsDir {
    pub path: PathBuf,
}

impl ResultsDir {
    pub fn create(root: &Path, run_id: &str) -> Result<Self, EvalError> {
        let path = root.join(run_id);
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), EvalError> {
        fs::write(self.path.join(name), contents)?;
        Ok(())
    }

    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<(), EvalError> {
        fs::write(
            self.path.join("config.json"),
            serde_json::to_vec_pretty(config)?,
        )?;
        Ok(())
    }
}
