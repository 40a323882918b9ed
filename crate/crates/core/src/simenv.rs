//! Single-crew restoration simulator.
//!
//! Every region loses power at t = 0. The crew starts at the depot, drives
//! to a chosen region, repairs it, and moves on. A region's outage lasts
//! until its repair completes, so it accumulates every earlier travel leg
//! and repair plus its own leg and repair. Reward and equity cost are paid
//! once, on the step that repairs the last region.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{CalibratedPredictor, ConformalError};
use crate::datagen::Dataset;
use crate::domain::{
    episode_cost, DomainError, EpisodeOutcome, Point, PredictionInterval, Region, SensitiveGroup,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("region {0} is already repaired")]
    AlreadyRepaired(usize),
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("episode is already finished")]
    EpisodeFinished,
    #[error("policy failed: {0}")]
    Policy(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Straight-line travel at constant speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelModel {
    pub speed_kmh: f64,
}

impl Default for TravelModel {
    fn default() -> Self {
        Self { speed_kmh: 30.0 }
    }
}

impl TravelModel {
    pub fn travel_time(&self, a: &Point, b: &Point) -> f64 {
        a.distance(b) / self.speed_kmh
    }
}

fn inf_default() -> f64 {
    f64::INFINITY
}

mod opt_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Everything needed to play episodes on one instance.
///
/// `intervals` is what the agent sees about each region's repair time;
/// `historical` is what the simulator draws the hidden durations from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub regions: Vec<Region>,
    pub historical: Vec<Vec<f64>>,
    pub intervals: Vec<PredictionInterval>,
    pub travel: TravelModel,
    /// Candidates farther than this are masked; `null` in JSON means no limit.
    #[serde(with = "opt_inf", default = "inf_default")]
    pub prune_max_km: f64,
    pub d_limit: f64,
    pub depot: Point,
}

impl EnvConfig {
    /// Builds an instance from a dataset, drawing hidden durations from all
    /// historical records and showing the agent calibrated intervals.
    pub fn from_dataset(
        data: &Dataset,
        predictor: &CalibratedPredictor,
        travel: TravelModel,
        d_limit: f64,
    ) -> Result<Self, EnvError> {
        let intervals = data
            .regions
            .iter()
            .map(|r| predictor.interval(&r.features, r.group))
            .collect::<Result<Vec<_>, _>>()?;
        Self::with_intervals(data, intervals, travel, d_limit)
    }

    pub fn with_intervals(
        data: &Dataset,
        intervals: Vec<PredictionInterval>,
        travel: TravelModel,
        d_limit: f64,
    ) -> Result<Self, EnvError> {
        let cfg = Self {
            depot: centroid(&data.regions),
            regions: data.regions.clone(),
            historical: data.durations_by_region(),
            intervals,
            travel,
            prune_max_km: f64::INFINITY,
            d_limit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn groups(&self) -> Vec<SensitiveGroup> {
        self.regions.iter().map(|r| r.group).collect()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        let n = self.regions.len();
        if n == 0 {
            return bad("no regions".into());
        }
        if self.historical.len() != n || self.intervals.len() != n {
            return bad(format!(
                "{n} regions but {} sample lists and {} intervals",
                self.historical.len(),
                self.intervals.len()
            ));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.id != i {
                return bad(format!("region ids must be 0..{n}, found {} at {i}", r.id));
            }
            if self.historical[i].is_empty() {
                return bad(format!("region {i} has no historical repair samples"));
            }
            if self.historical[i]
                .iter()
                .any(|v| !(*v > 0.0 && v.is_finite()))
            {
                return bad(format!("region {i} has a non-positive repair sample"));
            }
        }
        if !(self.travel.speed_kmh > 0.0 && self.travel.speed_kmh.is_finite()) {
            return bad("travel speed must be positive".into());
        }
        if !(self.prune_max_km > 0.0) {
            return bad("prune_max_km must be positive".into());
        }
        if self.d_limit.is_nan() || self.d_limit < 0.0 {
            return bad("d_limit must be non-negative".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let cfg: EnvConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn centroid(regions: &[Region]) -> Point {
    let n = regions.len().max(1) as f64;
    Point::new(
        regions.iter().map(|r| r.coord.x).sum::<f64>() / n,
        regions.iter().map(|r| r.coord.y).sum::<f64>() / n,
    )
}

/// What the crew knows at a decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub current_position: Point,
    pub current_time: f64,
    pub current_region: Option<usize>,
    pub repaired: Vec<bool>,
    pub outage_start: Vec<f64>,
    /// Completion time of each repaired region, `None` while still dark.
    pub completed_at: Vec<Option<f64>>,
    pub steps: usize,
}

impl EpisodeState {
    pub fn remaining(&self) -> usize {
        self.repaired.len() - self.steps
    }

    pub fn is_done(&self) -> bool {
        self.steps == self.repaired.len()
    }
}

/// One selectable region as presented to a policy. Carries the prediction
/// interval, never the sampled duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCandidate {
    pub region_id: usize,
    pub interval: PredictionInterval,
    pub coord: Point,
    /// Hours the region has been without power.
    pub elapsed: f64,
    pub distance_km: f64,
    pub group: SensitiveGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Completion time of this repair.
    pub time: f64,
    pub chosen: usize,
    pub travel: f64,
    pub repair: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

/// A running episode: public state plus the hidden repair durations.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    cfg: &'a EnvConfig,
    state: EpisodeState,
    durations: Vec<f64>,
    sequence: Vec<usize>,
    log: Vec<StepRecord>,
}

/// Starts an episode, drawing one duration per region uniformly from its
/// historical samples.
pub fn reset(cfg: &EnvConfig, episode_seed: u64) -> Result<Episode<'_>, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let durations = cfg
        .historical
        .iter()
        .map(|h| h[rng.gen_range(0..h.len())])
        .collect();
    Ok(Episode::start(cfg, durations))
}

impl<'a> Episode<'a> {
    /// Starts an episode with known durations (replay and testing).
    pub fn with_durations(cfg: &'a EnvConfig, durations: Vec<f64>) -> Result<Self, EnvError> {
        cfg.validate()?;
        if durations.len() != cfg.n_regions() {
            return Err(EnvError::InvalidConfig(format!(
                "{} durations for {} regions",
                durations.len(),
                cfg.n_regions()
            )));
        }
        if let Some(d) = durations.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(DomainError::NonPositiveDuration(*d).into());
        }
        Ok(Self::start(cfg, durations))
    }

    fn start(cfg: &'a EnvConfig, durations: Vec<f64>) -> Self {
        let n = cfg.n_regions();
        Self {
            cfg,
            state: EpisodeState {
                current_position: cfg.depot,
                current_time: 0.0,
                current_region: None,
                repaired: vec![false; n],
                outage_start: vec![0.0; n],
                completed_at: vec![None; n],
                steps: 0,
            },
            durations,
            sequence: Vec::with_capacity(n),
            log: Vec::with_capacity(n),
        }
    }

    pub fn config(&self) -> &'a EnvConfig {
        self.cfg
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Unrepaired regions within `prune_max_km`; falls back to the nearest
    /// unrepaired region when the mask would remove all of them.
    pub fn candidates(&self) -> Vec<ActionCandidate> {
        let s = &self.state;
        let all: Vec<ActionCandidate> = self
            .cfg
            .regions
            .iter()
            .filter(|r| !s.repaired[r.id])
            .map(|r| ActionCandidate {
                region_id: r.id,
                interval: self.cfg.intervals[r.id],
                coord: r.coord,
                elapsed: s.current_time - s.outage_start[r.id],
                distance_km: s.current_position.distance(&r.coord),
                group: r.group,
            })
            .collect();
        if self.cfg.prune_max_km.is_infinite() {
            return all;
        }
        let within: Vec<ActionCandidate> = all
            .iter()
            .filter(|c| c.distance_km <= self.cfg.prune_max_km)
            .cloned()
            .collect();
        if !within.is_empty() {
            return within;
        }
        all.into_iter()
            .min_by(|a, b| {
                a.distance_km
                    .total_cmp(&b.distance_km)
                    .then(a.region_id.cmp(&b.region_id))
            })
            .into_iter()
            .collect()
    }

    pub fn step(&mut self, chosen: usize) -> Result<StepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let region = self
            .cfg
            .regions
            .get(chosen)
            .ok_or(EnvError::UnknownRegion(chosen))?;
        if self.state.repaired[chosen] {
            return Err(EnvError::AlreadyRepaired(chosen));
        }
        let travel = self
            .cfg
            .travel
            .travel_time(&self.state.current_position, &region.coord);
        let repair = self.durations[chosen];
        let s = &mut self.state;
        s.current_time += travel;
        s.current_time += repair;
        s.current_position = region.coord;
        s.current_region = Some(chosen);
        s.repaired[chosen] = true;
        s.completed_at[chosen] = Some(s.current_time);
        s.steps += 1;
        self.sequence.push(chosen);
        self.log.push(StepRecord {
            step: s.steps - 1,
            time: s.current_time,
            chosen,
            travel,
            repair,
        });
        if !s.is_done() {
            return Ok(StepResult {
                reward: 0.0,
                cost: 0.0,
                done: false,
            });
        }
        let outages = self.outages();
        let groups = self.cfg.groups();
        Ok(StepResult {
            reward: -crate::domain::mean(&outages),
            cost: episode_cost(&outages, &groups),
            done: true,
        })
    }

    fn outages(&self) -> Vec<f64> {
        self.state
            .completed_at
            .iter()
            .zip(&self.state.outage_start)
            .map(|(c, s)| c.map_or(f64::NAN, |c| c - s))
            .collect()
    }

    /// Summary of a finished episode.
    pub fn outcome(&self) -> Result<EpisodeOutcome, EnvError> {
        if !self.is_done() {
            return Err(EnvError::Policy("episode not finished".into()));
        }
        let makespan = self.log.iter().map(|r| r.travel + r.repair).sum();
        Ok(EpisodeOutcome::new(
            self.outages(),
            self.cfg.groups(),
            self.sequence.clone(),
            makespan,
        )?)
    }
}

/// Chooses the next region to repair.
pub trait Policy {
    fn choose(
        &mut self,
        state: &EpisodeState,
        candidates: &[ActionCandidate],
    ) -> Result<usize, EnvError>;
}

impl<F> Policy for F
where
    F: FnMut(&EpisodeState, &[ActionCandidate]) -> usize,
{
    fn choose(
        &mut self,
        state: &EpisodeState,
        candidates: &[ActionCandidate],
    ) -> Result<usize, EnvError> {
        Ok(self(state, candidates))
    }
}

/// Uniformly random choice among the candidates.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn choose(&mut self, _: &EpisodeState, c: &[ActionCandidate]) -> Result<usize, EnvError> {
        Ok(c[self.rng.gen_range(0..c.len())].region_id)
    }
}

/// Plays a full episode and returns the outcome with its step log.
pub fn rollout_logged(
    cfg: &EnvConfig,
    policy: &mut dyn Policy,
    episode_seed: u64,
) -> Result<(EpisodeOutcome, Vec<StepRecord>), EnvError> {
    let mut ep = reset(cfg, episode_seed)?;
    play(&mut ep, policy)?;
    Ok((ep.outcome()?, ep.log))
}

pub fn rollout(
    cfg: &EnvConfig,
    policy: &mut dyn Policy,
    episode_seed: u64,
) -> Result<EpisodeOutcome, EnvError> {
    rollout_logged(cfg, policy, episode_seed).map(|(o, _)| o)
}

/// Drives an already-started episode to completion.
pub fn play(ep: &mut Episode<'_>, policy: &mut dyn Policy) -> Result<(), EnvError> {
    while !ep.is_done() {
        let cands = ep.candidates();
        let choice = policy.choose(ep.state(), &cands)?;
        ep.step(choice)?;
    }
    Ok(())
}

/// Writes step records as JSON lines.
pub fn write_log(path: &Path, records: &[StepRecord]) -> Result<(), EnvError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>, EnvError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(EnvError::from))
        .collect()
}
