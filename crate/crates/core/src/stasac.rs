//! Attention-based soft actor-critic with a Lagrange multiplier on the
//! equity cost.
//!
//! The actor encodes the candidate set with a [`SetEncoder`], forms a query
//! from the summary token and the projected crew state, and scores each
//! candidate with an additive attention head. Four critics (two for reward,
//! two for cost) and their Polyak-averaged targets score
//! `(state, candidate)` pairs. Rewards and costs are divided by a running
//! scale before regression; the multiplier is updated in raw hours against
//! the equity bound.

use std::collections::VecDeque;
use std::fs;
use std::io::{Cursor, Read, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EpisodeOutcome, Point, SensitiveGroup};
use crate::nnet::{
    clip_grad_norm, softmax, Dense, EncoderConfig, Graph, Mlp, NnError, Optimizer, OptimizerConfig,
    ParamId, ParamStore, SetEncoder, Tensor, Var,
};
use crate::simenv::{reset, ActionCandidate, EnvConfig, EnvError, EpisodeState, Policy};

pub const STASAC_MAGIC: &[u8; 8] = b"STASAC1\n";
/// Per-candidate feature width.
pub const TOKEN_DIM: usize = 10;
/// Crew-state feature width.
pub const STATE_DIM: usize = 11;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no candidates to choose from")]
    EmptyCandidates,
    #[error("invalid probability distribution")]
    InvalidDistribution,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad agent checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Normalization constants derived from an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScales {
    pub duration: f64,
    pub time: f64,
    pub space: f64,
    pub origin: Point,
    /// Upper bounds above this are clipped (unbounded intervals included).
    pub interval_cap: f64,
}

impl FeatureScales {
    pub fn from_env(cfg: &EnvConfig) -> Self {
        let finite_hi: Vec<f64> = cfg
            .intervals
            .iter()
            .map(|pi| pi.hi)
            .filter(|h| h.is_finite())
            .collect();
        let hist_max = cfg.historical.iter().flatten().copied().fold(0.0, f64::max);
        let cap = 2.0 * finite_hi.iter().copied().fold(hist_max, f64::max);
        let mids: Vec<f64> = cfg
            .intervals
            .iter()
            .map(|pi| 0.5 * (pi.lo.max(0.0) + pi.hi.min(cap)))
            .collect();
        let duration = (mids.iter().sum::<f64>() / mids.len() as f64).max(1e-6);
        let origin = cfg.depot;
        let space = cfg
            .regions
            .iter()
            .map(|r| r.coord.distance(&origin))
            .fold(0.0, f64::max)
            .max(1e-6);
        let n = cfg.n_regions() as f64;
        let time = n * (duration + space / cfg.travel.speed_kmh);
        Self {
            duration,
            time,
            space,
            origin,
            interval_cap: cap,
        }
    }
}

pub fn token_features(c: &ActionCandidate, s: &FeatureScales) -> [f64; TOKEN_DIM] {
    let lo = c.interval.lo.max(0.0).min(s.interval_cap);
    let hi = c.interval.hi.min(s.interval_cap).max(lo);
    let mut g = [0.0; 3];
    g[c.group.index()] = 1.0;
    [
        lo / s.duration,
        hi / s.duration,
        (hi - lo) / s.duration,
        (c.coord.x - s.origin.x) / s.space,
        (c.coord.y - s.origin.y) / s.space,
        c.elapsed / s.time,
        c.distance_km / s.space,
        g[0],
        g[1],
        g[2],
    ]
}

pub fn token_matrix(cands: &[ActionCandidate], s: &FeatureScales) -> Tensor {
    let mut data = Vec::with_capacity(cands.len() * TOKEN_DIM);
    for c in cands {
        data.extend_from_slice(&token_features(c, s));
    }
    Tensor {
        rows: cands.len(),
        cols: TOKEN_DIM,
        data,
    }
}

pub fn state_features(
    state: &EpisodeState,
    cfg: &EnvConfig,
    s: &FeatureScales,
) -> [f64; STATE_DIM] {
    let n = cfg.n_regions();
    let mut size = [0usize; 3];
    let mut left = [0usize; 3];
    let mut done_sum = [0.0; 3];
    let mut done_n = [0usize; 3];
    let mut remaining_work = 0.0;
    for r in &cfg.regions {
        let g = r.group.index();
        size[g] += 1;
        match state.completed_at[r.id] {
            Some(t) => {
                done_sum[g] += t - state.outage_start[r.id];
                done_n[g] += 1;
            }
            None => {
                left[g] += 1;
                let pi = cfg.intervals[r.id];
                remaining_work += 0.5 * (pi.lo.max(0.0) + pi.hi.min(s.interval_cap));
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let avg = |g: usize| {
        if done_n[g] == 0 {
            0.0
        } else {
            done_sum[g] / done_n[g] as f64 / s.time
        }
    };
    [
        state.current_time / s.time,
        (state.current_position.x - s.origin.x) / s.space,
        (state.current_position.y - s.origin.y) / s.space,
        frac(state.remaining(), n),
        frac(left[0], size[0]),
        frac(left[1], size[1]),
        frac(left[2], size[2]),
        avg(0),
        avg(1),
        avg(2),
        remaining_work / s.time,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub state_proj_dim: usize,
    pub score_dim: usize,
    pub critic_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                model_dim: 16,
                n_heads: 2,
                n_layers: 1,
                feedforward_dim: 32,
                input_dim: TOKEN_DIM,
            },
            state_proj_dim: 8,
            score_dim: 16,
            critic_hidden: 64,
        }
    }
}

/// Candidate-scoring policy network.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub store: ParamStore,
    encoder: SetEncoder,
    state_proj: Dense,
    score_w: Dense,
    score_v: ParamId,
}

impl ActorNet {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut store = ParamStore::new();
        let enc_cfg = EncoderConfig {
            input_dim: TOKEN_DIM,
            ..cfg.encoder
        };
        let encoder = SetEncoder::new(&mut store, "actor.encoder", enc_cfg, rng)?;
        let d = enc_cfg.model_dim;
        let state_proj = Dense::new(
            &mut store,
            "actor.state",
            STATE_DIM,
            cfg.state_proj_dim,
            rng,
        );
        let width = d + TOKEN_DIM + d + cfg.state_proj_dim;
        let score_w = Dense::new(&mut store, "actor.score_w", width, cfg.score_dim, rng);
        let score_v = store.add("actor.score_v", Tensor::zeros(cfg.score_dim, 1));
        Ok(Self {
            store,
            encoder,
            state_proj,
            score_w,
            score_v,
        })
    }

    pub fn score_v(&self) -> ParamId {
        self.score_v
    }

    /// Candidate scores as a `1 x n` row.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Var,
        tokens: Var,
    ) -> Result<Var, NnError> {
        let n = g.value(tokens).rows;
        let (cls, per) = self.encoder.encode(g, store, tokens)?;
        let sp = self.state_proj.forward(g, store, state)?;
        let sp = g.tanh(sp);
        let query = g.concat_cols(&[cls, sp])?;
        let key = g.concat_cols(&[per, tokens])?;
        let qrep = g.repeat_rows(query, n)?;
        let kq = g.concat_cols(&[key, qrep])?;
        let h = self.score_w.forward(g, store, kq)?;
        let h = g.tanh(h);
        let v = g.param(store, self.score_v);
        let chi = g.matmul(h, v)?;
        Ok(g.transpose(chi))
    }

    pub fn probabilities(&self, state: &[f64], tokens: &Tensor) -> Result<Vec<f64>, AgentError> {
        if tokens.rows == 0 {
            return Err(AgentError::EmptyCandidates);
        }
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(state.to_vec()));
        let t = g.constant(tokens.clone());
        let l = self.logits(&mut g, &self.store, s, t)?;
        Ok(softmax(&g.value(l).data))
    }
}

/// `(state ⊕ candidate token) -> scalar` value network.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub store: ParamStore,
    mlp: Mlp,
}

impl CriticNet {
    pub fn new(name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            name,
            &[STATE_DIM + TOKEN_DIM, hidden, hidden, 1],
            rng,
        );
        Self { store, mlp }
    }

    /// Values for rows of `[state ⊕ token]`, as an `m x 1` column.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rows: Var) -> Result<Var, NnError> {
        self.mlp.forward(g, store, rows)
    }

    /// Forward pass without building gradients for the caller.
    pub fn eval_with(&self, store: &ParamStore, rows: &Tensor) -> Result<Vec<f64>, NnError> {
        let mut g = Graph::new();
        let x = g.constant(rows.clone());
        let y = self.mlp.forward(&mut g, store, x)?;
        Ok(g.value(y).data.clone())
    }

    pub fn eval(&self, rows: &Tensor) -> Result<Vec<f64>, NnError> {
        self.eval_with(&self.store, rows)
    }
}

/// Rows `[state ⊕ token_i]` for every candidate.
pub fn pair_rows(state: &[f64], tokens: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(tokens.rows * (STATE_DIM + TOKEN_DIM));
    for r in 0..tokens.rows {
        data.extend_from_slice(state);
        data.extend_from_slice(tokens.row_slice(r));
    }
    Tensor {
        rows: tokens.rows,
        cols: state.len() + tokens.cols,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Index drawn from (or maximizing) `probs`; greedy ties go to the lowest
/// index.
pub fn select_action(
    probs: &[f64],
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<usize, AgentError> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(AgentError::InvalidDistribution);
    }
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs
                .iter()
                .rposition(|p| *p > 0.0)
                .unwrap_or(probs.len() - 1))
        }
    }
}

/// Rows `[state ⊕ token]` for every candidate of every set, plus the row
/// offset where each set starts.
fn stacked_pairs<'t>(sets: impl Iterator<Item = (&'t [f64], &'t Tensor)>) -> (Tensor, Vec<usize>) {
    let mut data = Vec::new();
    let mut offsets = Vec::new();
    let mut rows = 0;
    for (state, tokens) in sets {
        offsets.push(rows);
        for r in 0..tokens.rows {
            data.extend_from_slice(state);
            data.extend_from_slice(tokens.row_slice(r));
        }
        rows += tokens.rows;
    }
    (
        Tensor {
            rows,
            cols: STATE_DIM + TOKEN_DIM,
            data,
        },
        offsets,
    )
}

/// `max(0, λ + η (cost − d))`.
pub fn update_lambda(lambda: f64, lr: f64, cost_estimate: f64, d: f64) -> f64 {
    (lambda + lr * (cost_estimate - d)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// One next action drawn from the current policy.
    Sampled,
    /// Expectation over the current policy.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub beta: f64,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub episodes_per_cycle: usize,
    pub updates_per_cycle: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub d_limit: f64,
    pub total_episodes: usize,
    pub grad_clip: f64,
    pub target_mode: TargetMode,
    pub optimizer: OptimizerConfig,
    pub net: NetConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            beta: 0.01,
            lambda_init: 0.0,
            lambda_lr: 0.01,
            tau: 0.05,
            lr_actor: 2e-3,
            lr_critic: 1e-3,
            episodes_per_cycle: 10,
            updates_per_cycle: 8,
            batch_size: 64,
            replay_capacity: 100_000,
            d_limit: 8.0,
            total_episodes: 3000,
            grad_clip: 10.0,
            target_mode: TargetMode::Sampled,
            optimizer: OptimizerConfig::adam(),
            net: NetConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.beta >= 0.0) || !(self.lambda_init >= 0.0) || !(self.lambda_lr >= 0.0) {
            return bad("beta, lambda_init and lambda_lr must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.episodes_per_cycle == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("episodes_per_cycle, batch_size and replay_capacity must be positive");
        }
        if self.d_limit.is_nan() {
            return bad("d_limit must be a number");
        }
        self.net.encoder.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub tokens: Tensor,
    pub action: usize,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub next_tokens: Tensor,
    pub done: bool,
}

/// FIFO replay buffer with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `k` transitions drawn with replacement.
    pub fn sample<'a>(&'a self, k: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        (0..k)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

/// Mean absolute terminal reward seen so far; divides rewards and costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningScale {
    pub sum: f64,
    pub count: u64,
}

impl RunningScale {
    pub fn observe(&mut self, v: f64) {
        self.sum += v.abs();
        self.count += 1;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            1.0
        } else {
            (self.sum / self.count as f64).max(1e-6)
        }
    }
}

impl Default for RunningScale {
    fn default() -> Self {
        Self { sum: 0.0, count: 0 }
    }
}

/// Index of each critic in [`Agent::critics`].
pub const R1: usize = 0;
pub const R2: usize = 1;
pub const C1: usize = 2;
pub const C2: usize = 3;

/// Actor loss for one transition given fixed candidate values.
///
/// `mixed[i] = min_j (Q_rj − λ Q_cj)` at candidate `i`. Returns
/// `Σ_i π_i (β log π_i − mixed_i)`.
pub fn actor_loss_one(
    g: &mut Graph,
    actor: &ActorNet,
    store: &ParamStore,
    state: &[f64],
    tokens: &Tensor,
    mixed: &[f64],
    beta: f64,
) -> Result<Var, NnError> {
    let s = g.constant(Tensor::row(state.to_vec()));
    let t = g.constant(tokens.clone());
    let logits = actor.logits(g, store, s, t)?;
    let logp = g.log_softmax_rows(logits);
    let p = g.exp(logp);
    let blogp = g.scale(logp, beta);
    let q = g.constant(Tensor::row(mixed.to_vec()));
    let inner = g.sub(blogp, q)?;
    let w = g.mul(p, inner)?;
    Ok(g.sum(w))
}

/// Mean squared error of a critic against fixed targets.
pub fn critic_loss(
    g: &mut Graph,
    critic: &CriticNet,
    store: &ParamStore,
    rows: &Tensor,
    targets: &[f64],
) -> Result<Var, NnError> {
    let x = g.constant(rows.clone());
    let q = critic.forward(g, store, x)?;
    let y = g.constant(Tensor {
        rows: targets.len(),
        cols: 1,
        data: targets.to_vec(),
    });
    let d = g.sub(q, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_losses: [f64; 4],
    pub cost_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub cycle: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_cost: f64,
    pub lambda: f64,
    pub actor_loss: f64,
    pub critic_losses: [f64; 4],
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> std::io::Result<()> {
    let mut out = String::from(
        "cycle,episodes,mean_reward,mean_cost,lambda,actor_loss,critic_r1,critic_r2,critic_c1,critic_c2\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.cycle,
            r.episodes,
            r.mean_reward,
            r.mean_cost,
            r.lambda,
            r.actor_loss,
            r.critic_losses[0],
            r.critic_losses[1],
            r.critic_losses[2],
            r.critic_losses[3]
        ));
    }
    fs::write(path, out)
}

/// Actor, four critics with targets, multiplier and training state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: TrainingConfig,
    pub actor: ActorNet,
    pub critics: [CriticNet; 4],
    pub targets: [ParamStore; 4],
    pub lambda: f64,
    pub scale: RunningScale,
    pub episodes_seen: usize,
    rng: ChaCha8Rng,
    actor_opt: Optimizer,
    critic_opts: Vec<Optimizer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    lambda: f64,
    scale: RunningScale,
    episodes_seen: usize,
    config: TrainingConfig,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

impl Agent {
    pub fn new(cfg: TrainingConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = ActorNet::new(&cfg.net, &mut init)?;
        let names = ["critic.r1", "critic.r2", "critic.c1", "critic.c2"];
        let critics = names.map(|n| CriticNet::new(n, cfg.net.critic_hidden, &mut init));
        let targets = [0, 1, 2, 3].map(|i| critics[i].store.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let actor_opt = Optimizer::new(cfg.optimizer, &actor.store);
        let critic_opts = critics
            .iter()
            .map(|c| Optimizer::new(cfg.optimizer, &c.store))
            .collect();
        Ok(Self {
            lambda: cfg.lambda_init,
            cfg,
            actor,
            critics,
            targets,
            scale: RunningScale::default(),
            episodes_seen: 0,
            rng,
            actor_opt,
            critic_opts,
        })
    }

    /// Regression targets `(y_r, y_c)` in normalized units.
    pub fn critic_targets(
        &self,
        batch: &[&Transition],
        rng: &mut impl Rng,
    ) -> Result<Vec<(f64, f64)>, AgentError> {
        let scale = self.scale.value();
        let (gamma, beta) = (self.cfg.gamma, self.cfg.beta);
        let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].done).collect();
        let probs: Vec<Vec<f64>> = live
            .iter()
            .map(|&i| {
                self.actor
                    .probabilities(&batch[i].next_state, &batch[i].next_tokens)
            })
            .collect::<Result<_, _>>()?;
        let (rows, offsets) = stacked_pairs(
            live.iter()
                .map(|&i| (&batch[i].next_state[..], &batch[i].next_tokens)),
        );
        let q = self.eval_critics(
            [
                &self.targets[0],
                &self.targets[1],
                &self.targets[2],
                &self.targets[3],
            ],
            &rows,
        )?;
        let mut out: Vec<(f64, f64)> = batch
            .iter()
            .map(|t| (t.reward / scale, t.cost / scale))
            .collect();
        for (k, &i) in live.iter().enumerate() {
            let p = &probs[k];
            let at = |a: usize| offsets[k] + a;
            let soft = |a: usize| q[R1][at(a)].min(q[R2][at(a)]) - beta * p[a].max(1e-300).ln();
            let cost = |a: usize| q[C1][at(a)].min(q[C2][at(a)]);
            let (vr, vc) = match self.cfg.target_mode {
                TargetMode::Sampled => {
                    let a = select_action(p, SelectMode::Sample, rng)?;
                    (soft(a), cost(a))
                }
                TargetMode::Expected => p.iter().enumerate().fold((0.0, 0.0), |acc, (a, pa)| {
                    (acc.0 + pa * soft(a), acc.1 + pa * cost(a))
                }),
            };
            out[i].0 += gamma * vr;
            out[i].1 += gamma * vc;
        }
        Ok(out)
    }

    fn eval_critics(
        &self,
        stores: [&ParamStore; 4],
        rows: &Tensor,
    ) -> Result<[Vec<f64>; 4], NnError> {
        Ok([
            self.critics[0].eval_with(stores[0], rows)?,
            self.critics[1].eval_with(stores[1], rows)?,
            self.critics[2].eval_with(stores[2], rows)?,
            self.critics[3].eval_with(stores[3], rows)?,
        ])
    }

    fn chosen_rows(batch: &[&Transition]) -> Tensor {
        let mut data = Vec::with_capacity(batch.len() * (STATE_DIM + TOKEN_DIM));
        for t in batch {
            data.extend_from_slice(&t.state);
            data.extend_from_slice(t.tokens.row_slice(t.action));
        }
        Tensor {
            rows: batch.len(),
            cols: STATE_DIM + TOKEN_DIM,
            data,
        }
    }

    /// One critic, actor and multiplier update on a sampled batch.
    pub fn update(&mut self, replay: &ReplayStore) -> Result<UpdateStats, AgentError> {
        let mut rng = self.rng.clone();
        let batch = replay.sample(self.cfg.batch_size.min(replay.len().max(1)), &mut rng);
        let targets = self.critic_targets(&batch, &mut rng)?;
        self.rng = rng;
        let rows = Self::chosen_rows(&batch);

        let mut stats = UpdateStats::default();
        for k in 0..4 {
            let y: Vec<f64> = targets
                .iter()
                .map(|t| if k < C1 { t.0 } else { t.1 })
                .collect();
            let mut g = Graph::new();
            let loss = critic_loss(&mut g, &self.critics[k], &self.critics[k].store, &rows, &y)?;
            stats.critic_losses[k] = g.value(loss).item();
            let mut grads = g.backward(loss)?.for_store(&self.critics[k].store);
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            self.critic_opts[k].step(&mut self.critics[k].store, &grads, self.cfg.lr_critic)?;
        }

        let qc_chosen: Vec<Vec<f64>> = [C1, C2]
            .iter()
            .map(|&k| self.critics[k].eval(&rows))
            .collect::<Result<_, _>>()?;
        let cost_norm = (0..batch.len())
            .map(|i| qc_chosen[0][i].min(qc_chosen[1][i]))
            .sum::<f64>()
            / batch.len() as f64;
        stats.cost_estimate = cost_norm * self.scale.value();

        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batch.len());
        let (pairs, offsets) = stacked_pairs(batch.iter().map(|t| (&t.state[..], &t.tokens)));
        let online = [
            &self.critics[0].store,
            &self.critics[1].store,
            &self.critics[2].store,
            &self.critics[3].store,
        ];
        let q = self.eval_critics(online, &pairs)?;
        for (b, t) in batch.iter().enumerate() {
            let mixed: Vec<f64> = (offsets[b]..offsets[b] + t.tokens.rows)
                .map(|j| self.mix(q[R1][j], q[R2][j], q[C1][j], q[C2][j]))
                .collect();
            terms.push(actor_loss_one(
                &mut g,
                &self.actor,
                &self.actor.store,
                &t.state,
                &t.tokens,
                &mixed,
                self.cfg.beta,
            )?);
        }
        let all = g.concat_cols(&terms)?;
        let loss = g.mean(all);
        stats.actor_loss = g.value(loss).item();
        let mut grads = g.backward(loss)?.for_store(&self.actor.store);
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.actor_opt
            .step(&mut self.actor.store, &grads, self.cfg.lr_actor)?;

        self.lambda = update_lambda(
            self.lambda,
            self.cfg.lambda_lr,
            stats.cost_estimate,
            self.cfg.d_limit,
        );
        for k in 0..4 {
            self.targets[k].polyak_update(&self.critics[k].store, self.cfg.tau)?;
        }
        Ok(stats)
    }

    /// `min_j (Q_rj − λ Q_cj)` for every candidate, from the online critics.
    pub fn mixed_values(&self, state: &[f64], tokens: &Tensor) -> Result<Vec<f64>, AgentError> {
        let rows = pair_rows(state, tokens);
        let q: Vec<Vec<f64>> = (0..4)
            .map(|k| self.critics[k].eval(&rows))
            .collect::<Result<_, _>>()?;
        Ok((0..tokens.rows)
            .map(|i| self.mix(q[R1][i], q[R2][i], q[C1][i], q[C2][i]))
            .collect())
    }

    fn mix(&self, r1: f64, r2: f64, c1: f64, c2: f64) -> f64 {
        (r1 - self.lambda * c1).min(r2 - self.lambda * c2)
    }

    /// Plays one episode with sampled actions, storing its transitions.
    pub fn collect_episode(
        &self,
        env: &EnvConfig,
        scales: &FeatureScales,
        episode_seed: u64,
        action_seed: u64,
        replay: &mut ReplayStore,
    ) -> Result<EpisodeOutcome, AgentError> {
        let mut ep = reset(env, episode_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
        let mut state = state_features(ep.state(), env, scales).to_vec();
        let mut cands = ep.candidates();
        let mut tokens = token_matrix(&cands, scales);
        loop {
            let probs = self.actor.probabilities(&state, &tokens)?;
            let a = select_action(&probs, SelectMode::Sample, &mut rng)?;
            let res = ep.step(cands[a].region_id)?;
            let next_state = state_features(ep.state(), env, scales).to_vec();
            let (next_cands, next_tokens) = if res.done {
                (Vec::new(), Tensor::zeros(0, TOKEN_DIM))
            } else {
                let c = ep.candidates();
                let t = token_matrix(&c, scales);
                (c, t)
            };
            replay.push(Transition {
                state: std::mem::replace(&mut state, next_state.clone()),
                tokens: std::mem::replace(&mut tokens, next_tokens.clone()),
                action: a,
                reward: res.reward,
                cost: res.cost,
                next_state,
                next_tokens,
                done: res.done,
            });
            if res.done {
                break;
            }
            cands = next_cands;
        }
        Ok(ep.outcome()?)
    }

    /// Runs the collect/update loop, calling `on_cycle` after every cycle.
    pub fn train(
        &mut self,
        env: &EnvConfig,
        mut on_cycle: impl FnMut(&CurveRow),
    ) -> Result<Vec<CurveRow>, AgentError> {
        env.validate()?;
        let scales = FeatureScales::from_env(env);
        let mut replay = ReplayStore::new(self.cfg.replay_capacity);
        let mut curves = Vec::new();
        let m = self.cfg.episodes_per_cycle;
        let mut cycle = 0;
        while self.episodes_seen + m <= self.cfg.total_episodes {
            let mut rewards = Vec::with_capacity(m);
            let mut costs = Vec::with_capacity(m);
            for _ in 0..m {
                let idx = self.episodes_seen as u64;
                let ep_seed = self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(idx);
                let act_seed = ep_seed ^ 0x5DEE_CE66_D1CE_4E5B;
                let o = self.collect_episode(env, &scales, ep_seed, act_seed, &mut replay)?;
                self.scale.observe(o.reward);
                rewards.push(o.reward);
                costs.push(o.cost);
                self.episodes_seen += 1;
            }
            let mut sum = UpdateStats::default();
            let updates = self.cfg.updates_per_cycle;
            for _ in 0..updates {
                let s = self.update(&replay)?;
                sum.actor_loss += s.actor_loss / updates as f64;
                for k in 0..4 {
                    sum.critic_losses[k] += s.critic_losses[k] / updates as f64;
                }
            }
            let row = CurveRow {
                cycle,
                episodes: self.episodes_seen,
                mean_reward: rewards.iter().sum::<f64>() / m as f64,
                mean_cost: costs.iter().sum::<f64>() / m as f64,
                lambda: self.lambda,
                actor_loss: sum.actor_loss,
                critic_losses: sum.critic_losses,
            };
            on_cycle(&row);
            curves.push(row);
            cycle += 1;
        }
        Ok(curves)
    }

    /// Policy view for rollouts on `env`.
    pub fn policy<'a>(
        &'a self,
        env: &'a EnvConfig,
        mode: SelectMode,
        seed: u64,
    ) -> AgentPolicy<'a> {
        AgentPolicy {
            actor: &self.actor,
            env,
            scales: FeatureScales::from_env(env),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AgentError> {
        let header = CheckpointHeader {
            version: 1,
            lambda: self.lambda,
            scale: self.scale,
            episodes_seen: self.episodes_seen,
            config: self.cfg.clone(),
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(STASAC_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.actor.store.to_bytes());
        for c in &self.critics {
            out.extend_from_slice(&c.store.to_bytes());
        }
        for t in &self.targets {
            out.extend_from_slice(&t.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AgentError> {
        let bad = |m: &str| AgentError::BadCheckpoint(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != STASAC_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut len = [0u8; 8];
        cur.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        cur.read_exact(&mut json)
            .map_err(|_| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(&json)?;
        if h.version != 1 {
            return Err(bad("unsupported version"));
        }
        let mut agent = Agent::new(h.config)?;
        let mut load = |dst: &mut ParamStore| -> Result<(), AgentError> {
            let s = ParamStore::read_from(&mut cur)?;
            dst.assign(&s)
                .map_err(|_| bad("network layout does not match config"))
        };
        load(&mut agent.actor.store)?;
        for c in agent.critics.iter_mut() {
            load(&mut c.store)?;
        }
        for t in agent.targets.iter_mut() {
            load(t)?;
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        agent.lambda = h.lambda;
        agent.scale = h.scale;
        agent.episodes_seen = h.episodes_seen;
        let seed: [u8; 32] = h.rng_seed.try_into().map_err(|_| bad("rng seed"))?;
        agent.rng = ChaCha8Rng::from_seed(seed);
        agent.rng.set_stream(h.rng_stream);
        agent
            .rng
            .set_word_pos(h.rng_word_pos.parse().map_err(|_| bad("rng position"))?);
        agent.actor_opt = Optimizer::new(agent.cfg.optimizer, &agent.actor.store);
        agent.critic_opts = agent
            .critics
            .iter()
            .map(|c| Optimizer::new(agent.cfg.optimizer, &c.store))
            .collect();
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Trained actor acting in an environment.
pub struct AgentPolicy<'a> {
    actor: &'a ActorNet,
    env: &'a EnvConfig,
    scales: FeatureScales,
    mode: SelectMode,
    rng: ChaCha8Rng,
}

impl Policy for AgentPolicy<'_> {
    fn choose(&mut self, state: &EpisodeState, c: &[ActionCandidate]) -> Result<usize, EnvError> {
        let s = state_features(state, self.env, &self.scales);
        let t = token_matrix(c, &self.scales);
        let probs = self
            .actor
            .probabilities(&s, &t)
            .map_err(|e| EnvError::Policy(e.to_string()))?;
        let i = select_action(&probs, self.mode, &mut self.rng)
            .map_err(|e| EnvError::Policy(e.to_string()))?;
        Ok(c[i].region_id)
    }
}

/// Group of each candidate, for reporting.
pub fn candidate_groups(c: &[ActionCandidate]) -> Vec<SensitiveGroup> {
    c.iter().map(|c| c.group).collect()
}
