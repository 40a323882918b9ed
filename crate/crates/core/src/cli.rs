//! Command-line driver. Every subcommand resolves a [`PipelineConfig`]
//! (defaults, then `--config`, then flags), writes it to
//! `<out>/config.json`, and runs one pipeline stage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{GreedyPolicy, SequencePolicy};
use crate::conformal::{calibrate, CalibratedPredictor, ConformalError, Method, PredictorFile};
use crate::datagen::{self, DataError, Dataset, GeneratorConfig, Split};
use crate::eval::{self, EvalError, PolicyFactory, ResultsDir, SAMPLES_HEADER};
use crate::forest::{fit, ForestError, QrfParams};
use crate::simenv::{EnvConfig, EnvError, TravelModel};
use crate::stasac::{write_curves, Agent, AgentError, SelectMode, TrainingConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::InvalidFractions(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::InvalidParams(_) | ForestError::AlphaOutOfRange(_) => {
                CliError::Config(e.to_string())
            }
            ForestError::BadCheckpoint(_) | ForestError::Json(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ConformalError> for CliError {
    fn from(e: ConformalError) -> Self {
        match e {
            ConformalError::AlphaOutOfRange(_) | ConformalError::UnknownMethod(_) => {
                CliError::Config(e.to_string())
            }
            ConformalError::Forest(f) => f.into(),
            ConformalError::Json(_) | ConformalError::MissingCalibration => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EnvError::Json(_) => CliError::Data(e.to_string()),
            EnvError::Conformal(c) => c.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(_) => CliError::Config(e.to_string()),
            AgentError::BadCheckpoint(_) => CliError::Data(e.to_string()),
            AgentError::Env(env) => env.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Precondition(_) => CliError::Config(e.to_string()),
            EvalError::Env(x) => x.into(),
            EvalError::Forest(x) => x.into(),
            EvalError::Conformal(x) => x.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_episodes: 20,
            seeds: (0..10).collect(),
        }
    }
}

/// Every tunable of the pipeline in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub forest: QrfParams,
    pub method: Method,
    pub alpha: f64,
    pub travel: TravelModel,
    /// Candidate mask radius in km; `null` disables pruning.
    pub prune_max_km: Option<f64>,
    pub training: TrainingConfig,
    pub eval: EvalSettings,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            forest: QrfParams::default(),
            method: Method::Ecqr,
            alpha: 0.9,
            travel: TravelModel::default(),
            prune_max_km: None,
            training: TrainingConfig::default(),
            eval: EvalSettings::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.forest.seed = seed;
        self.training.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check_alpha(self.alpha)?;
        self.generator.validate()?;
        self.training.validate()?;
        if !(self.travel.speed_kmh > 0.0) {
            return Err(CliError::Config("travel.speed_kmh must be positive".into()));
        }
        if self.eval.n_episodes == 0 || self.eval.seeds.is_empty() {
            return Err(CliError::Config(
                "eval needs n_episodes >= 1 and at least one seed".into(),
            ));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!(
            "alpha must lie in the open interval (0,1), got {alpha}"
        )));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "equirestore",
    version,
    about = "Equity-aware power restoration sequencing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON pipeline config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rollout threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding records.csv and regions.csv; generated from the
    /// config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cp,
    Cqr,
    Ecqr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cp => Method::Cp,
            MethodArg::Cqr => Method::Cqr,
            MethodArg::Ecqr => Method::Ecqr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Gt,
    Gm,
    TspSt,
    Stasac,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the quantile forest on the training split.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Calibrate a fitted forest and append the result to its file.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
    },
    /// Per-group coverage and interval length for CP, CQR and ECQR.
    PredictReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
    },
    /// Train the restoration agent.
    TrainAgent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate one policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare GT, GM, TSP-ST and the agent.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    out: ResultsDir,
    jobs: usize,
}

fn context(common: &Common, name: &str) -> Result<Ctx, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    let out_path = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(format!("{name}-seed{}", cfg.seed)));
    let out = ResultsDir {
        path: out_path.clone(),
    };
    fs::create_dir_all(&out.path).map_err(|e| io_err(&out_path, e))?;
    Ok(Ctx {
        cfg,
        out,
        jobs: common.jobs.max(1),
    })
}

fn finish_config(ctx: &Ctx) -> Result<(), CliError> {
    ctx.cfg.validate()?;
    ctx.out.write_config(&ctx.cfg)?;
    Ok(())
}

fn load_or_generate(ctx: &Ctx, data: &DataArgs) -> Result<Dataset, CliError> {
    match &data.data {
        Some(dir) => Ok(datagen::load_csv(
            &dir.join("records.csv"),
            &dir.join("regions.csv"),
        )?),
        None => Ok(datagen::generate(&ctx.cfg.generator)?),
    }
}

fn load_or_fit(
    ctx: &Ctx,
    data: &Dataset,
    predictor: &Option<PathBuf>,
) -> Result<CalibratedPredictor, CliError> {
    if let Some(p) = predictor {
        let file = PredictorFile::load(p)?;
        if let Ok(cp) = file.predictor(Some(ctx.cfg.method)) {
            return Ok(cp);
        }
        let factor = calibrate(
            &file.model,
            &data.part(Split::Calibrate),
            ctx.cfg.alpha,
            ctx.cfg.method,
        )?;
        return Ok(CalibratedPredictor {
            model: file.model,
            factor,
        });
    }
    let model = fit(&data.part(Split::Train), &ctx.cfg.forest)?;
    let factor = calibrate(
        &model,
        &data.part(Split::Calibrate),
        ctx.cfg.alpha,
        ctx.cfg.method,
    )?;
    Ok(CalibratedPredictor { model, factor })
}

fn build_env(
    ctx: &Ctx,
    data: &Dataset,
    predictor: &CalibratedPredictor,
) -> Result<EnvConfig, CliError> {
    let mut env =
        EnvConfig::from_dataset(data, predictor, ctx.cfg.travel, ctx.cfg.training.d_limit)?;
    if let Some(r) = ctx.cfg.prune_max_km {
        env.prune_max_km = r;
        env.validate()?;
    }
    Ok(env)
}

fn train_agent(ctx: &Ctx, env: &EnvConfig) -> Result<Agent, CliError> {
    let mut agent = Agent::new(ctx.cfg.training.clone())?;
    let curves = agent.train(env, |row| {
        if row.cycle % 25 == 0 {
            eprintln!(
                "cycle {:>5}  episodes {:>6}  reward {:>9.3}  cost {:>8.3}  lambda {:.4}",
                row.cycle, row.episodes, row.mean_reward, row.mean_cost, row.lambda
            );
        }
    })?;
    let path = ctx.out.path.join("curves.csv");
    write_curves(&path, &curves).map_err(|e| io_err(&path, e))?;
    let ck = ctx.out.path.join("agent.stasac");
    agent.save(&ck)?;
    Ok(agent)
}

fn load_or_train(
    ctx: &Ctx,
    env: &EnvConfig,
    checkpoint: &Option<PathBuf>,
) -> Result<Agent, CliError> {
    match checkpoint {
        Some(p) => Ok(Agent::load(p)?),
        None => train_agent(ctx, env),
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { common } => {
            let ctx = context(&common, "gen-data")?;
            finish_config(&ctx)?;
            let d = datagen::generate(&ctx.cfg.generator)?;
            datagen::save_csv(
                &d,
                &ctx.out.path.join("records.csv"),
                &ctx.out.path.join("regions.csv"),
            )?;
            println!(
                "wrote {} regions and {} records to {}",
                d.regions.len(),
                d.records.len(),
                ctx.out.path.display()
            );
        }
        Command::TrainPredictor { common, data } => {
            let ctx = context(&common, "train-predictor")?;
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let model = fit(&d.part(Split::Train), &ctx.cfg.forest)?;
            let path = ctx.out.path.join("predictor.json");
            PredictorFile::from_model(model).save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Calibrate {
            common,
            data,
            predictor,
            method,
            alpha,
        } => {
            let mut ctx = context(&common, "calibrate")?;
            if let Some(a) = alpha {
                check_alpha(a)?;
                ctx.cfg.alpha = a;
            }
            if let Some(m) = method {
                ctx.cfg.method = m.into();
            }
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let mut file = PredictorFile::load(&predictor)?;
            let factor = calibrate(
                &file.model,
                &d.part(Split::Calibrate),
                ctx.cfg.alpha,
                ctx.cfg.method,
            )?;
            for w in factor.warnings() {
                eprintln!("warning: {w}");
            }
            file.push(factor);
            file.save(&predictor)?;
            println!(
                "appended {} calibration to {}",
                ctx.cfg.method,
                predictor.display()
            );
        }
        Command::PredictReport {
            common,
            data,
            alpha,
        } => {
            let mut ctx = context(&common, "predict-report")?;
            if let Some(a) = alpha {
                check_alpha(a)?;
                ctx.cfg.alpha = a;
            }
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let report = eval::prediction_report(&d, &Method::ALL, ctx.cfg.alpha, &ctx.cfg.forest)?;
            ctx.out.write("report.csv", &report.to_csv())?;
            ctx.out.write("report.txt", &report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::TrainAgent {
            common,
            data,
            predictor,
            episodes,
        } => {
            let mut ctx = context(&common, "train-agent")?;
            if let Some(e) = episodes {
                ctx.cfg.training.total_episodes = e;
            }
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let p = load_or_fit(&ctx, &d, &predictor)?;
            let env = build_env(&ctx, &d, &p)?;
            env.save(&ctx.out.path.join("instance.json"))?;
            let agent = train_agent(&ctx, &env)?;
            println!(
                "trained on {} episodes, lambda {:.4}; checkpoint in {}",
                agent.episodes_seen,
                agent.lambda,
                ctx.out.path.display()
            );
        }
        Command::Evaluate {
            common,
            data,
            predictor,
            policy,
            checkpoint,
            episodes,
        } => {
            let mut ctx = context(&common, "evaluate")?;
            if let Some(e) = episodes {
                ctx.cfg.eval.n_episodes = e;
            }
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let p = load_or_fit(&ctx, &d, &predictor)?;
            let env = build_env(&ctx, &d, &p)?;
            let agent = match policy {
                PolicyArg::Stasac => Some(load_or_train(&ctx, &env, &checkpoint)?),
                _ => None,
            };
            let (name, factory) = policy_factory(policy, &env, agent.as_ref());
            let table = eval::compare(
                &env,
                &[(name.clone(), &*factory), (name, &*factory)],
                ctx.cfg.eval.n_episodes,
                &ctx.cfg.eval.seeds,
                ctx.jobs,
                |_, _, _| {},
            )?;
            let single = eval::ComparisonTable {
                rows: table.rows[..1].to_vec(),
            };
            ctx.out.write("table.csv", &single.to_csv())?;
            ctx.out.write("table.txt", &single.to_text())?;
            print!("{}", single.to_text());
        }
        Command::Compare {
            common,
            data,
            predictor,
            checkpoint,
            episodes,
        } => {
            let mut ctx = context(&common, "compare")?;
            if let Some(e) = episodes {
                ctx.cfg.eval.n_episodes = e;
            }
            finish_config(&ctx)?;
            let d = load_or_generate(&ctx, &data)?;
            let p = load_or_fit(&ctx, &d, &predictor)?;
            let env = build_env(&ctx, &d, &p)?;
            let agent = load_or_train(&ctx, &env, &checkpoint)?;
            let built: Vec<(String, Box<PolicyFactory>)> = [
                PolicyArg::Gt,
                PolicyArg::Gm,
                PolicyArg::TspSt,
                PolicyArg::Stasac,
            ]
            .into_iter()
            .map(|k| policy_factory(k, &env, Some(&agent)))
            .collect();
            let refs: Vec<(String, &PolicyFactory)> =
                built.iter().map(|(n, f)| (n.clone(), &**f)).collect();
            let mut samples = String::from(SAMPLES_HEADER);
            let table = eval::compare(
                &env,
                &refs,
                ctx.cfg.eval.n_episodes,
                &ctx.cfg.eval.seeds,
                ctx.jobs,
                |n, s, r| {
                    samples.push_str(&eval::samples_csv(n, s, &r.outcomes));
                },
            )?;
            ctx.out.write("table.csv", &table.to_csv())?;
            ctx.out.write("table.txt", &table.to_text())?;
            ctx.out.write("samples.csv", &samples)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn policy_factory<'a>(
    kind: PolicyArg,
    env: &'a EnvConfig,
    agent: Option<&'a Agent>,
) -> (String, Box<PolicyFactory<'a>>) {
    match kind {
        PolicyArg::Gt => {
            let p = SequencePolicy::gt(env, None);
            ("GT".into(), Box::new(move |_| Box::new(p.clone())))
        }
        PolicyArg::Gm => ("GM".into(), Box::new(|_| Box::new(GreedyPolicy))),
        PolicyArg::TspSt => {
            let p = SequencePolicy::tsp_st(env);
            ("TSP-ST".into(), Box::new(move |_| Box::new(p.clone())))
        }
        PolicyArg::Stasac => {
            let agent = agent.expect("agent required for the stasac policy");
            (
                "STA-SAC".into(),
                Box::new(move |s| Box::new(agent.policy(env, SelectMode::Greedy, s))),
            )
        }
    }
}
