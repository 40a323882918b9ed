//! The four-policy comparison table on the 55-region benchmark, with a
//! briefly trained agent.

use equirestore::baselines::{GreedyPolicy, SequencePolicy};
use equirestore::conformal::Method;
use equirestore::datagen::{generate, GeneratorConfig};
use equirestore::eval::{build_instance, compare, PolicyFactory};
use equirestore::forest::QrfParams;
use equirestore::simenv::TravelModel;
use equirestore::stasac::{Agent, SelectMode, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let episodes = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(300);
    let data = generate(&GeneratorConfig::default())?;
    let (_, env) = build_instance(
        &data,
        &QrfParams::default(),
        Method::Ecqr,
        0.9,
        TravelModel::default(),
        8.0,
    )?;

    let mut agent = Agent::new(TrainingConfig {
        total_episodes: episodes,
        ..Default::default()
    })?;
    agent.train(&env, |_| {})?;

    let gt: &PolicyFactory = &|_| Box::new(SequencePolicy::gt(&env, None));
    let gm: &PolicyFactory = &|_| Box::new(GreedyPolicy);
    let tsp: &PolicyFactory = &|_| Box::new(SequencePolicy::tsp_st(&env));
    let sac: &PolicyFactory = &|s| Box::new(agent.policy(&env, SelectMode::Greedy, s));
    let policies = [
        ("GT".to_string(), gt),
        ("GM".to_string(), gm),
        ("TSP-ST".to_string(), tsp),
        ("STA-SAC".to_string(), sac),
    ];
    let table = compare(&env, &policies, 20, &[0, 1, 2], 1, |_, _, _| {})?;
    print!("{}", table.to_text());
    Ok(())
}
