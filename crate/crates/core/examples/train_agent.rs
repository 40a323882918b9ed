//! Trains the constrained attention agent on the twelve-region instance,
//! saves a checkpoint and compares it with nearest-first.
//!
//! ```text
//! cargo run --release --example train_agent -- [seed] [episodes]
//! ```

use equirestore::baselines::GreedyPolicy;
use equirestore::conformal::Method;
use equirestore::datagen::{generate, GeneratorConfig};
use equirestore::eval::{build_instance, evaluate_policy, PolicyFactory};
use equirestore::forest::QrfParams;
use equirestore::simenv::TravelModel;
use equirestore::stasac::{Agent, SelectMode, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);
    let episodes = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3000);

    let data = generate(&GeneratorConfig::compact(seed))?;
    let params = QrfParams {
        n_trees: 50,
        seed,
        ..Default::default()
    };
    let (_, env) = build_instance(
        &data,
        &params,
        Method::Ecqr,
        0.9,
        TravelModel::default(),
        8.0,
    )?;

    let cfg = TrainingConfig {
        total_episodes: episodes,
        seed,
        ..Default::default()
    };
    let mut agent = Agent::new(cfg)?;
    agent.train(&env, |row| {
        if row.cycle % 25 == 0 {
            println!(
                "episodes {:>5}  reward {:8.3}  cost {:6.3}  lambda {:6.3}",
                row.episodes, row.mean_reward, row.mean_cost, row.lambda
            );
        }
    })?;

    let path = std::env::temp_dir().join("agent.stasac");
    agent.save(&path)?;
    let agent = Agent::load(&path)?;
    println!("checkpoint: {}", path.display());

    let learned: &PolicyFactory = &|s| Box::new(agent.policy(&env, SelectMode::Greedy, s));
    let greedy: &PolicyFactory = &|_| Box::new(GreedyPolicy);
    let a = evaluate_policy(&env, learned, 200, 77, 1)?;
    let g = evaluate_policy(&env, greedy, 200, 77, 1)?;
    println!(
        "agent: outage {:.3} h, inequity {:.3} h (bound {:.1})",
        a.avg_outage, a.wd_inequity, env.d_limit
    );
    println!(
        "GM:    outage {:.3} h, inequity {:.3} h",
        g.avg_outage, g.wd_inequity
    );
    Ok(())
}
