//! Request-volume order, nearest-first and TSP with service times on the
//! 55-region benchmark.

use equirestore::baselines::{
    exact_tour, nearest_neighbor_tour, tour_cost, GreedyPolicy, SequencePolicy,
};
use equirestore::conformal::Method;
use equirestore::datagen::{generate, GeneratorConfig};
use equirestore::eval::{build_instance, evaluate_policy, PolicyFactory};
use equirestore::forest::QrfParams;
use equirestore::simenv::TravelModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate(&GeneratorConfig::default())?;
    let (_, env) = build_instance(
        &data,
        &QrfParams::default(),
        Method::Ecqr,
        0.9,
        TravelModel::default(),
        8.0,
    )?;

    let gt = SequencePolicy::gt(&env, None);
    let tsp = SequencePolicy::tsp_st(&env);
    let mids: Vec<f64> = env.intervals.iter().map(|pi| pi.midpoint()).collect();
    println!(
        "planned tour cost: GT {:.1} h, nearest neighbour {:.1} h, TSP-ST {:.1} h",
        tour_cost(&env, gt.order(), &mids),
        tour_cost(&env, &nearest_neighbor_tour(&env), &mids),
        tour_cost(&env, tsp.order(), &mids)
    );

    let policies: [(&str, &PolicyFactory); 3] = [
        ("GT", &|_| Box::new(SequencePolicy::gt(&env, None))),
        ("GM", &|_| Box::new(GreedyPolicy)),
        ("TSP-ST", &|_| Box::new(SequencePolicy::tsp_st(&env))),
    ];
    for (name, factory) in policies {
        let r = evaluate_policy(&env, factory, 50, 0, 1)?;
        println!(
            "{name:<7} mean outage {:7.2} h   inequity {:7.2} h",
            r.avg_outage, r.wd_inequity
        );
    }

    // Held-Karp is exact but only practical for small instances.
    let small = generate(&GeneratorConfig {
        n_regions: 10,
        ..Default::default()
    })?;
    let (_, small_env) = build_instance(
        &small,
        &QrfParams::default(),
        Method::Ecqr,
        0.9,
        TravelModel::default(),
        8.0,
    )?;
    let zeros = vec![0.0; 10];
    println!(
        "10 regions, travel only: nearest neighbour {:.3} h, optimal {:.3} h",
        tour_cost(&small_env, &nearest_neighbor_tour(&small_env), &zeros),
        tour_cost(&small_env, &exact_tour(&small_env), &zeros)
    );
    Ok(())
}
