//! Builds a twelve-region restoration instance from calibrated intervals and
//! plays one episode with a random crew, printing the step log.

use equirestore::conformal::Method;
use equirestore::datagen::{generate, GeneratorConfig};
use equirestore::eval::build_instance;
use equirestore::forest::QrfParams;
use equirestore::simenv::{reset, Policy, RandomPolicy, TravelModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate(&GeneratorConfig::compact(1))?;
    let params = QrfParams {
        n_trees: 50,
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

    let mut ep = reset(&env, 42)?;
    let mut crew = RandomPolicy::new(7);
    while !ep.is_done() {
        let candidates = ep.candidates();
        let next = crew.choose(ep.state(), &candidates)?;
        let c = candidates.iter().find(|c| c.region_id == next).unwrap();
        println!(
            "t={:6.2}h  -> region {:>2} ({:<6}) {:5.2} km away, interval [{:.2}, {:.2}]",
            ep.state().current_time,
            next,
            c.group.name(),
            c.distance_km,
            c.interval.lo,
            c.interval.hi
        );
        ep.step(next)?;
    }
    for r in ep.log() {
        println!(
            "step {:>2}: travel {:.3} h, repair {:.3} h, done at {:.3} h",
            r.step, r.travel, r.repair, r.time
        );
    }
    let o = ep.outcome()?;
    println!(
        "mean outage {:.3} h, inequity {:.3} h, makespan {:.3} h",
        o.mean_outage(),
        o.cost,
        o.makespan
    );
    Ok(())
}
