//! Wasserstein-1 distances between outage-time samples and the resulting
//! inequity score (largest pairwise distance across income groups).

use equirestore::domain::SensitiveGroup::{High, Low, Middle};
use equirestore::metrics::{wasserstein1, wd_inequity, GroupedSamples};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Same shape, shifted by two hours.
    let a = [1.0, 2.0, 3.0];
    let b = [3.0, 4.0, 5.0];
    println!("W1(shifted) = {}", wasserstein1(&a, &b)?);

    // Different sample sizes are fine: the quantile functions are compared.
    let c = [2.0, 2.0, 2.0, 2.0, 2.0];
    println!("W1(a, point mass at 2) = {:.4}", wasserstein1(&a, &c)?);

    let outages = GroupedSamples::from_pairs([
        (Low, 30.0),
        (Low, 42.0),
        (Low, 55.0),
        (Middle, 20.0),
        (Middle, 28.0),
        (High, 8.0),
        (High, 12.0),
        (High, 15.0),
        (High, 19.0),
    ]);
    for (g, xs) in outages.iter() {
        println!("{:<7} {:?}", g.name(), xs);
    }
    println!("inequity = {:.3} h", wd_inequity(&outages)?);
    Ok(())
}
