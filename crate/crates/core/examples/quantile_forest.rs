//! Fits a quantile regression forest and shows how the predicted repair-time
//! spread differs between income groups.

use equirestore::datagen::{generate, GeneratorConfig, Split};
use equirestore::forest::{fit, QrfParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate(&GeneratorConfig::default())?;
    let model = fit(&data.part(Split::Train), &QrfParams::default())?;

    println!(
        "{:>6} {:<7} {:>7} {:>7} {:>7} {:>7}",
        "region", "group", "q05", "q50", "q95", "width"
    );
    for region in data.regions.iter().take(12) {
        let q = |a| model.predict_quantile(&region.features, a);
        let (lo, mid, hi) = (q(0.05)?, q(0.5)?, q(0.95)?);
        println!(
            "{:>6} {:<7} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            region.id,
            region.group.name(),
            lo,
            mid,
            hi,
            hi - lo
        );
    }

    // The whole conditional distribution is available, not just two quantiles.
    let first = &data.regions[0];
    let dist = model.conditional(&first.features)?;
    let deciles: Vec<String> = (1..10)
        .map(|k| dist.quantile(k as f64 / 10.0).map(|v| format!("{v:.1}")))
        .collect::<Result<_, _>>()?;
    println!("region {} deciles: {}", first.id, deciles.join(" "));
    Ok(())
}
