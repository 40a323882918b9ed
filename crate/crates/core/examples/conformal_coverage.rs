//! Compares split conformal, CQR and group-wise ECQR intervals: per-group
//! test coverage and mean width at 90% target coverage.

use equirestore::conformal::Method;
use equirestore::datagen::{generate, GeneratorConfig};
use equirestore::eval::prediction_report;
use equirestore::forest::QrfParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(5);
    let methods = [Method::Cp, Method::Cqr, Method::Ecqr];

    for seed in 0..seeds {
        let data = generate(&GeneratorConfig {
            seed,
            ..Default::default()
        })?;
        let report = prediction_report(
            &data,
            &methods,
            0.9,
            &QrfParams {
                seed,
                ..Default::default()
            },
        )?;
        if seed == 0 {
            print!("{}", report.to_text());
            println!();
            println!(
                "{:>4} {:>10} {:>10} {:>10}",
                "seed", "CP gap", "CQR gap", "ECQR gap"
            );
        }
        println!(
            "{:>4} {:>10.3} {:>10.3} {:>10.3}",
            seed,
            report.coverage_gap(Method::Cp),
            report.coverage_gap(Method::Cqr),
            report.coverage_gap(Method::Ecqr)
        );
    }
    Ok(())
}
