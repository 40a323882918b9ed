//! Generates the synthetic repair history and writes it as two CSV files.
//!
//! ```text
//! cargo run --release --example generate_data -- [seed] [out-dir]
//! ```

use std::path::PathBuf;

use equirestore::datagen::{generate, save_csv, GeneratorConfig, Split};
use equirestore::domain::SensitiveGroup;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));

    let cfg = GeneratorConfig {
        seed,
        ..Default::default()
    };
    let data = generate(&cfg)?;

    println!(
        "{} regions, {} repair records",
        data.regions.len(),
        data.records.len()
    );
    println!(
        "{:<8} {:>8} {:>8} {:>8} {:>14} {:>12}",
        "group", "regions", "records", "test", "mean repair h", "requests"
    );
    for g in [
        SensitiveGroup::Low,
        SensitiveGroup::Middle,
        SensitiveGroup::High,
    ] {
        let regions: Vec<_> = data.regions.iter().filter(|r| r.group == g).collect();
        let records: Vec<f64> = data
            .records
            .iter()
            .filter(|r| r.group == g)
            .map(|r| r.repair_duration)
            .collect();
        let test = data
            .part(Split::Test)
            .iter()
            .filter(|r| r.group == g)
            .count();
        let requests: i64 = regions.iter().map(|r| r.request_count).sum();
        println!(
            "{:<8} {:>8} {:>8} {:>8} {:>14.2} {:>12}",
            g.name(),
            regions.len(),
            records.len(),
            test,
            records.iter().sum::<f64>() / records.len() as f64,
            requests
        );
    }

    std::fs::create_dir_all(&out)?;
    save_csv(&data, &out.join("records.csv"), &out.join("regions.csv"))?;
    println!(
        "wrote {}/records.csv and {}/regions.csv",
        out.display(),
        out.display()
    );
    Ok(())
}
