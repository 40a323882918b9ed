//! Seeded statistical checks for the forest and the conformal calibration.

use std::collections::BTreeMap;

use equirestore::conformal::{calibrate, coverage_by_group, Method};
use equirestore::datagen::{generate, DurationSurface, GeneratorConfig, Split};
use equirestore::domain::{RepairRecord, SensitiveGroup};
use equirestore::forest::{fit, QrfParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const Z95: f64 = 1.6448536269514722;

#[test]
fn forest_quantiles_bracket_the_noise_band() {
    let cfg = GeneratorConfig {
        n_regions: 30,
        samples_per_region_by_group: [400, 400, 400],
        base_duration_range: (30.0, 50.0),
        seed: 11,
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let model = fit(
        &data.records,
        &QrfParams {
            n_trees: 60,
            min_leaf: 5,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let surface = DurationSurface::from_seed(cfg.seed, cfg.base_duration_range);

    let mut within = 0;
    let mut total = 0;
    for r in &data.regions {
        let g = surface.eval(&r.features);
        let sigma = cfg.noise_scale_by_group[r.group.index()];
        let half = Z95 * sigma;
        for (alpha, truth) in [(0.05, g - half), (0.95, g + half)] {
            let q = model.predict_quantile(&r.features, alpha).unwrap();
            within += usize::from((q - truth).abs() <= 0.15 * half);
            total += 1;
        }
    }
    let frac = within as f64 / total as f64;
    assert!(
        frac >= 0.9,
        "only {within}/{total} quantiles within 15% of the true band"
    );
}

#[test]
fn ecqr_coverage_holds_over_resplits() {
    let alpha = 0.9;
    let data = generate(&GeneratorConfig {
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let model = fit(
        &data.part(Split::Train),
        &QrfParams {
            n_trees: 60,
            ..Default::default()
        },
    )
    .unwrap();

    let mut pool: BTreeMap<SensitiveGroup, Vec<RepairRecord>> = BTreeMap::new();
    for r in data
        .part(Split::Calibrate)
        .into_iter()
        .chain(data.part(Split::Test))
    {
        pool.entry(r.group).or_default().push(r);
    }

    let trials = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sums: BTreeMap<SensitiveGroup, f64> = BTreeMap::new();
    let mut n_test: BTreeMap<SensitiveGroup, usize> = BTreeMap::new();
    for _ in 0..trials {
        let mut cal = Vec::new();
        let mut test = Vec::new();
        for (g, recs) in &pool {
            let mut recs = recs.clone();
            recs.shuffle(&mut rng);
            let half = recs.len() / 2;
            n_test.insert(*g, recs.len() - half);
            test.extend_from_slice(&recs[half..]);
            cal.extend(recs.into_iter().take(half));
        }
        let f = calibrate(&model, &cal, alpha, Method::Ecqr).unwrap();
        for (g, c) in coverage_by_group(&model, &f, &test).unwrap() {
            *sums.entry(g).or_default() += c;
        }
    }
    for (g, s) in sums {
        let mean = s / trials as f64;
        let floor = alpha - 2.0 / ((trials * n_test[&g]) as f64).sqrt();
        assert!(
            mean >= floor,
            "{g}: mean coverage {mean:.4} below {floor:.4}"
        );
    }
}

#[test]
fn cqr_misses_the_noisy_group_more_than_ecqr() {
    // Pooled calibration under-covers the high-noise group on average;
    // per-group calibration removes that bias.
    let mut cqr_low = 0.0;
    let mut ecqr_low = 0.0;
    let seeds = 6;
    for seed in 0..seeds {
        let data = generate(&GeneratorConfig {
            seed,
            samples_per_region_by_group: [30, 30, 30],
            ..Default::default()
        })
        .unwrap();
        let model = fit(
            &data.part(Split::Train),
            &QrfParams {
                n_trees: 60,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let cal = data.part(Split::Calibrate);
        let test = data.part(Split::Test);
        let c = calibrate(&model, &cal, 0.9, Method::Cqr).unwrap();
        let e = calibrate(&model, &cal, 0.9, Method::Ecqr).unwrap();
        cqr_low += coverage_by_group(&model, &c, &test).unwrap()[&SensitiveGroup::Low];
        ecqr_low += coverage_by_group(&model, &e, &test).unwrap()[&SensitiveGroup::Low];
    }
    let (cqr_low, ecqr_low) = (cqr_low / seeds as f64, ecqr_low / seeds as f64);
    assert!(
        cqr_low < ecqr_low,
        "CQR low-group coverage {cqr_low:.3} vs ECQR {ecqr_low:.3}"
    );
    assert!(ecqr_low >= 0.87, "ECQR low-group coverage {ecqr_low:.3}");
}
