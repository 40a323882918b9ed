//! Seeded synthetic outage data plus CSV persistence.
//!
//! The generator reproduces three qualitative properties of real post-storm
//! repair logs: repair-time noise whose spread depends on the income tier,
//! fewer historical records for low-income regions, and request volumes that
//! rise with income.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, Point, Region, RepairRecord, SensitiveGroup, FEATURE_DIM};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("group {group} has only {count} records, need at least 3 to split")]
    GroupTooSmall { group: SensitiveGroup, count: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing columns {missing:?}")]
    Schema { path: String, missing: Vec<String> },
    #[error("record references unknown region {0}")]
    UnknownRegion(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-group table, indexed by `SensitiveGroup::index`.
pub type PerGroup<T> = [T; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_regions: usize,
    pub samples_per_region_by_group: PerGroup<usize>,
    /// Standard deviation of the repair-time noise, hours.
    pub noise_scale_by_group: PerGroup<f64>,
    /// Range of the noise-free repair time `g(x)`, hours.
    pub base_duration_range: (f64, f64),
    /// Mean of the Poisson request count.
    pub request_rate_by_group: PerGroup<f64>,
    pub city_extent_km: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_regions: 55,
            samples_per_region_by_group: [8, 20, 40],
            noise_scale_by_group: [6.0, 3.0, 1.5],
            base_duration_range: (4.0, 24.0),
            request_rate_by_group: [4.0, 9.0, 16.0],
            city_extent_km: 20.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Twelve regions in a 10 km city with repairs of 0.5 to 2.5 hours.
    ///
    /// Small enough to train an agent on one core in about a minute, and
    /// scaled so that an 8 hour inequity bound is reachable.
    pub fn compact(seed: u64) -> Self {
        Self {
            n_regions: 12,
            samples_per_region_by_group: [40, 60, 80],
            noise_scale_by_group: [0.6, 0.3, 0.15],
            base_duration_range: (0.5, 2.5),
            city_extent_km: 10.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_regions < 2 {
            return bad("n_regions must be at least 2");
        }
        if self.n_regions < 3 {
            return bad("every income group needs at least one region (n_regions >= 3)");
        }
        if self.samples_per_region_by_group.contains(&0) {
            return bad("samples per region must be positive");
        }
        if self
            .noise_scale_by_group
            .iter()
            .chain(self.request_rate_by_group.iter())
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return bad("noise scales and request rates must be positive");
        }
        let (lo, hi) = self.base_duration_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("base_duration_range must satisfy 0 < lo < hi");
        }
        if !(self.city_extent_km > 0.0 && self.city_extent_km.is_finite()) {
            return bad("city_extent_km must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Calibrate,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibrate => "cal",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "cal" => Some(Split::Calibrate),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub regions: Vec<Region>,
    pub records: Vec<RepairRecord>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn part(&self, which: Split) -> Vec<RepairRecord> {
        self.records
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(r, _)| r.clone())
            .collect()
    }

    /// Historical durations per region, indexed by region id.
    pub fn durations_by_region(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.regions.len()];
        for r in &self.records {
            out[r.region_id].push(r.repair_duration);
        }
        out
    }
}

/// The noise-free repair-time surface `g(x)`: an affine score squashed by a
/// logistic curve onto `base_duration_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationSurface {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub range: (f64, f64),
}

impl DurationSurface {
    pub fn from_seed(seed: u64, range: (f64, f64)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_9a7e);
        let weights: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // centre the score over the unit cube so the range is used evenly
        let bias = -0.5 * weights.iter().sum::<f64>();
        Self {
            weights,
            bias,
            range,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let score: f64 = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        let s = 1.0 / (1.0 + (-score).exp());
        self.range.0 + (self.range.1 - self.range.0) * s
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let surface = DurationSurface::from_seed(cfg.seed, cfg.base_duration_range);
    let n = cfg.n_regions;
    let extent = cfg.city_extent_km;

    let coords: Vec<Point> = (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))
        .collect();

    // Income rises from west to east with local scatter; tertiles of the
    // score give balanced, spatially clustered groups.
    let scatter = Normal::new(0.0, 0.25).expect("valid normal");
    let wealth: Vec<f64> = coords
        .iter()
        .map(|p| p.x / extent + scatter.sample(&mut rng))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| wealth[a].total_cmp(&wealth[b]).then(a.cmp(&b)));
    let mut groups = vec![SensitiveGroup::Low; n];
    for (rank, &id) in order.iter().enumerate() {
        groups[id] = SensitiveGroup::from_index(rank * 3 / n).expect("rank < n");
    }

    let mut regions = Vec::with_capacity(n);
    for id in 0..n {
        let mut features = Vec::with_capacity(FEATURE_DIM);
        features.push(coords[id].x / extent);
        features.push(coords[id].y / extent);
        for _ in 2..FEATURE_DIM {
            features.push(rng.gen_range(0.0..1.0));
        }
        let g = groups[id];
        let rate = cfg.request_rate_by_group[g.index()];
        let count = Poisson::new(rate).expect("positive rate").sample(&mut rng) as i64;
        regions.push(Region {
            id,
            coord: coords[id],
            features,
            group: g,
            request_count: count,
        });
    }

    let mut records = Vec::new();
    for region in &regions {
        let gi = region.group.index();
        let base = surface.eval(&region.features);
        let noise = Normal::new(0.0, cfg.noise_scale_by_group[gi]).expect("positive scale");
        for _ in 0..cfg.samples_per_region_by_group[gi] {
            // resample rather than clip so the lower tail keeps its shape
            let y = loop {
                let y = base + noise.sample(&mut rng);
                if y > 0.0 {
                    break y;
                }
            };
            records.push(RepairRecord {
                region_id: region.id,
                features: region.features.clone(),
                group: region.group,
                repair_duration: y,
            });
        }
    }

    let unsplit = Dataset {
        split: vec![Split::Train; records.len()],
        regions,
        records,
    };
    split(unsplit, DEFAULT_FRACTIONS, cfg.seed.wrapping_add(1))
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.5, 0.25, 0.25);

/// Stratified train/calibrate/test assignment.
pub fn split(mut d: Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset, DataError> {
    let (ft, fc, fs) = fractions;
    if !(ft > 0.0 && fc > 0.0 && fs > 0.0) || ((ft + fc + fs) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![Split::Train; d.records.len()];
    for g in SensitiveGroup::ALL {
        let mut idx: Vec<usize> = (0..d.records.len())
            .filter(|&i| d.records[i].group == g)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(DataError::GroupTooSmall {
                group: g,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((ft * n as f64).round() as usize).clamp(1, n - 2);
        let n_cal = ((fc * n as f64).round() as usize).clamp(1, n - n_train - 1);
        for (k, &i) in idx.iter().enumerate() {
            labels[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_cal {
                Split::Calibrate
            } else {
                Split::Test
            };
        }
    }
    d.split = labels;
    Ok(d)
}

const RECORD_COLUMNS: [&str; 13] = [
    "region_id",
    "x1",
    "x2",
    "x3",
    "x4",
    "x5",
    "x6",
    "x7",
    "x8",
    "x9",
    "group",
    "repair_duration",
    "split",
];

const REGION_COLUMNS: [&str; 14] = [
    "region_id",
    "coord_x_km",
    "coord_y_km",
    "group",
    "request_count",
    "x1",
    "x2",
    "x3",
    "x4",
    "x5",
    "x6",
    "x7",
    "x8",
    "x9",
];

/// Writes the record table and the region table.
pub fn save_csv(d: &Dataset, records_path: &Path, regions_path: &Path) -> Result<(), DataError> {
    let mut out = RECORD_COLUMNS.join(",");
    out.push('\n');
    for (r, s) in d.records.iter().zip(&d.split) {
        write!(out, "{}", r.region_id).unwrap();
        for v in &r.features {
            write!(out, ",{v}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{}",
            r.group.index(),
            r.repair_duration,
            s.label()
        )
        .unwrap();
    }
    fs::write(records_path, out)?;

    let mut out = REGION_COLUMNS.join(",");
    out.push('\n');
    for r in &d.regions {
        write!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.coord.x,
            r.coord.y,
            r.group.index(),
            r.request_count
        )
        .unwrap();
        for v in &r.features {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(regions_path, out)?;
    Ok(())
}

struct Table {
    path: String,
    columns: Vec<usize>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path, expected: &[&str]) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let path_s = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let header: Vec<&str> = match lines.next() {
            Some((_, h)) => h.trim().split(',').map(str::trim).collect(),
            None => {
                return Err(DataError::Schema {
                    path: path_s,
                    missing: expected.iter().map(|s| s.to_string()).collect(),
                })
            }
        };
        let missing: Vec<String> = expected
            .iter()
            .filter(|c| !header.contains(c))
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(DataError::Schema {
                path: path_s,
                missing,
            });
        }
        let columns = expected
            .iter()
            .map(|c| header.iter().position(|h| h == c).expect("checked"))
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
            if fields.len() != header.len() {
                return Err(DataError::Parse {
                    path: path_s,
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", header.len(), fields.len()),
                });
            }
            rows.push((i + 1, fields));
        }
        Ok(Self {
            path: path_s,
            columns,
            rows,
        })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> DataError {
        DataError::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn field<'a>(&self, row: &'a [String], col: usize) -> &'a str {
        &row[self.columns[col]]
    }

    fn parse<T: std::str::FromStr>(
        &self,
        line: usize,
        row: &[String],
        col: usize,
        name: &str,
    ) -> Result<T, DataError> {
        let raw = self.field(row, col);
        raw.parse()
            .map_err(|_| self.err(line, format!("cannot parse {name} from {raw:?}")))
    }

    fn group(&self, line: usize, row: &[String], col: usize) -> Result<SensitiveGroup, DataError> {
        let g: usize = self.parse(line, row, col, "group")?;
        SensitiveGroup::from_index(g)
            .ok_or_else(|| self.err(line, format!("group {g} not in {{0,1,2}}")))
    }
}

pub fn load_csv(records_path: &Path, regions_path: &Path) -> Result<Dataset, DataError> {
    let rt = Table::read(regions_path, &REGION_COLUMNS)?;
    let mut regions = Vec::with_capacity(rt.rows.len());
    for (line, row) in &rt.rows {
        let line = *line;
        let id: usize = rt.parse(line, row, 0, "region_id")?;
        let features = (5..14)
            .map(|c| rt.parse::<f64>(line, row, c, "feature"))
            .collect::<Result<Vec<_>, _>>()?;
        let region = Region {
            id,
            coord: Point::new(
                rt.parse(line, row, 1, "coord_x_km")?,
                rt.parse(line, row, 2, "coord_y_km")?,
            ),
            features,
            group: rt.group(line, row, 3)?,
            request_count: rt.parse(line, row, 4, "request_count")?,
        };
        region.validate().map_err(|e| rt.err(line, e.to_string()))?;
        if id != regions.len() {
            return Err(rt.err(
                line,
                format!(
                    "region ids must be dense and ordered, expected {}",
                    regions.len()
                ),
            ));
        }
        regions.push(region);
    }

    let t = Table::read(records_path, &RECORD_COLUMNS)?;
    let mut records = Vec::with_capacity(t.rows.len());
    let mut split = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let line = *line;
        let region_id: usize = t.parse(line, row, 0, "region_id")?;
        let features = (1..10)
            .map(|c| t.parse::<f64>(line, row, c, "feature"))
            .collect::<Result<Vec<_>, _>>()?;
        let group = t.group(line, row, 10)?;
        let repair_duration: f64 = t.parse(line, row, 11, "repair_duration")?;
        let rec = RepairRecord::new(region_id, features, group, repair_duration)
            .map_err(|e| t.err(line, e.to_string()))?;
        if region_id >= regions.len() {
            return Err(t.err(line, format!("unknown region {region_id}")));
        }
        let s = t.field(row, 12);
        let s = Split::parse(s).ok_or_else(|| t.err(line, format!("unknown split {s:?}")))?;
        records.push(rec);
        split.push(s);
    }
    Ok(Dataset {
        regions,
        records,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_regions: 12,
            seed: 3,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_region_rejected() {
        let cfg = GeneratorConfig {
            n_regions: 1,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(DataError::InvalidConfig(_))));
    }

    #[test]
    fn every_group_present_and_durations_positive() {
        let d = generate(&small()).unwrap();
        for g in SensitiveGroup::ALL {
            assert!(d.regions.iter().any(|r| r.group == g));
        }
        assert!(d.records.iter().all(|r| r.repair_duration > 0.0));
        assert!(d.records.iter().all(|r| r.region_id < d.regions.len()));
    }

    #[test]
    fn equal_noise_gives_equal_residual_variance() {
        let cfg = GeneratorConfig {
            n_regions: 30,
            samples_per_region_by_group: [3000, 3000, 3000],
            noise_scale_by_group: [2.0, 2.0, 2.0],
            base_duration_range: (40.0, 60.0),
            seed: 11,
            ..GeneratorConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let surface = DurationSurface::from_seed(cfg.seed, cfg.base_duration_range);
        let mut var = [0.0; 3];
        let mut cnt = [0usize; 3];
        for r in &d.records {
            let e = r.repair_duration - surface.eval(&r.features);
            var[r.group.index()] += e * e;
            cnt[r.group.index()] += 1;
        }
        let var: Vec<f64> = (0..3).map(|g| var[g] / cnt[g] as f64).collect();
        for v in &var {
            assert!((v / 4.0 - 1.0).abs() < 0.05, "variance {v} vs 4");
        }
        let (lo, hi) = var
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.05);
    }

    #[test]
    fn request_means_rise_with_income() {
        let cfg = GeneratorConfig {
            n_regions: 1200,
            samples_per_region_by_group: [1, 1, 1],
            seed: 5,
            ..GeneratorConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let mut sum = [0.0; 3];
        let mut cnt = [0.0; 3];
        for r in &d.regions {
            sum[r.group.index()] += r.request_count as f64;
            cnt[r.group.index()] += 1.0;
        }
        let m: Vec<f64> = (0..3).map(|g| sum[g] / cnt[g]).collect();
        assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
    }

    fn synthetic(counts: [usize; 3]) -> Dataset {
        let mut records = Vec::new();
        for g in SensitiveGroup::ALL {
            for k in 0..counts[g.index()] {
                records.push(RepairRecord {
                    region_id: 0,
                    features: vec![0.0; 9],
                    group: g,
                    repair_duration: 1.0 + k as f64,
                });
            }
        }
        Dataset {
            regions: vec![],
            split: vec![Split::Train; records.len()],
            records,
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let d = split(synthetic([100, 140, 160]), (0.5, 0.25, 0.25), 9).unwrap();
        let count = |s| d.split.iter().filter(|&&x| x == s).count();
        assert!((count(Split::Train) as i64 - 200).abs() <= 3);
        assert!((count(Split::Calibrate) as i64 - 100).abs() <= 3);
        assert!((count(Split::Test) as i64 - 100).abs() <= 3);
        for g in SensitiveGroup::ALL {
            for s in [Split::Train, Split::Calibrate, Split::Test] {
                assert!(d
                    .records
                    .iter()
                    .zip(&d.split)
                    .any(|(r, &l)| r.group == g && l == s));
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(
            split(synthetic([10, 10, 10]), (0.5, 0.2, 0.2), 0),
            Err(DataError::InvalidFractions(_))
        ));
    }

    #[test]
    fn split_rejects_tiny_group() {
        assert!(matches!(
            split(synthetic([10, 2, 10]), (0.5, 0.25, 0.25), 0),
            Err(DataError::GroupTooSmall {
                group: SensitiveGroup::Middle,
                count: 2
            })
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(synthetic([20, 20, 20]), (0.5, 0.25, 0.25), 4).unwrap();
        let b = split(synthetic([20, 20, 20]), (0.5, 0.25, 0.25), 4).unwrap();
        assert_eq!(a.split, b.split);
    }
}
