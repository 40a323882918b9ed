//! Reference sequencing policies: request-volume ordering (GT), nearest
//! region first (GM) and a travel-minimizing tour with service times
//! (TSP-ST).

use crate::domain::{Point, Region};
use crate::simenv::{ActionCandidate, EnvConfig, EnvError, EpisodeState, Policy};

/// Regions by descending request count, ties by ascending id.
pub fn gt_sequence(regions: &[Region]) -> Vec<usize> {
    let mut order: Vec<&Region> = regions.iter().collect();
    order.sort_by(|a, b| b.request_count.cmp(&a.request_count).then(a.id.cmp(&b.id)));
    order.into_iter().map(|r| r.id).collect()
}

/// Follows a fixed order, skipping regions already repaired.
#[derive(Debug, Clone)]
pub struct SequencePolicy {
    order: Vec<usize>,
}

impl SequencePolicy {
    pub fn new(order: Vec<usize>) -> Self {
        Self { order }
    }

    /// Request-volume ordering, or a recorded sequence when one is given.
    pub fn gt(cfg: &EnvConfig, recorded: Option<Vec<usize>>) -> Self {
        Self::new(recorded.unwrap_or_else(|| gt_sequence(&cfg.regions)))
    }

    pub fn tsp_st(cfg: &EnvConfig) -> Self {
        let estimates: Vec<f64> = cfg.intervals.iter().map(|pi| pi.midpoint()).collect();
        Self::new(tsp_st_tour(cfg, &estimates))
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Policy for SequencePolicy {
    fn choose(&mut self, state: &EpisodeState, _: &[ActionCandidate]) -> Result<usize, EnvError> {
        self.order
            .iter()
            .copied()
            .find(|&r| r < state.repaired.len() && !state.repaired[r])
            .ok_or_else(|| EnvError::Policy("sequence exhausted before the episode ended".into()))
    }
}

/// Closest candidate, ties by lower id.
pub fn greedy_choice(candidates: &[ActionCandidate]) -> Option<usize> {
    candidates
        .iter()
        .min_by(|a, b| {
            a.distance_km
                .total_cmp(&b.distance_km)
                .then(a.region_id.cmp(&b.region_id))
        })
        .map(|c| c.region_id)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyPolicy;

impl Policy for GreedyPolicy {
    fn choose(&mut self, _: &EpisodeState, c: &[ActionCandidate]) -> Result<usize, EnvError> {
        greedy_choice(c).ok_or_else(|| EnvError::Policy("no candidates".into()))
    }
}

/// Travel-time matrix with the depot as the last row.
struct TourCosts {
    n: usize,
    t: Vec<f64>,
}

impl TourCosts {
    fn new(depot: Point, coords: &[Point], speed: f64) -> Self {
        let n = coords.len();
        let mut pts = coords.to_vec();
        pts.push(depot);
        let mut t = vec![0.0; (n + 1) * (n + 1)];
        for i in 0..=n {
            for j in 0..=n {
                t[i * (n + 1) + j] = pts[i].distance(&pts[j]) / speed;
            }
        }
        Self { n, t }
    }

    fn leg(&self, a: usize, b: usize) -> f64 {
        self.t[a * (self.n + 1) + b]
    }

    fn depot(&self) -> usize {
        self.n
    }

    fn path_travel(&self, seq: &[usize]) -> f64 {
        let mut prev = self.depot();
        let mut total = 0.0;
        for &r in seq {
            total += self.leg(prev, r);
            prev = r;
        }
        total
    }
}

/// Total travel plus service time of visiting `seq` from the depot.
pub fn tour_cost(cfg: &EnvConfig, seq: &[usize], estimates: &[f64]) -> f64 {
    let coords: Vec<Point> = cfg.regions.iter().map(|r| r.coord).collect();
    let c = TourCosts::new(cfg.depot, &coords, cfg.travel.speed_kmh);
    c.path_travel(seq) + seq.iter().map(|&r| estimates[r]).sum::<f64>()
}

fn nearest_neighbor(c: &TourCosts) -> Vec<usize> {
    let mut left: Vec<bool> = vec![true; c.n];
    let mut seq = Vec::with_capacity(c.n);
    let mut cur = c.depot();
    for _ in 0..c.n {
        let next = (0..c.n)
            .filter(|&r| left[r])
            .min_by(|&a, &b| c.leg(cur, a).total_cmp(&c.leg(cur, b)).then(a.cmp(&b)))
            .expect("a region is left");
        left[next] = false;
        seq.push(next);
        cur = next;
    }
    seq
}

/// Reverses segments while that shortens the open path.
fn two_opt(c: &TourCosts, seq: &mut [usize]) {
    const EPS: f64 = 1e-12;
    let n = seq.len();
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let before = if i == 0 { c.depot() } else { seq[i - 1] };
                let old = c.leg(before, seq[i])
                    + if j + 1 < n {
                        c.leg(seq[j], seq[j + 1])
                    } else {
                        0.0
                    };
                let new = c.leg(before, seq[j])
                    + if j + 1 < n {
                        c.leg(seq[i], seq[j + 1])
                    } else {
                        0.0
                    };
                if new < old - EPS {
                    seq[i..=j].reverse();
                    improved = true;
                }
            }
        }
    }
}

fn costs_for(cfg: &EnvConfig) -> TourCosts {
    let coords: Vec<Point> = cfg.regions.iter().map(|r| r.coord).collect();
    TourCosts::new(cfg.depot, &coords, cfg.travel.speed_kmh)
}

/// Nearest-neighbor construction only.
pub fn nearest_neighbor_tour(cfg: &EnvConfig) -> Vec<usize> {
    nearest_neighbor(&costs_for(cfg))
}

/// Open tour from the depot minimizing travel plus estimated repair time.
/// Repair time does not depend on order, so only travel is optimized.
pub fn tsp_st_tour(cfg: &EnvConfig, estimates: &[f64]) -> Vec<usize> {
    debug_assert_eq!(estimates.len(), cfg.n_regions());
    let c = costs_for(cfg);
    let mut seq = nearest_neighbor(&c);
    two_opt(&c, &mut seq);
    seq
}

/// Exact shortest open path from the depot by subset dynamic programming.
/// Exponential; intended for instances of about a dozen regions or fewer.
pub fn exact_tour(cfg: &EnvConfig) -> Vec<usize> {
    let c = costs_for(cfg);
    let n = c.n;
    assert!(n <= 16, "exact tour limited to 16 regions");
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    for r in 0..n {
        best[(1 << r) * n + r] = c.leg(c.depot(), r);
    }
    for mask in 1..full {
        for last in 0..n {
            let v = best[mask * n + last];
            if mask & (1 << last) == 0 || !v.is_finite() {
                continue;
            }
            for next in 0..n {
                if mask & (1 << next) != 0 {
                    continue;
                }
                let m2 = mask | (1 << next);
                let cand = v + c.leg(last, next);
                if cand < best[m2 * n + next] {
                    best[m2 * n + next] = cand;
                    parent[m2 * n + next] = last;
                }
            }
        }
    }
    let mut last = (0..n)
        .min_by(|&a, &b| best[(full - 1) * n + a].total_cmp(&best[(full - 1) * n + b]))
        .expect("nonempty");
    let mut mask = full - 1;
    let mut seq = Vec::with_capacity(n);
    loop {
        seq.push(last);
        let p = parent[mask * n + last];
        mask &= !(1 << last);
        if p == usize::MAX {
            break;
        }
        last = p;
    }
    seq.reverse();
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PredictionInterval;
    use crate::domain::SensitiveGroup::*;
    use crate::simenv::tests::{line_instance, region};
    use crate::simenv::{rollout, TravelModel};

    #[test]
    fn gt_sorts_by_requests() {
        let mut rs = vec![
            region(0, 0.0, 0.0, Low),
            region(1, 0.0, 0.0, Low),
            region(2, 0.0, 0.0, Low),
        ];
        rs[0].request_count = 10;
        rs[1].request_count = 3;
        rs[2].request_count = 7;
        assert_eq!(gt_sequence(&rs), vec![0, 2, 1]);
        for r in &mut rs {
            r.request_count = 4;
        }
        assert_eq!(gt_sequence(&rs), vec![0, 1, 2]);
    }

    #[test]
    fn recorded_sequence_replayed() {
        let cfg = line_instance(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        let mut p = SequencePolicy::gt(&cfg, Some(vec![2, 0, 1]));
        assert_eq!(rollout(&cfg, &mut p, 0).unwrap().sequence, vec![2, 0, 1]);
    }

    fn cand(id: usize, d: f64) -> ActionCandidate {
        ActionCandidate {
            region_id: id,
            interval: PredictionInterval::point(1.0),
            coord: Point::default(),
            elapsed: 0.0,
            distance_km: d,
            group: Low,
        }
    }

    #[test]
    fn greedy_picks_closest_then_lowest_id() {
        assert_eq!(greedy_choice(&[cand(3, 2.0), cand(1, 5.0)]), Some(3));
        assert_eq!(greedy_choice(&[cand(4, 2.0), cand(2, 2.0)]), Some(2));
        assert_eq!(greedy_choice(&[cand(9, 7.0)]), Some(9));
        assert_eq!(greedy_choice(&[]), None);
    }

    #[test]
    fn collinear_tour() {
        let cfg = line_instance(&[2.0, 0.5, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(tsp_st_tour(&cfg, &[1.0; 3]), vec![1, 2, 0]);
        assert_eq!(exact_tour(&cfg), vec![1, 2, 0]);
        let one = line_instance(&[3.0], &[1.0]);
        assert_eq!(tsp_st_tour(&one, &[1.0]), vec![0]);
    }

    #[test]
    fn two_opt_never_worse_than_construction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let mut cfg = line_instance(&vec![0.0; n], &vec![1.0; n]);
            for r in &mut cfg.regions {
                r.coord = Point::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            }
            cfg.travel = TravelModel { speed_kmh: 20.0 };
            let est = vec![1.0; n];
            let nn = tour_cost(&cfg, &nearest_neighbor_tour(&cfg), &est);
            let opt = tour_cost(&cfg, &tsp_st_tour(&cfg, &est), &est);
            let exact = tour_cost(&cfg, &exact_tour(&cfg), &est);
            assert!(opt <= nn + 1e-12);
            assert!(exact <= opt + 1e-9);
        }
    }
}
