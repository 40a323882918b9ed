//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use equirestore::domain::Point;
use equirestore::simenv::EnvConfig;

/// Exact W1 between two empirical distributions by minimum-cost transport.
///
/// Sample `a_i` carries `|b|` units of mass and `b_j` carries `|a|` units,
/// so both sides total `|a| |b|` and every capacity is an integer.
/// Successive shortest augmenting paths (Bellman-Ford on the residual
/// graph) give the optimal plan.
pub fn transport_w1(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    // nodes: 0 source, 1..=n left, n+1..=n+m right, n+m+1 sink
    let src = 0;
    let sink = n + m + 1;
    let nodes = n + m + 2;
    let mut edges: Vec<(usize, usize, i64, f64)> = Vec::new(); // to, rev, cap, cost
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut add =
        |u: usize, v: usize, cap: i64, cost: f64, edges: &mut Vec<(usize, usize, i64, f64)>| {
            adj[u].push(edges.len());
            edges.push((v, edges.len() + 1, cap, cost));
            adj[v].push(edges.len());
            edges.push((u, edges.len() - 1, 0, -cost));
        };
    for i in 0..n {
        add(src, 1 + i, m as i64, 0.0, &mut edges);
        for j in 0..m {
            add(
                1 + i,
                1 + n + j,
                i64::MAX / 4,
                (a[i] - b[j]).abs(),
                &mut edges,
            );
        }
    }
    for j in 0..m {
        add(1 + n + j, sink, n as i64, 0.0, &mut edges);
    }
    let mut total_cost = 0.0;
    let mut flow = 0i64;
    let need = (n * m) as i64;
    while flow < need {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev_edge = vec![usize::MAX; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for &e in &adj[u] {
                    let (v, _, cap, cost) = edges[e];
                    if cap > 0 && dist[u] + cost < dist[v] - 1e-9 {
                        dist[v] = dist[u] + cost;
                        prev_edge[v] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "transport problem infeasible");
        let mut push = need - flow;
        let mut v = sink;
        let mut hops = 0;
        while v != src {
            hops += 1;
            assert!(hops <= nodes, "augmenting path is not simple");
            let e = prev_edge[v];
            push = push.min(edges[e].2);
            v = edges[edges[e].1].0;
        }
        let mut v = sink;
        while v != src {
            let e = prev_edge[v];
            edges[e].2 -= push;
            let r = edges[e].1;
            edges[r].2 += push;
            v = edges[r].0;
        }
        flow += push;
        total_cost += push as f64 * dist[sink];
    }
    total_cost / (n * m) as f64
}

/// `ceil(p (n + 1) / q)` in integer arithmetic for a coverage level `p/q`.
pub fn exact_rank(n: usize, p: usize, q: usize) -> usize {
    (p * (n + 1)).div_ceil(q)
}

/// Outage per region recomputed from the coordinates, the travel speed and
/// the realized repair durations: everything driven and repaired before a
/// region's completion counts toward it.
pub fn hand_outages(env: &EnvConfig, sequence: &[usize], repairs: &[f64]) -> (Vec<f64>, f64) {
    let mut out = vec![f64::NAN; env.regions.len()];
    let mut at: Point = env.depot;
    let mut travel_so_far = 0.0;
    let mut repair_so_far = 0.0;
    for (k, &r) in sequence.iter().enumerate() {
        let c = env.regions[r].coord;
        travel_so_far +=
            ((at.x - c.x).powi(2) + (at.y - c.y).powi(2)).sqrt() / env.travel.speed_kmh;
        out[r] = travel_so_far + repair_so_far + repairs[k];
        repair_so_far += repairs[k];
        at = c;
    }
    (out, travel_so_far + repair_so_far)
}

/// Shortest open path from the depot by trying every order.
pub fn brute_force_tour(env: &EnvConfig) -> f64 {
    fn rec(env: &EnvConfig, at: Point, left: &mut Vec<usize>, acc: f64, best: &mut f64) {
        if left.is_empty() {
            *best = best.min(acc);
            return;
        }
        for i in 0..left.len() {
            let r = left.remove(i);
            let c = env.regions[r].coord;
            let leg = at.distance(&c) / env.travel.speed_kmh;
            rec(env, c, left, acc + leg, best);
            left.insert(i, r);
        }
    }
    let mut best = f64::INFINITY;
    let mut left: Vec<usize> = (0..env.regions.len()).collect();
    rec(env, env.depot, &mut left, 0.0, &mut best);
    best
}

/// Travel-only length of an open path from the depot.
pub fn path_length(env: &EnvConfig, seq: &[usize]) -> f64 {
    let mut at = env.depot;
    let mut total = 0.0;
    for &r in seq {
        let c = env.regions[r].coord;
        total += at.distance(&c) / env.travel.speed_kmh;
        at = c;
    }
    total
}

/// Relative error between analytic and numeric derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}
