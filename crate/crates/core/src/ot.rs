//! Optimal transport between uniform marginals via the inexact proximal
//! point method: proximal Sinkhorn-style iterations that converge to the
//! unregularized transport plan.

/// Result of a transport solve over a P x Q cost matrix.
#[derive(Debug, Clone)]
pub struct TransportResult {
    /// Row-major P x Q plan; rows sum to 1/P, columns to 1/Q at
    /// convergence.
    pub plan: Vec<f64>,
    pub distance: f64,
    pub converged: bool,
    /// Max marginal violation of the returned plan.
    pub marginal_err: f64,
}

/// Proximal point iteration: each outer step solves an entropic proximal
/// subproblem around the current plan with `inner` Sinkhorn updates.
pub fn ipot(
    cost: &[f64],
    p: usize,
    q: usize,
    beta: f64,
    outer: usize,
    inner: usize,
) -> TransportResult {
    assert_eq!(cost.len(), p * q, "cost matrix must be {p}x{q}");
    assert!(p >= 1 && q >= 1 && beta > 0.0);
    let mu = 1.0 / p as f64;
    let nu = 1.0 / q as f64;
    let g: Vec<f64> = cost.iter().map(|c| (-c / beta).exp()).collect();
    let mut plan = vec![mu * nu; p * q];
    let mut b = vec![1.0; q];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let tol = 1e-4;
    let mut converged = false;
    for _ in 0..outer {
        // kernel for the proximal subproblem around the current plan
        let kq: Vec<f64> = g.iter().zip(&plan).map(|(g, t)| g * t).collect();
        let mut a = vec![0.0; p];
        for _ in 0..inner {
            for i in 0..p {
                let s: f64 = (0..q).map(|j| kq[i * q + j] * b[j]).sum();
                a[i] = mu / s.max(1e-300);
            }
            for j in 0..q {
                let s: f64 = (0..p).map(|i| kq[i * q + j] * a[i]).sum();
                b[j] = nu / s.max(1e-300);
            }
        }
        for i in 0..p {
            for j in 0..q {
                plan[i * q + j] = a[i] * kq[i * q + j] * b[j];
            }
        }
        let err = marginal_violation(&plan, p, q);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, plan.clone()));
        }
        if err < tol {
            converged = true;
        }
    }
    let (marginal_err, plan) = if converged {
        (marginal_violation(&plan, p, q), plan)
    } else {
        best.unwrap()
    };
    let distance = plan.iter().zip(cost).map(|(t, c)| t * c).sum();
    TransportResult {
        plan,
        distance,
        converged,
        marginal_err,
    }
}

pub fn marginal_violation(plan: &[f64], p: usize, q: usize) -> f64 {
    let mu = 1.0 / p as f64;
    let nu = 1.0 / q as f64;
    let mut err = 0.0_f64;
    for i in 0..p {
        let s: f64 = plan[i * q..(i + 1) * q].iter().sum();
        err = err.max((s - mu).abs());
    }
    for j in 0..q {
        let s: f64 = (0..p).map(|i| plan[i * q + j]).sum();
        err = err.max((s - nu).abs());
    }
    err
}

/// Cosine-distance cost matrix between two sets of row vectors.
pub fn cosine_cost(a: &[f64], b: &[f64], p: usize, q: usize, d: usize) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut cost = vec![0.0; p * q];
    for i in 0..p {
        let ai = &a[i * d..(i + 1) * d];
        let na = norm(ai);
        for j in 0..q {
            let bj = &b[j * d..(j + 1) * d];
            let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            cost[i * q + j] = 1.0 - dot / (na * norm(bj));
        }
    }
    cost
}

/// Exact reference solver for small uniform-marginal instances, used as an
/// independent oracle against `ipot`. Enumerates the basic feasible
/// solutions of the transportation polytope (spanning trees of the
/// bipartite graph) and takes the cheapest vertex.
pub mod reference {
    /// Exact optimal transport cost; practical for p*q <= ~12 cells.
    pub fn exact_uniform_ot(cost: &[f64], p: usize, q: usize) -> f64 {
        assert_eq!(cost.len(), p * q);
        let cells: Vec<(usize, usize)> = (0..p)
            .flat_map(|i| (0..q).map(move |j| (i, j)))
            .collect();
        let basis = p + q - 1;
        let mut best = f64::INFINITY;
        let mut chosen = Vec::with_capacity(basis);
        enumerate(&cells, 0, basis, &mut chosen, &mut |subset| {
            if let Some(flows) = solve_tree(subset, p, q) {
                let c: f64 = subset
                    .iter()
                    .zip(&flows)
                    .map(|(&(i, j), f)| f * cost[i * q + j])
                    .sum();
                if c < best {
                    best = c;
                }
            }
        });
        best
    }

    fn enumerate(
        cells: &[(usize, usize)],
        start: usize,
        remaining: usize,
        chosen: &mut Vec<(usize, usize)>,
        visit: &mut impl FnMut(&[(usize, usize)]),
    ) {
        if remaining == 0 {
            visit(chosen);
            return;
        }
        if cells.len() - start < remaining {
            return;
        }
        for i in start..cells.len() {
            chosen.push(cells[i]);
            enumerate(cells, i + 1, remaining - 1, chosen, visit);
            chosen.pop();
        }
    }

    /// Solves the flows on a candidate basis by leaf elimination; returns
    /// None if the basis is not a spanning tree or a flow is negative.
    fn solve_tree(edges: &[(usize, usize)], p: usize, q: usize) -> Option<Vec<f64>> {
        let n = p + q;
        let mut supply: Vec<f64> = (0..n)
            .map(|v| if v < p { 1.0 / p as f64 } else { -1.0 / q as f64 })
            .collect();
        let mut degree = vec![0usize; n];
        let node = |&(i, j): &(usize, usize)| (i, p + j);
        for e in edges {
            let (u, v) = node(e);
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut flows = vec![f64::NAN; edges.len()];
        let mut active: Vec<bool> = vec![true; edges.len()];
        for _ in 0..edges.len() {
            // find a leaf among active edges
            let mut leaf = None;
            for (ei, e) in edges.iter().enumerate() {
                if !active[ei] {
                    continue;
                }
                let (u, v) = node(e);
                if degree[u] == 1 {
                    leaf = Some((ei, u, v));
                    break;
                }
                if degree[v] == 1 {
                    leaf = Some((ei, v, u));
                    break;
                }
            }
            let (ei, u, v) = leaf?;
            let f = if u < p { supply[u] } else { -supply[u] };
            if f < -1e-9 {
                return None;
            }
            flows[ei] = f.max(0.0);
            supply[v] += supply[u];
            supply[u] = 0.0;
            degree[u] -= 1;
            degree[v] -= 1;
            active[ei] = false;
        }
        Some(flows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_matching_exists() {
        let r = ipot(&[0.0, 1.0, 1.0, 0.0], 2, 2, 0.5, 200, 1);
        assert!(r.distance.abs() < 1e-3, "distance {}", r.distance);
        assert!((r.plan[0] - 0.5).abs() < 1e-3);
        assert!((r.plan[3] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn single_cell_plan_is_one() {
        let r = ipot(&[0.37], 1, 1, 0.5, 10, 1);
        assert!((r.plan[0] - 1.0).abs() < 1e-12);
        assert!((r.distance - 0.37).abs() < 1e-12);
    }

    #[test]
    fn reference_oracle_on_permutation_cost() {
        // identity assignment is optimal: cost 0
        let c = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert!(reference::exact_uniform_ot(&c, 3, 3).abs() < 1e-12);
        // off-diagonal forced: min over permutations of mean cost
        let c2 = vec![2.0, 1.0, 1.0, 2.0];
        assert!((reference::exact_uniform_ot(&c2, 2, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ipot_matches_reference_on_random_costs() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64) * 2.0
        };
        for trial in 0..20 {
            let (p, q) = ([(2, 2), (2, 3), (3, 3), (1, 3)])[trial % 4];
            let cost: Vec<f64> = (0..p * q).map(|_| next()).collect();
            let exact = reference::exact_uniform_ot(&cost, p, q);
            let r = ipot(&cost, p, q, 0.5, 200, 1);
            assert!(
                (r.distance - exact).abs() < 1e-3,
                "trial {trial}: ipot {} vs exact {exact}",
                r.distance
            );
            assert!(r.marginal_err < 1e-4);
        }
    }

    #[test]
    fn rectangular_marginals_hold() {
        let cost = vec![0.3, 0.8, 0.1, 0.9, 0.2, 0.7];
        let r = ipot(&cost, 2, 3, 0.5, 200, 1);
        assert!(r.marginal_err < 1e-4);
        assert!(r.distance >= 0.0);
        assert!(r.distance <= 0.9);
    }
}
