//! Independent ground truth: exact transient solves of the annihilating
//! system on tiny state spaces, and exhaustive verification of the entangled
//! discrete coupling.
//!
//! States are occupancy vectors (braveness integrates out: which same-type
//! particle dies does not change the occupancy law). At that level a jump is
//! signed transport: an A moving x->y maps `s` to `s - d_x + d_y`, and the
//! cancellation of opposite signs is exactly instantaneous annihilation.

use std::collections::HashMap;

use crate::coupling::entangle_discrete;
use crate::error::{Error, Result};
use crate::graph::{ReflectiveGraph, SiteId};
use crate::init::Configuration;
use crate::sim::SimParams;

pub const DEFAULT_STATE_CAP: usize = 20_000;

/// Enumerated CTMC over occupancy states reachable from one initial
/// configuration.
#[derive(Debug)]
pub struct ExactChain {
    pub states: Vec<Vec<i32>>,
    index: HashMap<Vec<i32>, usize>,
    /// Outgoing transitions per state: `(target, rate)`.
    pub rates: Vec<Vec<(usize, f64)>>,
    pub exit: Vec<f64>,
    /// Uniformization constant: max total exit rate.
    pub lambda: f64,
    pub sites: usize,
}

impl ExactChain {
    pub fn state_index(&self, s: &[i32]) -> Option<usize> {
        self.index.get(s).copied()
    }
}

/// Breadth-first enumeration of the reachable state space with exact rates.
pub fn build_generator(
    g: &ReflectiveGraph,
    init: &Configuration,
    params: &SimParams,
    state_cap: usize,
) -> Result<ExactChain> {
    params.validate()?;
    let n_sites = g.finite_count()? as usize;
    let supports: Vec<Vec<(usize, f64)>> = (0..n_sites)
        .map(|x| {
            g.kernel_support(&SiteId::Ix(x as u32))
                .into_iter()
                .map(|(s, p)| (s.ix() as usize, p))
                .collect()
        })
        .collect();

    let root: Vec<i32> = init.counts().to_vec();
    let mut states = vec![root.clone()];
    let mut index = HashMap::new();
    index.insert(root, 0usize);
    let mut rates: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut head = 0usize;

    while head < states.len() {
        let s = states[head].clone();
        let mut out: HashMap<usize, f64> = HashMap::new();
        for (x, &c) in s.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (mult, rate, delta) = if c > 0 {
                (c as f64, params.d_a, 1i32)
            } else {
                ((-c) as f64, params.d_b, -1i32)
            };
            if rate == 0.0 {
                continue;
            }
            for &(y, p) in &supports[x] {
                if y == x {
                    continue; // a self-loop step changes nothing
                }
                let mut t = s.clone();
                t[x] -= delta;
                t[y] += delta;
                let id = match index.get(&t) {
                    Some(&id) => id,
                    None => {
                        let id = states.len();
                        if id >= state_cap {
                            return Err(Error::StateCapExceeded {
                                count: id + 1,
                                cap: state_cap,
                            });
                        }
                        index.insert(t.clone(), id);
                        states.push(t);
                        id
                    }
                };
                *out.entry(id).or_insert(0.0) += mult * rate * p;
            }
        }
        let mut list: Vec<(usize, f64)> = out.into_iter().collect();
        list.sort_unstable_by_key(|&(i, _)| i);
        rates.push(list);
        head += 1;
    }

    let exit: Vec<f64> = rates
        .iter()
        .map(|row| row.iter().map(|&(_, r)| r).sum())
        .collect();
    let lambda = exit.iter().cloned().fold(0.0, f64::max);
    Ok(ExactChain {
        states,
        index,
        rates,
        exit,
        lambda,
        sites: n_sites,
    })
}

fn uniform_step(chain: &ExactChain, pi: &[f64]) -> Vec<f64> {
    let lambda = chain.lambda;
    let mut out = vec![0.0; pi.len()];
    for (i, &mass) in pi.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        out[i] += mass * (1.0 - chain.exit[i] / lambda);
        for &(j, r) in &chain.rates[i] {
            out[j] += mass * (r / lambda);
        }
    }
    out
}

/// Distribution at time `t` by uniformization, with Poisson tail below `tol`.
pub fn transient_solve(chain: &ExactChain, t: f64, tol: f64) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParams("time must be nonnegative".into()));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidParams("tol must be in (0,1)".into()));
    }
    let mut pi = vec![0.0; chain.states.len()];
    pi[0] = 1.0;
    let mu = chain.lambda * t;
    if mu == 0.0 {
        return Ok(pi);
    }
    let mut result = vec![0.0; pi.len()];
    let mut weight = (-mu).exp(); // Poisson pmf at k = 0
    let mut cum = weight;
    for r in result.iter_mut().zip(&pi) {
        *r.0 += weight * r.1;
    }
    let mut k = 0u64;
    while 1.0 - cum > tol {
        k += 1;
        pi = uniform_step(chain, &pi);
        weight *= mu / k as f64;
        cum += weight;
        for r in result.iter_mut().zip(&pi) {
            *r.0 += weight * r.1;
        }
        if k > 200_000_000 {
            return Err(Error::InvalidParams(
                "uniformization did not converge".into(),
            ));
        }
    }
    Ok(result)
}

/// Densities under the exact law at time `t`:
/// `(mu_a, mu_b, rho, theta)` per site.
pub fn exact_density(chain: &ExactChain, t: f64, tol: f64) -> Result<(f64, f64, f64, f64)> {
    let pi = transient_solve(chain, t, tol)?;
    let v = chain.sites as f64;
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for (s, &p) in chain.states.iter().zip(&pi) {
        let na: i64 = s.iter().filter(|&&c| c > 0).map(|&c| c as i64).sum();
        let nb: i64 = s.iter().filter(|&&c| c < 0).map(|&c| -c as i64).sum();
        mu_a += p * na as f64 / v;
        mu_b += p * nb as f64 / v;
    }
    let s0 = &chain.states[0];
    let mu_a0: f64 = s0.iter().filter(|&&c| c > 0).map(|&c| c as f64).sum::<f64>() / v;
    let theta = mu_a0 - mu_a;
    Ok((mu_a, mu_b, mu_a + mu_b, theta))
}

/// Componentwise `\int_0^t pi_s ds` by the integrated uniformization series:
/// `(1/lambda) * sum_k P[Poisson(lambda t) > k] * pi_k`.
pub fn integrated_occupancy(chain: &ExactChain, t: f64, tol: f64) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParams("time must be nonnegative".into()));
    }
    let mu = chain.lambda * t;
    let mut pi = vec![0.0; chain.states.len()];
    pi[0] = 1.0;
    if mu == 0.0 {
        return Ok(vec![0.0; chain.states.len()]);
    }
    let mut pmf = (-mu).exp();
    let mut tail = 1.0 - pmf; // P[N > 0]
    let mut out = vec![0.0; pi.len()];
    let mut k = 0u64;
    // Remaining mass of sum_k P[N>k] after K terms is E[(N-K)^+] <= mu * P[N >= K],
    // so stopping once tail * mu < tol * lambda is conservative at desk scale.
    loop {
        for o in out.iter_mut().zip(&pi) {
            *o.0 += (tail / chain.lambda) * o.1;
        }
        if tail * mu < tol * chain.lambda || tail < f64::MIN_POSITIVE {
            break;
        }
        k += 1;
        pmf *= mu / k as f64;
        tail -= pmf;
        pi = uniform_step(chain, &pi);
        if k > 200_000_000 {
            return Err(Error::InvalidParams(
                "integrated uniformization did not converge".into(),
            ));
        }
    }
    Ok(out)
}

/// Report of the exhaustive discrete-entanglement audit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EntangleCheckReport {
    pub graph: String,
    pub n_steps: usize,
    pub switch_sequences: u64,
    pub paths_per_sequence: u64,
    pub max_tv: f64,
    pub distance_invariant_ok: bool,
    pub one_mover_ok: bool,
    pub ok: bool,
}

/// Enumerate every driving path `Z` of length `n_steps` (weighted by its
/// kernel probability) and every switch sequence, run the entangled
/// construction, and compare the induced joint law of `(W^y, W^z)` against
/// the contract: at each step exactly one path moves, the mover steps by the
/// kernel from its current position, and distances reproduce `d(Z_n, z)`.
pub fn brute_entangle_check(
    g: &ReflectiveGraph,
    y: &SiteId,
    z: &SiteId,
    n_steps: usize,
) -> Result<EntangleCheckReport> {
    if n_steps > 5 {
        return Err(Error::InvalidParams(
            "exhaustive check supports at most 5 steps".into(),
        ));
    }
    let mut max_tv = 0.0f64;
    let mut distance_ok = true;
    let mut one_mover_ok = true;
    let mut paths_per_sequence = 0u64;

    let ells: Vec<Vec<u8>> = (0..(1u32 << n_steps))
        .map(|mask| {
            (0..n_steps)
                .map(|i| if mask & (1 << i) != 0 { 2u8 } else { 1u8 })
                .collect()
        })
        .collect();

    for ell in &ells {
        // Constructed law: push each Z path through the entanglement.
        let mut constructed: HashMap<Vec<(SiteId, SiteId)>, f64> = HashMap::new();
        let mut stack: Vec<(Vec<SiteId>, f64)> = vec![(vec![y.clone()], 1.0)];
        let mut n_paths = 0u64;
        while let Some((zpath, weight)) = stack.pop() {
            if zpath.len() == n_steps + 1 {
                n_paths += 1;
                let (wy, wz) = entangle_discrete(g, &zpath, z, ell)?;
                let mut key = Vec::with_capacity(n_steps + 1);
                for n in 0..=n_steps {
                    if g.distance(&wy[n], &wz[n]) != g.distance(&zpath[n], z) {
                        distance_ok = false;
                    }
                    if n > 0 {
                        let y_moved = wy[n] != wy[n - 1];
                        let z_moved = wz[n] != wz[n - 1];
                        let expect_y = ell[n - 1] == 1;
                        // Exactly one path may move, matching the switch
                        // sequence; a self-loop kernel step moves neither.
                        if y_moved && z_moved {
                            one_mover_ok = false;
                        }
                        if (y_moved && !expect_y) || (z_moved && expect_y) {
                            one_mover_ok = false;
                        }
                    }
                    key.push((wy[n].clone(), wz[n].clone()));
                }
                *constructed.entry(key).or_insert(0.0) += weight;
                continue;
            }
            let cur = zpath.last().unwrap();
            for (next, p) in g.kernel_support(cur) {
                let mut zp = zpath.clone();
                zp.push(next);
                stack.push((zp, weight * p));
            }
        }
        paths_per_sequence = n_paths;

        // Direct law: the mover steps by the kernel, the other stands still.
        let mut direct: HashMap<Vec<(SiteId, SiteId)>, f64> = HashMap::new();
        let mut frontier: Vec<(Vec<(SiteId, SiteId)>, f64)> =
            vec![(vec![(y.clone(), z.clone())], 1.0)];
        for &l in ell {
            let mut next_frontier = Vec::new();
            for (hist, weight) in frontier {
                let (wy, wz) = hist.last().unwrap().clone();
                let mover = if l == 1 { &wy } else { &wz };
                for (dest, p) in g.kernel_support(mover) {
                    let mut h = hist.clone();
                    if l == 1 {
                        h.push((dest, wz.clone()));
                    } else {
                        h.push((wy.clone(), dest));
                    }
                    next_frontier.push((h, weight * p));
                }
            }
            frontier = next_frontier;
        }
        for (h, w) in frontier {
            *direct.entry(h).or_insert(0.0) += w;
        }

        // Total variation between the two measures.
        let mut keys: Vec<_> = constructed.keys().cloned().collect();
        for k in direct.keys() {
            if !constructed.contains_key(k) {
                keys.push(k.clone());
            }
        }
        let tv: f64 = 0.5
            * keys
                .iter()
                .map(|k| {
                    (constructed.get(k).copied().unwrap_or(0.0)
                        - direct.get(k).copied().unwrap_or(0.0))
                    .abs()
                })
                .sum::<f64>();
        max_tv = max_tv.max(tv);
    }

    let ok = distance_ok && one_mover_ok && max_tv < 1e-12;
    Ok(EntangleCheckReport {
        graph: g.spec_string(),
        n_steps,
        switch_sequences: ells.len() as u64,
        paths_per_sequence,
        max_tv,
        distance_invariant_ok: distance_ok,
        one_mover_ok,
        ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::KernelSpec;

    fn cycle(l: u32) -> ReflectiveGraph {
        ReflectiveGraph::make_torus(1, l, KernelSpec::nn(1)).unwrap()
    }

    fn params(d_a: f64, d_b: f64) -> SimParams {
        SimParams {
            d_a,
            d_b,
            t_max: 10.0,
        }
    }

    #[test]
    fn two_cycle_pair_has_two_states_rate_two() {
        let g = cycle(2);
        let init = Configuration::from_counts(vec![1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 100).unwrap();
        assert_eq!(chain.states.len(), 2);
        assert!((chain.exit[0] - 2.0).abs() < 1e-12);
        let empty = chain.state_index(&[0, 0]).unwrap();
        assert_eq!(chain.rates[0], vec![(empty, 2.0)]);
    }

    #[test]
    fn single_particle_on_k3() {
        let g = ReflectiveGraph::make_complete(3).unwrap();
        let init = Configuration::from_counts(vec![1, 0, 0]);
        let chain = build_generator(&g, &init, &params(1.0, 0.0), 100).unwrap();
        assert_eq!(chain.states.len(), 3);
        for row in &chain.rates {
            assert_eq!(row.len(), 2);
            for &(_, r) in row {
                assert!((r - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_cycle_three_particles_state_count() {
        // One A and two B's on a 3-cycle. The reachable occupancy states are
        // every non-coexisting placement: 3 A-positions x 3 B-multisets on
        // the other two sites (both left, both right, split) = 9, plus the 3
        // single-B states after one annihilation.
        let g = cycle(3);
        let init = Configuration::from_counts(vec![1, -1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 100).unwrap();
        assert_eq!(chain.states.len(), 12);
        let with_a = chain
            .states
            .iter()
            .filter(|s| s.iter().any(|&c| c > 0))
            .count();
        assert_eq!(with_a, 9);
        for s in &chain.states {
            let na: i32 = s.iter().map(|&c| c.max(0)).sum();
            let nb: i32 = s.iter().map(|&c| (-c).max(0)).sum();
            assert_eq!(na - nb, -1);
        }
    }

    #[test]
    fn transient_at_zero_is_point_mass() {
        let g = cycle(2);
        let init = Configuration::from_counts(vec![1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 100).unwrap();
        let pi = transient_solve(&chain, 0.0, 1e-10).unwrap();
        assert_eq!(pi[0], 1.0);
    }

    #[test]
    fn two_cycle_alive_probability_closed_form() {
        let g = cycle(2);
        let init = Configuration::from_counts(vec![1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 100).unwrap();
        let pi = transient_solve(&chain, 1.0, 1e-12).unwrap();
        assert!((pi[0] - (-2.0f64).exp()).abs() < 1e-10);
        // Density per site at t = 1: rho = e^{-2}.
        let (mu_a, mu_b, rho, theta) = exact_density(&chain, 1.0, 1e-12).unwrap();
        assert!((mu_a - (-2.0f64).exp() / 2.0).abs() < 1e-10);
        assert!((rho - (-2.0f64).exp()).abs() < 1e-10);
        assert!((mu_a - 0.5 - (mu_b - 0.5)).abs() < 1e-12);
        assert!((theta - (0.5 - mu_a)).abs() < 1e-12);
    }

    #[test]
    fn transient_distributions_are_stochastic() {
        let g = cycle(4);
        let init = Configuration::from_counts(vec![2, -1, 0, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 0.7), 20_000).unwrap();
        for &t in &[0.3, 1.0, 3.0] {
            let pi = transient_solve(&chain, t, 1e-10).unwrap();
            assert!(pi.iter().all(|&p| p >= 0.0));
            let sum: f64 = pi.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        }
    }

    #[test]
    fn truncation_tolerance_respected() {
        let g = cycle(4);
        let init = Configuration::from_counts(vec![1, -1, 1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 20_000).unwrap();
        let coarse = transient_solve(&chain, 2.0, 1e-4).unwrap();
        let fine = transient_solve(&chain, 2.0, 1e-12).unwrap();
        let diff: f64 = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff < 1e-4 + 1e-12, "{diff}");
    }

    #[test]
    fn single_type_density_constant() {
        let g = cycle(3);
        let init = Configuration::from_counts(vec![1, 1, 0]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 1000).unwrap();
        let (mu_a, _, _, theta) = exact_density(&chain, 2.5, 1e-10).unwrap();
        assert!((mu_a - 2.0 / 3.0).abs() < 1e-9);
        assert!(theta.abs() < 1e-9);
    }

    #[test]
    fn cap_exceeded_reports_count() {
        let g = cycle(8);
        let init = Configuration::from_counts(vec![1, -1, 1, -1, 1, -1, 1, -1]);
        let err = build_generator(&g, &init, &params(1.0, 1.0), 5).unwrap_err();
        assert!(matches!(err, Error::StateCapExceeded { .. }));
    }

    #[test]
    fn empirical_state_distribution_matches_transient() {
        // The event-driven engine's occupancy at time t, sampled over many
        // replicas of the 3-cycle instance, matches the exact transient
        // distribution state by state within multinomial 3-sigma bounds.
        let g = cycle(3);
        let init = Configuration::from_counts(vec![1, -1, -1]);
        let p = params(1.0, 1.0);
        let chain = build_generator(&g, &init, &p, 100).unwrap();
        let reps = 40_000u32;
        for t in [0.5, 2.0] {
            let pi = transient_solve(&chain, t, 1e-10).unwrap();
            let mut counts = vec![0u32; chain.states.len()];
            let run_p = SimParams {
                d_a: 1.0,
                d_b: 1.0,
                t_max: t,
            };
            for seed in 0..reps {
                let res = crate::sim::evolve(
                    &g,
                    &init,
                    &run_p,
                    seed as u64,
                    &mut [],
                    &Default::default(),
                )
                .unwrap();
                let idx = chain
                    .state_index(res.final_config.counts())
                    .expect("reachable state");
                counts[idx] += 1;
            }
            for (i, &c) in counts.iter().enumerate() {
                let p_i = pi[i];
                let sigma = (p_i * (1.0 - p_i) / reps as f64).sqrt();
                let diff = (c as f64 / reps as f64 - p_i).abs();
                assert!(
                    diff <= 3.0 * sigma.max(1e-4),
                    "state {i} at t={t}: {} vs {p_i}",
                    c as f64 / reps as f64
                );
            }
        }
    }

    #[test]
    fn single_walker_position_law_on_k4() {
        // Marginal sanity: one A-particle's position at fixed t follows the
        // kernel's t-step law (chi-square against the transient solve).
        let g = ReflectiveGraph::make_complete(4).unwrap();
        let init = Configuration::from_counts(vec![1, 0, 0, 0]);
        let p = params(1.0, 0.0);
        let chain = build_generator(&g, &init, &p, 100).unwrap();
        let reps = 30_000u32;
        for t in [0.5, 1.0, 2.0] {
            let pi = transient_solve(&chain, t, 1e-10).unwrap();
            let run_p = SimParams {
                d_a: 1.0,
                d_b: 0.0,
                t_max: t,
            };
            let mut counts = vec![0u64; chain.states.len()];
            for seed in 0..reps {
                let res = crate::sim::evolve(
                    &g,
                    &init,
                    &run_p,
                    seed as u64,
                    &mut [],
                    &Default::default(),
                )
                .unwrap();
                counts[chain.state_index(res.final_config.counts()).unwrap()] += 1;
            }
            let (stat, pval) = crate::stats::chi_square_test(&counts, &pi);
            assert!(pval > 0.01, "t={t}: chi-square {stat} p={pval}");
        }
    }

    #[test]
    fn integrated_occupancy_of_absorbing_pair() {
        // For the 2-cycle pair, occupancy of the alive state integrates to
        // (1 - e^{-2t}) / 2.
        let g = cycle(2);
        let init = Configuration::from_counts(vec![1, -1]);
        let chain = build_generator(&g, &init, &params(1.0, 1.0), 100).unwrap();
        let t = 1.7;
        let occ = integrated_occupancy(&chain, t, 1e-12).unwrap();
        let expect = (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!((occ[0] - expect).abs() < 1e-9, "{} vs {expect}", occ[0]);
    }
}
