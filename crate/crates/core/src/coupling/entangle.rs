//! Entangled pairs of walks on reflective graphs: two discrete paths built
//! from one driving walk `Z` and a switch sequence, glued by reflections so
//! that their mutual distance reproduces the distance of `Z` from the second
//! start site.

use crate::error::{Error, Result};
use crate::graph::{Automorphism, ReflectiveGraph, SiteId};
use crate::rng::Stream;

/// Build the pair `(W^y, W^z)` from a driving path and a switch sequence.
///
/// `zpath[0]` is the start of the first walk; `ell[n-1]` says which walk
/// performs step `n` (1 for the first, 2 for the second; the implicit entry
/// before the sequence is 1). At a switch, the reflection exchanging the two
/// current resting positions is composed in, so the mover continues from its
/// own position with a kernel-distributed step.
pub fn entangle_discrete(
    g: &ReflectiveGraph,
    zpath: &[SiteId],
    z: &SiteId,
    ell: &[u8],
) -> Result<(Vec<SiteId>, Vec<SiteId>)> {
    if zpath.is_empty() {
        return Err(Error::InvalidParams("driving path must contain Z_0".into()));
    }
    if ell.len() + 1 != zpath.len() {
        return Err(Error::InvalidParams(format!(
            "switch sequence has {} entries for {} steps",
            ell.len(),
            zpath.len() - 1
        )));
    }
    if ell.iter().any(|&l| l != 1 && l != 2) {
        return Err(Error::InvalidParams("switch entries must be 1 or 2".into()));
    }

    let mut wy = vec![zpath[0].clone()];
    let mut wz = vec![z.clone()];
    let mut autos: Vec<Automorphism> = Vec::new();
    let mut prev = 1u8;

    for (n, &l) in ell.iter().enumerate() {
        let cur_y = wy.last().unwrap().clone();
        let cur_z = wz.last().unwrap().clone();
        if l != prev {
            // Reflect the previous mover's rest into the new mover's start.
            let (a, b) = if prev == 1 {
                (cur_y.clone(), cur_z.clone())
            } else {
                (cur_z.clone(), cur_y.clone())
            };
            autos.push(g.swap_automorphism(&a, &b));
        }
        let mut image = zpath[n + 1].clone();
        for auto in &autos {
            image = auto.apply(&image);
        }
        if l == 1 {
            wy.push(image);
            wz.push(cur_z);
        } else {
            wy.push(cur_y);
            wz.push(image);
        }
        prev = l;
    }

    Ok((wy, wz))
}

/// Incremental form of the same construction, used to drive entangled tracers
/// in continuous time. The driving path is materialized lazily from a stream,
/// so a faster observer (the upper path) may look ahead without disturbing
/// the mover sequence.
pub struct EntangleState {
    z_start: SiteId,
    /// Original (untransformed) driving path, extended on demand.
    z_path: Vec<SiteId>,
    z_stream: Stream,
    autos: Vec<Automorphism>,
    pos_y: SiteId,
    pos_z: SiteId,
    moves: usize,
    prev: u8,
}

impl EntangleState {
    pub fn new(y: SiteId, z: SiteId, z_stream: Stream) -> Self {
        EntangleState {
            z_start: z.clone(),
            z_path: vec![y.clone()],
            z_stream,
            autos: Vec::new(),
            pos_y: y,
            pos_z: z,
            moves: 0,
            prev: 1,
        }
    }

    pub fn positions(&self) -> (&SiteId, &SiteId) {
        (&self.pos_y, &self.pos_z)
    }

    pub fn moves(&self) -> usize {
        self.moves
    }

    /// The driving path, materialized at least up to index `n`.
    pub fn z_prefix(&mut self, g: &ReflectiveGraph, n: usize) -> &[SiteId] {
        while self.z_path.len() <= n {
            let next = g.sample_step(self.z_path.last().unwrap(), &mut self.z_stream);
            self.z_path.push(next);
        }
        &self.z_path[..=n]
    }

    /// Advance the walk named by `who` (1 or 2) one entangled step. Returns
    /// the mover's new position, asserting the distance identity
    /// `d(W^y_n, W^z_n) = d(Z_n, z)` exactly.
    pub fn step(&mut self, g: &ReflectiveGraph, who: u8) -> Result<SiteId> {
        let n = self.moves + 1;
        self.z_prefix(g, n);
        if who != self.prev {
            let (a, b) = if self.prev == 1 {
                (self.pos_y.clone(), self.pos_z.clone())
            } else {
                (self.pos_z.clone(), self.pos_y.clone())
            };
            self.autos.push(g.swap_automorphism(&a, &b));
        }
        let mut image = self.z_path[n].clone();
        for auto in &self.autos {
            image = auto.apply(&image);
        }
        if who == 1 {
            self.pos_y = image.clone();
        } else {
            self.pos_z = image.clone();
        }
        self.prev = who;
        self.moves = n;

        let lhs = g.distance(&self.pos_y, &self.pos_z);
        let rhs = g.distance(&self.z_path[n], &self.z_start);
        if lhs != rhs {
            return Err(Error::InvariantViolation {
                invariant: "entangled distance identity".into(),
                seed: 0,
                detail: format!("step {n}: d(W^y,W^z)={lhs} but d(Z_n,z)={rhs}"),
            });
        }
        Ok(image)
    }
}

/// One continuous-time entangled run of two always-wandering walkers, each
/// ringing at rate `rate`; every ring moves its walker.
#[derive(Debug)]
pub struct WanderingEntangledRun {
    pub times: Vec<f64>,
    pub ell: Vec<u8>,
    pub path_y: Vec<SiteId>,
    pub path_z: Vec<SiteId>,
    /// Driving path prefix consumed by the moves.
    pub z_path: Vec<SiteId>,
}

pub fn entangle_wandering(
    g: &ReflectiveGraph,
    y: &SiteId,
    z: &SiteId,
    rate: f64,
    t_max: f64,
    z_stream: Stream,
    mut clock_y: Stream,
    mut clock_z: Stream,
) -> Result<WanderingEntangledRun> {
    if !(rate > 0.0) {
        return Err(Error::InvalidParams("rate must be positive".into()));
    }
    let mut state = EntangleState::new(y.clone(), z.clone(), z_stream);
    let mut t_y = clock_y.next_exp(rate);
    let mut t_z = clock_z.next_exp(rate);
    let mut out = WanderingEntangledRun {
        times: Vec::new(),
        ell: Vec::new(),
        path_y: vec![y.clone()],
        path_z: vec![z.clone()],
        z_path: Vec::new(),
    };
    loop {
        let (t, who) = if t_y <= t_z { (t_y, 1u8) } else { (t_z, 2u8) };
        if t > t_max {
            break;
        }
        state.step(g, who)?;
        out.times.push(t);
        out.ell.push(who);
        let (py, pz) = state.positions();
        out.path_y.push(py.clone());
        out.path_z.push(pz.clone());
        if who == 1 {
            t_y += clock_y.next_exp(rate);
        } else {
            t_z += clock_z.next_exp(rate);
        }
    }
    let n = state.moves();
    out.z_path = state.z_prefix(g, n).to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::KernelSpec;
    use crate::rng::{salt, StreamKey};

    fn cycle(l: u32) -> ReflectiveGraph {
        ReflectiveGraph::make_torus(1, l, KernelSpec::nn(1)).unwrap()
    }

    #[test]
    fn all_ones_replays_z() {
        let g = cycle(8);
        let z_path: Vec<SiteId> = [0u32, 1, 2, 3].iter().map(|&i| SiteId::Ix(i)).collect();
        let (wy, wz) = entangle_discrete(&g, &z_path, &SiteId::Ix(5), &[1, 1, 1]).unwrap();
        assert_eq!(wy, z_path);
        assert!(wz.iter().all(|s| *s == SiteId::Ix(5)));
    }

    #[test]
    fn six_cycle_example() {
        let g = cycle(6);
        let z_path: Vec<SiteId> = [0u32, 1, 2].iter().map(|&i| SiteId::Ix(i)).collect();
        let (wy, wz) = entangle_discrete(&g, &z_path, &SiteId::Ix(3), &[1, 2]).unwrap();
        assert_eq!(wy, vec![SiteId::Ix(0), SiteId::Ix(1), SiteId::Ix(1)]);
        assert_eq!(wz, vec![SiteId::Ix(3), SiteId::Ix(3), SiteId::Ix(2)]);
        assert_eq!(g.distance(&wy[2], &wz[2]), 1);
    }

    #[test]
    fn degenerate_same_start() {
        let g = cycle(8);
        let key = StreamKey::new(4, salt::ENTANGLE_WALK);
        let run = entangle_wandering(
            &g,
            &SiteId::Ix(2),
            &SiteId::Ix(2),
            1.0,
            5.0,
            key.stream(),
            StreamKey::new(4, salt::TRACER_CLOCK).with(1).stream(),
            StreamKey::new(4, salt::TRACER_CLOCK).with(2).stream(),
        )
        .unwrap();
        // Distance identity asserted inside; starting distance is zero.
        assert_eq!(g.distance(&run.path_y[0], &run.path_z[0]), 0);
        assert!(!run.times.is_empty());
    }

    #[test]
    fn wandering_run_on_tree_checks_invariant() {
        let g = ReflectiveGraph::make_tree(3).unwrap();
        let y = SiteId::Word(vec![]);
        let z = SiteId::Word(vec![0, 1]);
        let key = StreamKey::new(9, salt::ENTANGLE_WALK);
        let run = entangle_wandering(
            &g,
            &y,
            &z,
            1.0,
            8.0,
            key.stream(),
            StreamKey::new(9, salt::TRACER_CLOCK).with(1).stream(),
            StreamKey::new(9, salt::TRACER_CLOCK).with(2).stream(),
        )
        .unwrap();
        assert!(run.times.len() > 3);
        // Exactly one walker moves per step.
        for n in 1..run.path_y.len() {
            let moved_y = run.path_y[n] != run.path_y[n - 1];
            let moved_z = run.path_z[n] != run.path_z[n - 1];
            assert!(moved_y ^ moved_z);
        }
    }
}
