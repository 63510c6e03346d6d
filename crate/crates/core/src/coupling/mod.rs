//! Coupled evolutions and tracers: two systems sharing instructions, with
//! signed tracers following every discrepancy between them.
//!
//! Two couplings are provided. In the *following* coupling (equal rates) all
//! particles move by their own instruction streams and tracers are pure
//! bookkeeping. In the *dragging* coupling (general rates) each tracer is
//! sampled a priori as a triple (discrete walk, A-clock, B-subclock) and the
//! tracked particle is forced along it, which fixes tracer trajectories
//! without changing either marginal law.
//!
//! The central runtime check is the difference identity: at every event the
//! pointwise difference of the two configurations equals the signed sum of
//! active tracer positions, exactly.

pub mod entangle;

pub use entangle::{entangle_discrete, entangle_wandering, EntangleState, WanderingEntangledRun};

use std::collections::{BTreeMap, BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{site_hash, ReflectiveGraph, SiteId};
use crate::init::{sample_initial, Configuration, InitialLaw};
use crate::rng::{salt, Stream, StreamKey};
use crate::sim::{
    evolve, label_stream, AnnihilationTime, Event, EventLog, EvolveOptions, EvolveResult, Label,
    LedgerRow, MassLedger, Observer, SimParams, SiteResidents,
};

// ---------------------------------------------------------------------------
// Coupled initial conditions
// ---------------------------------------------------------------------------

/// A pair of initial conditions differing by `+K` on `plus_sites` and `-K` on
/// `minus_sites`, with both marginals i.i.d. with the same law.
#[derive(Debug, Clone)]
pub struct CoupledInit {
    pub base: Configuration,
    pub shifted: Configuration,
    pub plus_sites: Vec<u32>,
    pub minus_sites: Vec<u32>,
    pub m: f64,
    pub n: i64,
    pub k: u32,
}

impl CoupledInit {
    /// Validate the defining relation `shifted - base = +-K` on the marked
    /// sites and zero elsewhere.
    pub fn validate(&self) -> Result<()> {
        let k = self.k as i32;
        for (ix, (&a, &b)) in self
            .base
            .counts()
            .iter()
            .zip(self.shifted.counts())
            .enumerate()
        {
            let ix = ix as u32;
            let expect = if self.plus_sites.contains(&ix) {
                k
            } else if self.minus_sites.contains(&ix) {
                -k
            } else {
                0
            };
            if b - a != expect {
                return Err(Error::InvalidParams(format!(
                    "coupled init broken at site {ix}: shifted-base = {} expected {expect}",
                    b - a
                )));
            }
        }
        Ok(())
    }
}

/// The coupling of initial conditions: re-draw sites holding `n` up to level
/// `n+K` with probability `r1 = m/(2 nu(n))`, and vice versa with
/// `r2 = m/(2 nu(n+K))`, so each site joins `A_m^+` and `A_m^-` with
/// probability `m/2` and both marginals keep law `nu`.
pub fn couple_initial(
    g: &ReflectiveGraph,
    nu: &InitialLaw,
    m: f64,
    n: i64,
    k: u32,
    seed: u64,
) -> Result<CoupledInit> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidParams(format!("m = {m} out of [0,1]")));
    }
    if k == 0 {
        return Err(Error::InvalidParams("K must be at least 1".into()));
    }
    let p_n = nu.prob(n);
    let p_nk = nu.prob(n + k as i64);
    if p_n <= 0.0 || p_nk <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "nu({n}) = {p_n} and nu({}) = {p_nk} must both be positive",
            n + k as i64
        )));
    }
    let bound = 2.0 * p_n.min(p_nk);
    if m > bound {
        return Err(Error::InvalidParams(format!(
            "m = {m} exceeds 2*min(nu({n}), nu({})) = {bound}",
            n + k as i64
        )));
    }
    let r1 = m / (2.0 * p_n);
    let r2 = m / (2.0 * p_nk);

    let base = sample_initial(g, nu, seed)?;
    let key = StreamKey::new(seed, salt::COUPLING_U);
    let mut shifted = base.clone();
    let mut plus_sites = Vec::new();
    let mut minus_sites = Vec::new();
    for ix in 0..base.len() as u32 {
        let u = key.with(site_hash(&SiteId::Ix(ix))).stream().next_f64();
        let v = base.get(ix) as i64;
        if v == n && u <= r1 {
            shifted.set(ix, (n + k as i64) as i32);
            plus_sites.push(ix);
        } else if v == n + k as i64 && u <= r2 {
            shifted.set(ix, n as i32);
            minus_sites.push(ix);
        }
    }
    Ok(CoupledInit {
        base,
        shifted,
        plus_sites,
        minus_sites,
        m,
        n,
        k,
    })
}

// ---------------------------------------------------------------------------
// Tracers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracerSign {
    Plus,
    Minus,
}

impl TracerSign {
    pub fn delta(self) -> i64 {
        match self {
            TracerSign::Plus => 1,
            TracerSign::Minus => -1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            TracerSign::Plus => "+",
            TracerSign::Minus => "-",
        }
    }
}

/// Discrepancy class of a particle given its type and per-system liveness:
/// an extra A in the shifted system or an extra B in the base system is a
/// plus discrepancy; the mirror cases are minus.
fn discrepancy_class(is_a: bool, alive: [bool; 2]) -> Option<TracerSign> {
    match alive {
        [true, false] => Some(if is_a { TracerSign::Minus } else { TracerSign::Plus }),
        [false, true] => Some(if is_a { TracerSign::Plus } else { TracerSign::Minus }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingRecord {
    pub t: f64,
    pub also_b: bool,
    pub moved: bool,
}

#[derive(Debug, Clone)]
pub struct TracerReport {
    pub origin: (u32, u32),
    pub sign: TracerSign,
    pub start_pos: u32,
    pub wandering_since: Option<f64>,
    /// Positions after each move while the run lasted, starting at t = 0.
    pub path: Vec<(f64, u32)>,
    /// All A-clock rings (general coupling with detail recording).
    pub rings: Vec<RingRecord>,
    /// Walk stream at creation; replays the discrete path `W` for the
    /// bounding-walk reconstruction.
    pub walk_stream_start: Option<Stream>,
}

/// The two bounding walks of a tracer triple: same discrete path, driven by
/// the B-subclock (lower) and the full A-clock (upper).
#[derive(Debug, Clone)]
pub struct BoundingWalks {
    pub lower: Vec<(f64, u32)>,
    pub actual: Vec<(f64, u32)>,
    pub upper: Vec<(f64, u32)>,
}

/// Reconstruct the bounding walks from a recorded tracer triple.
pub fn bounding_paths(g: &ReflectiveGraph, report: &TracerReport) -> Result<BoundingWalks> {
    let mut stream = report.walk_stream_start.ok_or_else(|| {
        Error::InvalidParams("tracer has no pre-sampled triple (equal-rate coupling?)".into())
    })?;
    let n_steps = report.rings.len();
    let mut w = Vec::with_capacity(n_steps + 1);
    w.push(report.start_pos);
    for _ in 0..n_steps {
        let next = g.step_ix(*w.last().unwrap(), &mut stream);
        w.push(next);
    }
    let mut lower = vec![(0.0, report.start_pos)];
    let mut actual = vec![(0.0, report.start_pos)];
    let mut upper = vec![(0.0, report.start_pos)];
    let (mut i_low, mut i_act, mut i_up) = (0usize, 0usize, 0usize);
    for ring in &report.rings {
        i_up += 1;
        upper.push((ring.t, w[i_up]));
        if ring.moved {
            i_act += 1;
            actual.push((ring.t, w[i_act]));
        }
        if ring.also_b {
            i_low += 1;
            lower.push((ring.t, w[i_low]));
        }
    }
    Ok(BoundingWalks {
        lower,
        actual,
        upper,
    })
}

/// Lazily materialized wandering extension: an independent walk from the
/// point where a tracer went wandering.
pub fn wandering_extension(
    g: &ReflectiveGraph,
    seed: u64,
    origin: (u32, u32),
    from: (f64, u32),
    rate: f64,
    t_max: f64,
) -> Vec<(f64, u32)> {
    let mut s = StreamKey::new(seed, salt::WANDER)
        .with(site_hash(&SiteId::Ix(origin.0)))
        .with(origin.1 as u64)
        .stream();
    let mut out = vec![from];
    let (mut t, mut pos) = from;
    loop {
        t += s.next_exp(rate);
        if t > t_max {
            return out;
        }
        pos = g.step_ix(pos, &mut s);
        out.push((t, pos));
    }
}

// ---------------------------------------------------------------------------
// The merged two-system engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Particles move by their own streams; tracers follow.
    Following,
    /// Discrepant particles are dragged along pre-sampled tracer triples.
    Dragging,
}

#[derive(Debug, Clone)]
pub struct CoupledOptions {
    pub record_events: bool,
    /// Record every tracer ring and keep wandering tracers moving on their
    /// A-clocks (needed for bounding walks and the entangled upper path).
    pub record_tracer_detail: bool,
    pub ledger_times: Vec<f64>,
    /// Entangle the two named tracers (origin site, index) through one
    /// shared driving walk. Requires `record_tracer_detail`.
    pub entangled_pair: Option<((u32, u32), (u32, u32))>,
    pub check_identity: bool,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions {
            record_events: false,
            record_tracer_detail: false,
            ledger_times: Vec::new(),
            entangled_pair: None,
            check_identity: true,
        }
    }
}

#[derive(Debug)]
pub struct EntangledReport {
    /// Times of actual moves of the entangled difference walk.
    pub move_times: Vec<f64>,
    /// Times of every A-ring of either entangled tracer (the union clock
    /// driving the upper path).
    pub union_ring_times: Vec<f64>,
    /// Driving walk prefix, long enough for the upper path.
    pub z_path: Vec<SiteId>,
}

pub struct CoupledResult {
    pub log_base: EventLog,
    pub log_shifted: EventLog,
    pub ledger_base: MassLedger,
    pub ledger_shifted: MassLedger,
    pub tracers: Vec<TracerReport>,
    pub identity_checks: u64,
    pub tie_count: u64,
    pub entangled: Option<EntangledReport>,
}

struct CParticle {
    label: Label,
    pos: u32,
    braveness: f64,
    stream: Stream,
    rate: f64,
    alive: [bool; 2],
    dragged: bool,
    tracked_by: Option<u32>,
}

impl CParticle {
    fn class(&self) -> Option<TracerSign> {
        discrepancy_class(self.label.is_a(), self.alive)
    }
}

enum TracerState {
    Active { particle: u32 },
    Wandering { since: f64 },
}

struct TracerRt {
    origin: (u32, u32),
    sign: TracerSign,
    state: TracerState,
    pos: u32,
    start_pos: u32,
    path: Vec<(f64, u32)>,
    walk_stream_start: Option<Stream>,
    walk_stream: Option<Stream>,
    clock_stream: Option<Stream>,
    next_also_b: bool,
    rings: Vec<RingRecord>,
    entangled_as: Option<u8>,
}

#[derive(Clone, Copy, PartialEq)]
struct QEntry {
    t: f64,
    kind: u8, // 0 = particle jump, 1 = tracer ring
    id: u32,
}

impl Eq for QEntry {}
impl PartialOrd for QEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.id.cmp(&self.id))
    }
}

struct EntangleDriver {
    state: EntangleState,
    move_times: Vec<f64>,
    union_ring_times: Vec<f64>,
}

struct Engine<'g> {
    g: &'g ReflectiveGraph,
    params: SimParams,
    seed: u64,
    mode: Mode,
    opts: CoupledOptions,
    particles: Vec<CParticle>,
    occ: [Vec<i32>; 2],
    residents: [Vec<SiteResidents>; 2],
    diff: HashMap<u32, i64>,
    tracers: Vec<TracerRt>,
    heap: BinaryHeap<QEntry>,
    logs: [EventLog; 2],
    ledgers: [MassLedger; 2],
    n_a: [u64; 2],
    n_b: [u64; 2],
    annih: [u64; 2],
    identity_checks: u64,
    tie_count: u64,
    prev_t: f64,
    next_checkpoint: usize,
    entangle: Option<EntangleDriver>,
}

impl<'g> Engine<'g> {
    fn new(
        g: &'g ReflectiveGraph,
        init: &CoupledInit,
        params: SimParams,
        seed: u64,
        mode: Mode,
        opts: CoupledOptions,
    ) -> Result<Self> {
        params.validate()?;
        init.validate()?;
        let n_sites = g.finite_count()? as usize;
        if init.base.len() != n_sites {
            return Err(Error::InvalidParams(
                "coupled init does not match the graph".into(),
            ));
        }
        if opts.entangled_pair.is_some() && !opts.record_tracer_detail {
            return Err(Error::InvalidParams(
                "entangled pair requires record_tracer_detail".into(),
            ));
        }

        let mut engine = Engine {
            g,
            params,
            seed,
            mode,
            opts,
            particles: Vec::new(),
            occ: [vec![0; n_sites], vec![0; n_sites]],
            residents: [
                vec![SiteResidents::default(); n_sites],
                vec![SiteResidents::default(); n_sites],
            ],
            diff: HashMap::new(),
            tracers: Vec::new(),
            heap: BinaryHeap::new(),
            logs: [
                EventLog::with_t_max(params.t_max),
                EventLog::with_t_max(params.t_max),
            ],
            ledgers: [
                MassLedger {
                    rows: Vec::new(),
                    sites: n_sites as u64,
                },
                MassLedger {
                    rows: Vec::new(),
                    sites: n_sites as u64,
                },
            ],
            n_a: [0; 2],
            n_b: [0; 2],
            annih: [0; 2],
            identity_checks: 0,
            tie_count: 0,
            prev_t: f64::NEG_INFINITY,
            next_checkpoint: 0,
            entangle: None,
        };

        // Particles: union of the labels of both initial conditions.
        let present = |v: i32, j: i32| (j > 0 && j <= v) || (j < 0 && j >= v);
        for site in 0..n_sites as u32 {
            let a = init.base.get(site);
            let b = init.shifted.get(site);
            let lo = a.min(b).min(0);
            let hi = a.max(b).max(0);
            for j in lo..=hi {
                if j == 0 {
                    continue;
                }
                let alive = [present(a, j), present(b, j)];
                if !alive[0] && !alive[1] {
                    continue;
                }
                let label = Label { site, j };
                let mut stream = label_stream(seed, label, 0);
                let braveness = stream.next_f64();
                let rate = if j > 0 { params.d_a } else { params.d_b };
                let idx = engine.particles.len() as u32;
                engine.particles.push(CParticle {
                    label,
                    pos: site,
                    braveness,
                    stream,
                    rate,
                    alive,
                    dragged: false,
                    tracked_by: None,
                });
                for sys in 0..2 {
                    if alive[sys] {
                        engine.insert_occ(sys, idx, site);
                    }
                }
            }
        }

        // Tracers at discrepancy sites, one per discrepant label.
        for (sites, sign) in [
            (&init.plus_sites, TracerSign::Plus),
            (&init.minus_sites, TracerSign::Minus),
        ] {
            for &y in sites.iter() {
                let mut discrepant: Vec<u32> = engine
                    .particles
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.label.site == y && p.class().is_some())
                    .map(|(i, _)| i as u32)
                    .collect();
                discrepant.sort_by_key(|&i| engine.particles[i as usize].label.j);
                if discrepant.len() != init.k as usize {
                    return Err(Error::InvalidParams(format!(
                        "site {y} has {} discrepant labels, expected K = {}",
                        discrepant.len(),
                        init.k
                    )));
                }
                for (i, &pidx) in discrepant.iter().enumerate() {
                    let p = &engine.particles[pidx as usize];
                    if p.class() != Some(sign) {
                        return Err(Error::InvalidParams(format!(
                            "discrepant label {:?} at site {y} has the wrong sign",
                            p.label
                        )));
                    }
                    let tid = engine.tracers.len() as u32;
                    let (walk, clock) = if mode == Mode::Dragging {
                        let walk = StreamKey::new(seed, salt::TRACER_WALK)
                            .with(site_hash(&SiteId::Ix(y)))
                            .with(i as u64 + 1)
                            .stream();
                        let clock = StreamKey::new(seed, salt::TRACER_CLOCK)
                            .with(site_hash(&SiteId::Ix(y)))
                            .with(i as u64 + 1)
                            .stream();
                        (Some(walk), Some(clock))
                    } else {
                        (None, None)
                    };
                    engine.tracers.push(TracerRt {
                        origin: (y, i as u32 + 1),
                        sign,
                        state: TracerState::Active { particle: pidx },
                        pos: y,
                        start_pos: y,
                        path: vec![(0.0, y)],
                        walk_stream_start: walk,
                        walk_stream: walk,
                        clock_stream: clock,
                        next_also_b: false,
                        rings: Vec::new(),
                        entangled_as: None,
                    });
                    engine.particles[pidx as usize].tracked_by = Some(tid);
                    if mode == Mode::Dragging {
                        engine.particles[pidx as usize].dragged = true;
                    }
                }
            }
        }

        // Entangled pair setup.
        if let Some((oy, oz)) = engine.opts.entangled_pair {
            let find = |engine: &Engine, o: (u32, u32)| {
                engine
                    .tracers
                    .iter()
                    .position(|t| t.origin == o)
                    .ok_or_else(|| {
                        Error::InvalidParams(format!("no tracer with origin {o:?}"))
                    })
            };
            let iy = find(&engine, oy)?;
            let iz = find(&engine, oz)?;
            if iy == iz {
                return Err(Error::InvalidParams("entangled pair must be distinct".into()));
            }
            engine.tracers[iy].entangled_as = Some(1);
            engine.tracers[iz].entangled_as = Some(2);
            let z_stream = StreamKey::new(seed, salt::ENTANGLE_WALK)
                .with(site_hash(&SiteId::Ix(oy.0)))
                .with(site_hash(&SiteId::Ix(oz.0)))
                .stream();
            engine.entangle = Some(EntangleDriver {
                state: EntangleState::new(
                    SiteId::Ix(engine.tracers[iy].pos),
                    SiteId::Ix(engine.tracers[iz].pos),
                    z_stream,
                ),
                move_times: Vec::new(),
                union_ring_times: Vec::new(),
            });
        }

        // Scheduling: self-driven particles, and tracer rings when dragging.
        for idx in 0..engine.particles.len() as u32 {
            let p = &engine.particles[idx as usize];
            let self_driven = match mode {
                Mode::Following => true,
                Mode::Dragging => !p.dragged,
            };
            let rate = p.rate;
            if self_driven && rate > 0.0 {
                let dt = engine.particles[idx as usize].stream.next_exp(rate);
                engine.heap.push(QEntry {
                    t: dt,
                    kind: 0,
                    id: idx,
                });
            }
        }
        if mode == Mode::Dragging {
            for tid in 0..engine.tracers.len() as u32 {
                engine.schedule_ring(tid, 0.0);
            }
        }

        for sys in 0..2 {
            let cfg = if sys == 0 { &init.base } else { &init.shifted };
            engine.n_a[sys] = cfg.n_a();
            engine.n_b[sys] = cfg.n_b();
            engine.ledgers[sys].rows.push(LedgerRow {
                t: 0.0,
                n_a: engine.n_a[sys],
                n_b: engine.n_b[sys],
                annihilations: 0,
            });
        }
        engine.verify_identity(0.0)?;
        Ok(engine)
    }

    fn insert_occ(&mut self, sys: usize, idx: u32, site: u32) {
        let p = &self.particles[idx as usize];
        let sign = if p.label.is_a() { 1 } else { -1 };
        self.occ[sys][site as usize] += sign;
        self.residents[sys][site as usize].insert(p.braveness, idx);
        self.diff_add(site, if sys == 1 { sign as i64 } else { -sign as i64 });
    }

    fn remove_occ(&mut self, sys: usize, idx: u32, site: u32) {
        let p = &self.particles[idx as usize];
        let sign = if p.label.is_a() { 1 } else { -1 };
        self.occ[sys][site as usize] -= sign;
        self.residents[sys][site as usize].remove(idx);
        self.diff_add(site, if sys == 1 { -sign as i64 } else { sign as i64 });
    }

    fn diff_add(&mut self, site: u32, delta: i64) {
        let e = self.diff.entry(site).or_insert(0);
        *e += delta;
        if *e == 0 {
            self.diff.remove(&site);
        }
    }

    fn schedule_ring(&mut self, tid: u32, now: f64) {
        let ratio = if self.params.d_a > 0.0 {
            self.params.d_b / self.params.d_a
        } else {
            0.0
        };
        let tr = &mut self.tracers[tid as usize];
        let clock = tr.clock_stream.as_mut().expect("dragging tracer has a clock");
        let dt = clock.next_exp(self.params.d_a);
        tr.next_also_b = clock.next_bernoulli(ratio);
        self.heap.push(QEntry {
            t: now + dt,
            kind: 1,
            id: tid,
        });
    }

    fn flush_checkpoints(&mut self, upto: f64) {
        while self.next_checkpoint < self.opts.ledger_times.len()
            && self.opts.ledger_times[self.next_checkpoint] < upto
        {
            let t = self.opts.ledger_times[self.next_checkpoint];
            for sys in 0..2 {
                self.ledgers[sys].rows.push(LedgerRow {
                    t,
                    n_a: self.n_a[sys],
                    n_b: self.n_b[sys],
                    annihilations: self.annih[sys],
                });
            }
            self.next_checkpoint += 1;
        }
    }

    /// Land particle `idx` at `dest` in system `sys` after it was removed
    /// from its origin: annihilate with the bravest opposite resident, or
    /// join the site. Returns the killed resident, if any.
    fn resolve_landing(&mut self, sys: usize, idx: u32, dest: u32, t: f64) -> Result<Option<u32>> {
        let sign = if self.particles[idx as usize].label.is_a() {
            1
        } else {
            -1
        };
        let dest_occ = self.occ[sys][dest as usize];
        if dest_occ != 0 && (dest_occ > 0) != (sign > 0) {
            let r = self.residents[sys][dest as usize]
                .bravest()
                .expect("occupied site has residents");
            self.remove_occ(sys, r, dest);
            self.particles[idx as usize].alive[sys] = false;
            self.particles[r as usize].alive[sys] = false;
            self.n_a[sys] -= 1;
            self.n_b[sys] -= 1;
            self.annih[sys] += 1;
            self.logs[sys].annihilations = self.annih[sys];
            let ta = AnnihilationTime {
                time: t,
                censored: false,
            };
            let (la, lb) = if sign > 0 {
                (self.particles[idx as usize].label, self.particles[r as usize].label)
            } else {
                (self.particles[r as usize].label, self.particles[idx as usize].label)
            };
            self.logs[sys].record_time(la, ta);
            self.logs[sys].record_time(lb, ta);
            if self.opts.record_events {
                self.logs[sys].events.push(Event::Annihilation {
                    t,
                    a: la,
                    b: lb,
                    site: dest,
                });
            }
            Ok(Some(r))
        } else {
            self.insert_occ(sys, idx, dest);
            Ok(None)
        }
    }

    fn log_jump(&mut self, sys: usize, t: f64, idx: u32, from: u32, to: u32) {
        if self.opts.record_events {
            self.logs[sys].events.push(Event::Jump {
                t,
                label: self.particles[idx as usize].label,
                from,
                to,
            });
        }
    }

    /// Reassign tracers after an event at `site`: per sign class, a tracer
    /// that lost its particle adopts the unique newly discrepant particle; a
    /// plus/minus pair left over cancels and both go wandering.
    fn resolve_successors(
        &mut self,
        t: f64,
        site: u32,
        affected: &[u32],
        pre: &HashMap<u32, Option<TracerSign>>,
    ) -> Result<()> {
        let mut lost: [Option<u32>; 2] = [None, None];
        let mut fresh: [Option<u32>; 2] = [None, None];
        let slot = |c: TracerSign| match c {
            TracerSign::Plus => 0usize,
            TracerSign::Minus => 1usize,
        };
        let mut seen = Vec::new();
        for &p in affected {
            if seen.contains(&p) {
                continue;
            }
            seen.push(p);
            let before = pre.get(&p).copied().unwrap_or(None);
            let after = self.particles[p as usize].class();
            match (before, after) {
                (None, None) => {}
                (Some(c1), Some(c2)) => {
                    if c1 != c2 {
                        return Err(self.violation(
                            "tracer sign class",
                            format!("particle {:?} flipped class", self.particles[p as usize].label),
                        ));
                    }
                }
                (Some(c), None) => {
                    let tid = self.particles[p as usize].tracked_by.ok_or_else(|| {
                        self.violation(
                            "tracer bijection",
                            format!(
                                "discrepant particle {:?} was untracked",
                                self.particles[p as usize].label
                            ),
                        )
                    })?;
                    if lost[slot(c)].is_some() {
                        return Err(self.violation(
                            "successor uniqueness",
                            "two tracers of one class lost particles in one event".into(),
                        ));
                    }
                    lost[slot(c)] = Some(tid);
                    self.particles[p as usize].tracked_by = None;
                }
                (None, Some(c)) => {
                    if fresh[slot(c)].is_some() {
                        return Err(self.violation(
                            "successor uniqueness",
                            "two new discrepancies of one class in one event".into(),
                        ));
                    }
                    fresh[slot(c)] = Some(p);
                }
            }
        }

        let mut unmatched: Vec<u32> = Vec::new();
        for c in 0..2 {
            match (lost[c], fresh[c]) {
                (Some(tid), Some(p)) => {
                    if self.particles[p as usize].pos != site {
                        return Err(self.violation(
                            "successor locality",
                            "successor is not at the event site".into(),
                        ));
                    }
                    self.tracers[tid as usize].state = TracerState::Active { particle: p };
                    self.particles[p as usize].tracked_by = Some(tid);
                    if self.mode == Mode::Dragging {
                        self.particles[p as usize].dragged = true;
                    }
                }
                (Some(tid), None) => unmatched.push(tid),
                (None, Some(_)) => {
                    return Err(self.violation(
                        "successor matching",
                        "new discrepancy with no tracer to adopt it".into(),
                    ))
                }
                (None, None) => {}
            }
        }
        match unmatched.len() {
            0 => Ok(()),
            2 => {
                let signs: Vec<TracerSign> = unmatched
                    .iter()
                    .map(|&tid| self.tracers[tid as usize].sign)
                    .collect();
                if signs[0] == signs[1] {
                    return Err(self.violation(
                        "tracer cancellation",
                        "cancelling tracers have equal signs".into(),
                    ));
                }
                for tid in unmatched {
                    self.tracers[tid as usize].state = TracerState::Wandering { since: t };
                }
                Ok(())
            }
            _ => Err(self.violation(
                "tracer cancellation",
                format!("{} tracers left unmatched", unmatched.len()),
            )),
        }
    }

    fn violation(&self, invariant: &str, detail: String) -> Error {
        Error::InvariantViolation {
            invariant: invariant.into(),
            seed: self.seed,
            detail,
        }
    }

    /// The single most important check: the configuration difference equals
    /// the signed sum of active tracer positions, exactly, right now.
    fn verify_identity(&mut self, t: f64) -> Result<()> {
        if !self.opts.check_identity {
            return Ok(());
        }
        self.identity_checks += 1;
        let mut expect: HashMap<u32, i64> = HashMap::new();
        for tr in &self.tracers {
            if let TracerState::Active { particle } = tr.state {
                *expect.entry(tr.pos).or_insert(0) += tr.sign.delta();
                // An active tracer implies its site is occupied in one of the
                // two systems.
                let w = tr.pos as usize;
                if self.occ[0][w] == 0 && self.occ[1][w] == 0 {
                    return Err(self.violation(
                        "active tracer occupancy",
                        format!("active tracer at empty site {w} (t = {t})"),
                    ));
                }
                let p = &self.particles[particle as usize];
                if p.pos != tr.pos {
                    return Err(self.violation(
                        "tracer position",
                        format!("tracer at {} but tracked particle at {}", tr.pos, p.pos),
                    ));
                }
            }
        }
        expect.retain(|_, v| *v != 0);
        if expect != self.diff {
            return Err(self.violation(
                "difference identity",
                format!(
                    "at t = {t}: tracer sum {:?} vs configuration difference {:?}",
                    expect, self.diff
                ),
            ));
        }
        Ok(())
    }

    fn pre_classes(&self, candidates: &[u32]) -> HashMap<u32, Option<TracerSign>> {
        candidates
            .iter()
            .map(|&p| (p, self.particles[p as usize].class()))
            .collect()
    }

    fn bravest_opponent(&self, sys: usize, dest: u32, jumper_is_a: bool) -> Option<u32> {
        let occ = self.occ[sys][dest as usize];
        if occ != 0 && (occ > 0) != jumper_is_a {
            self.residents[sys][dest as usize].bravest()
        } else {
            None
        }
    }

    fn handle_own_jump(&mut self, t: f64, idx: u32) -> Result<()> {
        let p = &self.particles[idx as usize];
        if (!p.alive[0] && !p.alive[1]) || p.dragged {
            return Ok(()); // stale entry
        }
        let from = p.pos;
        let is_a = p.label.is_a();
        let alive = p.alive;
        let dest = self.particles[idx as usize].stream_step(self.g);

        let mut affected = vec![idx];
        let mut candidates = vec![idx];
        let mut killed: [Option<u32>; 2] = [None, None];
        for sys in 0..2 {
            if alive[sys] {
                if let Some(r) = self.bravest_opponent(sys, dest, is_a) {
                    candidates.push(r);
                }
            }
        }
        let pre = self.pre_classes(&candidates);

        for sys in 0..2 {
            if alive[sys] {
                self.remove_occ(sys, idx, from);
                self.log_jump(sys, t, idx, from, dest);
            }
        }
        for sys in 0..2 {
            if alive[sys] {
                killed[sys] = self.resolve_landing(sys, idx, dest, t)?;
                if let Some(r) = killed[sys] {
                    affected.push(r);
                }
            }
        }
        self.particles[idx as usize].pos = dest;

        // A followed tracer moves with its particle.
        if let Some(tid) = self.particles[idx as usize].tracked_by {
            self.tracers[tid as usize].pos = dest;
            self.tracers[tid as usize].path.push((t, dest));
        }

        let p = &self.particles[idx as usize];
        if (p.alive[0] || p.alive[1]) && !p.dragged {
            let rate = p.rate;
            let dt = self.particles[idx as usize].stream.next_exp(rate);
            self.heap.push(QEntry {
                t: t + dt,
                kind: 0,
                id: idx,
            });
        }

        self.resolve_successors(t, dest, &affected, &pre)?;
        self.verify_identity(t)
    }

    fn handle_ring(&mut self, t: f64, tid: u32) -> Result<()> {
        let detail = self.opts.record_tracer_detail;
        let wandering = matches!(self.tracers[tid as usize].state, TracerState::Wandering { .. });
        if wandering && !detail {
            return Ok(()); // stale ring of a cancelled tracer
        }
        let also_b = self.tracers[tid as usize].next_also_b;
        let entangled_as = self.tracers[tid as usize].entangled_as;

        // Union clock of the entangled pair: every A-ring counts.
        if entangled_as.is_some() {
            if let Some(ent) = self.entangle.as_mut() {
                ent.union_ring_times.push(t);
            }
        }

        let qualifies;
        let tracked: Option<u32>;
        match self.tracers[tid as usize].state {
            TracerState::Wandering { .. } => {
                // A wandering tracer listens to the full A-clock.
                qualifies = true;
                tracked = None;
            }
            TracerState::Active { particle } => {
                let q = &self.particles[particle as usize];
                qualifies = q.label.is_a() || also_b;
                tracked = Some(particle);
            }
        }
        if detail {
            self.tracers[tid as usize].rings.push(RingRecord {
                t,
                also_b,
                moved: qualifies,
            });
        }
        self.schedule_ring(tid, t);
        if !qualifies {
            return Ok(());
        }

        let cur = self.tracers[tid as usize].pos;
        let dest = match entangled_as {
            Some(who) => {
                let ent = self.entangle.as_mut().expect("entangled driver");
                let site = ent.state.step(self.g, who).map_err(|e| match e {
                    Error::InvariantViolation {
                        invariant, detail, ..
                    } => Error::InvariantViolation {
                        invariant,
                        seed: self.seed,
                        detail,
                    },
                    other => other,
                })?;
                ent.move_times.push(t);
                site.ix()
            }
            None => {
                let walk = self.tracers[tid as usize]
                    .walk_stream
                    .as_mut()
                    .expect("dragging tracer has a walk");
                self.g.step_ix(cur, walk)
            }
        };

        let moved_particle = match tracked {
            None => {
                self.tracers[tid as usize].pos = dest;
                self.tracers[tid as usize].path.push((t, dest));
                return Ok(());
            }
            Some(q) => q,
        };

        let sys_q = match self.particles[moved_particle as usize].alive {
            [true, false] => 0usize,
            [false, true] => 1usize,
            _ => {
                return Err(self.violation(
                    "tracer bijection",
                    "tracked particle is not a discrepancy".into(),
                ))
            }
        };
        let is_a = self.particles[moved_particle as usize].label.is_a();
        let from = self.particles[moved_particle as usize].pos;
        let mut candidates = vec![moved_particle];
        if let Some(r) = self.bravest_opponent(sys_q, dest, is_a) {
            candidates.push(r);
        }
        let pre = self.pre_classes(&candidates);

        self.remove_occ(sys_q, moved_particle, from);
        self.log_jump(sys_q, t, moved_particle, from, dest);
        let killed = self.resolve_landing(sys_q, moved_particle, dest, t)?;
        self.particles[moved_particle as usize].pos = dest;
        self.tracers[tid as usize].pos = dest;
        self.tracers[tid as usize].path.push((t, dest));

        let mut affected = vec![moved_particle];
        if let Some(r) = killed {
            affected.push(r);
        }
        self.resolve_successors(t, dest, &affected, &pre)?;
        self.verify_identity(t)
    }

    fn run(mut self) -> Result<CoupledResult> {
        while let Some(QEntry { t, kind, id }) = self.heap.pop() {
            if t > self.params.t_max {
                break;
            }
            if t == self.prev_t {
                self.tie_count += 1;
            }
            self.prev_t = t;
            self.flush_checkpoints(t);
            match kind {
                0 => self.handle_own_jump(t, id)?,
                _ => self.handle_ring(t, id)?,
            }
        }
        self.flush_checkpoints(f64::INFINITY);
        for sys in 0..2 {
            self.ledgers[sys].rows.push(LedgerRow {
                t: self.params.t_max,
                n_a: self.n_a[sys],
                n_b: self.n_b[sys],
                annihilations: self.annih[sys],
            });
        }
        for p in &self.particles {
            for sys in 0..2 {
                if p.alive[sys] {
                    self.logs[sys].record_time(
                        p.label,
                        AnnihilationTime {
                            time: self.params.t_max,
                            censored: true,
                        },
                    );
                }
            }
        }
        let entangled = match self.entangle {
            Some(mut ent) => {
                let needed = ent.union_ring_times.len();
                let z_path = ent.state.z_prefix(self.g, needed).to_vec();
                Some(EntangledReport {
                    move_times: ent.move_times,
                    union_ring_times: ent.union_ring_times,
                    z_path,
                })
            }
            None => None,
        };
        let tracers = self
            .tracers
            .into_iter()
            .map(|tr| TracerReport {
                origin: tr.origin,
                sign: tr.sign,
                start_pos: tr.start_pos,
                wandering_since: match tr.state {
                    TracerState::Wandering { since } => Some(since),
                    TracerState::Active { .. } => None,
                },
                path: tr.path,
                rings: tr.rings,
                walk_stream_start: tr.walk_stream_start,
            })
            .collect();
        let [log_base, log_shifted] = self.logs;
        let [ledger_base, ledger_shifted] = self.ledgers;
        Ok(CoupledResult {
            log_base,
            log_shifted,
            ledger_base,
            ledger_shifted,
            tracers,
            identity_checks: self.identity_checks,
            tie_count: self.tie_count,
            entangled,
        })
    }
}

impl CParticle {
    fn stream_step(&mut self, g: &ReflectiveGraph) -> u32 {
        g.step_ix(self.pos, &mut self.stream)
    }
}

/// Coupled evolution with the following construction (requires equal rates).
pub fn evolve_coupled_equal(
    g: &ReflectiveGraph,
    init: &CoupledInit,
    params: &SimParams,
    seed: u64,
    opts: &CoupledOptions,
) -> Result<CoupledResult> {
    if params.d_a != params.d_b {
        return Err(Error::UseGeneralCoupling {
            da: params.d_a,
            db: params.d_b,
        });
    }
    Engine::new(g, init, *params, seed, Mode::Following, opts.clone())?.run()
}

/// Coupled evolution with a-priori tracer triples (dragging), for
/// `D_A >= D_B >= 0`, `D_A > 0`.
pub fn evolve_coupled_general(
    g: &ReflectiveGraph,
    init: &CoupledInit,
    params: &SimParams,
    seed: u64,
    opts: &CoupledOptions,
) -> Result<CoupledResult> {
    if params.d_a <= 0.0 {
        return Err(Error::InvalidParams(
            "the dragging coupling needs D_A > 0".into(),
        ));
    }
    if params.d_b > params.d_a {
        return Err(Error::InvalidParams(
            "the dragging coupling needs D_B <= D_A; swap the roles of A and B".into(),
        ));
    }
    Engine::new(g, init, *params, seed, Mode::Dragging, opts.clone())?.run()
}

// ---------------------------------------------------------------------------
// Re-sampling (fixed obstacles machinery)
// ---------------------------------------------------------------------------

/// A fully specified single-system realization: initial condition, rates,
/// seed, and per-label stream salts.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub init: Configuration,
    pub params: SimParams,
    pub seed: u64,
    pub salt_overrides: BTreeMap<Label, u64>,
}

impl SystemSpec {
    pub fn new(init: Configuration, params: SimParams, seed: u64) -> Self {
        SystemSpec {
            init,
            params,
            seed,
            salt_overrides: BTreeMap::new(),
        }
    }

    /// Replace one particle's trajectory by an independent one, keeping the
    /// initial condition and every other instruction unchanged.
    pub fn resample_particle(&self, label: Label, new_salt: u64) -> Result<SystemSpec> {
        let site = label.site;
        if site as usize >= self.init.len() {
            return Err(Error::LabelAbsent {
                site: site.to_string(),
                index: label.j,
            });
        }
        let v = self.init.get(site);
        let present = (label.j > 0 && label.j <= v) || (label.j < 0 && label.j >= v);
        if !present {
            return Err(Error::LabelAbsent {
                site: site.to_string(),
                index: label.j,
            });
        }
        let mut out = self.clone();
        if new_salt == 0 {
            out.salt_overrides.remove(&label);
        } else {
            out.salt_overrides.insert(label, new_salt);
        }
        Ok(out)
    }

    pub fn run(
        &self,
        g: &ReflectiveGraph,
        observers: &mut [&mut dyn Observer],
        record_events: bool,
    ) -> Result<EvolveResult> {
        let opts = EvolveOptions {
            record_events,
            salt_overrides: self.salt_overrides.clone(),
            ..Default::default()
        };
        evolve(g, &self.init, &self.params, self.seed, observers, &opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::KernelSpec;
    use crate::sim::Counts;

    fn cycle(l: u32) -> ReflectiveGraph {
        ReflectiveGraph::make_torus(1, l, KernelSpec::nn(1)).unwrap()
    }

    fn bench_nu() -> InitialLaw {
        InitialLaw::parse("1:0.3,-1:0.3,0:0.4").unwrap()
    }

    #[test]
    fn couple_initial_m_zero_is_identity() {
        let g = cycle(128);
        let init = couple_initial(&g, &bench_nu(), 0.0, 0, 1, 4).unwrap();
        assert_eq!(init.base, init.shifted);
        assert!(init.plus_sites.is_empty() && init.minus_sites.is_empty());
    }

    #[test]
    fn couple_initial_density_of_marked_sites() {
        let g = cycle(10_000);
        let nu = InitialLaw::parse("0:0.5,1:0.5").unwrap();
        let init = couple_initial(&g, &nu, 0.2, 0, 1, 11).unwrap();
        init.validate().unwrap();
        let frac = (init.plus_sites.len() + init.minus_sites.len()) as f64 / 10_000.0;
        let sigma = (0.2f64 * 0.8 / 10_000.0).sqrt();
        assert!((frac - 0.2).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn couple_initial_rejects_large_m() {
        let g = cycle(64);
        let err = couple_initial(&g, &bench_nu(), 0.9, 0, 1, 4).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    fn params(d_a: f64, d_b: f64, t_max: f64) -> SimParams {
        SimParams { d_a, d_b, t_max }
    }

    #[test]
    fn empty_discrepancy_runs_bit_identical() {
        let g = cycle(64);
        let init = couple_initial(&g, &bench_nu(), 0.0, 0, 1, 9).unwrap();
        let opts = CoupledOptions {
            record_events: true,
            ..Default::default()
        };
        let res = evolve_coupled_equal(&g, &init, &params(1.0, 1.0, 20.0), 9, &opts).unwrap();
        assert_eq!(res.log_base.events, res.log_shifted.events);
        assert!(res.tracers.is_empty());
    }

    #[test]
    fn lone_discrepancy_is_a_walking_tracer() {
        // Base empty, shifted has one A at site 5: the tracer follows that
        // particle forever and the difference is a single delta.
        let g = cycle(16);
        let init = CoupledInit {
            base: Configuration::empty(16),
            shifted: {
                let mut c = Configuration::empty(16);
                c.set(5, 1);
                c
            },
            plus_sites: vec![5],
            minus_sites: vec![],
            m: 0.0,
            n: 0,
            k: 1,
        };
        let opts = CoupledOptions {
            record_events: true,
            ..Default::default()
        };
        let res = evolve_coupled_equal(&g, &init, &params(1.0, 1.0, 30.0), 2, &opts).unwrap();
        assert_eq!(res.tracers.len(), 1);
        let tr = &res.tracers[0];
        assert!(tr.wandering_since.is_none());
        // The tracer path replays the particle's jumps.
        let jumps: Vec<(f64, u32)> = res
            .log_shifted
            .events
            .iter()
            .map(|e| match e {
                Event::Jump { t, to, .. } => (*t, *to),
                _ => panic!("no annihilation possible"),
            })
            .collect();
        assert_eq!(&tr.path[1..], &jumps[..]);
    }

    #[test]
    fn identity_verified_equal_and_general() {
        let g = cycle(64);
        for seed in 0..12u64 {
            let init = couple_initial(&g, &bench_nu(), 0.1, 0, 1, seed).unwrap();
            let res =
                evolve_coupled_equal(&g, &init, &params(1.0, 1.0, 25.0), seed, &Default::default())
                    .unwrap();
            assert!(res.identity_checks > 0);
            for d_b in [0.0, 0.5, 1.0] {
                let res = evolve_coupled_general(
                    &g,
                    &init,
                    &params(1.0, d_b, 25.0),
                    seed,
                    &Default::default(),
                )
                .unwrap();
                assert!(res.identity_checks > 0);
            }
        }
    }

    #[test]
    fn frozen_b_tracer_never_moves() {
        // D_B = 0 and a tracer tracking a B-particle: the tracer's path stays
        // at its start until (if ever) it switches to an A.
        let g = cycle(16);
        let mut base = Configuration::empty(16);
        base.set(3, -1); // extra B in the base system: a plus tracer
        let init = CoupledInit {
            base,
            shifted: Configuration::empty(16),
            plus_sites: vec![3],
            minus_sites: vec![],
            m: 0.0,
            n: -1,
            k: 1,
        };
        let res = evolve_coupled_general(
            &g,
            &init,
            &params(1.0, 0.0, 40.0),
            7,
            &CoupledOptions {
                record_tracer_detail: true,
                ..Default::default()
            },
        )
        .unwrap();
        let tr = &res.tracers[0];
        assert_eq!(tr.path, vec![(0.0, 3)]);
        assert!(tr.rings.iter().all(|r| !r.also_b && !r.moved));
    }

    #[test]
    fn bounding_walks_sandwich() {
        let g = cycle(32);
        let nu = bench_nu();
        for (seed, d_b) in [(1u64, 0.0), (2, 0.3), (3, 1.0)] {
            let init = couple_initial(&g, &nu, 0.2, 0, 1, seed).unwrap();
            let res = evolve_coupled_general(
                &g,
                &init,
                &params(1.0, d_b, 15.0),
                seed,
                &CoupledOptions {
                    record_tracer_detail: true,
                    ..Default::default()
                },
            )
            .unwrap();
            for tr in &res.tracers {
                let bw = bounding_paths(&g, tr).unwrap();
                let visited = |path: &[(f64, u32)]| {
                    path.iter().map(|&(_, s)| s).collect::<std::collections::HashSet<_>>()
                };
                let lo = visited(&bw.lower);
                let mid = visited(&bw.actual);
                let hi = visited(&bw.upper);
                assert!(lo.is_subset(&mid), "lower not inside actual");
                assert!(mid.is_subset(&hi), "actual not inside upper");
                if d_b == 0.0 {
                    assert_eq!(bw.lower.len(), 1, "X_- must be frozen when D_B = 0");
                }
                if d_b == 1.0 {
                    assert_eq!(bw.lower, bw.upper, "D_A = D_B collapses the sandwich");
                    assert_eq!(bw.actual, bw.upper);
                }
            }
        }
    }

    #[test]
    fn general_at_equal_rates_matches_following_in_law() {
        // With D_B = D_A the dragging construction must reproduce the same
        // marginal laws as the following construction: compare the shifted
        // system's density trajectories across independent replicas.
        let g = cycle(64);
        let nu = bench_nu();
        let p = params(1.0, 1.0, 20.0);
        let checkpoints: Vec<f64> = (1..=5).map(|k| 4.0 * k as f64).collect();
        let reps = 250u32;
        let mut rho = [Vec::new(), Vec::new()];
        for (which, general) in [(0usize, false), (1usize, true)] {
            for i in 0..reps {
                // Disjoint seed ranges: the comparison is distributional.
                let seed = 1000 * (which as u64 + 1) + i as u64;
                let init = couple_initial(&g, &nu, 0.1, 0, 1, seed).unwrap();
                let opts = CoupledOptions {
                    ledger_times: checkpoints.clone(),
                    ..Default::default()
                };
                let res = if general {
                    evolve_coupled_general(&g, &init, &p, seed, &opts).unwrap()
                } else {
                    evolve_coupled_equal(&g, &init, &p, seed, &opts).unwrap()
                };
                rho[which].push(
                    res.ledger_shifted.rows[1..=checkpoints.len()]
                        .iter()
                        .map(|r| (r.n_a + r.n_b) as f64 / 64.0)
                        .collect::<Vec<f64>>(),
                );
            }
        }
        for k in 0..checkpoints.len() {
            let a: Vec<f64> = rho[0].iter().map(|r| r[k]).collect();
            let b: Vec<f64> = rho[1].iter().map(|r| r[k]).collect();
            let (ma, sa) = crate::stats::mean_and_se(&a);
            let (mb, sb) = crate::stats::mean_and_se(&b);
            let z = (ma - mb).abs() / (sa * sa + sb * sb).sqrt();
            assert!(z <= 3.0, "t={}: {ma} vs {mb} (z={z:.2})", checkpoints[k]);
        }
    }

    #[test]
    fn wandering_tracer_is_a_plain_walk() {
        // A tracer that wanders from the start moves on every A-ring along
        // its walk; its position law at t must match a rate-D_A walk
        // (chi-square against the exact transient solve on K_4).
        let g = ReflectiveGraph::make_complete(4).unwrap();
        let d_a = 1.0;
        let d_b = 0.4;
        let single = Configuration::from_counts(vec![1, 0, 0, 0]);
        let chain = crate::oracle::build_generator(
            &g,
            &single,
            &params(d_a, 0.0, 2.0),
            100,
        )
        .unwrap();
        let reps = 30_000u32;
        for t_cap in [0.5, 1.0, 2.0] {
            let pi = crate::oracle::transient_solve(&chain, t_cap, 1e-10).unwrap();
            let mut counts = vec![0u64; 4];
            for seed in 0..reps {
                // Same stream discipline as the engine: per ring an
                // exponential gap and an also-B mark; wandering ignores the
                // mark and steps on every ring.
                let mut clock = StreamKey::new(seed as u64, salt::TRACER_CLOCK).stream();
                let mut walk = StreamKey::new(seed as u64, salt::TRACER_WALK).stream();
                let mut t = 0.0;
                let mut pos = 0u32;
                loop {
                    t += clock.next_exp(d_a);
                    let _also_b = clock.next_bernoulli(d_b / d_a);
                    if t > t_cap {
                        break;
                    }
                    pos = g.step_ix(pos, &mut walk);
                }
                counts[pos as usize] += 1;
            }
            let probs: Vec<f64> = (0..4)
                .map(|site| {
                    let mut state = vec![0i32; 4];
                    state[site] = 1;
                    pi[chain.state_index(&state).unwrap()]
                })
                .collect();
            let (stat, pval) = crate::stats::chi_square_test(&counts, &probs);
            assert!(pval > 0.01, "t={t_cap}: chi-square {stat} p={pval}");
        }
    }

    #[test]
    fn entangled_wandering_distance_matches_rate_two_walk() {
        // Two wandering entangled tracers at rate 1: their distance at t is
        // the distance from z of a single rate-2 kernel walk started at y.
        let g = cycle(8);
        let (y, z) = (SiteId::Ix(0), SiteId::Ix(3));
        let reps = 6000u32;
        let t_cap = 1.0;
        let mut dist_counts = vec![0u64; 5];
        for seed in 0..reps {
            let run = entangle_wandering(
                &g,
                &y,
                &z,
                1.0,
                t_cap,
                StreamKey::new(seed as u64, salt::ENTANGLE_WALK).stream(),
                StreamKey::new(seed as u64, salt::TRACER_CLOCK).with(1).stream(),
                StreamKey::new(seed as u64, salt::TRACER_CLOCK).with(2).stream(),
            )
            .unwrap();
            let d = g.distance(run.path_y.last().unwrap(), run.path_z.last().unwrap());
            dist_counts[d as usize] += 1;
        }
        // Exact law: a rate-2 single walker from y, distance to z.
        let single = Configuration::from_counts(vec![1, 0, 0, 0, 0, 0, 0, 0]);
        let chain =
            crate::oracle::build_generator(&g, &single, &params(2.0, 0.0, t_cap), 100).unwrap();
        let pi = crate::oracle::transient_solve(&chain, t_cap, 1e-12).unwrap();
        let mut dist_probs = vec![0.0f64; 5];
        for (state, &p) in chain.states.iter().zip(&pi) {
            let site = state.iter().position(|&c| c == 1).unwrap() as u32;
            dist_probs[g.distance(&SiteId::Ix(site), &z) as usize] += p;
        }
        for (d, (&c, &p)) in dist_counts.iter().zip(&dist_probs).enumerate() {
            let f = c as f64 / reps as f64;
            let sigma = (p * (1.0 - p) / reps as f64).sqrt();
            assert!(
                (f - p).abs() <= 3.0 * sigma.max(1e-4),
                "distance {d}: {f} vs {p}"
            );
        }
    }

    #[test]
    fn resample_round_trip_is_identity() {
        let g = cycle(32);
        let nu = bench_nu();
        let init = sample_initial(&g, &nu, 21).unwrap();
        let label = (0..32)
            .find_map(|ix| {
                let v = init.get(ix);
                (v != 0).then(|| Label {
                    site: ix,
                    j: if v > 0 { 1 } else { -1 },
                })
            })
            .expect("some particle");
        let spec = SystemSpec::new(init, params(1.0, 1.0, 20.0), 21);
        let a = spec.run(&g, &mut [], true).unwrap();
        let resampled = spec.resample_particle(label, 99).unwrap();
        let b = resampled.run(&g, &mut [], true).unwrap();
        assert_ne!(a.log.events, b.log.events);
        let back = resampled.resample_particle(label, 0).unwrap();
        let c = back.run(&g, &mut [], true).unwrap();
        assert_eq!(a.log.events, c.log.events);
    }

    #[test]
    fn resample_absent_label_rejected() {
        let g = cycle(8);
        let spec = SystemSpec::new(Configuration::empty(8), params(1.0, 1.0, 5.0), 1);
        assert!(matches!(
            spec.resample_particle(Label { site: 2, j: 1 }, 5),
            Err(Error::LabelAbsent { .. })
        ));
        let _ = g;
    }

    #[test]
    fn deletion_monotonicity_of_annihilation_times() {
        // Removing the top A-particle at one site can only hasten A deaths
        // and delay B deaths, exactly, under shared instructions.
        let g = cycle(32);
        let nu = bench_nu();
        for seed in 0..40u64 {
            let big = sample_initial(&g, &nu, seed).unwrap();
            let site = match (0..32).find(|&ix| big.get(ix) > 0) {
                Some(s) => s,
                None => continue,
            };
            let mut small = big.clone();
            small.set(site, big.get(site) - 1);
            let p = params(1.0, 1.0, 25.0);
            let res_small = evolve(&g, &small, &p, seed, &mut [], &Default::default()).unwrap();
            let res_big = evolve(&g, &big, &p, seed, &mut [], &Default::default()).unwrap();
            for (label, t_big) in res_big.log.times() {
                let t_small = res_small.log.annihilation_time(*label);
                if label.is_a() {
                    assert!(
                        t_small.le(t_big),
                        "A-label {label:?}: {t_small:?} vs {t_big:?} (seed {seed})"
                    );
                } else {
                    assert!(
                        t_big.le(&t_small),
                        "B-label {label:?}: {t_big:?} vs {t_small:?} (seed {seed})"
                    );
                }
            }
        }
    }

    #[test]
    fn fixed_obstacle_origin_survival_decays() {
        // D_B = 0 with an A-majority: the chance that the origin's B-pile is
        // never touched decreases with the horizon.
        let g = cycle(256);
        let nu = InitialLaw::parse("1:0.4,-1:0.2,0:0.4").unwrap();
        struct FirstVisit {
            site: u32,
            first: Option<f64>,
        }
        impl Observer for FirstVisit {
            fn on_event(&mut self, ev: &Event, _c: &Counts) {
                if self.first.is_some() {
                    return;
                }
                let hit = match ev {
                    Event::Jump { to, .. } => *to == self.site,
                    Event::Annihilation { site, .. } => *site == self.site,
                };
                if hit {
                    self.first = Some(ev.time());
                }
            }
        }
        let ladder = [25.0, 50.0, 100.0, 200.0];
        let mut untouched = [0u32; 4];
        let mut eligible = 0u32;
        for seed in 0..400u64 {
            let init = sample_initial(&g, &nu, seed).unwrap();
            if init.get(0) >= 0 {
                continue;
            }
            eligible += 1;
            let mut obs = FirstVisit {
                site: 0,
                first: None,
            };
            let p = params(1.0, 0.0, 200.0);
            evolve(&g, &init, &p, seed, &mut [&mut obs], &Default::default()).unwrap();
            let first = obs.first.unwrap_or(f64::INFINITY);
            for (k, &t) in ladder.iter().enumerate() {
                if first > t {
                    untouched[k] += 1;
                }
            }
        }
        assert!(eligible > 50, "need B-origin replicas");
        for w in untouched.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(
            untouched[3] < untouched[0],
            "survival fraction should strictly decrease: {untouched:?}"
        );
    }
}
