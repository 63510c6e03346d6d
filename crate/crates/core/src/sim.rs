//! The graphical construction as an exact event-driven simulation.
//!
//! Each particle carries its own instruction stream (braveness, then
//! alternating holding times and kernel steps) keyed by its label, so two
//! systems built from the same seed share instructions by construction.
//! Scheduling uses per-particle exponential clocks in a priority queue,
//! regenerated after each jump; this is equivalent in law to pre-materialized
//! trajectories and costs O(log n) per event.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{site_hash, ReflectiveGraph, SiteId};
use crate::init::Configuration;
use crate::rng::{salt, Stream, StreamKey};

/// Jump rates and horizon of one realization.
#[derive(Debug, Clone, Copy)]
pub struct SimParams {
    pub d_a: f64,
    pub d_b: f64,
    pub t_max: f64,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_a < 0.0 || self.d_b < 0.0 {
            return Err(Error::InvalidParams("jump rates must be nonnegative".into()));
        }
        if self.d_a.max(self.d_b) <= 0.0 {
            return Err(Error::InvalidParams(
                "one of D_A, D_B must be positive".into(),
            ));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::InvalidParams("t_max must be positive".into()));
        }
        Ok(())
    }
}

/// Particle label: initial site and nonzero index; positive indices are
/// A-particles, negative are B-particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub site: u32,
    pub j: i32,
}

impl Label {
    pub fn is_a(&self) -> bool {
        self.j > 0
    }
}

/// Labels present at a site holding `value` particles, in canonical order.
pub fn labels_for_value(site: u32, value: i32) -> Vec<Label> {
    if value > 0 {
        (1..=value).map(|j| Label { site, j }).collect()
    } else {
        (value..=-1).map(|j| Label { site, j }).collect()
    }
}

/// The instruction stream of one label under a root seed, with an optional
/// per-label salt (used by re-sampling). Draw 0 is the braveness; jumps then
/// alternate holding time and kernel step.
pub fn label_stream(seed: u64, label: Label, extra_salt: u64) -> Stream {
    StreamKey::new(seed, salt::INSTRUCTIONS)
        .with(site_hash(&SiteId::Ix(label.site)))
        .with(label.j as i64 as u64)
        .with(extra_salt)
        .stream()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Jump {
        t: f64,
        label: Label,
        from: u32,
        to: u32,
    },
    Annihilation {
        t: f64,
        a: Label,
        b: Label,
        site: u32,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Jump { t, .. } | Event::Annihilation { t, .. } => *t,
        }
    }

    pub fn to_json(&self, g: &ReflectiveGraph) -> serde_json::Value {
        let site = |ix: u32| g.site_json(&SiteId::Ix(ix));
        match self {
            Event::Jump { t, label, from, to } => serde_json::json!({
                "t": t, "kind": "jump",
                "label": [site(label.site), label.j],
                "from": site(*from), "to": site(*to),
            }),
            Event::Annihilation { t, a, b, site: z } => serde_json::json!({
                "t": t, "kind": "annih",
                "a": [site(a.site), a.j],
                "b": [site(b.site), b.j],
                "site": site(*z),
            }),
        }
    }
}

/// Time of annihilation of a label: 0 when the label was never present,
/// censored at `t_max` when the particle outlived the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnihilationTime {
    pub time: f64,
    pub censored: bool,
}

impl AnnihilationTime {
    /// Order with censored values treated as +infinity (two censored values
    /// compare equal).
    pub fn le(&self, other: &AnnihilationTime) -> bool {
        match (self.censored, other.censored) {
            (true, true) => true,
            (true, false) => false,
            (false, true) => true,
            (false, false) => self.time <= other.time,
        }
    }
}

/// Ordered record of a realization: events (when recording is enabled),
/// per-label annihilation times, and the annihilation counter.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub annihilations: u64,
    pub t_max: f64,
    times: BTreeMap<Label, AnnihilationTime>,
}

impl EventLog {
    pub fn annihilation_time(&self, label: Label) -> AnnihilationTime {
        self.times.get(&label).copied().unwrap_or(AnnihilationTime {
            time: 0.0,
            censored: false,
        })
    }

    pub fn times(&self) -> &BTreeMap<Label, AnnihilationTime> {
        &self.times
    }

    pub(crate) fn record_time(&mut self, label: Label, t: AnnihilationTime) {
        self.times.insert(label, t);
    }

    pub(crate) fn with_t_max(t_max: f64) -> Self {
        EventLog {
            t_max,
            ..Default::default()
        }
    }

    pub fn write_jsonl<W: Write>(&self, g: &ReflectiveGraph, mut w: W) -> Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, &ev.to_json(g))?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Time series of exact integer mass counts.
#[derive(Debug, Clone, Default)]
pub struct MassLedger {
    pub rows: Vec<LedgerRow>,
    pub sites: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRow {
    pub t: f64,
    pub n_a: u64,
    pub n_b: u64,
    pub annihilations: u64,
}

impl MassLedger {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,nA,nB,annihilations")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.t, r.n_a, r.n_b, r.annihilations)?;
        }
        Ok(())
    }

    pub fn rho(&self, row: &LedgerRow) -> f64 {
        (row.n_a + row.n_b) as f64 / self.sites as f64
    }
}

/// Counter snapshot passed to observers with every event.
#[derive(Debug, Clone, Copy)]
pub struct Counts {
    pub t: f64,
    pub n_a: u64,
    pub n_b: u64,
    pub annihilations: u64,
}

#[allow(unused_variables)]
pub trait Observer {
    fn on_event(&mut self, ev: &Event, counts: &Counts) {}
    fn on_done(&mut self, t_max: f64, counts: &Counts) {}
}

/// A no-op observer for plain runs.
pub struct NullObserver;
impl Observer for NullObserver {}

#[derive(Debug, Clone, Default)]
pub struct EvolveOptions {
    pub record_events: bool,
    /// Per-label stream salts; the re-sampling construction changes exactly
    /// one entry.
    pub salt_overrides: BTreeMap<Label, u64>,
    /// Checkpoint times at which ledger rows are recorded (besides 0 and
    /// t_max). Must be sorted.
    pub ledger_times: Vec<f64>,
    /// Track the first time any particle's displacement reaches half the
    /// torus side (torus graphs only).
    pub track_wrap: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_n_a: u64,
    pub final_n_b: u64,
    pub annihilations: u64,
    pub events: u64,
    /// Exact ties between distinct scheduled clocks, broken by label order.
    pub tie_count: u64,
    pub first_wrap: Option<f64>,
}

pub struct EvolveResult {
    pub log: EventLog,
    pub ledger: MassLedger,
    pub summary: RunSummary,
    /// Occupancy at `t_max`.
    pub final_config: Configuration,
}

#[derive(Clone, Copy)]
struct HeapEntry {
    t: f64,
    idx: u32,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.idx == other.idx
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first, and
        // ties resolved by label (= creation index) order.
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

struct Particle {
    label: Label,
    pos: u32,
    braveness: f64,
    stream: Stream,
    rate: f64,
    alive: bool,
}

/// Per-site residents, kept sorted by braveness so the bravest is last.
/// A site only ever holds one type, so one list per site suffices.
#[derive(Default, Clone)]
pub(crate) struct SiteResidents {
    list: Vec<(f64, u32)>,
}

impl SiteResidents {
    pub(crate) fn insert(&mut self, braveness: f64, idx: u32) {
        let pos = self
            .list
            .partition_point(|&(h, i)| (h, i) < (braveness, idx));
        self.list.insert(pos, (braveness, idx));
    }

    pub(crate) fn remove(&mut self, idx: u32) {
        let pos = self
            .list
            .iter()
            .position(|&(_, i)| i == idx)
            .expect("resident must be present");
        self.list.remove(pos);
    }

    pub(crate) fn bravest(&self) -> Option<u32> {
        self.list.last().map(|&(_, i)| i)
    }
}

/// Exact realization of the annihilating system on a finite graph.
pub fn evolve(
    g: &ReflectiveGraph,
    init: &Configuration,
    params: &SimParams,
    seed: u64,
    observers: &mut [&mut dyn Observer],
    opts: &EvolveOptions,
) -> Result<EvolveResult> {
    params.validate()?;
    let n_sites = g.finite_count()?;
    if init.len() != n_sites as usize {
        return Err(Error::InvalidParams(format!(
            "configuration has {} sites, graph has {n_sites}",
            init.len()
        )));
    }

    let mut particles: Vec<Particle> = Vec::new();
    let mut occ: Vec<i32> = init.counts().to_vec();
    let mut residents: Vec<SiteResidents> = vec![SiteResidents::default(); n_sites as usize];
    let mut heap = std::collections::BinaryHeap::new();

    for site in 0..n_sites {
        let value = init.get(site);
        for label in labels_for_value(site, value) {
            let extra = opts.salt_overrides.get(&label).copied().unwrap_or(0);
            let mut stream = label_stream(seed, label, extra);
            let braveness = stream.next_f64();
            let rate = if label.is_a() { params.d_a } else { params.d_b };
            let idx = particles.len() as u32;
            if rate > 0.0 {
                let t = stream.next_exp(rate);
                heap.push(HeapEntry { t, idx });
            }
            residents[site as usize].insert(braveness, idx);
            particles.push(Particle {
                label,
                pos: site,
                braveness,
                stream,
                rate,
                alive: true,
            });
        }
    }

    let mut n_a = init.n_a();
    let mut n_b = init.n_b();
    let (n_a0, n_b0) = (n_a, n_b);
    let mut annihilations = 0u64;
    let mut events = 0u64;
    let mut tie_count = 0u64;
    let mut prev_t = f64::NEG_INFINITY;

    let mut log = EventLog {
        t_max: params.t_max,
        ..Default::default()
    };
    let mut ledger = MassLedger {
        rows: vec![LedgerRow {
            t: 0.0,
            n_a,
            n_b,
            annihilations,
        }],
        sites: n_sites as u64,
    };
    let mut next_checkpoint = 0usize;

    // Wrap tracking: minimal-image displacement per particle, per dimension.
    let wrap_cfg = if opts.track_wrap {
        g.torus_dims().map(|(d, l)| (d, l as i64))
    } else {
        None
    };
    let mut disp: Vec<i32> = match wrap_cfg {
        Some((d, _)) => vec![0; particles.len() * d],
        None => Vec::new(),
    };
    let mut first_wrap: Option<f64> = None;

    while let Some(HeapEntry { t, idx }) = heap.pop() {
        if t > params.t_max {
            break;
        }
        let p = idx as usize;
        if !particles[p].alive {
            continue;
        }
        if t == prev_t {
            tie_count += 1;
        }
        prev_t = t;

        // Record ledger rows for checkpoints crossed before this event.
        while next_checkpoint < opts.ledger_times.len()
            && opts.ledger_times[next_checkpoint] < t
        {
            ledger.rows.push(LedgerRow {
                t: opts.ledger_times[next_checkpoint],
                n_a,
                n_b,
                annihilations,
            });
            next_checkpoint += 1;
        }

        let from = particles[p].pos;
        let to = g.step_ix(from, &mut particles[p].stream);
        let sign = if particles[p].label.is_a() { 1 } else { -1 };

        residents[from as usize].remove(idx);
        occ[from as usize] -= sign;
        events += 1;

        if let Some((d, l)) = wrap_cfg {
            if first_wrap.is_none() {
                let cf = g.torus_coords(from);
                let ct = g.torus_coords(to);
                let mut wrapped = false;
                for k in 0..d {
                    let mut step = ct[k] - cf[k];
                    if step > l / 2 {
                        step -= l;
                    } else if step < -l / 2 {
                        step += l;
                    }
                    let slot = &mut disp[p * d + k];
                    *slot += step as i32;
                    if 2 * slot.unsigned_abs() as i64 >= l {
                        wrapped = true;
                    }
                }
                if wrapped {
                    first_wrap = Some(t);
                }
            }
        }

        let jump = Event::Jump {
            t,
            label: particles[p].label,
            from,
            to,
        };
        let mut counts = Counts {
            t,
            n_a,
            n_b,
            annihilations,
        };
        if opts.record_events {
            log.events.push(jump);
        }
        for obs in observers.iter_mut() {
            obs.on_event(&jump, &counts);
        }

        let dest_occ = occ[to as usize];
        if dest_occ != 0 && (dest_occ > 0) != (sign > 0) {
            // Annihilate with the bravest opposite resident.
            let q = residents[to as usize].bravest().expect("occupied site") as usize;
            residents[to as usize].remove(q as u32);
            occ[to as usize] += sign; // remove one opposite-type particle
            particles[p].alive = false;
            particles[q].alive = false;
            n_a -= 1;
            n_b -= 1;
            annihilations += 1;
            log.annihilations = annihilations;
            let ta = AnnihilationTime {
                time: t,
                censored: false,
            };
            log.times.insert(particles[p].label, ta);
            log.times.insert(particles[q].label, ta);

            if (n_a0 - n_a) != annihilations || (n_b0 - n_b) != annihilations {
                return Err(Error::InvariantViolation {
                    invariant: "mass conservation".into(),
                    seed,
                    detail: format!(
                        "annihilations {annihilations} vs removed A {} B {}",
                        n_a0 - n_a,
                        n_b0 - n_b
                    ),
                });
            }

            let (a_lab, b_lab) = if sign > 0 {
                (particles[p].label, particles[q].label)
            } else {
                (particles[q].label, particles[p].label)
            };
            let annih = Event::Annihilation {
                t,
                a: a_lab,
                b: b_lab,
                site: to,
            };
            counts = Counts {
                t,
                n_a,
                n_b,
                annihilations,
            };
            if opts.record_events {
                log.events.push(annih);
            }
            for obs in observers.iter_mut() {
                obs.on_event(&annih, &counts);
            }
        } else {
            particles[p].pos = to;
            occ[to as usize] += sign;
            residents[to as usize].insert(particles[p].braveness, idx);
            let rate = particles[p].rate;
            let dt = particles[p].stream.next_exp(rate);
            heap.push(HeapEntry { t: t + dt, idx });
        }
    }

    // Remaining checkpoints and the final row.
    while next_checkpoint < opts.ledger_times.len() {
        ledger.rows.push(LedgerRow {
            t: opts.ledger_times[next_checkpoint],
            n_a,
            n_b,
            annihilations,
        });
        next_checkpoint += 1;
    }
    ledger.rows.push(LedgerRow {
        t: params.t_max,
        n_a,
        n_b,
        annihilations,
    });

    // Censor survivors.
    for p in &particles {
        if p.alive {
            log.times.insert(
                p.label,
                AnnihilationTime {
                    time: params.t_max,
                    censored: true,
                },
            );
        }
    }

    let counts = Counts {
        t: params.t_max,
        n_a,
        n_b,
        annihilations,
    };
    for obs in observers.iter_mut() {
        obs.on_done(params.t_max, &counts);
    }

    Ok(EvolveResult {
        log,
        ledger,
        summary: RunSummary {
            final_n_a: n_a,
            final_n_b: n_b,
            annihilations,
            events,
            tie_count,
            first_wrap,
        },
        final_config: Configuration::from_counts(occ),
    })
}
