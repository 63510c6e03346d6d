//! Initial conditions: signed occupancy fields sampled i.i.d. from a finite
//! support law on the integers, and ball truncation.

use crate::error::{Error, Result};
use crate::graph::{site_hash, ReflectiveGraph, SiteId};
use crate::rng::{salt, CumTable, StreamKey};

/// Finite-support distribution on Z. Positive values place A-particles,
/// negative values B-particles, zero leaves the site empty.
#[derive(Debug, Clone)]
pub struct InitialLaw {
    entries: Vec<(i64, f64)>,
    cum: CumTable,
}

impl InitialLaw {
    pub fn new(mut entries: Vec<(i64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParams("nu has empty support".into()));
        }
        entries.sort_by_key(|(v, _)| *v);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidParams(format!(
                    "nu lists value {} twice",
                    w[0].0
                )));
            }
        }
        let sum: f64 = entries.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "nu probabilities sum to {sum}, expected 1 within 1e-12"
            )));
        }
        if entries.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::InvalidParams("nu has a negative probability".into()));
        }
        let cum = CumTable::new(&entries.iter().map(|(_, p)| *p).collect::<Vec<_>>());
        Ok(InitialLaw { entries, cum })
    }

    pub fn dirac(v: i64) -> Self {
        Self::new(vec![(v, 1.0)]).unwrap()
    }

    /// Parse `+1:0.25,-1:0.25,0:0.5`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for chunk in s.split(',').filter(|c| !c.is_empty()) {
            let (v, p) = chunk
                .split_once(':')
                .ok_or_else(|| Error::InvalidParams(format!("bad nu entry `{chunk}`")))?;
            let v: i64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParams(format!("bad nu value `{chunk}`")))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParams(format!("bad nu probability `{chunk}`")))?;
            entries.push((v, p));
        }
        Self::new(entries)
    }

    pub fn spec_string(&self) -> String {
        self.entries
            .iter()
            .map(|(v, p)| format!("{v}:{p}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn entries(&self) -> &[(i64, f64)] {
        &self.entries
    }

    pub fn prob(&self, v: i64) -> f64 {
        self.entries
            .iter()
            .find(|(x, _)| *x == v)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    /// Mean of the A-part (positive values).
    pub fn mean_a(&self) -> f64 {
        self.entries
            .iter()
            .filter(|(v, _)| *v > 0)
            .map(|(v, p)| *v as f64 * p)
            .sum()
    }

    /// Mean of the B-part (negative values, in absolute value).
    pub fn mean_b(&self) -> f64 {
        self.entries
            .iter()
            .filter(|(v, _)| *v < 0)
            .map(|(v, p)| -*v as f64 * p)
            .sum()
    }

    pub fn sample(&self, draw: u64) -> i64 {
        self.entries[self.cum.pick(draw)].0
    }
}

/// Signed occupancy per site of a finite graph: positive counts are A's,
/// negative are B's. Totals are cached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    counts: Vec<i32>,
    n_a: u64,
    n_b: u64,
}

impl Configuration {
    pub fn from_counts(counts: Vec<i32>) -> Self {
        let n_a = counts.iter().filter(|&&c| c > 0).map(|&c| c as u64).sum();
        let n_b = counts
            .iter()
            .filter(|&&c| c < 0)
            .map(|&c| (-c) as u64)
            .sum();
        Configuration { counts, n_a, n_b }
    }

    pub fn empty(sites: u32) -> Self {
        Configuration {
            counts: vec![0; sites as usize],
            n_a: 0,
            n_b: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, site: u32) -> i32 {
        self.counts[site as usize]
    }

    pub fn set(&mut self, site: u32, value: i32) {
        let old = self.counts[site as usize];
        self.sub_totals(old);
        self.counts[site as usize] = value;
        self.add_totals(value);
    }

    fn add_totals(&mut self, v: i32) {
        if v > 0 {
            self.n_a += v as u64;
        } else {
            self.n_b += (-v) as u64;
        }
    }

    fn sub_totals(&mut self, v: i32) {
        if v > 0 {
            self.n_a -= v as u64;
        } else {
            self.n_b -= (-v) as u64;
        }
    }

    pub fn n_a(&self) -> u64 {
        self.n_a
    }

    pub fn n_b(&self) -> u64 {
        self.n_b
    }

    pub fn counts(&self) -> &[i32] {
        &self.counts
    }

    /// Pointwise partial order on signed occupancies.
    pub fn le(&self, other: &Configuration) -> bool {
        self.counts
            .iter()
            .zip(&other.counts)
            .all(|(a, b)| a <= b)
    }
}

/// Sample an i.i.d. field with marginal `nu`; deterministic given the seed,
/// independent of site enumeration order.
pub fn sample_initial(g: &ReflectiveGraph, nu: &InitialLaw, seed: u64) -> Result<Configuration> {
    let n = g.finite_count()?;
    let key = StreamKey::new(seed, salt::INITIAL);
    let counts = (0..n)
        .map(|ix| {
            let mut s = key.with(site_hash(&SiteId::Ix(ix))).stream();
            nu.sample(s.next_u64()) as i32
        })
        .collect();
    Ok(Configuration::from_counts(counts))
}

/// Keep the ball `B(center, radius)` and empty every other site.
pub fn truncate(
    g: &ReflectiveGraph,
    cfg: &Configuration,
    center: u32,
    radius: u64,
) -> Configuration {
    let counts = cfg
        .counts
        .iter()
        .enumerate()
        .map(|(ix, &c)| {
            if g.distance(&SiteId::Ix(center), &SiteId::Ix(ix as u32)) <= radius {
                c
            } else {
                0
            }
        })
        .collect();
    Configuration::from_counts(counts)
}
