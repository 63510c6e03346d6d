//! Reflective graph families: tori, complete graphs, regular trees, and
//! products, each with an invariant transition kernel and computable swap
//! automorphisms (for every pair `(x, w)` an automorphism exchanging them).

pub mod tree;

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::rng::{fold, CumTable, Stream};

/// A site handle. Finite graphs use dense indices; trees use reduced words;
/// products with an infinite component use per-component tuples.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteId {
    Ix(u32),
    Word(tree::Word),
    Tuple(Vec<SiteId>),
}

impl SiteId {
    pub fn ix(&self) -> u32 {
        match self {
            SiteId::Ix(i) => *i,
            _ => panic!("site is not a dense index"),
        }
    }
}

/// Stable 64-bit encoding of a site for stream keying.
pub fn site_hash(s: &SiteId) -> u64 {
    match s {
        SiteId::Ix(i) => fold(0x11, *i as u64),
        SiteId::Word(w) => {
            let mut h = fold(0x22, w.len() as u64);
            for &c in w {
                h = fold(h, c as u64);
            }
            h
        }
        SiteId::Tuple(parts) => {
            let mut h = fold(0x33, parts.len() as u64);
            for p in parts {
                h = fold(h, site_hash(p));
            }
            h
        }
    }
}

/// Step law for a torus: finite list of (displacement, probability).
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub moves: Vec<(Vec<i64>, f64)>,
}

impl KernelSpec {
    /// Uniform nearest-neighbor kernel in `d` dimensions.
    pub fn nn(d: usize) -> Self {
        let mut moves = Vec::with_capacity(2 * d);
        for i in 0..d {
            for sign in [1i64, -1] {
                let mut v = vec![0i64; d];
                v[i] = sign;
                moves.push((v, 0.5 / d as f64));
            }
        }
        KernelSpec { moves }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.moves.is_empty() {
            return Err(Error::InvalidKernel("empty support".into()));
        }
        let mut sum = 0.0;
        for (v, p) in &self.moves {
            if v.len() != d {
                return Err(Error::InvalidKernel(format!(
                    "displacement {v:?} has dimension {} but the torus has dimension {d}",
                    v.len()
                )));
            }
            if !(*p > 0.0) {
                return Err(Error::InvalidKernel(format!(
                    "probability {p} for displacement {v:?} must be positive"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidKernel(format!(
                "probabilities sum to {sum}, expected 1 within 1e-12"
            )));
        }
        // Negation symmetry p(o, y) = p(o, -y), required by the torus point
        // reflection used for swaps.
        for (v, p) in &self.moves {
            let neg: Vec<i64> = v.iter().map(|c| -c).collect();
            let q = self
                .moves
                .iter()
                .find(|(u, _)| *u == neg)
                .map(|(_, q)| *q);
            if q != Some(*p) {
                return Err(Error::InvalidKernel(format!(
                    "kernel is not negation-symmetric: displacement {v:?} has probability {p} \
                     but {neg:?} has {q:?}"
                )));
            }
        }
        Ok(())
    }

    /// True when the support is exactly the 2d unit axis steps, in which case
    /// the graph metric is the L1 torus metric.
    fn is_unit_axis(&self, d: usize) -> bool {
        if self.moves.len() != 2 * d {
            return false;
        }
        self.moves.iter().all(|(v, _)| {
            v.iter().map(|c| c.abs()).sum::<i64>() == 1
        })
    }
}

#[derive(Debug)]
pub struct Torus {
    d: usize,
    l: u32,
    kernel: KernelSpec,
    cum: CumTable,
    unit_axis: bool,
    /// Lazily built BFS distance table from the origin, for non-axis kernels.
    bfs: OnceLock<Vec<u32>>,
}

#[derive(Debug)]
pub struct Complete {
    n: u32,
}

#[derive(Debug)]
pub struct Tree {
    r: u8,
}

#[derive(Debug)]
pub struct Product {
    comps: Vec<ReflectiveGraph>,
    weights: Vec<f64>,
    cum: CumTable,
    /// Component sizes when all components are finite (dense mixed-radix ids).
    sizes: Option<Vec<u64>>,
}

#[derive(Debug)]
pub enum ReflectiveGraph {
    Torus(Torus),
    Complete(Complete),
    Tree(Tree),
    Product(Product),
}

/// A site-to-site map swapping a fixed pair, represented lazily.
#[derive(Debug, Clone)]
pub enum Automorphism {
    Identity,
    /// `v -> sum - v (mod L)` componentwise.
    TorusReflection { sum: Vec<i64>, l: i64 },
    Transposition { a: u32, b: u32 },
    TreeReflection(Arc<tree::TreeReflection>),
    Componentwise {
        parts: Vec<Automorphism>,
        sizes: Option<Vec<u64>>,
    },
}

impl Automorphism {
    pub fn apply(&self, s: &SiteId) -> SiteId {
        match self {
            Automorphism::Identity => s.clone(),
            Automorphism::TorusReflection { sum, l } => {
                let ix = s.ix() as i64;
                let d = sum.len();
                let mut out = 0i64;
                let mut stride = 1i64;
                let mut rem = ix;
                for item in sum.iter().take(d) {
                    let c = rem % l;
                    rem /= l;
                    let m = (item - c).rem_euclid(*l);
                    out += m * stride;
                    stride *= l;
                }
                SiteId::Ix(out as u32)
            }
            Automorphism::Transposition { a, b } => {
                let i = s.ix();
                SiteId::Ix(if i == *a {
                    *b
                } else if i == *b {
                    *a
                } else {
                    i
                })
            }
            Automorphism::TreeReflection(refl) => match s {
                SiteId::Word(w) => SiteId::Word(refl.apply(w)),
                _ => panic!("tree automorphism applied to a non-word site"),
            },
            Automorphism::Componentwise { parts, sizes } => match (s, sizes) {
                (SiteId::Tuple(xs), _) => SiteId::Tuple(
                    parts.iter().zip(xs).map(|(a, x)| a.apply(x)).collect(),
                ),
                (SiteId::Ix(ix), Some(sizes)) => {
                    let mut rem = *ix as u64;
                    let mut out = 0u64;
                    let mut stride = 1u64;
                    for (a, &n) in parts.iter().zip(sizes) {
                        let c = (rem % n) as u32;
                        rem /= n;
                        out += a.apply(&SiteId::Ix(c)).ix() as u64 * stride;
                        stride *= n;
                    }
                    SiteId::Ix(out as u32)
                }
                _ => panic!("componentwise automorphism applied to a mismatched site"),
            },
        }
    }
}

impl ReflectiveGraph {
    // ------------------------------------------------------------------
    // Constructors
    // ------------------------------------------------------------------

    pub fn make_torus(d: usize, l: u32, kernel: KernelSpec) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidGraph("torus dimension must be >= 1".into()));
        }
        if l < 2 {
            return Err(Error::InvalidGraph("torus side must be >= 2".into()));
        }
        let count = (l as u64).checked_pow(d as u32);
        match count {
            Some(c) if c <= u32::MAX as u64 => {}
            _ => return Err(Error::InvalidGraph("torus too large for dense indexing".into())),
        }
        kernel.validate(d)?;
        let unit_axis = kernel.is_unit_axis(d);
        let cum = CumTable::new(&kernel.moves.iter().map(|(_, p)| *p).collect::<Vec<_>>());
        let g = ReflectiveGraph::Torus(Torus {
            d,
            l,
            kernel,
            cum,
            unit_axis,
            bfs: OnceLock::new(),
        });
        g.check_single_class()?;
        Ok(g)
    }

    pub fn make_complete(n: u32) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGraph("complete graph needs n >= 2".into()));
        }
        Ok(ReflectiveGraph::Complete(Complete { n }))
    }

    pub fn make_tree(r: u32) -> Result<Self> {
        if !(3..=64).contains(&r) {
            return Err(Error::InvalidGraph("tree degree must be in 3..=64".into()));
        }
        Ok(ReflectiveGraph::Tree(Tree { r: r as u8 }))
    }

    pub fn make_product(parts: Vec<(ReflectiveGraph, f64)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidGraph("product needs at least one component".into()));
        }
        let sum: f64 = parts.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidGraph(format!(
                "component weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        if parts.iter().any(|(_, w)| !(*w > 0.0)) {
            return Err(Error::InvalidGraph("component weights must be positive".into()));
        }
        let (comps, weights): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let sizes = comps
            .iter()
            .map(|c| c.site_count())
            .collect::<Option<Vec<u64>>>();
        if let Some(sz) = &sizes {
            let total: u128 = sz.iter().map(|&n| n as u128).product();
            if total > u32::MAX as u128 {
                return Err(Error::InvalidGraph("product too large for dense indexing".into()));
            }
        }
        let cum = CumTable::new(&weights);
        Ok(ReflectiveGraph::Product(Product {
            comps,
            weights,
            cum,
            sizes,
        }))
    }

    // ------------------------------------------------------------------
    // Basic queries
    // ------------------------------------------------------------------

    pub fn site_count(&self) -> Option<u64> {
        match self {
            ReflectiveGraph::Torus(t) => Some((t.l as u64).pow(t.d as u32)),
            ReflectiveGraph::Complete(c) => Some(c.n as u64),
            ReflectiveGraph::Tree(_) => None,
            ReflectiveGraph::Product(p) => p
                .sizes
                .as_ref()
                .map(|sz| sz.iter().product()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.site_count().is_some()
    }

    pub fn finite_count(&self) -> Result<u32> {
        self.site_count()
            .map(|n| n as u32)
            .ok_or(Error::InfiniteGraph)
    }

    pub fn origin(&self) -> SiteId {
        match self {
            ReflectiveGraph::Torus(_) | ReflectiveGraph::Complete(_) => SiteId::Ix(0),
            ReflectiveGraph::Tree(_) => SiteId::Word(Vec::new()),
            ReflectiveGraph::Product(p) => {
                if p.sizes.is_some() {
                    SiteId::Ix(0)
                } else {
                    SiteId::Tuple(p.comps.iter().map(|c| c.origin()).collect())
                }
            }
        }
    }

    /// `(dimension, side)` when the graph is a torus.
    pub fn torus_dims(&self) -> Option<(usize, u32)> {
        match self {
            ReflectiveGraph::Torus(t) => Some((t.d, t.l)),
            _ => None,
        }
    }

    pub fn torus_coords(&self, ix: u32) -> Vec<i64> {
        match self {
            ReflectiveGraph::Torus(t) => {
                let mut rem = ix as i64;
                let l = t.l as i64;
                (0..t.d)
                    .map(|_| {
                        let c = rem % l;
                        rem /= l;
                        c
                    })
                    .collect()
            }
            _ => panic!("not a torus"),
        }
    }

    pub fn torus_ix(&self, coords: &[i64]) -> u32 {
        match self {
            ReflectiveGraph::Torus(t) => {
                let l = t.l as i64;
                let mut out = 0i64;
                let mut stride = 1i64;
                for &c in coords {
                    out += c.rem_euclid(l) * stride;
                    stride *= l;
                }
                out as u32
            }
            _ => panic!("not a torus"),
        }
    }

    /// Decode a finite-product index into per-component indices.
    pub fn product_split(&self, ix: u32) -> Vec<u32> {
        match self {
            ReflectiveGraph::Product(p) => {
                let sizes = p.sizes.as_ref().expect("finite product");
                let mut rem = ix as u64;
                sizes
                    .iter()
                    .map(|&n| {
                        let c = (rem % n) as u32;
                        rem /= n;
                        c
                    })
                    .collect()
            }
            _ => panic!("not a product"),
        }
    }

    // ------------------------------------------------------------------
    // Stepping
    // ------------------------------------------------------------------

    /// One kernel step from a dense site index (finite graphs only).
    #[inline]
    pub fn step_ix(&self, from: u32, s: &mut Stream) -> u32 {
        match self {
            ReflectiveGraph::Torus(t) => {
                let m = t.cum.sample(s);
                let disp = &t.kernel.moves[m].0;
                let l = t.l as i64;
                if t.d == 1 {
                    return ((from as i64 + disp[0]).rem_euclid(l)) as u32;
                }
                let mut rem = from as i64;
                let mut out = 0i64;
                let mut stride = 1i64;
                for &dc in disp.iter() {
                    let c = rem % l;
                    rem /= l;
                    out += (c + dc).rem_euclid(l) * stride;
                    stride *= l;
                }
                out as u32
            }
            ReflectiveGraph::Complete(c) => {
                let j = s.next_below((c.n - 1) as u64) as u32;
                if j >= from {
                    j + 1
                } else {
                    j
                }
            }
            ReflectiveGraph::Tree(_) => panic!("tree has no dense indices"),
            ReflectiveGraph::Product(p) => {
                let sizes = p.sizes.as_ref().expect("finite product");
                let which = p.cum.sample(s);
                let mut rem = from as u64;
                let mut out = 0u64;
                let mut stride = 1u64;
                for (i, (&n, comp)) in sizes.iter().zip(&p.comps).enumerate() {
                    let c = (rem % n) as u32;
                    rem /= n;
                    let c2 = if i == which { comp.step_ix(c, s) } else { c };
                    out += c2 as u64 * stride;
                    stride *= n;
                }
                out as u32
            }
        }
    }

    /// One kernel step from a general site.
    pub fn sample_step(&self, from: &SiteId, s: &mut Stream) -> SiteId {
        match self {
            ReflectiveGraph::Tree(t) => match from {
                SiteId::Word(w) => {
                    let mut w = w.clone();
                    let letter = s.next_below(t.r as u64) as u8;
                    tree::apply_letter(&mut w, letter);
                    SiteId::Word(w)
                }
                _ => panic!("tree sites are words"),
            },
            ReflectiveGraph::Product(p) if p.sizes.is_none() => match from {
                SiteId::Tuple(xs) => {
                    let which = p.cum.sample(s);
                    let mut xs = xs.clone();
                    xs[which] = p.comps[which].sample_step(&xs[which], s);
                    SiteId::Tuple(xs)
                }
                _ => panic!("infinite product sites are tuples"),
            },
            _ => SiteId::Ix(self.step_ix(from.ix(), s)),
        }
    }

    /// All `(destination, probability)` pairs from a site.
    pub fn kernel_support(&self, from: &SiteId) -> Vec<(SiteId, f64)> {
        match self {
            ReflectiveGraph::Torus(t) => {
                let l = t.l as i64;
                let from_ix = from.ix();
                let coords = self.torus_coords(from_ix);
                let mut acc: HashMap<u32, f64> = HashMap::new();
                for (disp, p) in &t.kernel.moves {
                    let mut out = 0i64;
                    let mut stride = 1i64;
                    for (c, dc) in coords.iter().zip(disp) {
                        out += (c + dc).rem_euclid(l) * stride;
                        stride *= l;
                    }
                    *acc.entry(out as u32).or_insert(0.0) += p;
                }
                let mut v: Vec<_> = acc.into_iter().map(|(i, p)| (SiteId::Ix(i), p)).collect();
                v.sort_by_key(|(s, _)| s.clone());
                v
            }
            ReflectiveGraph::Complete(c) => {
                let from_ix = from.ix();
                (0..c.n)
                    .filter(|&j| j != from_ix)
                    .map(|j| (SiteId::Ix(j), 1.0 / (c.n - 1) as f64))
                    .collect()
            }
            ReflectiveGraph::Tree(t) => match from {
                SiteId::Word(w) => (0..t.r)
                    .map(|letter| {
                        let mut w2 = w.clone();
                        tree::apply_letter(&mut w2, letter);
                        (SiteId::Word(w2), 1.0 / t.r as f64)
                    })
                    .collect(),
                _ => panic!("tree sites are words"),
            },
            ReflectiveGraph::Product(p) => {
                let comps_sites: Vec<SiteId> = match (from, &p.sizes) {
                    (SiteId::Tuple(xs), _) => xs.clone(),
                    (SiteId::Ix(_), Some(_)) => self
                        .product_split(from.ix())
                        .into_iter()
                        .map(SiteId::Ix)
                        .collect(),
                    _ => panic!("mismatched product site"),
                };
                let mut acc: HashMap<SiteId, f64> = HashMap::new();
                for (i, (comp, alpha)) in p.comps.iter().zip(&p.weights).enumerate() {
                    for (dest_i, q) in comp.kernel_support(&comps_sites[i]) {
                        let mut parts = comps_sites.clone();
                        parts[i] = dest_i;
                        let dest = self.assemble_product_site(parts);
                        *acc.entry(dest).or_insert(0.0) += alpha * q;
                    }
                }
                let mut v: Vec<_> = acc.into_iter().collect();
                v.sort_by(|a, b| a.0.cmp(&b.0));
                v
            }
        }
    }

    fn assemble_product_site(&self, parts: Vec<SiteId>) -> SiteId {
        match self {
            ReflectiveGraph::Product(p) => match &p.sizes {
                Some(sizes) => {
                    let mut out = 0u64;
                    let mut stride = 1u64;
                    for (part, &n) in parts.iter().zip(sizes) {
                        out += part.ix() as u64 * stride;
                        stride *= n;
                    }
                    SiteId::Ix(out as u32)
                }
                None => SiteId::Tuple(parts),
            },
            _ => panic!("not a product"),
        }
    }

    /// Exact one-step transition probability.
    pub fn kernel_prob(&self, from: &SiteId, to: &SiteId) -> f64 {
        self.kernel_support(from)
            .into_iter()
            .find(|(s, _)| s == to)
            .map(|(_, p)| p)
            .unwrap_or(0.0)
    }

    // ------------------------------------------------------------------
    // Distance
    // ------------------------------------------------------------------

    pub fn distance(&self, x: &SiteId, y: &SiteId) -> u64 {
        match self {
            ReflectiveGraph::Torus(t) => {
                let l = t.l as i64;
                let cx = self.torus_coords(x.ix());
                let cy = self.torus_coords(y.ix());
                if t.unit_axis {
                    cx.iter()
                        .zip(&cy)
                        .map(|(a, b)| {
                            let d = (a - b).rem_euclid(l);
                            d.min(l - d) as u64
                        })
                        .sum()
                } else {
                    let table = t.bfs.get_or_init(|| self.bfs_from_origin());
                    let mut diff = 0i64;
                    let mut stride = 1i64;
                    for (a, b) in cx.iter().zip(&cy) {
                        diff += (b - a).rem_euclid(l) * stride;
                        stride *= l;
                    }
                    table[diff as usize] as u64
                }
            }
            ReflectiveGraph::Complete(_) => {
                if x == y {
                    0
                } else {
                    1
                }
            }
            ReflectiveGraph::Tree(_) => match (x, y) {
                (SiteId::Word(a), SiteId::Word(b)) => tree::distance(a, b),
                _ => panic!("tree sites are words"),
            },
            ReflectiveGraph::Product(p) => {
                let (xs, ys): (Vec<SiteId>, Vec<SiteId>) = match (x, y, &p.sizes) {
                    (SiteId::Tuple(a), SiteId::Tuple(b), _) => (a.clone(), b.clone()),
                    (SiteId::Ix(_), SiteId::Ix(_), Some(_)) => (
                        self.product_split(x.ix()).into_iter().map(SiteId::Ix).collect(),
                        self.product_split(y.ix()).into_iter().map(SiteId::Ix).collect(),
                    ),
                    _ => panic!("mismatched product sites"),
                };
                p.comps
                    .iter()
                    .zip(xs.iter().zip(&ys))
                    .map(|(c, (a, b))| c.distance(a, b))
                    .sum()
            }
        }
    }

    fn bfs_from_origin(&self) -> Vec<u32> {
        let n = self.finite_count().expect("BFS requires a finite graph") as usize;
        let mut dist = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        dist[0] = 0;
        queue.push_back(0u32);
        while let Some(v) = queue.pop_front() {
            for (w, _) in self.kernel_support(&SiteId::Ix(v)) {
                let w = w.ix();
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dist[v as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Reject kernels whose support does not reach every site.
    fn check_single_class(&self) -> Result<()> {
        let n = self.finite_count()? as usize;
        let table = self.bfs_from_origin();
        let unreachable = table.iter().filter(|&&d| d == u32::MAX).count();
        if unreachable > 0 {
            return Err(Error::InvalidKernel(format!(
                "kernel support does not generate the graph: {unreachable} of {n} sites unreachable"
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Swap automorphisms
    // ------------------------------------------------------------------

    pub fn swap_automorphism(&self, x: &SiteId, w: &SiteId) -> Automorphism {
        if x == w {
            return Automorphism::Identity;
        }
        match self {
            ReflectiveGraph::Torus(t) => {
                let cx = self.torus_coords(x.ix());
                let cw = self.torus_coords(w.ix());
                let sum: Vec<i64> = cx.iter().zip(&cw).map(|(a, b)| a + b).collect();
                Automorphism::TorusReflection { sum, l: t.l as i64 }
            }
            ReflectiveGraph::Complete(_) => Automorphism::Transposition {
                a: x.ix(),
                b: w.ix(),
            },
            ReflectiveGraph::Tree(t) => match (x, w) {
                (SiteId::Word(a), SiteId::Word(b)) => Automorphism::TreeReflection(Arc::new(
                    tree::TreeReflection::new(t.r, a, b),
                )),
                _ => panic!("tree sites are words"),
            },
            ReflectiveGraph::Product(p) => {
                let (xs, ws): (Vec<SiteId>, Vec<SiteId>) = match (x, w, &p.sizes) {
                    (SiteId::Tuple(a), SiteId::Tuple(b), _) => (a.clone(), b.clone()),
                    (SiteId::Ix(_), SiteId::Ix(_), Some(_)) => (
                        self.product_split(x.ix()).into_iter().map(SiteId::Ix).collect(),
                        self.product_split(w.ix()).into_iter().map(SiteId::Ix).collect(),
                    ),
                    _ => panic!("mismatched product sites"),
                };
                Automorphism::Componentwise {
                    parts: p
                        .comps
                        .iter()
                        .zip(xs.iter().zip(&ws))
                        .map(|(c, (a, b))| c.swap_automorphism(a, b))
                        .collect(),
                    sizes: p.sizes.clone(),
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Spec strings and site rendering
    // ------------------------------------------------------------------

    /// Parse a graph spec such as `torus:d=1,L=32768,kernel=nn`,
    /// `complete:n=16`, `tree:r=3`, or
    /// `product:[torus:d=1,L=4@0.5;complete:n=3@0.5]`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(body) = spec.strip_prefix("torus:") {
            let mut d: Option<usize> = None;
            let mut l: Option<u32> = None;
            let mut kernel_str: Option<&str> = None;
            let mut rest = body;
            // kernel= consumes the remainder (its value contains commas).
            if let Some(pos) = rest.find("kernel=") {
                kernel_str = Some(&rest[pos + "kernel=".len()..]);
                rest = rest[..pos].trim_end_matches(',');
            }
            for part in rest.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidSpec(format!("bad torus field `{part}`")))?;
                match k {
                    "d" => d = Some(v.parse().map_err(|_| bad_num(part))?),
                    "L" => l = Some(v.parse().map_err(|_| bad_num(part))?),
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "unknown torus field `{k}` (expected d, L, kernel)"
                        )))
                    }
                }
            }
            let d = d.ok_or_else(|| Error::InvalidSpec("torus needs d=..".into()))?;
            let l = l.ok_or_else(|| Error::InvalidSpec("torus needs L=..".into()))?;
            let kernel = match kernel_str {
                None | Some("nn") => KernelSpec::nn(d),
                Some(s) => parse_kernel(s, d)?,
            };
            Self::make_torus(d, l, kernel)
        } else if let Some(body) = spec.strip_prefix("complete:") {
            let n = body
                .strip_prefix("n=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidSpec(format!("bad complete spec `{spec}`")))?;
            Self::make_complete(n)
        } else if let Some(body) = spec.strip_prefix("tree:") {
            let r = body
                .strip_prefix("r=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidSpec(format!("bad tree spec `{spec}`")))?;
            Self::make_tree(r)
        } else if let Some(body) = spec.strip_prefix("product:") {
            let inner = body
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| Error::InvalidSpec("product spec needs [..]".into()))?;
            let mut parts = Vec::new();
            for chunk in split_top_level(inner, ';') {
                let (comp_spec, weight) = chunk
                    .rsplit_once('@')
                    .ok_or_else(|| Error::InvalidSpec(format!("component `{chunk}` needs @weight")))?;
                let weight: f64 = weight
                    .parse()
                    .map_err(|_| Error::InvalidSpec(format!("bad weight in `{chunk}`")))?;
                parts.push((Self::parse(comp_spec)?, weight));
            }
            Self::make_product(parts)
        } else {
            Err(Error::InvalidSpec(format!(
                "unknown graph family in `{spec}` (expected torus:/complete:/tree:/product:)"
            )))
        }
    }

    pub fn spec_string(&self) -> String {
        match self {
            ReflectiveGraph::Torus(t) => {
                let kernel = if t.unit_axis && t.kernel.moves.iter().all(|(_, p)| {
                    (*p - 0.5 / t.d as f64).abs() < 1e-15
                }) {
                    "nn".to_string()
                } else {
                    t.kernel
                        .moves
                        .iter()
                        .map(|(v, p)| {
                            if t.d == 1 {
                                format!("{}:{}", v[0], p)
                            } else {
                                let cs: Vec<String> = v.iter().map(|c| c.to_string()).collect();
                                format!("({}):{}", cs.join(","), p)
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(",")
                };
                format!("torus:d={},L={},kernel={}", t.d, t.l, kernel)
            }
            ReflectiveGraph::Complete(c) => format!("complete:n={}", c.n),
            ReflectiveGraph::Tree(t) => format!("tree:r={}", t.r),
            ReflectiveGraph::Product(p) => {
                let parts: Vec<String> = p
                    .comps
                    .iter()
                    .zip(&p.weights)
                    .map(|(c, w)| format!("{}@{}", c.spec_string(), w))
                    .collect();
                format!("product:[{}]", parts.join(";"))
            }
        }
    }

    /// JSON rendering of a site: coordinates for tori, index for complete
    /// graphs, digit string for trees, array for products.
    pub fn site_json(&self, s: &SiteId) -> serde_json::Value {
        match self {
            ReflectiveGraph::Torus(_) => serde_json::json!(self.torus_coords(s.ix())),
            ReflectiveGraph::Complete(_) => serde_json::json!(s.ix()),
            ReflectiveGraph::Tree(_) => match s {
                SiteId::Word(w) => {
                    serde_json::json!(w.iter().map(|c| c.to_string()).collect::<String>())
                }
                _ => panic!("tree sites are words"),
            },
            ReflectiveGraph::Product(p) => {
                let parts: Vec<SiteId> = match (s, &p.sizes) {
                    (SiteId::Tuple(xs), _) => xs.clone(),
                    (SiteId::Ix(_), Some(_)) => {
                        self.product_split(s.ix()).into_iter().map(SiteId::Ix).collect()
                    }
                    _ => panic!("mismatched product site"),
                };
                serde_json::json!(p
                    .comps
                    .iter()
                    .zip(parts)
                    .map(|(c, x)| c.site_json(&x))
                    .collect::<Vec<_>>())
            }
        }
    }
}

fn bad_num(part: &str) -> Error {
    Error::InvalidSpec(format!("bad numeric value in `{part}`"))
}

/// Split on `sep`, ignoring separators inside brackets.
fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Parse a kernel spec: `1:0.5,-1:0.5` in one dimension or
/// `(1,0):0.25,(-1,0):0.25,...` in general.
fn parse_kernel(s: &str, d: usize) -> Result<KernelSpec> {
    let mut moves = Vec::new();
    for chunk in split_top_level(s, ',').into_iter().filter(|c| !c.is_empty()) {
        let (vec_str, p_str) = chunk
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidKernel(format!("bad kernel entry `{chunk}`")))?;
        let p: f64 = p_str
            .parse()
            .map_err(|_| Error::InvalidKernel(format!("bad probability in `{chunk}`")))?;
        let v: Vec<i64> = if let Some(inner) = vec_str.strip_prefix('(').and_then(|x| x.strip_suffix(')')) {
            inner
                .split(',')
                .map(|c| c.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidKernel(format!("bad displacement in `{chunk}`")))?
        } else {
            vec![vec_str
                .parse()
                .map_err(|_| Error::InvalidKernel(format!("bad displacement in `{chunk}`")))?]
        };
        if v.len() != d {
            return Err(Error::InvalidKernel(format!(
                "displacement `{vec_str}` has dimension {}, torus has {d}",
                v.len()
            )));
        }
        moves.push((v, p));
    }
    Ok(KernelSpec { moves })
}

/// Exhaustive kernel-invariance check on a finite graph: `p(πa, πb) = p(a, b)`
/// for every ordered pair. Used by tests and the oracle-check report.
pub fn check_kernel_invariance(g: &ReflectiveGraph, auto: &Automorphism) -> Result<()> {
    let n = g.finite_count()?;
    for a in 0..n {
        let pa = auto.apply(&SiteId::Ix(a));
        for (b, p) in g.kernel_support(&SiteId::Ix(a)) {
            let pb = auto.apply(&b);
            let q = g.kernel_prob(&pa, &pb);
            if (p - q).abs() > 1e-15 {
                return Err(Error::InvariantViolation {
                    invariant: "kernel invariance".into(),
                    seed: 0,
                    detail: format!("p({a},{b:?})={p} but p(π..)={q}"),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::salt;

    #[test]
    fn smallest_torus_swap() {
        let g = ReflectiveGraph::make_torus(1, 2, KernelSpec::nn(1)).unwrap();
        let a = g.swap_automorphism(&SiteId::Ix(0), &SiteId::Ix(1));
        assert_eq!(a.apply(&SiteId::Ix(0)), SiteId::Ix(1));
        assert_eq!(a.apply(&SiteId::Ix(1)), SiteId::Ix(0));
        // Both displacements of the kernel land on the other site.
        let mut s = Stream::new(3, salt::GENERIC);
        for _ in 0..50 {
            assert_eq!(g.step_ix(0, &mut s), 1);
        }
    }

    #[test]
    fn torus_2d_swap_example() {
        let g = ReflectiveGraph::make_torus(2, 4, KernelSpec::nn(2)).unwrap();
        let x = g.torus_ix(&[0, 0]);
        let w = g.torus_ix(&[1, 2]);
        let a = g.swap_automorphism(&SiteId::Ix(x), &SiteId::Ix(w));
        assert_eq!(a.apply(&SiteId::Ix(x)), SiteId::Ix(w));
        assert_eq!(a.apply(&SiteId::Ix(w)), SiteId::Ix(x));
        // (3,3) -> (1+0-3, 2+0-3) = (2,3) mod 4
        let v = g.torus_ix(&[3, 3]);
        assert_eq!(a.apply(&SiteId::Ix(v)), SiteId::Ix(g.torus_ix(&[2, 3])));
        check_kernel_invariance(&g, &a).unwrap();
        // Adjacency preservation over all 16 sites.
        for i in 0..16u32 {
            for (j, _) in g.kernel_support(&SiteId::Ix(i)) {
                let pi = a.apply(&SiteId::Ix(i));
                let pj = a.apply(&j);
                assert_eq!(g.distance(&pi, &pj), 1);
            }
        }
    }

    #[test]
    fn torus_distance_example() {
        let g = ReflectiveGraph::parse("torus:d=1,L=8,kernel=1:0.5,-1:0.5").unwrap();
        assert_eq!(g.distance(&SiteId::Ix(0), &SiteId::Ix(5)), 3);
    }

    #[test]
    fn torus_swap_midpoint_example() {
        let g = ReflectiveGraph::make_torus(1, 6, KernelSpec::nn(1)).unwrap();
        let a = g.swap_automorphism(&SiteId::Ix(1), &SiteId::Ix(4));
        assert_eq!(a.apply(&SiteId::Ix(2)), SiteId::Ix(3));
        check_kernel_invariance(&g, &a).unwrap();
    }

    #[test]
    fn asymmetric_kernel_rejected() {
        let err = ReflectiveGraph::parse("torus:d=1,L=8,kernel=1:0.7,-1:0.3").unwrap_err();
        assert!(err.to_string().contains("negation-symmetric"), "{err}");
    }

    #[test]
    fn non_generating_kernel_rejected() {
        let err = ReflectiveGraph::parse("torus:d=1,L=8,kernel=2:0.5,-2:0.5").unwrap_err();
        assert!(err.to_string().contains("does not generate"), "{err}");
    }

    #[test]
    fn complete_smallest() {
        let g = ReflectiveGraph::make_complete(2).unwrap();
        assert_eq!(g.kernel_prob(&SiteId::Ix(0), &SiteId::Ix(1)), 1.0);
        let mut s = Stream::new(0, salt::GENERIC);
        assert_eq!(g.step_ix(0, &mut s), 1);
    }

    #[test]
    fn complete_transposition_fixes_others() {
        let g = ReflectiveGraph::make_complete(4).unwrap();
        let a = g.swap_automorphism(&SiteId::Ix(1), &SiteId::Ix(3));
        assert_eq!(a.apply(&SiteId::Ix(2)), SiteId::Ix(2));
        check_kernel_invariance(&g, &a).unwrap();
    }

    #[test]
    fn complete_distance_invariance_k5() {
        let g = ReflectiveGraph::make_complete(5).unwrap();
        let a = g.swap_automorphism(&SiteId::Ix(0), &SiteId::Ix(3));
        for i in 0..5u32 {
            for j in 0..5u32 {
                let (pi, pj) = (a.apply(&SiteId::Ix(i)), a.apply(&SiteId::Ix(j)));
                assert_eq!(
                    g.distance(&pi, &pj),
                    g.distance(&SiteId::Ix(i), &SiteId::Ix(j))
                );
            }
        }
    }

    #[test]
    fn swap_same_site_is_identity() {
        let g = ReflectiveGraph::make_tree(3).unwrap();
        let o = g.origin();
        let a = g.swap_automorphism(&o, &o);
        assert!(matches!(a, Automorphism::Identity));
    }

    #[test]
    fn tree_swap_distance_audit() {
        // Distance preservation on 1000 random pairs within radius 12.
        let g = ReflectiveGraph::make_tree(3).unwrap();
        let x = g.origin();
        let w = SiteId::Word(vec![0]);
        let a = g.swap_automorphism(&x, &w);
        assert_eq!(a.apply(&x), w);
        assert_eq!(a.apply(&w), x);
        let mut s = Stream::new(5, salt::GENERIC);
        let mut sites = vec![g.origin()];
        for _ in 0..600 {
            let from = sites[s.next_below(sites.len() as u64) as usize].clone();
            let next = g.sample_step(&from, &mut s);
            if g.distance(&g.origin(), &next) <= 12 {
                sites.push(next);
            }
        }
        for _ in 0..1000 {
            let u = &sites[s.next_below(sites.len() as u64) as usize];
            let v = &sites[s.next_below(sites.len() as u64) as usize];
            assert_eq!(g.distance(&a.apply(u), &a.apply(v)), g.distance(u, v));
        }
    }

    #[test]
    fn swap_involution_and_invariance_property() {
        // Random family, random pair: the swap exchanges the pair, is an
        // involution, and leaves the kernel invariant (exhaustive on the
        // finite graph).
        let mut s = Stream::new(99, salt::GENERIC);
        for _ in 0..40 {
            let g = match s.next_below(4) {
                0 => ReflectiveGraph::make_torus(1, 2 + s.next_below(9) as u32, KernelSpec::nn(1))
                    .unwrap(),
                1 => ReflectiveGraph::make_torus(2, 2 + s.next_below(3) as u32, KernelSpec::nn(2))
                    .unwrap(),
                2 => ReflectiveGraph::make_complete(2 + s.next_below(7) as u32).unwrap(),
                _ => ReflectiveGraph::make_product(vec![
                    (
                        ReflectiveGraph::make_torus(1, 2 + s.next_below(3) as u32, KernelSpec::nn(1))
                            .unwrap(),
                        0.5,
                    ),
                    (
                        ReflectiveGraph::make_complete(2 + s.next_below(3) as u32).unwrap(),
                        0.5,
                    ),
                ])
                .unwrap(),
            };
            let n = g.finite_count().unwrap();
            let x = SiteId::Ix(s.next_below(n as u64) as u32);
            let w = SiteId::Ix(s.next_below(n as u64) as u32);
            let a = g.swap_automorphism(&x, &w);
            assert_eq!(a.apply(&x), w);
            assert_eq!(a.apply(&w), x);
            for v in 0..n {
                let v = SiteId::Ix(v);
                assert_eq!(a.apply(&a.apply(&v)), v);
            }
            check_kernel_invariance(&g, &a).unwrap();
        }
    }

    #[test]
    fn product_of_cycles_is_torus_by_distance_spectrum() {
        let c4 = || ReflectiveGraph::make_torus(1, 4, KernelSpec::nn(1)).unwrap();
        let prod = ReflectiveGraph::make_product(vec![(c4(), 0.5), (c4(), 0.5)]).unwrap();
        let torus = ReflectiveGraph::make_torus(2, 4, KernelSpec::nn(2)).unwrap();
        let spectrum = |g: &ReflectiveGraph| {
            let n = g.finite_count().unwrap();
            let mut v: Vec<u64> = (0..n)
                .flat_map(|i| {
                    (0..n).map(move |j| (i, j))
                })
                .map(|(i, j)| g.distance(&SiteId::Ix(i), &SiteId::Ix(j)))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(spectrum(&prod), spectrum(&torus));
    }

    #[test]
    fn product_with_tree_swap_involution() {
        let tree = ReflectiveGraph::make_tree(3).unwrap();
        let c2 = ReflectiveGraph::make_torus(1, 2, KernelSpec::nn(1)).unwrap();
        let g = ReflectiveGraph::make_product(vec![(tree, 0.5), (c2, 0.5)]).unwrap();
        assert!(!g.is_finite());
        let x = SiteId::Tuple(vec![SiteId::Word(vec![]), SiteId::Ix(0)]);
        let w = SiteId::Tuple(vec![SiteId::Word(vec![1]), SiteId::Ix(1)]);
        let a = g.swap_automorphism(&x, &w);
        assert_eq!(a.apply(&x), w);
        assert_eq!(a.apply(&w), x);
    }

    #[test]
    fn single_component_product_matches_original() {
        let g0 = ReflectiveGraph::make_complete(5).unwrap();
        let g = ReflectiveGraph::make_product(vec![
            (ReflectiveGraph::make_complete(5).unwrap(), 1.0),
        ])
        .unwrap();
        assert_eq!(g.site_count(), g0.site_count());
        for i in 0..5u32 {
            for j in 0..5u32 {
                assert_eq!(
                    g.kernel_prob(&SiteId::Ix(i), &SiteId::Ix(j)),
                    g0.kernel_prob(&SiteId::Ix(i), &SiteId::Ix(j))
                );
            }
        }
    }

    #[test]
    fn sample_step_torus_frequencies() {
        let g = ReflectiveGraph::parse("torus:d=1,L=8").unwrap();
        let mut s = Stream::new(11, salt::GENERIC);
        let n = 100_000;
        let mut plus = 0u32;
        for _ in 0..n {
            if g.step_ix(0, &mut s) == 1 {
                plus += 1;
            }
        }
        let f = plus as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((f - 0.5).abs() < 3.0 * sigma, "{f}");
    }

    #[test]
    fn sample_step_k4_chi_square() {
        let g = ReflectiveGraph::make_complete(4).unwrap();
        let mut s = Stream::new(13, salt::GENERIC);
        let n = 100_000u32;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            counts[g.step_ix(0, &mut s) as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let expect = n as f64 / 3.0;
        let stat: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        let p = crate::stats::chi_square_pvalue(stat, 2.0);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn parse_round_trips() {
        for spec in [
            "torus:d=1,L=32768,kernel=nn",
            "torus:d=2,L=4,kernel=nn",
            "complete:n=16",
            "tree:r=3",
            "product:[torus:d=1,L=4,kernel=nn@0.5;complete:n=3@0.5]",
        ] {
            let g = ReflectiveGraph::parse(spec).unwrap();
            let round = ReflectiveGraph::parse(&g.spec_string()).unwrap();
            assert_eq!(g.spec_string(), round.spec_string());
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(ReflectiveGraph::parse("grid:L=4").is_err());
        assert!(ReflectiveGraph::parse("torus:d=1,L=4,bogus=2").is_err());
    }
}
