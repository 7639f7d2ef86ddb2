//! Sparse convolution kernels over packed group keys.
//!
//! Elements are packed into machine words where the group allows it (lattices
//! of rank at most four, Heisenberg, cyclic groups and free products of those
//! with one word per letter); everything else falls back to [`GroupElement`]
//! keys. The hot loops are generic over [`KeyOps`], so the packed paths never
//! touch the allocating representation.

use std::hash::Hash;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use smallvec::SmallVec;

use crate::groups::{GroupElement, GroupSpec, Letter};

/// Entries of the left operand handled by one shard. Fixed, so the shard
/// partition does not depend on the thread count.
pub const SHARD: usize = 4096;

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for Neumaier {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Neumaier::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub trait KeyOps: Sync + Send {
    type Key: Clone + Eq + Hash + Ord + Send + Sync;
    fn identity(&self) -> Self::Key;
    fn mul(&self, a: &Self::Key, b: &Self::Key) -> Self::Key;
    fn inverse(&self, a: &Self::Key) -> Self::Key;
    fn encode(&self, g: &GroupElement) -> Self::Key;
    fn decode(&self, k: &Self::Key) -> GroupElement;
}

const LANE_BIAS: u64 = 1 << 15;
const LANE_MASK: u64 = 0xffff;
const HEIS_Z_BIAS: u64 = 1 << 30;
const HEIS_Z_MASK: u64 = (1 << 31) - 1;

/// A base group whose elements pack into at most 63 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    /// Rank `d <= 3` inside words, `d <= 4` at top level; 16-bit biased lanes.
    Lattice {
        d: u8,
    },
    /// `x`, `y` in 16-bit lanes, `z` in 31 bits.
    Heisenberg,
    Cyclic {
        m: u64,
    },
}

impl Base {
    fn lattice_bias(d: u8) -> u64 {
        (0..d as u64).map(|i| LANE_BIAS << (16 * i)).sum()
    }

    #[inline]
    fn lane(k: u64, i: u8) -> i32 {
        ((k >> (16 * i as u64)) & LANE_MASK) as i32 - LANE_BIAS as i32
    }

    #[inline]
    fn heis_parts(k: u64) -> (i64, i64, i64) {
        (
            (k & LANE_MASK) as i64 - LANE_BIAS as i64,
            ((k >> 16) & LANE_MASK) as i64 - LANE_BIAS as i64,
            ((k >> 32) & HEIS_Z_MASK) as i64 - HEIS_Z_BIAS as i64,
        )
    }

    #[inline]
    fn heis_pack(x: i64, y: i64, z: i64) -> u64 {
        debug_assert!(x.unsigned_abs() < LANE_BIAS && y.unsigned_abs() < LANE_BIAS);
        debug_assert!(z.unsigned_abs() < HEIS_Z_BIAS);
        ((x + LANE_BIAS as i64) as u64)
            | (((y + LANE_BIAS as i64) as u64) << 16)
            | (((z + HEIS_Z_BIAS as i64) as u64) << 32)
    }

    #[inline]
    pub fn identity(&self) -> u64 {
        match *self {
            Base::Lattice { d } => Self::lattice_bias(d),
            Base::Heisenberg => Self::heis_pack(0, 0, 0),
            Base::Cyclic { .. } => 0,
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        match *self {
            // biased lanes add without carries while every coordinate stays
            // inside (-2^15, 2^15)
            Base::Lattice { d } => a + b - Self::lattice_bias(d),
            Base::Heisenberg => {
                let (x, y, z) = Self::heis_parts(a);
                let (u, v, w) = Self::heis_parts(b);
                Self::heis_pack(x + u, y + v, z + w + x * v)
            }
            Base::Cyclic { m } => (a + b) % m,
        }
    }

    #[inline]
    pub fn inverse(&self, a: u64) -> u64 {
        match *self {
            Base::Lattice { d } => 2 * Self::lattice_bias(d) - a,
            Base::Heisenberg => {
                let (x, y, z) = Self::heis_parts(a);
                Self::heis_pack(-x, -y, -z + x * y)
            }
            Base::Cyclic { m } => (m - a) % m,
        }
    }

    pub fn encode(&self, g: &GroupElement) -> u64 {
        match (*self, g) {
            (Base::Lattice { d }, GroupElement::Lattice(c)) => {
                debug_assert_eq!(c.len(), d as usize);
                c.iter()
                    .enumerate()
                    .map(|(i, &v)| ((v as i64 + LANE_BIAS as i64) as u64) << (16 * i))
                    .sum()
            }
            (Base::Heisenberg, GroupElement::Heisenberg([x, y, z])) => Self::heis_pack(*x, *y, *z),
            (Base::Cyclic { .. }, GroupElement::Cyclic(k)) => *k,
            _ => panic!("element {g} does not match packed base {self:?}"),
        }
    }

    pub fn decode(&self, k: u64) -> GroupElement {
        match *self {
            Base::Lattice { d } => {
                GroupElement::Lattice((0..d).map(|i| Self::lane(k, i)).collect())
            }
            Base::Heisenberg => {
                let (x, y, z) = Self::heis_parts(k);
                GroupElement::Heisenberg([x, y, z])
            }
            Base::Cyclic { .. } => GroupElement::Cyclic(k),
        }
    }

    /// Packing for `spec` if every element reachable with coordinates bounded
    /// by `bound` (in norm-proxy units of a single coordinate) fits.
    pub fn for_spec(spec: &GroupSpec, bound: u64, in_word: bool) -> Option<Base> {
        match spec {
            GroupSpec::Lattice { d } => {
                let max_d = if in_word { 3 } else { 4 };
                (*d <= max_d && bound < LANE_BIAS - 1).then_some(Base::Lattice { d: *d as u8 })
            }
            GroupSpec::Heisenberg3 => (bound < LANE_BIAS - 1
                && bound.saturating_mul(bound).saturating_add(bound) < HEIS_Z_BIAS)
                .then_some(Base::Heisenberg),
            GroupSpec::Cyclic { m } => (*m < (1 << 62)).then_some(Base::Cyclic { m: *m }),
            GroupSpec::FreeProduct { .. } => None,
        }
    }
}

/// Top-level packed base group.
#[derive(Clone, Copy, Debug)]
pub struct BaseOps(pub Base);

impl KeyOps for BaseOps {
    type Key = u64;

    fn identity(&self) -> u64 {
        self.0.identity()
    }
    #[inline]
    fn mul(&self, a: &u64, b: &u64) -> u64 {
        self.0.mul(*a, *b)
    }
    fn inverse(&self, a: &u64) -> u64 {
        self.0.inverse(*a)
    }
    fn encode(&self, g: &GroupElement) -> u64 {
        self.0.encode(g)
    }
    fn decode(&self, k: &u64) -> GroupElement {
        self.0.decode(*k)
    }
}

pub type WordKey = SmallVec<[u64; 6]>;

const FACTOR_BIT: u64 = 1 << 63;

/// Free product of two packed bases; one `u64` per letter with the factor
/// index in the top bit.
#[derive(Clone, Copy, Debug)]
pub struct WordOps {
    pub factors: [Base; 2],
}

impl WordOps {
    #[inline]
    fn split(l: u64) -> (usize, u64) {
        ((l >> 63) as usize, l & !FACTOR_BIT)
    }

    #[inline]
    fn join(f: usize, v: u64) -> u64 {
        ((f as u64) << 63) | v
    }
}

impl KeyOps for WordOps {
    type Key = WordKey;

    fn identity(&self) -> WordKey {
        SmallVec::new()
    }

    fn mul(&self, a: &WordKey, b: &WordKey) -> WordKey {
        let mut out: WordKey = SmallVec::with_capacity(a.len() + b.len());
        out.extend_from_slice(a);
        let mut rest: &[u64] = b;
        while let (Some(&last), Some(&first)) = (out.last(), rest.first()) {
            let (fl, vl) = Self::split(last);
            let (ff, vf) = Self::split(first);
            if fl != ff {
                break;
            }
            let base = &self.factors[fl];
            let merged = base.mul(vl, vf);
            rest = &rest[1..];
            if merged == base.identity() {
                out.pop();
            } else {
                *out.last_mut().expect("non-empty") = Self::join(fl, merged);
                break;
            }
        }
        out.extend_from_slice(rest);
        out
    }

    fn inverse(&self, a: &WordKey) -> WordKey {
        a.iter()
            .rev()
            .map(|&l| {
                let (f, v) = Self::split(l);
                Self::join(f, self.factors[f].inverse(v))
            })
            .collect()
    }

    fn encode(&self, g: &GroupElement) -> WordKey {
        g.letters()
            .iter()
            .map(|l| {
                Self::join(
                    l.factor as usize,
                    self.factors[l.factor as usize].encode(&l.elem),
                )
            })
            .collect()
    }

    fn decode(&self, k: &WordKey) -> GroupElement {
        GroupElement::Word(
            k.iter()
                .map(|&l| {
                    let (f, v) = Self::split(l);
                    Letter {
                        factor: f as u8,
                        elem: self.factors[f].decode(v),
                    }
                })
                .collect(),
        )
    }
}

/// Unpacked fallback for groups without a packed layout.
#[derive(Clone, Debug)]
pub struct GenericOps {
    pub spec: GroupSpec,
}

impl KeyOps for GenericOps {
    type Key = GroupElement;

    fn identity(&self) -> GroupElement {
        self.spec.identity()
    }
    fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        self.spec.mul(a, b)
    }
    fn inverse(&self, a: &GroupElement) -> GroupElement {
        self.spec.inverse(a)
    }
    fn encode(&self, g: &GroupElement) -> GroupElement {
        g.clone()
    }
    fn decode(&self, k: &GroupElement) -> GroupElement {
        k.clone()
    }
}

/// Packed layout chosen for a spec and a coordinate bound.
pub enum Layout {
    Base(BaseOps),
    Word(WordOps),
    Generic(GenericOps),
}

impl Layout {
    pub fn choose(spec: &GroupSpec, bound: u64) -> Layout {
        match spec {
            GroupSpec::FreeProduct { left, right } => {
                match (
                    Base::for_spec(left, bound, true),
                    Base::for_spec(right, bound, true),
                ) {
                    (Some(a), Some(b)) => Layout::Word(WordOps { factors: [a, b] }),
                    _ => Layout::Generic(GenericOps { spec: spec.clone() }),
                }
            }
            _ => match Base::for_spec(spec, bound, false) {
                Some(b) => Layout::Base(BaseOps(b)),
                None => Layout::Generic(GenericOps { spec: spec.clone() }),
            },
        }
    }
}

/// Largest single-coordinate displacement of an element (used for the
/// packing range guard).
pub fn coordinate_extent(g: &GroupElement) -> u64 {
    match g {
        GroupElement::Lattice(c) => c.iter().map(|v| v.unsigned_abs() as u64).max().unwrap_or(0),
        GroupElement::Heisenberg([x, y, z]) => x
            .unsigned_abs()
            .max(y.unsigned_abs())
            .max(ceil_sqrt(z.unsigned_abs())),
        GroupElement::Cyclic(_) => 0,
        GroupElement::Word(w) => w
            .iter()
            .map(|l| coordinate_extent(&l.elem))
            .max()
            .unwrap_or(0),
    }
}

fn ceil_sqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r < v {
        r += 1;
    }
    r
}

/// Scatter convolution `a * b` with shards over `a` merged in shard order.
/// Returns the summed entries (in a deterministic order) before pruning.
pub fn scatter<O: KeyOps>(ops: &O, a: &[(O::Key, f64)], b: &[(O::Key, f64)]) -> Vec<(O::Key, f64)> {
    let shards: Vec<FxHashMap<O::Key, Neumaier>> = a
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut local: FxHashMap<O::Key, Neumaier> = FxHashMap::default();
            for (x, wx) in chunk {
                for (y, wy) in b {
                    local.entry(ops.mul(x, y)).or_default().add(wx * wy);
                }
            }
            local
        })
        .collect();
    let mut merged: FxHashMap<O::Key, Neumaier> = FxHashMap::default();
    let mut order: Vec<O::Key> = Vec::new();
    for shard in shards {
        for (k, acc) in shard {
            let slot = merged.entry(k.clone()).or_insert_with(|| {
                order.push(k);
                Neumaier::default()
            });
            slot.add(acc.value());
        }
    }
    order
        .into_iter()
        .map(|k| {
            let v = merged[&k].value();
            (k, v)
        })
        .collect()
}

/// Automorphism group preserving the step distribution, used to store one
/// value per orbit.
pub trait Symmetry<K>: Sync {
    fn canon(&self, k: &K) -> K;
    fn orbit_size(&self, k: &K) -> f64;
    fn order(&self) -> usize;
}

pub struct Trivial;

impl<K: Clone> Symmetry<K> for Trivial {
    #[inline]
    fn canon(&self, k: &K) -> K {
        k.clone()
    }
    #[inline]
    fn orbit_size(&self, _k: &K) -> f64 {
        1.0
    }
    fn order(&self) -> usize {
        1
    }
}

/// Signed permutations of lattice coordinates.
pub struct Hyperoctahedral {
    pub d: u8,
}

impl Hyperoctahedral {
    #[inline]
    fn abs_sorted(&self, k: u64) -> ([i32; 4], usize) {
        let d = self.d as usize;
        let mut v = [0i32; 4];
        for (i, slot) in v.iter_mut().enumerate().take(d) {
            *slot = Base::lane(k, i as u8).abs();
        }
        // insertion sort on at most four lanes
        for i in 1..d {
            let x = v[i];
            let mut j = i;
            while j > 0 && v[j - 1] > x {
                v[j] = v[j - 1];
                j -= 1;
            }
            v[j] = x;
        }
        (v, d)
    }
}

impl Symmetry<u64> for Hyperoctahedral {
    #[inline]
    fn canon(&self, k: &u64) -> u64 {
        let (v, d) = self.abs_sorted(*k);
        let mut out = 0u64;
        for (i, &x) in v[..d].iter().enumerate() {
            out |= ((x as i64 + LANE_BIAS as i64) as u64) << (16 * i);
        }
        out
    }

    fn orbit_size(&self, k: &u64) -> f64 {
        let (v, d) = self.abs_sorted(*k);
        let v = &v[..d];
        let nonzero = v.iter().filter(|&&x| x != 0).count();
        let mut size = (1u64 << nonzero) as f64 * factorial(self.d as u64);
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j < v.len() && v[j] == v[i] {
                j += 1;
            }
            size /= factorial((j - i) as u64);
            i = j;
        }
        size
    }

    fn order(&self) -> usize {
        (1usize << self.d) * factorial(self.d as u64) as usize
    }
}

fn factorial(n: u64) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// The order-8 automorphism group of the Heisenberg group generated by
/// `(x,y,z) -> (-x,y,-z)`, `(x,y,z) -> (x,-y,-z)` and
/// `(x,y,z) -> (y,x,xy-z)`.
pub struct HeisenbergDihedral;

impl HeisenbergDihedral {
    #[inline]
    pub fn images(k: u64) -> [u64; 8] {
        let (x, y, z) = Base::heis_parts(k);
        let p = Base::heis_pack;
        [
            k,
            p(-x, y, -z),
            p(x, -y, -z),
            p(-x, -y, z),
            p(y, x, x * y - z),
            p(y, -x, z - x * y),
            p(-y, x, z - x * y),
            p(-y, -x, x * y - z),
        ]
    }
}

impl Symmetry<u64> for HeisenbergDihedral {
    #[inline]
    fn canon(&self, k: &u64) -> u64 {
        *Self::images(*k).iter().min().expect("non-empty")
    }

    fn orbit_size(&self, k: &u64) -> f64 {
        let mut im = Self::images(*k);
        im.sort_unstable();
        let mut n = 1;
        for i in 1..8 {
            if im[i] != im[i - 1] {
                n += 1;
            }
        }
        n as f64
    }

    fn order(&self) -> usize {
        8
    }
}

/// Whether every orbit of `sym` is constant on `mu`.
pub fn preserves<K: Clone + Eq + Hash, S: Symmetry<K>>(sym: &S, mu: &[(K, f64)]) -> bool {
    let mut by_orbit: FxHashMap<K, (f64, usize)> = FxHashMap::default();
    for (k, w) in mu {
        let c = sym.canon(k);
        match by_orbit.get_mut(&c) {
            Some((v, n)) => {
                if *v != *w {
                    return false;
                }
                *n += 1;
            }
            None => {
                by_orbit.insert(c, (*w, 1));
            }
        }
    }
    // every orbit must be fully present
    by_orbit
        .iter()
        .all(|(c, (_, n))| (sym.orbit_size(c) - *n as f64).abs() < 0.5)
}

/// One row of a return-probability series. The represented value is
/// `a * exp(scale)` with defect `defect * exp(scale)`; `scale` is zero except
/// for series whose values underflow `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub n: usize,
    pub a: f64,
    pub defect: f64,
    pub scale: f64,
}

impl Row {
    pub fn new(n: usize, a: f64, defect: f64) -> Self {
        Row {
            n,
            a,
            defect,
            scale: 0.0,
        }
    }

    /// Natural log of the represented value (`-inf` for zero rows).
    pub fn ln_value(&self) -> f64 {
        self.a.ln() + self.scale
    }

    pub fn value(&self) -> f64 {
        if self.scale == 0.0 {
            self.a
        } else {
            self.a * self.scale.exp()
        }
    }

    pub fn ln_defect(&self) -> f64 {
        self.defect.ln() + self.scale
    }

    /// `a_n r^n`, evaluated in log space when needed.
    pub fn weighted(&self, r: f64) -> f64 {
        if self.a == 0.0 {
            return 0.0;
        }
        if self.scale == 0.0 && self.n < 400 {
            self.a * r.powi(self.n as i32)
        } else {
            (self.ln_value() + self.n as f64 * r.ln()).exp()
        }
    }

    /// `defect_n r^n`.
    pub fn weighted_defect(&self, r: f64) -> f64 {
        if self.defect == 0.0 {
            return 0.0;
        }
        (self.ln_defect() + self.n as f64 * r.ln()).exp()
    }
}

/// Outcome of a power run; `rows` is always the prefix computed so far.
#[derive(Clone, Debug)]
pub struct PowerRun {
    pub rows: Vec<Row>,
    /// Mass of the last stored measure power.
    pub running_mass: f64,
    /// Cumulative pruned mass at the last stored power.
    pub pruned: f64,
    pub steps: usize,
    pub peak_support: usize,
    pub exhausted: bool,
}

/// Options for [`power_rows`].
#[derive(Clone, Copy, Debug)]
pub struct PowerOptions {
    pub n_max: usize,
    pub eps: f64,
    /// Use `mu^(2n)(e) = sum_x mu^(n)(x)^2`, valid for symmetric `mu`.
    pub squaring: bool,
    /// Stop with `exhausted = true` once a stored power has more orbit
    /// representatives than this.
    pub max_support: usize,
}

/// Convolution powers `mu^(n)` by gathering over orbit representatives.
///
/// The value at each new representative is a fixed-order compensated sum
/// over the support of `mu`, so the result does not depend on how rayon
/// schedules the work.
pub fn power_rows<O, S>(ops: &O, sym: &S, mu: &[(O::Key, f64)], opts: PowerOptions) -> PowerRun
where
    O: KeyOps,
    S: Symmetry<O::Key>,
{
    let e = ops.identity();
    let steps_inv: Vec<(O::Key, f64)> = mu.iter().map(|(s, w)| (ops.inverse(s), *w)).collect();
    let mut rows = vec![Row::new(0, 1.0, 0.0)];
    let mut prev_keys: Vec<O::Key> = vec![sym.canon(&e)];
    let mut prev: FxHashMap<O::Key, f64> = FxHashMap::default();
    prev.insert(sym.canon(&e), 1.0);
    let mut pruned = Neumaier::default();
    let mut running_mass = 1.0;
    let mut max_prev = 1.0f64;
    let mut peak = 1usize;
    let mut defect = 0.0f64;
    let steps_needed = if opts.squaring {
        opts.n_max.div_ceil(2)
    } else {
        opts.n_max
    };
    let mut step = 0;
    let mut exhausted = false;

    while step < steps_needed {
        // candidate representatives of the next power
        let shards: Vec<Vec<O::Key>> = prev_keys
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut seen: FxHashSet<O::Key> = FxHashSet::default();
                let mut out = Vec::new();
                for x in chunk {
                    for (s, _) in mu {
                        let y = sym.canon(&ops.mul(x, s));
                        if seen.insert(y.clone()) {
                            out.push(y);
                        }
                    }
                }
                out
            })
            .collect();
        let mut seen: FxHashSet<O::Key> = FxHashSet::default();
        let mut cand: Vec<O::Key> = Vec::new();
        for shard in shards {
            for y in shard {
                if !seen.insert(y.clone()) {
                    continue;
                }
                cand.push(y);
            }
        }
        drop(seen);
        if cand.len() > opts.max_support {
            exhausted = true;
            break;
        }

        let values: Vec<(f64, f64)> = cand
            .par_iter()
            .map(|y| {
                let mut acc = Neumaier::default();
                for (si, w) in &steps_inv {
                    if let Some(v) = prev.get(&sym.canon(&ops.mul(y, si))) {
                        acc.add(v * w);
                    }
                }
                let old = prev.get(y).copied().unwrap_or(0.0);
                (acc.value(), old)
            })
            .collect();

        let mut next: FxHashMap<O::Key, f64> = FxHashMap::default();
        next.reserve(cand.len());
        let mut next_keys = Vec::with_capacity(cand.len());
        let mut mass = Neumaier::default();
        let mut sq = Neumaier::default();
        let mut cross = Neumaier::default();
        let mut max_next = 0.0f64;
        let mut at_e = 0.0;
        let e_canon = sym.canon(&e);
        for (y, (v, old)) in cand.into_iter().zip(values) {
            if v <= 0.0 {
                continue;
            }
            let orbit = sym.orbit_size(&y);
            if v < opts.eps {
                pruned.add(orbit * v);
                continue;
            }
            mass.add(orbit * v);
            if opts.squaring {
                sq.add(orbit * v * v);
                cross.add(orbit * v * old);
            }
            if y == e_canon {
                at_e = v;
            }
            max_next = max_next.max(v);
            next_keys.push(y.clone());
            next.insert(y, v);
        }
        step += 1;
        peak = peak.max(next_keys.len());
        running_mass = mass.value();
        let delta = pruned.value();

        if opts.squaring {
            // rows 2n-1 and 2n from powers n-1 and n
            let m = max_prev.max(max_next) + delta;
            defect = defect.max(delta * (2.0 * m + delta));
            rows.push(Row::new(2 * step - 1, cross.value(), defect));
            rows.push(Row::new(2 * step, sq.value(), defect));
        } else {
            defect = delta;
            rows.push(Row::new(step, at_e, defect));
        }
        prev = next;
        prev_keys = next_keys;
        max_prev = max_next;
    }
    rows.truncate(opts.n_max + 1);
    PowerRun {
        rows,
        running_mass,
        pruned: pruned.value(),
        steps: step,
        peak_support: peak,
        exhausted,
    }
}
