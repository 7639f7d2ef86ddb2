//! Group arithmetic with canonical normal forms.
//!
//! Supported base groups are the integer lattices `Z^d`, the discrete
//! Heisenberg group `H3(Z)` and the finite cyclic groups `Z/m`. A free product
//! `H0 * H1` of two base groups is represented by alternating words.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::GroupError;

/// Lattice coordinates, inline up to dimension 6.
pub type Coords = SmallVec<[i32; 6]>;

/// Which group a measure or element lives on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupSpec {
    Lattice {
        d: usize,
    },
    Heisenberg3,
    Cyclic {
        m: u64,
    },
    FreeProduct {
        left: Box<GroupSpec>,
        right: Box<GroupSpec>,
    },
}

/// One syllable of a free-product word: a non-identity element of factor
/// `factor`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter {
    pub factor: u8,
    pub elem: GroupElement,
}

/// An element in normal form. `Word` letters never hold a `Word`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupElement {
    Lattice(Coords),
    Heisenberg([i64; 3]),
    Cyclic(u64),
    Word(Vec<Letter>),
}

impl GroupSpec {
    pub fn lattice(d: usize) -> Self {
        GroupSpec::Lattice { d }
    }

    pub fn cyclic(m: u64) -> Self {
        GroupSpec::Cyclic { m }
    }

    pub fn free_product(left: GroupSpec, right: GroupSpec) -> Self {
        GroupSpec::FreeProduct {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Checks the structural invariants: `d >= 1`, `m >= 2` and depth-one
    /// free products.
    pub fn validate(&self) -> Result<(), GroupError> {
        match self {
            GroupSpec::Lattice { d } if *d == 0 => Err(GroupError::InvalidSpec(
                "lattice dimension must be >= 1".into(),
            )),
            GroupSpec::Lattice { d } if *d > 6 => Err(GroupError::InvalidSpec(
                "lattice dimension above 6 is not supported".into(),
            )),
            GroupSpec::Cyclic { m } if *m < 2 => {
                Err(GroupError::InvalidSpec("cyclic order must be >= 2".into()))
            }
            GroupSpec::FreeProduct { left, right } => {
                for f in [left, right] {
                    if f.is_free_product() {
                        return Err(GroupError::InvalidSpec(
                            "free product factors must be base groups".into(),
                        ));
                    }
                    f.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_free_product(&self) -> bool {
        matches!(self, GroupSpec::FreeProduct { .. })
    }

    /// Factor `i` of a free product.
    pub fn factor(&self, i: usize) -> Option<&GroupSpec> {
        match self {
            GroupSpec::FreeProduct { left, right } => match i {
                0 => Some(left),
                1 => Some(right),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn identity(&self) -> GroupElement {
        match self {
            GroupSpec::Lattice { d } => GroupElement::Lattice(SmallVec::from_elem(0, *d)),
            GroupSpec::Heisenberg3 => GroupElement::Heisenberg([0; 3]),
            GroupSpec::Cyclic { .. } => GroupElement::Cyclic(0),
            GroupSpec::FreeProduct { .. } => GroupElement::Word(Vec::new()),
        }
    }

    /// Whether `a` is a well-formed element of this group.
    pub fn contains(&self, a: &GroupElement) -> bool {
        match (self, a) {
            (GroupSpec::Lattice { d }, GroupElement::Lattice(c)) => c.len() == *d,
            (GroupSpec::Heisenberg3, GroupElement::Heisenberg(_)) => true,
            (GroupSpec::Cyclic { m }, GroupElement::Cyclic(k)) => k < m,
            (GroupSpec::FreeProduct { left, right }, GroupElement::Word(w)) => {
                let mut prev: Option<u8> = None;
                for l in w {
                    let f = match l.factor {
                        0 => left,
                        1 => right,
                        _ => return false,
                    };
                    if prev == Some(l.factor) || !f.contains(&l.elem) || l.elem.is_identity() {
                        return false;
                    }
                    prev = Some(l.factor);
                }
                true
            }
            _ => false,
        }
    }

    /// Checked group law.
    pub fn multiply(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement, GroupError> {
        if !self.contains(a) {
            return Err(GroupError::SpecMismatch(a.to_string()));
        }
        if !self.contains(b) {
            return Err(GroupError::SpecMismatch(b.to_string()));
        }
        Ok(self.mul(a, b))
    }

    /// Group law without conformity checks; used on hot paths where both
    /// operands are known to belong to `self`.
    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        match (self, a, b) {
            (GroupSpec::Lattice { .. }, GroupElement::Lattice(x), GroupElement::Lattice(y)) => {
                GroupElement::Lattice(x.iter().zip(y.iter()).map(|(p, q)| p + q).collect())
            }
            (GroupSpec::Heisenberg3, GroupElement::Heisenberg(x), GroupElement::Heisenberg(y)) => {
                GroupElement::Heisenberg([x[0] + y[0], x[1] + y[1], x[2] + y[2] + x[0] * y[1]])
            }
            (GroupSpec::Cyclic { m }, GroupElement::Cyclic(x), GroupElement::Cyclic(y)) => {
                GroupElement::Cyclic((x + y) % m)
            }
            (
                GroupSpec::FreeProduct { left, right },
                GroupElement::Word(x),
                GroupElement::Word(y),
            ) => GroupElement::Word(word_product(left, right, x, y)),
            _ => panic!("group element does not match spec {self:?}"),
        }
    }

    pub fn inverse(&self, a: &GroupElement) -> GroupElement {
        match (self, a) {
            (GroupSpec::Lattice { .. }, GroupElement::Lattice(x)) => {
                GroupElement::Lattice(x.iter().map(|p| -p).collect())
            }
            (GroupSpec::Heisenberg3, GroupElement::Heisenberg([x, y, z])) => {
                GroupElement::Heisenberg([-x, -y, -z + x * y])
            }
            (GroupSpec::Cyclic { m }, GroupElement::Cyclic(k)) => GroupElement::Cyclic((m - k) % m),
            (GroupSpec::FreeProduct { left, right }, GroupElement::Word(w)) => GroupElement::Word(
                w.iter()
                    .rev()
                    .map(|l| {
                        let f = if l.factor == 0 { left } else { right };
                        Letter {
                            factor: l.factor,
                            elem: f.inverse(&l.elem),
                        }
                    })
                    .collect(),
            ),
            _ => panic!("group element does not match spec {self:?}"),
        }
    }

    /// Homogeneous dimension `d = sum_j j * rank(C_j / C_{j+1})` of a base
    /// group: the polynomial growth degree.
    pub fn homogeneous_dimension(&self) -> Result<u32, GroupError> {
        match self {
            GroupSpec::Lattice { d } => Ok(*d as u32),
            // abelianization rank 2 in degree one, centre rank 1 in degree two
            GroupSpec::Heisenberg3 => Ok(2 + 2),
            GroupSpec::Cyclic { .. } => Ok(0),
            GroupSpec::FreeProduct { .. } => Err(GroupError::UndefinedDimension),
        }
    }

    /// Embeds a factor element as a one-letter word (identity maps to the
    /// empty word).
    pub fn letter(&self, factor: u8, elem: GroupElement) -> GroupElement {
        debug_assert!(self.is_free_product());
        if elem.is_identity() {
            GroupElement::Word(Vec::new())
        } else {
            GroupElement::Word(vec![Letter { factor, elem }])
        }
    }
}

fn word_product(left: &GroupSpec, right: &GroupSpec, x: &[Letter], y: &[Letter]) -> Vec<Letter> {
    let mut out: Vec<Letter> = Vec::with_capacity(x.len() + y.len());
    out.extend_from_slice(x);
    let mut rest = y;
    while let (Some(last), Some(first)) = (out.last(), rest.first()) {
        if last.factor != first.factor {
            break;
        }
        let f = if first.factor == 0 { left } else { right };
        let merged = f.mul(&last.elem, &first.elem);
        rest = &rest[1..];
        if merged.is_identity() {
            out.pop();
        } else {
            out.last_mut().expect("non-empty").elem = merged;
            break;
        }
    }
    out.extend_from_slice(rest);
    out
}

impl GroupElement {
    pub fn lattice(coords: &[i32]) -> Self {
        GroupElement::Lattice(SmallVec::from_slice(coords))
    }

    pub fn is_identity(&self) -> bool {
        match self {
            GroupElement::Lattice(c) => c.iter().all(|&v| v == 0),
            GroupElement::Heisenberg(h) => *h == [0, 0, 0],
            GroupElement::Cyclic(k) => *k == 0,
            GroupElement::Word(w) => w.is_empty(),
        }
    }

    /// Word letters, empty for base elements.
    pub fn letters(&self) -> &[Letter] {
        match self {
            GroupElement::Word(w) => w,
            _ => &[],
        }
    }

    /// Quasi-norm comparable to word length, used as a pruning and ball
    /// radius. Cyclic elements use the distance to 0 around the cycle, which
    /// needs the order `m`; see [`norm_proxy`].
    pub fn norm_proxy_with(&self, modulus: Option<u64>) -> f64 {
        match self {
            GroupElement::Lattice(c) => c.iter().map(|v| v.unsigned_abs() as f64).sum(),
            GroupElement::Heisenberg([x, y, z]) => {
                (x.unsigned_abs() + y.unsigned_abs()) as f64 + ceil_sqrt(z.unsigned_abs()) as f64
            }
            GroupElement::Cyclic(k) => match modulus {
                Some(m) => (*k).min(m - k) as f64,
                None => *k as f64,
            },
            GroupElement::Word(w) => w
                .iter()
                .map(|l| l.elem.norm_proxy_with(modulus) + 1.0)
                .sum(),
        }
    }
}

/// `norm_proxy` with the spec supplying the cyclic modulus (per factor for
/// free products).
pub fn norm_proxy(a: &GroupElement, spec: &GroupSpec) -> f64 {
    match (spec, a) {
        (GroupSpec::Cyclic { m }, _) => a.norm_proxy_with(Some(*m)),
        (GroupSpec::FreeProduct { left, right }, GroupElement::Word(w)) => w
            .iter()
            .map(|l| {
                let f = if l.factor == 0 { left } else { right };
                norm_proxy(&l.elem, f) + 1.0
            })
            .sum(),
        _ => a.norm_proxy_with(None),
    }
}

/// Word-metric proxy of a free-product word: the sum of letter proxies,
/// without the per-letter increment. For `Z * Z` with the standard generators
/// this is the exact word length, and it is the distance of a word without a
/// leading `H`-letter to the factor `H`.
pub fn word_metric(a: &GroupElement, spec: &GroupSpec) -> f64 {
    match (spec, a) {
        (GroupSpec::FreeProduct { left, right }, GroupElement::Word(w)) => w
            .iter()
            .map(|l| {
                let f = if l.factor == 0 { left } else { right };
                norm_proxy(&l.elem, f)
            })
            .sum(),
        _ => norm_proxy(a, spec),
    }
}

fn ceil_sqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r < v {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= v {
        r -= 1;
    }
    r
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupElement::Lattice(c) => {
                write!(f, "z:")?;
                for (i, v) in c.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
            GroupElement::Heisenberg([x, y, z]) => write!(f, "h:{x},{y},{z}"),
            GroupElement::Cyclic(k) => write!(f, "c:{k}"),
            GroupElement::Word(w) => {
                write!(f, "w:")?;
                for (i, l) in w.iter().enumerate() {
                    if i > 0 {
                        write!(f, "|")?;
                    }
                    write!(f, "{}({})", l.factor, l.elem)?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for GroupElement {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GroupError::Parse(s.to_string());
        let (tag, body) = s.split_once(':').ok_or_else(bad)?;
        match tag {
            "z" => {
                let coords = body
                    .split(',')
                    .map(|p| p.trim().parse::<i32>())
                    .collect::<Result<Coords, _>>()
                    .map_err(|_| bad())?;
                Ok(GroupElement::Lattice(coords))
            }
            "h" => {
                let v = body
                    .split(',')
                    .map(|p| p.trim().parse::<i64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                match v.as_slice() {
                    [x, y, z] => Ok(GroupElement::Heisenberg([*x, *y, *z])),
                    _ => Err(bad()),
                }
            }
            "c" => body
                .trim()
                .parse()
                .map(GroupElement::Cyclic)
                .map_err(|_| bad()),
            "w" => {
                if body.is_empty() {
                    return Ok(GroupElement::Word(Vec::new()));
                }
                body.split('|')
                    .map(|part| {
                        let open = part.find('(').ok_or_else(bad)?;
                        if !part.ends_with(')') {
                            return Err(bad());
                        }
                        let factor: u8 = part[..open].parse().map_err(|_| bad())?;
                        let elem: GroupElement = part[open + 1..part.len() - 1].parse()?;
                        if matches!(elem, GroupElement::Word(_)) || factor > 1 {
                            return Err(bad());
                        }
                        Ok(Letter { factor, elem })
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(GroupElement::Word)
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for GroupElement {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSpec::Lattice { d } => write!(f, "Z^{d}"),
            GroupSpec::Heisenberg3 => write!(f, "H3"),
            GroupSpec::Cyclic { m } => write!(f, "Z/{m}"),
            GroupSpec::FreeProduct { left, right } => write!(f, "{left} * {right}"),
        }
    }
}

/// Standard symmetric generating set of a base group (`±e_i`, Heisenberg
/// `x^±1, y^±1`, cyclic `±1`).
pub fn standard_generators(spec: &GroupSpec) -> Vec<GroupElement> {
    match spec {
        GroupSpec::Lattice { d } => {
            let mut out = Vec::with_capacity(2 * d);
            for i in 0..*d {
                for s in [1, -1] {
                    let mut c: Coords = SmallVec::from_elem(0, *d);
                    c[i] = s;
                    out.push(GroupElement::Lattice(c));
                }
            }
            out
        }
        GroupSpec::Heisenberg3 => vec![
            GroupElement::Heisenberg([1, 0, 0]),
            GroupElement::Heisenberg([-1, 0, 0]),
            GroupElement::Heisenberg([0, 1, 0]),
            GroupElement::Heisenberg([0, -1, 0]),
        ],
        GroupSpec::Cyclic { m } => {
            if *m == 2 {
                vec![GroupElement::Cyclic(1)]
            } else {
                vec![GroupElement::Cyclic(1), GroupElement::Cyclic(m - 1)]
            }
        }
        GroupSpec::FreeProduct { left, right } => {
            let mut out = Vec::new();
            for (i, f) in [left, right].into_iter().enumerate() {
                for g in standard_generators(f) {
                    out.push(spec.letter(i as u8, g));
                }
            }
            out
        }
    }
}

/// All elements with `norm_proxy <= radius`, in canonical order.
pub fn ball(spec: &GroupSpec, radius: f64) -> Vec<GroupElement> {
    let mut out = match spec {
        GroupSpec::Lattice { d } => {
            let mut acc = Vec::new();
            let mut cur: Coords = SmallVec::from_elem(0, *d);
            lattice_ball(&mut cur, 0, radius.floor() as i64, &mut acc);
            acc
        }
        GroupSpec::Heisenberg3 => {
            let l = radius.floor() as i64;
            let mut acc = Vec::new();
            for x in -l..=l {
                for y in -(l - x.abs())..=(l - x.abs()) {
                    let rem = l - x.abs() - y.abs();
                    for z in -(rem * rem)..=(rem * rem) {
                        acc.push(GroupElement::Heisenberg([x, y, z]));
                    }
                }
            }
            acc
        }
        GroupSpec::Cyclic { m } => (0..*m)
            .map(GroupElement::Cyclic)
            .filter(|g| norm_proxy(g, spec) <= radius)
            .collect(),
        GroupSpec::FreeProduct { left, right } => {
            let letters: [Vec<(GroupElement, f64)>; 2] = [left, right].map(|f| {
                ball(f, radius - 1.0)
                    .into_iter()
                    .filter(|g| !g.is_identity())
                    .map(|g| {
                        let cost = norm_proxy(&g, f) + 1.0;
                        (g, cost)
                    })
                    .collect()
            });
            let mut acc = Vec::new();
            let mut word = Vec::new();
            word_ball(&letters, None, radius, &mut word, &mut acc);
            acc
        }
    };
    out.sort();
    out
}

fn lattice_ball(cur: &mut Coords, i: usize, budget: i64, acc: &mut Vec<GroupElement>) {
    if i == cur.len() {
        acc.push(GroupElement::Lattice(cur.clone()));
        return;
    }
    for v in -budget..=budget {
        cur[i] = v as i32;
        lattice_ball(cur, i + 1, budget - v.abs(), acc);
    }
    cur[i] = 0;
}

fn word_ball(
    letters: &[Vec<(GroupElement, f64)>; 2],
    last: Option<u8>,
    budget: f64,
    word: &mut Vec<Letter>,
    acc: &mut Vec<GroupElement>,
) {
    acc.push(GroupElement::Word(word.clone()));
    for factor in 0..2u8 {
        if last == Some(factor) {
            continue;
        }
        for (g, cost) in &letters[factor as usize] {
            if *cost <= budget {
                word.push(Letter {
                    factor,
                    elem: g.clone(),
                });
                word_ball(letters, Some(factor), budget - cost, word, acc);
                word.pop();
            }
        }
    }
}
