//! Finitely supported measures, pruned convolution and convolution powers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use rustc_hash::FxHasher;
use serde::{Deserialize, Serialize};

use crate::engine::{
    self, coordinate_extent, Base, BaseOps, HeisenbergDihedral, Hyperoctahedral, KeyOps, Layout,
    Neumaier, PowerOptions, PowerRun, Symmetry, Trivial,
};
use crate::error::MeasureError;
use crate::groups::{ball, norm_proxy, GroupElement, GroupSpec};

pub use crate::engine::Row as SeriesRow;

/// Default pruning threshold for convolution powers.
pub const DEFAULT_EPS: f64 = 1e-14;
/// Default norm-proxy radius for [`check_admissible`].
pub const DEFAULT_ADMISSIBLE_RADIUS: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMeasure {
    spec: GroupSpec,
    entries: BTreeMap<GroupElement, f64>,
    total_mass: f64,
}

impl SparseMeasure {
    /// Builds a measure, merging repeated elements. Weights must be finite
    /// and positive.
    pub fn new<I>(spec: GroupSpec, entries: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (GroupElement, f64)>,
    {
        spec.validate()?;
        let mut map: BTreeMap<GroupElement, f64> = BTreeMap::new();
        for (g, w) in entries {
            if !w.is_finite() || w <= 0.0 {
                return Err(MeasureError::BadWeight(w));
            }
            if !spec.contains(&g) {
                return Err(crate::error::GroupError::SpecMismatch(g.to_string()).into());
            }
            *map.entry(g).or_insert(0.0) += w;
        }
        let total_mass = map.values().copied().collect::<Neumaier>().value();
        Ok(SparseMeasure {
            spec,
            entries: map,
            total_mass,
        })
    }

    pub fn dirac(spec: GroupSpec) -> Self {
        let e = spec.identity();
        SparseMeasure::new(spec, [(e, 1.0)]).expect("identity is valid")
    }

    /// Uniform measure on a symmetric generating set.
    pub fn uniform(spec: GroupSpec, support: &[GroupElement]) -> Result<Self, MeasureError> {
        let w = 1.0 / support.len() as f64;
        SparseMeasure::new(spec, support.iter().map(|g| (g.clone(), w)))
    }

    /// Simple random walk on the standard generators.
    pub fn simple_random_walk(spec: GroupSpec) -> Self {
        let gens = crate::groups::standard_generators(&spec);
        SparseMeasure::uniform(spec, &gens).expect("standard generators are valid")
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, g: &GroupElement) -> f64 {
        self.entries.get(g).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupElement, f64)> {
        self.entries.iter().map(|(g, w)| (g, *w))
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass - 1.0).abs() <= 1e-12
    }

    /// Largest norm proxy over the support.
    pub fn radius(&self) -> f64 {
        self.entries
            .keys()
            .map(|g| norm_proxy(g, &self.spec))
            .fold(0.0, f64::max)
    }

    /// Stable 64-bit fingerprint of spec and entries (bit patterns of the
    /// weights included).
    pub fn fingerprint(&self) -> u64 {
        let mut h = FxHasher::default();
        self.spec.to_string().hash(&mut h);
        for (g, w) in &self.entries {
            g.to_string().hash(&mut h);
            w.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Canonical text form: one `element weight` pair per line.
    pub fn canonical_text(&self) -> String {
        let mut s = format!("{}\n", self.spec);
        for (g, w) in &self.entries {
            s.push_str(&format!("{g} {w:e}\n"));
        }
        s
    }

    fn max_extent(&self) -> u64 {
        self.entries
            .keys()
            .map(coordinate_extent)
            .max()
            .unwrap_or(0)
    }

    fn check_same_spec(&self, other: &SparseMeasure) -> Result<(), MeasureError> {
        if self.spec != other.spec {
            return Err(MeasureError::SpecMismatch(
                self.spec.to_string(),
                other.spec.to_string(),
            ));
        }
        Ok(())
    }

    /// Image under inversion.
    pub fn reflected(&self) -> SparseMeasure {
        let entries: BTreeMap<_, _> = self
            .entries
            .iter()
            .map(|(g, w)| (self.spec.inverse(g), *w))
            .collect();
        SparseMeasure {
            spec: self.spec.clone(),
            total_mass: self.total_mass,
            entries,
        }
    }
}

/// `a * b` with entries below `eps` dropped; returns the dropped mass.
pub fn convolve(
    a: &SparseMeasure,
    b: &SparseMeasure,
    eps: f64,
) -> Result<(SparseMeasure, f64), MeasureError> {
    a.check_same_spec(b)?;
    if eps.is_nan() || eps < 0.0 {
        return Err(MeasureError::Invalid(format!(
            "prune threshold must be >= 0, got {eps}"
        )));
    }
    let bound = a.max_extent() + b.max_extent();
    let summed = match Layout::choose(&a.spec, bound) {
        Layout::Base(ops) => scatter_decoded(&ops, a, b),
        Layout::Word(ops) => scatter_decoded(&ops, a, b),
        Layout::Generic(ops) => scatter_decoded(&ops, a, b),
    };
    let mut kept = BTreeMap::new();
    let mut pruned = Neumaier::default();
    for (g, w) in summed {
        if w <= 0.0 {
            continue;
        }
        if w < eps {
            pruned.add(w);
        } else {
            kept.insert(g, w);
        }
    }
    let total_mass = kept.values().copied().collect::<Neumaier>().value();
    Ok((
        SparseMeasure {
            spec: a.spec.clone(),
            entries: kept,
            total_mass,
        },
        pruned.value(),
    ))
}

fn scatter_decoded<O: KeyOps>(
    ops: &O,
    a: &SparseMeasure,
    b: &SparseMeasure,
) -> Vec<(GroupElement, f64)> {
    let ka: Vec<_> = a.entries.iter().map(|(g, w)| (ops.encode(g), *w)).collect();
    let kb: Vec<_> = b.entries.iter().map(|(g, w)| (ops.encode(g), *w)).collect();
    engine::scatter(ops, &ka, &kb)
        .into_iter()
        .map(|(k, w)| (ops.decode(&k), w))
        .collect()
}

/// Where the rows of a series came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesSource {
    Engine,
    Transfer,
    BinomialZ,
    DenseConvolution,
    RadialChain,
    Synthetic,
    Cache,
}

/// Return probabilities `a_n` (lower bounds) with defect `defect_n` such that
/// `mu^(n)(e)` lies in `[a_n, a_n + defect_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolutionSeries {
    pub spec: Option<GroupSpec>,
    pub measure_id: String,
    pub eps: f64,
    pub source: SeriesSource,
    pub rows: Vec<SeriesRow>,
    /// Spectral radius when it is known exactly (symmetric walks on amenable
    /// groups have `rho = 1`).
    pub exact_rho: Option<f64>,
}

impl ConvolutionSeries {
    pub fn from_values(source: SeriesSource, values: &[f64]) -> Self {
        ConvolutionSeries {
            spec: None,
            measure_id: format!("{source:?}").to_lowercase(),
            eps: 0.0,
            source,
            rows: values
                .iter()
                .enumerate()
                .map(|(n, &a)| SeriesRow::new(n, a, 0.0))
                .collect(),
            exact_rho: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest index `N` present.
    pub fn max_n(&self) -> usize {
        self.rows.last().map(|r| r.n).unwrap_or(0)
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.a).collect()
    }

    /// Even rows as `(n, a_n, defect_n)`.
    pub fn even(&self) -> impl Iterator<Item = &SeriesRow> {
        self.rows.iter().filter(|r| r.n % 2 == 0)
    }

    /// Keeps rows `n <= n_max`.
    pub fn truncated(&self, n_max: usize) -> ConvolutionSeries {
        let mut s = self.clone();
        s.rows.retain(|r| r.n <= n_max);
        s
    }
}

/// Whether symmetric walks on `spec` have spectral radius one.
pub fn is_amenable(spec: &GroupSpec) -> bool {
    match spec {
        GroupSpec::FreeProduct { left, right } => {
            matches!(**left, GroupSpec::Cyclic { m: 2 })
                && matches!(**right, GroupSpec::Cyclic { m: 2 })
        }
        _ => true,
    }
}

/// Knobs for [`power_sequence_with`].
#[derive(Clone, Copy, Debug)]
pub struct PowerConfig {
    pub n_max: usize,
    pub eps: f64,
    /// Maximum number of stored orbit representatives.
    pub max_support: usize,
    /// Store one value per orbit of a detected automorphism group.
    pub use_symmetry: bool,
    /// Return the rows computed so far instead of an error when the support
    /// budget is exceeded.
    pub allow_partial: bool,
}

impl PowerConfig {
    pub fn new(n_max: usize, eps: f64) -> Self {
        PowerConfig {
            n_max,
            eps,
            max_support: 40_000_000,
            use_symmetry: true,
            allow_partial: false,
        }
    }
}

/// Diagnostics of a power run.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerStats {
    pub running_mass: f64,
    pub pruned_mass: f64,
    pub peak_support: usize,
    pub symmetry_order: usize,
    pub squaring: bool,
}

/// `a_n = mu^(n)(e)` for `n = 0..=n_max` with default engine settings.
pub fn power_sequence(
    mu: &SparseMeasure,
    n_max: usize,
    eps: f64,
) -> Result<ConvolutionSeries, MeasureError> {
    power_sequence_with(mu, &PowerConfig::new(n_max, eps)).map(|(s, _)| s)
}

/// Convolution powers with explicit settings.
///
/// For symmetric `mu` only `mu^(ceil(N/2))` is formed:
/// `mu^(2n)(e) = sum_x mu^(n)(x)^2` and
/// `mu^(2n+1)(e) = sum_x mu^(n)(x) mu^(n+1)(x)`. The defect column then
/// bounds the effect of the pruned mass `D` on these sums by `D (2M + D)`,
/// with `M` the largest retained point mass.
pub fn power_sequence_with(
    mu: &SparseMeasure,
    cfg: &PowerConfig,
) -> Result<(ConvolutionSeries, PowerStats), MeasureError> {
    if !mu.is_probability() {
        return Err(MeasureError::NotProbability(mu.total_mass));
    }
    if cfg.eps.is_nan() || cfg.eps < 0.0 {
        return Err(MeasureError::Invalid(format!(
            "prune threshold must be >= 0, got {}",
            cfg.eps
        )));
    }
    let squaring = check_symmetric(mu);
    let steps = if squaring {
        cfg.n_max.div_ceil(2)
    } else {
        cfg.n_max
    };
    let bound = (steps as u64 + 1).saturating_mul(mu.max_extent().max(1));
    let mut opts = PowerOptions {
        n_max: cfg.n_max,
        eps: cfg.eps,
        squaring,
        max_support: cfg.max_support,
    };
    if cfg.n_max == 0 {
        opts.n_max = 0;
    }
    let (run, order) = match Layout::choose(&mu.spec, heis_bound(&mu.spec, bound)) {
        Layout::Base(ops) => {
            let keys: Vec<(u64, f64)> = mu
                .entries
                .iter()
                .map(|(g, w)| (ops.encode(g), *w))
                .collect();
            run_base(&ops, &keys, opts, cfg.use_symmetry)
        }
        Layout::Word(ops) => {
            let keys: Vec<_> = mu
                .entries
                .iter()
                .map(|(g, w)| (ops.encode(g), *w))
                .collect();
            (engine::power_rows(&ops, &Trivial, &keys, opts), 1)
        }
        Layout::Generic(ops) => {
            let keys: Vec<_> = mu.entries.iter().map(|(g, w)| (g.clone(), *w)).collect();
            (engine::power_rows(&ops, &Trivial, &keys, opts), 1)
        }
    };
    if run.exhausted && !cfg.allow_partial {
        return Err(MeasureError::Resource {
            budget: cfg.max_support,
            rows: run.rows.len(),
        });
    }
    let stats = PowerStats {
        running_mass: run.running_mass,
        pruned_mass: run.pruned,
        peak_support: run.peak_support,
        symmetry_order: order,
        squaring,
    };
    let series = ConvolutionSeries {
        spec: Some(mu.spec.clone()),
        measure_id: format!("{:016x}", mu.fingerprint()),
        eps: cfg.eps,
        source: SeriesSource::Engine,
        rows: run.rows,
        exact_rho: (squaring && is_amenable(&mu.spec)).then_some(1.0),
    };
    Ok((series, stats))
}

// the Heisenberg packing needs |z| below 2^30, i.e. roughly bound^2 * 2
fn heis_bound(spec: &GroupSpec, bound: u64) -> u64 {
    match spec {
        GroupSpec::Heisenberg3 => {
            let sq = bound.saturating_mul(bound).saturating_mul(2);
            if sq >= 1 << 30 {
                u64::MAX
            } else {
                bound
            }
        }
        _ => bound,
    }
}

fn run_base(
    ops: &BaseOps,
    keys: &[(u64, f64)],
    opts: PowerOptions,
    use_symmetry: bool,
) -> (PowerRun, usize) {
    if use_symmetry {
        match ops.0 {
            Base::Lattice { d } => {
                let sym = Hyperoctahedral { d };
                if engine::preserves(&sym, keys) {
                    return (
                        engine::power_rows(ops, &sym, keys, opts),
                        Symmetry::<u64>::order(&sym),
                    );
                }
            }
            Base::Heisenberg => {
                let sym = HeisenbergDihedral;
                if engine::preserves(&sym, keys) {
                    return (engine::power_rows(ops, &sym, keys, opts), 8);
                }
            }
            Base::Cyclic { .. } => {}
        }
    }
    (engine::power_rows(ops, &Trivial, keys, opts), 1)
}

/// Factor measures and mixing weight of an adapted measure
/// `alpha mu0 + (1 - alpha) mu1` on a free product.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedSpec {
    pub alpha: f64,
    pub mu0: SparseMeasure,
    pub mu1: SparseMeasure,
}

impl AdaptedSpec {
    pub fn new(alpha: f64, mu0: SparseMeasure, mu1: SparseMeasure) -> Result<Self, MeasureError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(MeasureError::BadAlpha(alpha));
        }
        for m in [&mu0, &mu1] {
            if m.spec.is_free_product() {
                return Err(MeasureError::Invalid(
                    "factor measures must live on base groups".into(),
                ));
            }
            if !m.is_probability() {
                return Err(MeasureError::NotProbability(m.total_mass));
            }
            if !check_symmetric(m) {
                return Err(MeasureError::NotSymmetric);
            }
        }
        Ok(AdaptedSpec { alpha, mu0, mu1 })
    }

    pub fn spec(&self) -> GroupSpec {
        GroupSpec::free_product(self.mu0.spec.clone(), self.mu1.spec.clone())
    }

    pub fn factor(&self, i: usize) -> &SparseMeasure {
        if i == 0 {
            &self.mu0
        } else {
            &self.mu1
        }
    }

    /// Weight of factor `i` in the mixture.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }

    /// The same walk with both factor measures lazified; the result is
    /// again adapted and equals `lazify` of the adapted measure.
    pub fn lazified(&self) -> AdaptedSpec {
        AdaptedSpec {
            alpha: self.alpha,
            mu0: lazify(&self.mu0),
            mu1: lazify(&self.mu1),
        }
    }

    pub fn is_lazy(&self) -> bool {
        let e0 = self.mu0.spec.identity();
        let e1 = self.mu1.spec.identity();
        self.mu0.get(&e0) > 0.0 || self.mu1.get(&e1) > 0.0
    }
}

/// The adapted measure on `spec = H0 * H1`.
pub fn adapted_measure(
    spec: &GroupSpec,
    adapted: &AdaptedSpec,
) -> Result<SparseMeasure, MeasureError> {
    let expected = adapted.spec();
    if *spec != expected {
        return Err(MeasureError::SpecMismatch(
            spec.to_string(),
            expected.to_string(),
        ));
    }
    let mut entries = Vec::new();
    for i in 0..2 {
        let w = adapted.weight(i);
        for (g, m) in adapted.factor(i).iter() {
            entries.push((spec.letter(i as u8, g.clone()), w * m));
        }
    }
    SparseMeasure::new(spec.clone(), entries)
}

/// `(mu + delta_e) / 2`.
pub fn lazify(mu: &SparseMeasure) -> SparseMeasure {
    let e = mu.spec.identity();
    let entries = mu
        .iter()
        .map(|(g, w)| (g.clone(), 0.5 * w))
        .chain(std::iter::once((e, 0.5 * mu.total_mass)));
    SparseMeasure::new(mu.spec.clone(), entries).expect("lazification keeps weights positive")
}

/// Exact symmetry `mu(g) = mu(g^-1)` of the entry map.
pub fn check_symmetric(mu: &SparseMeasure) -> bool {
    mu.iter().all(|(g, w)| mu.get(&mu.spec.inverse(g)) == w)
}

/// Heuristic admissibility test: the semigroup generated by the support,
/// explored by breadth-first search inside a larger ball (radius `2L`, or
/// `3L` when a Heisenberg factor is present, since `(0,0,L^2)` is the
/// commutator of `x^L` and `y^L`), must reach every element of the ball of
/// radius `L`.
///
/// A `true` answer is sound; `false` may be a false negative when the
/// exploration ball is too small.
pub fn check_admissible(mu: &SparseMeasure, radius: f64) -> bool {
    let spec = &mu.spec;
    let target: BTreeSet<GroupElement> = ball(spec, radius).into_iter().collect();
    let slack = if has_heisenberg(spec) { 3.0 } else { 2.0 };
    let arena: BTreeSet<GroupElement> = ball(spec, slack * radius).into_iter().collect();
    let support: Vec<&GroupElement> = mu.entries.keys().collect();
    let mut reached: BTreeSet<GroupElement> = BTreeSet::new();
    let mut queue: VecDeque<GroupElement> = VecDeque::new();
    // the empty product is not a semigroup element; seed with the support
    for s in &support {
        if arena.contains(*s) && reached.insert((*s).clone()) {
            queue.push_back((*s).clone());
        }
    }
    while let Some(g) = queue.pop_front() {
        for s in &support {
            let h = spec.mul(&g, s);
            if arena.contains(&h) && reached.insert(h.clone()) {
                queue.push_back(h);
            }
        }
    }
    target.iter().all(|g| reached.contains(g))
}

fn has_heisenberg(spec: &GroupSpec) -> bool {
    match spec {
        GroupSpec::Heisenberg3 => true,
        GroupSpec::FreeProduct { left, right } => has_heisenberg(left) || has_heisenberg(right),
        _ => false,
    }
}
