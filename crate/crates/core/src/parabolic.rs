//! First-return kernels to a free factor `H` and its neighbourhood
//! `N_eta(H)`, the displacement matrix and its Perron eigenpair, the Doob
//! transform, and convolution powers of the kernel.
//!
//! Points of `N_eta(H)` are written `h w` with `h` in `H` and `w` a word
//! without leading `H`-letter and of word length at most `eta`; the list of
//! such `w` is the section `E`. Kernels are `H`-invariant, so only the
//! entries `p_{i,j}(e, x)` are stored.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::adapted::{AdaptedModel, WSolution};
use crate::engine::{coordinate_extent, KeyOps, Layout, Neumaier};
use crate::error::NumericError;
use crate::green::{
    estimate_spectral_radius, first_passage_weighted, green_derivative, GreenEvaluation,
    PassageOptions, SpectralRadiusEstimate,
};
use crate::groups::{ball, norm_proxy, word_metric, GroupElement, GroupSpec, Letter};
use crate::measures::{AdaptedSpec, ConvolutionSeries, SeriesRow, SeriesSource};

/// Kernel entries `(i, j, x) -> p_{i,j}(e, x)`.
pub type KernelEntries = BTreeMap<(usize, usize, GroupElement), f64>;

/// The coset representatives `E` of `N_eta(H) / H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSection {
    pub spec: GroupSpec,
    pub factor: usize,
    pub eta: f64,
    pub reps: Vec<GroupElement>,
    pub i0: usize,
}

impl NeighborhoodSection {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn factor_spec(&self) -> &GroupSpec {
        self.spec.factor(self.factor).expect("free product")
    }

    /// Writes `g = h w_j`; `None` when `g` lies outside `N_eta(H)`.
    pub fn decompose(&self, g: &GroupElement) -> Option<(GroupElement, usize)> {
        let letters = g.letters();
        let (h, rest) = match letters.first() {
            Some(l) if l.factor as usize == self.factor => (l.elem.clone(), &letters[1..]),
            _ => (self.factor_spec().identity(), letters),
        };
        let w = GroupElement::Word(rest.to_vec());
        self.reps.iter().position(|r| *r == w).map(|j| (h, j))
    }
}

/// Enumerates `E`: identity first, then the other representatives ordered
/// by their text form.
pub fn build_section(
    spec: &GroupSpec,
    factor: usize,
    eta: f64,
) -> Result<NeighborhoodSection, NumericError> {
    if !spec.is_free_product() || factor > 1 {
        return Err(NumericError::Invalid(
            "sections need a free product and factor 0 or 1".into(),
        ));
    }
    // every letter has word length >= 1, so norm_proxy <= 2 eta
    let mut reps: Vec<GroupElement> = ball(spec, 2.0 * eta)
        .into_iter()
        .filter(|g| {
            let lead = g.letters().first().map(|l| l.factor as usize);
            lead != Some(factor) && word_metric(g, spec) <= eta
        })
        .collect();
    reps.sort_by_cached_key(|g| (!g.is_identity(), g.to_string()));
    Ok(NeighborhoodSection {
        spec: spec.clone(),
        factor,
        eta,
        reps,
        i0: 0,
    })
}

/// First-return kernel to `N_eta(H)` at `r`.
#[derive(Clone, Debug)]
pub struct FirstReturnKernel {
    pub r: f64,
    pub section: NeighborhoodSection,
    pub entries: KernelEntries,
    /// Accumulated first-passage residuals, weighted by the step masses.
    pub residual: f64,
    /// Whether the underlying measure charges the identity.
    pub lazy: bool,
    pub solution: WSolution,
}

impl FirstReturnKernel {
    pub fn total_mass(&self, i: usize) -> f64 {
        self.entries
            .iter()
            .filter(|((a, _, _), _)| *a == i)
            .map(|(_, v)| *v)
            .collect::<Neumaier>()
            .value()
    }

    /// `max |p_{i,j}(e, x) - p_{j,i}(e, x^-1)|`.
    pub fn symmetry_residual(&self) -> f64 {
        let hs = self.section.factor_spec();
        self.entries
            .iter()
            .map(|((i, j, x), v)| {
                let back = self
                    .entries
                    .get(&(*j, *i, hs.inverse(x)))
                    .copied()
                    .unwrap_or(0.0);
                (v - back).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Builds the first-return kernel of an adapted walk to `N_eta(H)`.
///
/// A step from `w_i` either lands in `N_eta(H)` or on a coset `c H_k`
/// outside it. In the second case the walk stays on that coset, up to
/// excursions into deeper branches of weight `l_k`, until it hits the points
/// of the coset inside `N_eta(H)`; these hitting weights come from
/// first-passage tables of `mu_k` at the effective argument `y_k`.
pub fn first_return_kernel(
    model: &AdaptedModel,
    r: f64,
    section: &NeighborhoodSection,
    opts: &PassageOptions,
) -> Result<FirstReturnKernel, NumericError> {
    let adapted = &model.adapted;
    if section.spec != adapted.spec() {
        return Err(NumericError::Invalid(
            "section and walk live on different groups".into(),
        ));
    }
    let sol = model.solve(r)?;
    let spec = &section.spec;
    let mut entries = KernelEntries::new();
    let mut residual = 0.0;
    // hitting tables keyed by (factor, budget bits, target)
    let mut tables: BTreeMap<(usize, u64), Vec<(GroupElement, crate::green::FirstPassageTable)>> =
        BTreeMap::new();

    for (i, w) in section.reps.iter().enumerate() {
        for k in 0..2usize {
            let fspec = spec.factor(k).expect("free product");
            let mu = adapted.factor(k);
            let step_weight = r * adapted.weight(k);
            for (s, m) in mu.iter() {
                let weight = step_weight * m;
                let g = spec.mul(w, &spec.letter(k as u8, s.clone()));
                if let Some((h, j)) = section.decompose(&g) {
                    *entries.entry((i, j, h)).or_insert(0.0) += weight;
                    continue;
                }
                // g = c t with c the coset base and t in H_k
                let letters = w.letters();
                let (c_letters, prefix) = match letters.last() {
                    Some(l) if l.factor as usize == k => {
                        (&letters[..letters.len() - 1], l.elem.clone())
                    }
                    _ => (letters, fspec.identity()),
                };
                let c = GroupElement::Word(c_letters.to_vec());
                let start = fspec.mul(&prefix, s);
                let depth = distance_to_factor(&c, section);
                let budget = section.eta - depth;
                let key = (k, budget.to_bits());
                if let std::collections::btree_map::Entry::Vacant(e) = tables.entry(key) {
                    let targets: Vec<GroupElement> = ball(fspec, budget)
                        .into_iter()
                        .filter(|t| norm_proxy(t, fspec) <= budget)
                        .collect();
                    let mut per_target = Vec::with_capacity(targets.len());
                    for t in &targets {
                        let boundary: Vec<(GroupElement, f64)> = targets
                            .iter()
                            .map(|u| (u.clone(), if u == t { 1.0 } else { 0.0 }))
                            .collect();
                        let table =
                            first_passage_weighted(mu, sol.y[k], &boundary, &|_| false, &[], opts)?;
                        per_target.push((t.clone(), table));
                    }
                    e.insert(per_target);
                }
                for (t, table) in &tables[&key] {
                    let hit = table.get(&start);
                    if hit == 0.0 {
                        continue;
                    }
                    let landing = spec.mul(&c, &spec.letter(k as u8, t.clone()));
                    let (h, j) = section
                        .decompose(&landing)
                        .expect("targets lie in the neighbourhood");
                    *entries.entry((i, j, h)).or_insert(0.0) += weight * hit;
                    residual += weight * table.residual;
                }
            }
        }
    }
    Ok(FirstReturnKernel {
        r,
        section: section.clone(),
        entries,
        residual,
        lazy: adapted.is_lazy(),
        solution: sol,
    })
}

/// Word length of `c` after removing a leading `H`-letter.
fn distance_to_factor(c: &GroupElement, section: &NeighborhoodSection) -> f64 {
    let letters: &[Letter] = c.letters();
    let rest = match letters.first() {
        Some(l) if l.factor as usize == section.factor => &letters[1..],
        _ => letters,
    };
    word_metric(&GroupElement::Word(rest.to_vec()), &section.spec)
}

/// The `eta = 0` kernel from the closed form: `r alpha mu_0(x)` off the
/// diagonal and `r alpha mu_0(e) + r (1 - alpha) mu_1(e) + W` at `e` (shown
/// for `H = H_0`).
pub fn closed_form_kernel(adapted: &AdaptedSpec, sol: &WSolution, factor: usize) -> KernelEntries {
    let mut entries = KernelEntries::new();
    let mu = adapted.factor(factor);
    let e = mu.spec().identity();
    let s = sol.r * adapted.weight(factor);
    for (x, m) in mu.iter() {
        entries.insert((0, 0, x.clone()), s * m);
    }
    let other = adapted.factor(1 - factor);
    let lazy = sol.r * adapted.weight(1 - factor) * other.get(&other.spec().identity());
    *entries.entry((0, 0, e)).or_insert(0.0) += lazy + sol.w[factor];
    entries
}

/// Row sums `F_{ij} = sum_x p_{i,j}(e, x)` with their Perron eigenpair.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMatrix {
    pub f: DMatrix<f64>,
    pub lambda: f64,
    /// Positive eigenvector with `C^T C = 1`.
    pub c: DVector<f64>,
    /// `max |F - F^T|`.
    pub asymmetry: f64,
    /// `|F C - lambda C|_inf`.
    pub eigen_residual: f64,
    pub iterations: usize,
}

/// Computes `F` and its Perron eigenpair by power iteration on the shifted
/// matrix `F + |F|_inf I`, seeded with the uniform vector.
pub fn displacement_and_eigenpair(
    kernel: &FirstReturnKernel,
) -> Result<DisplacementMatrix, NumericError> {
    let n = kernel.section.len();
    let mut f = DMatrix::zeros(n, n);
    for ((i, j, _), v) in &kernel.entries {
        f[(*i, *j)] += v;
    }
    eigenpair(f)
}

pub fn eigenpair(f: DMatrix<f64>) -> Result<DisplacementMatrix, NumericError> {
    let n = f.nrows();
    let asymmetry = (&f - f.transpose()).amax();
    let shift = (0..n)
        .map(|i| f.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let shifted = &f + DMatrix::identity(n, n) * shift;
    let mut c = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    const MAX_ITER: usize = 1_000_000;
    let mut iterations = 0;
    loop {
        let mut next = &shifted * &c;
        let norm = next.norm();
        if norm == 0.0 {
            return Err(NumericError::Invalid("zero displacement matrix".into()));
        }
        next /= norm;
        let change = (&next - &c).amax();
        c = next;
        iterations += 1;
        if change < 1e-15 {
            break;
        }
        if iterations >= MAX_ITER {
            return Err(NumericError::NoConvergence {
                iterations,
                residual: change,
            });
        }
    }
    if c.iter().any(|&v| v <= 0.0) {
        return Err(NumericError::Invalid(
            "eigenvector not positive; the kernel looks reducible".into(),
        ));
    }
    let fc = &f * &c;
    let lambda = c.dot(&fc);
    let eigen_residual = (&fc - &c * lambda).amax();
    Ok(DisplacementMatrix {
        f,
        lambda,
        c,
        asymmetry,
        eigen_residual,
        iterations,
    })
}

/// `p~_{i,j}(e, x) = p_{i,j}(e, x) c_j / (lambda c_i)` with conductances
/// `m_i = c_i^2`.
#[derive(Clone, Debug)]
pub struct DoobKernel {
    pub factor_spec: GroupSpec,
    pub entries: KernelEntries,
    pub m: Vec<f64>,
    pub lambda: f64,
}

pub fn doob_transform(kernel: &FirstReturnKernel, pair: &DisplacementMatrix) -> DoobKernel {
    let c = &pair.c;
    let entries = kernel
        .entries
        .iter()
        .map(|((i, j, x), v)| ((*i, *j, x.clone()), v * c[*j] / (pair.lambda * c[*i])))
        .collect();
    DoobKernel {
        factor_spec: kernel.section.factor_spec().clone(),
        entries,
        m: c.iter().map(|v| v * v).collect(),
        lambda: pair.lambda,
    }
}

impl DoobKernel {
    /// `sum_{j, x} p~_{i,j}(e, x)` per row.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![Neumaier::default(); self.m.len()];
        for ((i, _, _), v) in &self.entries {
            sums[*i].add(*v);
        }
        sums.iter().map(|s| s.value()).collect()
    }

    /// `max |m_i p~_{i,j}(x, y) - m_j p~_{j,i}(y, x)|` over stored entries.
    pub fn reversibility_residual(&self) -> f64 {
        self.entries
            .iter()
            .map(|((i, j, x), v)| {
                let back = self
                    .entries
                    .get(&(*j, *i, self.factor_spec.inverse(x)))
                    .copied()
                    .unwrap_or(0.0);
                (self.m[*i] * v - self.m[*j] * back).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Matrix-valued convolution powers `p^(n)` for `n = 0..=n_max` of an
/// `H`-invariant kernel with `dim` channels.
pub fn matrix_powers(
    spec: &GroupSpec,
    entries: &KernelEntries,
    dim: usize,
    n_max: usize,
) -> Vec<KernelEntries> {
    let e = spec.identity();
    let mut out = Vec::with_capacity(n_max + 1);
    let mut cur: KernelEntries = (0..dim).map(|i| ((i, i, e.clone()), 1.0)).collect();
    out.push(cur.clone());
    let mut by_row: Vec<Vec<(usize, &GroupElement, f64)>> = vec![Vec::new(); dim];
    for ((i, j, x), v) in entries {
        by_row[*i].push((*j, x, *v));
    }
    for _ in 0..n_max {
        let mut next = KernelEntries::new();
        for ((i, j, x), v) in &cur {
            for (l, y, w) in &by_row[*j] {
                *next.entry((*i, *l, spec.mul(x, y))).or_insert(0.0) += v * w;
            }
        }
        out.push(next.clone());
        cur = next;
    }
    out
}

/// Return series of the kernel at `(e, i_0)` with diagnostics.
#[derive(Clone, Debug)]
pub struct InducedSeries {
    pub r: f64,
    pub series: ConvolutionSeries,
    pub rho: Result<SpectralRadiusEstimate, NumericError>,
    /// `G_{r,H,eta}(e, e | 1)` at `(i_0, i_0)`.
    pub green_at_one: Result<GreenEvaluation, NumericError>,
}

/// `p^(n)_{i0,i0}(e, e)` for `n <= n_max`, from the row vector
/// `v_n(j, x) = p^(n)_{i0,j}(e, x)` and the symmetry of the kernel:
/// `p^(2n) = sum v_n^2` and `p^(2n+1) = sum v_n v_{n+1}`.
pub fn induced_powers(
    kernel: &FirstReturnKernel,
    n_max: usize,
) -> Result<InducedSeries, NumericError> {
    let spec = kernel.section.factor_spec().clone();
    let extent = kernel
        .entries
        .keys()
        .map(|(_, _, x)| coordinate_extent(x))
        .max()
        .unwrap_or(1)
        .max(1);
    let steps = n_max.div_ceil(2) + 1;
    let bound = (steps as u64 + 1).saturating_mul(extent);
    let rows = match Layout::choose(&spec, bound) {
        Layout::Base(ops) => induced_rows(&ops, kernel, n_max),
        Layout::Word(ops) => induced_rows(&ops, kernel, n_max),
        Layout::Generic(ops) => induced_rows(&ops, kernel, n_max),
    };
    let series = ConvolutionSeries {
        spec: Some(spec),
        measure_id: format!("first_return_r{:.12}", kernel.r),
        eps: 0.0,
        source: SeriesSource::Engine,
        rows,
        exact_rho: None,
    };
    let rho = estimate_spectral_radius(&series);
    let green_at_one = green_derivative(&series, 1.0, 0);
    Ok(InducedSeries {
        r: kernel.r,
        series,
        rho,
        green_at_one,
    })
}

fn induced_rows<O: KeyOps>(ops: &O, kernel: &FirstReturnKernel, n_max: usize) -> Vec<SeriesRow> {
    let dim = kernel.section.len();
    let i0 = kernel.section.i0;
    let mut by_row: Vec<Vec<(usize, O::Key, f64)>> = vec![Vec::new(); dim];
    for ((i, j, x), v) in &kernel.entries {
        by_row[*i].push((*j, ops.encode(x), *v));
    }
    let step = |v: &[((usize, O::Key), f64)]| -> Vec<((usize, O::Key), f64)> {
        let mut acc: FxHashMap<(usize, O::Key), f64> = FxHashMap::default();
        for ((j, x), a) in v {
            for (l, y, w) in &by_row[*j] {
                *acc.entry((*l, ops.mul(x, y))).or_insert(0.0) += a * w;
            }
        }
        let mut out: Vec<_> = acc.into_iter().collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    };
    let dot = |a: &[((usize, O::Key), f64)], b: &[((usize, O::Key), f64)]| -> f64 {
        let mut acc = Neumaier::default();
        let (mut p, mut q) = (0, 0);
        while p < a.len() && q < b.len() {
            match a[p].0.cmp(&b[q].0) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    acc.add(a[p].1 * b[q].1);
                    p += 1;
                    q += 1;
                }
            }
        }
        acc.value()
    };
    // v_n is stored as mantissa times 2^exp; rescaling by powers of two is
    // exact and keeps long horizons away from underflow
    let row = |n: usize, a: f64, exp: i64| {
        let mut r = SeriesRow::new(n, a, 0.0);
        if exp != 0 {
            r.scale = exp as f64 * std::f64::consts::LN_2;
        }
        r
    };
    let mut rows = vec![SeriesRow::new(0, 0.0, 0.0); n_max + 1];
    let mut cur = vec![((i0, ops.identity()), 1.0)];
    let mut cur_exp = 0i64;
    let mut n = 0;
    loop {
        if 2 * n <= n_max {
            rows[2 * n] = row(2 * n, dot(&cur, &cur), 2 * cur_exp);
        }
        if 2 * n + 1 > n_max {
            break;
        }
        let mut next = step(&cur);
        let peak = next.iter().map(|e| e.1.abs()).fold(0.0f64, f64::max);
        let mut next_exp = cur_exp;
        if peak > 0.0 && peak < 2f64.powi(-64) {
            let k = peak.log2().floor() as i32;
            let factor = 2f64.powi(-k);
            for e in &mut next {
                e.1 *= factor;
            }
            next_exp += k as i64;
        }
        rows[2 * n + 1] = row(2 * n + 1, dot(&cur, &next), cur_exp + next_exp);
        cur = next;
        cur_exp = next_exp;
        n += 1;
    }
    rows
}

/// One point of [`rho_curve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoPoint {
    pub r: f64,
    pub rho: f64,
    /// Central-difference derivative; absent at `r = R`.
    pub derivative: Option<f64>,
}

/// `rho_{H_k}(r)` on a grid, with `rho'` by Richardson-extrapolated central
/// differences of step `h = (R - r) / 8`.
pub fn rho_curve(
    model: &AdaptedModel,
    factor: usize,
    grid: &[f64],
) -> Result<Vec<RhoPoint>, NumericError> {
    let big_r = model.radius;
    grid.iter()
        .map(|&r| {
            if !(0.0..=big_r).contains(&r) {
                return Err(NumericError::OutOfRange(format!(
                    "r = {r} outside [0, {big_r}]"
                )));
            }
            let rho = model.rho_h(factor, r)?;
            let derivative = if r < big_r {
                Some(rho_derivative(model, factor, r)?)
            } else {
                None
            };
            Ok(RhoPoint { r, rho, derivative })
        })
        .collect()
}

/// `rho_{H_k}'(r)` for `0 <= r < R`.
pub fn rho_derivative(model: &AdaptedModel, factor: usize, r: f64) -> Result<f64, NumericError> {
    let big_r = model.radius;
    if r >= big_r {
        return Err(NumericError::OutOfRange(format!(
            "no derivative at r = {r} >= R"
        )));
    }
    let h = ((big_r - r) / 8.0).min(1e-3 * big_r);
    let central = |h: f64| -> Result<f64, NumericError> {
        let lo = (r - h).max(0.0);
        Ok((model.rho_h(factor, r + h)? - model.rho_h(factor, lo)?) / (r + h - lo))
    };
    if r < h {
        return central(h);
    }
    let (d1, d2) = (central(h)?, central(h / 2.0)?);
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Range of `p^(2n)(e, e) / (rho^(2n) (2n)^(-d/2))` over the even rows in
/// `[n_lo, n_hi]`.
pub fn local_limit_band(
    series: &ConvolutionSeries,
    rho: f64,
    d: u32,
    n_lo: usize,
    n_hi: usize,
) -> (f64, f64) {
    series
        .even()
        .filter(|row| row.n >= n_lo && row.n <= n_hi && row.a > 0.0)
        .map(|row| {
            let n = row.n as f64;
            (row.ln_value() - n * rho.ln() + 0.5 * d as f64 * n.ln()).exp()
        })
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}
