//! Green-function evaluation from return-probability series, spectral radius
//! estimation, and first-passage generating functions on balls.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::engine::Neumaier;
use crate::error::NumericError;
use crate::fit::{fit_exponent, least_squares, FitOptions};
use crate::groups::{ball, norm_proxy, GroupElement};
use crate::measures::{AdaptedSpec, ConvolutionSeries, SparseMeasure};

/// Margin on the tail decay exponent used to certify divergence at `r = R`.
pub const DIVERGENCE_MARGIN: f64 = 0.1;

/// How trustworthy the spectral-radius bound behind a tail estimate is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RhoBound {
    /// The spectral radius is known exactly; tails are rigorous.
    Exact(f64),
    /// Extrapolated upper estimate; tails are heuristic.
    Heuristic(f64),
}

impl RhoBound {
    pub fn value(&self) -> f64 {
        match *self {
            RhoBound::Exact(v) | RhoBound::Heuristic(v) => v,
        }
    }

    pub fn is_rigorous(&self) -> bool {
        matches!(self, RhoBound::Exact(_))
    }
}

/// A truncated Green-type sum. The true value lies in
/// `[value, value + tail_bound + defect_bound]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenEvaluation {
    pub r: f64,
    pub k: usize,
    pub value: f64,
    pub tail_bound: f64,
    /// Contribution of the series defects.
    pub defect_bound: f64,
    /// Last index summed.
    pub truncation: usize,
    pub rho: RhoBound,
}

impl GreenEvaluation {
    pub fn upper(&self) -> f64 {
        self.value + self.tail_bound + self.defect_bound
    }

    /// Width of the enclosure.
    pub fn uncertainty(&self) -> f64 {
        self.tail_bound + self.defect_bound
    }
}

/// Result of [`estimate_spectral_radius`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRadiusEstimate {
    pub rho_lower: f64,
    pub rho_extrapolated: f64,
    /// `rho_extrapolated (1 + standard error)`; not a certified bound unless
    /// `exact` is set.
    pub rho_up: f64,
    pub radius: f64,
    pub exact: bool,
    /// Fitted polynomial exponent of `a_n rho^-n`.
    pub alpha: f64,
    pub fit_residual: f64,
    pub window: (usize, usize),
}

impl SpectralRadiusEstimate {
    pub fn bound(&self) -> RhoBound {
        if self.exact {
            RhoBound::Exact(self.rho_extrapolated)
        } else {
            RhoBound::Heuristic(self.rho_up)
        }
    }
}

/// Largest tolerated `defect / a` among the rows used by
/// [`estimate_spectral_radius`].
pub const RHO_DEFECT_FRACTION: f64 = 0.1;

/// Estimates the exponential decay rate of the even rows.
///
/// `rho_lower` is the largest `a_{2n}^{1/2n}`, a lower bound by
/// supermultiplicativity. The extrapolated value comes from the least-squares
/// fit `ln a_m = m ln rho - alpha ln m + c` over the trailing half of the
/// usable even rows.
pub fn estimate_spectral_radius(
    series: &ConvolutionSeries,
) -> Result<SpectralRadiusEstimate, NumericError> {
    let mut usable = Vec::new();
    for row in series.even().filter(|r| r.n > 0) {
        if row.a <= 0.0 {
            continue;
        }
        if row.defect > RHO_DEFECT_FRACTION * row.a {
            break;
        }
        usable.push(*row);
    }
    if usable.len() < 32 {
        let dominated = series
            .even()
            .any(|r| r.n > 0 && r.defect > RHO_DEFECT_FRACTION * r.a);
        return Err(
            if dominated && usable.len() < 32 && series.even().count() > 32 {
                NumericError::DefectDominates(usable.last().map(|r| r.n + 2).unwrap_or(0))
            } else {
                NumericError::InsufficientData(format!(
                    "{} usable even rows, need 32",
                    usable.len()
                ))
            },
        );
    }
    let rho_lower = usable
        .iter()
        .map(|r| (r.ln_value() / r.n as f64).exp())
        .fold(0.0, f64::max);
    let tail = &usable[usable.len() / 2..];
    let (first, last) = (tail[0].n, tail[tail.len() - 1].n);

    if let Some(rho) = series.exact_rho {
        let alpha = fit_exponent(series, rho, &FitOptions::default())
            .map(|f| f.alpha)
            .unwrap_or(f64::NAN);
        return Ok(SpectralRadiusEstimate {
            rho_lower,
            rho_extrapolated: rho,
            rho_up: rho,
            radius: 1.0 / rho,
            exact: true,
            alpha,
            fit_residual: 0.0,
            window: (first, last),
        });
    }

    let m = tail.len();
    // columns: n, -ln n, 1 with n centred to decorrelate the intercept
    let n_mid = 0.5 * (first + last) as f64;
    let x = DMatrix::from_fn(m, 3, |i, j| {
        let n = tail[i].n as f64;
        match j {
            0 => n - n_mid,
            1 => -n.ln(),
            _ => 1.0,
        }
    });
    let y = DVector::from_iterator(m, tail.iter().map(|r| r.ln_value()));
    let (beta, se, residual) = least_squares(&x, &y)?;
    let ln_rho = beta[0];
    let mut rho = ln_rho.exp();
    let rel = se[0].abs().max(f64::EPSILON);
    let upper_cap = 1.0f64.max(rho_lower);
    rho = rho.clamp(rho_lower, upper_cap);
    let rho_up = (rho * (1.0 + rel)).max(rho_lower);
    Ok(SpectralRadiusEstimate {
        rho_lower,
        rho_extrapolated: rho,
        rho_up,
        radius: 1.0 / rho,
        exact: false,
        alpha: beta[1],
        fit_residual: residual,
        window: (first, last),
    })
}

fn rho_bound_for(series: &ConvolutionSeries) -> RhoBound {
    if let Some(rho) = series.exact_rho {
        return RhoBound::Exact(rho);
    }
    match estimate_spectral_radius(series) {
        Ok(est) => est.bound(),
        // a_n <= total mass^n <= 1 for (sub-)probability walks
        Err(_) => RhoBound::Heuristic(1.0),
    }
}

/// `ln( n (n-1) ... (n-k+1) )`, `-inf` for `n < k`.
fn ln_falling(n: usize, k: usize) -> f64 {
    if n < k {
        return f64::NEG_INFINITY;
    }
    (0..k).map(|j| ((n - j) as f64).ln()).sum()
}

/// `ln C(n+k, k)`.
fn ln_binom(n: usize, k: usize) -> f64 {
    (1..=k).map(|j| ((n + j) as f64 / j as f64).ln()).sum()
}

#[derive(Clone, Copy)]
enum Weights {
    /// `n!/(n-k)! r^(n-k)`
    Derivative,
    /// `C(n+k, k) r^n`
    CutPoints,
}

impl Weights {
    fn ln_coeff(self, n: usize, k: usize) -> f64 {
        match self {
            Weights::Derivative => ln_falling(n, k),
            Weights::CutPoints => ln_binom(n, k),
        }
    }

    fn shift(self, k: usize) -> usize {
        match self {
            Weights::Derivative => k,
            Weights::CutPoints => 0,
        }
    }

    /// `c(n+1) / c(n)` for `n >= shift`.
    fn ratio(self, n: usize, k: usize) -> f64 {
        match self {
            Weights::Derivative => (n + 1) as f64 / (n + 1 - k) as f64,
            Weights::CutPoints => (n + 1 + k) as f64 / (n + 1) as f64,
        }
    }
}

/// `sum_{n > n0} c(n) rho^n r^(n - shift)`.
fn tail_sum(w: Weights, k: usize, n0: usize, rho: f64, r: f64) -> f64 {
    if r == 0.0 || rho == 0.0 {
        return 0.0;
    }
    let x = rho * r;
    if x >= 1.0 {
        return f64::INFINITY;
    }
    let shift = w.shift(k);
    let start = (n0 + 1).max(shift);
    let ln_x = x.ln();
    // r^(n-shift) rho^n = x^n r^-shift
    let ln_pref = -(shift as f64) * r.ln();
    let mut ln_term = w.ln_coeff(start, k) + start as f64 * ln_x + ln_pref;
    let mut acc = Neumaier::default();
    let mut n = start;
    const MAX_TERMS: usize = 50_000_000;
    loop {
        let term = ln_term.exp();
        acc.add(term);
        let q = w.ratio(n, k) * x;
        if q < 1.0 {
            let rest = term * q / (1.0 - q);
            if rest <= 1e-17 * acc.value() || n - start > MAX_TERMS {
                acc.add(rest);
                return acc.value();
            }
        } else if n - start > MAX_TERMS {
            return f64::INFINITY;
        }
        ln_term += q.ln();
        n += 1;
    }
}

fn weighted_sum(
    series: &ConvolutionSeries,
    r: f64,
    k: usize,
    w: Weights,
) -> Result<GreenEvaluation, NumericError> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(NumericError::OutOfRange(format!("r = {r}")));
    }
    if series.is_empty() {
        return Err(NumericError::InsufficientData("empty series".into()));
    }
    let shift = w.shift(k);
    let ln_r = r.ln();
    let mut value = Neumaier::default();
    let mut defect = Neumaier::default();
    for row in &series.rows {
        if row.n < shift {
            continue;
        }
        let p = (row.n - shift) as f64;
        let ln_c = w.ln_coeff(row.n, k);
        let ln_pow = if p == 0.0 { 0.0 } else { p * ln_r };
        if row.a > 0.0 {
            value.add((ln_c + row.ln_value() + ln_pow).exp());
        }
        if row.defect > 0.0 {
            defect.add((ln_c + row.ln_defect() + ln_pow).exp());
        }
    }
    let n_max = series.max_n();
    let rho = rho_bound_for(series);
    let rho_v = rho.value();
    let product = r * rho_v;

    let tail_bound = if rho.is_rigorous() && product >= 1.0 - 1e-12 {
        if product > 1.0 + 1e-12 {
            return Err(NumericError::Diverges { r, product });
        }
        critical_tail(series, rho_v, r, k, w)?
    } else {
        tail_sum(w, k, n_max, rho_v, r)
    };
    Ok(GreenEvaluation {
        r,
        k,
        value: value.value(),
        tail_bound,
        defect_bound: defect.value(),
        truncation: n_max,
        rho,
    })
}

/// Tail at the radius of convergence itself: the terms behave like
/// `n^(k - alpha)` with `alpha` fitted from the series.
fn critical_tail(
    series: &ConvolutionSeries,
    rho: f64,
    r: f64,
    k: usize,
    w: Weights,
) -> Result<f64, NumericError> {
    let fit = fit_exponent(series, rho, &FitOptions::default())?;
    let decay = fit.alpha - k as f64;
    if decay <= 1.0 - DIVERGENCE_MARGIN {
        return Err(NumericError::Diverges {
            r,
            product: r * rho,
        });
    }
    if decay < 1.0 + DIVERGENCE_MARGIN {
        return Ok(f64::INFINITY);
    }
    // integral comparison for c(n) a_n r^n ~ C n^(k - alpha)
    let n = series.max_n() as f64;
    let last = series
        .rows
        .iter()
        .rev()
        .find(|row| row.a > 0.0)
        .ok_or_else(|| NumericError::InsufficientData("no positive rows".into()))?;
    let shift = w.shift(k) as f64;
    let ln_term = w.ln_coeff(last.n, k) + last.ln_value() + (last.n as f64 - shift) * r.ln();
    let period = if series.rows.iter().any(|row| row.n % 2 == 1 && row.a > 0.0) {
        1.0
    } else {
        2.0
    };
    Ok(ln_term.exp() * n / ((decay - 1.0) * period))
}

/// `k`-th derivative of the Green function `sum a_n r^n` at `r`, with tail
/// and defect bounds.
///
/// Returns [`NumericError::Diverges`] when the spectral radius is known
/// exactly and either `r rho > 1`, or `r rho = 1` and the fitted decay of the
/// terms is too slow for convergence.
pub fn green_derivative(
    series: &ConvolutionSeries,
    r: f64,
    k: usize,
) -> Result<GreenEvaluation, NumericError> {
    weighted_sum(series, r, k, Weights::Derivative)
}

/// `I^(k)(r) = sum_n C(n+k, k) a_n r^n`, the generating function of paths
/// with `k` marked cut positions.
pub fn derivative_sum_i(
    series: &ConvolutionSeries,
    r: f64,
    k: usize,
) -> Result<GreenEvaluation, NumericError> {
    weighted_sum(series, r, k, Weights::CutPoints)
}

/// Plain truncated power sum `sum a_n z^n`; no tail accounting.
pub fn power_sum(series: &ConvolutionSeries, z: f64) -> f64 {
    let ln_z = z.ln();
    let mut acc = Neumaier::default();
    for row in &series.rows {
        if row.a > 0.0 {
            acc.add(if row.n == 0 {
                row.value()
            } else {
                (row.ln_value() + row.n as f64 * ln_z).exp()
            });
        }
    }
    acc.value()
}

/// Options for [`first_passage`].
#[derive(Clone, Debug)]
pub struct PassageOptions {
    /// Initial ball radius.
    pub radius: f64,
    /// Hard cap on the radius reached by doubling.
    pub max_radius: f64,
    /// Stopping tolerance on the sup-norm of an iteration update, and on the
    /// change between two successive radii.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PassageOptions {
    fn default() -> Self {
        PassageOptions {
            radius: 16.0,
            max_radius: 4096.0,
            tol: 1e-14,
            max_iter: 2_000_000,
        }
    }
}

/// First-passage generating functions into a target set, restricted to a
/// ball.
#[derive(Clone, Debug)]
pub struct FirstPassageTable {
    pub r: f64,
    /// Targets with their boundary values.
    pub targets: Vec<(GroupElement, f64)>,
    pub radius: f64,
    pub values: BTreeMap<GroupElement, f64>,
    /// Last sup-norm update plus the change from the previous radius.
    pub residual: f64,
    pub iterations: usize,
}

impl FirstPassageTable {
    /// Value at `x` (zero outside the ball).
    pub fn get(&self, x: &GroupElement) -> f64 {
        self.values.get(x).copied().unwrap_or(0.0)
    }
}

/// Solves `f(x) = sum_y r mu(x^-1 y) f(y)` off `T` and the avoided set, with
/// `f = 1` on `T`, `f = 0` on avoided states and outside the ball of radius
/// `L`. Starts at `f = 0` and iterates Jacobi sweeps, so every value is a
/// lower bound that grows with the iteration count and with `L`. The radius
/// doubles until two successive radii agree within `tol` on the states
/// listed in `probe` (all states of the smaller ball when `probe` is empty).
pub fn first_passage(
    mu: &SparseMeasure,
    r: f64,
    targets: &[GroupElement],
    avoid: &dyn Fn(&GroupElement) -> bool,
    probe: &[GroupElement],
    opts: &PassageOptions,
) -> Result<FirstPassageTable, NumericError> {
    let weighted: Vec<(GroupElement, f64)> = targets.iter().map(|t| (t.clone(), 1.0)).collect();
    first_passage_weighted(mu, r, &weighted, avoid, probe, opts)
}

/// [`first_passage`] with arbitrary boundary values on the targets; with one
/// target at `1` and the others at `0` it gives the generating function of
/// hitting the target set first at that target.
pub fn first_passage_weighted(
    mu: &SparseMeasure,
    r: f64,
    targets: &[(GroupElement, f64)],
    avoid: &dyn Fn(&GroupElement) -> bool,
    probe: &[GroupElement],
    opts: &PassageOptions,
) -> Result<FirstPassageTable, NumericError> {
    if !(r >= 0.0) {
        return Err(NumericError::OutOfRange(format!("r = {r}")));
    }
    for (t, _) in targets {
        if avoid(t) {
            return Err(NumericError::Invalid(format!("target {t} is also avoided")));
        }
    }
    let spec = mu.spec();
    let reach = targets
        .iter()
        .map(|(t, _)| norm_proxy(t, spec))
        .chain(probe.iter().map(|p| norm_proxy(p, spec)))
        .fold(0.0, f64::max);
    let mut radius = opts.radius.max(reach + 1.0);
    let mut prev: Option<FirstPassageTable> = None;
    loop {
        let table = solve_on_ball(mu, r, targets, avoid, radius, opts)?;
        if let Some(p) = prev {
            let keys: Vec<&GroupElement> = if probe.is_empty() {
                p.values.keys().collect()
            } else {
                probe.iter().collect()
            };
            let change = keys
                .iter()
                .map(|x| (table.get(x) - p.get(x)).abs())
                .fold(0.0, f64::max);
            if change <= opts.tol {
                return Ok(FirstPassageTable {
                    residual: table.residual + change,
                    ..table
                });
            }
            if radius * 2.0 > opts.max_radius {
                return Err(NumericError::NoConvergence {
                    iterations: table.iterations,
                    residual: change,
                });
            }
        }
        prev = Some(table);
        radius *= 2.0;
    }
}

fn solve_on_ball(
    mu: &SparseMeasure,
    r: f64,
    targets: &[(GroupElement, f64)],
    avoid: &dyn Fn(&GroupElement) -> bool,
    radius: f64,
    opts: &PassageOptions,
) -> Result<FirstPassageTable, NumericError> {
    let spec = mu.spec();
    let states = ball(spec, radius);
    let index: FxHashMap<&GroupElement, usize> =
        states.iter().enumerate().map(|(i, g)| (g, i)).collect();
    let boundary: FxHashMap<&GroupElement, f64> = targets.iter().map(|(t, v)| (t, *v)).collect();
    let steps: Vec<(&GroupElement, f64)> = mu.iter().map(|(g, w)| (g, r * w)).collect();

    // 0 = free, 1 = fixed (target or avoided)
    let mut fixed = vec![false; states.len()];
    let mut f = vec![0.0; states.len()];
    let mut offsets = Vec::with_capacity(states.len() + 1);
    let mut cols: Vec<(usize, f64)> = Vec::new();
    offsets.push(0);
    for (i, x) in states.iter().enumerate() {
        if let Some(v) = boundary.get(x) {
            fixed[i] = true;
            f[i] = *v;
        } else if avoid(x) {
            fixed[i] = true;
        } else {
            for (s, w) in &steps {
                if let Some(&j) = index.get(&spec.mul(x, s)) {
                    cols.push((j, *w));
                }
            }
        }
        offsets.push(cols.len());
    }

    let mut change = f64::INFINITY;
    let mut iterations = 0;
    let mut next = f.clone();
    while change > opts.tol {
        if iterations >= opts.max_iter {
            return Err(NumericError::NoConvergence {
                iterations,
                residual: change,
            });
        }
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            if !fixed[i] {
                *out = cols[offsets[i]..offsets[i + 1]]
                    .iter()
                    .map(|(j, w)| w * f[*j])
                    .sum();
            }
        });
        change = f
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
    }
    Ok(FirstPassageTable {
        r,
        targets: targets.to_vec(),
        radius,
        values: states.into_iter().zip(f).collect(),
        residual: change,
        iterations,
    })
}

/// Weight `w_i(r)` of the excursions that leave factor `i` through a step in
/// the other factor and come back to the starting point, computed with
/// first-passage tables on the factors.
pub fn excursion_weight_w0(
    adapted: &AdaptedSpec,
    i: usize,
    r: f64,
    opts: &PassageOptions,
) -> Result<f64, NumericError> {
    let sol = crate::adapted::solve_w(adapted, r, crate::adapted::Route::Passage(opts.clone()))?;
    Ok(sol.w[i])
}
