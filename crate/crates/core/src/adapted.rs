//! Adapted walks on free products `H0 * H1`.
//!
//! Let `s_k = r w_k` be the scaled factor weights (`w_0 = alpha`). A walk
//! started on `H_k` that steps into the other factor returns to its starting
//! point before moving again along `H_k`; the generating weight of these
//! excursions is `W_k`. Seen on `H_k`, the walk is then the lazy kernel
//! `s_k mu_k + l_k delta` with `l_k = s_{1-k} mu_{1-k}(e) + W_k`, and
//!
//! ```text
//! W_{1-k} = sum_{x != e} s_k mu_k(x) F_k(x -> e | y_k),  y_k = s_k / (1 - l_k),
//! ```
//!
//! where `F_k` is the first-passage generating function of `mu_k` on `H_k`.
//! The two equations are solved for the minimal solution; beyond the radius
//! of convergence `R` there is none.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::green::{first_passage, green_derivative, PassageOptions};
use crate::groups::{GroupElement, GroupSpec};
use crate::measures::{
    power_sequence, AdaptedSpec, ConvolutionSeries, SeriesRow, SeriesSource, DEFAULT_EPS,
};

const NEWTON_MAX: usize = 400;

/// Return-probability series of the two factor measures.
#[derive(Clone, Debug)]
pub struct FactorSeries {
    pub series: [ConvolutionSeries; 2],
    /// Largest argument each factor Green function can be evaluated at with
    /// a negligible tail.
    pub y_max: [f64; 2],
}

impl FactorSeries {
    pub fn compute(adapted: &AdaptedSpec, n_max: usize) -> Result<Self, NumericError> {
        let mut out = Vec::with_capacity(2);
        for k in 0..2 {
            let mu = adapted.factor(k);
            let eps = match mu.spec() {
                GroupSpec::Lattice { d: 1 } | GroupSpec::Cyclic { .. } => 0.0,
                _ => DEFAULT_EPS,
            };
            out.push(power_sequence(mu, n_max, eps)?);
        }
        let [s0, s1]: [ConvolutionSeries; 2] = out.try_into().expect("two factors");
        // a_n <= 1, so the tail beyond N is at most y^N / (1 - y)
        let y_lim = |n: usize| (-(40.0f64) / n as f64).exp();
        Ok(FactorSeries {
            y_max: [y_lim(s0.max_n()), y_lim(s1.max_n())],
            series: [s0, s1],
        })
    }

    fn len(&self) -> usize {
        self.series[0].max_n()
    }

    /// `G_k(y)` at a real argument.
    fn green(&self, k: usize, y: f64) -> Result<f64, NumericError> {
        if y > self.y_max[k] {
            return Err(NumericError::InsufficientData(format!(
                "factor {k} series too short for y = {y}"
            )));
        }
        Ok(green_derivative(&self.series[k], y, 0)?.value)
    }

    /// `G_k(y)` at a complex argument, by Horner's rule.
    fn green_complex(&self, k: usize, y: Complex64) -> Complex64 {
        self.series[k]
            .rows
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, row| acc * y + row.value())
    }
}

/// How the factor first-passage sums are evaluated.
#[derive(Clone, Debug)]
pub enum Route<'a> {
    /// From the factor Green functions: `sum_{x != e} mu(x) F(x -> e | y)
    /// = (1 - 1/G(y)) / y - mu(e)`.
    Series(&'a FactorSeries),
    /// Directly from first-passage tables on the factor groups.
    Passage(PassageOptions),
}

/// Minimal solution of the excursion system at one `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WSolution {
    pub r: f64,
    /// `w[k]`: excursions from `H_k` through the other factor.
    pub w: [f64; 2],
    /// Laziness `l_k` of the walk seen on `H_k`.
    pub ell: [f64; 2],
    /// Effective factor arguments `y_k`.
    pub y: [f64; 2],
    /// `G_{mu_k}(y_k)`.
    pub factor_green: [f64; 2],
    /// `G(e, e | r)` on the free product.
    pub green: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl WSolution {
    /// Total mass of the first-return kernel to `H_k`, which is its spectral
    /// radius (the factors are amenable).
    pub fn rho_h(&self, adapted: &AdaptedSpec, k: usize) -> f64 {
        let other = 1 - k;
        let e = adapted.factor(other).spec().identity();
        self.r * adapted.weight(k)
            + self.r * adapted.weight(other) * adapted.factor(other).get(&e)
            + self.w[k]
    }
}

struct Stage {
    w: [f64; 2],
    ell: [f64; 2],
    y: [f64; 2],
    g: [f64; 2],
}

enum Eval {
    Ok(f64, Stage),
    /// An effective argument reached the factor radius of convergence.
    Domain,
}

fn mu_e(adapted: &AdaptedSpec, k: usize) -> f64 {
    let m = adapted.factor(k);
    m.get(&m.spec().identity())
}

/// `(sum_{x != e} mu_k(x) F_k(x -> e | y), G_k(y))`.
fn excursion_sum(
    adapted: &AdaptedSpec,
    k: usize,
    y: f64,
    route: &Route,
) -> Result<(f64, f64), NumericError> {
    let me = mu_e(adapted, k);
    if y == 0.0 {
        return Ok((0.0, 1.0));
    }
    match route {
        Route::Series(fs) => {
            let g = fs.green(k, y)?;
            Ok(((1.0 - 1.0 / g) / y - me, g))
        }
        Route::Passage(opts) => {
            let mu = adapted.factor(k);
            let e = mu.spec().identity();
            let support: Vec<GroupElement> = mu
                .iter()
                .map(|(x, _)| x.clone())
                .filter(|x| *x != e)
                .collect();
            let table = first_passage(mu, y, std::slice::from_ref(&e), &|_| false, &support, opts)?;
            let sum: f64 = mu
                .iter()
                .filter(|(x, _)| **x != e)
                .map(|(x, m)| m * table.get(x))
                .sum();
            let g = 1.0 / (1.0 - y * me - y * sum);
            Ok((sum, g))
        }
    }
}

fn evaluate(adapted: &AdaptedSpec, r: f64, w0: f64, route: &Route) -> Result<Eval, NumericError> {
    let s = [r * adapted.weight(0), r * adapted.weight(1)];
    let me = [mu_e(adapted, 0), mu_e(adapted, 1)];
    let ell0 = s[1] * me[1] + w0;
    if ell0 >= 1.0 {
        return Ok(Eval::Domain);
    }
    let y0 = s[0] / (1.0 - ell0);
    if y0 >= 1.0 {
        return Ok(Eval::Domain);
    }
    let (e0, g0) = excursion_sum(adapted, 0, y0, route)?;
    let w1 = s[0] * e0;
    let ell1 = s[0] * me[0] + w1;
    if ell1 >= 1.0 {
        return Ok(Eval::Domain);
    }
    let y1 = s[1] / (1.0 - ell1);
    if y1 >= 1.0 {
        return Ok(Eval::Domain);
    }
    let (e1, g1) = excursion_sum(adapted, 1, y1, route)?;
    let next = s[1] * e1;
    Ok(Eval::Ok(
        next - w0,
        Stage {
            w: [w0, w1],
            ell: [ell0, ell1],
            y: [y0, y1],
            g: [g0, g1],
        },
    ))
}

fn beyond(r: f64) -> NumericError {
    NumericError::Diverges {
        r,
        product: f64::NAN,
    }
}

/// Solves the excursion system at `r` by Newton's method from below on the
/// convex map `h(W_0) = Psi(W_0) - W_0`.
///
/// Returns [`NumericError::Diverges`] when no solution exists, that is for
/// `r > R`.
pub fn solve_w(adapted: &AdaptedSpec, r: f64, route: Route) -> Result<WSolution, NumericError> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(NumericError::OutOfRange(format!("r = {r}")));
    }
    let mut w = 0.0f64;
    for it in 0..NEWTON_MAX {
        let (h, stage) = match evaluate(adapted, r, w, &route)? {
            Eval::Ok(h, s) => (h, s),
            Eval::Domain => return Err(beyond(r)),
        };
        let done = |h: f64, it: usize, stage: Stage| {
            let green = stage.g[0] / (1.0 - stage.ell[0]);
            WSolution {
                r,
                w: stage.w,
                ell: stage.ell,
                y: stage.y,
                factor_green: stage.g,
                green,
                residual: h.abs(),
                iterations: it,
            }
        };
        if h <= 1e-15 * (1.0 + w) {
            return Ok(done(h, it, stage));
        }
        // the backward quotient is at most h'(w) by convexity, so the step
        // never passes the minimal root
        let delta = 1e-5 * w.max(1e-3);
        let slope = match evaluate(adapted, r, w - delta, &route)? {
            Eval::Ok(h2, _) => (h - h2) / delta,
            Eval::Domain => return Err(beyond(r)),
        };
        if slope >= 0.0 {
            return Err(beyond(r));
        }
        let step = -h / slope;
        w += step;
        if step <= 1e-16 * (1.0 + w) {
            return Ok(done(h, it, stage));
        }
    }
    Err(NumericError::NoConvergence {
        iterations: NEWTON_MAX,
        residual: f64::NAN,
    })
}

/// Radius of convergence `R` of the Green function: the largest `r` at which
/// the excursion system is solvable, located by bisection.
pub fn radius_of_convergence(adapted: &AdaptedSpec, route: &Route) -> Result<f64, NumericError> {
    let solvable = |r: f64| -> Result<bool, NumericError> {
        match solve_w(adapted, r, route.clone()) {
            Ok(_) => Ok(true),
            Err(NumericError::Diverges { .. }) | Err(NumericError::NoConvergence { .. }) => {
                Ok(false)
            }
            Err(e) => Err(e),
        }
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while solvable(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(NumericError::OutOfRange(
                "radius of convergence above 1e6".into(),
            ));
        }
    }
    for _ in 0..200 {
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if solvable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// An adapted walk together with factor series long enough to evaluate the
/// excursion system on `[0, R]`.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub adapted: AdaptedSpec,
    pub factors: FactorSeries,
    pub radius: f64,
}

/// Longest factor series [`AdaptedModel::new`] will compute.
pub const MAX_FACTOR_ROWS: usize = 1 << 17;

impl AdaptedModel {
    /// Finds `R`, lengthening the factor series until the effective
    /// arguments at `R` stay inside their reliable range.
    pub fn new(adapted: AdaptedSpec) -> Result<Self, NumericError> {
        let mut n = 512;
        loop {
            let factors = FactorSeries::compute(&adapted, n)?;
            let attempt = radius_of_convergence(&adapted, &Route::Series(&factors));
            match attempt {
                Ok(radius) => {
                    let sol = solve_w(&adapted, radius, Route::Series(&factors));
                    if sol.is_ok() {
                        return Ok(AdaptedModel {
                            adapted,
                            factors,
                            radius,
                        });
                    }
                }
                Err(NumericError::InsufficientData(_)) => {}
                Err(e) => return Err(e),
            }
            if n >= MAX_FACTOR_ROWS {
                return Err(NumericError::InsufficientData(format!(
                    "factor series of {n} rows cannot resolve the radius of convergence"
                )));
            }
            n *= 2;
        }
    }

    pub fn route(&self) -> Route<'_> {
        Route::Series(&self.factors)
    }

    pub fn solve(&self, r: f64) -> Result<WSolution, NumericError> {
        solve_w(&self.adapted, r, self.route())
    }

    /// `rho_{H_k}(r)`, the total mass of the first-return kernel to `H_k`.
    pub fn rho_h(&self, k: usize, r: f64) -> Result<f64, NumericError> {
        Ok(self.solve(r)?.rho_h(&self.adapted, k))
    }

    /// Return-probability series of the free-product walk, read off the
    /// Cauchy integral of `G(e, e | z)` on the circle `|z| = r0` with
    /// `(R / r0)^N = 10^3`.
    ///
    /// Each row carries the aliasing bound (from `a_m <= R^-m`) plus a
    /// rounding allowance as its defect: `a_n` is the computed value minus
    /// this error, the defect twice the error.
    pub fn transfer_series(&self, n_max: usize) -> Result<ConvolutionSeries, NumericError> {
        if n_max < 2 {
            return Err(NumericError::InsufficientData(
                "transfer series needs n_max >= 2".into(),
            ));
        }
        let big_r = self.radius;
        let r0 = big_r * (-(1e3f64).ln() / n_max as f64).exp();
        let m = 4 * n_max;
        let real = self.solve(r0)?;
        let mut values = vec![Complex64::new(0.0, 0.0); m];
        values[0] = Complex64::new(real.green, 0.0);
        let mut w_prev = Complex64::new(real.w[0], 0.0);
        let mut w_prev2 = w_prev;
        let mut g_max = real.green;
        for j in 1..=m / 2 {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let z = Complex64::from_polar(r0, theta);
            let guess = if j == 1 {
                w_prev
            } else {
                2.0 * w_prev - w_prev2
            };
            let (w, g) = self.solve_complex(z, guess)?;
            g_max = g_max.max(g.norm());
            values[j] = g;
            values[m - j] = g.conj();
            w_prev2 = w_prev;
            w_prev = w;
        }
        let mut planner = FftPlanner::<f64>::new();
        planner.plan_fft_forward(m).process(&mut values);
        let ln_r0 = r0.ln();
        let ln_ratio = (r0 / big_r).ln();
        // alias: sum_{j >= 1} (r0/R)^(n + jM) in units of r0^-n
        let alias_m = (m as f64 * ln_ratio).exp();
        let rounding = g_max * (1e-14 + 8.0 * f64::EPSILON * (m as f64).log2());
        let mut rows = Vec::with_capacity(n_max + 1);
        for (n, v) in values.iter().take(n_max + 1).enumerate() {
            let value = v.re / m as f64;
            let alias = (n as f64 * ln_ratio).exp() * alias_m / (1.0 - alias_m);
            let err = alias + rounding;
            let (a, defect) = if value - err > 0.0 {
                (value - err, 2.0 * err)
            } else {
                (0.0, (value + err).max(0.0))
            };
            rows.push(SeriesRow {
                n,
                a,
                defect,
                scale: -(n as f64) * ln_r0,
            });
        }
        rows[0] = SeriesRow::new(0, 1.0, 0.0);
        Ok(ConvolutionSeries {
            spec: Some(self.adapted.spec()),
            measure_id: format!("adapted_transfer_{:.6}", self.adapted.alpha),
            eps: 0.0,
            source: SeriesSource::Transfer,
            rows,
            exact_rho: None,
        })
    }

    /// Complex Newton on the excursion system at `z`, started from `w0`.
    fn solve_complex(
        &self,
        z: Complex64,
        w0: Complex64,
    ) -> Result<(Complex64, Complex64), NumericError> {
        let a = &self.adapted;
        let s = [z * a.weight(0), z * a.weight(1)];
        let me = [mu_e(a, 0), mu_e(a, 1)];
        let excursion = |k: usize, y: Complex64| -> (Complex64, Complex64) {
            let g = self.factors.green_complex(k, y);
            ((1.0 - 1.0 / g) / y - me[k], g)
        };
        let h = |w: Complex64| -> (Complex64, Complex64) {
            let ell0 = s[1] * me[1] + w;
            let y0 = s[0] / (1.0 - ell0);
            let (e0, g0) = excursion(0, y0);
            let w1 = s[0] * e0;
            let ell1 = s[0] * me[0] + w1;
            let y1 = s[1] / (1.0 - ell1);
            let (e1, _) = excursion(1, y1);
            (s[1] * e1 - w, g0 / (1.0 - ell0))
        };
        let mut w = w0;
        for _ in 0..60 {
            let (hv, g) = h(w);
            if hv.norm() <= 1e-15 * (1.0 + w.norm()) {
                return Ok((w, g));
            }
            let delta = 1e-7 * (1.0 + w.norm());
            let (hd, _) = h(w + delta);
            let slope = (hd - hv) / delta;
            w -= hv / slope;
        }
        Err(NumericError::NoConvergence {
            iterations: 60,
            residual: h(w).0.norm(),
        })
    }

    /// `G(e, g | r)` through the letters of `g`: the walk passes through
    /// every prefix, so `G(e, g) = G(e, e) prod F_k(e -> x | y_k)` over the
    /// letters `x` of `g`, each factor computed by a first-passage table.
    pub fn tube_green(
        &self,
        sol: &WSolution,
        g: &GroupElement,
        opts: &PassageOptions,
    ) -> Result<f64, NumericError> {
        let mut value = sol.green;
        for letter in g.letters() {
            value *= letter_passage(
                &self.adapted,
                sol,
                letter.factor as usize,
                &letter.elem,
                opts,
            )?;
        }
        Ok(value)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `F_k(x -> e | y_k)` on factor `k`.
pub fn letter_passage(
    adapted: &AdaptedSpec,
    sol: &WSolution,
    k: usize,
    x: &GroupElement,
    opts: &PassageOptions,
) -> Result<f64, NumericError> {
    let mu = adapted.factor(k);
    let e = mu.spec().identity();
    let table = first_passage(
        mu,
        sol.y[k],
        std::slice::from_ref(&e),
        &|_| false,
        std::slice::from_ref(x),
        opts,
    )?;
    Ok(table.get(x))
}
