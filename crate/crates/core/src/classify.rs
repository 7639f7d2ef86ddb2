//! Local limit classification of adapted walks on free products.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapted::{AdaptedModel, WSolution};
use crate::error::NumericError;
use crate::fit::{fit_exponent, FitOptions, FitResult};
use crate::green::{
    derivative_sum_i, estimate_spectral_radius, green_derivative, GreenEvaluation,
    SpectralRadiusEstimate,
};
use crate::measures::{AdaptedSpec, ConvolutionSeries};
use crate::parabolic::{build_section, closed_form_kernel, induced_powers, FirstReturnKernel};

/// Default tolerance on `|rho_H(R) - 1|` for calling a factor degenerate.
pub const TOL_DEG: f64 = 1e-3;
/// Default margin around the exponent 2 in the divergence test.
pub const DIVERGENCE_MARGIN: f64 = 0.1;
/// Default tolerance of [`verify_llt`] on the exponent.
pub const TOL_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Divergent,
    Convergent,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Convergent,
    SpectrallyPositiveRecurrent,
    CriticalD5,
    CriticalD6,
    Inconclusive,
    /// The verdicts contradict each other (a degenerate factor of dimension
    /// at most 4, or a convergent walk without degenerate factor).
    Inconsistent,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Convergent => "convergent",
            Regime::SpectrallyPositiveRecurrent => "spectrally_positive_recurrent",
            Regime::CriticalD5 => "critical_d5",
            Regime::CriticalD6 => "critical_d6",
            Regime::Inconclusive => "inconclusive",
            Regime::Inconsistent => "inconsistent",
        }
    }
}

/// Outcome of the decision table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub regime: Regime,
    /// Rank of spectral degeneracy; `None` stands for infinity.
    pub rank: Option<u32>,
    /// Predicted `(alpha, kappa)` in `p_n(e, e) ~ R^-n n^-alpha (ln n)^-kappa`.
    pub predicted: Option<(f64, f64)>,
    /// Whether the second Green moment is finite at `R`.
    pub j2_finite: bool,
}

/// The decision table, a pure function of the divergence verdict and the
/// homogeneous dimensions of the degenerate factors.
pub fn decide(divergence: Divergence, degenerate_dims: &[u32]) -> Decision {
    let rank = degenerate_dims.iter().copied().min();
    let j2_finite = degenerate_dims.iter().all(|&d| d >= 7);
    let (regime, predicted) = match (rank, divergence) {
        (Some(d), _) if d <= 4 => (Regime::Inconsistent, None),
        (_, Divergence::Inconclusive) => (Regime::Inconclusive, None),
        (None, Divergence::Divergent) => (Regime::SpectrallyPositiveRecurrent, Some((1.5, 0.0))),
        (Some(5), Divergence::Divergent) => (Regime::CriticalD5, Some((5.0 / 3.0, 0.0))),
        (Some(6), Divergence::Divergent) => (Regime::CriticalD6, Some((1.5, 0.5))),
        (Some(_), Divergence::Divergent) => (Regime::SpectrallyPositiveRecurrent, Some((1.5, 0.0))),
        (Some(d), Divergence::Convergent) => (Regime::Convergent, Some((d as f64 / 2.0, 0.0))),
        (None, Divergence::Convergent) => (Regime::Inconsistent, None),
    };
    Decision {
        regime,
        rank,
        predicted,
        j2_finite,
    }
}

/// Data on one free factor `H` at the radius of convergence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParabolicReport {
    pub factor: usize,
    pub d_h: u32,
    pub rho_h: f64,
    pub rho_uncertainty: f64,
    pub degenerate: bool,
    /// Degeneracy verdicts at `10 tol` and `0.1 tol`.
    pub sensitivity: [(f64, bool); 2],
    /// `(r, [I^(1), I^(2), I^(3)])`; `None` where the sum diverges.
    pub i_values: Vec<(f64, [Option<f64>; 3])>,
}

/// Knobs of [`classify`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub tol_deg: f64,
    pub divergence_margin: f64,
    /// Fractions of `R` at which `I_H^(k)` is tabulated.
    pub r_grid: Vec<f64>,
    /// Rows of the induced kernel series.
    pub kernel_rows: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            tol_deg: TOL_DEG,
            divergence_margin: DIVERGENCE_MARGIN,
            r_grid: vec![0.5, 0.9, 1.0],
            kernel_rows: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub decision: Decision,
    pub divergence: Divergence,
    /// Fit of `a_n R^n` behind the divergence verdict.
    pub fit: FitResult,
    pub rho: SpectralRadiusEstimate,
    /// `R` from the excursion system (largest solvable `r`).
    pub radius_model: f64,
    pub parabolics: Vec<ParabolicReport>,
    pub n_max: usize,
    pub lazified: bool,
}

impl Classification {
    pub fn regime(&self) -> Regime {
        self.decision.regime
    }
}

/// The classification pipeline for an adapted walk: spectral radius of the
/// series, `rho_H(R)` and degeneracy per factor, the divergence verdict from
/// the fitted decay of `a_n R^n` (`I^(1)(R)` is finite iff it exceeds 2), the
/// rank arithmetic for `J^(2)(R)`, then the decision table.
///
/// `series` must be the return series of `model`'s walk.
pub fn classify(
    model: &AdaptedModel,
    series: &ConvolutionSeries,
    opts: &ClassifyOptions,
) -> Result<Classification, NumericError> {
    let rho = estimate_spectral_radius(series)?;
    // the excursion system pins R far more sharply than the extrapolation,
    // and an error of 1e-5 in rho already tilts the exponent at n ~ 1e3
    let rho_fit = if rho.exact {
        rho.rho_extrapolated
    } else {
        1.0 / model.radius
    };
    let fit = fit_exponent(series, rho_fit, &FitOptions::default())?;
    let divergence = if fit.alpha < 2.0 - opts.divergence_margin {
        Divergence::Divergent
    } else if fit.alpha > 2.0 + opts.divergence_margin {
        Divergence::Convergent
    } else {
        Divergence::Inconclusive
    };
    let big_r = model.radius;
    let r_series = rho.radius.min(big_r);
    let at_r = model.solve(big_r)?;
    let at_series = model.solve(r_series)?;
    let mut parabolics = Vec::with_capacity(2);
    for k in 0..2 {
        let rho_h = at_r.rho_h(&model.adapted, k);
        let rho_uncertainty = (rho_h - at_series.rho_h(&model.adapted, k)).abs();
        let gap = (rho_h - 1.0).abs();
        let d_h = model.adapted.factor(k).spec().homogeneous_dimension()?;
        let mut i_values = Vec::with_capacity(opts.r_grid.len());
        for &frac in &opts.r_grid {
            let sol = model.solve(frac * big_r)?;
            let kernel = eta_zero_kernel(model, &sol, k)?;
            let induced = induced_powers(&kernel, opts.kernel_rows)?;
            let mut vals = [None; 3];
            for (slot, order) in vals.iter_mut().zip(1..=3) {
                *slot = finite_value(derivative_sum_i(&induced.series, 1.0, order));
            }
            i_values.push((frac * big_r, vals));
        }
        parabolics.push(ParabolicReport {
            factor: k,
            d_h,
            rho_h,
            rho_uncertainty,
            degenerate: gap <= opts.tol_deg,
            sensitivity: [
                (10.0 * opts.tol_deg, gap <= 10.0 * opts.tol_deg),
                (0.1 * opts.tol_deg, gap <= 0.1 * opts.tol_deg),
            ],
            i_values,
        });
    }
    let dims: Vec<u32> = parabolics
        .iter()
        .filter(|p| p.degenerate)
        .map(|p| p.d_h)
        .collect();
    Ok(Classification {
        decision: decide(divergence, &dims),
        divergence,
        fit,
        rho,
        radius_model: big_r,
        parabolics,
        n_max: series.max_n(),
        lazified: model.adapted.is_lazy(),
    })
}

fn finite_value(e: Result<GreenEvaluation, NumericError>) -> Option<f64> {
    match e {
        Ok(g) if g.tail_bound.is_finite() => Some(g.value),
        _ => None,
    }
}

/// The `eta = 0` kernel to factor `k` in closed form, wrapped as a
/// [`FirstReturnKernel`].
pub fn eta_zero_kernel(
    model: &AdaptedModel,
    sol: &WSolution,
    k: usize,
) -> Result<FirstReturnKernel, NumericError> {
    let section = build_section(&model.adapted.spec(), k, 0.0)?;
    Ok(FirstReturnKernel {
        r: sol.r,
        entries: closed_form_kernel(&model.adapted, sol, k),
        section,
        residual: sol.residual,
        lazy: model.adapted.is_lazy(),
        solution: sol.clone(),
    })
}

/// Side-by-side comparison of fitted and predicted exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LltReport {
    pub pass: bool,
    pub regime: Regime,
    pub alpha_fit: f64,
    pub kappa_fit: f64,
    pub alpha_pred: Option<f64>,
    pub kappa_pred: Option<f64>,
    pub tol_alpha: f64,
    pub table: String,
}

/// PASS iff `|alpha_fit - alpha_pred| <= tol_alpha` and the selected `kappa`
/// equals the predicted one.
pub fn verify_llt(decision: &Decision, fit: &FitResult, tol_alpha: f64) -> LltReport {
    let (alpha_pred, kappa_pred) = match decision.predicted {
        Some((a, k)) => (Some(a), Some(k)),
        None => (None, None),
    };
    let alpha_ok = alpha_pred.is_some_and(|a| (fit.alpha - a).abs() <= tol_alpha);
    let kappa_ok = kappa_pred.is_some_and(|k| k == fit.kappa);
    let pass = alpha_ok && kappa_ok;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut table = String::new();
    let _ = writeln!(table, "regime   {}", decision.regime.name());
    let _ = writeln!(table, "         fitted    predicted  ok");
    let _ = writeln!(
        table,
        "alpha    {:<9.4} {:<10} {}",
        fit.alpha,
        show(alpha_pred),
        if alpha_ok { "yes" } else { "no" }
    );
    let _ = writeln!(
        table,
        "kappa    {:<9.4} {:<10} {}",
        fit.kappa,
        show(kappa_pred),
        if kappa_ok { "yes" } else { "no" }
    );
    if !kappa_ok {
        for m in &fit.models {
            let _ = writeln!(
                table,
                "  model kappa={:.1}: alpha={:.4} residual={:.3e}",
                m.kappa, m.alpha, m.residual
            );
        }
    }
    let _ = writeln!(table, "verdict  {}", if pass { "PASS" } else { "FAIL" });
    LltReport {
        pass,
        regime: decision.regime,
        alpha_fit: fit.alpha,
        kappa_fit: fit.kappa,
        alpha_pred,
        kappa_pred,
        tol_alpha,
        table,
    }
}

/// One row of [`fundamental_equation_residual`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundamentalRow {
    pub r: f64,
    pub i1: f64,
    pub i2: f64,
    pub j2: f64,
    /// `I^(2) / (J^(2) (I^(1))^3)`.
    pub ratio: f64,
    /// Relative error bar propagated from the tails.
    pub rel_error: f64,
}

/// Tabulates `I^(2)(r) / (J^(2)(r) I^(1)(r)^3)` with `J^(2) = I_{H0}^(2) +
/// I_{H1}^(2)`, the kernel sums at `t = 1`.
pub fn fundamental_equation_residual(
    model: &AdaptedModel,
    series: &ConvolutionSeries,
    grid: &[f64],
    kernel_rows: usize,
) -> Result<Vec<FundamentalRow>, NumericError> {
    grid.iter()
        .map(|&r| {
            let i1 = derivative_sum_i(series, r, 1)?;
            let i2 = derivative_sum_i(series, r, 2)?;
            let sol = model.solve(r)?;
            let mut j2 = 0.0;
            let mut j2_unc = 0.0;
            for k in 0..2 {
                let kernel = eta_zero_kernel(model, &sol, k)?;
                let induced = induced_powers(&kernel, kernel_rows)?;
                let v = derivative_sum_i(&induced.series, 1.0, 2)?;
                j2 += v.value;
                j2_unc += v.uncertainty();
            }
            let ratio = i2.value / (j2 * i1.value.powi(3));
            let rel_error =
                i2.uncertainty() / i2.value + j2_unc / j2 + 3.0 * i1.uncertainty() / i1.value;
            Ok(FundamentalRow {
                r,
                i1: i1.value,
                i2: i2.value,
                j2,
                ratio,
                rel_error,
            })
        })
        .collect()
}

/// `G_mu(e, e | s)` from the series of the lazy walk `(mu + delta) / 2`,
/// through `G_mu(s) = G~(2s / (1 + s)) / (1 + s)`.
pub fn delazify_series(lazy: &ConvolutionSeries, s: f64) -> Result<GreenEvaluation, NumericError> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(NumericError::OutOfRange(format!("s = {s}")));
    }
    let r = 2.0 * s / (1.0 + s);
    let g = green_derivative(lazy, r, 0)?;
    let scale = 1.0 / (1.0 + s);
    Ok(GreenEvaluation {
        r: s,
        value: g.value * scale,
        tail_bound: g.tail_bound * scale,
        defect_bound: g.defect_bound * scale,
        ..g
    })
}

/// `G~(r) = 2 / (2 - r) G(r / (2 - r))` from the series of `mu` itself.
pub fn lazy_green_from_plain(
    plain: &ConvolutionSeries,
    r: f64,
) -> Result<GreenEvaluation, NumericError> {
    if !(0.0..2.0).contains(&r) {
        return Err(NumericError::OutOfRange(format!("r = {r}")));
    }
    let g = green_derivative(plain, r / (2.0 - r), 0)?;
    let scale = 2.0 / (2.0 - r);
    Ok(GreenEvaluation {
        r,
        value: g.value * scale,
        tail_bound: g.tail_bound * scale,
        defect_bound: g.defect_bound * scale,
        ..g
    })
}

/// Builds the model and picks the measure actually classified: the walk is
/// lazified first when it does not charge the identity.
pub fn prepare(adapted: &AdaptedSpec) -> Result<AdaptedModel, NumericError> {
    let walk = if adapted.is_lazy() {
        adapted.clone()
    } else {
        adapted.lazified()
    };
    AdaptedModel::new(walk)
}
