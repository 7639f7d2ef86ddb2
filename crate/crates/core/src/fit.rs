//! Power-law exponent fits for return-probability sequences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::measures::ConvolutionSeries;

/// Slowly varying corrections `(ln n)^-kappa` that can occur.
pub const KAPPA_MODELS: [f64; 2] = [0.0, 0.5];

/// One least-squares model of `ln b = c - alpha ln(2n) - kappa ln ln(2n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub kappa: f64,
    pub alpha: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub kappa: f64,
    pub intercept: f64,
    pub window: (usize, usize),
    pub residual: f64,
    /// Residual of the runner-up divided by the selected one (`inf` when the
    /// selected model is exact).
    pub selection_score: f64,
    pub models: Vec<ModelFit>,
    pub samples: usize,
}

/// Options of [`fit_exponent`].
#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Index window `[n0, n1]`; `None` means `[max(N/16, 16), N]`.
    pub window: Option<(usize, usize)>,
    pub kappas: Vec<f64>,
    /// Number of log-spaced sample indices.
    pub samples: usize,
    /// Largest tolerated `defect / value` inside the window.
    pub max_defect_ratio: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            window: None,
            kappas: KAPPA_MODELS.to_vec(),
            samples: 400,
            max_defect_ratio: 0.1,
        }
    }
}

/// Fits `a_{2n} rho^{-2n} ~ C (2n)^-alpha (ln 2n)^-kappa` on a window of
/// even rows.
///
/// The rescaled sequence is replaced by its smallest non-increasing
/// majorant before fitting, and rows enter at their certified midpoint
/// `a_n + defect_n / 2`. Samples are log-spaced so that every scale carries
/// the same weight.
pub fn fit_exponent(
    series: &ConvolutionSeries,
    rho: f64,
    opts: &FitOptions,
) -> Result<FitResult, NumericError> {
    if !(rho > 0.0) {
        return Err(NumericError::Invalid(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let ln_rho = rho.ln();
    let evens: Vec<_> = series.even().filter(|r| r.n > 0).collect();
    if evens.len() < 8 {
        return Err(NumericError::InsufficientData(format!(
            "{} even rows",
            evens.len()
        )));
    }
    let last = evens.last().expect("non-empty").n;
    let (n0, n1) = opts.window.unwrap_or(((last / 16).max(16), last));
    let rows: Vec<_> = evens
        .into_iter()
        .filter(|r| r.n >= n0 && r.n <= n1)
        .collect();
    if rows.len() < 8 {
        return Err(NumericError::InsufficientData(format!(
            "window [{n0}, {n1}] holds {} even rows",
            rows.len()
        )));
    }
    let mut log_b = Vec::with_capacity(rows.len());
    for r in &rows {
        if r.a <= 0.0 || r.defect > opts.max_defect_ratio * r.a {
            return Err(NumericError::DefectDominates(r.n));
        }
        let mid = (r.a + 0.5 * r.defect).ln() + r.scale;
        log_b.push(mid - r.n as f64 * ln_rho);
    }
    // smallest non-increasing majorant
    for i in (0..log_b.len().saturating_sub(1)).rev() {
        if log_b[i] < log_b[i + 1] {
            log_b[i] = log_b[i + 1];
        }
    }
    let picks = log_spaced(rows.len(), opts.samples);
    if picks.len() < 3 {
        return Err(NumericError::InsufficientData(
            "fewer than three samples".into(),
        ));
    }
    let xs: Vec<f64> = picks.iter().map(|&i| (rows[i].n as f64).ln()).collect();
    let ys: Vec<f64> = picks.iter().map(|&i| log_b[i]).collect();

    let mut models = Vec::new();
    for &kappa in &opts.kappas {
        let y: Vec<f64> = ys
            .iter()
            .zip(&xs)
            .map(|(y, x)| y + kappa * x.ln())
            .collect();
        let (slope, intercept, rms) = line_fit(&xs, &y);
        models.push(ModelFit {
            kappa,
            alpha: -slope,
            intercept,
            residual: rms,
        });
    }
    // ties go to the earlier (smaller) kappa
    let best = models
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.residual.total_cmp(&b.1.residual).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one model");
    let chosen = models[best];
    let runner_up = models
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, m)| m.residual)
        .fold(f64::INFINITY, f64::min);
    let selection_score = if chosen.residual > 0.0 {
        runner_up / chosen.residual
    } else {
        f64::INFINITY
    };
    Ok(FitResult {
        alpha: chosen.alpha,
        kappa: chosen.kappa,
        intercept: chosen.intercept,
        window: (rows[0].n, rows[rows.len() - 1].n),
        residual: chosen.residual,
        selection_score,
        models,
        samples: picks.len(),
    })
}

/// Distinct indices in `0..len`, roughly geometric, always containing both
/// ends.
pub fn log_spaced(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if count >= len {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..count)
        .map(|j| {
            let t = j as f64 / (count - 1) as f64;
            ((len as f64).powf(t) - 1.0).round() as usize
        })
        .map(|i| i.min(len - 1))
        .collect();
    out.dedup();
    out
}

/// Least-squares line `y = slope x + intercept`; returns the RMS residual.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    (slope, intercept, (ss / n).sqrt())
}

/// Least squares for `y ~ X beta` by SVD; returns coefficients, their
/// standard errors and the RMS residual.
pub fn least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, f64), NumericError> {
    let (m, p) = x.shape();
    if m <= p {
        return Err(NumericError::InsufficientData(format!(
            "{m} points for {p} parameters"
        )));
    }
    // column scaling keeps the normal matrix well conditioned
    let scales: Vec<f64> = (0..p)
        .map(|j| x.column(j).amax().max(f64::MIN_POSITIVE))
        .collect();
    let mut xs = x.clone();
    for (j, s) in scales.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }
    let beta_s = xs
        .clone()
        .svd(true, true)
        .solve(y, 1e-13)
        .map_err(|e| NumericError::Invalid(format!("least squares failed: {e}")))?;
    let resid = y - &xs * &beta_s;
    let ss = resid.norm_squared();
    let sigma2 = ss / (m - p) as f64;
    let xtx_inv = (xs.transpose() * &xs)
        .try_inverse()
        .ok_or_else(|| NumericError::Invalid("singular design".into()))?;
    let beta = DVector::from_iterator(p, (0..p).map(|j| beta_s[j] / scales[j]));
    let se = DVector::from_iterator(
        p,
        (0..p).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt() / scales[j]),
    );
    Ok((beta, se, (ss / m as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{SeriesRow, SeriesSource};
    use crate::oracles::{binomial_z_series, synthetic_series};

    #[test]
    fn exact_power_law() {
        let s = synthetic_series(1.0, 1.5, 0.0, 20_000);
        let f = fit_exponent(&s, 1.0, &FitOptions::default()).unwrap();
        assert!((f.alpha - 1.5).abs() < 0.01, "{f:?}");
        assert_eq!(f.kappa, 0.0);
    }

    #[test]
    fn log_correction_is_selected() {
        let s = synthetic_series(1.0, 1.5, 0.5, 200_000);
        let opts = FitOptions {
            window: Some((2_000, 200_000)),
            ..FitOptions::default()
        };
        let f = fit_exponent(&s, 1.0, &opts).unwrap();
        assert_eq!(f.kappa, 0.5);
        assert!((f.alpha - 1.5).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn binomial_half() {
        let s = binomial_z_series(8192);
        let f = fit_exponent(&s, 1.0, &FitOptions::default()).unwrap();
        assert!((f.alpha - 0.5).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn constant_series_has_zero_exponent() {
        let s = synthetic_series(1.0, 0.0, 0.0, 1000);
        let f = fit_exponent(&s, 1.0, &FitOptions::default()).unwrap();
        assert!(f.alpha.abs() < 1e-12);
        assert_eq!(f.kappa, 0.0);
    }

    #[test]
    fn scale_invariance() {
        let s = synthetic_series(0.9, 1.5, 0.0, 4000);
        let mut t = s.clone();
        for r in &mut t.rows {
            r.a *= 7.25;
        }
        let o = FitOptions::default();
        let (a, b) = (
            fit_exponent(&s, 0.9, &o).unwrap(),
            fit_exponent(&t, 0.9, &o).unwrap(),
        );
        assert!((a.alpha - b.alpha).abs() < 1e-12);
        assert_eq!(a.kappa, b.kappa);
        assert!((b.intercept - a.intercept - 7.25f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn defect_guard() {
        let mut s = synthetic_series(1.0, 1.0, 0.0, 200);
        for r in &mut s.rows {
            r.defect = r.a;
        }
        assert!(matches!(
            fit_exponent(&s, 1.0, &FitOptions::default()),
            Err(NumericError::DefectDominates(_))
        ));
        let short = ConvolutionSeries::from_values(SeriesSource::Synthetic, &[1.0, 0.0, 0.5]);
        assert!(fit_exponent(&short, 1.0, &FitOptions::default()).is_err());
        let _ = SeriesRow::new(0, 1.0, 0.0);
    }

    #[test]
    fn spacing() {
        let p = log_spaced(1000, 10);
        assert_eq!(p[0], 0);
        assert_eq!(*p.last().unwrap(), 999);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }
}
