use std::fmt::Write as _;
use std::path::Path;

use rwalk_core::adapted::AdaptedModel;
use rwalk_core::classify::{self, Classification, ClassifyOptions, Regime};
use rwalk_core::green::{estimate_spectral_radius, green_derivative, PassageOptions};
use rwalk_core::measures::{
    adapted_measure, check_symmetric, is_amenable, power_sequence_with, PowerConfig, SeriesSource,
};
use rwalk_core::parabolic::{
    build_section, displacement_and_eigenpair, first_return_kernel, induced_powers,
};
use rwalk_core::{oracles, ConvolutionSeries, NumericError, SparseMeasure};

use crate::cache::Cache;
use crate::config::{RunConfig, SeriesChoice, MIN_CLASSIFY_STEPS};
use crate::table::{self, num};
use crate::CliError;

/// Text for stdout and the exit status of a finished command.
#[derive(Debug)]
pub struct Report {
    pub stdout: String,
    pub code: u8,
}

impl Report {
    fn ok(stdout: String) -> Self {
        Report { stdout, code: 0 }
    }
}

/// Which walk a series belongs to.
pub enum Walk<'a> {
    Measure(SparseMeasure),
    Model(&'a AdaptedModel),
}

/// Return probabilities up to `steps`, read from or written to the cache.
///
/// Fresh rows are normalized through the CSV form, so cached and uncached
/// runs feed identical numbers to every later stage.
pub fn series_for(
    cfg: &RunConfig,
    walk: &Walk,
    steps: usize,
) -> Result<ConvolutionSeries, CliError> {
    let mu = match walk {
        Walk::Measure(mu) => mu.clone(),
        Walk::Model(m) => adapted_measure(&cfg.group, &m.adapted)?,
    };
    let eps = match cfg.series {
        SeriesChoice::Engine => cfg.prune_eps,
        SeriesChoice::Transfer => 0.0,
    };
    let mut series = ConvolutionSeries {
        spec: Some(mu.spec().clone()),
        measure_id: format!("{:016x}", mu.fingerprint()),
        eps,
        source: match cfg.series {
            SeriesChoice::Engine => SeriesSource::Engine,
            SeriesChoice::Transfer => SeriesSource::Transfer,
        },
        rows: Vec::new(),
        exact_rho: match cfg.series {
            SeriesChoice::Engine => (check_symmetric(&mu) && is_amenable(mu.spec())).then_some(1.0),
            SeriesChoice::Transfer => None,
        },
    };
    let key = format!(
        "series={:?}\neps={:e}\n{}",
        cfg.series,
        eps,
        mu.canonical_text()
    );
    let cache = cfg.cache_dir.as_deref().map(|d| Cache::new(d, &key));
    if let Some(c) = &cache {
        let rows = c.load();
        if rows.len() > steps {
            series.rows = rows[..=steps].to_vec();
            return Ok(series);
        }
    }
    let fresh = match (cfg.series, walk) {
        (SeriesChoice::Engine, _) => {
            let mut pc = PowerConfig::new(steps, eps);
            if let Some(b) = cfg.support_budget {
                pc.max_support = b;
            }
            power_sequence_with(&mu, &pc)?.0
        }
        (SeriesChoice::Transfer, Walk::Model(m)) => m.transfer_series(steps)?,
        (SeriesChoice::Transfer, Walk::Measure(_)) => {
            let adapted = cfg.adapted()?.ok_or_else(|| {
                CliError::Config("the transfer series needs an adapted measure".into())
            })?;
            AdaptedModel::new(adapted)?.transfer_series(steps)?
        }
    };
    series.rows = fresh
        .rows
        .iter()
        .map(|r| table::parse_row(table::format_row(r).trim_end()).expect("formatted row parses"))
        .collect();
    if let Some(c) = &cache {
        c.store(&series.rows)?;
    }
    Ok(series)
}

fn write_or_return(out: Option<&Path>, text: String) -> Result<Report, CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|source| CliError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            Ok(Report::ok(String::new()))
        }
        None => Ok(Report::ok(text)),
    }
}

pub fn convolve(cfg: &RunConfig, out: Option<&Path>) -> Result<Report, CliError> {
    let series = series_for(cfg, &Walk::Measure(cfg.measure()?), cfg.steps)?;
    write_or_return(out, table::series_csv(&series))
}

pub fn green(cfg: &RunConfig, r: f64, k: usize) -> Result<Report, CliError> {
    let series = series_for(cfg, &Walk::Measure(cfg.measure()?), cfg.steps)?;
    let g = green_derivative(&series, r, k)?;
    let rho = if g.rho.is_rigorous() {
        "exact"
    } else {
        "heuristic"
    };
    Ok(Report::ok(format!(
        "r,k,value,tail_bound,defect_bound,truncation,rho,rho_bound\n{},{},{},{},{},{},{},{}\n",
        num(g.r),
        g.k,
        num(g.value),
        num(g.tail_bound),
        num(g.defect_bound),
        g.truncation,
        num(g.rho.value()),
        rho
    )))
}

pub fn spectral_radius(cfg: &RunConfig) -> Result<Report, CliError> {
    let series = series_for(cfg, &Walk::Measure(cfg.measure()?), cfg.steps)?;
    let est = estimate_spectral_radius(&series)?;
    let mut s = String::new();
    let _ = writeln!(s, "rho_lower,{}", num(est.rho_lower));
    let _ = writeln!(s, "rho,{}", num(est.rho_extrapolated));
    let _ = writeln!(s, "rho_up,{}", num(est.rho_up));
    let _ = writeln!(s, "R,{}", num(est.radius));
    let _ = writeln!(s, "exact,{}", est.exact);
    let _ = writeln!(s, "alpha,{}", num(est.alpha));
    let _ = writeln!(s, "fit_residual,{}", num(est.fit_residual));
    let _ = writeln!(s, "window,{}..{}", est.window.0, est.window.1);
    if let Some(adapted) = cfg.adapted()? {
        let model = AdaptedModel::new(adapted)?;
        let _ = writeln!(s, "R_excursion,{}", num(model.radius));
    }
    Ok(Report::ok(s))
}

/// Where to evaluate a kernel: absolute `r` or a fraction of `R`.
#[derive(Clone, Copy, Debug)]
pub enum RadiusArg {
    Absolute(f64),
    Fraction(f64),
}

pub fn first_return(
    cfg: &RunConfig,
    factor: usize,
    eta: f64,
    at: RadiusArg,
    induced: usize,
) -> Result<Report, CliError> {
    let adapted = cfg
        .adapted()?
        .ok_or_else(|| CliError::Config("first-return needs an adapted measure".into()))?;
    if factor > 1 {
        return Err(CliError::Config(format!(
            "factor must be 0 or 1, got {factor}"
        )));
    }
    let model = AdaptedModel::new(adapted)?;
    let r = match at {
        RadiusArg::Absolute(r) => r,
        RadiusArg::Fraction(f) => f * model.radius,
    };
    let section = build_section(&cfg.group, factor, eta)?;
    let kernel = first_return_kernel(&model, r, &section, &PassageOptions::default())?;
    let disp = displacement_and_eigenpair(&kernel)?;
    let mut s = String::new();
    let _ = writeln!(s, "r,{}", num(r));
    let _ = writeln!(s, "R,{}", num(model.radius));
    let _ = writeln!(s, "factor,{factor}");
    let _ = writeln!(s, "eta,{}", num(eta));
    let _ = writeln!(s, "section_size,{}", section.len());
    let _ = writeln!(s, "kernel_entries,{}", kernel.entries.len());
    let _ = writeln!(s, "kernel_residual,{}", num(kernel.residual));
    let _ = writeln!(s, "symmetry_residual,{}", num(kernel.symmetry_residual()));
    for (i, rep) in section.reps.iter().enumerate() {
        let row: Vec<String> = disp.f.row(i).iter().map(|&x| num(x)).collect();
        let _ = writeln!(s, "F[{rep}],{}", row.join(","));
    }
    let _ = writeln!(s, "lambda,{}", num(disp.lambda));
    let c: Vec<String> = disp.c.iter().map(|&x| num(x)).collect();
    let _ = writeln!(s, "c,{}", c.join(","));
    let _ = writeln!(s, "eigen_residual,{}", num(disp.eigen_residual));
    if induced > 0 {
        let ind = induced_powers(&kernel, induced)?;
        match &ind.rho {
            Ok(est) => {
                let _ = writeln!(s, "rho_induced,{}", num(est.rho_extrapolated));
            }
            Err(e) => {
                let _ = writeln!(s, "rho_induced,error: {e}");
            }
        }
    }
    Ok(Report::ok(s))
}

fn classify_options(cfg: &RunConfig) -> ClassifyOptions {
    ClassifyOptions {
        tol_deg: cfg.tolerances.tol_deg,
        divergence_margin: cfg.tolerances.divergence_margin,
        r_grid: cfg.r_grid.clone(),
        kernel_rows: cfg.kernel_rows,
    }
}

/// Either a classification or the reason it could not be concluded.
enum Outcome {
    Done(Box<Classification>),
    Inconclusive(String),
}

fn run_classification(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let adapted = cfg.adapted()?.ok_or_else(|| {
        CliError::Config("classify needs an adapted measure on a free product".into())
    })?;
    if cfg.steps < MIN_CLASSIFY_STEPS {
        return Ok(Outcome::Inconclusive(format!(
            "{} steps is below the minimum of {MIN_CLASSIFY_STEPS}",
            cfg.steps
        )));
    }
    let model = classify::prepare(&adapted)?;
    let series = series_for(cfg, &Walk::Model(&model), cfg.steps)?;
    match classify::classify(&model, &series, &classify_options(cfg)) {
        Ok(c) => Ok(Outcome::Done(Box::new(c))),
        Err(e @ (NumericError::InsufficientData(_) | NumericError::DefectDominates(_))) => {
            Ok(Outcome::Inconclusive(e.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("inf".to_string(), |x| format!("{x:.6e}"))
}

pub fn summary(cfg: &RunConfig, c: &Classification) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "group        {}", cfg.group);
    let _ = writeln!(s, "steps        {} ({:?})", c.n_max, cfg.series);
    let _ = writeln!(s, "lazified     {}", c.lazified);
    let _ = writeln!(s, "R            {:.12}", c.radius_model);
    let _ = writeln!(s, "R (series)   {:.12}", c.rho.radius);
    for p in &c.parabolics {
        let _ = writeln!(
            s,
            "factor {}     d_H = {}, rho_H(R) = {:.9} (+- {:.1e}), degenerate: {} [at {:.0e}: {}, at {:.0e}: {}]",
            p.factor,
            p.d_h,
            p.rho_h,
            p.rho_uncertainty,
            p.degenerate,
            p.sensitivity[0].0,
            p.sensitivity[0].1,
            p.sensitivity[1].0,
            p.sensitivity[1].1
        );
        for (r, vals) in &p.i_values {
            let _ = writeln!(
                s,
                "  I_H(r = {:.6}): {} {} {}",
                r,
                opt(vals[0]),
                opt(vals[1]),
                opt(vals[2])
            );
        }
    }
    let _ = writeln!(
        s,
        "fit          alpha = {:.4}, kappa = {}, window [{}, {}], residual {:.2e}",
        c.fit.alpha, c.fit.kappa, c.fit.window.0, c.fit.window.1, c.fit.residual
    );
    let _ = writeln!(s, "divergence   {:?}", c.divergence);
    let _ = writeln!(
        s,
        "J2(R)        {}",
        if c.decision.j2_finite {
            "finite"
        } else {
            "infinite"
        }
    );
    let _ = writeln!(
        s,
        "rank         {}",
        c.decision
            .rank
            .map_or("none".to_string(), |d| d.to_string())
    );
    let _ = writeln!(s, "regime       {}", c.regime().name());
    if let Some((a, k)) = c.decision.predicted {
        let _ = writeln!(s, "predicted    alpha = {a:.4}, kappa = {k}");
    }
    s
}

fn inconclusive(reason: &str) -> Report {
    Report {
        stdout: format!("regime       inconclusive\nreason       {reason}\n"),
        code: 3,
    }
}

pub fn classify(cfg: &RunConfig, json: Option<&Path>) -> Result<Report, CliError> {
    let c = match run_classification(cfg)? {
        Outcome::Done(c) => c,
        Outcome::Inconclusive(reason) => return Ok(inconclusive(&reason)),
    };
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&*c).expect("classification serializes");
        std::fs::write(path, text + "\n").map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let code = if c.regime() == Regime::Inconclusive {
        3
    } else {
        0
    };
    Ok(Report {
        stdout: summary(cfg, &c),
        code,
    })
}

/// Exit status 0 on PASS and 1 on FAIL.
pub fn verify_llt(cfg: &RunConfig) -> Result<Report, CliError> {
    let c = match run_classification(cfg)? {
        Outcome::Done(c) => c,
        Outcome::Inconclusive(reason) => return Ok(inconclusive(&reason)),
    };
    let report = classify::verify_llt(&c.decision, &c.fit, cfg.tolerances.tol_alpha);
    let code = match (c.regime(), report.pass) {
        (Regime::Inconclusive, _) => 3,
        (_, true) => 0,
        (_, false) => 1,
    };
    Ok(Report {
        stdout: format!("{}\n{}", summary(cfg, &c), report.table),
        code,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    BinomialZ,
    RadialFree,
    Synthetic,
    Dense,
}

#[derive(Clone, Debug)]
pub struct OracleArgs {
    pub kind: OracleKind,
    pub steps: usize,
    pub rank: u32,
    pub rho: f64,
    pub alpha: f64,
    pub kappa: f64,
}

/// Oracle rows as `n,a_n,defect,ln_a_n`; the last column stays accurate
/// where `a_n` underflows.
pub fn oracle(
    args: &OracleArgs,
    cfg: Option<&RunConfig>,
    out: Option<&Path>,
) -> Result<Report, CliError> {
    let series = match args.kind {
        OracleKind::BinomialZ => oracles::binomial_z_series(args.steps),
        OracleKind::RadialFree => {
            if args.rank < 1 {
                return Err(CliError::Config("rank must be >= 1".into()));
            }
            oracles::radial_chain_free_group(args.rank, args.steps)
        }
        OracleKind::Synthetic => {
            if !(args.rho > 0.0) {
                return Err(CliError::Config("rho must be positive".into()));
            }
            oracles::synthetic_series(args.rho, args.alpha, args.kappa, args.steps)
        }
        OracleKind::Dense => {
            let cfg =
                cfg.ok_or_else(|| CliError::Config("the dense oracle needs --config".into()))?;
            oracles::dense_convolution(&cfg.measure()?, args.steps)?
        }
    };
    let mut text = String::from("n,a_n,defect,ln_a_n\n");
    for r in &series.rows {
        let line = table::format_row(r);
        let _ = writeln!(text, "{},{}", line.trim_end(), num(r.ln_value()));
    }
    write_or_return(out, text)
}
