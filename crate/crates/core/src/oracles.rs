//! Independent ground truth: closed forms, dense convolution, the radial
//! chain of the free group and synthetic power-law series.

use crate::error::MeasureError;
use crate::groups::{GroupElement, GroupSpec};
use crate::measures::{ConvolutionSeries, SeriesRow, SeriesSource, SparseMeasure};

/// Series produced by an oracle.
pub type OracleSeries = ConvolutionSeries;

/// Dense arrays above this many cells are refused.
pub const DENSE_CELL_BUDGET: usize = 50_000_000;

// Stirling-series coefficients B_2k / (2k (2k-1)), k = 1..5
const STIRLING: [f64; 5] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
];

/// `ln( C(2n, n) 4^-n )`.
pub fn ln_central_binomial_ratio(n: u64) -> f64 {
    if n < 24 {
        let mut v = 1.0f64;
        for j in 1..=n {
            v *= (2 * j - 1) as f64 / (2 * j) as f64;
        }
        return v.ln();
    }
    // ln Gamma(2n+1) - 2 ln Gamma(n+1) - 2n ln 2
    //   = -ln(pi n)/2 + sum_k c_k n^(1-2k) (2^(1-2k) - 2)
    let x = n as f64;
    let mut corr = 0.0;
    let mut pow = x;
    for (k, c) in STIRLING.iter().enumerate() {
        let odd = (2 * k + 1) as i32;
        corr += c / pow * (2f64.powi(-odd) - 2.0);
        pow *= x * x;
    }
    -0.5 * (std::f64::consts::PI * x).ln() + corr
}

/// Return probability of the simple random walk on `Z` after `2n` steps,
/// `C(2n, n) 4^-n`.
pub fn binomial_z_srw(n: u64) -> f64 {
    ln_central_binomial_ratio(n).exp()
}

/// Rows `0..=n_max` of the simple random walk on `Z`; odd rows vanish.
pub fn binomial_z_series(n_max: usize) -> OracleSeries {
    let rows = (0..=n_max)
        .map(|n| {
            let a = if n % 2 == 1 {
                0.0
            } else {
                binomial_z_srw(n as u64 / 2)
            };
            SeriesRow::new(n, a, 0.0)
        })
        .collect();
    ConvolutionSeries {
        spec: Some(GroupSpec::lattice(1)),
        measure_id: "binomial_z".into(),
        eps: 0.0,
        source: SeriesSource::BinomialZ,
        rows,
        exact_rho: Some(1.0),
    }
}

/// Exact convolution powers on a dense array, for lattices of rank at most
/// three and for cyclic groups.
pub fn dense_convolution(mu: &SparseMeasure, n_max: usize) -> Result<OracleSeries, MeasureError> {
    let spec = mu.spec().clone();
    let values = match &spec {
        GroupSpec::Cyclic { m } => {
            let m = *m as usize;
            if m > DENSE_CELL_BUDGET {
                return Err(MeasureError::Resource {
                    budget: DENSE_CELL_BUDGET,
                    rows: 0,
                });
            }
            let steps: Vec<(usize, f64)> = mu
                .iter()
                .map(|(g, w)| match g {
                    GroupElement::Cyclic(k) => (*k as usize, w),
                    _ => unreachable!("measure conforms to its spec"),
                })
                .collect();
            let mut cur = vec![0.0; m];
            cur[0] = 1.0;
            let mut out = vec![1.0];
            for _ in 0..n_max {
                let mut next = vec![0.0; m];
                for (x, &p) in cur.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for &(s, w) in &steps {
                        next[(x + s) % m] += p * w;
                    }
                }
                cur = next;
                out.push(cur[0]);
            }
            out
        }
        GroupSpec::Lattice { d } if *d <= 3 => dense_lattice(mu, *d, n_max)?,
        _ => {
            return Err(MeasureError::Invalid(format!(
                "dense oracle supports Z^d with d <= 3 and cyclic groups, not {spec}"
            )))
        }
    };
    Ok(ConvolutionSeries {
        spec: Some(spec),
        measure_id: format!("{:016x}", mu.fingerprint()),
        eps: 0.0,
        source: SeriesSource::DenseConvolution,
        rows: values
            .into_iter()
            .enumerate()
            .map(|(n, a)| SeriesRow::new(n, a, 0.0))
            .collect(),
        exact_rho: None,
    })
}

fn dense_lattice(mu: &SparseMeasure, d: usize, n_max: usize) -> Result<Vec<f64>, MeasureError> {
    let reach = mu
        .iter()
        .map(|(g, _)| match g {
            GroupElement::Lattice(c) => c
                .iter()
                .map(|v| v.unsigned_abs() as usize)
                .max()
                .unwrap_or(0),
            _ => unreachable!("measure conforms to its spec"),
        })
        .max()
        .unwrap_or(0);
    let half = reach * n_max;
    let side = 2 * half + 1;
    let cells = side.checked_pow(d as u32).unwrap_or(usize::MAX);
    if cells > DENSE_CELL_BUDGET {
        return Err(MeasureError::Resource {
            budget: DENSE_CELL_BUDGET,
            rows: 0,
        });
    }
    let stride: Vec<usize> = (0..d).map(|i| side.pow(i as u32)).collect();
    let offset = |c: &[i32]| -> isize {
        c.iter()
            .zip(&stride)
            .map(|(&v, &s)| v as isize * s as isize)
            .sum()
    };
    let steps: Vec<(isize, f64)> = mu
        .iter()
        .map(|(g, w)| match g {
            GroupElement::Lattice(c) => (offset(c), w),
            _ => unreachable!("measure conforms to its spec"),
        })
        .collect();
    let origin = offset(&vec![half as i32; d]) as usize;
    let mut cur = vec![0.0; cells];
    cur[origin] = 1.0;
    let mut out = vec![1.0];
    for _ in 0..n_max {
        let mut next = vec![0.0; cells];
        for (x, &p) in cur.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &(s, w) in &steps {
                // positions stay inside the box by the choice of `half`
                next[(x as isize + s) as usize] += p * w;
            }
        }
        cur = next;
        out.push(cur[origin]);
    }
    Ok(out)
}

/// Distance-to-origin distribution of the simple random walk on the free
/// group with `k` generators after `n` steps (plain DP, for conservation
/// checks and short horizons).
pub fn radial_distribution(k: u32, n: usize) -> Vec<f64> {
    let q = 2.0 * k as f64;
    let up = (q - 1.0) / q;
    let down = 1.0 / q;
    let mut p = vec![0.0; n + 2];
    p[0] = 1.0;
    for _ in 0..n {
        let mut next = vec![0.0; n + 2];
        next[1] += p[0];
        for j in 1..=n {
            next[j + 1] += p[j] * up;
            next[j - 1] += p[j] * down;
        }
        p = next;
    }
    p
}

/// Return probabilities of the simple random walk on the free group with
/// `k >= 2` generators, from the birth-death chain of the distance to the
/// origin.
///
/// The DP runs on `p_j(n) (2k-1)^(-j/2)`, which turns the chain into a
/// symmetric one with steps of weight `sqrt(2k-1)/(2k)`, and renormalizes
/// every step into the per-row `scale`; this keeps `n = 10^5` and beyond
/// representable. Only distances that can still reach the origin before
/// `n_max` are tracked.
pub fn radial_chain_free_group(k: u32, n_max: usize) -> OracleSeries {
    assert!(k >= 2, "the radial chain needs at least two generators");
    let q = 2.0 * k as f64;
    let s = (q - 1.0).sqrt();
    let w = s / q;
    let from_origin = 1.0 / s;
    let width = n_max / 2 + 2;
    let mut p = vec![0.0; width + 1];
    p[0] = 1.0;
    let mut scale = 0.0f64;
    let mut rows = vec![SeriesRow::new(0, 1.0, 0.0)];
    let mut next = vec![0.0; width + 1];
    for n in 1..=n_max {
        let prev_h = (n - 1).min(n_max - n + 1).min(width - 1);
        next[..=prev_h + 1].iter_mut().for_each(|v| *v = 0.0);
        next[1] += p[0] * from_origin;
        for j in 1..=prev_h {
            let v = p[j];
            next[j - 1] += v * w;
            next[j + 1] += v * w;
        }
        let horizon = n.min(n_max - n).min(width - 1);
        p[..=horizon].copy_from_slice(&next[..=horizon]);
        p[horizon + 1..=prev_h + 1]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let m = p[..=horizon].iter().cloned().fold(0.0, f64::max);
        if m > 0.0 && !(1e-100..=1e100).contains(&m) {
            let inv = 1.0 / m;
            p[..=horizon].iter_mut().for_each(|v| *v *= inv);
            scale += m.ln();
        }
        rows.push(SeriesRow {
            n,
            a: p[0],
            defect: 0.0,
            scale: if p[0] == 0.0 { 0.0 } else { scale },
        });
    }
    ConvolutionSeries {
        spec: None,
        measure_id: format!("radial_chain_k{k}"),
        eps: 0.0,
        source: SeriesSource::RadialChain,
        rows,
        exact_rho: None,
    }
}

/// Rows `a_{2n} = rho^{2n} (2n)^-alpha (ln(2n+2))^-kappa`, `a_0 = 1`, odd
/// rows zero.
pub fn synthetic_series(rho: f64, alpha: f64, kappa: f64, n_max: usize) -> OracleSeries {
    let ln_rho = rho.ln();
    let rows = (0..=n_max)
        .map(|n| {
            if n == 0 {
                SeriesRow::new(0, 1.0, 0.0)
            } else if n % 2 == 1 {
                SeriesRow::new(n, 0.0, 0.0)
            } else {
                let x = n as f64;
                SeriesRow {
                    n,
                    a: x.powf(-alpha) * (x + 2.0).ln().powf(-kappa),
                    defect: 0.0,
                    scale: n as f64 * ln_rho,
                }
            }
        })
        .collect();
    ConvolutionSeries {
        spec: None,
        measure_id: format!("synthetic_{rho}_{alpha}_{kappa}"),
        eps: 0.0,
        source: SeriesSource::Synthetic,
        rows,
        exact_rho: Some(rho),
    }
}

/// Brute-force check of the cut-point identity: enumerates every path of
/// length `n` from the identity, and for each one returning to the identity
/// counts the non-decreasing `k`-tuples of cut positions in `0..=n`, summing
/// path weight times count. Equals `C(n+k, k) mu^(n)(e)`.
pub fn cutpoint_identity_oracle(
    mu: &SparseMeasure,
    k: usize,
    n: usize,
) -> Result<f64, MeasureError> {
    const PATH_BUDGET: f64 = 3.0e7;
    let steps: Vec<(GroupElement, f64)> = mu.iter().map(|(g, w)| (g.clone(), w)).collect();
    if (steps.len() as f64).powi(n as i32) > PATH_BUDGET || k > 3 {
        return Err(MeasureError::Resource {
            budget: PATH_BUDGET as usize,
            rows: 0,
        });
    }
    let spec = mu.spec().clone();
    let cuts = count_cut_tuples(k, n) as f64;
    let mut total = 0.0;
    let mut stack = vec![(spec.identity(), 1.0, 0usize)];
    while let Some((g, w, len)) = stack.pop() {
        if len == n {
            if g.is_identity() {
                total += w * cuts;
            }
            continue;
        }
        for (s, ws) in &steps {
            stack.push((spec.mul(&g, s), w * ws, len + 1));
        }
    }
    Ok(total)
}

// explicit enumeration of 0 <= t_1 <= ... <= t_k <= n
fn count_cut_tuples(k: usize, n: usize) -> u64 {
    fn rec(k: usize, lo: usize, n: usize) -> u64 {
        if k == 0 {
            return 1;
        }
        (lo..=n).map(|t| rec(k - 1, t, n)).sum()
    }
    rec(k, 0, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn binomial_values() {
        assert_eq!(binomial_z_srw(0), 1.0);
        assert_relative_eq!(binomial_z_srw(1), 0.5, max_relative = 1e-15);
        assert_relative_eq!(binomial_z_srw(2), 0.375, max_relative = 1e-15);
        let s = binomial_z_series(5);
        assert_eq!(s.rows[3].a, 0.0);
        assert_eq!(s.rows[5].a, 0.0);
    }

    #[test]
    fn stirling_branch_matches_products() {
        // exact product recurrence against the asymptotic branch
        let mut v = 1.0f64;
        for j in 1..=200u64 {
            v *= (2 * j - 1) as f64 / (2 * j) as f64;
            if j >= 24 {
                assert_relative_eq!(binomial_z_srw(j), v, max_relative = 1e-13);
            }
        }
        // C(2n,n) 4^-n ~ 1/sqrt(pi n)
        let n = 1_000_000u64;
        assert_relative_eq!(
            binomial_z_srw(n) * (std::f64::consts::PI * n as f64).sqrt(),
            1.0 - 1.0 / (8.0 * n as f64),
            max_relative = 1e-12
        );
    }

    #[test]
    fn dense_cyclic_two() {
        let mu = SparseMeasure::simple_random_walk(GroupSpec::cyclic(2));
        let s = dense_convolution(&mu, 6).unwrap();
        let v = s.values();
        assert_eq!(v, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_dirac() {
        let mu = SparseMeasure::dirac(GroupSpec::lattice(2));
        let s = dense_convolution(&mu, 5).unwrap();
        assert!(s.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dense_refuses_large_boxes() {
        let mu = SparseMeasure::simple_random_walk(GroupSpec::lattice(3));
        assert!(matches!(
            dense_convolution(&mu, 1000),
            Err(MeasureError::Resource { .. })
        ));
        let h = SparseMeasure::simple_random_walk(GroupSpec::Heisenberg3);
        assert!(dense_convolution(&h, 4).is_err());
    }

    #[test]
    fn radial_small_rows() {
        let s = radial_chain_free_group(2, 8);
        assert_eq!(s.rows[1].value(), 0.0);
        assert_relative_eq!(s.rows[2].value(), 0.25, max_relative = 1e-14);
        for n in 0..=8 {
            let plain = radial_distribution(2, n)[0];
            assert_relative_eq!(
                s.rows[n].value(),
                plain,
                max_relative = 1e-13,
                epsilon = 1e-300
            );
        }
    }

    #[test]
    fn radial_conservation() {
        for n in [1, 7, 50, 300] {
            let total: f64 = radial_distribution(2, n).iter().sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn radial_long_horizon_is_finite() {
        let s = radial_chain_free_group(2, 20_000);
        let last = s.rows.last().unwrap();
        assert!(last.a > 0.0 && last.a.is_finite());
        let rate = (last.ln_value() / last.n as f64).exp();
        assert!((rate - 0.75f64.sqrt()).abs() < 2e-3, "rate {rate}");
        // the truncated DP agrees with the plain one where both are
        // representable
        let s2 = radial_chain_free_group(2, 600);
        let plain = radial_distribution(2, 600)[0];
        assert_relative_eq!(s2.rows[600].value(), plain, max_relative = 1e-12);
    }

    #[test]
    fn synthetic_rows() {
        let s = synthetic_series(1.0, 0.0, 0.0, 10);
        assert!(s.even().all(|r| r.value() == 1.0));
        let t = synthetic_series(0.5, 1.5, 0.5, 4);
        let expect = 0.5f64.powi(4) * 4f64.powf(-1.5) / 6f64.ln().sqrt();
        assert_relative_eq!(t.rows[4].value(), expect, max_relative = 1e-14);
    }

    #[test]
    fn cutpoint_multiplicities() {
        let mu = SparseMeasure::simple_random_walk(GroupSpec::lattice(1));
        assert_eq!(count_cut_tuples(1, 7), 8);
        assert_eq!(count_cut_tuples(2, 2), 6);
        assert_eq!(count_cut_tuples(0, 9), 1);
        let a2 = 0.5;
        assert_relative_eq!(
            cutpoint_identity_oracle(&mu, 2, 2).unwrap(),
            6.0 * a2,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            cutpoint_identity_oracle(&mu, 0, 4).unwrap(),
            0.375,
            max_relative = 1e-15
        );
    }
}
