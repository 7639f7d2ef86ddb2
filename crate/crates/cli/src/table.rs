//! CSV formatting: `.` decimal separator, 17 significant digits, LF endings.

use rwalk_core::{ConvolutionSeries, SeriesRow};

/// `x` with 17 significant digits, which round-trips every `f64`.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// `n,a_n,defect` with the represented (unscaled) values.
pub fn format_row(r: &SeriesRow) -> String {
    let defect = if r.scale == 0.0 {
        r.defect
    } else {
        r.defect * r.scale.exp()
    };
    format!("{},{},{}\n", r.n, num(r.value()), num(defect))
}

pub fn parse_row(line: &str) -> Option<SeriesRow> {
    let mut it = line.split(',');
    let n = it.next()?.parse().ok()?;
    let a = it.next()?.parse().ok()?;
    let d = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some(SeriesRow::new(n, a, d))
}

pub fn series_csv(series: &ConvolutionSeries) -> String {
    let mut out = String::from("n,a_n,defect\n");
    for r in &series.rows {
        out.push_str(&format_row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rows_round_trip(n in 0usize..1_000_000, a in 0.0f64..1.0, d in 0.0f64..1e-3) {
            let r = SeriesRow::new(n, a, d);
            let line = format_row(&r);
            prop_assert!(line.ends_with('\n') && !line.contains('\r'));
            prop_assert_eq!(parse_row(line.trim_end()), Some(r));
        }
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(1.0), "1.0000000000000000e0");
    }
}
