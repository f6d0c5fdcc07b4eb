use std::io::Write;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,iteration,train_ce,fbr_term,ortho_term,decay_term,test_ce,test_acc,lr,mean_match_dist,match_entropy";

/// One logged point. Optional columns are written empty when unavailable
/// (no test split, or no filter bank to match against).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Index of the last iteration covered by this row.
    pub iteration: u64,
    /// Mean batch cross-entropy since the previous row.
    pub train_ce: f64,
    pub fbr_term: f64,
    pub ortho_term: f64,
    pub decay_term: f64,
    pub test_ce: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Scheduled rate for the epoch.
    pub learning_rate: f64,
    pub mean_match_distance: Option<f64>,
    pub match_histogram_entropy: Option<f64>,
}

/// `printf("%.9g")` formatting.
pub fn format_g9(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_g9).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            format_g9(self.train_ce),
            format_g9(self.fbr_term),
            format_g9(self.ortho_term),
            format_g9(self.decay_term),
            opt(self.test_ce),
            opt(self.test_accuracy),
            format_g9(self.learning_rate),
            opt(self.mean_match_distance),
            opt(self.match_histogram_entropy),
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!("metrics row has {} fields, expected 11", fields.len())));
        }
        let bad = |i: usize| Error::Format(format!("metrics field {i} '{}' is not a number", fields[i]));
        let float = |i: usize| fields[i].parse::<f64>().map_err(|_| bad(i));
        let optional = |i: usize| {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                float(i).map(Some)
            }
        };
        Ok(MetricsRow {
            epoch: fields[0].parse().map_err(|_| bad(0))?,
            iteration: fields[1].parse().map_err(|_| bad(1))?,
            train_ce: float(2)?,
            fbr_term: float(3)?,
            ortho_term: float(4)?,
            decay_term: float(5)?,
            test_ce: optional(6)?,
            test_accuracy: optional(7)?,
            learning_rate: float(8)?,
            mean_match_distance: optional(9)?,
            match_histogram_entropy: optional(10)?,
        })
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        _ => return Err(Error::Format("metrics CSV header does not match".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (1e-3, "0.001"),
            (2.5e-4, "0.00025"),
            (1.0 / 3.0, "0.333333333"),
            (7.654321098765, "7.6543211"),
            (1e-5, "1e-05"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (-0.5, "-0.5"),
            (0.0, "0"),
            (99.99999999, "100"),
            (9.999999999e-5, "0.0001"),
            (1.0, "1"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g9(x), want, "{x}");
        }
    }

    #[test]
    fn csv_round_trip_with_missing_columns() {
        let row = MetricsRow {
            epoch: 2,
            iteration: 31,
            train_ce: 0.25,
            fbr_term: 1e-6,
            ortho_term: 0.0,
            decay_term: 0.0,
            test_ce: None,
            test_accuracy: Some(0.875),
            learning_rate: 5e-4,
            mean_match_distance: Some(1.5),
            match_histogram_entropy: None,
        };
        let text = metrics_csv(std::slice::from_ref(&row));
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![row]);
        assert!(parse_metrics_csv("epoch,iteration\n").is_err());
    }
}
