//! Count evaluation statistics.
//!
//! MAE, RMSE and R² are computed on raw (real-valued) predicted counts. The
//! leaf-counting family (DiC, |DiC|, agreement and MSE) compares integer
//! counts, so predictions are rounded with [`round_count`] first.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::round_count;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Not-a-number when every ground-truth count is equal.
    pub r2: f64,
    pub r2_defined: bool,
    pub dic: f64,
    pub dic_std: f64,
    pub abs_dic: f64,
    pub abs_dic_std: f64,
    pub agreement_pct: f64,
    pub mse: f64,
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied(), xs.len());
    mean(xs.iter().map(|x| (x - m).powi(2)), xs.len()).sqrt()
}

pub fn compute_metrics(pred: &[f64], truth: &[u64]) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction list"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth counts",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    let truth_f: Vec<f64> = truth.iter().map(|&t| t as f64).collect();

    let residuals: Vec<f64> = pred.iter().zip(&truth_f).map(|(p, t)| p - t).collect();
    let mae = mean(residuals.iter().map(|r| r.abs()), n);
    let rmse = mean(residuals.iter().map(|r| r * r), n).sqrt();

    let truth_mean = mean(truth_f.iter().copied(), n);
    let ss_tot: f64 = truth_f.iter().map(|t| (t - truth_mean).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r2_defined = ss_tot > 0.0;
    let r2 = if r2_defined { 1.0 - ss_res / ss_tot } else { f64::NAN };

    let dic: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| round_count(p) as f64 - t as f64)
        .collect();
    let abs_dic: Vec<f64> = dic.iter().map(|d| d.abs()).collect();
    let exact = dic.iter().filter(|&&d| d == 0.0).count();

    Ok(MetricReport {
        n,
        mae,
        rmse,
        r2,
        r2_defined,
        dic: mean(dic.iter().copied(), n),
        dic_std: std_dev(&dic),
        abs_dic: mean(abs_dic.iter().copied(), n),
        abs_dic_std: std_dev(&abs_dic),
        agreement_pct: 100.0 * exact as f64 / n as f64,
        mse: mean(dic.iter().map(|d| d * d), n),
    })
}

const LEDGER_HEADER: &str =
    "label,n,mae,rmse,r2,dic,dic_std,abs_dic,abs_dic_std,agreement_pct,mse";

impl MetricReport {
    /// One `key = value` line per statistic.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "mae = {}", self.mae);
        let _ = writeln!(s, "rmse = {}", self.rmse);
        if self.r2_defined {
            let _ = writeln!(s, "r2 = {}", self.r2);
        } else {
            let _ = writeln!(s, "r2 = NaN  # undefined: all ground-truth counts equal");
        }
        let _ = writeln!(s, "dic = {}", self.dic);
        let _ = writeln!(s, "dic_std = {}  # std (assumed)", self.dic_std);
        let _ = writeln!(s, "abs_dic = {}", self.abs_dic);
        let _ = writeln!(s, "abs_dic_std = {}  # std (assumed)", self.abs_dic_std);
        let _ = writeln!(s, "agreement_pct = {}", self.agreement_pct);
        let _ = writeln!(s, "mse = {}", self.mse);
        s
    }

    pub fn ledger_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.mae,
            self.rmse,
            self.r2,
            self.dic,
            self.dic_std,
            self.abs_dic,
            self.abs_dic_std,
            self.agreement_pct,
            self.mse
        )
    }

    /// Appends one CSV row to `path`, writing the header first if the file is new.
    pub fn append_to_ledger(&self, path: &Path, label: &str) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(LEDGER_HEADER);
            text.push('\n');
        }
        text.push_str(&self.ledger_row(label));
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Pearson correlation coefficient; not-a-number when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::NAN;
    }
    let ma = mean(a[..n].iter().copied(), n);
    let mb = mean(b[..n].iter().copied(), n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let r = compute_metrics(&[5.0, 7.0, 9.0], &[5, 7, 9]).unwrap();
        assert_eq!((r.mae, r.rmse, r.r2, r.dic, r.abs_dic, r.agreement_pct, r.mse), (0.0, 0.0, 1.0, 0.0, 0.0, 100.0, 0.0));
    }

    #[test]
    fn constant_prediction_has_zero_r2() {
        let r = compute_metrics(&[4.0, 4.0, 4.0], &[3, 4, 5]).unwrap();
        assert_eq!(r.r2, 0.0);
    }

    #[test]
    fn undefined_r2_is_flagged_not_raised() {
        let r = compute_metrics(&[4.0, 5.0], &[4, 4]).unwrap();
        assert!(!r.r2_defined);
        assert!(r.r2.is_nan());
        assert!(r.to_key_values().contains("r2 = NaN"));
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1, 2]).is_err());
    }

    #[test]
    fn ledger_appends_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evals.csv");
        let r = compute_metrics(&[1.0, 2.0], &[1, 3]).unwrap();
        r.append_to_ledger(&path, "a").unwrap();
        r.append_to_ledger(&path, "b").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], LEDGER_HEADER);
        assert!(lines[2].starts_with("b,2,"));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 4.5 / (2.0f64 * 61.0 / 6.0).sqrt()).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_jensen(
            pairs in prop::collection::vec((0.0f64..40.0, 0u64..40), 1..30),
            rot in 0usize..30,
        ) {
            let (p, t): (Vec<f64>, Vec<u64>) = pairs.iter().copied().unzip();
            let a = compute_metrics(&p, &t).unwrap();
            prop_assert!(a.mae <= a.rmse + 1e-12);
            let k = rot % p.len();
            let (mut p2, mut t2) = (p.clone(), t.clone());
            p2.rotate_left(k);
            t2.rotate_left(k);
            let b = compute_metrics(&p2, &t2).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-9 && (a.rmse - b.rmse).abs() < 1e-9);
            prop_assert_eq!(a.agreement_pct, b.agreement_pct);
            prop_assert!((a.mse - b.mse).abs() < 1e-9);
            prop_assert_eq!(
                a.agreement_pct == 100.0,
                a.dic == 0.0 && a.abs_dic == 0.0 && a.mse == 0.0
            );
        }

        #[test]
        fn error_scaling(
            truth in prop::collection::vec(5u64..30, 1..20),
            res in prop::collection::vec(-2.0f64..2.0, 20),
            c in 0.1f64..3.0,
        ) {
            let p1: Vec<f64> = truth.iter().zip(&res).map(|(&t, r)| t as f64 + r).collect();
            let p2: Vec<f64> = truth.iter().zip(&res).map(|(&t, r)| t as f64 + c * r).collect();
            let a = compute_metrics(&p1, &truth).unwrap();
            let b = compute_metrics(&p2, &truth).unwrap();
            prop_assert!((b.mae - c * a.mae).abs() < 1e-9);
            prop_assert!((b.rmse - c * a.rmse).abs() < 1e-9);
        }

        #[test]
        fn rmse_squared_equals_mse_for_integer_predictions(
            pairs in prop::collection::vec((0u64..40, 0u64..40), 1..30),
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0 as f64).collect();
            let t: Vec<u64> = pairs.iter().map(|x| x.1).collect();
            let r = compute_metrics(&p, &t).unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() < 1e-9);
        }
    }
}
