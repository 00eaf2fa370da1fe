//! Evaluation metrics: per-target MSE, mean-absolute accuracy, classification
//! accuracy and support-weighted F1.

use std::fmt;

use crate::error::{Error, Result};

/// Column labels used for five-target regression reports.
pub const TRAIT_NAMES: [&str; 5] = ["O", "C", "E", "A", "N"];

fn check_pair(truth: &[f64], pred: &[f64], op: &'static str) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::dim(op, format!("{} truth values vs {} predictions", truth.len(), pred.len())));
    }
    Ok(())
}

/// Column-wise MSE of row-major `N×K` arrays; returns per-column values and their mean.
pub fn mse_per_trait(truth: &[f64], pred: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    check_pair(truth, pred, "mse_per_trait")?;
    if k == 0 || truth.is_empty() || !truth.len().is_multiple_of(k) {
        return Err(Error::dim(
            "mse_per_trait",
            format!("{} values do not form rows of {k}", truth.len()),
        ));
    }
    let n = truth.len() / k;
    let mut per = vec![0.0; k];
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        per[i % k] += (t - p) * (t - p);
    }
    per.iter_mut().for_each(|v| *v /= n as f64);
    let mean = per.iter().sum::<f64>() / k as f64;
    Ok((per, mean))
}

/// `1 - mean |t - p|`.
pub fn eq7_accuracy(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred, "eq7_accuracy")?;
    if truth.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / truth.len() as f64;
    Ok(1.0 - mae)
}

/// Accuracy per column of row-major `N×K` arrays, plus the mean.
pub fn eq7_per_trait(truth: &[f64], pred: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    check_pair(truth, pred, "eq7_per_trait")?;
    if k == 0 || truth.is_empty() || !truth.len().is_multiple_of(k) {
        return Err(Error::dim("eq7_per_trait", format!("{} values do not form rows of {k}", truth.len())));
    }
    let per = (0..k)
        .map(|c| {
            let t: Vec<f64> = truth.iter().skip(c).step_by(k).copied().collect();
            let p: Vec<f64> = pred.iter().skip(c).step_by(k).copied().collect();
            eq7_accuracy(&t, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per.iter().sum::<f64>() / k as f64;
    Ok((per, mean))
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("class label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// `k×k` counts, rows = truth, columns = prediction.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::dim("confusion_matrix", format!("{} vs {} labels", truth.len(), pred.len())));
    }
    check_labels(truth, k)?;
    check_labels(pred, k)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn classification_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::dim("accuracy", format!("{} vs {} labels", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    Ok(truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64)
}

/// Per-class F1 from a confusion matrix; 0 when precision + recall is 0.
pub fn per_class_f1(m: &[Vec<usize>]) -> Vec<f64> {
    let k = m.len();
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: usize = (0..k).map(|r| m[r][c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect()
}

/// `Σ_c (support_c / N) · F1_c`; classes without support carry no weight.
pub fn weighted_f1(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    let m = confusion_matrix(truth, pred, k)?;
    if truth.is_empty() {
        return Err(Error::Contract("F1 of an empty set".into()));
    }
    let n = truth.len() as f64;
    Ok(per_class_f1(&m)
        .iter()
        .zip(&m)
        .map(|(f, row)| row.iter().sum::<usize>() as f64 / n * f)
        .sum())
}

/// Index of the largest value in each row of a row-major `N×K` array.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_trait_mse: Vec<f64>,
    pub mean_mse: Option<f64>,
    pub per_trait_accuracy: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub classification_accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub support: Vec<usize>,
}

impl MetricReport {
    pub fn regression(truth: &[f64], pred: &[f64], k: usize) -> Result<Self> {
        let (per_trait_mse, mean) = mse_per_trait(truth, pred, k)?;
        let (per_trait_accuracy, acc) = eq7_per_trait(truth, pred, k)?;
        Ok(Self {
            per_trait_mse,
            mean_mse: Some(mean),
            per_trait_accuracy,
            mean_accuracy: Some(acc),
            ..Self::default()
        })
    }

    pub fn classification(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        let m = confusion_matrix(truth, pred, k)?;
        Ok(Self {
            classification_accuracy: Some(classification_accuracy(truth, pred)?),
            weighted_f1: Some(weighted_f1(truth, pred, k)?),
            support: m.iter().map(|r| r.iter().sum()).collect(),
            ..Self::default()
        })
    }

    /// Single score where lower is better: mean MSE, or one minus accuracy.
    pub fn loss_like(&self) -> f64 {
        match (self.mean_mse, self.classification_accuracy) {
            (Some(m), _) => m,
            (None, Some(a)) => 1.0 - a,
            (None, None) => f64::INFINITY,
        }
    }

    fn trait_name(i: usize, k: usize) -> String {
        if k == TRAIT_NAMES.len() {
            TRAIT_NAMES[i].to_string()
        } else {
            format!("t{i}")
        }
    }

    /// `(metric, value)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let k = self.per_trait_mse.len();
        let mut out = Vec::new();
        for (i, v) in self.per_trait_mse.iter().enumerate() {
            out.push((format!("mse_{}", Self::trait_name(i, k)), *v));
        }
        if let Some(v) = self.mean_mse {
            out.push(("mse_mean".into(), v));
        }
        for (i, v) in self.per_trait_accuracy.iter().enumerate() {
            out.push((format!("accuracy_{}", Self::trait_name(i, k)), *v));
        }
        if let Some(v) = self.mean_accuracy {
            out.push(("accuracy_mean".into(), v));
        }
        if let Some(v) = self.classification_accuracy {
            out.push(("classification_accuracy".into(), v));
        }
        if let Some(v) = self.weighted_f1 {
            out.push(("weighted_f1".into(), v));
        }
        for (c, s) in self.support.iter().enumerate() {
            out.push((format!("support_{c}"), *s as f64));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v:.6}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq7_worked_example() {
        let a = eq7_accuracy(&[0.2, 0.8], &[0.3, 0.6]).unwrap();
        assert!((a - 0.85).abs() <= 1e-12);
        assert_eq!(eq7_accuracy(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(eq7_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn mse_extremes() {
        let (per, mean) = mse_per_trait(&[0.0; 10], &[1.0; 10], 5).unwrap();
        assert_eq!(per, vec![1.0; 5]);
        assert_eq!(mean, 1.0);
        assert!(mse_per_trait(&[0.0; 10], &[0.0; 9], 5).is_err());
    }

    #[test]
    fn f1_degenerate_cases() {
        assert_eq!(weighted_f1(&[0, 0, 0], &[0, 0, 0], 1).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert!(matches!(weighted_f1(&[0, 3], &[0, 0], 3), Err(Error::Data(_))));
    }

    #[test]
    fn report_csv_layout() {
        let r = MetricReport::regression(&[0.5; 10], &[0.5; 10], 5).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value\nmse_O,0\n"), "{csv}");
        assert!(csv.contains("accuracy_mean,1\n"));
    }
}
