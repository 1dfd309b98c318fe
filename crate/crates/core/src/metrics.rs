//! Rank and linear correlation between predicted and reference scores.

use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn rank_average_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let mean = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mean;
        }
        i = j;
    }
    ranks
}

fn check_pairs(pred: &[f64], labels: &[f64]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(Error::shape(
            "correlation",
            format!("{} predictions vs {} labels", pred.len(), labels.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 pairs, got {}", pred.len())));
    }
    if pred.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "correlation".into() });
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one side has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(pred, labels)?;
    pearson(pred, labels)
}

/// Spearman rank correlation, computed as Pearson on tie-averaged ranks.
pub fn srcc(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(pred, labels)?;
    pearson(&rank_average_ties(pred), &rank_average_ties(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks() {
        assert_eq!(rank_average_ties(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_average_ties(&[5.0, 5.0, 9.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_average_ties(&[3.0, 1.0, 3.0, 3.0]), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn plcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((plcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn srcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mono: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 7.0).collect();
        assert_eq!(srcc(&x, &mono).unwrap(), 1.0);
        assert_eq!(srcc(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((srcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(plcc(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(plcc(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    }
}
