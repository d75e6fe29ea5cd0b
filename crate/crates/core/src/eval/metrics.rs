use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC via the rank sum; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let ranks = average_ranks(scores);
    let r1: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 * n0) as f64)
}

/// AUC plus balanced accuracy and F1 with `score >= threshold` called positive.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationMetrics> {
    let auc = auc(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
        }
    }
    let tpr = tp as f64 / (tp + fne) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fne) as f64 };
    Ok(ClassificationMetrics { auc, balanced_accuracy: (tpr + tnr) / 2.0, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * dist.sf(t.abs())
}

/// Pearson correlation with a two-sided p-value from `t = r sqrt((n-2)/(1-r^2))`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(EvalError::TooFew { needed: 3, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let t = if r.abs() == 1.0 { f64::INFINITY } else { r * (df / (1.0 - r * r)).sqrt() };
    Ok(Correlation { r, p_value: two_sided_t(t, df), n })
}

/// Spearman correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Two-sided unpaired t-test; Welch's form unless `pooled`.
pub fn t_test(a: &[f64], b: &[f64], pooled: bool) -> Result<TTest> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(EvalError::TooFew { needed: 2, got: g.len() });
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (se2, df) = if pooled {
        let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        (sp * (1.0 / na + 1.0 / nb), na + nb - 2.0)
    } else {
        let (qa, qb) = (va / na, vb / nb);
        let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
        (qa + qb, df)
    };
    let t = (ma - mb) / se2.sqrt();
    Ok(TTest { t, df, p_value: two_sided_t(t, df) })
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    t_test(a, b, false)
}

/// Mean and sample standard deviation.
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if x.len() == 1 {
        return (x[0], 0.0);
    }
    let (m, v) = mean_var(x);
    (m, v.sqrt())
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_count(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn separated_and_reversed() {
        let labels = [0, 0, 1, 1];
        let m = classification_metrics(&[0.1, 0.2, 0.8, 0.9], &labels, 0.5).unwrap();
        assert_eq!((m.auc, m.balanced_accuracy, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn six_sample_tie_matches_pairs() {
        let scores = [0.3, 0.5, 0.5, 0.7, 0.2, 0.9];
        let labels = [0, 1, 0, 1, 0, 1];
        // 9 pairs: 8 wins and one tie
        assert_eq!(auc(&scores, &labels).unwrap(), 8.5 / 9.0);
        assert_eq!(auc(&scores, &labels).unwrap(), pair_count(&scores, &labels));
    }

    #[test]
    fn linear_relation_correlates_perfectly() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-15);
        assert!(c.p_value < 1e-12);
        assert!(pearson(&x, &[1.0; 5]).is_err());
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap().r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_groups_have_zero_t() {
        let a = [1.0, 2.0, 4.0];
        let t = welch_t(&a, &a).unwrap();
        assert_eq!(t.t, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert!((quantile_sorted(&s, 0.05) - 1.15).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
