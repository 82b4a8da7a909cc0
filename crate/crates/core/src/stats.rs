//! Batch statistics shared by the losses and the analysis code.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_with_gradient(x, y).map(|(r, _, _)| r)
}

/// Pearson correlation with its gradient with respect to every entry of `x`
/// and `y`. `None` when either side has (numerically) zero variance.
pub fn pearson_with_gradient(x: &[f64], y: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    assert_eq!(x.len(), y.len(), "pearson needs equal-length samples");
    if x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let scale = |v: &[f64], m: f64| v.iter().map(|a| a * a).sum::<f64>().max(m * m * v.len() as f64);
    // Relative floor: a batch whose spread is pure rounding noise is degenerate.
    if sxx <= 1e-24 * scale(x, mx) || syy <= 1e-24 * scale(y, my) || sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let denom = (sxx * syy).sqrt();
    let r = (sxy / denom).clamp(-1.0, 1.0);
    let gx = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my) / denom - r * (a - mx) / sxx)
        .collect();
    let gy = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) / denom - r * (b - my) / syy)
        .collect();
    Some((r, gx, gy))
}

/// Average ranks (ties share the mean rank).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_correlation() {
        let x = [1.0, 2.0, 4.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_side_is_degenerate() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        assert!(pearson(&[0.3], &[0.1]).is_none());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]).unwrap() - 1.0).abs() < 1e-15);
    }
}
