// SPDX-License-Identifier: Apache-2.0

//! Per-channel similarity scores.

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PearsonError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two samples, got {0}")]
    TooShort(usize),
    /// The coefficient is undefined; `both` tells whether neither input varies.
    #[error("correlation undefined for constant input")]
    ConstantInput { both: bool },
}

/// Sample Pearson correlation coefficient, accumulated in one pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, PearsonError> {
    if x.len() != y.len() {
        return Err(PearsonError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(PearsonError::TooShort(x.len()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (k + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    match (sxx > 0.0, syy > 0.0) {
        (true, true) => Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)),
        (false, false) => Err(PearsonError::ConstantInput { both: true }),
        _ => Err(PearsonError::ConstantInput { both: false }),
    }
}

/// Generalized Hamming distance: positional mismatches plus the length difference.
pub fn hamming<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    let mismatches = x.iter().zip(y).filter(|(a, b)| a != b).count();
    mismatches + x.len().abs_diff(y.len())
}

/// `1 / (1 + H)` with `H` the generalized Hamming distance.
pub fn score_discrete<T: PartialEq>(x: &[T], y: &[T]) -> f64 {
    1.0 / (1.0 + hamming(x, y) as f64)
}

/// Correlation of the common prefix, clamped at zero, scaled by the length
/// ratio. Degenerate inputs: equal constants score 1 (times the ratio),
/// different constants 0, one constant side falls back to exact matching.
pub fn score_numeric(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return if x.len() == y.len() { 1.0 } else { 0.0 };
    }
    let ratio = n as f64 / x.len().max(y.len()) as f64;
    let (xs, ys) = (&x[..n], &y[..n]);
    if n == 1 {
        return if xs[0] == ys[0] { ratio } else { 0.0 };
    }
    match pearson(xs, ys) {
        Ok(r) => r.max(0.0) * ratio,
        Err(PearsonError::ConstantInput { both: true }) => {
            if xs[0] == ys[0] {
                ratio
            } else {
                0.0
            }
        }
        Err(_) => score_discrete(x, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0], &[1.0]), Err(PearsonError::TooShort(1)));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(PearsonError::LengthMismatch(2, 1)));
        assert_eq!(pearson(&[2.0, 2.0], &[1.0, 1.0]), Err(PearsonError::ConstantInput { both: true }));
        assert_eq!(pearson(&[2.0, 2.0], &[1.0, 3.0]), Err(PearsonError::ConstantInput { both: false }));
    }

    #[test]
    fn numeric_scores() {
        let a = [5.0, 9.0, 2.0, 7.0, 7.0, 1.0, 3.0, 8.0];
        assert_eq!(score_numeric(&a, &a), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(score_numeric(&a, &neg), 0.0);
        // Prefix of six perfectly correlated, lengths 6 and 8.
        assert!((score_numeric(&a[..6], &a) - 0.75).abs() < 1e-12);
        assert_eq!(score_numeric(&[4.0, 4.0], &[4.0, 4.0, 4.0, 4.0]), 0.5);
        assert_eq!(score_numeric(&[4.0, 4.0], &[3.0, 3.0]), 0.0);
        // One constant side: exact-match fallback, one mismatch of two.
        assert_eq!(score_numeric(&[4.0, 4.0], &[4.0, 5.0]), 0.5);
    }

    #[test]
    fn discrete_scores() {
        use crate::trace::AccessMode::*;
        assert_eq!(score_discrete(&[R, E, E], &[R, E, E]), 1.0);
        assert_eq!(score_discrete(&[R, E, E], &[R, W, E]), 0.5);
        assert!((score_discrete(&[R, E, E], &[R, E, E, W, R]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(score_discrete::<u8>(&[], &[]), 1.0);
    }
}
