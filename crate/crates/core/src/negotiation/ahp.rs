use super::{NegotiationError, Weights};

/// Saaty random index for n = 4.
pub const RANDOM_INDEX_4: f64 = 0.90;
pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-9;
pub const CR_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AhpResult {
    pub weights: Weights,
    pub lambda_max: f64,
    pub consistency_ratio: f64,
    /// Set when CR exceeds 0.1. The weights are still usable.
    pub inconsistent: bool,
    pub iterations: usize,
}

fn mat_vec(a: &[[f64; 4]; 4], v: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, row) in a.iter().enumerate() {
        out[i] = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
    out
}

/// Principal eigenvector of a 4×4 pairwise comparison matrix, ordered
/// (func, cost, trust, avail).
pub fn ahp_weights(a: &[[f64; 4]; 4]) -> Result<AhpResult, NegotiationError> {
    for i in 0..4 {
        for j in 0..4 {
            if !(a[i][j] > 0.0) || !a[i][j].is_finite() {
                return Err(NegotiationError::NonPositiveEntry(i, j));
            }
        }
    }
    for i in 0..4 {
        for j in i..4 {
            if (a[j][i] - 1.0 / a[i][j]).abs() > 1e-6 {
                return Err(NegotiationError::NotReciprocal(i, j));
            }
        }
    }
    let mut v = [0.25; 4];
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let w = mat_vec(a, &v);
        let sum: f64 = w.iter().sum();
        let next = w.map(|x| x / sum);
        let delta = next
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < TOLERANCE {
            break;
        }
    }
    let av = mat_vec(a, &v);
    let lambda_max = av.iter().zip(&v).map(|(x, y)| x / y).sum::<f64>() / 4.0;
    let ci = ((lambda_max - 4.0) / 3.0).max(0.0);
    let consistency_ratio = ci / RANDOM_INDEX_4;
    Ok(AhpResult {
        weights: Weights {
            func: v[0],
            cost: v[1],
            trust: v[2],
            avail: v[3],
        },
        lambda_max,
        consistency_ratio,
        inconsistent: consistency_ratio > CR_THRESHOLD,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_matrix() {
        let r = ahp_weights(&[[1.0; 4]; 4]).unwrap();
        for w in r.weights.as_array() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert!(r.consistency_ratio.abs() < 1e-12);
        assert!(!r.inconsistent);
    }

    #[test]
    fn rejects_bad_matrices() {
        let mut a = [[1.0; 4]; 4];
        a[0][1] = 2.0;
        a[1][0] = 3.0;
        assert_eq!(ahp_weights(&a), Err(NegotiationError::NotReciprocal(0, 1)));
        let mut b = [[1.0; 4]; 4];
        b[2][3] = 0.0;
        assert_eq!(ahp_weights(&b), Err(NegotiationError::NonPositiveEntry(2, 3)));
    }

    #[test]
    fn inconsistent_matrix_is_flagged() {
        // func ≫ cost ≫ trust ≫ func
        let a = [
            [1.0, 9.0, 1.0 / 9.0, 1.0],
            [1.0 / 9.0, 1.0, 9.0, 1.0],
            [9.0, 1.0 / 9.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0],
        ];
        let r = ahp_weights(&a).unwrap();
        assert!(r.inconsistent);
        assert!((r.weights.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
