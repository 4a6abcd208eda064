use crate::error::{Error, Result};

/// Monotone alignment between two sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwPath {
    /// `(i, j)` pairs from `(0, 0)` to `(N-1, M-1)`.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of local distances along `pairs`, accumulated in path order.
    pub cost: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-cost alignment with steps (1,0), (0,1) and (1,1).
///
/// Costs accumulate from `(0, 0)` forward, so the returned cost is exactly
/// the left-to-right sum of local distances along the path.
pub fn dtw_align<T>(a: &[T], b: &[T], dist: impl Fn(&T, &T) -> f64) -> Result<DtwPath> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Contract("dtw needs two non-empty sequences".into()));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = dist(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + d;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath { pairs, cost: acc[n * m - 1] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abs(a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let a = [0.3, 1.0, -2.0, 4.5];
        let p = dtw_align(&a, &a, abs).unwrap();
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.pairs, [(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn small_example() {
        let p = dtw_align(&[1.0, 2.0, 3.0], &[1.0, 3.0], abs).unwrap();
        assert_eq!(p.cost, 1.0);
        assert_eq!(p.pairs.first(), Some(&(0, 0)));
        assert_eq!(p.pairs.last(), Some(&(2, 1)));
    }

    #[test]
    fn path_is_monotone_and_cost_matches() {
        let a = [0.0, 2.0, 1.0, 5.0, 3.0];
        let b = [1.0, 1.0, 4.0];
        let p = dtw_align(&a, &b, abs).unwrap();
        for w in p.pairs.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
        let sum = p.pairs.iter().fold(0.0, |s, &(i, j)| s + abs(&a[i], &b[j]));
        assert_eq!(sum, p.cost);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(dtw_align::<f64>(&[], &[1.0], abs), Err(Error::Contract(_))));
    }
}
