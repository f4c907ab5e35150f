//! Small numeric helpers shared across modules.

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (cascade) summation of `f(0) + ... + f(n-1)`, always evaluated in
/// ascending index order with a fixed tree shape, so the result depends only
/// on the terms and never on the caller.
pub fn pairwise_sum_by(n: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, n, f)
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), &|i| values[i])
}

pub fn l2_norm(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), &|i| values[i] * values[i]).sqrt()
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Mean, maximum and sample standard deviation (n - 1 denominator; 0 for a
/// single value).
pub fn mean_max_std(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = if n > 1 {
        let ss = pairwise_sum_by(n, &|i| (values[i] - mean).powi(2));
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, max, std)
}
