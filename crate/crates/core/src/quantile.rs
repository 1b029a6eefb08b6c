//! Order statistics with the linear-interpolation percentile definition
//! (`h = p·(n−1)`, interpolate between the neighbouring order statistics).

use crate::scalar::Scalar;

/// Percentile `p ∈ [0, 1]` of already-sorted data. Panics on empty input.
pub fn percentile_sorted<T: Scalar>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::lit(h - lo as f64);
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Sorts a copy and returns the percentile; `None` when empty.
pub fn percentile<T: Scalar>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("percentile of NaN"));
    Some(percentile_sorted(&v, p))
}

pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    percentile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_point_quartiles() {
        let v: Vec<f64> = (1..=8).map(|i| 10.0 * i as f64).collect();
        assert_eq!(percentile(&v, 0.25), Some(27.5));
        assert_eq!(percentile(&v, 0.5), Some(45.0));
        assert_eq!(percentile(&v, 0.75), Some(62.5));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }
}
