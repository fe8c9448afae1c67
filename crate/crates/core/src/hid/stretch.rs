//! Contrast mapping of scalar planes to 8-bit channels.

/// Round half up and clamp to the 8-bit range.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Affinely map `[lo, hi]` to `[0, 255]`, saturating outside. A degenerate
/// range (`hi <= lo`) maps everything to 0.
pub fn linear_stretch(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    if hi <= lo {
        return vec![0; values.len()];
    }
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if v <= lo {
                0
            } else if v >= hi {
                255
            } else {
                to_u8((v - lo) / span * 255.0)
            }
        })
        .collect()
}

pub fn min_max_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    linear_stretch(values, lo, hi)
}

/// Quantile of already sorted data with linear interpolation between the
/// two nearest ranks (rank position `q·(n−1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() || frac == 0.0 {
        sorted[i]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// The (low, high) quantiles of `values`.
pub fn quantile_pair(values: &[f64], low: f64, high: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (quantile_sorted(&sorted, low), quantile_sorted(&sorted, high))
}

/// Stretch a plane so its `low` quantile maps to 0 and `high` quantile to 255.
pub fn percentile_stretch(values: &[f64], low: f64, high: f64) -> Vec<u8> {
    let (lo, hi) = quantile_pair(values, low, high);
    linear_stretch(values, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_u8(0.5), 1);
        assert_eq!(to_u8(0.49), 0);
        assert_eq!(to_u8(254.5), 255);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn degenerate_range_maps_to_zero() {
        assert_eq!(min_max_to_u8(&[5.0, 5.0, 5.0]), vec![0, 0, 0]);
        assert_eq!(percentile_stretch(&[5.0; 10], 0.0, 1.0), vec![0; 10]);
    }

    #[test]
    fn ramp_maps_to_ramp() {
        let ramp: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        let out = percentile_stretch(&ramp, 0.0, 1.0);
        for (i, &v) in out.iter().enumerate() {
            assert_eq!(v as usize, i);
        }
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 10.0, 20.0, 30.0];
        assert_eq!(quantile_sorted(&s, 0.0), 0.0);
        assert_eq!(quantile_sorted(&s, 1.0), 30.0);
        assert!((quantile_sorted(&s, 0.5) - 15.0).abs() < 1e-12);
    }
}
