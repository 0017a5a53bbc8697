//! Small statistical helpers shared by the harness and the privacy probes.

/// Two-sided 95% z value.
pub const Z_95: f64 = 1.959963984540054;

/// Wilson score interval for a binomial proportion.
///
/// Returns `(low, high)` with `0 <= low <= high <= 1`. Unlike the normal
/// approximation it stays informative at zero or full counts, which the
/// privacy probes rely on when one arm of a comparison never lands in a bucket.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let total = n;
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // At the boundary counts center == half exactly in real arithmetic; snap
    // the float residue so zero counts keep an exactly-zero lower bound (the
    // log-ratio bounds dispatch on that).
    let low = if successes == 0 { 0.0 } else { ((center - half) / denom).max(0.0) };
    let high = if successes == total { 1.0 } else { ((center + half) / denom).min(1.0) };
    (low, high)
}

/// Conservative bounds on `|ln(p_a / p_b)|` from bucket counts out of `n`
/// trials per arm, using Wilson 95% intervals on each proportion.
///
/// `lower` is a statistically supported lower bound (0 when the intervals
/// overlap), `upper` the matching upper bound (infinity when one arm's interval
/// reaches 0), and `point` the plug-in estimate (infinity when one count is 0).
#[derive(Debug, Clone, Copy)]
pub struct LogRatioBounds {
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
}

pub fn log_ratio_bounds(count_a: u64, count_b: u64, n: u64) -> LogRatioBounds {
    let (lo_a, hi_a) = wilson_interval(count_a, n, Z_95);
    let (lo_b, hi_b) = wilson_interval(count_b, n, Z_95);
    let dir = |lo: f64, hi: f64| if lo > 0.0 && hi > 0.0 { (lo / hi).ln() } else { 0.0 };
    let lower = dir(lo_a, hi_b).max(dir(lo_b, hi_a)).max(0.0);
    let up = |hi: f64, lo: f64| {
        if hi == 0.0 {
            0.0
        } else if lo == 0.0 {
            f64::INFINITY
        } else {
            (hi / lo).ln()
        }
    };
    let upper = up(hi_a, lo_b).max(up(hi_b, lo_a));
    let point = match (count_a, count_b) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => f64::INFINITY,
        (a, b) => ((a as f64) / (b as f64)).ln().abs(),
    };
    LogRatioBounds { lower, upper, point }
}

/// Empirical percentile by linear rank on a sorted copy (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
    }
}

/// Least squares slope of `ln(y)` against `ln(x)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "slope needs at least two points");
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in points {
        assert!(*x > 0.0 && *y > 0.0, "log-log fit needs positive data");
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_basics() {
        let (lo, hi) = wilson_interval(50, 100, Z_95);
        assert!(lo < 0.5 && 0.5 < hi);
        assert!((0.5 - lo - (hi - 0.5)).abs() < 1e-12, "symmetric at p = 1/2");

        let (lo0, hi0) = wilson_interval(0, 1000, Z_95);
        assert_eq!(lo0, 0.0);
        assert!(hi0 > 0.0 && hi0 < 0.01);

        let (lo1, hi1) = wilson_interval(1000, 1000, Z_95);
        assert!(lo1 > 0.99 && lo1 < 1.0);
        assert_eq!(hi1, 1.0);

        assert_eq!(wilson_interval(0, 0, Z_95), (0.0, 1.0));
    }

    #[test]
    fn wilson_covers_truth_at_nominal_rate() {
        // 95% interval should cover p = 0.3 in roughly 95% of repeated draws.
        use crate::noise::RngStream;
        let mut s = RngStream::root(3);
        let n = 200u64;
        let reps = 2000;
        let mut covered = 0;
        for _ in 0..reps {
            let hits = (0..n).filter(|_| s.next_unit_f64() < 0.3).count() as u64;
            let (lo, hi) = wilson_interval(hits, n, Z_95);
            if lo <= 0.3 && 0.3 <= hi {
                covered += 1;
            }
        }
        let rate = covered as f64 / reps as f64;
        assert!(rate > 0.93 && rate <= 1.0, "coverage = {rate}");
    }

    #[test]
    fn log_ratio_bounds_shapes() {
        let b = log_ratio_bounds(500, 500, 1000);
        assert_eq!(b.lower, 0.0);
        assert_eq!(b.point, 0.0);
        assert!(b.upper > 0.0 && b.upper < 0.5);

        let b = log_ratio_bounds(900, 100, 1000);
        assert!(b.lower > 1.5 && b.lower < (9.0f64).ln());
        assert!(b.upper > (9.0f64).ln());
        assert!((b.point - (9.0f64).ln()).abs() < 1e-12);

        let b = log_ratio_bounds(1000, 0, 1000);
        assert!(b.lower > 3.0);
        assert_eq!(b.point, f64::INFINITY);
        assert_eq!(b.upper, f64::INFINITY);

        let b = log_ratio_bounds(0, 0, 1000);
        assert_eq!(b.lower, 0.0);
        assert_eq!(b.point, 0.0);
    }

    #[test]
    fn percentile_and_slope() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.95) - 4.8).abs() < 1e-12);

        let pts: Vec<(f64, f64)> =
            [4.0f64, 16.0, 64.0].iter().map(|&k| (k, 3.0 * k.powf(0.6))).collect();
        assert!((log_log_slope(&pts) - 0.6).abs() < 1e-9);
    }
}
