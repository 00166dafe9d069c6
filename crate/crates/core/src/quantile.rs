//! Linear quantile regression of confidence on distortion level.
//!
//! For a single regressor the objective `sum rho_tau(y - b0 - b1 q)` is
//! minimized exactly:
//!
//! * up to [`EXHAUSTIVE_LIMIT`] points, by evaluating every line through two
//!   points with distinct `q` (an optimal line always passes through two data
//!   points);
//! * above that, by golden-section search on the profile objective
//!   `g(b1) = min_b0 sum rho_tau(y - b1 q - b0)`, which is convex in `b1` and
//!   whose inner minimum is attained at a `tau`-quantile of `y - b1 q`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EXHAUSTIVE_LIMIT: usize = 64;
/// Minimum population for an interval fit.
pub const MIN_INTERVAL_POINTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points share the same q; slope is not identifiable")]
    DegenerateDesign,
    #[error("non-finite input point")]
    NonFinite,
    #[error("breakpoints must be increasing and hold at least 2 values")]
    BadBreakpoints,
    #[error("bin width must be positive and no wider than the range")]
    BadBinWidth,
    #[error("interval [{lo}, {hi}] holds {found} bin medians, need at least 2")]
    NoBinsInInterval { lo: f64, hi: f64, found: usize },
    #[error("i/o error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn check_tau(tau: f64) -> Result<(), QuantileError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(QuantileError::TauOutOfRange(tau))
    }
}

/// Check loss `tau max(x, 0) + (1 - tau) max(-x, 0)`.
pub fn pinball_loss(residual: f64, tau: f64) -> Result<f64, QuantileError> {
    check_tau(tau)?;
    Ok(rho(residual, tau))
}

#[inline]
fn rho(x: f64, tau: f64) -> f64 {
    if x >= 0.0 {
        tau * x
    } else {
        (tau - 1.0) * x
    }
}

/// Objective value of the line `b0 + b1 q` over `points`.
pub fn pinball_objective(points: &[(f64, f64)], tau: f64, beta0: f64, beta1: f64) -> f64 {
    points
        .iter()
        .map(|&(q, y)| rho(y - beta0 - beta1 * q, tau))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileFit {
    pub tau: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub pinball_total: f64,
    pub n_points: usize,
}

impl QuantileFit {
    pub fn predict(&self, q: f64) -> f64 {
        self.beta0 + self.beta1 * q
    }
}

/// Index of a `tau`-quantile order statistic among `n` values.
fn quantile_rank(n: usize, tau: f64) -> usize {
    ((n as f64 * tau).ceil() as usize).clamp(1, n) - 1
}

/// Best intercept and objective for a fixed slope.
fn profile(points: &[(f64, f64)], tau: f64, beta1: f64, scratch: &mut Vec<f64>) -> (f64, f64) {
    scratch.clear();
    scratch.extend(points.iter().map(|&(q, y)| y - beta1 * q));
    let k = quantile_rank(scratch.len(), tau);
    let (_, &mut b0, _) = scratch.select_nth_unstable_by(k, f64::total_cmp);
    (b0, pinball_objective(points, tau, b0, beta1))
}

fn fit_exhaustive(points: &[(f64, f64)], tau: f64) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, f64::INFINITY);
    for (i, &(qi, yi)) in points.iter().enumerate() {
        for &(qj, yj) in &points[i + 1..] {
            if qi == qj {
                continue;
            }
            let b1 = (yj - yi) / (qj - qi);
            let b0 = yi - b1 * qi;
            let obj = pinball_objective(points, tau, b0, b1);
            if obj < best.2 {
                best = (b0, b1, obj);
            }
        }
    }
    best
}

fn fit_profile(points: &[(f64, f64)], tau: f64) -> (f64, f64, f64) {
    let mut scratch = Vec::with_capacity(points.len());
    let mut g = |b1: f64| profile(points, tau, b1, &mut scratch).1;

    let (qmin, qmax, ymin, ymax) = points.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), &(q, y)| (a.min(q), b.max(q), c.min(y), d.max(y)),
    );
    let mut step = ((ymax - ymin) / (qmax - qmin)).max(1e-9);

    // Downhill bracket around 0; g is convex so the minimizer lies in [lo, hi].
    let f0 = g(0.0);
    let (lo, hi) = if g(step) < f0 {
        let (mut a, mut b) = (0.0, step);
        let mut fb = g(b);
        loop {
            step *= 2.0;
            let c = b + step;
            let fc = g(c);
            if fc >= fb {
                break (a, c);
            }
            (a, b, fb) = (b, c, fc);
        }
    } else if g(-step) < f0 {
        let (mut a, mut b) = (0.0, -step);
        let mut fb = g(b);
        loop {
            step *= 2.0;
            let c = b - step;
            let fc = g(c);
            if fc >= fb {
                break (c, a);
            }
            (a, b, fb) = (b, c, fc);
        }
    } else {
        (-step, step)
    };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (g(c), g(d));
    for _ in 0..400 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = g(d);
        }
    }
    let b1 = if fc <= fd { c } else { d };
    let (b0, obj) = profile(points, tau, b1, &mut scratch);
    (b0, b1, obj)
}

/// Minimizes the pinball objective over lines `b0 + b1 q`.
///
/// The minimizer need not be unique; any optimal line may be returned.
pub fn fit_quantile_line(points: &[(f64, f64)], tau: f64) -> Result<QuantileFit, QuantileError> {
    check_tau(tau)?;
    if points.len() < 2 {
        return Err(QuantileError::TooFewPoints(points.len()));
    }
    if points.iter().any(|(q, y)| !q.is_finite() || !y.is_finite()) {
        return Err(QuantileError::NonFinite);
    }
    let q0 = points[0].0;
    if points.iter().all(|p| p.0 == q0) {
        return Err(QuantileError::DegenerateDesign);
    }
    let (beta0, beta1, pinball_total) = if points.len() <= EXHAUSTIVE_LIMIT {
        fit_exhaustive(points, tau)
    } else {
        fit_profile(points, tau)
    };
    let (q_lo, q_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    Ok(QuantileFit {
        tau,
        q_lo,
        q_hi,
        beta0,
        beta1,
        pinball_total,
        n_points: points.len(),
    })
}

/// `0, 0.5, ..., 4.0`: eight half-unit intervals.
pub fn default_breakpoints() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.5).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalFit {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
    /// `None` when the interval is too sparse to fit.
    pub fit: Option<QuantileFit>,
    pub note: Option<String>,
}

/// Index of the interval holding `q`: half-open except the last, which is closed.
fn interval_index(breakpoints: &[f64], q: f64) -> Option<usize> {
    let last = breakpoints.len() - 1;
    if q < breakpoints[0] || q > breakpoints[last] {
        return None;
    }
    if q == breakpoints[last] {
        return Some(last - 1);
    }
    Some(breakpoints.partition_point(|&b| b <= q) - 1)
}

fn check_breakpoints(breakpoints: &[f64]) -> Result<(), QuantileError> {
    if breakpoints.len() < 2
        || breakpoints.iter().any(|b| !b.is_finite())
        || breakpoints.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(QuantileError::BadBreakpoints);
    }
    Ok(())
}

/// Independent quantile fits on each interval between consecutive breakpoints.
pub fn fit_interval_models(
    points: &[(f64, f64)],
    tau: f64,
    breakpoints: &[f64],
) -> Result<Vec<IntervalFit>, QuantileError> {
    check_tau(tau)?;
    check_breakpoints(breakpoints)?;
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); breakpoints.len() - 1];
    for &p in points {
        if let Some(i) = interval_index(breakpoints, p.0) {
            buckets[i].push(p);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, pts)| {
            let (lo, hi) = (breakpoints[i], breakpoints[i + 1]);
            let n_points = pts.len();
            let sparse = |why: String| IntervalFit {
                lo,
                hi,
                n_points,
                fit: None,
                note: Some(why),
            };
            if n_points < MIN_INTERVAL_POINTS {
                return Ok(sparse(format!("sparse interval: {n_points} points")));
            }
            match fit_quantile_line(&pts, tau) {
                Ok(mut fit) => {
                    fit.q_lo = lo;
                    fit.q_hi = hi;
                    Ok(IntervalFit {
                        lo,
                        hi,
                        n_points,
                        fit: Some(fit),
                        note: None,
                    })
                }
                Err(QuantileError::DegenerateDesign) => {
                    Ok(sparse("sparse interval: fewer than 2 distinct q".into()))
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinMedian {
    pub q_center: f64,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinMedianTable {
    pub bin_width: f64,
    pub bins: Vec<BinMedian>,
}

/// Sample median; even counts average the two central order statistics.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median confidence per equal-width bin of `q` over `[range.0, range.1]`.
/// Empty bins are omitted; points outside the range are ignored.
pub fn empirical_bin_medians(
    points: &[(f64, f64)],
    bin_width: f64,
    range: (f64, f64),
) -> Result<BinMedianTable, QuantileError> {
    let (lo, hi) = range;
    if [bin_width, lo, hi].iter().any(|v| !v.is_finite())
        || bin_width <= 0.0
        || hi <= lo
        || bin_width > hi - lo + 1e-12
    {
        return Err(QuantileError::BadBinWidth);
    }
    let n_bins = (((hi - lo) / bin_width).round() as usize).max(1);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(q, y) in points {
        if q < lo || q > hi {
            continue;
        }
        let idx = (((q - lo) / bin_width).floor() as usize).min(n_bins - 1);
        groups[idx].push(y);
    }
    let bins = groups
        .into_iter()
        .enumerate()
        .filter_map(|(i, mut ys)| {
            let count = ys.len();
            median(&mut ys).map(|m| BinMedian {
                q_center: lo + (i as f64 + 0.5) * bin_width,
                median: m,
                count,
            })
        })
        .collect();
    Ok(BinMedianTable { bin_width, bins })
}

/// Largest gap between a fitted line and the bin medians whose centers fall
/// inside the fit's interval.
pub fn adequacy_check(fit: &QuantileFit, table: &BinMedianTable) -> Result<f64, QuantileError> {
    let inside: Vec<&BinMedian> = table
        .bins
        .iter()
        .filter(|b| b.q_center >= fit.q_lo && b.q_center <= fit.q_hi)
        .collect();
    if inside.len() < 2 {
        return Err(QuantileError::NoBinsInInterval {
            lo: fit.q_lo,
            hi: fit.q_hi,
            found: inside.len(),
        });
    }
    Ok(inside
        .iter()
        .map(|b| (b.median - fit.predict(b.q_center)).abs())
        .fold(0.0, f64::max))
}

pub const FITS_CSV_HEADER: &str = "interval_lo,interval_hi,tau,beta0,beta1,pinball_total,n_points";
pub const BINS_CSV_HEADER: &str = "q_center,median,count";

/// Interval fits as CSV; absent fits carry `NA` coefficients.
pub fn fits_to_csv(fits: &[IntervalFit], tau: f64) -> String {
    let mut out = format!("{FITS_CSV_HEADER}\n");
    for f in fits {
        match &f.fit {
            Some(fit) => out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.9},{}\n",
                f.lo, f.hi, tau, fit.beta0, fit.beta1, fit.pinball_total, f.n_points
            )),
            None => out.push_str(&format!(
                "{},{},{},NA,NA,NA,{}\n",
                f.lo, f.hi, tau, f.n_points
            )),
        }
    }
    out
}

pub fn bins_to_csv(table: &BinMedianTable) -> String {
    let mut out = format!("{BINS_CSV_HEADER}\n");
    for b in &table.bins {
        out.push_str(&format!("{},{:.9},{}\n", b.q_center, b.median, b.count));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<(), QuantileError> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| QuantileError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_cases() {
        assert_eq!(pinball_loss(4.0, 0.5).unwrap(), 2.0);
        assert_eq!(pinball_loss(-4.0, 0.5).unwrap(), 2.0);
        assert_eq!(pinball_loss(0.0, 0.3).unwrap(), 0.0);
        assert!((pinball_loss(-1.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(
            pinball_loss(1.0, 1.0),
            Err(QuantileError::TauOutOfRange(_))
        ));
        assert!(pinball_loss(1.0, 0.0).is_err());
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            fit_quantile_line(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)], 0.5),
            Err(QuantileError::DegenerateDesign)
        );
        assert_eq!(
            fit_quantile_line(&[(1.0, 1.0)], 0.5),
            Err(QuantileError::TooFewPoints(1))
        );
        assert!(fit_quantile_line(&[(0.0, 1.0), (1.0, f64::NAN)], 0.5).is_err());
    }

    #[test]
    fn near_constant_design_may_pick_steep_line() {
        // The steep line through the outer points beats the flat median line.
        let pts = [(0.0, 1.0), (1e-6, 2.0), (-1e-6, 3.0)];
        let fit = fit_quantile_line(&pts, 0.5).unwrap();
        assert!((fit.pinball_total - 0.75).abs() < 1e-9, "{fit:?}");
        assert!(fit.pinball_total < pinball_objective(&pts, 0.5, 2.0, 0.0));
    }

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let q = i as f64 * 0.02;
                (q, 0.6 - 0.075 * q)
            })
            .collect();
        for tau in [0.25, 0.5, 0.75] {
            let fit = fit_quantile_line(&pts, tau).unwrap();
            assert!(fit.pinball_total < 1e-9, "{fit:?}");
            assert!((fit.beta1 + 0.075).abs() < 1e-6);
        }
    }

    #[test]
    fn profile_agrees_with_exhaustive() {
        let mut state = 12345u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let pts: Vec<(f64, f64)> = (0..60)
                .map(|_| {
                    let q = 4.0 * next();
                    (q, 0.6 - 0.07 * q + 0.2 * (next() - 0.5))
                })
                .collect();
            for tau in [0.2, 0.5, 0.8] {
                let (_, _, exact) = fit_exhaustive(&pts, tau);
                let (_, _, prof) = fit_profile(&pts, tau);
                assert!(
                    (exact - prof).abs() <= 1e-9 * (1.0 + exact),
                    "{exact} vs {prof}"
                );
            }
        }
    }

    #[test]
    fn interval_membership() {
        let bp = default_breakpoints();
        assert_eq!(bp.len(), 9);
        assert_eq!(interval_index(&bp, 0.0), Some(0));
        assert_eq!(interval_index(&bp, 0.5), Some(1));
        assert_eq!(interval_index(&bp, 0.4999), Some(0));
        assert_eq!(interval_index(&bp, 4.0), Some(7));
        assert_eq!(interval_index(&bp, 4.01), None);
    }

    #[test]
    fn single_interval_population() {
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|i| (1.0 + i as f64 / 100.0, 0.5 - i as f64 / 200.0))
            .collect();
        let fits = fit_interval_models(&pts, 0.5, &default_breakpoints()).unwrap();
        assert_eq!(fits.len(), 8);
        assert_eq!(fits.iter().filter(|f| f.fit.is_some()).count(), 1);
        let f = fits[2].fit.unwrap();
        assert_eq!((f.q_lo, f.q_hi), (1.0, 1.5));
        assert!(fits[0].note.as_deref().unwrap().contains("sparse"));
    }

    #[test]
    fn one_distinct_q_is_sparse() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (0.9, i as f64 / 20.0)).collect();
        let fits = fit_interval_models(&pts, 0.5, &default_breakpoints()).unwrap();
        assert!(fits.iter().all(|f| f.fit.is_none()));
    }

    #[test]
    fn bin_medians() {
        let t = empirical_bin_medians(&[(1.1, 0.7)], 0.25, (0.0, 4.0)).unwrap();
        assert_eq!(
            t.bins,
            vec![BinMedian {
                q_center: 1.125,
                median: 0.7,
                count: 1
            }]
        );
        let t =
            empirical_bin_medians(&[(0.1, 0.2), (0.2, 0.4), (4.0, 0.9)], 0.25, (0.0, 4.0)).unwrap();
        assert_eq!(t.bins.len(), 2);
        assert!((t.bins[0].median - 0.3).abs() < 1e-15);
        assert_eq!(t.bins[1].q_center, 3.875);
        assert!(empirical_bin_medians(&[], 0.0, (0.0, 4.0)).is_err());
    }

    #[test]
    fn adequacy_cases() {
        let table = BinMedianTable {
            bin_width: 0.25,
            bins: vec![
                BinMedian {
                    q_center: 0.125,
                    median: 0.4,
                    count: 3,
                },
                BinMedian {
                    q_center: 0.375,
                    median: 0.5,
                    count: 3,
                },
                BinMedian {
                    q_center: 0.625,
                    median: 0.9,
                    count: 3,
                },
            ],
        };
        let flat = QuantileFit {
            tau: 0.5,
            q_lo: 0.0,
            q_hi: 0.5,
            beta0: 0.45,
            beta1: 0.0,
            pinball_total: 0.0,
            n_points: 6,
        };
        assert!((adequacy_check(&flat, &table).unwrap() - 0.05).abs() < 1e-15);
        let exact = QuantileFit {
            beta0: 0.35,
            beta1: 0.4,
            ..flat
        };
        assert!(adequacy_check(&exact, &table).unwrap() < 1e-15);
        let empty = QuantileFit {
            q_lo: 2.0,
            q_hi: 2.5,
            ..flat
        };
        assert!(matches!(
            adequacy_check(&empty, &table),
            Err(QuantileError::NoBinsInInterval { found: 0, .. })
        ));
    }

    #[test]
    fn csv_exports() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| (1.0 + i as f64 / 100.0, 0.5)).collect();
        let fits = fit_interval_models(&pts, 0.5, &default_breakpoints()).unwrap();
        let csv = fits_to_csv(&fits, 0.5);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().nth(1).unwrap().contains("NA"));
        let t = empirical_bin_medians(&pts, 0.25, (0.0, 4.0)).unwrap();
        assert_eq!(bins_to_csv(&t).lines().next().unwrap(), BINS_CSV_HEADER);
    }
}
