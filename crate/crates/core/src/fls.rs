//! Fuzzy-logic congestion predictor driven by the relative strength index
//! and a normalized trend of recent telemetry, plus the current queue
//! occupancy.
//!
//! Each input is fuzzified into three triangular terms (shouldered at the
//! edges), the 3×3×3 rule table maps term combinations to an output term,
//! rules fire with `min`, consequents aggregate with `max`, and the clipped
//! output sets are defuzzified by their centroid on a uniform grid over
//! `[0, 1]`. This is a stand-in for the comparison scheme, not a faithful
//! copy of it; every shape and rule is configurable.

use serde::{Deserialize, Serialize};

use crate::controller::ScorePredictor;
use crate::error::{Error, Result};
use crate::telemetry::TelemetryRecord;

/// Membership degrees of the three terms (low, medium, high).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzyDegrees(pub [f64; 3]);

/// Triangular partition with peaks `[a, b, c]`: the first term is 1 up to
/// `a` and falls to 0 at `b`, the middle term peaks at `b`, the last rises
/// from `b` and stays 1 beyond `c`. Inputs outside `[a, c]` are clamped.
pub fn fuzzify(value: f64, peaks: &[f64; 3]) -> FuzzyDegrees {
    let [a, b, c] = *peaks;
    if value <= a {
        FuzzyDegrees([1.0, 0.0, 0.0])
    } else if value >= c {
        FuzzyDegrees([0.0, 0.0, 1.0])
    } else if value <= b {
        let u = (value - a) / (b - a);
        FuzzyDegrees([1.0 - u, u, 0.0])
    } else {
        let u = (value - b) / (c - b);
        FuzzyDegrees([0.0, 1.0 - u, u])
    }
}

/// Relative strength index over the last `window` changes of `series`, with
/// simple averages of gains and losses.
pub fn rsi(series: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidArgument("rsi window must be positive".into()));
    }
    if series.len() < window + 1 {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            required: window + 1,
        });
    }
    let tail = &series[series.len() - window - 1..];
    let (mut gain, mut loss) = (0.0, 0.0);
    for w in tail.windows(2) {
        let d = w[1] - w[0];
        if d > 0.0 {
            gain += d;
        } else {
            loss -= d;
        }
    }
    Ok(if gain == 0.0 && loss == 0.0 {
        50.0
    } else if loss == 0.0 {
        100.0
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    })
}

/// Least-squares slope over the last `window` values (per step), divided by
/// their range; 0 for a flat window.
pub fn trend(series: &[f64], window: usize) -> Result<f64> {
    if window < 2 {
        return Err(Error::InvalidArgument("trend window must be at least 2".into()));
    }
    if series.len() < window {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            required: window,
        });
    }
    let tail = &series[series.len() - window..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if range == 0.0 {
        return Ok(0.0);
    }
    let n = window as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in tail.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    Ok(sxy / sxx / range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsiSource {
    QueueOccupancy,
    ThroughputKbps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlsConfig {
    pub rsi_window: usize,
    pub trend_window: usize,
    /// Series the RSI and trend are computed on.
    pub source: RsiSource,
    pub rsi_peaks: [f64; 3],
    pub trend_peaks: [f64; 3],
    pub occupancy_peaks: [f64; 3],
    /// Output triangles `(start, peak, end)` for low, medium and high.
    pub output_sets: [[f64; 3]; 3],
    /// Output term (0 low, 1 medium, 2 high) for RSI term `r`, trend term
    /// `t` and occupancy term `o` at index `9r + 3t + o`.
    pub rules: Vec<u8>,
    pub grid_points: usize,
}

/// Occupancy term, raised one level when RSI is high and the trend rising.
pub fn default_rules() -> Vec<u8> {
    let mut rules = Vec::with_capacity(27);
    for r in 0..3u8 {
        for t in 0..3u8 {
            for o in 0..3u8 {
                let escalate = u8::from(r == 2 && t == 2);
                rules.push((o + escalate).min(2));
            }
        }
    }
    rules
}

impl Default for FlsConfig {
    fn default() -> Self {
        Self {
            rsi_window: 10,
            trend_window: 5,
            source: RsiSource::QueueOccupancy,
            rsi_peaks: [0.0, 50.0, 100.0],
            trend_peaks: [-0.25, 0.0, 0.25],
            occupancy_peaks: [0.1, 0.5, 0.9],
            output_sets: [[0.0, 0.15, 0.3], [0.3, 0.5, 0.7], [0.7, 0.85, 1.0]],
            rules: default_rules(),
            grid_points: 201,
        }
    }
}

impl FlsConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |p: &[f64; 3]| p[0] < p[1] && p[1] < p[2];
        if !(ordered(&self.rsi_peaks) && ordered(&self.trend_peaks) && ordered(&self.occupancy_peaks)) {
            return Err(Error::Config("fls membership peaks must be strictly increasing".into()));
        }
        if self
            .output_sets
            .iter()
            .any(|s| !(0.0 <= s[0] && s[0] < s[1] && s[1] < s[2] && s[2] <= 1.0))
        {
            return Err(Error::Config("fls output sets must be ordered triangles within [0, 1]".into()));
        }
        if self.rules.len() != 27 || self.rules.iter().any(|&k| k > 2) {
            return Err(Error::Config("fls rule table needs 27 entries in 0..=2".into()));
        }
        if self.rsi_window == 0 || self.trend_window < 2 || self.grid_points < 2 {
            return Err(Error::Config("fls windows or grid too small".into()));
        }
        Ok(())
    }
}

fn triangle(y: f64, [a, b, c]: [f64; 3]) -> f64 {
    if y <= a || y >= c {
        0.0
    } else if y <= b {
        (y - a) / (b - a)
    } else {
        (c - y) / (c - b)
    }
}

/// Mamdani min–max inference with centroid defuzzification.
pub fn fls_score(rsi_value: f64, trend_value: f64, occupancy: f64, config: &FlsConfig) -> f64 {
    let r = fuzzify(rsi_value, &config.rsi_peaks).0;
    let t = fuzzify(trend_value, &config.trend_peaks).0;
    let o = fuzzify(occupancy, &config.occupancy_peaks).0;
    let mut strength = [0.0f64; 3];
    for (i, &ri) in r.iter().enumerate() {
        for (j, &tj) in t.iter().enumerate() {
            for (k, &ok) in o.iter().enumerate() {
                let term = config.rules[9 * i + 3 * j + k] as usize;
                strength[term] = strength[term].max(ri.min(tj).min(ok));
            }
        }
    }
    let n = config.grid_points;
    let (mut num, mut den) = (0.0, 0.0);
    for step in 0..n {
        let y = step as f64 / (n - 1) as f64;
        let mu = (0..3)
            .map(|k| strength[k].min(triangle(y, config.output_sets[k])))
            .fold(0.0, f64::max);
        num += y * mu;
        den += mu;
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlsPredictor {
    pub config: FlsConfig,
}

impl FlsPredictor {
    pub fn new(config: FlsConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// The `(rsi, trend, occupancy)` inputs for a window.
    pub fn inputs(&self, window: &[TelemetryRecord]) -> Result<(f64, f64, f64)> {
        let series: Vec<f64> = window
            .iter()
            .map(|r| match self.config.source {
                RsiSource::QueueOccupancy => r.queue_occupancy,
                RsiSource::ThroughputKbps => r.throughput_kbps,
            })
            .collect();
        let occupancy = window.last().ok_or(Error::Empty("telemetry window"))?.queue_occupancy;
        Ok((
            rsi(&series, self.config.rsi_window)?,
            trend(&series, self.config.trend_window)?,
            occupancy,
        ))
    }
}

impl ScorePredictor for FlsPredictor {
    fn required_history(&self) -> usize {
        (self.config.rsi_window + 1).max(self.config.trend_window)
    }

    fn score(&self, window: &[TelemetryRecord]) -> Result<f64> {
        let (r, t, o) = self.inputs(window)?;
        Ok(fls_score(r, t, o, &self.config))
    }

    fn id(&self) -> &str {
        "fls"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rsi_endpoints() {
        let up: Vec<f64> = (0..11).map(f64::from).collect();
        let down: Vec<f64> = up.iter().rev().copied().collect();
        let zigzag: Vec<f64> = (0..11).map(|k| f64::from(k % 2)).collect();
        assert_eq!(rsi(&up, 10).unwrap(), 100.0);
        assert_eq!(rsi(&down, 10).unwrap(), 0.0);
        assert_eq!(rsi(&zigzag, 10).unwrap(), 50.0);
        assert_eq!(rsi(&[3.0; 11], 10).unwrap(), 50.0);
        assert!(rsi(&up[..10], 10).is_err());
    }

    #[test]
    fn trend_examples() {
        assert_eq!(trend(&[2.0; 5], 5).unwrap(), 0.0);
        assert_abs_diff_eq!(trend(&[0.0, 1.0, 2.0, 3.0, 4.0], 5).unwrap(), 0.25, epsilon = 1e-15);
        let s = [0.3, 0.1, 0.7, 0.2, 0.9];
        let r: Vec<f64> = s.iter().rev().copied().collect();
        assert_abs_diff_eq!(trend(&s, 5).unwrap(), -trend(&r, 5).unwrap(), epsilon = 1e-15);
        assert!(trend(&s[..4], 5).is_err());
    }

    #[test]
    fn fuzzify_examples() {
        let p = [0.1, 0.5, 0.9];
        assert_eq!(fuzzify(0.5, &p).0, [0.0, 1.0, 0.0]);
        let mid = fuzzify(0.3, &p).0;
        assert_abs_diff_eq!(mid[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mid[1], 0.5, epsilon = 1e-12);
        assert_eq!(fuzzify(-3.0, &p).0, [1.0, 0.0, 0.0]);
        assert_eq!(fuzzify(7.0, &p).0, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn score_reference_points() {
        // Reference values from an independent evaluation of the same rule
        // base on the same 201-point grid.
        let c = FlsConfig::default();
        let hot = fls_score(100.0, 0.25, 0.95, &c);
        let calm = fls_score(50.0, 0.0, 0.05, &c);
        assert_abs_diff_eq!(hot, 0.85, epsilon = 1e-9);
        assert_abs_diff_eq!(calm, 0.15, epsilon = 1e-9);
        assert!(hot > 0.7 && calm < 0.3);
    }

    #[test]
    fn monotone_at_term_peaks() {
        let c = FlsConfig::default();
        for trend_value in [-0.25, 0.0, 0.25] {
            for occ in [0.0, 0.1, 0.5, 0.9, 1.0] {
                let s: Vec<f64> = (0..=50).map(|k| fls_score(2.0 * k as f64, trend_value, occ, &c)).collect();
                assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12), "rsi sweep at {trend_value}, {occ}");
            }
            for r in [0.0, 50.0, 100.0] {
                let s: Vec<f64> = (0..=50).map(|k| fls_score(r, trend_value, k as f64 / 50.0, &c)).collect();
                assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12), "occupancy sweep at {r}, {trend_value}");
            }
        }
    }

    #[test]
    fn predictor_needs_eleven_records() {
        let p = FlsPredictor::new(FlsConfig::default()).unwrap();
        assert_eq!(p.required_history(), 11);
        let rec = |occ: f64| TelemetryRecord {
            timestamp_s: 0.0,
            throughput_kbps: 50.0,
            delay_ms: 10.0,
            packet_loss_rate: 0.0,
            queue_occupancy: occ,
            active_devices: 20,
            label: crate::telemetry::CongestionLevel::Low,
        };
        let rising: Vec<TelemetryRecord> = (0..11).map(|k| rec(0.5 + 0.05 * k as f64)).collect();
        let (r, t, o) = p.inputs(&rising).unwrap();
        assert_eq!(r, 100.0);
        assert!(t > 0.0);
        assert_abs_diff_eq!(o, 1.0, epsilon = 1e-12);
        assert!(p.score(&rising).unwrap() > 0.7);
        assert!(p.score(&rising[..10]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FlsConfig::default().validate().is_ok());
        let mut bad = FlsConfig::default();
        bad.rules.pop();
        assert!(bad.validate().is_err());
        let bad = FlsConfig {
            rsi_peaks: [0.0, 100.0, 50.0],
            ..FlsConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn score_in_unit_interval(r in 0.0..=100.0f64, t in -1.0..=1.0f64, o in 0.0..=1.0f64) {
            let s = fls_score(r, t, o, &FlsConfig::default());
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn rsi_is_bounded_and_scale_invariant(v in proptest::collection::vec(0.0..10.0f64, 11), k in 0.1..100.0f64) {
            let a = rsi(&v, 10).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let b = rsi(&scaled, 10).unwrap();
            prop_assert!((0.0..=100.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn adjacent_degrees_sum_to_one(v in -1.0..2.0f64) {
            let d = fuzzify(v, &[0.1, 0.5, 0.9]).0;
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
