//! Throughput, delay and loss accounting, and run-level reports.
//!
//! Two throughput figures are kept apart throughout: `throughput_kbps` is
//! delivered bits per interval, `throughput_eq7_kbps` is the window-over-RTT
//! form `N / RTT`. Because the simulated path is one-way, the RTT is taken as
//! twice the mean total delay of the interval and `N` as the mean number of
//! bits inside the gateway over the interval (delivered rate × mean delay).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControlAction;
use crate::error::{Error, Result};
use crate::sim::{DelayBreakdown, IntervalCounters};

/// `N` bits carried per round trip of `rtt_s` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputSample {
    pub bits: f64,
    pub rtt_s: f64,
}

/// `N / RTT`, in Kbps.
pub fn throughput_eq7(sample: ThroughputSample) -> Result<f64> {
    if !(sample.rtt_s > 0.0) {
        return Err(Error::InvalidArgument(format!("RTT {} s must be positive", sample.rtt_s)));
    }
    if !(sample.bits >= 0.0) {
        return Err(Error::InvalidArgument(format!("bit count {} must be non-negative", sample.bits)));
    }
    Ok(sample.bits / sample.rtt_s / 1000.0)
}

pub fn total_delay(b: &DelayBreakdown) -> Result<f64> {
    let parts = [b.propagation_ms, b.transmission_ms, b.queueing_ms, b.processing_ms];
    if parts.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative delay component in {b:?}")));
    }
    Ok(b.total_ms())
}

pub fn packet_loss_rate(dropped: u64, injected: u64) -> Result<f64> {
    if dropped > injected {
        return Err(Error::InvalidArgument(format!("{dropped} drops out of {injected} packets")));
    }
    Ok(if injected == 0 { 0.0 } else { dropped as f64 / injected as f64 })
}

/// Average of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Nearest-rank percentile, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub index: usize,
    /// End of the interval, seconds.
    pub time_s: f64,
    pub throughput_kbps: f64,
    pub throughput_eq7_kbps: Option<f64>,
    pub mean_delay_ms: f64,
    pub median_delay_ms: f64,
    pub p95_delay_ms: f64,
    pub mean_breakdown: DelayBreakdown,
    pub delivered: u64,
    pub gateway_arrivals: u64,
    pub dropped: u64,
    pub throttled: u64,
    pub loss_rate: f64,
    pub occupancy: f64,
    pub action: ControlAction,
    /// No packet was delivered; delay figures are reported as 0.
    pub empty: bool,
}

impl IntervalMetrics {
    pub fn from_counters(c: &IntervalCounters) -> Result<Self> {
        let totals: Vec<f64> = c.delays.iter().map(total_delay).collect::<Result<_>>()?;
        let n = c.delays.len() as f64;
        let mean_breakdown = if c.delays.is_empty() {
            DelayBreakdown::default()
        } else {
            let sum = |f: fn(&DelayBreakdown) -> f64| c.delays.iter().map(f).sum::<f64>() / n;
            DelayBreakdown {
                propagation_ms: sum(|d| d.propagation_ms),
                transmission_ms: sum(|d| d.transmission_ms),
                queueing_ms: sum(|d| d.queueing_ms),
                processing_ms: sum(|d| d.processing_ms),
            }
        };
        let mean_delay_ms = mean(&totals).unwrap_or(0.0);
        let width = c.end_s - c.start_s;
        let throughput_eq7_kbps = if totals.is_empty() {
            None
        } else {
            let in_system_bits = c.delivered_bits / width * mean_delay_ms / 1000.0;
            Some(throughput_eq7(ThroughputSample {
                bits: in_system_bits,
                rtt_s: 2.0 * mean_delay_ms / 1000.0,
            })?)
        };
        Ok(Self {
            index: c.index,
            time_s: c.end_s,
            throughput_kbps: c.throughput_kbps(),
            throughput_eq7_kbps,
            mean_delay_ms,
            median_delay_ms: median(&totals).unwrap_or(0.0),
            p95_delay_ms: percentile(&totals, 0.95).unwrap_or(0.0),
            mean_breakdown,
            delivered: c.delivered,
            gateway_arrivals: c.gateway_arrivals,
            dropped: c.dropped,
            throttled: c.throttled,
            loss_rate: packet_loss_rate(c.dropped, c.gateway_arrivals)?,
            occupancy: c.occupancy,
            action: c.action,
            empty: c.is_empty(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub intervals: usize,
    pub mean_throughput_kbps: f64,
    pub median_throughput_kbps: f64,
    pub p95_throughput_kbps: f64,
    /// Packet-weighted mean total delay.
    pub mean_delay_ms: f64,
    /// Median and p95 of the per-interval mean delays (non-empty intervals).
    pub median_delay_ms: f64,
    pub p95_delay_ms: f64,
    pub mean_throughput_eq7_kbps: f64,
    /// Pooled: total drops over total gateway arrivals.
    pub loss_rate: f64,
    pub delivered: u64,
    pub gateway_arrivals: u64,
    pub dropped: u64,
    pub throttled: u64,
    pub shaping_intervals: usize,
    pub qos_intervals: usize,
}

pub fn aggregate(intervals: &[IntervalMetrics]) -> Result<RunSummary> {
    if intervals.is_empty() {
        return Err(Error::Empty("interval metrics"));
    }
    let throughput: Vec<f64> = intervals.iter().map(|i| i.throughput_kbps).collect();
    let delays: Vec<f64> = intervals.iter().filter(|i| !i.empty).map(|i| i.mean_delay_ms).collect();
    let eq7: Vec<f64> = intervals.iter().filter_map(|i| i.throughput_eq7_kbps).collect();
    let delivered: u64 = intervals.iter().map(|i| i.delivered).sum();
    let delay_sum: f64 = intervals.iter().map(|i| i.mean_delay_ms * i.delivered as f64).sum();
    let dropped = intervals.iter().map(|i| i.dropped).sum();
    let arrivals = intervals.iter().map(|i| i.gateway_arrivals).sum();
    let count = |a: ControlAction| intervals.iter().filter(|i| i.action == a).count();
    Ok(RunSummary {
        intervals: intervals.len(),
        mean_throughput_kbps: mean(&throughput).unwrap_or(0.0),
        median_throughput_kbps: median(&throughput).unwrap_or(0.0),
        p95_throughput_kbps: percentile(&throughput, 0.95).unwrap_or(0.0),
        mean_delay_ms: if delivered == 0 { 0.0 } else { delay_sum / delivered as f64 },
        median_delay_ms: median(&delays).unwrap_or(0.0),
        p95_delay_ms: percentile(&delays, 0.95).unwrap_or(0.0),
        mean_throughput_eq7_kbps: mean(&eq7).unwrap_or(0.0),
        loss_rate: packet_loss_rate(dropped, arrivals)?,
        delivered,
        gateway_arrivals: arrivals,
        dropped,
        throttled: intervals.iter().map(|i| i.throttled).sum(),
        shaping_intervals: count(ControlAction::TrafficShaping),
        qos_intervals: count(ControlAction::QoSAdjustment),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    /// `lstm`, `fls` or `none`.
    pub predictor: String,
    /// Traffic seed; paired runs share it.
    pub seed: u64,
    /// Master seed and run index the traffic seed was derived from.
    pub master_seed: u64,
    pub run: usize,
    pub offered_load: f64,
    pub config_digest: String,
    pub summary: RunSummary,
    pub intervals: Vec<IntervalMetrics>,
}

impl ExperimentReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("serializing report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("parsing report: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::nn::checkpoint::write_atomic(path.as_ref(), self.to_toml()?.as_bytes())
    }

    pub fn write_series_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "time_s,throughput_kbps,throughput_eq7_kbps,mean_delay_ms,median_delay_ms,p95_delay_ms,loss_rate,occupancy,action"
        )?;
        for i in &self.intervals {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                i.time_s,
                i.throughput_kbps,
                i.throughput_eq7_kbps.map(|v| v.to_string()).unwrap_or_default(),
                i.mean_delay_ms,
                i.median_delay_ms,
                i.p95_delay_ms,
                i.loss_rate,
                i.occupancy,
                i.action
            )?;
        }
        out.flush()
    }
}

/// Candidate minus baseline for one scenario and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub baseline: String,
    pub candidate: String,
    pub delta_loss_rate: f64,
    pub delta_mean_delay_ms: f64,
    pub delta_throughput_kbps: f64,
    /// `(candidate - baseline) / baseline` loss; 0 when the baseline is lossless.
    pub relative_loss_change: f64,
}

pub fn compare(baseline: &ExperimentReport, candidate: &ExperimentReport) -> Result<Comparison> {
    if baseline.scenario != candidate.scenario || baseline.seed != candidate.seed {
        return Err(Error::Pairing(format!(
            "{}/{} vs {}/{}: reports must share scenario and seed",
            baseline.scenario, baseline.seed, candidate.scenario, candidate.seed
        )));
    }
    let (b, c) = (&baseline.summary, &candidate.summary);
    Ok(Comparison {
        scenario: baseline.scenario.clone(),
        seed: baseline.seed,
        baseline: baseline.predictor.clone(),
        candidate: candidate.predictor.clone(),
        delta_loss_rate: c.loss_rate - b.loss_rate,
        delta_mean_delay_ms: c.mean_delay_ms - b.mean_delay_ms,
        delta_throughput_kbps: c.mean_throughput_kbps - b.mean_throughput_kbps,
        relative_loss_change: if b.loss_rate == 0.0 { 0.0 } else { (c.loss_rate - b.loss_rate) / b.loss_rate },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn interval(index: usize, dropped: u64, arrivals: u64, delays: &[f64]) -> IntervalMetrics {
        let c = IntervalCounters {
            index,
            start_s: index as f64 * 10.0,
            end_s: (index + 1) as f64 * 10.0,
            gateway_arrivals: arrivals,
            dropped,
            delivered: delays.len() as u64,
            delivered_bits: delays.len() as f64 * 1000.0,
            delays: delays
                .iter()
                .map(|&q| DelayBreakdown {
                    propagation_ms: 5.0,
                    transmission_ms: 10.0,
                    queueing_ms: q,
                    processing_ms: 1.0,
                })
                .collect(),
            ..IntervalCounters::default()
        };
        IntervalMetrics::from_counters(&c).unwrap()
    }

    fn report(predictor: &str, seed: u64, intervals: Vec<IntervalMetrics>) -> ExperimentReport {
        ExperimentReport {
            scenario: "high".into(),
            predictor: predictor.into(),
            seed,
            master_seed: 1,
            run: 0,
            offered_load: 1.25,
            config_digest: "abc".into(),
            summary: aggregate(&intervals).unwrap(),
            intervals,
        }
    }

    #[test]
    fn eq7_examples() {
        assert_eq!(throughput_eq7(ThroughputSample { bits: 59_000.0, rtt_s: 1.0 }).unwrap(), 59.0);
        assert_eq!(throughput_eq7(ThroughputSample { bits: 0.0, rtt_s: 0.3 }).unwrap(), 0.0);
        let one = throughput_eq7(ThroughputSample { bits: 1234.0, rtt_s: 0.2 }).unwrap();
        let two = throughput_eq7(ThroughputSample { bits: 2468.0, rtt_s: 0.2 }).unwrap();
        assert_eq!(two, 2.0 * one);
        assert!(throughput_eq7(ThroughputSample { bits: 1.0, rtt_s: 0.0 }).is_err());
    }

    #[test]
    fn delay_and_loss_examples() {
        let d = DelayBreakdown {
            propagation_ms: 2.0,
            transmission_ms: 3.0,
            queueing_ms: 5.0,
            processing_ms: 1.0,
        };
        assert_eq!(total_delay(&d).unwrap(), 11.0);
        assert_eq!(total_delay(&DelayBreakdown::default()).unwrap(), 0.0);
        let neg = DelayBreakdown { queueing_ms: -1.0, ..d };
        assert!(total_delay(&neg).is_err());
        assert_eq!(packet_loss_rate(0, 100).unwrap(), 0.0);
        assert_eq!(packet_loss_rate(25, 100).unwrap(), 0.25);
        assert_eq!(packet_loss_rate(0, 0).unwrap(), 0.0);
        assert!(packet_loss_rate(3, 2).is_err());
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), Some(19.0));
        assert_eq!(percentile(&[7.0], 0.95), Some(7.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn pooled_loss_is_not_mean_of_rates() {
        let s = aggregate(&[interval(0, 1, 10, &[1.0]), interval(1, 3, 10, &[1.0])]).unwrap();
        assert_eq!(s.loss_rate, 0.2);
        let s = aggregate(&[interval(0, 1, 2, &[1.0]), interval(1, 0, 18, &[1.0])]).unwrap();
        assert_eq!(s.loss_rate, 1.0 / 20.0);
    }

    #[test]
    fn single_interval_summary() {
        let i = interval(0, 2, 40, &[4.0, 8.0, 30.0]);
        let s = aggregate(std::slice::from_ref(&i)).unwrap();
        assert_eq!(s.mean_throughput_kbps, i.throughput_kbps);
        assert_abs_diff_eq!(s.mean_delay_ms, i.mean_delay_ms, epsilon = 1e-12);
        assert_eq!(s.median_delay_ms, i.mean_delay_ms);
        assert_eq!(s.loss_rate, i.loss_rate);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn eq7_halves_measured_throughput() {
        let i = interval(0, 0, 5, &[4.0, 6.0]);
        assert_abs_diff_eq!(i.throughput_eq7_kbps.unwrap(), i.throughput_kbps / 2.0, epsilon = 1e-12);
        assert!(interval(1, 0, 0, &[]).throughput_eq7_kbps.is_none());
    }

    #[test]
    fn self_comparison_is_zero_and_pairing_is_checked() {
        let a = report("lstm", 1, vec![interval(0, 2, 40, &[4.0, 8.0])]);
        let c = compare(&a, &a).unwrap();
        assert_eq!((c.delta_loss_rate, c.delta_mean_delay_ms, c.delta_throughput_kbps), (0.0, 0.0, 0.0));
        let b = report("none", 2, a.intervals.clone());
        assert!(matches!(compare(&b, &a), Err(Error::Pairing(_))));
    }

    #[test]
    fn report_toml_round_trip() {
        let r = report("fls", 3, vec![interval(0, 2, 40, &[4.0, 8.0]), interval(1, 0, 0, &[])]);
        let text = r.to_toml().unwrap();
        assert_eq!(ExperimentReport::from_toml(&text).unwrap(), r);
        let mut csv = Vec::new();
        r.write_series_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn pooled_loss_is_partition_independent(
            counts in proptest::collection::vec((0u64..50, 0u64..50), 1..30),
            cut in 0usize..30,
        ) {
            let intervals: Vec<IntervalMetrics> = counts
                .iter()
                .enumerate()
                .map(|(k, &(d, extra))| interval(k, d, d + extra, &[1.0]))
                .collect();
            let total_d: u64 = counts.iter().map(|c| c.0).sum();
            let total_n: u64 = counts.iter().map(|c| c.0 + c.1).sum();
            let whole = aggregate(&intervals).unwrap();
            prop_assert_eq!(whole.loss_rate, packet_loss_rate(total_d, total_n).unwrap());
            let cut = cut.min(intervals.len());
            let (a, b) = intervals.split_at(cut);
            let parts: Vec<RunSummary> = [a, b].iter().filter(|p| !p.is_empty()).map(|p| aggregate(p).unwrap()).collect();
            let d: u64 = parts.iter().map(|p| p.dropped).sum();
            let n: u64 = parts.iter().map(|p| p.gateway_arrivals).sum();
            prop_assert_eq!((d, n), (total_d, total_n));
            prop_assert_eq!(packet_loss_rate(d, n).unwrap(), whole.loss_rate);
        }

        #[test]
        fn eq7_is_homogeneous(bits in 0.0..1e7f64, rtt in 1e-3..10.0f64, k in 0.1..10.0f64) {
            let base = throughput_eq7(ThroughputSample { bits, rtt_s: rtt }).unwrap();
            let scaled_n = throughput_eq7(ThroughputSample { bits: k * bits, rtt_s: rtt }).unwrap();
            let scaled_rtt = throughput_eq7(ThroughputSample { bits, rtt_s: k * rtt }).unwrap();
            prop_assert!((scaled_n - k * base).abs() <= 1e-9 * (1.0 + base * k));
            prop_assert!((scaled_rtt - base / k).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn total_delay_is_permutation_invariant(a in 0.0..100.0f64, b in 0.0..100.0f64, c in 0.0..100.0f64, d in 0.0..100.0f64) {
            let x = DelayBreakdown { propagation_ms: a, transmission_ms: b, queueing_ms: c, processing_ms: d };
            let y = DelayBreakdown { propagation_ms: d, transmission_ms: c, queueing_ms: b, processing_ms: a };
            prop_assert!((total_delay(&x).unwrap() - total_delay(&y).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(total_delay(&x).unwrap(), a + b + c + d);
        }
    }
}
