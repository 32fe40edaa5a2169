use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::{SimConfig, SizeDistribution};
use crate::seed::rng_for;

/// A packet generated by a device, before any admission decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time_s: f64,
    pub device: u32,
    pub size_bits: f64,
}

/// Independent Poisson streams per device, merged in time order (ties by
/// device index). Each device draws from its own labeled sub-stream of
/// `config.seed`, so the traffic does not depend on anything else in the run.
pub fn schedule_arrivals(config: &SimConfig) -> Vec<Arrival> {
    let rate = config.device_rate_pps();
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    for device in 0..config.devices {
        let mut rng = rng_for(config.seed, &format!("arrivals/device/{device}"));
        device_stream(&mut rng, rate, config, device, &mut out);
    }
    out.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.device.cmp(&b.device)));
    out
}

fn device_stream<R: Rng>(rng: &mut R, rate: f64, config: &SimConfig, device: u32, out: &mut Vec<Arrival>) {
    let gaps = Exp::new(rate).expect("positive rate");
    let sizes = Exp::new(1.0 / config.packet_size_bits).expect("positive size");
    let mut t = 0.0;
    loop {
        t += gaps.sample(rng);
        if t >= config.duration_s {
            break;
        }
        let size_bits = match config.size_distribution {
            SizeDistribution::Fixed => config.packet_size_bits,
            SizeDistribution::Exponential => sizes.sample(rng).max(1.0),
        };
        out.push(Arrival { time_s: t, device, size_bits });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(devices: u32, rate: f64, seed: u64) -> SimConfig {
        SimConfig {
            devices,
            device_rate_pps: Some(rate),
            duration_s: 100.0,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn counts_concentrate_around_the_mean() {
        // λd = 500: the band λd ± 4√(λd) should hold on essentially every seed.
        let mean: f64 = 5.0 * 100.0;
        let band = 4.0 * mean.sqrt();
        let inside = (0..200)
            .filter(|&s| (schedule_arrivals(&config(1, 5.0, s)).len() as f64 - mean).abs() <= band)
            .count();
        assert!(inside >= 198, "{inside}/200");
    }

    #[test]
    fn merged_streams_match_a_single_faster_stream() {
        // Superposition: two devices at λ against one at 2λ, compared by the
        // mean count and the mean inter-arrival gap over many seeds.
        let stats = |devices: u32, rate: f64| {
            let (mut n, mut gap_sum, mut gaps) = (0usize, 0.0, 0usize);
            for s in 0..200 {
                let a = schedule_arrivals(&config(devices, rate, s));
                n += a.len();
                for w in a.windows(2) {
                    gap_sum += w[1].time_s - w[0].time_s;
                    gaps += 1;
                }
            }
            (n as f64 / 200.0, gap_sum / gaps as f64)
        };
        let (n2, g2) = stats(2, 2.0);
        let (n1, g1) = stats(1, 4.0);
        assert!((n2 - 400.0).abs() < 6.0 && (n1 - 400.0).abs() < 6.0, "{n2} {n1}");
        assert!((g2 - 0.25).abs() < 0.005 && (g1 - 0.25).abs() < 0.005, "{g2} {g1}");
    }

    #[test]
    fn same_seed_same_times() {
        assert_eq!(schedule_arrivals(&config(3, 2.0, 9)), schedule_arrivals(&config(3, 2.0, 9)));
        assert_ne!(schedule_arrivals(&config(3, 2.0, 9)), schedule_arrivals(&config(3, 2.0, 10)));
    }

    #[test]
    fn merged_in_time_order_within_duration() {
        let a = schedule_arrivals(&config(4, 3.0, 1));
        assert!(a.windows(2).all(|w| w[0].time_s <= w[1].time_s));
        assert!(a.iter().all(|x| x.time_s > 0.0 && x.time_s < 100.0));
    }

    #[test]
    fn zero_rate_is_silent() {
        assert!(schedule_arrivals(&config(5, 0.0, 1)).is_empty());
    }
}
