use cclab::config::{apply_override, RunConfig};
use cclab::experiment::{run_closed_loop, Predictor, PredictorKind};
use cclab::nn::{forward_batch, init_parameters, DropoutMasks};
use cclab::sim::{run, Scenario, SimConfig};
use cclab::telemetry::{window_raw, Feature};
use cclab::{ControlAction, ModelConfig};
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenario() -> impl Strategy<Value = Scenario> {
    prop_oneof![Just(Scenario::Low), Just(Scenario::Medium), Just(Scenario::High)]
}

fn small_sim() -> impl Strategy<Value = SimConfig> {
    (any::<u64>(), scenario(), 2u32..12, 5usize..60, 2usize..8, prop_oneof![Just(1.0), Just(2.5), Just(10.0)])
        .prop_map(|(seed, scenario, devices, buffer, intervals, step)| SimConfig {
            seed,
            scenario,
            devices,
            buffer_packets: buffer,
            telemetry_interval_s: step,
            duration_s: step * intervals as f64,
            ..SimConfig::default()
        })
}

type RangeCheck = fn(f64) -> bool;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn telemetry_timestamps_are_interval_multiples(sim in small_sim()) {
        let out = run(&sim).unwrap();
        prop_assert_eq!(out.telemetry.len(), sim.intervals());
        for (k, record) in out.telemetry.iter().enumerate() {
            let expected = (k + 1) as f64 * sim.telemetry_interval_s;
            prop_assert!((record.timestamp_s - expected).abs() <= 1e-9 * expected);
            prop_assert!(record.validate().is_ok());
        }
        for pair in out.telemetry.windows(2) {
            prop_assert!(pair[1].timestamp_s > pair[0].timestamp_s);
        }
    }

    #[test]
    fn simulation_conserves_packets(sim in small_sim()) {
        let out = run(&sim).unwrap();
        prop_assert_eq!(out.conservation_violations, 0);
        prop_assert!(out.conservation_checks > 0 || out.counters.injected == 0);
        prop_assert!(out.counters.is_conserved());
    }

    #[test]
    fn simulation_is_deterministic(sim in small_sim()) {
        let a = run(&sim).unwrap();
        let b = run(&sim).unwrap();
        prop_assert_eq!(&a.telemetry, &b.telemetry);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        a.write_packet_log(&mut log_a).unwrap();
        b.write_packet_log(&mut log_b).unwrap();
        prop_assert_eq!(log_a, log_b);
    }

    #[test]
    fn targets_are_one_hot(sim in small_sim(), window in 1usize..4) {
        let out = run(&sim).unwrap();
        let n = out.telemetry.len();
        if n <= window {
            prop_assert!(window_raw(&out.telemetry, window, &Feature::ALL).is_err());
            return Ok(());
        }
        let samples = window_raw(&out.telemetry, window, &Feature::ALL).unwrap();
        prop_assert_eq!(samples.len(), n - window);
        for (t, sample) in samples.iter().enumerate() {
            prop_assert_eq!(sample.target.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(sample.target.iter().filter(|&&v| v != 0.0).count(), 1);
            prop_assert_eq!(sample.label(), out.telemetry[t + window].label);
        }
    }

    #[test]
    fn gate_activations_stay_in_range(
        seed in any::<u64>(),
        layers in 1usize..4,
        hidden in 1usize..6,
        window in 1usize..6,
        batch in 1usize..4,
        scale in 0.1f64..50.0,
    ) {
        let config = ModelConfig { layers, hidden, features: 3, classes: 3, window, dropout: 0.3 };
        let model = init_parameters(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs = Array3::from_shape_fn((batch, window, 3), |_| {
            scale * (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0)
        });
        let masks = DropoutMasks::draw(&config, batch, &mut rng);
        // Large inputs saturate the activations to exactly 0 or 1 in f64.
        let (sig, tanh): (RangeCheck, RangeCheck) = if scale < 2.0 {
            (|v| v > 0.0 && v < 1.0, |v| v > -1.0 && v < 1.0)
        } else {
            (|v| (0.0..=1.0).contains(&v), |v| (-1.0..=1.0).contains(&v))
        };
        for masks in [None, Some(&masks)] {
            let trace = forward_batch(&model, inputs.view(), masks).unwrap();
            for step in trace.steps.iter().flatten() {
                for gate in [&step.input_gate, &step.forget_gate, &step.output_gate] {
                    prop_assert!(gate.iter().all(|&v| sig(v)));
                }
                prop_assert!(step.candidate.iter().all(|&v| tanh(v)));
                prop_assert!(step.hidden.iter().all(|&v| tanh(v)));
            }
            for row in trace.probabilities.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn one_decision_per_control_interval(seed in any::<u64>(), scenario in scenario(), run_index in 0usize..5) {
        let config = RunConfig {
            seed,
            sim: SimConfig { duration_s: 200.0, ..SimConfig::default() },
            ..RunConfig::default()
        };
        let predictor = Predictor::build(PredictorKind::Fls, &config, None).unwrap();
        let result = run_closed_loop(&config, scenario, run_index, &predictor).unwrap();
        prop_assert_eq!(result.decisions.len(), result.output.telemetry.len());
        for (decision, record) in result.decisions.iter().zip(&result.output.telemetry) {
            prop_assert_eq!(decision.time_s, record.timestamp_s);
            match decision.score {
                None => prop_assert_eq!(decision.action, ControlAction::None),
                Some(score) => {
                    prop_assert!((0.0..=1.0).contains(&score));
                    if score < decision.threshold {
                        prop_assert_eq!(decision.action, ControlAction::None);
                    } else {
                        prop_assert!(decision.action != ControlAction::None);
                    }
                }
            }
        }
        let warmup = result.decisions.iter().take_while(|d| d.score.is_none()).count();
        prop_assert!(result.decisions[warmup..].iter().all(|d| d.score.is_some()));
        prop_assert_eq!(result.output.conservation_violations, 0);

        let again = run_closed_loop(&config, scenario, run_index, &predictor).unwrap();
        prop_assert_eq!(result.decisions, again.decisions);
        prop_assert_eq!(result.report, again.report);
    }

    #[test]
    fn config_overrides_round_trip(
        seed in 0..=i64::MAX as u64,
        buffer in 1usize..500,
        threshold in 0.0f64..=1.0,
        lr in 1e-5f64..1.0,
    ) {
        let mut table = toml::Table::new();
        apply_override(&mut table, "seed", &seed.to_string()).unwrap();
        apply_override(&mut table, "sim.buffer_packets", &buffer.to_string()).unwrap();
        apply_override(&mut table, "policy.threshold", &format!("{threshold:?}")).unwrap();
        apply_override(&mut table, "training.learning_rate", &format!("{lr:?}")).unwrap();
        let config = RunConfig::from_toml(&toml::to_string(&table).unwrap()).unwrap();
        prop_assert_eq!(config.seed, seed);
        prop_assert_eq!(config.sim.buffer_packets, buffer);
        prop_assert_eq!(config.policy.threshold, threshold);
        prop_assert_eq!(config.training.learning_rate, lr);

        let reparsed = RunConfig::from_toml(&config.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&reparsed, &config);
        prop_assert_eq!(reparsed.digest().unwrap(), config.digest().unwrap());
    }
}
