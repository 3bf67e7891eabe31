use etune::measure::{DeviceConfig, SimBackend};
use etune::opspace::OperatorSpec;
use etune::search::{initial_round, run_latency_only, run_search, SearchConfig};

fn setup() -> (SimBackend, DeviceConfig, OperatorSpec) {
    let dev = DeviceConfig::a100_like();
    (SimBackend::new(dev.clone()), dev, "mm:1,64,64,64".parse().unwrap())
}

#[test]
fn initial_round_logs_exactly_m_measurements() {
    let (b, dev, op) = setup();
    let cfg = SearchConfig {
        m: 32,
        generation_size: 128,
        ..SearchConfig::default()
    };
    let (state, report) = initial_round(&cfg, &op, &b, &dev).unwrap();
    assert_eq!(state.measured.len(), 32);
    assert_eq!(report.cumulative_measurements, 32);
}

#[test]
fn k_trajectory_and_measurement_counts() {
    let (b, dev, op) = setup();
    let cfg = SearchConfig {
        m: 32,
        generation_size: 128,
        max_rounds: 12,
        patience: 12,
        rng_seed: 11,
        ..SearchConfig::default()
    };
    let out = run_search(&cfg, &op, &b, &dev, &mut |_| {}).unwrap();
    let mut total = 0;
    for (i, r) in out.reports.iter().enumerate() {
        assert!((0.0..=1.0).contains(&r.k_after));
        let step = ((r.k_after - r.k_before) * 100.0).round() as i64;
        assert!(step.abs() == 20 || (step == 0 && (r.k_before == 0.0 || r.k_before == 1.0 || r.snr_db.is_none())));
        if i > 0 {
            let expected = ((r.k_before * 100.0).round() as usize * cfg.m).div_ceil(100).max(1);
            assert_eq!(r.measurements, expected);
            assert_eq!(r.k_before, out.reports[i - 1].k_after);
        }
        total += r.measurements;
        assert_eq!(r.cumulative_measurements, total);
    }
    let best = out.log.iter().map(|r| r.energy_mj).fold(f64::INFINITY, f64::min);
    assert_eq!(out.record.energy_mj, best);
}

#[test]
fn energy_aware_never_loses_to_latency_only_here() {
    let (b, dev, _) = setup();
    let op: OperatorSpec = "conv:16,56,56,64,64,1,1,0".parse().unwrap();
    for seed in 0..3 {
        let cfg = SearchConfig {
            rng_seed: seed,
            max_rounds: 10,
            ..SearchConfig::default()
        };
        let e = run_search(&cfg, &op, &b, &dev, &mut |_| {}).unwrap();
        let l = run_latency_only(&cfg, &op, &b, &dev, &mut |_| {}).unwrap();
        assert!(e.record.energy_mj <= l.record.energy_mj, "seed {seed}");
    }
}
