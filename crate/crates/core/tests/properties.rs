use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use txfreq_core::admm::local_x_update;
use txfreq_core::clock::{from_secs, Nanos, NANOS_PER_SEC};
use txfreq_core::constraints::ConstraintSet;
use txfreq_core::monitor::estimate_rate;
use txfreq_core::projection::{kkt_projection, DualBisection, Dykstra, Projector};
use txfreq_core::protocol::{decode, encode, Payload, WireMessage};
use txfreq_core::sink::{CloudSink, SinkQuota, SinkRecord};
use txfreq_core::transport::{SimNetwork, TransportConfig, GATEWAY};
use txfreq_core::utility::UtilityFunction;

fn seeded(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Strictly concave cubic/quadratic on [0, 11]: f'' = 2c2 + 6c3 x < 0.
fn concave_poly() -> impl Strategy<Value = UtilityFunction> {
    (0.0..100.0f64, -20.0..20.0f64, -3.0..-0.2f64, -1.0..=0.0f64)
        .prop_map(|(c0, c1, c2, c3)| UtilityFunction::concave(vec![c0, c1, c2, c3], 11.0).unwrap())
}

/// Feasible set plus a point to project.
fn instance() -> impl Strategy<Value = (ConstraintSet, Vec<f64>)> {
    (1usize..=5)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.5..6.0f64, n),
                prop::collection::vec(0.0..2.0f64, n),
                0.0..10.0f64,
                0.0..20.0f64,
                prop::collection::vec(-5.0..15.0f64, n),
            )
        })
        .prop_map(|(a, g, extra_c, extra_d, v)| {
            let c = g.iter().sum::<f64>() + extra_c + 1e-3;
            let d = a.iter().zip(&g).map(|(a, g)| a * g).sum::<f64>() + extra_d + 1e-3;
            (ConstraintSet::new(c, d, a, g).unwrap(), v)
        })
}

/// A feasible point: the floor plus a nonnegative step shrunk to fit.
fn feasible_point(set: &ConstraintSet, dir: &[f64]) -> Vec<f64> {
    let g = set.min_rates();
    let rate_room = set.c() - g.iter().sum::<f64>();
    let data_room = set.d() - set.sizes().iter().zip(g).map(|(a, g)| a * g).sum::<f64>();
    let rate_use: f64 = dir.iter().sum();
    let data_use: f64 = dir.iter().zip(set.sizes()).map(|(d, a)| d * a).sum();
    let scale = (rate_room / rate_use.max(1e-300)).min(data_room / data_use.max(1e-300)).min(1.0);
    g.iter().zip(dir).map(|(g, d)| g + d * scale).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(seeded(256, 1))]

    #[test]
    fn utility_chord_lies_below(f in concave_poly(), x in 0.0..11.0f64, y in 0.0..11.0f64, t in 0.0..=1.0f64) {
        let mid = t * x + (1.0 - t) * y;
        let lhs = f.eval(mid).unwrap();
        let rhs = t * f.eval(x).unwrap() + (1.0 - t) * f.eval(y).unwrap();
        prop_assert!(lhs >= rhs - 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn derivative_matches_central_difference(f in concave_poly(), x in 0.01..10.99f64) {
        let h = 1e-5;
        let fd = (f.eval(x + h).unwrap() - f.eval(x - h).unwrap()) / (2.0 * h);
        let d = f.derivative(x).unwrap();
        prop_assert!((fd - d).abs() < 1e-4 * (1.0 + d.abs()), "fd {} vs {}", fd, d);
    }

    #[test]
    fn x_update_beats_grid(f in concave_poly(), z in 0.0..11.0f64, u in -3.0..3.0f64, rho in 0.1..5.0f64) {
        let obj = |x: f64| f.eval(x).unwrap() - rho / 2.0 * (x - z + u).powi(2);
        let x = local_x_update(&f, z, u, rho).unwrap();
        prop_assert!((0.0..=11.0).contains(&x));
        let best_grid = (0..=11_000).map(|i| obj(i as f64 * 1e-3)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(obj(x) >= best_grid - 1e-6);
    }

    #[test]
    fn projection_is_feasible_idempotent_and_optimal(
        (set, v) in instance(),
        dirs in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 5), 8),
    ) {
        let z = DualBisection.project(&v, &set).unwrap();
        prop_assert!(set.contains(&z, 1e-9));
        let again = DualBisection.project(&z, &set).unwrap();
        prop_assert!(max_abs_diff(&z, &again) < 1e-9);
        // variational inequality: (v - z)·(w - z) <= 0 for every feasible w
        for dir in &dirs {
            let w = feasible_point(&set, &dir[..z.len()]);
            let ip: f64 = v.iter().zip(&z).zip(&w).map(|((v, z), w)| (v - z) * (w - z)).sum();
            prop_assert!(ip <= 1e-7, "inner product {}", ip);
        }
    }

    #[test]
    fn projectors_agree_with_kkt((set, v) in instance()) {
        let kkt = kkt_projection(&v, &set).unwrap().z;
        let dual = DualBisection.project(&v, &set).unwrap();
        prop_assert!(max_abs_diff(&kkt, &dual) < 1e-6);
        let dyk = Dykstra::default().project(&v, &set).unwrap();
        prop_assert!(max_abs_diff(&kkt, &dyk) < 1e-6, "dykstra {:?} kkt {:?}", dyk, kkt);
    }

    #[test]
    fn feasible_points_project_to_themselves((set, _v) in instance(), dir in prop::collection::vec(0.0..1.0f64, 5)) {
        let w = feasible_point(&set, &dir[..set.len()]);
        let z = Dykstra::default().project(&w, &set).unwrap();
        prop_assert!(max_abs_diff(&w, &z) < 1e-9);
    }

    #[test]
    fn periodic_arrivals_estimate_exactly(period_ms in 10u64..2000, n in 2usize..400, window in 2usize..400) {
        let arrivals: Vec<Nanos> = (0..n as u64).map(|i| i * period_ms * 1_000_000).collect();
        let est = estimate_rate("d", &arrivals, window).unwrap();
        prop_assert!((est.estimated_rate - 1000.0 / period_ms as f64).abs() < 1e-9);
        prop_assert_eq!(est.sample_count, n.min(window));
    }

    #[test]
    fn sink_never_exceeds_quota(gaps in prop::collection::vec(0u64..400_000_000, 1..300), cap in 1u32..12) {
        let mut sink = CloudSink::new(SinkQuota { max_writes_per_sec: cap as f64, max_storage: f64::INFINITY });
        let mut t = 0;
        for (seq, gap) in gaps.iter().enumerate() {
            t += gap;
            let _ = sink.write(SinkRecord { device_id: "d".into(), seq: seq as u64, send_ts_us: 0, arrival_ns: t, size: 1.0 }, t);
        }
        let accepted: Vec<Nanos> = sink.records().iter().map(|r| r.arrival_ns).collect();
        for (i, start) in accepted.iter().enumerate() {
            let in_window = accepted[i..].iter().take_while(|t| **t < start + NANOS_PER_SEC).count();
            prop_assert!(in_window <= cap as usize);
        }
    }

    #[test]
    fn sim_channels_stay_fifo(sends in prop::collection::vec((0u64..5_000_000, 0usize..3), 1..200), seed in any::<u64>()) {
        let ids = ["dev1", "dev2", "dev3"];
        let cfg = TransportConfig {
            latency: ids.iter().map(|id| (id.to_string(), 0.002)).collect(),
            jitter: 0.0015,
            seed,
            ..TransportConfig::default()
        };
        let mut net = SimNetwork::new(&cfg).unwrap();
        net.connect(GATEWAY);
        ids.iter().for_each(|id| net.connect(id));
        let mut now = 0;
        let mut seqs: BTreeMap<&str, u64> = BTreeMap::new();
        for (gap, who) in sends {
            now += gap;
            net.advance_clock(now);
            let seq = seqs.entry(ids[who]).or_default();
            let msg = WireMessage::new(ids[who], 0, Payload::Data { seq: *seq, send_ts_us: now / 1000, size: 1.0 });
            *seq += 1;
            net.send(ids[who], GATEWAY, &msg).unwrap();
        }
        let delivered = net.advance_clock(now + from_secs(1.0));
        let mut last: BTreeMap<String, u64> = BTreeMap::new();
        let mut last_t = 0;
        for d in delivered {
            prop_assert!(d.at >= last_t);
            last_t = d.at;
            let Payload::Data { seq, .. } = d.msg.payload else { unreachable!() };
            if let Some(prev) = last.insert(d.from.clone(), seq) {
                prop_assert!(seq == prev + 1);
            }
        }
    }
}

fn id_strategy() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_\\-\"\\\\é ]{1,12}"
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), Just(1e-300), Just(f64::MAX)]
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        (finite(), finite()).prop_map(|(a, gamma)| Payload::Hello { a, gamma }),
        (any::<bool>(), any::<u64>(), finite(), finite(), finite(), ".{0,20}").prop_map(
            |(accepted, index, rho, c, d, reason)| Payload::JoinAck { accepted, index, rho, c, d, reason }
        ),
        finite().prop_map(|s| Payload::XReport { s }),
        (prop::collection::btree_map(id_strategy(), finite(), 0..5), any::<bool>())
            .prop_map(|(z, session_start)| Payload::ZBroadcast { z, session_start }),
        prop::collection::btree_map(id_strategy(), finite(), 0..5).prop_map(|z| Payload::Converged { z }),
        (any::<u64>(), any::<u64>(), finite()).prop_map(|(seq, send_ts_us, size)| Payload::Data { seq, send_ts_us, size }),
        (finite(), finite(), finite()).prop_map(|(estimated_rate, reference_z, delta)| Payload::Alert {
            estimated_rate,
            reference_z,
            delta
        }),
        Just(Payload::Leave),
    ]
}

proptest! {
    #![proptest_config(seeded(10_000, 2))]

    #[test]
    fn protocol_round_trips(device_id in id_strategy(), round in any::<u64>(), payload in payload()) {
        let msg = WireMessage::new(device_id, round, payload);
        let line = encode(&msg).unwrap();
        prop_assert_eq!(line.iter().filter(|b| **b == b'\n').count(), 1);
        prop_assert_eq!(decode(&line).unwrap(), msg);
    }
}

proptest! {
    #![proptest_config(seeded(2_000, 3))]

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn decoder_survives_mutated_lines(payload in payload(), cut in 0usize..200, flip in any::<u8>()) {
        let mut line = encode(&WireMessage::new("dev1", 3, payload)).unwrap();
        if !line.is_empty() {
            let i = cut % line.len();
            line[i] ^= flip;
            line.truncate(cut.max(1));
        }
        let _ = decode(&line);
    }
}
