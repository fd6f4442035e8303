mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::*;
use ipp_core::fleet::{Fault, Fleet, FleetError};
use ipp_core::graph::NodeId;
use ipp_core::mission::MissionLimits;
use ipp_remote::backend::BackendConfig;
use ipp_remote::broker::FaultPlan;
use ipp_remote::trace::read_collects;

const PLANNERS: [&str; 3] = ["greedy", "ei", "flooding"];

#[test]
fn remote_decisions_match_local() {
    let g = open_grid(5, 6);
    for seed in 0..2 {
        let truth = field_for(&g, seed);
        for name in PLANNERS {
            for starts in [&[0][..], &[0, 29], &[0, 14, 29]] {
                let budget = Some(60.0);
                let limits = MissionLimits::default();
                let local = run_local(&g, &truth, name, starts, budget, limits);
                let (remote, r) = run_remote(&g, &truth, name, starts, budget, limits, RemoteSetup::default());
                assert_eq!(decisions(&local), decisions(&remote), "{name} {starts:?} seed {seed}");
                assert!(remote.aborted.is_none());
                let lm: Vec<_> = local.metrics.iter().map(|m| (m.mse, m.traveled.clone())).collect();
                let rm: Vec<_> = remote.metrics.iter().map(|m| (m.mse, m.traveled.clone())).collect();
                assert_eq!(lm, rm);
                assert_eq!(r.backends.respawn_count(), 0);
            }
        }
    }
}

/// Acks and gotos pair up one to one per vehicle.
fn assert_pairing(trace: &SharedBuf, n: usize) {
    let mut gotos: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); n];
    let mut acks: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); n];
    for line in trace.lines() {
        let Some(msg) = line.get("msg") else { continue };
        let Some(id) = msg.get("vehicle_id").and_then(|v| v.as_str()) else { continue };
        let v: usize = id.trim_start_matches("asv").parse().unwrap();
        match msg["kind"].as_str().unwrap() {
            "goto" => {
                gotos[v].insert(msg["seq"].as_u64().unwrap());
            }
            "ack" => {
                acks[v].insert(msg["acked_seq"].as_u64().unwrap());
            }
            _ => {}
        }
    }
    assert_eq!(gotos, acks);
}

#[test]
fn duplicates_and_reordering_keep_equivalence() {
    let g = open_grid(5, 6);
    let truth = field_for(&g, 3);
    let faults = [
        FaultPlan {
            duplicate: vec!["fleet/+/measurement".into(), "fleet/+/ack".into(), "fleet/+/cmd".into()],
            delay: vec![],
        },
        FaultPlan {
            duplicate: vec![],
            delay: vec![("fleet/asv0/ack".into(), Duration::from_millis(15))],
        },
    ];
    for plan in faults {
        for name in PLANNERS {
            let starts = [0, 29];
            let local = run_local(&g, &truth, name, &starts, Some(40.0), MissionLimits::default());
            let setup = RemoteSetup {
                faults: plan.clone(),
                ..RemoteSetup::default()
            };
            let (remote, r) = run_remote(&g, &truth, name, &starts, Some(40.0), MissionLimits::default(), setup);
            assert_eq!(decisions(&local), decisions(&remote), "{name} {plan:?}");
            assert_pairing(&r.trace, 2);
        }
    }
}

#[test]
fn ack_order_does_not_change_the_outcome() {
    let g = open_grid(4, 4);
    let truth = field_for(&g, 1);
    let targets = [Some(NodeId(3)), Some(NodeId(12))];
    let mut results = Vec::new();
    for slow in ["asv0", "asv1"] {
        let setup = RemoteSetup {
            faults: FaultPlan {
                duplicate: vec![],
                delay: vec![(format!("fleet/{slow}/ack"), Duration::from_millis(40))],
            },
            ..RemoteSetup::default()
        };
        let mut r = remote(&g, &truth, &[0, 15], None, setup);
        r.fleet.take_measurement().unwrap();
        let out = r.fleet.move_to(&targets).unwrap();
        let batch = r.fleet.take_measurement().unwrap();
        let positions: Vec<NodeId> = r.fleet.vehicles().iter().map(|v| v.position).collect();
        results.push((out, batch, positions, r.fleet.elapsed()));
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0].0.reached, vec![true, true]);
}

#[test]
fn goto_to_current_node_needs_no_motion() {
    let g = open_grid(3, 3);
    let truth = field_for(&g, 0);
    let mut r = remote(&g, &truth, &[4], None, RemoteSetup::default());
    let out = r.fleet.move_to(&[Some(NodeId(4))]).unwrap();
    assert_eq!(out.reached, vec![true]);
    assert!(r.fleet.hops().is_empty());
    let m = r.fleet.take_measurement().unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].node, NodeId(4));
    assert_eq!(m[0].value, truth.get(NodeId(4)).unwrap());
    assert_eq!(r.fleet.elapsed(), 0.0);
}

#[test]
fn intermediate_measurements_are_buffered() {
    let g = open_grid(1, 5);
    let truth = field_for(&g, 2);
    let mut r = remote(&g, &truth, &[0], None, RemoteSetup::default());
    r.fleet.move_to(&[Some(NodeId(4))]).unwrap();
    let batch = r.fleet.take_measurement().unwrap();
    let nodes: Vec<usize> = batch.iter().map(|m| m.node.index()).collect();
    assert_eq!(nodes, vec![1, 2, 3, 4]);
    // 20 m at 0.5 m/s after one second of settling.
    assert!((r.fleet.elapsed() - 41.0).abs() < 1e-6);
    assert_eq!(r.fleet.vehicles()[0].traveled, 20.0);
}

#[test]
fn budget_truncates_the_route() {
    let g = open_grid(1, 6);
    let truth = field_for(&g, 2);
    let mut r = remote(&g, &truth, &[0], Some(12.0), RemoteSetup::default());
    let out = r.fleet.move_to(&[Some(NodeId(5))]).unwrap();
    assert_eq!(out.reached, vec![false]);
    assert_eq!(out.dones, vec![true]);
    assert_eq!(r.fleet.vehicles()[0].position, NodeId(2));
    assert_eq!(r.fleet.vehicles()[0].traveled, 10.0);
}

#[test]
fn killed_backend_is_respawned_with_the_same_decisions() {
    let g = open_grid(5, 6);
    let truth = field_for(&g, 4);
    for name in PLANNERS {
        let starts = [0, 29];
        let local = run_local(&g, &truth, name, &starts, Some(50.0), MissionLimits::default());
        let setup = RemoteSetup {
            backend: BackendConfig {
                fail_after_measurements: Some(4),
                ..BackendConfig::default()
            },
            ..RemoteSetup::default()
        };
        let (remote, r) = run_remote(&g, &truth, name, &starts, Some(50.0), MissionLimits::default(), setup);
        assert!(r.backends.respawn_count() >= 1, "{name}");
        assert!(remote.aborted.is_none());
        assert_eq!(decisions(&local), decisions(&remote), "{name}");
        let lm: Vec<_> = local.metrics.iter().map(|m| m.mse).collect();
        let rm: Vec<_> = remote.metrics.iter().map(|m| m.mse).collect();
        assert_eq!(lm, rm);
    }
}

#[test]
fn dropped_backend_connection_is_recovered() {
    let g = open_grid(4, 4);
    let truth = field_for(&g, 5);
    let mut r = remote(&g, &truth, &[0], None, RemoteSetup::default());
    r.fleet.take_measurement().unwrap();
    assert!(r.broker.drop_client("backend-asv0"));
    let out = r.fleet.move_to(&[Some(NodeId(5))]).unwrap();
    assert_eq!(out.reached, vec![true]);
    assert_eq!(r.backends.respawn_count(), 1);
    let batch = r.fleet.take_measurement().unwrap();
    assert_eq!(batch.len(), 1);
    assert_eq!(batch[0].node, NodeId(5));
}

#[test]
fn crash_without_respawn_is_a_fault() {
    let g = open_grid(1, 6);
    let truth = field_for(&g, 2);
    let setup = RemoteSetup {
        backend: BackendConfig {
            fail_after_measurements: Some(2),
            ..BackendConfig::default()
        },
        respawn: false,
        ..RemoteSetup::default()
    };
    let mut r = remote(&g, &truth, &[0], None, setup);
    r.fleet.take_measurement().unwrap();
    let out = r.fleet.move_to(&[Some(NodeId(5))]).unwrap();
    assert_eq!(out.dones, vec![true]);
    assert!(matches!(out.faults[0], Some(Fault::Backend(_))));
    assert_eq!(r.fleet.vehicles()[0].position, NodeId(0));
}

#[test]
fn silent_backend_times_out() {
    let g = open_grid(2, 2);
    let truth = field_for(&g, 0);
    let setup = RemoteSetup {
        respawn: false,
        timeout_scale: 0.01,
        ..RemoteSetup::default()
    };
    let mut r = remote(&g, &truth, &[0, 3], None, setup);
    r.fleet.take_measurement().unwrap();
    // Graceful stop leaves no last will behind.
    r.backends.shutdown();
    let t0 = Instant::now();
    let out = r.fleet.move_to(&[Some(NodeId(1)), None]).unwrap();
    // (5 / 0.5 * 3 + 10) * 0.01 seconds.
    assert!(t0.elapsed() >= Duration::from_millis(400));
    assert_eq!(out.faults[0], Some(Fault::AckTimeout));
    assert_eq!(out.dones, vec![true, false]);
    match r.fleet.take_measurement() {
        Err(FleetError::Vehicle { vehicle: 1, fault }) => assert_eq!(fault, Fault::MeasurementTimeout),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mission_abort_keeps_partial_results() {
    let g = open_grid(3, 3);
    let truth = field_for(&g, 0);
    let setup = RemoteSetup {
        backend: BackendConfig {
            fail_after_measurements: Some(3),
            ..BackendConfig::default()
        },
        respawn: false,
        ..RemoteSetup::default()
    };
    let (out, _) = run_remote(&g, &truth, "greedy", &[0], None, MissionLimits { max_steps: 20 }, setup);
    let aborted = out.aborted.expect("fatal fault");
    assert_eq!(aborted.vehicle, 0);
    assert_eq!(out.metrics.len(), out.steps);
    assert!(out.steps >= 1);
}

#[test]
fn stalled_vehicle_does_not_delay_others() {
    let g = open_grid(2, 8);
    let truth = field_for(&g, 0);
    let setup = RemoteSetup {
        faults: FaultPlan {
            duplicate: vec![],
            delay: vec![("fleet/asv0/ack".into(), Duration::from_millis(300))],
        },
        ..RemoteSetup::default()
    };
    let mut r = remote(&g, &truth, &[0, 15], None, setup);
    r.fleet.take_measurement().unwrap();
    let t0 = Instant::now();
    r.fleet.move_to(&[Some(NodeId(1)), Some(NodeId(8))]).unwrap();
    assert!(t0.elapsed() >= Duration::from_millis(300));
    let lines = r.trace.lines();
    let times: BTreeMap<String, usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l["dir"] == "in" && l["msg"]["kind"] == "ack")
        .map(|(i, l)| (l["msg"]["vehicle_id"].as_str().unwrap().to_string(), i))
        .collect();
    // The unaffected vehicle's acknowledgment is logged first.
    assert!(times["asv1"] < times["asv0"]);
}

#[test]
fn trace_collects_replay_the_batches() {
    let g = open_grid(4, 5);
    let truth = field_for(&g, 6);
    let (out, r) = run_remote(&g, &truth, "ei", &[0, 19], Some(40.0), MissionLimits::default(), RemoteSetup::default());
    r.fleet.close();
    let bytes = r.trace.0.lock().unwrap().clone();
    let collects = read_collects(&bytes[..]).unwrap();
    assert_eq!(collects.len(), out.steps + 1);
    for (c, m) in collects.iter().skip(1).zip(&out.metrics) {
        assert_eq!(c.traveled, m.traveled);
        assert_eq!(c.t, m.time_s);
    }
}
