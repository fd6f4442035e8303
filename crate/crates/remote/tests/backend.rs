use std::sync::Arc;

use ipp_core::field::ScalarField;
use ipp_core::fleet::SyntheticSensor;
use ipp_core::graph::{GridGraph, NodeId, OccupancyMask};
use ipp_remote::backend::{BackendConfig, BackendCore, KinematicEvent, Kinematics};
use ipp_remote::wire::{self, Payload, WireMessage};
use proptest::prelude::*;

fn mask_graph(rows: usize, cols: usize, bits: &[bool]) -> Option<Arc<GridGraph>> {
    let mask = OccupancyMask::new(rows, cols, bits.to_vec()).ok()?;
    GridGraph::from_mask(mask, 5.0).ok().map(Arc::new)
}

fn masks() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (2usize..8, 2usize..8).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), proptest::collection::vec(proptest::bool::weighted(0.75), r * c))
    })
}

fn goto(seq: u64, node: NodeId) -> Vec<u8> {
    wire::encode(&WireMessage {
        vehicle_id: "v0".into(),
        seq,
        payload: Payload::Goto {
            node,
            lat: 0.0,
            lon: 0.0,
            issued_at: 0.0,
        },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn speed_bound_and_route_fidelity(
        (rows, cols, bits) in masks(),
        a in any::<prop::sample::Index>(),
        b in any::<prop::sample::Index>(),
        dt in 0.01f64..3.0,
        speed in 0.1f64..2.0,
    ) {
        let Some(g) = mask_graph(rows, cols, &bits) else { return Ok(()) };
        let from = NodeId(a.index(g.node_count()));
        let reach = g.reachable_from(from).unwrap();
        let to = reach[b.index(reach.len())];
        let path = g.shortest_path(from, to).unwrap();
        let mut k = Kinematics::new(g.clone(), from, speed, 0.2 * g.cell_side(), 0.0);
        k.set_route(path.nodes.clone(), 0.0);
        let mut seen = Vec::new();
        let mut prev = k.state.position;
        let mut arrived = None;
        for _ in 0..100_000 {
            if !k.is_moving() {
                break;
            }
            for e in k.tick(dt) {
                match e {
                    KinematicEvent::Passed(n) => seen.push(n),
                    KinematicEvent::Arrived(n) => arrived = Some(n),
                }
            }
            let p = k.state.position;
            prop_assert!((p.0 - prev.0).hypot(p.1 - prev.1) <= speed * dt + 1e-9);
            prev = p;
        }
        if path.nodes.len() > 1 {
            prop_assert_eq!(arrived, Some(to));
            seen.push(to);
            prop_assert_eq!(&seen[..], &path.nodes[1..]);
            prop_assert_eq!(k.state.position, g.position(to));
        }
    }

    #[test]
    fn one_ack_per_command_and_measurements_follow_route(
        (rows, cols, bits) in masks(),
        picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let Some(g) = mask_graph(rows, cols, &bits) else { return Ok(()) };
        let field = ScalarField::new("f", (0..g.node_count()).map(|i| i as f64 * 0.5).collect()).unwrap();
        let sensor = Box::new(SyntheticSensor::new(Arc::new(field), 0.0, 0));
        let start = NodeId(0);
        let reach = g.reachable_from(start).unwrap();
        let mut core = BackendCore::new("v0", 0, g.clone(), start, BackendConfig::default(), sensor, None).unwrap();
        let mut at = start;
        for (i, pick) in picks.iter().enumerate() {
            let seq = i as u64 + 1;
            let target = reach[pick.index(reach.len())];
            let expect = g.shortest_path(at, target).unwrap().nodes;
            let mut out = core.handle(&goto(seq, target));
            let mut ticks = 0;
            while core.is_moving() {
                out.extend(core.tick());
                ticks += 1;
                prop_assert!(ticks < 1_000_000);
            }
            let msgs: Vec<WireMessage> = out.iter().map(|(_, b)| wire::decode(b).unwrap()).collect();
            let acks: Vec<&WireMessage> = msgs.iter().filter(|m| m.kind() == "ack").collect();
            prop_assert_eq!(acks.len(), 1);
            let Payload::Ack { acked_seq, reached, node, samples, .. } = acks[0].payload else { unreachable!() };
            prop_assert_eq!(acked_seq, seq);
            prop_assert!(reached);
            prop_assert_eq!(node, target);
            let measured: Vec<NodeId> = msgs
                .iter()
                .filter_map(|m| match &m.payload {
                    Payload::Measurement { node, cmd_seq, value, .. } => {
                        assert_eq!(*cmd_seq, seq);
                        assert_eq!(*value, node.index() as f64 * 0.5);
                        Some(*node)
                    }
                    _ => None,
                })
                .collect();
            prop_assert_eq!(samples as usize, measured.len());
            if expect.len() == 1 {
                prop_assert_eq!(measured, vec![target]);
            } else {
                prop_assert_eq!(&measured[..], &expect[1..]);
            }
            let seqs: Vec<u64> = msgs.iter().map(|m| m.seq).collect();
            prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            // A replayed command re-sends the same bytes and moves nothing.
            let again = core.handle(&goto(seq, target));
            prop_assert!(!core.is_moving());
            let replay: Vec<Vec<u8>> = out.iter().filter(|(t, _)| !t.ends_with("/state")).map(|m| m.1.clone()).collect();
            prop_assert_eq!(again.into_iter().map(|m| m.1).collect::<Vec<_>>(), replay);
            at = target;
        }
        prop_assert_eq!(core.acks_sent(), picks.len() as u64);
    }
}

#[test]
fn long_route_duration_matches_speed_and_latency() {
    let g = Arc::new(GridGraph::from_mask(OccupancyMask::from_fn(1, 41, |_, _| true).unwrap(), 5.0).unwrap());
    let field = ScalarField::constant("f", g.node_count(), 0.0);
    let sensor = Box::new(SyntheticSensor::new(Arc::new(field), 0.0, 0));
    let mut core = BackendCore::new("v0", 0, g, NodeId(0), BackendConfig::default(), sensor, None).unwrap();
    core.handle(&goto(1, NodeId(40)));
    let mut last = Vec::new();
    while core.is_moving() {
        last = core.tick();
    }
    let ack = last
        .iter()
        .map(|(_, b)| wire::decode(b).unwrap())
        .find(|m| m.kind() == "ack")
        .unwrap();
    let Payload::Ack { sim_time, .. } = ack.payload else { unreachable!() };
    // 200 m at 0.5 m/s plus one second of settling.
    assert!((sim_time - 401.0).abs() < 1e-6, "{sim_time}");
}
