mod common;

use common::{brute_force_path, mask_adjacency, random_connected, random_mask};
use ipp_core::graph::{GridGraph, NodeId, OccupancyMask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_masks(rows: usize, cols: usize) -> impl Iterator<Item = OccupancyMask> {
    let n = rows * cols;
    (1u32..(1 << n)).map(move |bits| {
        OccupancyMask::new(rows, cols, (0..n).map(|i| bits >> i & 1 == 1).collect()).unwrap()
    })
}

fn check_all_pairs(g: &GridGraph) -> usize {
    let adj = mask_adjacency(g.mask());
    let mut cases = 0;
    for s in g.nodes() {
        for t in g.nodes() {
            let (cost, nodes) = brute_force_path(&adj, s.0, t.0).expect("connected");
            let path = g.shortest_path(s, t).unwrap();
            assert_eq!((path.cost.orth, path.cost.diag), cost, "{s}->{t}");
            let ids: Vec<usize> = path.nodes.iter().map(|n| n.0).collect();
            assert_eq!(ids, nodes, "{s}->{t}");
            cases += 1;
        }
    }
    cases
}

#[test]
fn shortest_path_matches_enumeration_on_every_small_mask() {
    let mut cases = 0;
    for (r, c) in [(1, 3), (2, 2), (2, 3), (3, 2), (3, 3)] {
        for mask in all_masks(r, c) {
            let g = GridGraph::from_mask(mask, 5.0).unwrap();
            if g.is_connected() {
                cases += check_all_pairs(&g);
            }
        }
    }
    assert!(cases >= 1000, "{cases}");
}

#[test]
fn adjacency_matches_mask_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mask = random_mask(&mut rng, 6, 7, 0.7);
        let g = GridGraph::from_mask(mask.clone(), 5.0).unwrap();
        assert_eq!(g.node_count(), mask.navigable_count());
        let adj = mask_adjacency(&mask);
        for n in g.nodes() {
            let ours: Vec<usize> = g.neighbors(n).unwrap().iter().map(|m| m.0).collect();
            let theirs: Vec<usize> = adj[n.0].iter().map(|e| e.0).collect();
            assert_eq!(ours, theirs);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_invariants(seed in any::<u64>(), rows in 2usize..7, cols in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_connected(&mut rng, rows, cols, 0.75);
        let n = g.node_count();
        let s = NodeId(seed as usize % n);
        let t = NodeId((seed >> 17) as usize % n);
        let p = g.shortest_path(s, t).unwrap();
        let q = g.shortest_path(t, s).unwrap();
        // Symmetric length, consecutive nodes adjacent, length consistent with edges.
        prop_assert_eq!(p.cost, q.cost);
        let mut sum = 0.0;
        for w in p.nodes.windows(2) {
            let kind = g.edge_kind(w[0], w[1]);
            prop_assert!(kind.is_some());
            sum += g.edge_length(kind.unwrap());
        }
        prop_assert!((sum - p.meters).abs() < 1e-9);
        // Triangle inequality through any middle node.
        let m = NodeId((seed >> 33) as usize % n);
        let via = g.shortest_path(s, m).unwrap().meters + g.shortest_path(m, t).unwrap().meters;
        prop_assert!(p.meters <= via + 1e-9);
    }

    #[test]
    fn larger_masks_match_enumeration(seed in any::<u64>(), rows in 3usize..6, cols in 3usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_connected(&mut rng, rows, cols, 0.7);
        let adj = mask_adjacency(g.mask());
        let n = g.node_count();
        let s = seed as usize % n;
        let t = (seed >> 20) as usize % n;
        let (cost, nodes) = brute_force_path(&adj, s, t).unwrap();
        let p = g.shortest_path(NodeId(s), NodeId(t)).unwrap();
        prop_assert_eq!((p.cost.orth, p.cost.diag), cost);
        prop_assert_eq!(p.nodes.iter().map(|n| n.0).collect::<Vec<_>>(), nodes);
    }

    #[test]
    fn latlon_roundtrip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGraph::from_mask(random_mask(&mut rng, 5, 8, 0.6), 5.0).unwrap();
        for n in g.nodes() {
            let (lat, lon) = g.node_to_latlon(n).unwrap();
            prop_assert_eq!(g.latlon_to_node(lat, lon).unwrap(), n);
        }
    }
}
