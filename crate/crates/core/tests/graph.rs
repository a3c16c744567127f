mod common;

use netfuse::data::synth_registry;
use netfuse::graph::{build_proximity, constraint_operators, haversine_m, laplacian_eig, MultilayerGraph, ProximityGraph};
use netfuse::model::{ParamDims, StationBlocks};
use proptest::prelude::*;
use rand::Rng;

use common::{random_graph, rng};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proximity_matches_brute_force(seed in 0u64..10_000, n in 1usize..30, radius in 100.0f64..3000.0) {
        let reg = synth_registry(seed, n, 4000.0, 5);
        let g = build_proximity(&reg, radius).unwrap();
        let st = reg.stations();
        for s in 0..n {
            for t in 0..n {
                let d = haversine_m(st[s].latitude, st[s].longitude, st[t].latitude, st[t].longitude);
                let linked = g.row_index(s, t).is_some();
                prop_assert_eq!(linked, s != t && d < radius);
            }
        }
    }

    #[test]
    fn pair_layout_is_consistent(seed in 0u64..10_000, n in 1usize..20, p in 0.0f64..1.0) {
        let g = random_graph(&mut rng(seed), n, p);
        prop_assert_eq!(g.n_pairs(), 2 * g.n_edges());
        let mut row = 0;
        for (k, (s, t)) in g.pairs().enumerate() {
            prop_assert_eq!(g.row_index(s, t), Some(k));
            prop_assert!(g.neighbors(t).contains(&s));
            prop_assert!(g.group_rows(s).contains(&k));
            row = k + 1;
        }
        prop_assert_eq!(row, g.n_pairs());
        let l = g.laplacian();
        for s in 0..n {
            prop_assert_eq!(l.row(s).sum(), 0.0);
        }
    }

    #[test]
    fn zero_eigenvalues_count_components(seed in 0u64..10_000, n in 1usize..20, p in 0.0f64..0.4) {
        let g = random_graph(&mut rng(seed), n, p);
        let eig = laplacian_eig(&g).unwrap();
        let (_, k) = g.components();
        prop_assert_eq!(eig.zero_count(1e-9), k);
        prop_assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-10));
        // Half the Laplacian from the incidence matrix.
        let d = g.incidence().to_dense();
        let half = d.t().dot(&d) * 0.25;
        let lt = g.laplacian() * 0.5;
        prop_assert!((half - lt).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn operators_are_adjoint(seed in 0u64..10_000, n in 1usize..10, h in 2usize..7, d in 1usize..5) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 0.5);
        let dims = ParamDims::new(n, h, d);
        let ops = constraint_operators(&g, dims).unwrap();
        let len = StationBlocks::<f64>::zeros(dims).len();
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = StationBlocks::from_slice(dims, &x).unwrap();
        let gam = ndarray::Array2::from_shape_fn((g.n_pairs(), ops.gamma_width()), |_| r.random_range(-1.0..1.0));
        let psi = ndarray::Array2::from_shape_fn((n, h), |_| r.random_range(-1.0..1.0));
        let lhs = dot(ops.apply_theta(&b).as_slice().unwrap(), gam.as_slice().unwrap());
        let rhs = dot(&x, &ops.apply_theta_t(&gam).to_vec());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        let lhs = dot(ops.apply_hour(&b).as_slice().unwrap(), psi.as_slice().unwrap());
        let rhs = dot(&x, &ops.apply_hour_t(&psi).to_vec());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));

        let inc = g.incidence();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..g.n_pairs()).map(|_| r.random_range(-1.0..1.0)).collect();
        prop_assert!((dot(&inc.apply(&v), &w) - dot(&v, &inc.apply_t(&w))).abs() < 1e-10);
    }

    #[test]
    fn haversine_is_a_symmetric_distance(a in -60.0f64..60.0, b in -170.0f64..170.0, c in -60.0f64..60.0, e in -170.0f64..170.0) {
        let d1 = haversine_m(a, b, c, e);
        prop_assert!(d1 >= 0.0);
        prop_assert!((d1 - haversine_m(c, e, a, b)).abs() < 1e-6);
        prop_assert!(haversine_m(a, b, a, b).abs() < 1e-9);
    }
}

#[test]
fn haversine_known_distance() {
    // One degree of latitude on a 6371 km sphere.
    let d = haversine_m(37.0, 127.0, 38.0, 127.0);
    assert!((d - 6_371_000.0 * std::f64::consts::PI / 180.0).abs() < 1e-6);
}

#[test]
fn multilayer_graph_edge_counts() {
    let g = ProximityGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let ml = MultilayerGraph::new(&g, 5);
    assert_eq!(ml.n_nodes(), 20);
    assert_eq!(ml.intra_edges().count(), 3 * 5);
    // Cyclic chain per station, including the wrap.
    assert_eq!(ml.inter_edges().count(), 4 * 5);
}

#[test]
fn invalid_graphs_are_rejected() {
    assert!(ProximityGraph::from_neighbors(vec![vec![1], vec![]], 1.0).is_err());
    assert!(ProximityGraph::from_neighbors(vec![vec![0]], 1.0).is_err());
    assert!(ProximityGraph::from_edges(2, &[(0, 2)]).is_err());
    assert!(ProximityGraph::from_neighbors(vec![], 1.0).is_err());
    let reg = synth_registry(1, 3, 100.0, 5);
    assert!(build_proximity(&reg, 0.0).is_err());
}
