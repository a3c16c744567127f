mod common;

use ndarray::Array2;
use netfuse::penalty::{group_soft_threshold, scalar_soft_threshold, update_gamma, update_psi, PenaltyConfig};
use proptest::collection::vec;
use proptest::prelude::*;

use common::{random_graph, rng};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn prox_objective(x: &[f64], v: &[f64], kappa: f64) -> f64 {
    0.5 * x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + kappa * norm(x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// The block soft-threshold minimizes ½‖x − v‖² + κ‖x‖: no small
    /// perturbation does better.
    #[test]
    fn group_threshold_is_the_prox(v in vec(-5.0f64..5.0, 1..8), kappa in 0.0f64..6.0, dir in vec(-1.0f64..1.0, 8)) {
        let x = group_soft_threshold(&v, kappa);
        let f = prox_objective(&x, &v, kappa);
        for step in [1e-3, 1e-1] {
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            prop_assert!(prox_objective(&y, &v, kappa) >= f - 1e-12);
        }
        if norm(&v) <= kappa {
            prop_assert!(x.iter().all(|a| *a == 0.0));
        } else {
            prop_assert!((norm(&x) - (norm(&v) - kappa)).abs() < 1e-12);
        }
    }

    #[test]
    fn group_threshold_is_nonexpansive(u in vec(-5.0f64..5.0, 4), v in vec(-5.0f64..5.0, 4), kappa in 0.0f64..4.0) {
        let a = group_soft_threshold(&u, kappa);
        let b = group_soft_threshold(&v, kappa);
        let d_out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let d_in: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x - y).collect();
        prop_assert!(norm(&d_out) <= norm(&d_in) + 1e-12);
    }

    #[test]
    fn scalar_threshold_is_the_prox(x in -10.0f64..10.0, kappa in 0.0f64..5.0) {
        let y = scalar_soft_threshold(x, kappa);
        let f = |z: f64| 0.5 * (z - x) * (z - x) + kappa * z.abs();
        for z in [y - 1e-3, y + 1e-3, 0.0, x] {
            prop_assert!(f(z) >= f(y) - 1e-12);
        }
        prop_assert!(y.abs() <= x.abs());
    }

    #[test]
    fn auxiliary_updates_threshold_per_group(seed in 0u64..500, n in 1usize..8, width in 1usize..6) {
        let mut r = rng(seed);
        let graph = random_graph(&mut r, n, 0.5);
        let cfg = PenaltyConfig { lambda: 0.0, lambda_n: 1.3, lambda_h: 0.6, rho: 2.0 };
        let s = Array2::from_shape_fn((graph.n_pairs(), width), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 11) as f64 - 5.0);
        let t = Array2::from_shape_fn((graph.n_pairs(), width), |(i, j)| ((i + j * 5) % 3) as f64 * 0.5);
        let g = update_gamma(&s, &t, &cfg, &graph).unwrap();
        for st in 0..n {
            let rows = graph.group_rows(st);
            let v: Vec<f64> = (&s - &t).slice(ndarray::s![rows.clone(), ..]).iter().copied().collect();
            let expected = group_soft_threshold(&v, (graph.degree(st) as f64).sqrt() * 1.3 / 2.0);
            let got: Vec<f64> = g.slice(ndarray::s![rows, ..]).iter().copied().collect();
            prop_assert_eq!(got, expected);
        }
        let sp = Array2::from_shape_fn((n, width + 1), |(i, j)| (i as f64 - j as f64) * 0.4);
        let tp = Array2::zeros((n, width + 1));
        let p = update_psi(&sp, &tp, &cfg).unwrap();
        for (a, b) in p.iter().zip(sp.iter()) {
            prop_assert_eq!(*a, scalar_soft_threshold(*b, 0.3));
        }
    }
}

#[test]
fn auxiliary_updates_reject_mismatched_shapes() {
    let graph = random_graph(&mut rng(1), 4, 1.0);
    let cfg = PenaltyConfig::default();
    let a = Array2::<f64>::zeros((graph.n_pairs(), 3));
    let b = Array2::<f64>::zeros((graph.n_pairs() + 1, 3));
    assert!(update_gamma(&a, &b, &cfg, &graph).is_err());
    assert!(update_psi(&Array2::<f64>::zeros((2, 3)), &Array2::zeros((3, 2)), &cfg).is_err());
    assert!(PenaltyConfig { rho: 0.0, ..Default::default() }.validate().is_err());
    assert!(PenaltyConfig::new(-1.0, 0.0, 0.0).validate().is_err());
}
