use std::sync::Arc;

use proptest::prelude::*;
use roughmfg_core::math::{normal_cdf, normal_quantile};
use roughmfg_core::measureflow::{flow_distance, mix, wasserstein2, MeasureFlow, W2Settings};
use roughmfg_core::models;
use roughmfg_core::policy::{Lattice, RelaxedPolicy};
use roughmfg_core::randomize::sample_lift;
use roughmfg_core::rsde::{solve, Environment, InitialLaw};
use roughmfg_core::{RoughPath, TimeGrid};

fn increments(k: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..24).prop_flat_map(move |n| (Just(n), prop::collection::vec(-1.0f64..1.0, n * k)))
}

fn cumulative(incs: &[f64], k: usize) -> Vec<f64> {
    let n = incs.len() / k;
    let mut v = vec![0.0; (n + 1) * k];
    for s in 0..n {
        for a in 0..k {
            v[(s + 1) * k + a] = v[s * k + a] + incs[s * k + a];
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ito_lifts_satisfy_chen((n, incs) in increments(2)) {
        let p = RoughPath::ito_lift(&incs, 2, TimeGrid::new(1.0, n).unwrap()).unwrap();
        prop_assert!(p.chen_defect() <= 1e-12 * p.scale().max(1.0));
    }

    #[test]
    fn smooth_lifts_are_geometric((n, incs) in increments(3)) {
        let grid = TimeGrid::new(2.0, n).unwrap();
        let p = RoughPath::smooth_lift(&cumulative(&incs, 3), 3, grid).unwrap();
        let tol = 1e-12 * p.scale().max(1.0);
        prop_assert!(p.chen_defect() <= tol);
        prop_assert!(p.symmetry_defect() <= tol);
    }

    #[test]
    fn ito_one_step_second_level_vanishes((n, incs) in increments(1)) {
        let p = RoughPath::ito_lift(&incs, 1, TimeGrid::new(1.0, n).unwrap()).unwrap();
        for s in 0..n {
            prop_assert_eq!(p.second(s, s + 1)[0], 0.0);
        }
    }

    #[test]
    fn coarsening_restricts_to_the_subgrid(seed in 0u64..1000, stride in 1usize..5) {
        let fine = sample_lift(TimeGrid::new(1.0, 4 * stride * 3).unwrap(), 2, seed).unwrap();
        let coarse = fine.coarsen(stride).unwrap();
        let nodes = coarse.grid().nodes();
        for i in 0..nodes {
            prop_assert_eq!(coarse.point(i), fine.point(i * stride));
            for j in i + 1..nodes {
                prop_assert_eq!(coarse.second(i, j), fine.second(i * stride, j * stride));
            }
        }
    }

    #[test]
    fn one_dimensional_w2_of_a_shift_is_the_shift(
        cloud in prop::collection::vec(-3.0f64..3.0, 1..80),
        shift in -2.0f64..2.0,
    ) {
        let moved: Vec<f64> = cloud.iter().map(|x| x + shift).collect();
        let st = W2Settings::default();
        let w = wasserstein2(&cloud, &moved, 1, &st).unwrap();
        prop_assert!((w - shift.abs()).abs() <= 1e-9);
        prop_assert_eq!(wasserstein2(&cloud, &cloud, 1, &st).unwrap(), 0.0);
    }

    #[test]
    fn w2_is_symmetric(
        a in prop::collection::vec(-3.0f64..3.0, 2..40),
        b in prop::collection::vec(-3.0f64..3.0, 2..40),
    ) {
        let (a, b) = (&a[..a.len() / 2 * 2], &b[..b.len() / 2 * 2]);
        let st = W2Settings::default();
        let ab = wasserstein2(a, b, 2, &st).unwrap();
        let ba = wasserstein2(b, a, 2, &st).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        prop_assert!((normal_cdf(normal_quantile(p)) - p).abs() <= 1e-9);
    }

    #[test]
    fn interpolation_reproduces_affine_functions(
        a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
        x in -1.0f64..1.0, y in -1.0f64..1.0,
    ) {
        let lat = Lattice::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![7, 5]).unwrap();
        let pts = lat.points();
        let vals: Vec<f64> = pts.chunks(2).map(|p| a + b * p[0] + c * p[1]).collect();
        let (v, escaped) = lat.interpolate(&vals, &[x, y]);
        prop_assert!(!escaped);
        prop_assert!((v - (a + b * x + c * y)).abs() <= 1e-12);
    }
}

fn flow_for(seed: u64) -> (Environment, Arc<RelaxedPolicy>, InitialLaw) {
    let grid = TimeGrid::new(1.0, 12).unwrap();
    let model = models::build("tanh-interaction", &[]).unwrap();
    let path = Arc::new(sample_lift(grid, 1, seed).unwrap());
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        sd: vec![0.5],
    };
    let cloud = init.sample_cloud(seed, 100);
    let flow = Arc::new(MeasureFlow::constant(grid, &cloud, 1, 1).unwrap());
    let env = Environment::new(model.clone(), flow, path).unwrap();
    let lat = Lattice::new(vec![-1.0], vec![1.0], vec![2]).unwrap();
    let pol = Arc::new(RelaxedPolicy::uniform(model.actions().clone(), lat, 12).unwrap());
    (env, pol, init)
}

#[test]
fn full_mixture_weight_returns_the_first_flow() {
    let (env, pol, init) = flow_for(3);
    let a = solve(&env, &pol, &init, 40, 1).unwrap().to_flow();
    let b = solve(&env, &pol, &init, 40, 2).unwrap().to_flow();
    let m = mix(&a, &b, 1.0, 5, 1).unwrap();
    assert_eq!(m.ensemble().values(), a.ensemble().values());
    assert_eq!(flow_distance(&m, &a, &W2Settings::default()).unwrap(), 0.0);
    assert!(flow_distance(&a, &b, &W2Settings::default()).unwrap() > 0.0);
}

#[test]
fn solves_are_reproducible() {
    let (env, pol, init) = flow_for(9);
    let a = solve(&env, &pol, &init, 30, 4).unwrap();
    let b = solve(&env, &pol, &init, 30, 4).unwrap();
    assert_eq!(a.x().values(), b.x().values());
    assert_eq!(a.increments(), b.increments());
    let c = solve(&env, &pol, &init, 30, 5).unwrap();
    assert_ne!(a.x().values(), c.x().values());
}
