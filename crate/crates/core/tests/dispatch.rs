use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use voltvar::circuit::{Bases, LinkImpedance, NodeLoad};
use voltvar::dispatch::{
    brute_force_oracle, kkt_check, lin_objective, local_dispatch, optimal_dispatch,
    optimal_dispatch_with, zero_dispatch, QpMethod, QpProblem, SolveStatus, DEFAULT_GRID_STEPS,
    DEFAULT_QP_TOL,
};
use voltvar::powerflow::{solve_lin, voltage_band_ok};
use voltvar::{generate_circuit, Circuit, Dispatch, ScenarioParams};

const EPS: f64 = 0.05;

fn scenario() -> impl Strategy<Value = ScenarioParams> {
    (2usize..80, any::<u64>(), 0.0f64..=1.0, 1.0f64..2.5).prop_map(|(n, seed, r, s)| {
        ScenarioParams {
            n,
            seed,
            penetration_r: r,
            s_value: s,
            ..Default::default()
        }
    })
}

fn in_band(c: &Circuit, d: &Dispatch) -> bool {
    voltage_band_ok(&solve_lin(c, d).unwrap(), EPS).ok
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objectives_are_ordered(params in scenario()) {
        let c = generate_circuit(&params).unwrap();
        let zero = zero_dispatch(&c);
        let local = local_dispatch(&c).unwrap();
        prop_assume!(in_band(&c, &zero) && in_band(&c, &local));
        let sol = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        let (z, l, o) = (
            lin_objective(&c, &zero).unwrap(),
            lin_objective(&c, &local).unwrap(),
            lin_objective(&c, &sol.dispatch).unwrap(),
        );
        prop_assert!(l <= z, "local {l} zero {z}");
        prop_assert!(o <= l * (1.0 + 1e-12), "optimal {o} local {l}");
    }

    #[test]
    fn wider_boxes_never_hurt(params in scenario(), extra in 0.0f64..1.0) {
        let narrow = generate_circuit(&params).unwrap();
        let wide = narrow.with_capacity(narrow.bases.kilo_to_pu(params.s_value + extra));
        let a = optimal_dispatch(&narrow, EPS, DEFAULT_QP_TOL).unwrap();
        prop_assume!(a.status == SolveStatus::Optimal);
        let b = optimal_dispatch(&wide, EPS, DEFAULT_QP_TOL).unwrap();
        prop_assert_eq!(b.status, SolveStatus::Optimal);
        let (oa, ob) = (
            lin_objective(&narrow, &a.dispatch).unwrap(),
            lin_objective(&wide, &b.dispatch).unwrap(),
        );
        prop_assert!(ob <= oa * (1.0 + 1e-12), "s+{extra}: {ob} > {oa}");
    }

    #[test]
    fn setpoints_respect_capacity(params in scenario()) {
        let c = generate_circuit(&params).unwrap();
        let bounds = c.capacity_bounds().unwrap();
        let sol = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
        for d in [local_dispatch(&c).unwrap(), sol.dispatch] {
            for (j, (q, b)) in d.q_g.iter().zip(&bounds).enumerate() {
                prop_assert!(q.abs() <= b + 1e-9, "node {}: {q} vs {b}", j + 1);
                if !c.nodes[j].has_pv {
                    prop_assert_eq!(*q, 0.0);
                }
            }
        }
    }

    #[test]
    fn solution_passes_kkt_and_band(params in scenario()) {
        let c = generate_circuit(&params).unwrap();
        let sol = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
        prop_assume!(sol.status == SolveStatus::Optimal);
        let problem = QpProblem::build(&c, EPS).unwrap();
        prop_assert!(kkt_check(&problem, &sol.dispatch, DEFAULT_QP_TOL).max() <= DEFAULT_QP_TOL);
        prop_assert!(in_band(&c, &sol.dispatch));
    }
}

#[test]
fn different_starts_reach_the_same_dispatch() {
    for seed in 0..10 {
        let c = generate_circuit(&ScenarioParams {
            seed,
            penetration_r: 0.9,
            s_value: 1.3,
            ..Default::default()
        })
        .unwrap();
        let gi = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
        let bounds = c.capacity_bounds().unwrap();
        for sign in [-1.0, 1.0] {
            let start: Vec<f64> = bounds.iter().map(|b| sign * b).collect();
            let admm = optimal_dispatch_with(
                &c,
                EPS,
                DEFAULT_QP_TOL,
                &QpMethod::Admm { start: Some(start) },
            )
            .unwrap();
            let gap = gi
                .dispatch
                .q_g
                .iter()
                .zip(&admm.dispatch.q_g)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= 1e-6, "seed {seed} start {sign}: {gap:e}");
        }
    }
}

/// Five loads, three inverters; loads and PV output scaled together.
fn three_pv_instance(rng: &mut ChaCha20Rng) -> Circuit {
    let scale = 10f64.powf(rng.random_range(0.0..2.0));
    let spacing = rng.random_range(200.0..3000.0);
    generate_circuit(&ScenarioParams {
        n: 5,
        seed: rng.random(),
        penetration_r: 0.6,
        p_g_value: scale,
        s_value: scale * rng.random_range(1.0..2.0),
        p_c_range: [0.0, 4.0 * scale],
        spacing_range: [spacing, 1.5 * spacing],
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn grid_oracle_agrees_with_qp() {
    let mut checked = 0;
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    for seed in 0..30 {
        let c = three_pv_instance(&mut rng);
        assert_eq!(c.pv_nodes().len(), 3);
        let sol = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
        let oracle = brute_force_oracle(&c, EPS, DEFAULT_GRID_STEPS);
        match (sol.status, oracle) {
            (SolveStatus::Optimal, Ok(grid)) => {
                let o = lin_objective(&c, &sol.dispatch).unwrap();
                let g = lin_objective(&c, &grid).unwrap();
                assert!(o <= g * (1.0 + 1e-12), "seed {seed}: qp {o} above grid {g}");
                assert!((g - o) / o <= 1e-3, "seed {seed}: qp {o} grid {g}");
                // Within one grid cell of the optimum in every coordinate.
                for (j, b) in c.capacity_bounds().unwrap().iter().enumerate() {
                    let cell = 2.0 * b / (DEFAULT_GRID_STEPS - 1) as f64;
                    assert!(
                        (grid.q_g[j] - sol.dispatch.q_g[j]).abs() <= cell + 1e-12,
                        "seed {seed} node {}",
                        j + 1
                    );
                }
                checked += 1;
            }
            (SolveStatus::Infeasible, Err(_)) => {}
            (status, oracle) => panic!("seed {seed}: qp {status:?}, oracle {oracle:?}"),
        }
    }
    assert!(checked >= 20, "only {checked} feasible instances");
}

#[test]
fn single_inverter_cancels_its_own_load_when_alone() {
    let bases = Bases::default();
    let c = Circuit {
        nodes: vec![
            NodeLoad::consumer(0.02, 0.0),
            NodeLoad::with_pv(0.03, 0.006, 0.0, 0.02),
        ],
        links: vec![
            LinkImpedance {
                r: 1e-3,
                x: 1.2e-3,
                length: 250.0,
            };
            2
        ],
        v0_squared: 1.0,
        bases,
    };
    let sol = optimal_dispatch(&c, EPS, DEFAULT_QP_TOL).unwrap();
    assert!((sol.dispatch.q_g[1] - 0.006).abs() <= 1e-12);
    assert_eq!(sol.dispatch.q_g[0], 0.0);
    assert_eq!(local_dispatch(&c).unwrap().q_g, vec![0.0, 0.006]);
}
