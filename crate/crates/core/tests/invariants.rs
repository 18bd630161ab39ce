use delay_mfg::det_solvers::PicardOptions;
use delay_mfg::experiments::Equilibrium;
use delay_mfg::nce::{compute_m0_case1, compute_m0_general, NceOptions};
use delay_mfg::oracle::{brute_force_optimize, tree_solve_hamiltonian, ScenarioTree};
use delay_mfg::population_sim::{simulate_population, Coupling, NoiseConfig};
use delay_mfg::ScalarModel;
use proptest::prelude::*;

fn coarse(m: ScalarModel) -> delay_mfg::ModelSpec {
    m.spec(0.25).expect("grid divides horizon and delays")
}

prop_compose! {
    fn delayed_model()(
        a in -1.0..1.0f64,
        xi in -1.0..1.0f64,
        eta in -0.5..0.5f64,
        drift in -0.5..0.5f64,
        drift_delayed in -0.5..0.5f64,
        input in 0.2..1.5f64,
        input_delayed in -0.5..0.5f64,
        input_population in -0.5..0.5f64,
        sigma in 0.0..0.6f64,
        sigma0 in 0.0..0.4f64,
        state_weight in 0.0..1.0f64,
        state_weight_delayed in 0.0..0.5f64,
        control_weight in 0.5..2.0f64,
        control_weight_delayed in 0.0..0.5f64,
        terminal_weight in 0.0..1.0f64,
    ) -> ScalarModel {
        ScalarModel {
            a, xi, eta, drift, drift_delayed, input, input_delayed, input_population,
            sigma, sigma0, state_weight, state_weight_delayed, control_weight,
            control_weight_delayed, terminal_weight,
            ..ScalarModel::default()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tree_system_is_the_optimizer(m in delayed_model()) {
        let spec = coarse(m);
        let tree = ScenarioTree::for_spec(&spec);
        let exact = tree_solve_hamiltonian(&spec, &tree, None).unwrap();
        let brute = brute_force_optimize(&spec, &tree, None).unwrap();
        prop_assert!(exact.residuals.max() < 1e-10);
        for (a, b) in exact.u.iter().flatten().zip(brute.u.iter().flatten()) {
            prop_assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn case_one_consistency_matches_general_construction(mut m in delayed_model()) {
        m.drift_delayed = 0.0;
        m.input_delayed = 0.0;
        // Picard on the forward-backward system contracts only for a moderate loop gain.
        m.input = m.input.min(1.0);
        m.control_weight += 0.5;
        m.input_population *= 0.4;
        let spec = m.spec(0.0625).unwrap();
        let picard = PicardOptions::default();
        let general = compute_m0_general(&spec, &picard, &NceOptions::default()).map_err(|e| TestCaseError::fail(format!("{e:?} {m:?}")))?;
        let (special, _) = compute_m0_case1(&spec, &picard).unwrap();
        prop_assert!(general.field.sup_distance(&special) < 1e-8);
        prop_assert!(general.field.additivity_defect() < 1e-9);
    }

    #[test]
    fn limit_agent_path_ignores_population_size(seed in any::<u64>(), rep in 0u32..100) {
        let spec = ScalarModel {
            a: 1.0, xi: 1.0, eta: 0.2, input: 1.0, input_population: 0.5, sigma: 0.5,
            state_weight: 1.0, state_weight_delayed: 0.5, control_weight_delayed: 0.5,
            terminal_weight: 1.0, delta: 0.125, theta: 0.125,
            ..ScalarModel::default()
        }
        .spec(0.0625)
        .unwrap();
        let eq = Equilibrium::case1(&spec, &PicardOptions::default()).unwrap();
        let run = |agents| {
            let noise = NoiseConfig { seed, agents, replications: 1 };
            simulate_population(&spec, std::slice::from_ref(&eq.rule), &noise, rep, Coupling::Decentralized(&eq.field))
                .unwrap()
        };
        let small = run(2);
        let large = run(5);
        prop_assert_eq!(small.states[0].forward_values(), large.states[0].forward_values());
        prop_assert_eq!(small.states[1].forward_values(), large.states[1].forward_values());
        prop_assert_ne!(large.states[0].forward_values(), large.states[1].forward_values());
    }
}
