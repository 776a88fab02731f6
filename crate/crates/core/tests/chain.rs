use moe_spatial::chain::*;
use proptest::prelude::*;

/// Potts closed form: `λ2/λ1 = (e^{2βJ} - 1) / (e^{2βJ} + n - 1)`.
fn potts_xi(n: usize, beta_j: f64) -> f64 {
    let e = (2.0 * beta_j).exp();
    -1.0 / ((e - 1.0) / (e + n as f64 - 1.0)).ln()
}

#[test]
fn ising_point_matches_log_tanh() {
    let m = SpinChainModel::potts(2, 1.0, 1.0, 8).unwrap();
    let xi = transfer_matrix_xi(&m).unwrap();
    assert!((xi + 1.0 / 1f64.tanh().ln()).abs() < 1e-12);
    assert!((xi - 3.67186).abs() < 1e-5);
}

#[test]
fn neighbour_agreement_matches_transfer_matrix() {
    // P(s_i = s_{i+1}) = 1/n + (1 - 1/n) r with r = exp(-1/ξ).
    for (n, bj) in [(2usize, 0.5), (3, 1.0), (4, 0.7)] {
        let m = SpinChainModel::potts(n, bj, 1.0, 256).unwrap();
        let r = (-1.0 / transfer_matrix_xi(&m).unwrap()).exp();
        let p = 1.0 / n as f64 + (1.0 - 1.0 / n as f64) * r;
        let samples = sample_chain(&m, 400, 20, n as u64).unwrap();
        let (mut agree, mut total) = (0u64, 0u64);
        for s in &samples {
            for w in s.windows(2) {
                agree += (w[0] == w[1]) as u64;
                total += 1;
            }
        }
        let freq = agree as f64 / total as f64;
        // Samples are correlated along the chain; 5 binomial sigmas scaled
        // by sqrt(2ξ) covers the effective sample size.
        let xi = transfer_matrix_xi(&m).unwrap();
        let sd = (p * (1.0 - p) / total as f64).sqrt() * (2.0 * xi + 1.0).sqrt();
        assert!((freq - p).abs() < 5.0 * sd, "n={n} freq={freq} p={p} sd={sd}");
    }
}

#[test]
fn small_chain_matches_enumeration() {
    let m = SpinChainModel {
        n_states: 2,
        coupling: 1.0,
        field: vec![0.2, -0.1],
        beta: 0.8,
        length: 4,
    };
    let states = 16;
    let decode = |i: usize| (0..4).map(|b| (i >> b) & 1).collect::<Vec<_>>();
    let w: Vec<f64> = (0..states).map(|i| (-m.beta * m.energy(&decode(i))).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut chain = MetropolisChain::new(&m, 3);
    for _ in 0..100 {
        chain.sweep();
    }
    let draws = 400_000;
    let mut counts = vec![0u64; states];
    for _ in 0..draws {
        chain.sweep();
        let idx = chain.state().iter().enumerate().map(|(b, &s)| s << b).sum::<usize>();
        counts[idx] += 1;
    }
    let tv: f64 = 0.5 * w.iter().zip(&counts).map(|(wi, &c)| (wi / z - c as f64 / draws as f64).abs()).sum::<f64>();
    assert!(tv < 0.01, "tv={tv}");
}

#[test]
fn infinite_temperature_is_uncorrelated() {
    let m = SpinChainModel::potts(3, 1.0, 0.0, 16).unwrap();
    assert_eq!(transfer_matrix_xi(&m).unwrap(), 0.0);
    assert!((mean_run_length(3, 0.0) - 1.5).abs() < 1e-15);
}

#[test]
fn no_long_range_order_at_finite_temperature() {
    let m = SpinChainModel::potts(2, 1.0, 1.0, 8).unwrap();
    let rows = order_check(&m, &[32, 128, 512], 100, 4).unwrap();
    assert!(rows.windows(2).all(|w| w[1].mean_abs_m < w[0].mean_abs_m));
    assert!(rows[2].mean_abs_m < 0.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn transfer_matrix_matches_potts_closed_form(n in 2usize..7, beta in 0.05f64..3.0, j in 0.05f64..2.0) {
        let m = SpinChainModel::potts(n, j, beta, 8).unwrap();
        let xi = transfer_matrix_xi(&m).unwrap();
        let want = potts_xi(n, beta * j);
        prop_assert!((xi - want).abs() <= 1e-9 * want.max(1.0), "xi={} want={}", xi, want);
    }

    #[test]
    fn xi_depends_on_beta_j_only(n in 2usize..5, beta in 0.1f64..2.0, j in 0.1f64..2.0) {
        let a = transfer_matrix_xi(&SpinChainModel::potts(n, j, beta, 8).unwrap()).unwrap();
        let b = transfer_matrix_xi(&SpinChainModel::potts(n, beta * j, 1.0, 8).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn run_length_is_at_least_the_uncorrelated_mean(n in 2usize..9, xi in 0.0f64..50.0) {
        let base = n as f64 / (n as f64 - 1.0);
        prop_assert!(mean_run_length(n, xi) >= base - 1e-12);
    }

    #[test]
    fn magnetization_in_unit_interval(states in prop::collection::vec(0usize..4, 1..64)) {
        let m = magnetization(&states, 4);
        prop_assert!((0.0..=1.0).contains(&m));
    }
}
