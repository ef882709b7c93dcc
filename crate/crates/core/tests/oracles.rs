use asqn_core::lbfgs::LbfgsMemory;
use asqn_core::model::{
    combined_gradient, draw_subsample, full_gradient, potential, stochastic_gradient, Dataset, LinearGaussianModel,
    MatrixFactorizationModel, Model, Observation, Rating, Subsample,
};
use asqn_core::rng::{fill_standard_normal, standard_normal, stream};
use asqn_core::sampler::{sgld_step, ParameterState};
use asqn_core::simulator::{
    lognormal_parameters, run_async, run_sync_mb, sample_compute_time, time_to_epsilon, MbConfig, Probe, SimConfig,
};
use asqn_core::sampler::{AsgdConfig, AsyncRule, SamplerConfig};
use proptest::prelude::*;

fn random_linear(seed: u64, d: usize, n: usize, var: f64) -> (LinearGaussianModel, Dataset<Observation>) {
    let mut rng = stream(seed);
    let model = LinearGaussianModel::new(d, var).unwrap();
    let recs = (0..n)
        .map(|_| {
            let mut features = vec![0.0; d];
            fill_standard_normal(&mut rng, &mut features);
            Observation { features, target: standard_normal(&mut rng) }
        })
        .collect();
    let data = Dataset::for_model(&model, recs).unwrap();
    (model, data)
}

fn random_mf(seed: u64) -> (MatrixFactorizationModel, Dataset<Rating>) {
    let mut rng = stream(seed);
    let model = MatrixFactorizationModel::new(4, 5, 2).unwrap();
    let mut recs = Vec::new();
    for row in 0..4 {
        for col in 0..5 {
            if (row + col) % 2 == 0 {
                recs.push(Rating { row, col, value: standard_normal(&mut rng) });
            }
        }
    }
    let data = Dataset::for_model(&model, recs).unwrap();
    (model, data)
}

// Dense inverse-BFGS recursion H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ,
// started from the scaled identity of the newest pair.
fn dense_bfgs(pairs: &[(Vec<f64>, Vec<f64>)], d: usize) -> Vec<Vec<f64>> {
    let (s_new, y_new) = pairs.last().unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gamma = dot(s_new, y_new) / dot(y_new, y_new);
    let mut h: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { gamma } else { 0.0 }).collect()).collect();
    for (s, y) in pairs {
        let rho = 1.0 / dot(s, y);
        let v: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 } - rho * y[i] * s[j]).collect())
            .collect();
        // Vᵀ H V
        let hv: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (0..d).map(|k| h[i][k] * v[k][j]).sum()).collect()).collect();
        h = (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| v[k][i] * hv[k][j]).sum::<f64>() + rho * s[i] * s[j]).collect())
            .collect();
    }
    h
}

#[test]
fn two_loop_matches_dense_bfgs() {
    let mut rng = stream(11);
    for d in [2usize, 5, 10] {
        for m in [1usize, 2, 3, 5] {
            for _ in 0..50 {
                // y = A s with A symmetric positive definite keeps every pair admissible
                let mut b = vec![0.0; d * d];
                fill_standard_normal(&mut rng, &mut b);
                let a: Vec<f64> = (0..d * d)
                    .map(|ij| {
                        let (i, j) = (ij / d, ij % d);
                        (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() / d as f64 + if i == j { 0.5 } else { 0.0 }
                    })
                    .collect();
                let mut memory = LbfgsMemory::new(d, m, 1e-8, 0.0).unwrap();
                let mut pairs = Vec::new();
                for _ in 0..m + 2 {
                    let mut s = vec![0.0; d];
                    fill_standard_normal(&mut rng, &mut s);
                    let y: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i * d + j] * s[j]).sum()).collect();
                    assert!(memory.try_add(&s, &y).unwrap());
                    pairs.push((s, y));
                }
                let kept = &pairs[pairs.len() - m..];
                let h = dense_bfgs(kept, d);
                let mut v = vec![0.0; d];
                fill_standard_normal(&mut rng, &mut v);
                let got = memory.apply(&v).unwrap();
                for i in 0..d {
                    let want: f64 = (0..d).map(|j| h[i][j] * v[j]).sum();
                    assert!((got[i] - want).abs() < 1e-10, "d={d} M={m}: {} vs {}", got[i], want);
                }
            }
        }
    }
}

#[test]
fn single_index_gradients_average_to_full_gradient() {
    let (m, d) = random_linear(3, 4, 3, 2.0);
    let theta = [0.3, -1.0, 0.5, 2.0];
    let full = full_gradient(&m, &d, &theta).unwrap();
    let mut avg = vec![0.0; 4];
    for i in 0..3 {
        let g = stochastic_gradient(&m, &d, &theta, &[i]).unwrap();
        for (a, x) in avg.iter_mut().zip(&g) {
            *a += x / 3.0;
        }
    }
    for (a, b) in avg.iter().zip(&full) {
        assert!((a - b).abs() < 1e-12);
    }

    // every (S, O) pair with one index each
    let mut avg = vec![0.0; 4];
    for s in 0..3 {
        for o in 0..3 {
            let g = combined_gradient(&m, &d, &theta, &Subsample { large: vec![s], overlap: vec![o] }).unwrap();
            for (a, x) in avg.iter_mut().zip(&g) {
                *a += x / 9.0;
            }
        }
    }
    for (a, b) in avg.iter().zip(&full) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn check_finite_differences<M: Model>(model: &M, data: &Dataset<M::Record>, theta: &[f64]) {
    let g = full_gradient(model, data, theta).unwrap();
    let h = 1e-6;
    for i in 0..theta.len() {
        let mut up = theta.to_vec();
        let mut down = theta.to_vec();
        up[i] += h;
        down[i] -= h;
        let fd = (potential(model, data, &up).unwrap() - potential(model, data, &down).unwrap()) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "component {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let (m, d) = random_linear(5, 6, 20, 3.0);
    let mut rng = stream(6);
    let mut theta = vec![0.0; 6];
    fill_standard_normal(&mut rng, &mut theta);
    check_finite_differences(&m, &d, &theta);
}

#[test]
fn factorization_gradient_matches_finite_differences() {
    let (m, d) = random_mf(7);
    let mut rng = stream(8);
    let mut theta = vec![0.0; m.dim()];
    fill_standard_normal(&mut rng, &mut theta);
    check_finite_differences(&m, &d, &theta);
}

#[test]
fn subsample_indices_are_uniform() {
    let n = 10;
    let mut rng = stream(21);
    let mut counts = vec![0u64; n];
    for _ in 0..20_000 {
        let omega = draw_subsample(&mut rng, n, 3, 2).unwrap();
        for i in omega.concatenated() {
            counts[i] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.1% critical value of χ² with 9 degrees of freedom
    assert!(chi2 < 27.88, "χ² = {chi2}");
}

#[test]
fn sgld_samples_the_posterior_variance() {
    // U(θ) = θ²/2 + (1 - θ)²/2: posterior N(1/2, 1/(2β))
    let m = LinearGaussianModel::new(1, 1.0).unwrap();
    let d = Dataset::for_model(&m, vec![Observation { features: vec![1.0], target: 1.0 }]).unwrap();
    let beta = 2.0;
    let mut rng = stream(31);
    let mut theta = vec![0.5];
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for k in 0..400_000 {
        theta = sgld_step(&theta, 0.01, beta, &m, &d, &[0], &mut rng).unwrap();
        if k >= 1_000 {
            sum += theta[0];
            sum_sq += theta[0] * theta[0];
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = sum_sq / count - mean * mean;
    // the Euler chain's own stationary variance is 1/(β·2·(1 - h))
    let want = 1.0 / (beta * 2.0 * (1.0 - 0.01));
    assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    assert!((var - want).abs() < 0.05 * want, "var {var} vs {want}");
}

#[test]
fn log_normal_has_requested_moments() {
    let mut rng = stream(41);
    let n = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let x = sample_compute_time(&mut rng, 10.0, 2.0).unwrap();
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    let std = (sum_sq / n as f64 - mean * mean).sqrt();
    assert!((mean - 10.0).abs() < 0.1, "mean {mean}");
    assert!((std - 2.0).abs() < 0.02, "std {std}");
}

#[test]
fn heavy_tailed_log_normal_matches_in_log_space() {
    // With σ/μ = 20 the sample moments of X itself do not settle at 10^6
    // draws; the moments of ln X do.
    let (m, s) = lognormal_parameters(10.0, 200.0).unwrap();
    let mut rng = stream(42);
    let n = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let l = sample_compute_time(&mut rng, 10.0, 200.0).unwrap().ln();
        sum += l;
        sum_sq += l * l;
    }
    let mean = sum / n as f64;
    let std = (sum_sq / n as f64 - mean * mean).sqrt();
    assert!((mean - m).abs() < 0.01 * m.abs(), "{mean} vs {m}");
    assert!((std - s).abs() < 0.01 * s, "{std} vs {s}");
}

fn sim_problem() -> (LinearGaussianModel, Dataset<Observation>) {
    random_linear(51, 3, 30, 1.0)
}

fn asgd() -> AsyncRule {
    AsyncRule::Asgd(AsgdConfig { step: 1e-3, batch: 3, friction: None })
}

fn lbfgs_rule() -> AsyncRule {
    AsyncRule::AsLbfgs(SamplerConfig { step: 1e-3, friction: 0.1, inverse_temperature: 100.0, large_batch: 3, overlap_batch: 2, ..Default::default() })
}

#[test]
fn simulator_is_deterministic() {
    let (m, d) = sim_problem();
    let cfg = SimConfig { workers: 4, worker_time: 5.0, worker_time_std: 4.0, comm_time: 1.0, master_time: 0.5, max_iterations: 400, record_every: 3, seed: 9, ..Default::default() };
    let start = ParameterState::at_rest(vec![1.0; 3]).unwrap();
    let a = run_async(&cfg, &lbfgs_rule(), start.clone(), &m, &d, Probe::default()).unwrap();
    let b = run_async(&cfg, &lbfgs_rule(), start.clone(), &m, &d, Probe::default()).unwrap();
    assert_eq!(a, b);
    let other = run_async(&SimConfig { seed: 10, ..cfg }, &lbfgs_rule(), start, &m, &d, Probe::default()).unwrap();
    assert_ne!(a.final_state, other.final_state);
}

#[test]
fn every_arrival_is_applied_or_pending() {
    let (m, d) = sim_problem();
    for workers in [1, 3, 8] {
        let cfg = SimConfig { workers, worker_time: 5.0, worker_time_std: 3.0, comm_time: 1.0, master_time: 1.5, max_time: 500.0, max_iterations: u64::MAX - 1, seed: 4, ..Default::default() };
        let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert_eq!(trace.applied() + trace.unapplied, trace.sends);
        assert_eq!(trace.staleness.len() as u64, trace.applied());
        assert!(trace.truncated);
    }
}

#[test]
fn identical_workers_reach_staleness_w_minus_one() {
    let (m, d) = sim_problem();
    for workers in [2usize, 3, 5, 8] {
        let cfg = SimConfig { workers, worker_time: 6.0, max_iterations: 200, ..Default::default() };
        let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert!(trace.staleness[workers..].iter().all(|&l| l == workers as u64 - 1));
        assert_eq!(trace.max_staleness(), workers as u64 - 1);
    }
}

#[test]
fn throughput_scales_with_workers() {
    let (m, d) = sim_problem();
    let rate = |workers: usize| {
        let cfg = SimConfig { workers, worker_time: 3.0, max_iterations: 800, ..Default::default() };
        let t = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
        t.applied() as f64 / t.end_time
    };
    let base = rate(1);
    for w in [2usize, 4, 8] {
        assert_eq!(rate(w), w as f64 * base);
    }
}

#[test]
fn epsilon_time_matches_a_manual_scan() {
    // 1-d quadratic U = θ²/2 + (2 - θ)²/2, U* = 1 at θ* = 1
    let m = LinearGaussianModel::new(1, 1.0).unwrap();
    let d = Dataset::for_model(&m, vec![Observation { features: vec![1.0], target: 2.0 }]).unwrap();
    let theta = [1.0];
    assert!((potential(&m, &d, &theta).unwrap() - 1.0).abs() < 1e-15);
    let cfg = SimConfig { workers: 2, worker_time: 2.0, worker_time_std: 1.0, max_iterations: 300, seed: 3, ..Default::default() };
    let rule = AsyncRule::Asgd(AsgdConfig { step: 0.02, batch: 1, friction: None });
    let trace = run_async(&cfg, &rule, ParameterState::at_rest(vec![-3.0]).unwrap(), &m, &d, Probe::default()).unwrap();
    let eps = 1e-3;
    let mut manual = None;
    for r in &trace.records {
        if (r.potential - 1.0) / 1.0 <= eps {
            manual = Some(r.time);
            break;
        }
    }
    assert!(manual.is_some());
    let got = time_to_epsilon(&trace.records, 1.0, eps);
    assert_eq!(got.time, manual);
    assert!(!got.absolute);
}

fn mb_config() -> MbConfig {
    MbConfig { step: 0.01, memory_size: 3, cautious_epsilon: 1e-8, shift: 0.0, large_batch: 2, overlap_batch: 1 }
}

#[test]
fn stragglers_reduce_inclusion() {
    let (m, d) = sim_problem();
    let mean_included = |std: f64| {
        let cfg = SimConfig { workers: 40, worker_time: 200.0, worker_time_std: std, round_timeout: 400.0, master_time: 30.0, comm_time: 10.0, max_iterations: 100, seed: 77, ..Default::default() };
        let t = run_sync_mb(&cfg, &mb_config(), ParameterState::at_rest(vec![0.0; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert_eq!(t.included.len(), 100);
        t.included.iter().sum::<usize>() as f64 / 100.0
    };
    let counts = [mean_included(0.0), mean_included(100.0), mean_included(200.0)];
    assert_eq!(counts[0], 40.0);
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
}

#[test]
fn round_length_is_bounded_by_the_timeout() {
    let (m, d) = sim_problem();
    let cfg = SimConfig { workers: 6, worker_time: 10.0, worker_time_std: 8.0, round_timeout: 12.0, master_time: 30.0, comm_time: 10.0, max_iterations: 200, seed: 5, ..Default::default() };
    let t = run_sync_mb(&cfg, &mb_config(), ParameterState::at_rest(vec![0.0; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
    for w in t.records.windows(2) {
        let dt = w[1].time - w[0].time;
        assert!(dt > 50.0 && dt <= 62.0 + 1e-9, "round took {dt}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packing_round_trips(rows in 1usize..6, cols in 1usize..6, rank in 1usize..4, seed in any::<u64>()) {
        let model = MatrixFactorizationModel::new(rows, cols, rank).unwrap();
        let mut theta = vec![0.0; model.dim()];
        fill_standard_normal(&mut stream(seed), &mut theta);
        let (f, g) = model.unpack(&theta).unwrap();
        prop_assert_eq!(model.pack(&f, &g).unwrap(), theta);
    }

    #[test]
    fn combined_equals_stochastic_on_identical_parts(seed in any::<u64>(), k in 1usize..6) {
        let (m, d) = random_linear(seed, 3, 8, 1.5);
        let mut rng = stream(seed ^ 1);
        let idx: Vec<usize> = draw_subsample(&mut rng, 8, k, 1).unwrap().large;
        let mut theta = vec![0.0; 3];
        fill_standard_normal(&mut rng, &mut theta);
        let a = combined_gradient(&m, &d, &theta, &Subsample { large: idx.clone(), overlap: idx.clone() }).unwrap();
        let b = stochastic_gradient(&m, &d, &theta, &idx).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn traces_are_monotone(seed in any::<u64>(), workers in 1usize..6, std in 0.0f64..20.0) {
        let (m, d) = sim_problem();
        let cfg = SimConfig { workers, worker_time: 5.0, worker_time_std: std, comm_time: 1.0, master_time: 0.3, max_iterations: 120, record_every: 2, seed, ..Default::default() };
        let t = run_async(&cfg, &lbfgs_rule(), ParameterState::at_rest(vec![0.5; 3]).unwrap(), &m, &d, Probe::default()).unwrap();
        for w in t.records.windows(2) {
            prop_assert!(w[1].iteration > w[0].iteration);
            prop_assert!(w[1].time >= w[0].time);
        }
        prop_assert!(t.max_staleness() < 120);
    }
}
