use nalgebra::{DMatrix, DVector};
use nested_msf::layer1::jitter_one;
use nested_msf::numerics::{log_mean_exp, normalize_log_weights, LogWeights};
use nested_msf::{
    compute_estimates, enkf_slow_step, fast_average, generate_observations, generate_truth,
    init_hierarchy, lorenz_model, spinup_init, BoundaryPolicy, JitterKernel, Layer2Options,
    Layer2State, LorenzConfig, LorenzParams, Method, MethodSpec, MultiScaleModel, ParameterPrior,
    Purpose, Resampler, SeedKey, Smoother, SmootherPriors, StatePair, StatePriors, StreamPath,
};
use proptest::prelude::*;
use rand::SeedableRng;

fn small_lorenz() -> MultiScaleModel {
    lorenz_model(&LorenzConfig {
        d_x: 4,
        r_ratio: 3,
        ..LorenzConfig::default()
    })
    .unwrap()
}

fn spun_up(m: &MultiScaleModel) -> (DVector<f64>, StatePair) {
    let th = LorenzParams::default().to_vector();
    let init = spinup_init(m, &th, 0.5).unwrap();
    (th, init)
}

fn priors(init: &StatePair) -> SmootherPriors {
    SmootherPriors {
        theta: ParameterPrior::cube(4, 2.0, 20.0).unwrap(),
        states: StatePriors::isotropic(init.x.clone(), 0.1, init.z.clone(), 1.0),
    }
}

proptest! {
    #[test]
    fn normalized_weights_ignore_offsets(
        lw in prop::collection::vec(-800.0f64..0.0, 1..64),
        c in -500.0f64..500.0,
    ) {
        let (a, _) = normalize_log_weights(&LogWeights(lw.clone())).unwrap();
        let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
        let (b, _) = normalize_log_weights(&LogWeights(shifted)).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jittered_particles_stay_in_box(
        theta in prop::collection::vec(2.0f64..20.0, 4),
        variance in 1e-4f64..50.0,
        seed in any::<u64>(),
    ) {
        let prior = ParameterPrior::cube(4, 2.0, 20.0).unwrap();
        let kernel = JitterKernel { variance, boundary: BoundaryPolicy::RedrawThenClamp };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (out, _) = jitter_one(&mut rng, &DVector::from_vec(theta), &kernel, &prior);
        prop_assert!(prior.contains(&out.unwrap()));
    }
}

#[test]
fn stored_block_averages_regenerate_exactly() {
    let m = small_lorenz();
    let (th, init) = spun_up(&m);
    let key = SeedKey::from_seed(3);
    let truth = generate_truth(
        &m,
        &th,
        &init,
        20,
        &key.stream(StreamPath::new(0, 0, Purpose::Truth, 0, 0)),
    )
    .unwrap();
    for t in 1..=truth.steps() {
        let block = &truth.z_path[(t - 1) * truth.h + 1..=t * truth.h];
        assert_eq!(
            fast_average(block, truth.h).unwrap(),
            truth.z_bar_path[t - 1]
        );
    }
}

#[test]
fn observation_noise_matches_r() {
    let m = small_lorenz();
    let (th, init) = spun_up(&m);
    let key = SeedKey::from_seed(4);
    let truth = generate_truth(
        &m,
        &th,
        &init,
        10_000,
        &key.stream(StreamPath::new(0, 0, Purpose::Truth, 0, 0)),
    )
    .unwrap();
    let obs = generate_observations(
        &truth,
        &m,
        &key.stream(StreamPath::new(0, 0, Purpose::Observation, 0, 0)),
    )
    .unwrap();
    let d_y = m.dims().d_y;
    let mut sq = DVector::zeros(d_y);
    for (k, y) in obs.y.iter().enumerate() {
        let clean = m.observe(truth.z_at(k + 1), &truth.x_path[k + 1], &th);
        sq += (y - clean).map(|v| v * v);
    }
    let var = sq / obs.len() as f64;
    for k in 0..d_y {
        let r = m.r().matrix()[(k, k)];
        assert!(
            (var[k] / r - 1.0).abs() < 0.1,
            "coordinate {k}: {} vs {r}",
            var[k]
        );
    }
}

#[test]
fn equal_weights_give_plain_averages() {
    let m = small_lorenz();
    let (_, init) = spun_up(&m);
    let p = priors(&init);
    let stream = SeedKey::from_seed(5).stream(StreamPath::new(0, 0, Purpose::Init, 0, 0));
    for method in [Method::EkfChain, Method::UkfChain] {
        let mut h = init_hierarchy(&m, &p.theta, 5, 3, method, &p.states, &stream).unwrap();
        h.weights = vec![0.2; 5];
        let est = compute_estimates(&h).unwrap();
        let mut theta = DVector::zeros(4);
        let mut x = DVector::zeros(m.dims().d_x);
        let mut z = DVector::zeros(m.dims().d_z);
        let mut count = 0.0;
        for (i, state) in h.states.iter().enumerate() {
            theta += &h.thetas[i];
            match state {
                Layer2State::Ensemble(e) => {
                    for k in 0..e.len() {
                        x += e.x.column(k);
                        z += &e.beliefs[k].mean;
                        count += 1.0;
                    }
                }
                Layer2State::Cloud(c) => {
                    for mem in &c.members {
                        x += &mem.x;
                        z += mem.sigma.mean();
                        count += 1.0;
                    }
                }
            }
        }
        assert!((est.theta - theta / 5.0).amax() < 1e-12);
        assert!((est.x - x / count).amax() < 1e-12);
        assert!((est.z - z / count).amax() < 1e-12);
    }
}

#[test]
fn ensemble_step_keeps_shape_and_evidence_identity() {
    let m = small_lorenz();
    let (th, init) = spun_up(&m);
    let p = priors(&init);
    let stream = SeedKey::from_seed(6).stream(StreamPath::new(0, 0, Purpose::Init, 0, 0));
    let h = init_hierarchy(&m, &p.theta, 1, 6, Method::EkfChain, &p.states, &stream).unwrap();
    let Layer2State::Ensemble(ens) = &h.states[0] else {
        panic!("ekf-chain holds an ensemble")
    };
    let y = m.observe(&init.z, &init.x, &th);
    let out = enkf_slow_step(
        &m,
        &th,
        ens,
        &y,
        &SeedKey::from_seed(6).stream(StreamPath::new(0, 1, Purpose::FastFilter, 0, 0)),
        &Layer2Options {
            resampler: Resampler::Multinomial,
            ess_threshold: None,
            perturb_observations: true,
        },
    )
    .unwrap();
    assert!((out.log_v - log_mean_exp(&out.log_u)).abs() < 1e-12);
    let Layer2State::Ensemble(next) = &out.state else {
        panic!("ensemble step returns an ensemble")
    };
    assert_eq!(next.x.ncols(), 6);
    assert!(next.x.iter().all(|v| v.is_finite()));
    for b in &next.beliefs {
        assert_eq!(b.cov, b.cov.transpose());
    }
}

#[test]
fn trace_length_and_determinism() {
    let m = small_lorenz();
    let (th, init) = spun_up(&m);
    let key = SeedKey::from_seed(7);
    let truth = generate_truth(
        &m,
        &th,
        &init,
        15,
        &key.stream(StreamPath::new(0, 0, Purpose::Truth, 0, 0)),
    )
    .unwrap();
    let obs = generate_observations(
        &truth,
        &m,
        &key.stream(StreamPath::new(0, 0, Purpose::Observation, 0, 0)),
    )
    .unwrap();
    let p = priors(&init);
    for method in [Method::EkfChain, Method::UkfChain] {
        let spec = MethodSpec::new(method, 3, 3, 11);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let mut s = Smoother::new(&m, &spec, &p).unwrap();
                    for y in &obs.y {
                        s.step(y).unwrap();
                    }
                    s.into_trace()
                })
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.len(), obs.len());
        for (ea, eb) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(ea.theta, eb.theta);
            assert_eq!(ea.x, eb.x);
            assert_eq!(ea.z, eb.z);
        }
        let stacked =
            DMatrix::from_columns(&a.estimates.iter().map(|e| e.z.clone()).collect::<Vec<_>>());
        assert!(stacked.iter().all(|v| v.is_finite()));
    }
}
