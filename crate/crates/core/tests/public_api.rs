use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umcmc::linops::{prox_gaussian_nll, GaussianLikelihood, LinearOperator};
use umcmc::metrics::{psnr, sliced_wasserstein, SampleSet};
use umcmc::persist::Archive;
use umcmc::problems::blur::sample_motion_blur_kernel;
use umcmc::problems::mask::{hermitian_defect, sample_fourier_mask, TrackParams};
use umcmc::rng::{normal_tensor, Role, StreamKey};
use umcmc::Tensor;

fn circulant_from_seed(seed: u64, n: usize) -> LinearOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = sample_motion_blur_kernel(3, 0.5, 1.0, &mut rng).unwrap();
    LinearOperator::circulant(kernel, n, n).unwrap()
}

#[test]
fn blurred_observation_round_trips_through_archive() {
    let op = circulant_from_seed(3, 8);
    let mut rng = StreamKey::new(5, 0).stream(0, Role::Observation);
    let x = normal_tensor(&mut rng, &[8, 8]);
    let y = op.apply(&x).unwrap();
    let archive = Archive {
        arrays: vec![("x".into(), x.clone()), ("y".into(), y.clone())],
        config: "sigma = 0.1\n".into(),
        rng_state: [7; 16],
    };
    let back = Archive::from_bytes(&archive.to_bytes().unwrap()).unwrap();
    assert_eq!(back, archive);
    assert_eq!(back.get("y").unwrap(), &y);
    assert!(back.get("z").is_err());
}

#[test]
fn stream_keys_separate_chains_and_roles() {
    let a = normal_tensor(
        &mut StreamKey::new(1, 0).stream(2, Role::LatentNoise),
        &[16],
    );
    let b = normal_tensor(
        &mut StreamKey::new(1, 1).stream(2, Role::LatentNoise),
        &[16],
    );
    let c = normal_tensor(
        &mut StreamKey::new(1, 0).stream(2, Role::ConditionalNoise),
        &[16],
    );
    let again = normal_tensor(
        &mut StreamKey::new(1, 0).stream(2, Role::LatentNoise),
        &[16],
    );
    assert_eq!(a, again);
    assert_ne!(a, b);
    assert_ne!(a, c);
}

#[test]
fn identical_sample_sets_have_zero_sw_and_exact_psnr_is_infinite() {
    let pts: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![i as f64, (i * i) as f64 * 0.1])
        .collect();
    let s = SampleSet::new(pts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sliced_wasserstein(&s, &s, 32, &mut rng).unwrap().abs() < 1e-12);
    let x = Tensor::full(&[4, 4], 0.5);
    assert!(psnr(&x, &x, 1.0).unwrap().is_infinite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn circulant_adjoint_identity(seed in 0u64..10_000) {
        let op = circulant_from_seed(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = normal_tensor(&mut rng, &[6, 6]);
        let u = normal_tensor(&mut rng, &[6, 6]);
        let lhs = op.apply(&x).unwrap().dot(&u);
        let rhs = x.dot(&op.adjoint(&u).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn prox_is_stationary(seed in 0u64..10_000, gamma in 1e-3f64..10.0, sigma in 0.01f64..1.0) {
        let lik = GaussianLikelihood::new(circulant_from_seed(seed, 5), sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = normal_tensor(&mut rng, &[5, 5]);
        let v = normal_tensor(&mut rng, &[5, 5]);
        let x = prox_gaussian_nll(&lik, &y, gamma, &v).unwrap();
        let c = gamma / lik.component_variance();
        let r = lik.operator.adjoint(&lik.operator.apply(&x).unwrap().sub(&y).unwrap()).unwrap();
        let mut g = x.sub(&v).unwrap();
        g.axpy(c, &r);
        prop_assert!(g.norm() <= 1e-8 * (1.0 + v.norm()));
    }

    #[test]
    fn blur_kernels_are_normalized(seed in 0u64..10_000, half in 1usize..5) {
        let size = 2 * half + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = sample_motion_blur_kernel(size, 0.5, 1.0, &mut rng).unwrap();
        prop_assert_eq!(k.shape(), &[size, size][..]);
        prop_assert!((k.sum() - 1.0).abs() < 1e-12);
        prop_assert!(k.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fourier_masks_are_hermitian_and_binary(seed in 0u64..10_000, n in 8usize..24, tracks in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_fourier_mask(n, n, tracks, &TrackParams::default(), &mut rng).unwrap();
        prop_assert_eq!(hermitian_defect(&m).unwrap(), 0.0);
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
