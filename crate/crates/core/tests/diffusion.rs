use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splitdiff::diffusion::{
    clip_noise_estimate, forward_diffuse, make_schedule, reverse_step, sample_training_pair, standard_normal,
    DiffusionError, ScheduleKind, VarianceSchedule, MAX_BETA,
};
use splitdiff::tensor::Tensor;

fn cosine(steps: usize) -> VarianceSchedule {
    make_schedule(ScheduleKind::Cosine, steps, 0.008).unwrap()
}

fn check_schedule(s: &VarianceSchedule) {
    let steps = s.steps();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.alpha_bar(1) < 1.0);
    assert!(s.alpha_bar(steps) > 0.0);
    for t in 1..=steps {
        let b = s.beta(t);
        assert!(b > 0.0 && b < 1.0, "beta[{t}] = {b}");
        assert!(b <= MAX_BETA);
        assert_eq!(s.alpha(t), 1.0 - b);
        assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t), "telescoping at {t}");
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        if t > 1 {
            let snr = |t| s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr(t) < snr(t - 1));
        }
    }
}

#[test]
fn cosine_schedule_properties_at_hundred_steps() {
    check_schedule(&cosine(100));
}

#[test]
fn linear_schedule_properties() {
    check_schedule(&make_schedule(ScheduleKind::Linear, 100, 0.0).unwrap());
    let s = make_schedule(ScheduleKind::Linear, 10, 0.0).unwrap();
    assert!((s.beta(1) - 1e-4).abs() < 1e-15);
    assert!((s.beta(10) - 0.02).abs() < 1e-15);
}

#[test]
fn cosine_four_steps_matches_closed_form() {
    // cumulative product of clipped betas, evaluated independently in double precision
    let expected = [
        0.8470121613269047,
        0.4938435904406378,
        0.14427210238573585,
        0.00014427210238573596,
    ];
    let s = cosine(4);
    for (t, e) in (1..=4).zip(expected) {
        assert!((s.alpha_bar(t) - e).abs() < 1e-12, "t = {t}: {} vs {e}", s.alpha_bar(t));
    }
    assert_eq!(s.beta(4), MAX_BETA);
}

#[test]
fn schedule_rejects_bad_arguments() {
    assert_eq!(
        make_schedule(ScheduleKind::Cosine, 1, 0.008).unwrap_err(),
        DiffusionError::TooFewSteps(1)
    );
    assert!(matches!(
        make_schedule(ScheduleKind::Cosine, 10, -0.1),
        Err(DiffusionError::BadOffset(_))
    ));
    assert!(matches!(
        make_schedule(ScheduleKind::Cosine, 10, f64::NAN),
        Err(DiffusionError::BadOffset(_))
    ));
}

fn image(values: &[f32]) -> Tensor<f32> {
    Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
}

#[test]
fn forward_diffuse_zero_cases() {
    let s = cosine(50);
    let x0 = image(&[-1.0, -0.3, 0.0, 0.7, 1.0]);
    let zero = Tensor::zeros(x0.shape());
    let eps = image(&[0.4, -1.2, 2.0, 0.1, -0.5]);
    for t in [1, 17, 50] {
        let a = s.alpha_bar(t).sqrt() as f32;
        let b = (1.0 - s.alpha_bar(t)).sqrt() as f32;
        let out = forward_diffuse(&x0, t, &zero, &s).unwrap();
        assert_eq!(out, x0.map(|v| a * v));
        let out = forward_diffuse(&zero, t, &eps, &s).unwrap();
        assert_eq!(out, eps.map(|v| b * v));
    }
}

#[test]
fn forward_diffuse_rejects_bad_input() {
    let s = cosine(10);
    let x = image(&[0.0; 3]);
    for t in [0, 11] {
        assert_eq!(
            forward_diffuse(&x, t, &x, &s).unwrap_err(),
            DiffusionError::TimestepOutOfRange { t, steps: 10 }
        );
    }
    let other = image(&[0.0; 4]);
    assert!(matches!(
        forward_diffuse(&x, 1, &other, &s),
        Err(DiffusionError::ShapeMismatch(..))
    ));
}

#[test]
fn forward_marginal_matches_monte_carlo() {
    let s = cosine(50);
    let x0 = image(&[-1.0, -0.5, 0.25, 1.0]);
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in [50, 25, 5] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..draws {
            let eps = standard_normal(x0.shape(), &mut rng);
            let x = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for (i, &v) in x.data().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        let n = draws as f64;
        for i in 0..4 {
            let mean = sum[i] / n;
            let var = (sq[i] - n * mean * mean) / (n - 1.0);
            let want_mean = ab.sqrt() * x0.data()[i] as f64;
            let want_var = 1.0 - ab;
            let sigma = (want_var / n).sqrt();
            assert!((mean - want_mean).abs() < 3.0 * sigma, "t {t} pixel {i}: mean {mean} vs {want_mean}");
            assert!((var / want_var - 1.0).abs() < 0.05, "t {t} pixel {i}: var {var} vs {want_var}");
        }
    }
}

#[test]
fn final_step_inverts_forward_diffusion() {
    // at t = 1, alpha_bar equals alpha and the reverse mean is the exact inverse
    for s in [cosine(2), cosine(50), make_schedule(ScheduleKind::Linear, 10, 0.0).unwrap()] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 37) % 21) as f32 / 10.0 - 1.0);
        let eps = standard_normal(x0.shape(), &mut rng);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, 1, &eps, &s, &Tensor::zeros(x0.shape())).unwrap();
        let err = back
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5, "max error {err}");
    }
}

#[test]
fn reverse_step_follows_its_formula() {
    let s = cosine(50);
    let x = image(&[0.5, -1.5, 2.0]);
    let e = image(&[0.1, 0.2, -0.3]);
    let z = image(&[1.0, -1.0, 0.5]);
    let t = 30;
    let out = reverse_step(&x, t, &e, &s, &z).unwrap();
    for i in 0..3 {
        let (xv, ev, zv) = (x.data()[i] as f64, e.data()[i] as f64, z.data()[i] as f64);
        let want = (xv - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * ev) / s.alpha(t).sqrt() + s.beta(t).sqrt() * zv;
        assert!((out.data()[i] as f64 - want).abs() < 1e-5);
    }
    assert_eq!(out, reverse_step(&x, t, &e, &s, &z).unwrap());
}

#[test]
fn reverse_step_with_tiny_beta_is_near_identity() {
    let s = make_schedule(ScheduleKind::Linear, 1000, 0.0).unwrap();
    let x = image(&[0.5, -0.25, 1.0]);
    let zero = Tensor::zeros(x.shape());
    let out = reverse_step(&x, 1, &zero, &s, &zero).unwrap();
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
        assert!((a - b / s.alpha(1).sqrt() as f32).abs() < 1e-6);
    }
}

#[test]
fn reverse_step_rejects_noise_at_the_end() {
    let s = cosine(10);
    let x = image(&[0.0, 1.0]);
    let z = image(&[0.0, 0.1]);
    assert_eq!(
        reverse_step(&x, 1, &x, &s, &z).unwrap_err(),
        DiffusionError::NoiseAtFinalStep
    );
    assert!(reverse_step(&x, 2, &x, &s, &z).is_ok());
    assert!(matches!(
        reverse_step(&x, 11, &x, &s, &z),
        Err(DiffusionError::TimestepOutOfRange { .. })
    ));
}

#[test]
fn training_pairs_are_deterministic_and_consistent() {
    let s = cosine(50);
    let x0 = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 / 16.0);
    let a = sample_training_pair(&x0, &s, &mut ChaCha8Rng::seed_from_u64(8));
    let b = sample_training_pair(&x0, &s, &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(a, b);
    assert!((1..=50).contains(&a.t));
    assert_eq!(a.epsilon.shape(), a.x_t.shape());
    assert_eq!(a.x_t, forward_diffuse(&x0, a.t, &a.epsilon, &s).unwrap());
}

#[test]
fn training_timesteps_are_uniform() {
    let s = cosine(100);
    let x0 = Tensor::zeros(&[1, 1, 1, 1]);
    // one seed tests 100 bins at 3 sigma; the chi-square below is the joint check
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let draws = 10_000usize;
    let mut counts = vec![0usize; 101];
    for _ in 0..draws {
        counts[sample_training_pair(&x0, &s, &mut rng).t] += 1;
    }
    assert_eq!(counts[0], 0);
    let p = 0.01;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (t, &c) in counts.iter().enumerate().skip(1) {
        assert!((c as f64 - expected).abs() < 3.0 * sigma, "t = {t}: {c}");
    }
    // 99 degrees of freedom; 0.999 quantile is about 148
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 148.0, "chi-square {chi2}");
}

#[test]
fn gaussian_noise_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 1_000_000;
    let z = standard_normal(&[n], &mut rng);
    let mean = z.mean();
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
}

#[test]
fn clipping_keeps_in_range_estimates() {
    let s = cosine(50);
    let x0 = image(&[-0.9, 0.0, 0.8]);
    let eps = image(&[0.3, -1.0, 1.5]);
    let t = 20;
    let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
    let clipped = clip_noise_estimate(&xt, t, &eps, &s).unwrap();
    assert_eq!(clipped, eps);
}

proptest! {
    #[test]
    fn telescoping_holds_for_any_cosine_schedule(steps in 2usize..400, offset in 0.0f64..0.1) {
        let s = make_schedule(ScheduleKind::Cosine, steps, offset).unwrap();
        for t in 1..=steps {
            prop_assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        prop_assert!(s.alpha_bar(steps) > 0.0);
    }

    #[test]
    fn clipped_estimate_implies_an_in_range_image(
        x in prop::collection::vec(-5.0f32..5.0, 1..16),
        t in 1usize..=50,
        seed in any::<u64>(),
    ) {
        let s = cosine(50);
        let xt = image(&x);
        let eps = standard_normal(xt.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
        let clipped = clip_noise_estimate(&xt, t, &eps, &s).unwrap();
        let (sa, sb) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for (&xv, &e) in xt.data().iter().zip(clipped.data()) {
            let x0 = (xv as f64 - sb * e as f64) / sa;
            // f32 rounding of the re-derived noise, amplified by 1/sqrt(alpha_bar)
            prop_assert!(x0.abs() <= 1.0 + 1e-3 / sa, "x0 {}", x0);
        }
    }
}
