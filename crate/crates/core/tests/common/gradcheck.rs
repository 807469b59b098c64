use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitdiff::autograd::{Tape, Var};
use splitdiff::net::{build_unet, record_forward, NetConfig};
use splitdiff::tensor::Tensor;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Worst-case gradient mismatch relative to the largest entry. The floor
/// covers gradients that are exactly zero (a bias feeding a norm), where the
/// difference quotient only sees rounding noise around 1e-10.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().chain(analytic).map(|v| v.abs()).fold(1e-6, f64::max);
    diff / scale
}

/// Build `f` on a fresh tape over `inputs`, reduce with MSE against a
/// fixed target, and compare each input's gradient with central differences.
pub fn check_gradients(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let target = tape.leaf(Tensor::from_fn(&shape, |i| ((i * 7) % 5) as f64 / 5.0 - 0.4), false);
        let loss = tape.mse(out, target).unwrap();
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(inputs[v.index()].shape())))
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs);
    let h = 1e-6;
    let mut errors = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric.push((eval(&plus).0 - eval(&minus).0) / (2.0 * h));
        }
        assert_eq!(analytic[k].shape(), input.shape(), "gradient shape equals input shape");
        errors.push(rel_error(analytic[k].data(), &numeric));
    }
    errors
}

pub fn assert_close(name: &str, errors: Vec<f64>) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < 1e-3, "{name}: input {i} relative error {e:e}");
    }
}

pub fn conv2d_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errors = Vec::new();
    for pad in [0, 1] {
        let inputs = [random(&[2, 2, 4, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
        errors.extend(check_gradients(&inputs, |t, v| t.conv2d(v[0], v[1], pad).unwrap()));
    }
    errors
}

pub fn bias_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[2, 3, 2, 2], &mut rng), random(&[3], &mut rng)];
    let mut errors = check_gradients(&inputs, |t, v| t.add_bias(v[0], v[1]).unwrap());
    let inputs = [random(&[2, 3, 2, 2], &mut rng), random(&[2, 3], &mut rng)];
    errors.extend(check_gradients(&inputs, |t, v| t.add_bias(v[0], v[1]).unwrap()));
    errors
}

pub fn norm_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[2, 3, 3, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    check_gradients(&inputs, |t, v| t.channel_norm(v[0], v[1], v[2]).unwrap())
}

pub fn silu_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 3, 3], &mut rng);
    check_gradients(&[x], |t, v| t.silu(v[0]))
}

pub fn relu_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // keep inputs away from the kink
    let x = random(&[2, 2, 3, 3], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_gradients(&[x], |t, v| t.relu(v[0]))
}

pub fn add_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[2, 2, 4, 4], &mut rng), random(&[2, 2, 4, 4], &mut rng)];
    check_gradients(&inputs, |t, v| t.add(v[0], v[1]).unwrap())
}

pub fn avg_pool_case() -> Vec<f64> {
    let x = random(&[2, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(5));
    check_gradients(&[x], |t, v| t.avg_pool2(v[0]).unwrap())
}

pub fn upsample_case() -> Vec<f64> {
    let x = random(&[2, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(5));
    check_gradients(&[x], |t, v| t.upsample2(v[0]).unwrap())
}

pub fn linear_case() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)];
    check_gradients(&inputs, |t, v| t.linear(v[0], v[1], v[2]).unwrap())
}

pub fn mse_case() -> Vec<f64> {
    let x = random(&[2, 3], &mut ChaCha8Rng::seed_from_u64(6));
    check_gradients(&[x], |_, v| v[0])
}

pub fn unet_case() -> Vec<f64> {
    let cfg = NetConfig {
        base_channels: 2,
        depth: 1,
        timestep_embed_dim: 4,
        image_channels: 1,
        image_size: 4,
    };
    let params = build_unet(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // perturb the zero-initialized tensors so every path carries gradient
    let mut inputs: Vec<Tensor<f64>> = params
        .tensors()
        .map(|t| {
            let mut t = t.cast::<f64>();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            t
        })
        .collect();
    inputs.push(random(&[2, 1, 4, 4], &mut rng));
    let n_params = params.len();
    check_gradients(&inputs, |t, v| record_forward(&cfg, t, &v[..n_params], v[n_params], &[3, 9]).unwrap())
}

/// Every primitive plus the whole network, by name.
pub fn all_cases() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("conv2d", conv2d_case()),
        ("add_bias", bias_case()),
        ("channel_norm", norm_case()),
        ("silu", silu_case()),
        ("relu", relu_case()),
        ("add", add_case()),
        ("avg_pool2", avg_pool_case()),
        ("upsample2", upsample_case()),
        ("linear", linear_case()),
        ("mse", mse_case()),
        ("unet", unet_case()),
    ]
}
