use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

const TOL: f64 = 1e-6;

#[test]
fn every_op_passes_grad_check() {
    let worst = op_grad_errors(42, 20).unwrap();
    for (name, err) in &worst {
        assert!(*err <= TOL, "{name}: {err:e}");
    }
    let names: Vec<&str> = worst.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, op_set());
}

#[test]
fn grad_check_of_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(&mut rng, &[3, 4])).unwrap();
    let err = grad_check(
        |g| {
            let x = g.param("x")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn constant_objective_has_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param("x").unwrap();
    let z = g.scale(x, 0.0);
    let s = g.sum(z);
    let grads = g.backward(s).unwrap();
    assert!(grads.params()[0].1.data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_reports_non_finite_objective() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
    let err = grad_check(
        |g| {
            let x = g.param("x")?;
            Ok(g.scale(x, f64::INFINITY))
        },
        &store,
        1e-5,
    );
    assert!(matches!(err, Err(crate::Error::NonFinite(_))));
}

#[test]
fn softmax_of_constant_is_uniform() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(&[1, 5], 3.2));
    let y = g.softmax(x);
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(rand_tensor(&mut rng, &[4, 16]));
    let one = g.constant(Tensor::full(&[16], 1.0));
    let zero = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, one, zero).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn single_key_attention_returns_value_row() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let q = g.constant(Tensor::from_f64(&[1, 3], &[0.4, -1.0, 2.0]).unwrap());
    let k = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 0.5, 0.1]).unwrap());
    let v = g.constant(Tensor::from_f64(&[1, 3], &[7.0, -3.0, 0.25]).unwrap());
    let out = g.attention(q, k, v, AttnSpec::causal(1, 1, 1, 1)).unwrap();
    assert_eq!(g.value(out).data(), &[7.0, -3.0, 0.25]);
}

#[test]
fn masked_values_do_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParamStore::<f64>::new();
    let q = rand_tensor(&mut rng, &[4, 4]);
    let k = rand_tensor(&mut rng, &[4, 4]);
    let v = rand_tensor(&mut rng, &[4, 4]);
    let run = |v: Tensor<f64>| {
        let mut g = Graph::new(&store);
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v));
        let out = g.attention(q, k, v, AttnSpec::causal(1, 4, 4, 2)).unwrap();
        g.value(out).clone()
    };
    let base = run(v.clone());
    let mut edited = v.clone();
    edited.data_mut()[12..16].copy_from_slice(&[9.0, 9.0, 9.0, 9.0]);
    let after = run(edited);
    assert_eq!(&base.data()[..12], &after.data()[..12]);
    assert_ne!(&base.data()[12..], &after.data()[12..]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn reparameterized_gradient_skips_noise() {
    let mut store = ParamStore::<f64>::new();
    store.insert("mu", Tensor::from_f64(&[1, 2], &[0.1, 0.2]).unwrap()).unwrap();
    store.insert("sigma", Tensor::from_f64(&[1, 2], &[1.5, 0.5]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let mu = g.param("mu").unwrap();
    let sigma = g.param("sigma").unwrap();
    let noise = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -2.0]).unwrap());
    let scaled = g.mul(sigma, noise).unwrap();
    let z = g.add(mu, scaled).unwrap();
    let s = g.sum(z);
    let grads = g.backward(s).unwrap();
    assert!(grads.of(noise).is_none());
    assert_eq!(grads.of(sigma).unwrap().data(), &[0.3, -2.0]);
    assert_eq!(grads.of(mu).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn reparameterized_sample_mean_matches_mu() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mu = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 3.0]).unwrap();
    let sigma = Tensor::from_f64(&[1, 3], &[1.0, 0.2, 2.5]).unwrap();
    let mut acc = [0.0f64; 3];
    for _ in 0..n {
        let noise = rand_tensor(&mut rng, &[1, 3]);
        let z = reparameterize(&mu, &sigma, &noise).unwrap();
        for (a, v) in acc.iter_mut().zip(z.data()) {
            *a += v;
        }
    }
    for i in 0..3 {
        let mean = acc[i] / n as f64;
        let bound = 3.0 * sigma.data()[i] / (n as f64).sqrt();
        assert!((mean - mu.data()[i]).abs() < bound, "dim {i}: {mean}");
    }
}

/// Monte-Carlo estimate of KL(q || p) from reparameterized samples of q.
pub(crate) fn monte_carlo_kl(mq: f64, sq: f64, mp: f64, sp: f64, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let log_pdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let x = mq + sq * e;
        let d = log_pdf(x, mq, sq) - log_pdf(x, mp, sp);
        sum += d;
        sum_sq += d * d;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn kl_matches_monte_carlo_for_wide_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (est, se) = monte_carlo_kl(0.0, 2.0, 0.0, 1.0, 1_000_000, &mut rng);
    assert!((est - 0.80685).abs() < 3.0 * se + 1e-5, "{est} ± {se}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative(
        mq in -3.0f64..3.0, mp in -3.0f64..3.0,
        sq in 0.05f64..4.0, sp in 0.05f64..4.0,
    ) {
        let t = |v: f64| Tensor::<f64>::from_f64(&[1, 1], &[v]).unwrap();
        let kl = gaussian_kl(&t(mq), &t(sq), &t(mp), &t(sp)).unwrap();
        prop_assert!(kl >= -1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
        let n = values.len();
        let t = Tensor::from_f64(&[1, n], &values).unwrap();
        let s: f64 = row_softmax(&t).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}

