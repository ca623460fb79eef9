use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::{AttnSpec, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients with central differences.
///
/// Returns the largest relative error over every coordinate of every
/// parameter, using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, point: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    let analytic = {
        let mut g = Graph::new(point);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        let mut store = point.clone();
        store.zero_grad();
        g.backward(out)?.accumulate_into(&mut store)?;
        store
    };
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for p in 0..point.len() {
        for c in 0..point.value(p).len() {
            let x0 = point.value(p).data()[c];
            probe.value_mut(p).data_mut()[c] = x0 + eps;
            let fp = eval(&probe)?;
            probe.value_mut(p).data_mut()[c] = x0 - eps;
            let fm = eval(&probe)?;
            probe.value_mut(p).data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let exact = analytic.grad_at(p).data()[c];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Step used when checking single operations.
pub const OP_GRAD_CHECK_EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches data")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.3..2.0)).collect()).expect("shape matches data")
}

/// Grad-checks `sum(w * op(inputs))` for a random weighting `w`.
fn check_op<F>(wseed: u64, inputs: Vec<Tensor<f64>>, op: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.insert(format!("x{i}"), t)?;
    }
    let inputs = |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> { (0..g.store().len()).map(|i| g.param(&format!("x{i}"))).collect() };
    let shape = {
        let mut g = Graph::new(&store);
        let vars = inputs(&mut g)?;
        let out = op(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(wseed), &shape);
    grad_check(
        |g| {
            let vars = inputs(g)?;
            let out = op(g, &vars)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            Ok(g.sum(prod))
        },
        &store,
        OP_GRAD_CHECK_EPS,
    )
}

/// Worst relative gradient error of every operation in [`super::op_set`]
/// over `trials` random shapes and inputs.
pub fn op_grad_errors(seed: u64, trials: usize) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..trials {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let r = &mut rng;
        let cases: Vec<(&'static str, f64)> = vec![
            ("matmul", check_op(r.random(), vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])], |g, v| g.matmul(v[0], v[1]))?),
            ("add", check_op(r.random(), vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])], |g, v| g.add(v[0], v[1]))?),
            ("add_row", check_op(r.random(), vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])], |g, v| g.add_row(v[0], v[1]))?),
            ("mul", check_op(r.random(), vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])], |g, v| g.mul(v[0], v[1]))?),
            ("scale", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.scale(v[0], -1.7)))?),
            ("offset", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.offset(v[0], 0.3)))?),
            ("scalar_mul", check_op(r.random(), vec![rand_tensor(r, &[1]), rand_tensor(r, &[m, n])], |g, v| g.scalar_mul(v[0], v[1]))?),
            ("tanh", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.tanh(v[0])))?),
            ("softplus", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.softplus(v[0])))?),
            // Two-column rows normalize to +-1 regardless of input, leaving an
            // input gradient so small that central differences are all roundoff.
            ("layer_norm", check_op(r.random(), vec![rand_tensor(r, &[m, n + 2]), rand_tensor(r, &[n + 2]), rand_tensor(r, &[n + 2])], |g, v| g.layer_norm(v[0], v[1], v[2]))?),
            ("embedding", {
                let idx: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..k)).collect();
                check_op(r.random(), vec![rand_tensor(r, &[k, n])], move |g, v| g.embedding(v[0], &idx))?
            }),
            ("attention", {
                let (b, h) = (r.random_range(1..3), r.random_range(1..3));
                let d = h * r.random_range(1..3);
                let mask: Vec<bool> = (0..m * k).map(|_| r.random_bool(0.7)).collect();
                let spec = AttnSpec::full(b, m, k, h).with_mask(mask);
                check_op(
                    r.random(),
                    vec![rand_tensor(r, &[b * m, d]), rand_tensor(r, &[b * k, d]), rand_tensor(r, &[b * k, d])],
                    move |g, v| g.attention(v[0], v[1], v[2], spec.clone()),
                )?
            }),
            ("softmax", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.softmax(v[0])))?),
            ("log_softmax", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.log_softmax(v[0])))?),
            ("cross_entropy", {
                let t: Vec<usize> = (0..m).map(|_| r.random_range(0..n + 1)).collect();
                check_op(r.random(), vec![rand_tensor(r, &[m, n + 1])], move |g, v| g.cross_entropy(v[0], &t))?
            }),
            ("sum", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.sum(v[0])))?),
            ("mean", check_op(r.random(), vec![rand_tensor(r, &[m, n])], |g, v| Ok(g.mean(v[0])))?),
            ("gather_rows", {
                let idx: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..m)).collect();
                check_op(r.random(), vec![rand_tensor(r, &[m, n])], move |g, v| g.gather_rows(v[0], &idx))?
            }),
            ("concat_rows", check_op(r.random(), vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[k, n])], |g, v| g.concat_rows(&[v[0], v[1]]))?),
            ("reshape", check_op(r.random(), vec![rand_tensor(r, &[m, n])], move |g, v| g.reshape(v[0], &[m * n]))?),
            ("gaussian_kl", check_op(
                r.random(),
                vec![rand_tensor(r, &[m, n]), positive(r, &[m, n]), rand_tensor(r, &[m, n]), positive(r, &[m, n])],
                |g, v| g.gaussian_kl(v[0], v[1], v[2], v[3]),
            )?),
        ];
        for (name, err) in cases {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(entry) => entry.1 = entry.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    Ok(worst)
}
