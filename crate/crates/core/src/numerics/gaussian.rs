use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Closed-form KL(q || p) between diagonal Gaussians.
///
/// Inputs are `[slots, dim]`; the divergence is summed over `dim` and
/// averaged over `slots`.
pub fn gaussian_kl<R: Real>(
    mu_q: &Tensor<R>,
    sigma_q: &Tensor<R>,
    mu_p: &Tensor<R>,
    sigma_p: &Tensor<R>,
) -> Result<R> {
    for t in [sigma_q, mu_p, sigma_p] {
        if t.shape() != mu_q.shape() {
            return shape_err("gaussian_kl", mu_q.shape(), t.shape());
        }
    }
    if let Some(bad) = sigma_q
        .data()
        .iter()
        .chain(sigma_p.data())
        .find(|s| !(**s > R::zero()))
    {
        return Err(Error::Domain(format!("sigma must be positive, got {bad:?}")));
    }
    let half = R::lit(0.5);
    let mut total = R::zero();
    for i in 0..mu_q.len() {
        let (mq, sq, mp, sp) = (
            mu_q.data()[i],
            sigma_q.data()[i],
            mu_p.data()[i],
            sigma_p.data()[i],
        );
        let diff = mq - mp;
        total = total + (sp / sq).ln() + (sq * sq + diff * diff) / (R::lit(2.0) * sp * sp) - half;
    }
    Ok(total / R::lit(mu_q.rows().max(1) as f64))
}

/// `mu + sigma * noise` with caller-supplied standard-normal `noise`.
pub fn reparameterize<R: Real>(mu: &Tensor<R>, sigma: &Tensor<R>, noise: &Tensor<R>) -> Result<Tensor<R>> {
    if sigma.shape() != mu.shape() || noise.shape() != mu.shape() {
        return shape_err("reparameterize", mu.shape(), noise.shape());
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(noise.data())
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    Tensor::new(mu.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, v.len()], v).unwrap()
    }

    #[test]
    fn self_divergence_is_zero() {
        let kl = gaussian_kl(&t(&[0.3, -1.0]), &t(&[0.5, 2.0]), &t(&[0.3, -1.0]), &t(&[0.5, 2.0])).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn unit_mean_shift() {
        let kl = gaussian_kl(&t(&[1.0]), &t(&[1.0]), &t(&[0.0]), &t(&[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wider_posterior() {
        // ln(1/2) + 4/2 - 1/2
        let kl = gaussian_kl(&t(&[0.0]), &t(&[2.0]), &t(&[0.0]), &t(&[1.0])).unwrap();
        assert!((kl - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let err = gaussian_kl(&t(&[0.0]), &t(&[0.0]), &t(&[0.0]), &t(&[1.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn reparameterize_degenerate_cases() {
        let mu = t(&[0.5, -2.0]);
        let out = reparameterize(&mu, &t(&[1.0, 3.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(out, mu);
        let out = reparameterize(&mu, &t(&[0.0, 0.0]), &t(&[1.7, -0.3])).unwrap();
        assert_eq!(out, mu);
        assert!(reparameterize(&mu, &t(&[1.0]), &t(&[0.0])).is_err());
    }
}
