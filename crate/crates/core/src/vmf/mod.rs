//! von Mises-Fisher distributions on the unit sphere `S^{n-1}`.
//!
//! Density `f(z; mu, kappa) = C_n(kappa) exp(kappa mu^T z)` with
//! `C_n(kappa) = kappa^{n/2-1} / ((2 pi)^{n/2} I_{n/2-1}(kappa))`.
//! The concentration is always a fixed hyperparameter, which keeps Wood's
//! rejection sampler exactly reparameterizable: the accepted scalar `w` and
//! the tangent direction never depend on `mu`, only the final Householder
//! reflection does.

mod bessel;

pub use bessel::{log_bessel_i, MAX_ARG, MAX_ORDER};

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::autodiff::{reflection_axis, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// Tolerance on `|mu| = 1` when constructing a distribution.
pub const MEAN_NORM_TOL: f64 = 1e-10;
/// Inputs to `log_prob` further than this from the sphere are re-normalized.
pub const POINT_NORM_TOL: f64 = 1e-8;
/// Bound on rejection-loop iterations; exceeding it means a numerics bug.
pub const MAX_REJECTIONS: usize = 1000;

/// `log C_n(kappa)`.
pub fn log_normalizer(n: usize, kappa: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain(format!("vMF dimension must be >= 2, got {n}")));
    }
    check_kappa(kappa)?;
    let v = n as f64 / 2.0 - 1.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    let log_kappa_term = if v == 0.0 { 0.0 } else { v * kappa.ln() };
    Ok(log_kappa_term - n as f64 / 2.0 * two_pi.ln() - log_bessel_i(v, kappa)?)
}

/// Mean resultant length `A_n(kappa) = I_{n/2}(kappa) / I_{n/2-1}(kappa)`,
/// i.e. `E[mu^T z]`.
pub fn mean_resultant_length(n: usize, kappa: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain(format!("vMF dimension must be >= 2, got {n}")));
    }
    check_kappa(kappa)?;
    let v = n as f64 / 2.0;
    Ok((log_bessel_i(v, kappa)? - log_bessel_i(v - 1.0, kappa)?).exp())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("concentration must be positive and finite, got {kappa}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VonMisesFisher {
    mean: Vec<f64>,
    kappa: f64,
}

impl VonMisesFisher {
    /// `mean` must be unit length within [`MEAN_NORM_TOL`].
    pub fn new(mean: Vec<f64>, kappa: f64) -> Result<Self> {
        if mean.len() < 2 {
            return Err(Error::domain("vMF dimension must be >= 2"));
        }
        check_kappa(kappa)?;
        let r = norm(&mean);
        if !((r - 1.0).abs() <= MEAN_NORM_TOL) {
            return Err(Error::domain(format!("mean direction has norm {r}")));
        }
        Ok(Self { mean, kappa })
    }

    /// Normalizes `direction` first.
    pub fn from_direction(direction: &[f64], kappa: f64) -> Result<Self> {
        let r = norm(direction);
        if !(r > crate::autodiff::MIN_ROW_NORM) || !r.is_finite() {
            return Err(Error::Numeric(format!("direction norm {r:e}")));
        }
        Self::new(direction.iter().map(|v| v / r).collect(), kappa)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_normalizer(&self) -> Result<f64> {
        log_normalizer(self.dim(), self.kappa)
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::shape("vmf log_prob", format!("{} vs {}", z.len(), self.dim())));
        }
        let r = norm(z);
        let dot_mz = if (r - 1.0).abs() > POINT_NORM_TOL {
            if !(r > crate::autodiff::MIN_ROW_NORM) || !r.is_finite() {
                return Err(Error::Numeric(format!("log_prob point has norm {r:e}")));
            }
            log::warn!("vmf log_prob: re-normalizing point with norm {r}");
            dot(&self.mean, z) / r
        } else {
            dot(&self.mean, z)
        };
        Ok(self.log_normalizer()? + self.kappa * dot_mz)
    }

    /// Expected value `E[z] = A_n(kappa) mu`.
    pub fn mean_vector(&self) -> Result<Vec<f64>> {
        let a = mean_resultant_length(self.dim(), self.kappa)?;
        Ok(self.mean.iter().map(|m| a * m).collect())
    }

    /// Draws a point on the sphere.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let base = sample_pole(self.dim(), self.kappa, rng)?;
        Ok(reflect_to(&self.mean, &base))
    }
}

/// `KL[p || q]` in closed form.
///
/// `(kappa_p mu_p - kappa_q mu_q)^T E_p[z] + log C(kappa_p) - log C(kappa_q)`,
/// regrouped as `kappa_q A_p (1 - mu_p^T mu_q)` plus the divergence between
/// co-directional distributions, both of which are non-negative.
pub fn kl(p: &VonMisesFisher, q: &VonMisesFisher) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape("vmf kl", format!("{} vs {}", p.dim(), q.dim())));
    }
    if p == q {
        return Ok(0.0);
    }
    let n = p.dim();
    let a_p = mean_resultant_length(n, p.kappa)?;
    let half_sq_dist: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 2.0;
    let directional = q.kappa * a_p * half_sq_dist;
    let radial = if p.kappa == q.kappa {
        0.0
    } else {
        (a_p * (p.kappa - q.kappa) + log_normalizer(n, p.kappa)? - log_normalizer(n, q.kappa)?)
            .max(0.0)
    };
    Ok(directional + radial)
}

/// Scalar component `w = mu^T z` from Wood's rejection sampler, returned
/// together with `1 - w` computed without cancellation.
pub fn sample_w<R: Rng + ?Sized>(n: usize, kappa: f64, rng: &mut R) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::domain("vMF dimension must be >= 2"));
    }
    check_kappa(kappa)?;
    let m1 = (n - 1) as f64;
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let one_minus_x0_sq = 4.0 * b / ((1.0 + b) * (1.0 + b));
    let c = kappa * x0 + m1 * one_minus_x0_sq.ln();
    let beta = Beta::new(m1 / 2.0, m1 / 2.0).map_err(|e| Error::Numeric(e.to_string()))?;
    for _ in 0..MAX_REJECTIONS {
        let e: f64 = beta.sample(rng);
        let denom = 1.0 - (1.0 - b) * e;
        let w = (1.0 - (1.0 + b) * e) / denom;
        let one_minus_w = 2.0 * b * e / denom;
        // 1 - x0 w = (1 - x0) + x0 (1 - w)
        let one_minus_x0w = 2.0 * b / (1.0 + b) + x0 * one_minus_w;
        let u: f64 = rng.gen::<f64>();
        if kappa * w + m1 * one_minus_x0w.ln() - c >= u.ln() {
            return Ok((w, one_minus_w));
        }
    }
    Err(Error::Numeric(format!(
        "vMF rejection sampler exceeded {MAX_REJECTIONS} iterations (n={n}, kappa={kappa})"
    )))
}

/// Sample around the north pole `e_1`: `[w, sqrt(1 - w^2) v]` with `v`
/// uniform on the tangent sphere.
pub fn sample_pole<R: Rng + ?Sized>(n: usize, kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    let (w, one_minus_w) = sample_w(n, kappa, rng)?;
    let radial = (one_minus_w * (1.0 + w)).max(0.0).sqrt();
    let mut tangent: Vec<f64> = loop {
        let t: Vec<f64> = (1..n).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&t) > 1e-12 {
            break t;
        }
    };
    let r = norm(&tangent);
    tangent.iter_mut().for_each(|t| *t *= radial / r);
    let mut out = Vec::with_capacity(n);
    out.push(w);
    out.extend(tangent);
    Ok(out)
}

/// Householder reflection taking `e_1` to `mu`, applied to `x`.
pub fn reflect_to(mu: &[f64], x: &[f64]) -> Vec<f64> {
    match reflection_axis(mu) {
        None => x.to_vec(),
        Some((a, s)) => {
            let c = dot(&a, x);
            x.iter().zip(&a).map(|(xv, av)| xv - 2.0 * av * c / s).collect()
        }
    }
}

/// How the latent `z` is obtained from an encoder distribution.
pub enum Draw<'a> {
    /// `z` is the mean direction itself (the infinite-concentration limit).
    Deterministic,
    /// One reparameterized sample per row.
    Sample(&'a mut dyn rand::RngCore),
}

/// Row-wise `log C_n(kappa) + kappa mu_i^T z_i` on the graph, shape `[B]`.
pub fn log_prob_rows(g: &mut Graph, mu: Var, z: Var, kappa: f64) -> Result<Var> {
    let n = g.value(mu).cols();
    let d = g.dot_rows(mu, z)?;
    let s = g.scale(d, kappa)?;
    g.add_scalar(s, log_normalizer(n, kappa)?)
}

/// Reparameterized draw `z ~ vMF(mu_i, kappa)` for every row of `mu`.
///
/// The pole samples enter the graph as constants; the gradient reaches `mu`
/// only through the Householder reflection.
pub fn sample_rows(g: &mut Graph, mu: Var, kappa: f64, draw: &mut Draw<'_>) -> Result<Var> {
    match draw {
        Draw::Deterministic => Ok(mu),
        Draw::Sample(rng) => {
            let (b, n) = (g.value(mu).rows(), g.value(mu).cols());
            let mut base = Vec::with_capacity(b * n);
            for _ in 0..b {
                base.extend(sample_pole(n, kappa, &mut **rng)?);
            }
            let base = g.constant(Tensor::from_parts(vec![b, n], base));
            g.householder_apply(mu, base)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = norm(&v);
        v.into_iter().map(|x| x / r).collect()
    }

    #[test]
    fn normalizer_three_dim_closed_form() {
        let want = (1.0 / (2.0 * std::f64::consts::PI * (1f64.exp() - (-1f64).exp()))).ln();
        assert!((log_normalizer(3, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want + 2.6924636085404864).abs() < 1e-12);
    }

    #[test]
    fn normalizer_circle_uniform_limit() {
        let want = -(2.0 * std::f64::consts::PI).ln();
        assert!((log_normalizer(2, 1e-10).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn normalizer_high_dim() {
        // 40-digit oracle: (n/2-1) log k - n/2 log 2pi - log I_31(1024)
        let want = -863.0824561339113527;
        let got = log_normalizer(64, 1024.0).unwrap();
        assert!(((got - want) / want).abs() < 1e-8);
        for n in [2usize, 8, 64, 256, 512] {
            for kappa in [1e-3, 1.0, 1024.0, 16384.0] {
                assert!(log_normalizer(n, kappa).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn normalizer_decreasing_in_kappa() {
        for n in [2usize, 3, 8, 32, 128] {
            let mut prev = f64::INFINITY;
            let mut k = 0.01;
            while k < 20000.0 {
                let cur = log_normalizer(n, k).unwrap();
                assert!(cur < prev, "n={n} k={k}");
                prev = cur;
                k *= 1.5;
            }
        }
    }

    #[test]
    fn log_prob_examples() {
        let d = VonMisesFisher::new(vec![0.0, 0.0, 1.0], 1.0).unwrap();
        let at_mean = d.log_prob(&[0.0, 0.0, 1.0]).unwrap();
        assert!((at_mean - (-2.6924636085404864 + 1.0)).abs() < 1e-12);
        let perp = d.log_prob(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(perp, d.log_normalizer().unwrap());
    }

    #[test]
    fn log_prob_renormalizes_drifted_points() {
        let d = VonMisesFisher::new(vec![1.0, 0.0], 2.0).unwrap();
        let a = d.log_prob(&[1.0, 0.0]).unwrap();
        let b = d.log_prob(&[1.001, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(d.log_prob(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn density_integrates_on_circle() {
        let d = VonMisesFisher::new(vec![0.6, 0.8], 3.0).unwrap();
        let m = 10_000;
        let h = 2.0 * std::f64::consts::PI / m as f64;
        let total: f64 = (0..m)
            .map(|i| {
                let t = i as f64 * h;
                d.log_prob(&[t.cos(), t.sin()]).unwrap().exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn construction_validates() {
        assert!(VonMisesFisher::new(vec![1.0, 1e-4], 1.0).is_err());
        assert!(VonMisesFisher::new(vec![1.0, 0.0], 0.0).is_err());
        assert!(VonMisesFisher::new(vec![1.0], 1.0).is_err());
        assert!(VonMisesFisher::from_direction(&[3.0, 4.0], 1.0).is_ok());
    }

    #[test]
    fn kl_identity_and_equal_kappa_symmetry() {
        let mut rng = stream(1, &[]);
        let mu_p = random_unit(8, &mut rng);
        let mu_q = random_unit(8, &mut rng);
        let p = VonMisesFisher::new(mu_p.clone(), 7.0).unwrap();
        let q = VonMisesFisher::new(mu_q.clone(), 7.0).unwrap();
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let a = mean_resultant_length(8, 7.0).unwrap();
        let want = 7.0 * a * (1.0 - dot(&mu_p, &mu_q));
        let f = kl(&p, &q).unwrap();
        assert!((f - want).abs() < 1e-12);
        assert!((f - kl(&q, &p).unwrap()).abs() < 1e-12);
        assert!(kl(&p, &VonMisesFisher::new(vec![1.0, 0.0], 1.0).unwrap()).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = stream(2, &[]);
        let p = VonMisesFisher::new(random_unit(8, &mut rng), 32.0).unwrap();
        let q = VonMisesFisher::new(random_unit(8, &mut rng), 10.0).unwrap();
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = p.sample(&mut rng).unwrap();
            let d = p.log_prob(&z).unwrap() - q.log_prob(&z).unwrap();
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = kl(&p, &q).unwrap();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn sampler_mean_resultant_length() {
        // Empirical E[mu^T z] against I_4(10)/I_3(10).
        let want = 0.6975113672330642873;
        assert!((mean_resultant_length(8, 10.0).unwrap() - want).abs() < 1e-12);
        let mut rng = stream(3, &[]);
        let d = VonMisesFisher::new(random_unit(8, &mut rng), 10.0).unwrap();
        let n = 100_000;
        let m: f64 = (0..n)
            .map(|_| dot(d.mean(), &d.sample(&mut rng).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!((m - want).abs() < 0.005, "{m}");
    }

    #[test]
    fn huge_concentration_stays_near_mean() {
        let mut rng = stream(4, &[]);
        let d = VonMisesFisher::new(random_unit(8, &mut rng), 1e6).unwrap();
        let far = (0..10_000)
            .filter(|_| {
                let z = d.sample(&mut rng).unwrap();
                let c = dot(d.mean(), &z).clamp(-1.0, 1.0);
                c.acos() > 0.01
            })
            .count();
        assert!(far < 10, "{far}");
    }

    #[test]
    fn north_pole_sample_is_raw_draw() {
        let d = VonMisesFisher::new(vec![1.0, 0.0, 0.0, 0.0], 5.0).unwrap();
        let z = d.sample(&mut stream(5, &[])).unwrap();
        let (w, _) = sample_w(4, 5.0, &mut stream(5, &[])).unwrap();
        assert_eq!(z[0], w);
    }

    #[test]
    fn circle_histogram_matches_density() {
        let d = VonMisesFisher::new(vec![0.0, 1.0], 2.5).unwrap();
        let mut rng = stream(6, &[]);
        let (n, bins) = (100_000usize, 64usize);
        let mut counts = vec![0usize; bins];
        let two_pi = 2.0 * std::f64::consts::PI;
        for _ in 0..n {
            let z = d.sample(&mut rng).unwrap();
            let t = z[1].atan2(z[0]).rem_euclid(two_pi);
            counts[((t / two_pi * bins as f64) as usize).min(bins - 1)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            // bin probability by fine trapezoid integration
            let (a, b) = (i as f64 * two_pi / bins as f64, (i + 1) as f64 * two_pi / bins as f64);
            let m = 200;
            let p: f64 = (0..m)
                .map(|k| {
                    let t = a + (k as f64 + 0.5) * (b - a) / m as f64;
                    d.log_prob(&[t.cos(), t.sin()]).unwrap().exp() * (b - a) / m as f64
                })
                .sum();
            let expect = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - expect).abs() <= 3.0 * sd + 1.0, "bin {i}: {c} vs {expect}");
        }
    }

    #[test]
    fn log_prob_gradient_in_mean_and_point() {
        let mut rng = stream(7, &[]);
        let mu = Tensor::from_rows(&[random_unit(8, &mut rng)]).unwrap();
        let z = Tensor::from_rows(&[random_unit(8, &mut rng)]).unwrap();
        let err = grad_check_many(
            |g, v| {
                let m = g.l2_normalize(v[0])?;
                let zz = g.l2_normalize(v[1])?;
                let lp = log_prob_rows(g, m, zz, 3.0)?;
                g.sum(lp)
            },
            &[mu, z],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pathwise_gradient_matches_finite_differences_of_mc_objective() {
        // d/d(mu_raw) of mean_z [log e(z|x) - log b(z|y)] with common random
        // numbers; the graph gradient and central differences must agree.
        let mut rng = stream(8, &[]);
        let mu_e = Tensor::from_rows(&[random_unit(5, &mut rng)]).unwrap();
        let mu_b = Tensor::from_rows(&[random_unit(5, &mut rng)]).unwrap();
        let samples = 10_000usize;
        let err = grad_check_many(
            |g, v| {
                let e = g.l2_normalize(v[0])?;
                let b = g.l2_normalize(v[1])?;
                let mut rows_e = Vec::new();
                let mut rows_b = Vec::new();
                for _ in 0..samples {
                    rows_e.push(e);
                    rows_b.push(b);
                }
                let ee = g.concat(&rows_e, 0)?;
                let bb = g.concat(&rows_b, 0)?;
                let mut r = stream(9, &[]);
                let z = sample_rows(g, ee, 20.0, &mut Draw::Sample(&mut r))?;
                let le = log_prob_rows(g, ee, z, 20.0)?;
                let lb = log_prob_rows(g, bb, z, 4.0)?;
                let d = g.sub(le, lb)?;
                g.mean(d)
            },
            &[mu_e, mu_b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kl_non_negative(seed in any::<u64>(), ni in 0usize..3, lk_p in -2.3f64..9.7, lk_q in -2.3f64..9.7) {
            let n = [2usize, 8, 64][ni];
            let mut rng = stream(seed, &[]);
            let p = VonMisesFisher::new(random_unit(n, &mut rng), lk_p.exp()).unwrap();
            let q = VonMisesFisher::new(random_unit(n, &mut rng), lk_q.exp()).unwrap();
            let v = kl(&p, &q).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
        }

        #[test]
        fn samples_are_unit(seed in any::<u64>(), n in 2usize..40, lk in -2.0f64..9.7) {
            let mut rng = stream(seed, &[]);
            let d = VonMisesFisher::new(random_unit(n, &mut rng), lk.exp()).unwrap();
            let z = d.sample(&mut rng).unwrap();
            prop_assert!((norm(&z) - 1.0).abs() < 1e-10);
        }
    }
}
