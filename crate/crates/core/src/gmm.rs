//! Exact score and Hessian of a Gaussian mixture under the forward process.
//!
//! Noising a mixture `sum_k w_k N(mu_k, Sigma_k)` to level `abar` gives
//! `sum_k w_k N(sqrt(abar) mu_k, abar Sigma_k + (1 - abar) I)`, so every
//! quantity the learned networks approximate is available in closed form.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_len, Error, Result};
use crate::model::{digest_reals, NoisePredictor};
use crate::real::{lit, to_f64, Real};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec<S> {
    dim: usize,
    weights: Vec<S>,
    means: Vec<Vec<S>>,
    /// Row-major `dim x dim` covariance per component.
    covs: Vec<Vec<S>>,
}

/// The mixture after noising to one level `abar`.
#[derive(Debug, Clone)]
pub struct NoisedGmm<S> {
    dim: usize,
    means: Vec<Vec<S>>,
    precisions: Vec<Vec<S>>,
    log_norms: Vec<S>,
    max_precision: S,
}

/// Per-point quantities shared by the score, Hessian and density.
struct Posterior<S> {
    gammas: Vec<S>,
    /// `g_k = -P_k (x - m_k)`
    grads: Vec<Vec<S>>,
    log_density: S,
}

impl<S: Real> GmmSpec<S> {
    pub fn new(weights: Vec<S>, means: Vec<Vec<S>>, covs: Vec<Vec<S>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::param("mixture needs at least one component"));
        }
        if means.len() != k || covs.len() != k {
            return Err(Error::param("weights, means and covariances disagree in count"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::param("mixture dimension must be positive"));
        }
        let total: f64 = weights.iter().map(|&w| to_f64(w)).sum();
        if weights.iter().any(|&w| w < S::zero()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!(
                "weights must be nonnegative and sum to 1 (sum = {total})"
            )));
        }
        for (i, (m, c)) in means.iter().zip(&covs).enumerate() {
            check_len(dim, m.len())?;
            check_len(dim * dim, c.len())?;
            let mat = to_matrix(dim, c);
            if (&mat - mat.transpose()).amax() > 1e-9 * (1.0 + mat.amax()) {
                return Err(Error::param(format!("covariance {i} is not symmetric")));
            }
            if mat.cholesky().is_none() {
                return Err(Error::Factorization { component: i });
            }
        }
        Ok(Self {
            dim,
            weights,
            means,
            covs,
        })
    }

    /// Equal-weight isotropic components.
    pub fn isotropic(means: Vec<Vec<S>>, sigma: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, Vec::len);
        let mut cov = vec![S::zero(); dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = lit(sigma * sigma);
        }
        Self::new(vec![lit(1.0 / k as f64); k], means, vec![cov; k])
    }

    /// `n` equal-weight isotropic components evenly spaced on a circle.
    pub fn ring(n: usize, radius: f64, sigma: f64) -> Result<Self> {
        let means = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                vec![lit(radius * a.cos()), lit(radius * a.sin())]
            })
            .collect();
        Self::isotropic(means, sigma)
    }

    /// Eight components on a radius-2 octagon with standard deviation 0.1.
    pub fn octagon() -> Self {
        Self::ring(8, 2.0, 0.1).expect("valid octagon mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<S>] {
        &self.means
    }

    pub fn covs(&self) -> &[Vec<S>] {
        &self.covs
    }

    pub fn digest(&self) -> u64 {
        let mut flat = self.weights.clone();
        flat.extend(self.means.iter().flatten());
        flat.extend(self.covs.iter().flatten());
        digest_reals(&flat)
    }

    /// The mixture marginal at noise level `abar`.
    pub fn noised(&self, alpha_bar: f64) -> Result<NoisedGmm<S>> {
        let d = self.dim;
        let sa = alpha_bar.sqrt();
        let mut means = Vec::with_capacity(self.weights.len());
        let mut precisions = Vec::with_capacity(self.weights.len());
        let mut log_norms = Vec::with_capacity(self.weights.len());
        let mut max_precision = 0.0f64;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        for (k, (mu, cov)) in self.means.iter().zip(&self.covs).enumerate() {
            let mut s = to_matrix(d, cov) * alpha_bar;
            for i in 0..d {
                s[(i, i)] += 1.0 - alpha_bar;
            }
            let chol = s.clone().cholesky().ok_or(Error::Factorization { component: k })?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let inv = chol.inverse();
            let eig = SymmetricEigen::new(inv.clone());
            max_precision = max_precision.max(eig.eigenvalues.max());
            means.push(mu.iter().map(|&m| lit::<S>(sa * to_f64(m))).collect());
            // nalgebra is column-major; the precision is symmetric so the order is irrelevant.
            precisions.push(inv.iter().map(|&v| lit::<S>(v)).collect());
            let w = to_f64(self.weights[k]);
            let ln_w = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            log_norms.push(lit::<S>(ln_w - 0.5 * log_det - 0.5 * d as f64 * ln_2pi));
        }
        Ok(NoisedGmm {
            dim: d,
            means,
            precisions,
            log_norms,
            max_precision: lit(max_precision),
        })
    }

    fn at(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<NoisedGmm<S>> {
        schedule.check_t(t)?;
        check_len(self.dim, x.len())?;
        self.noised(schedule.alpha_bar_f64(t))
    }

    /// `grad_x log p_t(x)`
    pub fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<Vec<S>> {
        Ok(self.at(schedule, x, t)?.score(x))
    }

    /// `(grad_x^2 log p_t(x)) v`, without forming the Hessian.
    pub fn hessian_vp(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize, v: &[S]) -> Result<Vec<S>> {
        check_len(self.dim, v.len())?;
        Ok(self.at(schedule, x, t)?.hessian_vp(x, v))
    }

    pub fn log_density(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<S> {
        Ok(self.at(schedule, x, t)?.log_density(x))
    }
}

impl<S: Real> NoisePredictor<S> for GmmSpec<S> {
    fn dim(&self) -> usize {
        self.dim
    }

    /// `eps = -sqrt(1 - abar_t) * score`
    fn predict_noise(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<Vec<S>> {
        let c = lit::<S>(-(1.0 - schedule.alpha_bar_f64(t)).sqrt());
        Ok(self.score(schedule, x, t)?.into_iter().map(|s| c * s).collect())
    }
}

impl<S: Real> NoisedGmm<S> {
    fn posterior(&self, x: &[S]) -> Posterior<S> {
        let d = self.dim;
        let mut grads = Vec::with_capacity(self.means.len());
        let mut logits = Vec::with_capacity(self.means.len());
        for ((m, p), &ln) in self.means.iter().zip(&self.precisions).zip(&self.log_norms) {
            let diff: Vec<S> = x.iter().zip(m).map(|(&a, &b)| a - b).collect();
            let g: Vec<S> = (0..d)
                .map(|i| -(0..d).map(|j| p[i * d + j] * diff[j]).sum::<S>())
                .collect();
            // -(1/2) diff^T P diff = (1/2) diff . g
            let quad: S = diff.iter().zip(&g).map(|(&a, &b)| a * b).sum();
            logits.push(ln + lit::<S>(0.5) * quad);
            grads.push(g);
        }
        let top = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut gammas: Vec<S> = logits.iter().map(|&l| (l - top).exp()).collect();
        let total: S = gammas.iter().copied().sum();
        gammas.iter_mut().for_each(|g| *g /= total);
        Posterior {
            gammas,
            grads,
            log_density: top + total.ln(),
        }
    }

    pub fn log_density(&self, x: &[S]) -> S {
        self.posterior(x).log_density
    }

    pub fn score(&self, x: &[S]) -> Vec<S> {
        let post = self.posterior(x);
        let mut s = vec![S::zero(); self.dim];
        for (&gam, g) in post.gammas.iter().zip(&post.grads) {
            crate::real::axpy(gam, g, &mut s);
        }
        s
    }

    /// `[sum_k gamma_k (g_k g_k^T - P_k) - s s^T] v`
    pub fn hessian_vp(&self, x: &[S], v: &[S]) -> Vec<S> {
        let d = self.dim;
        let post = self.posterior(x);
        let mut s = vec![S::zero(); d];
        let mut out = vec![S::zero(); d];
        for ((&gam, g), p) in post.gammas.iter().zip(&post.grads).zip(&self.precisions) {
            crate::real::axpy(gam, g, &mut s);
            let gv = crate::real::dot(g, v);
            for i in 0..d {
                let pv: S = (0..d).map(|j| p[i * d + j] * v[j]).sum();
                out[i] += gam * (g[i] * gv - pv);
            }
        }
        let sv = crate::real::dot(&s, v);
        for i in 0..d {
            out[i] -= s[i] * sv;
        }
        out
    }

    /// Upper bound on the largest component precision eigenvalue; the Hessian
    /// is bounded below by its negative.
    pub fn max_precision(&self) -> S {
        self.max_precision
    }
}

fn to_matrix<S: Real>(d: usize, row_major: &[S]) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| to_f64(row_major[i * d + j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use rand::{Rng as _, SeedableRng};

    fn sched() -> NoiseSchedule<f64> {
        make_schedule(1000, 1e-4, 0.02, 50).unwrap()
    }

    fn random_spec(seed: u64) -> GmmSpec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut covs = Vec::new();
        let mut means = Vec::new();
        for _ in 0..3 {
            means.push(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let (a, b, c): (f64, f64, f64) =
                (rng.gen_range(0.1..0.8), rng.gen_range(-0.3..0.3), rng.gen_range(0.1..0.8));
            // L L^T with L lower-triangular keeps it positive definite.
            covs.push(vec![a * a, a * b, a * b, b * b + c * c]);
        }
        GmmSpec::new(vec![0.2, 0.5, 0.3], means, covs).unwrap()
    }

    #[test]
    fn rejects_bad_specs() {
        let m = vec![vec![0.0, 0.0]];
        assert!(GmmSpec::new(vec![0.9], m.clone(), vec![vec![1.0, 0.0, 0.0, 1.0]]).is_err());
        assert!(matches!(
            GmmSpec::new(vec![1.0], m.clone(), vec![vec![1.0, 2.0, 2.0, 1.0]]),
            Err(Error::Factorization { component: 0 })
        ));
        assert!(GmmSpec::new(vec![1.0], m, vec![vec![1.0, 0.5, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn unit_gaussian_score() {
        let s = sched();
        let mu = vec![1.5, -0.5];
        let g = GmmSpec::new(vec![1.0], vec![mu.clone()], vec![vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let x = [0.3, 0.9];
        let t = 400;
        let sa = s.alpha_bar(t).sqrt();
        let sc = g.score(&s, &x, t).unwrap();
        for i in 0..2 {
            assert!((sc[i] + (x[i] - sa * mu[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_mixture_midpoint_has_zero_score() {
        let s = sched();
        let g = GmmSpec::isotropic(vec![vec![-1.0, 0.0], vec![1.0, 0.0]], 0.3).unwrap();
        let sc = g.score(&s, &[0.0, 0.0], 100).unwrap();
        assert!(sc.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let s = sched();
        for seed in 0..5 {
            let g = random_spec(seed);
            for &t in &[0usize, 100, 400, 900] {
                let x = [0.37, -0.81];
                let sc = g.score(&s, &x, t).unwrap();
                for i in 0..2 {
                    let h = 1e-5;
                    let mut xp = x;
                    let mut xm = x;
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (g.log_density(&s, &xp, t).unwrap() - g.log_density(&s, &xm, t).unwrap())
                        / (2.0 * h);
                    let rel = (fd - sc[i]).abs() / sc[i].abs().max(1e-3);
                    assert!(rel <= 1e-5, "seed {seed} t {t} i {i}: {fd} vs {}", sc[i]);
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_difference_of_score() {
        let s = sched();
        for seed in 0..5 {
            let g = random_spec(seed + 10);
            let x = [0.2, 0.4];
            let v = [0.6, -0.8];
            for &t in &[20usize, 300, 700] {
                let hv = g.hessian_vp(&s, &x, t, &v).unwrap();
                let h = 1e-5;
                let xp = [x[0] + h * v[0], x[1] + h * v[1]];
                let xm = [x[0] - h * v[0], x[1] - h * v[1]];
                let (sp, sm) = (g.score(&s, &xp, t).unwrap(), g.score(&s, &xm, t).unwrap());
                let fd: Vec<f64> = (0..2).map(|i| (sp[i] - sm[i]) / (2.0 * h)).collect();
                let err = ((fd[0] - hv[0]).powi(2) + (fd[1] - hv[1]).powi(2)).sqrt();
                let scale = (hv[0].powi(2) + hv[1].powi(2)).sqrt();
                assert!(err <= 1e-4 * scale, "seed {seed} t {t}: {fd:?} vs {hv:?}");
            }
        }
    }

    #[test]
    fn single_gaussian_hessian_is_negative_precision() {
        let s = sched();
        let cov = vec![0.5, 0.1, 0.1, 0.3];
        let g = GmmSpec::new(vec![1.0], vec![vec![0.0, 1.0]], vec![cov.clone()]).unwrap();
        let t = 250;
        let a = s.alpha_bar(t);
        let m = DMatrix::from_row_slice(2, 2, &cov) * a + DMatrix::identity(2, 2) * (1.0 - a);
        let p = m.try_inverse().unwrap();
        let v = [1.0, 2.0];
        let hv = g.hessian_vp(&s, &[3.0, -1.0], t, &v).unwrap();
        for i in 0..2 {
            let expected = -(p[(i, 0)] * v[0] + p[(i, 1)] * v[1]);
            assert!((hv[i] - expected).abs() < 1e-12);
        }
        assert_eq!(g.hessian_vp(&s, &[3.0, -1.0], t, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn score_tends_to_standard_normal_at_last_step() {
        let s = sched();
        let g = random_spec(3);
        let x = [1.2, -0.7];
        let sc = g.score(&s, &x, 999).unwrap();
        let err = ((sc[0] + x[0]).powi(2) + (sc[1] + x[1]).powi(2)).sqrt();
        assert!(err <= 1e-2 * (x[0] * x[0] + x[1] * x[1]).sqrt());
    }

    #[test]
    fn hessian_is_symmetric() {
        let s = sched();
        let g = random_spec(7);
        let x = [0.1, 0.3];
        let (u, v) = ([0.3, -1.1], [0.7, 0.2]);
        let hu = g.hessian_vp(&s, &x, 120, &u).unwrap();
        let hv = g.hessian_vp(&s, &x, 120, &v).unwrap();
        let a = u[0] * hv[0] + u[1] * hv[1];
        let b = v[0] * hu[0] + v[1] * hu[1];
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
    }
}
