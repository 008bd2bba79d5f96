//! Directional derivatives of network heads and of single DDIM steps,
//! matrix-free tangent-space estimation, and contraction measurements.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::error::{check_len, Error, Result};
use crate::model::{Model, NoisePredictor};
use crate::nn::{Head, ScoreNetwork};
use crate::real::{cast_vec, lit, norm_inf, to_f64, Real};
use crate::rng::{normal_vec, stream, Rng, Stream};
use crate::schedule::NoiseSchedule;

/// Exact directional derivative of a model head along `v`.
///
/// The analytic backend exposes only the noise head, whose derivative is
/// `-sqrt(1 - abar_t) H v`.
pub fn jvp<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    head: Head,
    x: &[S],
    t: usize,
    v: &[S],
) -> Result<Vec<S>> {
    schedule.check_t(t)?;
    match model {
        Model::Learned(net) => net.jvp(x, t, head, v),
        Model::Analytic(g) => match head {
            Head::Eps => {
                let c = lit::<S>(-(1.0 - schedule.alpha_bar_f64(t)).sqrt());
                Ok(g.hessian_vp(schedule, x, t, v)?.into_iter().map(|h| c * h).collect())
            }
            _ => Err(Error::Unsupported(
                "the analytic backend has no bottleneck or feature heads".into(),
            )),
        },
    }
}

/// Hessian of `log p_t` applied to `v`.
pub fn hessian_logp_vp<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t: usize,
    v: &[S],
) -> Result<Vec<S>> {
    schedule.check_t(t)?;
    match model {
        Model::Analytic(g) => g.hessian_vp(schedule, x, t, v),
        Model::Learned(net) => {
            let s = (1.0 - schedule.alpha_bar_f64(t)).sqrt();
            if s == 0.0 {
                return Err(Error::Singularity(format!("1 - alpha_bar({t}) = 0")));
            }
            let c = lit::<S>(-1.0 / s);
            Ok(net.jvp(x, t, Head::Eps, v)?.into_iter().map(|e| c * e).collect())
        }
    }
}

/// Coefficients of the linearised step derivative `A v + B H v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DfInvCoefficients {
    pub a: f64,
    pub b: f64,
}

impl DfInvCoefficients {
    pub fn new<S: Real>(schedule: &NoiseSchedule<S>, t_src: usize, t_dst: usize) -> Result<Self> {
        let (a, c) = schedule.ddim_coefficients_f64(t_src, t_dst)?;
        let s = (1.0 - schedule.alpha_bar_f64(t_src)).sqrt();
        Ok(Self { a, b: -s * c })
    }
}

/// How the derivative of one DDIM step is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMethod {
    /// Derivative of the full composed step.
    ExactStep,
    /// `A v + B H v` with the Hessian from [`hessian_logp_vp`].
    Linearized,
}

/// Central-difference step `1e-3 |x|_inf / |v|_inf`.
pub fn fd_epsilon<S: Real>(x: &[S], v: &[S]) -> f64 {
    let xi = to_f64(norm_inf(x));
    let vi = to_f64(norm_inf(v));
    1e-3 * if xi > 0.0 { xi } else { 1.0 } / vi
}

/// Central-difference derivative of `x -> ddim_step(x, t_src, t_dst, eps(x, t_src))`.
pub fn fd_step_jvp<S: Real, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t_src: usize,
    t_dst: usize,
    v: &[S],
) -> Result<Vec<S>> {
    check_len(x.len(), v.len())?;
    if v.iter().all(|&e| e == S::zero()) {
        schedule.ddim_coefficients_f64(t_src, t_dst)?;
        return Ok(vec![S::zero(); v.len()]);
    }
    let h = fd_epsilon(x, v);
    let hs = lit::<S>(h);
    let step = |sign: S| -> Result<Vec<S>> {
        let xs: Vec<S> = x.iter().zip(v).map(|(&a, &b)| a + sign * hs * b).collect();
        let eps = model.predict_noise(schedule, &xs, t_src)?;
        schedule.ddim_step(&xs, t_src, t_dst, &eps)
    };
    let (p, m) = (step(S::one())?, step(-S::one())?);
    let inv = lit::<S>(0.5 / h);
    Ok(p.iter().zip(&m).map(|(&a, &b)| (a - b) * inv).collect())
}

/// Derivative of one DDIM step along `v`.
///
/// `ExactStep` differentiates learned networks exactly and the analytic
/// backend by central differences, so the latter stays independent of the
/// Hessian route used by `Linearized`.
pub fn dfinv_jvp<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t_src: usize,
    t_dst: usize,
    v: &[S],
    method: StepMethod,
) -> Result<Vec<S>> {
    check_len(x.len(), v.len())?;
    match method {
        StepMethod::ExactStep => match model {
            Model::Learned(net) => {
                let (a, c) = schedule.ddim_coefficients(t_src, t_dst)?;
                let je = net.jvp(x, t_src, Head::Eps, v)?;
                Ok(v.iter().zip(&je).map(|(&vi, &ji)| a * vi + c * ji).collect())
            }
            Model::Analytic(_) => fd_step_jvp(model, schedule, x, t_src, t_dst, v),
        },
        StepMethod::Linearized => {
            let co = DfInvCoefficients::new(schedule, t_src, t_dst)?;
            let hv = hessian_logp_vp(model, schedule, x, t_src, v)?;
            let (a, b) = (lit::<S>(co.a), lit::<S>(co.b));
            Ok(v.iter().zip(&hv).map(|(&vi, &hi)| a * vi + b * hi).collect())
        }
    }
}

/// A linear map available only through products with vectors.
pub trait JacobianOperator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// `J v` for each `v`.
    fn apply(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    /// `J^T u` for each `u`.
    fn apply_adjoint(&self, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Jacobian of one network head at a fixed state.
pub struct HeadJacobian<'a, S> {
    pub net: &'a ScoreNetwork<S>,
    pub x: &'a [S],
    pub t: usize,
    pub head: Head,
}

impl<S: Real> JacobianOperator for HeadJacobian<'_, S> {
    fn input_dim(&self) -> usize {
        self.net.ambient_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.head_dim(self.head)
    }

    fn apply(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let vs: Vec<Vec<S>> = vs.iter().map(|v| cast_vec(v)).collect();
        let out = self.net.jvp_many(self.x, self.t, self.head, &vs)?;
        Ok(out.iter().map(|o| cast_vec(o)).collect())
    }

    fn apply_adjoint(&self, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let us: Vec<Vec<S>> = us.iter().map(|u| cast_vec(u)).collect();
        let out = self.net.vjp_many(self.x, self.t, self.head, &us)?;
        Ok(out.iter().map(|o| cast_vec(o)).collect())
    }
}

/// Dense row-major matrix as an operator.
#[derive(Debug, Clone)]
pub struct MatrixOperator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl JacobianOperator for MatrixOperator {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn output_dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .map(|v| {
                check_len(self.cols, v.len())?;
                Ok(self.data.chunks_exact(self.cols).map(|r| crate::real::dot(r, v)).collect())
            })
            .collect()
    }

    fn apply_adjoint(&self, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        us.iter()
            .map(|u| {
                check_len(self.rows, u.len())?;
                let mut out = vec![0.0; self.cols];
                for (r, &ui) in self.data.chunks_exact(self.cols).zip(u) {
                    crate::real::axpy(ui, r, &mut out);
                }
                Ok(out)
            })
            .collect()
    }
}

/// Leading right singular vectors and singular values of a head Jacobian.
#[derive(Debug, Clone)]
pub struct TangentBasis<S> {
    pub vectors: Vec<Vec<S>>,
    pub sigmas: Vec<f64>,
    pub t: usize,
    /// Rounds actually performed.
    pub rounds: usize,
}

impl<S> TangentBasis<S> {
    pub fn k(&self) -> usize {
        self.vectors.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SubspaceOptions {
    pub k: usize,
    pub iters: usize,
    /// Stop once every singular value moves less than this, relatively, and
    /// every vector turns by less than this angle.
    pub tol: f64,
    pub seed: u64,
}

impl SubspaceOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            iters: 30,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// Result of [`subspace_iteration`]: orthonormal vectors, descending
/// singular values, and the number of rounds run.
pub type Subspace = (Vec<Vec<f64>>, Vec<f64>, usize);

/// Modified Gram-Schmidt with one re-orthogonalisation pass; columns that
/// collapse are replaced with random directions.
fn orthonormalize(vs: &mut [Vec<f64>], rng: &mut Rng) {
    let scale = vs.iter().map(|v| crate::real::norm(v)).fold(0.0, f64::max);
    for i in 0..vs.len() {
        let mut attempts = 0;
        loop {
            for _ in 0..2 {
                for j in 0..i {
                    let (done, cur) = vs.split_at_mut(i);
                    let d = crate::real::dot(&done[j], &cur[0]);
                    crate::real::axpy(-d, &done[j], &mut cur[0]);
                }
            }
            let n = crate::real::norm(&vs[i]);
            if n > 1e-10 * scale.max(1e-300) && n > 0.0 {
                vs[i].iter_mut().for_each(|e| *e /= n);
                break;
            }
            attempts += 1;
            assert!(attempts < 100, "cannot complete an orthonormal set");
            let d = vs[i].len();
            vs[i] = normal_vec(rng, d);
        }
    }
}

/// Block power iteration on `J^T J` with a Rayleigh-Ritz rotation each round.
pub fn subspace_iteration<J: JacobianOperator + ?Sized>(op: &J, opts: SubspaceOptions) -> Result<Subspace> {
    let (n, m) = (op.input_dim(), op.output_dim());
    let k = opts.k;
    if k == 0 || k > n || k > m {
        return Err(Error::param(format!(
            "K = {k} must lie in [1, min({n}, {m})]"
        )));
    }
    let mut rng = stream(opts.seed, Stream::Experiment);
    let mut v: Vec<Vec<f64>> = (0..k).map(|_| normal_vec(&mut rng, n)).collect();
    orthonormalize(&mut v, &mut rng);
    let mut jv = op.apply(&v)?;
    let mut sig: Vec<f64> = jv.iter().map(|y| crate::real::norm(y)).collect();
    let mut rounds = 0;
    for r in 0..opts.iters.max(1) {
        rounds = r + 1;
        let mut q = op.apply_adjoint(&jv)?;
        orthonormalize(&mut q, &mut rng);
        let b = op.apply(&q)?;
        let gram = DMatrix::from_fn(k, k, |i, j| crate::real::dot(&b[i], &b[j]));
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let rotate = |src: &[Vec<f64>], len: usize| -> Vec<Vec<f64>> {
            order
                .iter()
                .map(|&c| {
                    let mut out = vec![0.0; len];
                    for (i, s) in src.iter().enumerate() {
                        crate::real::axpy(eig.eigenvectors[(i, c)], s, &mut out);
                    }
                    out
                })
                .collect()
        };
        let new_v = rotate(&q, n);
        jv = rotate(&b, m);
        let new_sig: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c].max(0.0).sqrt()).collect();
        let settled = new_v
            .iter()
            .zip(&v)
            .all(|(a, b)| 1.0 - crate::real::dot(a, b).abs() <= 0.5 * opts.tol * opts.tol);
        let converged = r > 0
            && settled
            && new_sig
                .iter()
                .zip(&sig)
                .all(|(a, b)| (a - b).abs() <= opts.tol * b.max(f64::MIN_POSITIVE));
        v = new_v;
        sig = new_sig;
        if converged {
            break;
        }
    }
    for vec in &mut v {
        let big = vec.iter().copied().fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if big < 0.0 {
            vec.iter_mut().for_each(|e| *e = -*e);
        }
    }
    Ok((v, sig, rounds))
}

/// Top-`k` right singular vectors of the bottleneck Jacobian at `(x, t)`.
pub fn tangent_basis<S: Real>(
    net: &ScoreNetwork<S>,
    x: &[S],
    t: usize,
    k: usize,
    iters: usize,
) -> Result<TangentBasis<S>> {
    check_len(net.ambient_dim(), x.len())?;
    let op = HeadJacobian {
        net,
        x,
        t,
        head: Head::Bottleneck,
    };
    let opts = SubspaceOptions {
        iters,
        ..SubspaceOptions::new(k)
    };
    let (v, sigmas, rounds) = subspace_iteration(&op, opts)?;
    Ok(TangentBasis {
        vectors: v.iter().map(|e| cast_vec(e)).collect(),
        sigmas,
        t,
        rounds,
    })
}

/// Orthogonal projection of `v` onto the span of `basis.vectors`.
pub fn project<S: Real>(v: &[S], basis: &TangentBasis<S>) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); v.len()];
    for b in &basis.vectors {
        check_len(v.len(), b.len())?;
        crate::real::axpy(crate::real::dot(v, b), b, &mut out);
    }
    Ok(out)
}

/// Default subspace size per ambient dimension.
pub fn default_k(ambient_dim: usize) -> usize {
    if ambient_dim <= 2 {
        2
    } else {
        8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretchRow {
    pub sample_id: usize,
    pub t: usize,
    pub forward_ratio: f64,
    pub reverse_ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StretchTable {
    pub rows: Vec<StretchRow>,
}

impl StretchTable {
    pub fn forward(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.forward_ratio).collect()
    }

    pub fn reverse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.reverse_ratio).collect()
    }

    /// Fraction of rows contracting forward (ratio in (0, 1)) and expanding in reverse.
    pub fn fraction_contracting(&self) -> f64 {
        let n = self
            .rows
            .iter()
            .filter(|r| r.forward_ratio > 0.0 && r.forward_ratio < 1.0 && r.reverse_ratio > 1.0)
            .count();
        n as f64 / self.rows.len().max(1) as f64
    }

    /// Linear-interpolated quantiles of the forward ratios.
    pub fn forward_quantiles(&self, qs: &[f64]) -> Vec<f64> {
        quantiles(&self.forward(), qs)
    }

    pub fn reverse_quantiles(&self, qs: &[f64]) -> Vec<f64> {
        quantiles(&self.reverse(), qs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,t,forward_ratio,reverse_ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.sample_id, r.t, r.forward_ratio, r.reverse_ratio));
        }
        s
    }
}

pub fn quantiles(xs: &[f64], qs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    qs.iter()
        .map(|&q| {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct StretchOptions {
    /// Inclusive timestep range for the destination of the forward step.
    pub t_lo: usize,
    pub t_hi: usize,
    /// Random grid positions per sample; `None` uses every position in range.
    pub per_sample: Option<usize>,
    pub power_iters: usize,
    pub seed: u64,
}

/// Top eigenvector of `H + lambda I`, i.e. the direction of largest
/// (least negative) log-density curvature.
fn flattest_direction<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<Vec<S>> {
    match model {
        Model::Analytic(g) => {
            let shift = g.noised(schedule.alpha_bar_f64(t))?.max_precision();
            let mut v: Vec<S> = normal_vec(rng, x.len());
            let n = crate::real::norm(&v);
            v.iter_mut().for_each(|e| *e /= n);
            for _ in 0..iters {
                let hv = g.hessian_vp(schedule, x, t, &v)?;
                let mut w: Vec<S> = hv.iter().zip(&v).map(|(&h, &vi)| h + shift * vi).collect();
                let n = crate::real::norm(&w);
                if n == S::zero() {
                    break;
                }
                w.iter_mut().for_each(|e| *e /= n);
                v = w;
            }
            Ok(v)
        }
        Model::Learned(net) => {
            let basis = tangent_basis(net, x, t, 1, 30)?;
            Ok(basis.vectors[0].clone())
        }
    }
}

/// Stretch of one forward (inversion) step along an estimated tangent
/// direction, and of the matching reverse step along the pushed-forward
/// direction.
pub fn stretch_stats<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    samples: &[Vec<S>],
    opts: StretchOptions,
) -> Result<StretchTable> {
    if samples.is_empty() {
        return Err(Error::param("stretch statistics need at least one sample"));
    }
    let positions: Vec<usize> = (1..schedule.grid().len())
        .filter(|&p| (opts.t_lo..=opts.t_hi).contains(&schedule.grid()[p]))
        .collect();
    if positions.is_empty() {
        return Err(Error::param("no grid steps inside the requested range"));
    }
    let mut rng = stream(opts.seed, Stream::Experiment);
    let mut rows = Vec::new();
    for (id, x0) in samples.iter().enumerate() {
        let chosen: Vec<usize> = match opts.per_sample {
            None => positions.clone(),
            Some(c) => (0..c).map(|_| positions[rng.gen_range(0..positions.len())]).collect(),
        };
        for p in chosen {
            let (t_prev, t) = (schedule.grid()[p - 1], schedule.grid()[p]);
            let eps = normal_vec(&mut rng, x0.len());
            let x_prev = schedule.forward_noise(x0, t_prev, &eps)?;
            let v = flattest_direction(model, schedule, &x_prev, t_prev, opts.power_iters, &mut rng)?;
            let w = fd_step_jvp(model, schedule, &x_prev, t_prev, t, &v)?;
            let e = model.predict_noise(schedule, &x_prev, t_prev)?;
            let x_t = schedule.ddim_step(&x_prev, t_prev, t, &e)?;
            let back = fd_step_jvp(model, schedule, &x_t, t, t_prev, &w)?;
            let (nv, nw) = (to_f64(crate::real::norm(&v)), to_f64(crate::real::norm(&w)));
            rows.push(StretchRow {
                sample_id: id,
                t,
                forward_ratio: nw / nv,
                reverse_ratio: to_f64(crate::real::norm(&back)) / nw,
            });
        }
    }
    Ok(StretchTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmSpec;
    use crate::nn::NetMode;
    use crate::schedule::make_schedule;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule<f64> {
        make_schedule(1000, 1e-4, 0.02, 50).unwrap()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / crate::real::norm(b).max(1e-300)
    }

    fn learned(mode: NetMode) -> Model<f64> {
        Model::Learned(ScoreNetwork::init(mode, 11))
    }

    fn tri_gmm() -> Model<f64> {
        Model::Analytic(
            GmmSpec::new(
                vec![0.2, 0.5, 0.3],
                vec![vec![1.0, 0.5], vec![-1.0, 0.0], vec![0.3, -1.2]],
                vec![vec![0.2, 0.05, 0.05, 0.1], vec![0.1, 0.0, 0.0, 0.3], vec![0.15, -0.04, -0.04, 0.12]],
            )
            .unwrap(),
        )
    }

    #[test]
    fn jvp_zero_and_linear() {
        let s = sched();
        let m = learned(NetMode::Point2d);
        let x = [0.4, -0.3];
        assert_eq!(jvp(&m, &s, Head::Bottleneck, &x, 300, &[0.0, 0.0]).unwrap(), vec![0.0; 64]);
        let a = jvp(&m, &s, Head::Eps, &x, 300, &[0.2, 0.7]).unwrap();
        let b = jvp(&m, &s, Head::Eps, &x, 300, &[0.4, 1.4]).unwrap();
        assert!(rel(&b, &crate::real::scale(2.0, &a)) < 1e-12);
    }

    #[test]
    fn analytic_bottleneck_is_unsupported() {
        let r = jvp(&tri_gmm(), &sched(), Head::Bottleneck, &[0.0, 0.0], 100, &[1.0, 0.0]);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn analytic_eps_jvp_matches_difference_quotient() {
        let s = sched();
        let m = tri_gmm();
        let (x, v) = ([0.2, 0.1], [0.6, -0.8]);
        let exact = jvp(&m, &s, Head::Eps, &x, 400, &v).unwrap();
        let h = 1e-5;
        let p = m.predict_noise(&s, &[x[0] + h * v[0], x[1] + h * v[1]], 400).unwrap();
        let q = m.predict_noise(&s, &[x[0] - h * v[0], x[1] - h * v[1]], 400).unwrap();
        let fd: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(rel(&exact, &fd) < 1e-6);
    }

    #[test]
    fn hessian_of_single_gaussian() {
        let s = sched();
        let g = GmmSpec::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![2.0, 0.5, 0.5, 1.0]]).unwrap();
        let m = Model::Analytic(g);
        let t = 0;
        let ab = s.alpha_bar_f64(t);
        // Noised covariance ab * S + (1 - ab) I, inverted by hand.
        let (a, b, d) = (ab * 2.0 + 1.0 - ab, ab * 0.5, ab * 1.0 + 1.0 - ab);
        let det = a * d - b * b;
        let v = [1.0, -2.0];
        let expect = [-(d * v[0] - b * v[1]) / det, -(-b * v[0] + a * v[1]) / det];
        let got = hessian_logp_vp(&m, &s, &[0.3, 0.3], t, &v).unwrap();
        assert!(rel(&got, &expect) < 1e-12);
    }

    #[test]
    fn learned_hessian_is_scaled_eps_jvp() {
        let s = sched();
        let m = learned(NetMode::Point2d);
        let (x, v) = ([0.5, 0.5], [1.0, 0.0]);
        let h = hessian_logp_vp(&m, &s, &x, 500, &v).unwrap();
        let e = jvp(&m, &s, Head::Eps, &x, 500, &v).unwrap();
        let c = -1.0 / (1.0 - s.alpha_bar_f64(500)).sqrt();
        assert!(rel(&h, &crate::real::scale(c, &e)) < 1e-14);
    }

    #[test]
    fn coefficients_expand_on_reverse_steps() {
        let s = sched();
        for w in s.grid().windows(2) {
            let co = DfInvCoefficients::new(&s, w[1], w[0]).unwrap();
            assert!(co.a > 1.0);
        }
        assert!(DfInvCoefficients::new(&s, 40, 0).is_err());
    }

    #[test]
    fn zero_model_step_derivative_is_drift() {
        let s = sched();
        let m = Model::Learned(ScoreNetwork::<f64>::zeros(NetMode::Point2d));
        let v = [0.3, -0.4];
        let got = dfinv_jvp(&m, &s, &[1.0, 1.0], 500, 480, &v, StepMethod::ExactStep).unwrap();
        let a = (s.alpha_bar_f64(480) / s.alpha_bar_f64(500)).sqrt();
        assert!(rel(&got, &[a * v[0], a * v[1]]) < 1e-14);
        let zero = dfinv_jvp(&m, &s, &[1.0, 1.0], 500, 480, &[0.0, 0.0], StepMethod::Linearized).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_and_linearized_agree_on_mixture() {
        let s = sched();
        let m = tri_gmm();
        for w in s.grid().windows(2).skip(3).step_by(5) {
            let x = [0.4, -0.2];
            let v = [0.8, 0.6];
            let e = dfinv_jvp(&m, &s, &x, w[1], w[0], &v, StepMethod::ExactStep).unwrap();
            let l = dfinv_jvp(&m, &s, &x, w[1], w[0], &v, StepMethod::Linearized).unwrap();
            assert!(rel(&l, &e) < 1e-3, "t={}", w[1]);
        }
    }

    #[test]
    fn learned_exact_step_matches_difference_quotient() {
        let s = sched();
        let m = learned(NetMode::Point2d);
        let (x, v) = ([0.7, -0.1], [0.1, 0.9]);
        let e = dfinv_jvp(&m, &s, &x, 599, 579, &v, StepMethod::ExactStep).unwrap();
        let fd = fd_step_jvp(&m, &s, &x, 599, 579, &v).unwrap();
        assert!(rel(&e, &fd) < 1e-6);
        assert!(dfinv_jvp(&m, &s, &x, 599, 559, &v, StepMethod::ExactStep).is_err());
    }

    #[test]
    fn subspace_iteration_on_diagonal_map() {
        let op = MatrixOperator {
            rows: 2,
            cols: 2,
            data: vec![3.0, 0.0, 0.0, 1.0],
        };
        let (v, s, _) = subspace_iteration(&op, SubspaceOptions::new(1)).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-4);
        assert!((v[0][0] - 1.0).abs() < 1e-4 && v[0][1].abs() < 1e-4);
        assert!(subspace_iteration(&op, SubspaceOptions::new(3)).is_err());
        assert!(subspace_iteration(&op, SubspaceOptions::new(0)).is_err());
    }

    #[test]
    fn subspace_iteration_matches_svd_of_point_jacobian() {
        let net = ScoreNetwork::<f64>::init(NetMode::Point2d, 4);
        let x = [0.3, -0.8];
        let basis = tangent_basis(&net, &x, 250, 2, 30).unwrap();
        let cols: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                let mut e = vec![0.0; 2];
                e[i] = 1.0;
                net.jvp(&x, 250, Head::Bottleneck, &e).unwrap()
            })
            .collect();
        let j = DMatrix::from_fn(64, 2, |r, c| cols[c][r]);
        let svd = j.svd(false, true);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in basis.sigmas.iter().zip(&sv) {
            assert!((a - b).abs() < 1e-3 * b);
        }
        let top = crate::real::dot(&basis.vectors[0], &basis.vectors[0]);
        assert!((top - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_jacobian_still_yields_orthonormal_basis() {
        let net = ScoreNetwork::<f64>::zeros(NetMode::Image16);
        let x = vec![0.1; 256];
        let b = tangent_basis(&net, &x, 100, 4, 5).unwrap();
        assert!(b.sigmas.iter().all(|&s| s == 0.0));
        for i in 0..4 {
            for j in 0..4 {
                let d = crate::real::dot(&b.vectors[i], &b.vectors[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_cases() {
        let basis = TangentBasis {
            vectors: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]],
            sigmas: vec![2.0, 1.0],
            t: 0,
            rounds: 1,
        };
        let inside = [2.0, 0.6, 0.8];
        assert!(rel(&project(&inside, &basis).unwrap(), &inside) < 1e-12);
        let perp = [0.0, 0.8, -0.6];
        assert!(crate::real::norm(&project(&perp, &basis).unwrap()) < 1e-12);
        let mixed: Vec<f64> = inside.iter().zip(&perp).map(|(a, b)| a + b).collect();
        assert!(rel(&project(&mixed, &basis).unwrap(), &inside) < 1e-12);
    }

    #[test]
    fn zero_model_stretch_is_isotropic() {
        let s = sched();
        let m = Model::Learned(ScoreNetwork::<f64>::zeros(NetMode::Point2d));
        let opts = StretchOptions {
            t_lo: 100,
            t_hi: 900,
            per_sample: Some(3),
            power_iters: 10,
            seed: 1,
        };
        let table = stretch_stats(&m, &s, &[vec![1.0, 0.5], vec![-0.3, 0.2]], opts).unwrap();
        assert_eq!(table.rows.len(), 6);
        for r in &table.rows {
            let p = s.position_of(r.t).unwrap();
            let want = (s.alpha_bar_f64(r.t) / s.alpha_bar_f64(s.grid()[p - 1])).sqrt();
            assert!((r.forward_ratio - want).abs() < 1e-9);
            assert!((r.forward_ratio * r.reverse_ratio - 1.0).abs() < 1e-9);
        }
        assert!(table.to_csv().starts_with("sample_id,t,forward_ratio,reverse_ratio\n"));
        assert!(stretch_stats(&m, &s, &[], opts).is_err());
    }

    #[test]
    fn quantile_interpolation() {
        assert_eq!(quantiles(&[3.0, 1.0, 2.0], &[0.0, 0.5, 1.0, 0.25]), vec![1.0, 2.0, 3.0, 1.5]);
    }

    proptest! {
        #[test]
        fn jvp_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..50) {
            let s = sched();
            let m = learned(NetMode::Point2d);
            let mut rng = stream(seed, Stream::Experiment);
            let x: Vec<f64> = normal_vec(&mut rng, 2);
            let u: Vec<f64> = normal_vec(&mut rng, 2);
            let w: Vec<f64> = normal_vec(&mut rng, 2);
            let comb: Vec<f64> = u.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
            let lhs = jvp(&m, &s, Head::Bottleneck, &x, 333, &comb).unwrap();
            let ju = jvp(&m, &s, Head::Bottleneck, &x, 333, &u).unwrap();
            let jw = jvp(&m, &s, Head::Bottleneck, &x, 333, &w).unwrap();
            let rhs: Vec<f64> = ju.iter().zip(&jw).map(|(p, q)| a * p + b * q).collect();
            let scale = crate::real::norm(&ju) * a.abs() + crate::real::norm(&jw) * b.abs() + 1e-12;
            let d: f64 = lhs.iter().zip(&rhs).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= 1e-5 * scale);
        }

        #[test]
        fn adjoint_consistency(seed in 0u64..30) {
            let net = ScoreNetwork::<f64>::init(NetMode::Point2d, 2);
            let mut rng = stream(seed, Stream::Experiment);
            let x: Vec<f64> = normal_vec(&mut rng, 2);
            let v: Vec<f64> = normal_vec(&mut rng, 2);
            let u: Vec<f64> = normal_vec(&mut rng, 64);
            let jv = net.jvp(&x, 70, Head::Bottleneck, &v).unwrap();
            let ju = net.vjp(&x, 70, Head::Bottleneck, &u).unwrap();
            let (l, r) = (crate::real::dot(&jv, &u), crate::real::dot(&v, &ju));
            prop_assert!((l - r).abs() <= 1e-4 * l.abs().max(r.abs()).max(1e-12));
        }

        #[test]
        fn projection_is_idempotent(seed in 0u64..30) {
            let net = ScoreNetwork::<f64>::init(NetMode::Point2d, 5);
            let mut rng = stream(seed, Stream::Experiment);
            let x: Vec<f64> = normal_vec(&mut rng, 2);
            let basis = tangent_basis(&net, &x, 120, 1, 30).unwrap();
            let v: Vec<f64> = normal_vec(&mut rng, 2);
            let once = project(&v, &basis).unwrap();
            let twice = project(&once, &basis).unwrap();
            let d: f64 = once.iter().zip(&twice).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(d <= 1e-6);
        }
    }
}
