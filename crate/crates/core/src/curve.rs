//! Generation rates along deterministic trajectories and the curves, marginal
//! curves and fluctuation statistics built from them.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{check_len, Error, Result};
use crate::geometry::{
    dfinv_jvp, hessian_logp_vp, subspace_iteration, tangent_basis, JacobianOperator, StepMethod,
    SubspaceOptions, TangentBasis,
};
use crate::model::{digest_reals, fnv1a, Model, NoisePredictor};
use crate::nn::Head;
use crate::real::{cast_vec, to_f64, Real};
use crate::schedule::{NoiseSchedule, Sweep, Trajectory};

/// A variation direction in ambient space.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction<S> {
    /// Indicator of one pixel (flat row-major index) or one point coordinate.
    UnitPixel(usize),
    Raw(Vec<S>),
}

impl<S: Real> Direction<S> {
    pub fn pixel(row: usize, col: usize, width: usize) -> Self {
        Direction::UnitPixel(row * width + col)
    }

    pub fn realize(&self, dim: usize) -> Result<Vec<S>> {
        match self {
            Direction::UnitPixel(i) => {
                if *i >= dim {
                    return Err(Error::param(format!("pixel index {i} outside dimension {dim}")));
                }
                let mut v = vec![S::zero(); dim];
                v[*i] = S::one();
                Ok(v)
            }
            Direction::Raw(v) => {
                check_len(dim, v.len())?;
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurveMethod {
    DfinvProj,
    HessianProj,
    DhProj,
    DhRaw,
    StateDeriv,
}

impl CurveMethod {
    pub const RATES: [CurveMethod; 4] = [
        CurveMethod::DfinvProj,
        CurveMethod::HessianProj,
        CurveMethod::DhProj,
        CurveMethod::DhRaw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveMethod::DfinvProj => "dfinv_proj",
            CurveMethod::HessianProj => "hessian_proj",
            CurveMethod::DhProj => "dh_proj",
            CurveMethod::DhRaw => "dh_raw",
            CurveMethod::StateDeriv => "state_deriv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Self::DfinvProj, Self::HessianProj, Self::DhProj, Self::DhRaw, Self::StateDeriv]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown curve method `{s}`")))
    }

    fn needs_basis(self) -> bool {
        matches!(self, CurveMethod::DfinvProj | CurveMethod::HessianProj | CurveMethod::DhProj)
    }
}

/// One value per reverse transition, tagged with the transition's source timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCurve {
    pub method: CurveMethod,
    /// Source timestep of each reverse transition, increasing.
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl GenerationCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn value_at(&self, t: usize) -> Option<f64> {
        self.steps.iter().position(|&s| s == t).map(|i| self.values[i])
    }

    /// `step,t,value` with `step` the 1-based grid position.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,value\n");
        for (i, (t, v)) in self.steps.iter().zip(&self.values).enumerate() {
            s.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        s
    }
}

/// Pixels of a patch with a probability weight each.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSet {
    pixels: Vec<usize>,
    weights: Vec<f64>,
}

impl PixelSet {
    pub fn uniform(pixels: Vec<usize>) -> Result<Self> {
        let n = pixels.len();
        Self::weighted(pixels, vec![1.0; n])
    }

    /// Weights are rescaled to sum to one.
    pub fn weighted(pixels: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::param("pixel set is empty"));
        }
        check_len(pixels.len(), weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("pixel weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::param("pixel weights sum to zero"));
        }
        let mut seen = pixels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != pixels.len() {
            return Err(Error::param("pixel set contains duplicates"));
        }
        Ok(Self {
            pixels,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Uniform set over the `true` entries of a mask.
    pub fn from_mask(mask: &[bool]) -> Result<Self> {
        Self::uniform(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, p: usize) -> bool {
        self.pixels.contains(&p)
    }

    pub fn mask(&self, dim: usize) -> Vec<bool> {
        let mut m = vec![false; dim];
        for &p in &self.pixels {
            if p < dim {
                m[p] = true;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CurveOptions {
    /// Tangent basis size for the projected methods.
    pub k: usize,
    pub iters: usize,
}

impl CurveOptions {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            k: crate::geometry::default_k(dim),
            iters: 30,
        }
    }
}

/// `H + lambda I` for the analytic backend, with `lambda` the largest
/// component precision so the operator is positive semidefinite.
struct ShiftedHessian<'a, S> {
    gmm: &'a crate::gmm::GmmSpec<S>,
    schedule: &'a NoiseSchedule<S>,
    x: &'a [S],
    t: usize,
    shift: f64,
}

impl<S: Real> JacobianOperator for ShiftedHessian<'_, S> {
    fn input_dim(&self) -> usize {
        self.x.len()
    }

    fn output_dim(&self) -> usize {
        self.x.len()
    }

    fn apply(&self, vs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .map(|v| {
                let hv: Vec<f64> = cast_vec(&self.gmm.hessian_vp(self.schedule, self.x, self.t, &cast_vec(v))?);
                Ok(hv.iter().zip(v).map(|(h, vi)| h + self.shift * vi).collect())
            })
            .collect()
    }

    fn apply_adjoint(&self, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.apply(us)
    }
}

/// Tangent basis at `(x, t)`: bottleneck singular vectors for learned
/// models, leading eigenvectors of the shifted Hessian for the analytic one.
pub fn model_tangent_basis<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t: usize,
    opts: CurveOptions,
) -> Result<TangentBasis<S>> {
    match model {
        Model::Learned(net) => tangent_basis(net, x, t, opts.k, opts.iters),
        Model::Analytic(g) => {
            let shift = to_f64(g.noised(schedule.alpha_bar_f64(t))?.max_precision());
            let op = ShiftedHessian {
                gmm: g,
                schedule,
                x,
                t,
                shift,
            };
            let so = SubspaceOptions {
                iters: opts.iters,
                ..SubspaceOptions::new(opts.k.min(x.len()))
            };
            let (v, sigmas, rounds) = subspace_iteration(&op, so)?;
            Ok(TangentBasis {
                vectors: v.iter().map(|e| cast_vec(e)).collect(),
                sigmas,
                t,
                rounds,
            })
        }
    }
}

fn check_method<S: Real>(model: &Model<S>, method: CurveMethod) -> Result<()> {
    match method {
        CurveMethod::StateDeriv => Err(Error::Usage(
            "state-derivative curves come from state_curve, not from rates".into(),
        )),
        CurveMethod::DhProj | CurveMethod::DhRaw if model.is_analytic() => Err(Error::Unsupported(
            format!("{} needs a learned bottleneck", method.name()),
        )),
        _ => Ok(()),
    }
}

/// Rates of several directions at the reverse transition leaving grid
/// position `pos` (`1..=steps`).
fn rates_at<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    traj: &Trajectory<S>,
    pos: usize,
    vs: &[Vec<S>],
    method: CurveMethod,
    basis: Option<&TangentBasis<S>>,
) -> Result<Vec<f64>> {
    check_method(model, method)?;
    if pos == 0 || pos >= traj.states.len() {
        return Err(Error::param(format!("grid position {pos} is not a reverse transition")));
    }
    let x = traj.state_at(pos);
    let (t, t_dst) = (traj.grid[pos], traj.grid[pos - 1]);
    let projected: Vec<Vec<S>> = match (method.needs_basis(), basis) {
        (true, Some(b)) => vs.iter().map(|v| crate::geometry::project(v, b)).collect::<Result<_>>()?,
        (true, None) => return Err(Error::Usage("projected method needs a tangent basis".into())),
        (false, _) => vs.to_vec(),
    };
    let norms = |outs: Vec<Vec<S>>| outs.iter().map(|o| to_f64(crate::real::norm(o))).collect();
    match method {
        CurveMethod::DhRaw | CurveMethod::DhProj => {
            let net = model.as_learned().expect("checked");
            Ok(norms(net.jvp_many(x, t, Head::Bottleneck, &projected)?))
        }
        CurveMethod::HessianProj => Ok(norms(
            projected
                .iter()
                .map(|v| hessian_logp_vp(model, schedule, x, t, v))
                .collect::<Result<_>>()?,
        )),
        CurveMethod::DfinvProj => match model {
            Model::Learned(net) => {
                let (a, c) = schedule.ddim_coefficients(t, t_dst)?;
                let je = net.jvp_many(x, t, Head::Eps, &projected)?;
                Ok(norms(
                    projected
                        .iter()
                        .zip(je)
                        .map(|(v, j)| v.iter().zip(&j).map(|(&vi, &ji)| a * vi + c * ji).collect())
                        .collect(),
                ))
            }
            Model::Analytic(_) => Ok(norms(
                projected
                    .iter()
                    .map(|v| dfinv_jvp(model, schedule, x, t, t_dst, v, StepMethod::ExactStep))
                    .collect::<Result<_>>()?,
            )),
        },
        CurveMethod::StateDeriv => unreachable!("rejected by check_method"),
    }
}

/// Generation rate of `v` at the reverse transition leaving grid position `pos`.
pub fn rate<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    traj: &Trajectory<S>,
    pos: usize,
    v: &Direction<S>,
    method: CurveMethod,
    opts: CurveOptions,
) -> Result<f64> {
    check_method(model, method)?;
    let v = v.realize(model.dim())?;
    let basis = if method.needs_basis() {
        let t = *traj.grid.get(pos).ok_or_else(|| Error::param("grid position out of range"))?;
        Some(model_tangent_basis(model, schedule, traj.state_at(pos), t, opts)?)
    } else {
        None
    };
    Ok(rates_at(model, schedule, traj, pos, &[v], method, basis.as_ref())?[0])
}

struct CachedTrajectory<S> {
    traj: Trajectory<S>,
    bases: Vec<OnceLock<Arc<TangentBasis<S>>>>,
}

type CacheKey = (u64, u64, u64);

/// Curve computation for one model and schedule, with trajectories and
/// tangent bases cached per data point.
pub struct CurveEngine<'a, S> {
    model: &'a Model<S>,
    schedule: &'a NoiseSchedule<S>,
    opts: CurveOptions,
    model_digest: u64,
    grid_digest: u64,
    cache: RwLock<HashMap<CacheKey, Arc<CachedTrajectory<S>>>>,
    trajectory_runs: AtomicUsize,
}

impl<'a, S: Real> CurveEngine<'a, S> {
    pub fn new(model: &'a Model<S>, schedule: &'a NoiseSchedule<S>, opts: CurveOptions) -> Self {
        Self {
            model,
            schedule,
            opts,
            model_digest: model.digest(),
            grid_digest: fnv1a(schedule.grid().iter().flat_map(|g| (*g as u64).to_le_bytes())),
            cache: RwLock::new(HashMap::new()),
            trajectory_runs: AtomicUsize::new(0),
        }
    }

    pub fn model(&self) -> &Model<S> {
        self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule<S> {
        self.schedule
    }

    pub fn options(&self) -> CurveOptions {
        self.opts
    }

    /// Number of trajectories integrated so far (cache misses).
    pub fn trajectory_runs(&self) -> usize {
        self.trajectory_runs.load(Ordering::Relaxed)
    }

    fn entry(&self, x0: &[S]) -> Result<Arc<CachedTrajectory<S>>> {
        check_len(self.model.dim(), x0.len())?;
        let key = (digest_reals(x0), self.model_digest, self.grid_digest);
        if let Some(e) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let traj = self.schedule.run_trajectory(self.model, x0, Sweep::Invert)?;
        self.trajectory_runs.fetch_add(1, Ordering::Relaxed);
        let n = traj.states.len();
        let entry = Arc::new(CachedTrajectory {
            traj,
            bases: (0..n).map(|_| OnceLock::new()).collect(),
        });
        let mut w = self.cache.write().expect("cache lock");
        Ok(w.entry(key).or_insert(entry).clone())
    }

    /// The inversion trajectory of `x0` (cached).
    pub fn trajectory(&self, x0: &[S]) -> Result<Trajectory<S>> {
        Ok(self.entry(x0)?.traj.clone())
    }

    fn basis(&self, e: &CachedTrajectory<S>, pos: usize) -> Result<Arc<TangentBasis<S>>> {
        if let Some(b) = e.bases[pos].get() {
            return Ok(b.clone());
        }
        let b = Arc::new(model_tangent_basis(
            self.model,
            self.schedule,
            e.traj.state_at(pos),
            e.traj.grid[pos],
            self.opts,
        )?);
        Ok(e.bases[pos].get_or_init(|| b).clone())
    }

    /// Tangent basis at grid position `pos` of the trajectory of `x0`.
    pub fn tangent_basis(&self, x0: &[S], pos: usize) -> Result<Arc<TangentBasis<S>>> {
        let e = self.entry(x0)?;
        if pos >= e.bases.len() {
            return Err(Error::param("grid position out of range"));
        }
        self.basis(&e, pos)
    }

    /// Curves of several directions along the trajectory of `x0`.
    pub fn curves(&self, x0: &[S], dirs: &[Direction<S>], method: CurveMethod) -> Result<Vec<GenerationCurve>> {
        self.curves_on(&*self.entry(x0)?, dirs, method)
    }

    fn curves_on(&self, e: &CachedTrajectory<S>, dirs: &[Direction<S>], method: CurveMethod) -> Result<Vec<GenerationCurve>> {
        check_method(self.model, method)?;
        let d = self.model.dim();
        let vs: Vec<Vec<S>> = dirs.iter().map(|v| v.realize(d)).collect::<Result<_>>()?;
        let steps: Vec<usize> = e.traj.grid[1..].to_vec();
        let mut values = vec![Vec::with_capacity(steps.len()); vs.len()];
        for pos in 1..e.traj.states.len() {
            let basis = if method.needs_basis() {
                Some(self.basis(e, pos)?)
            } else {
                None
            };
            let r = rates_at(self.model, self.schedule, &e.traj, pos, &vs, method, basis.as_deref())?;
            for (row, v) in values.iter_mut().zip(r) {
                row.push(v);
            }
        }
        Ok(values
            .into_iter()
            .map(|values| GenerationCurve {
                method,
                steps: steps.clone(),
                values,
                normalized: false,
            })
            .collect())
    }

    pub fn curve(&self, x0: &[S], v: &Direction<S>, method: CurveMethod) -> Result<GenerationCurve> {
        Ok(self.curves(x0, std::slice::from_ref(v), method)?.remove(0))
    }

    /// Curves along an explicit trajectory (no caching).
    pub fn curves_along(&self, traj: &Trajectory<S>, dirs: &[Direction<S>], method: CurveMethod) -> Result<Vec<GenerationCurve>> {
        let e = CachedTrajectory {
            traj: traj.clone(),
            bases: (0..traj.states.len()).map(|_| OnceLock::new()).collect(),
        };
        self.curves_on(&e, dirs, method)
    }

    /// Weighted sum of the unit-pixel curves over `set`.
    pub fn marginalized_curve(&self, x0: &[S], set: &PixelSet, method: CurveMethod) -> Result<GenerationCurve> {
        let dirs: Vec<Direction<S>> = set.pixels().iter().map(|&p| Direction::UnitPixel(p)).collect();
        let curves = self.curves(x0, &dirs, method)?;
        Ok(combine(&curves, set.weights()))
    }

    /// Masked-distance state curve; see [`state_curve`].
    pub fn state_curve(&self, x0: &[S], set: &PixelSet) -> Result<GenerationCurve> {
        state_curve_on(self.model, self.schedule, &self.entry(x0)?.traj, set)
    }
}

/// Weighted combination of curves sharing a grid.
pub fn combine(curves: &[GenerationCurve], weights: &[f64]) -> GenerationCurve {
    let first = &curves[0];
    let mut values = vec![0.0; first.len()];
    for (c, &w) in curves.iter().zip(weights) {
        for (acc, v) in values.iter_mut().zip(&c.values) {
            *acc += w * v;
        }
    }
    GenerationCurve {
        method: first.method,
        steps: first.steps.clone(),
        values,
        normalized: false,
    }
}

/// One-off curve computation; repeated calls should share a [`CurveEngine`].
pub fn curve<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x0: &[S],
    v: &Direction<S>,
    method: CurveMethod,
    opts: CurveOptions,
) -> Result<GenerationCurve> {
    CurveEngine::new(model, schedule, opts).curve(x0, v, method)
}

pub fn marginalized_curve<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x0: &[S],
    set: &PixelSet,
    method: CurveMethod,
    opts: CurveOptions,
) -> Result<GenerationCurve> {
    CurveEngine::new(model, schedule, opts).marginalized_curve(x0, set, method)
}

/// Min-max rescaling to [0, 1].
pub fn normalize_curve(c: &GenerationCurve) -> Result<GenerationCurve> {
    let lo = c.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if c.values.is_empty() || !(hi > lo) {
        return Err(Error::numeric("cannot normalize a constant curve"));
    }
    Ok(GenerationCurve {
        values: c.values.iter().map(|v| (v - lo) / (hi - lo)).collect(),
        normalized: true,
        ..c.clone()
    })
}

/// Mean population variance over sliding windows of `window_k` consecutive
/// values, restricted to steps above `t_min`.
pub fn fluctuation(c: &GenerationCurve, window_k: usize, t_min: usize) -> Result<f64> {
    let vals: Vec<f64> = c
        .steps
        .iter()
        .zip(&c.values)
        .filter(|(&t, _)| t > t_min)
        .map(|(_, &v)| v)
        .collect();
    if window_k == 0 || vals.len() < window_k {
        return Err(Error::param(format!(
            "fluctuation needs {window_k} points above t = {t_min}, found {}",
            vals.len()
        )));
    }
    let k = window_k as f64;
    let vars: Vec<f64> = vals
        .windows(window_k)
        .map(|w| {
            let m = w.iter().sum::<f64>() / k;
            w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k
        })
        .collect();
    Ok(vars.iter().sum::<f64>() / vars.len() as f64)
}

fn state_curve_on<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    traj: &Trajectory<S>,
    set: &PixelSet,
) -> Result<GenerationCurve> {
    let x0 = traj.data();
    for &p in set.pixels() {
        if p >= x0.len() {
            return Err(Error::param(format!("pixel {p} out of range")));
        }
    }
    let dist = |xhat: &[S]| -> f64 {
        set.pixels()
            .iter()
            .map(|&p| to_f64(xhat[p] - x0[p]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut state = vec![0.0];
    for pos in 1..traj.states.len() {
        let (x, t) = (traj.state_at(pos), traj.grid[pos]);
        let eps = model.predict_noise(schedule, x, t)?;
        state.push(dist(&schedule.predict_x0(x, t, &eps)?));
    }
    Ok(GenerationCurve {
        method: CurveMethod::StateDeriv,
        steps: traj.grid[1..].to_vec(),
        values: state.windows(2).map(|w| w[1] - w[0]).collect(),
        normalized: false,
    })
}

/// Backward differences of the masked distance between the clean-data
/// prediction at each grid state and the data point. The state at timestep
/// 0 is the data point itself.
pub fn state_curve<S: Real>(
    model: &Model<S>,
    schedule: &NoiseSchedule<S>,
    x0: &[S],
    set: &PixelSet,
) -> Result<GenerationCurve> {
    let traj = schedule.run_trajectory(model, x0, Sweep::Invert)?;
    state_curve_on(model, schedule, &traj, set)
}

/// Rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// `sum |a - b|` over matching steps, and the total-variation distance
/// between the curves viewed as distributions over steps.
pub fn curve_distances(a: &GenerationCurve, b: &GenerationCurve) -> (f64, f64) {
    let l1: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    let (sa, sb): (f64, f64) = (a.values.iter().sum(), b.values.iter().sum());
    let tv = if sa > 0.0 && sb > 0.0 {
        0.5 * a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x / sa - y / sb).abs())
            .sum::<f64>()
    } else {
        f64::NAN
    };
    (l1, tv)
}
