//! Variance-preserving noise schedule and the deterministic DDIM transition.

use crate::error::{check_len, Error, Result};
use crate::model::NoisePredictor;
use crate::real::{lit, Real};

/// Discrete variance-preserving schedule with its DDIM sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    betas: Vec<S>,
    alpha_bars: Vec<S>,
    // Coefficients are formed in double precision and rounded once.
    alpha_bars_f64: Vec<f64>,
    grid: Vec<usize>,
}

/// Which way a trajectory is integrated along the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// From the largest grid timestep down to timestep 0.
    Generate,
    /// From the data point at timestep 0 up to the largest grid timestep.
    Invert,
}

/// States of one deterministic path, ordered by increasing timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub grid: Vec<usize>,
    pub states: Vec<Vec<S>>,
}

impl<S: Real> Trajectory<S> {
    pub fn state_at(&self, pos: usize) -> &[S] {
        &self.states[pos]
    }

    pub fn data(&self) -> &[S] {
        &self.states[0]
    }

    pub fn endpoint(&self) -> &[S] {
        self.states.last().expect("non-empty trajectory")
    }
}

/// `T` timesteps with betas spaced linearly over `[beta_start, beta_end]` and a
/// DDIM grid of `steps + 1` timesteps.
pub fn make_schedule<S: Real>(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
) -> Result<NoiseSchedule<S>> {
    if timesteps == 0 {
        return Err(Error::param("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    if steps == 0 || steps > timesteps {
        return Err(Error::param(format!(
            "ddim_steps must lie in [1, T], got {steps} with T = {timesteps}"
        )));
    }

    let betas_f64: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars_f64 = Vec::with_capacity(timesteps);
    let mut acc = 1.0f64;
    for b in &betas_f64 {
        acc *= 1.0 - b;
        alpha_bars_f64.push(acc);
    }

    let last = (timesteps - 1) as f64;
    let mut grid: Vec<usize> = (0..=steps)
        .map(|i| (last * i as f64 / steps as f64).round() as usize)
        .collect();
    grid.dedup();
    if grid.len() != steps + 1 {
        return Err(Error::param(format!(
            "ddim_steps = {steps} is too large for T = {timesteps}: grid collapses to {} points",
            grid.len()
        )));
    }

    let alpha_bars: Vec<S> = alpha_bars_f64.iter().map(|&a| lit(a)).collect();
    if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param(
            "alpha_bars are not strictly decreasing at this precision",
        ));
    }
    Ok(NoiseSchedule {
        betas: betas_f64.iter().map(|&b| lit(b)).collect(),
        alpha_bars,
        alpha_bars_f64,
        grid,
    })
}

impl<S: Real> NoiseSchedule<S> {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[S] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bars[t]
    }

    pub(crate) fn alpha_bar_f64(&self, t: usize) -> f64 {
        self.alpha_bars_f64[t]
    }

    /// Grid timesteps, strictly increasing, starting at 0 and ending at `T - 1`.
    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Number of DDIM steps (grid length minus one).
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn position_of(&self, t: usize) -> Option<usize> {
        self.grid.binary_search(&t).ok()
    }

    /// Grid position whose timestep is closest to `t` (ties go to the lower one).
    pub fn nearest_position(&self, t: usize) -> usize {
        let mut best = 0;
        for (i, &g) in self.grid.iter().enumerate() {
            if g.abs_diff(t) < self.grid[best].abs_diff(t) {
                best = i;
            }
        }
        best
    }

    /// Positions `p` in `1..=steps` whose reverse transition starts above `t_min`.
    pub fn steps_above(&self, t_min: usize) -> Vec<usize> {
        (1..self.grid.len()).filter(|&p| self.grid[p] > t_min).collect()
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t < self.timesteps() {
            Ok(())
        } else {
            Err(Error::param(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps() - 1
            )))
        }
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
    pub fn forward_noise(&self, x0: &[S], t: usize, eps: &[S]) -> Result<Vec<S>> {
        self.check_t(t)?;
        check_len(x0.len(), eps.len())?;
        let a = self.alpha_bar_f64(t);
        let (ca, cn) = (lit::<S>(a.sqrt()), lit::<S>((1.0 - a).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| ca * x + cn * e).collect())
    }

    /// Clean-data estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn predict_x0(&self, x_t: &[S], t: usize, eps_pred: &[S]) -> Result<Vec<S>> {
        self.check_t(t)?;
        check_len(x_t.len(), eps_pred.len())?;
        let a = self.alpha_bar_f64(t);
        if a <= 0.0 {
            return Err(Error::Singularity(format!("alpha_bar({t}) = 0")));
        }
        let inv = lit::<S>(1.0 / a.sqrt());
        let cn = lit::<S>((1.0 - a).sqrt());
        Ok(x_t
            .iter()
            .zip(eps_pred)
            .map(|(&x, &e)| (x - cn * e) * inv)
            .collect())
    }

    /// The pair `(a, c)` with `ddim_step(x, src, dst, eps) = a x + c eps`.
    pub fn ddim_coefficients(&self, t_src: usize, t_dst: usize) -> Result<(S, S)> {
        let (a, c) = self.ddim_coefficients_f64(t_src, t_dst)?;
        Ok((lit(a), lit(c)))
    }

    pub(crate) fn ddim_coefficients_f64(&self, t_src: usize, t_dst: usize) -> Result<(f64, f64)> {
        self.check_adjacent(t_src, t_dst)?;
        let (a_s, a_d) = (self.alpha_bar_f64(t_src), self.alpha_bar_f64(t_dst));
        let k = |a: f64| ((1.0 - a) / a).sqrt();
        Ok(((a_d / a_s).sqrt(), a_d.sqrt() * (k(a_d) - k(a_s))))
    }

    fn check_adjacent(&self, t_src: usize, t_dst: usize) -> Result<()> {
        let (Some(p), Some(q)) = (self.position_of(t_src), self.position_of(t_dst)) else {
            return Err(Error::Usage(format!(
                "timesteps {t_src} -> {t_dst} are not both on the DDIM grid"
            )));
        };
        if p.abs_diff(q) > 1 {
            return Err(Error::Usage(format!(
                "timesteps {t_src} -> {t_dst} are not adjacent on the DDIM grid"
            )));
        }
        Ok(())
    }

    /// One deterministic DDIM transition between adjacent grid timesteps.
    /// Decreasing `t` generates; increasing `t` inverts.
    pub fn ddim_step(&self, x_src: &[S], t_src: usize, t_dst: usize, eps_pred: &[S]) -> Result<Vec<S>> {
        check_len(x_src.len(), eps_pred.len())?;
        let (a, c) = self.ddim_coefficients(t_src, t_dst)?;
        Ok(x_src
            .iter()
            .zip(eps_pred)
            .map(|(&x, &e)| a * x + c * e)
            .collect())
    }

    /// Moves `x` from grid position `from` to grid position `to`, one DDIM step
    /// at a time, evaluating the model at each source state. `hook` sees (and
    /// may modify) each newly reached state together with its grid position.
    pub fn transport_with<M, F>(&self, model: &M, x: &[S], from: usize, to: usize, mut hook: F) -> Result<Vec<S>>
    where
        M: NoisePredictor<S> + ?Sized,
        F: FnMut(usize, &mut Vec<S>),
    {
        let mut cur = x.to_vec();
        let mut pos = from;
        while pos != to {
            let next = if to < pos { pos - 1 } else { pos + 1 };
            let (ts, td) = (self.grid[pos], self.grid[next]);
            let eps = model.predict_noise(self, &cur, ts)?;
            cur = self.ddim_step(&cur, ts, td, &eps)?;
            hook(next, &mut cur);
            pos = next;
        }
        Ok(cur)
    }

    pub fn transport<M>(&self, model: &M, x: &[S], from: usize, to: usize) -> Result<Vec<S>>
    where
        M: NoisePredictor<S> + ?Sized,
    {
        self.transport_with(model, x, from, to, |_, _| {})
    }

    /// Full trajectory starting from the grid end matching `sweep`.
    pub fn run_trajectory<M>(&self, model: &M, endpoint: &[S], sweep: Sweep) -> Result<Trajectory<S>>
    where
        M: NoisePredictor<S> + ?Sized,
    {
        let last = self.steps();
        let (from, to) = match sweep {
            Sweep::Invert => (0, last),
            Sweep::Generate => (last, 0),
        };
        let mut states = vec![Vec::new(); last + 1];
        states[from] = endpoint.to_vec();
        self.transport_with(model, endpoint, from, to, |p, x| states[p] = x.clone())?;
        Ok(Trajectory {
            grid: self.grid.clone(),
            states,
        })
    }

    /// Full trajectory passing through `x` at grid position `pos`: inversion
    /// above it, generation below it.
    pub fn trajectory_through<M>(&self, model: &M, x: &[S], pos: usize) -> Result<Trajectory<S>>
    where
        M: NoisePredictor<S> + ?Sized,
    {
        let last = self.steps();
        let mut states = vec![Vec::new(); last + 1];
        states[pos] = x.to_vec();
        self.transport_with(model, x, pos, last, |p, s| states[p] = s.clone())?;
        self.transport_with(model, x, pos, 0, |p, s| states[p] = s.clone())?;
        Ok(Trajectory {
            grid: self.grid.clone(),
            states,
        })
    }
}
