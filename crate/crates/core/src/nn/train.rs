//! Denoising-objective training with Adam.

use rand::Rng as _;

use super::ScoreNetwork;
use crate::error::{Error, Result};
use crate::real::{lit, Real};
use crate::rng::{normal_vec, stream, Stream};
use crate::schedule::NoiseSchedule;

/// Adam optimiser state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<S>,
    v: Vec<S>,
    step: i32,
}

impl<S: Real> Adam<S> {
    pub fn new(n: usize, lr: S) -> Self {
        Self {
            lr,
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
        }
    }

    /// Applies one descent update `params -= lr * mhat / (sqrt(vhat) + eps)`.
    pub fn update(&mut self, params: &mut [S], grad: &[S]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = S::one() - self.beta1.powi(self.step);
        let c2 = S::one() - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (S::one() - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (S::one() - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_floor: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Decay of the exponential moving average of the weights; the average
    /// replaces the trained weights at the end. Zero disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 64,
            lr: 2e-3,
            lr_floor: 0.1,
            seed: 0,
            log_every: 100,
            ema_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// `(step, exponentially smoothed loss)` every `log_every` steps.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Fits `net` to predict the noise added to rows of `data` (row-major, one
/// sample per row) at uniformly drawn timesteps.
pub fn train_denoiser<S: Real>(
    net: &mut ScoreNetwork<S>,
    schedule: &NoiseSchedule<S>,
    data: &[S],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let d = net.ambient_dim();
    if data.is_empty() || data.len() % d != 0 {
        return Err(Error::param(format!(
            "training data length {} is not a positive multiple of {d}",
            data.len()
        )));
    }
    if !(0.0..1.0).contains(&config.ema_decay) {
        return Err(Error::param("ema_decay must lie in [0, 1)"));
    }
    if config.batch == 0 || config.log_every == 0 {
        return Err(Error::param("batch and log_every must be positive"));
    }
    let n = data.len() / d;
    let t_max = schedule.timesteps();
    let mut rng = stream(config.seed, Stream::Train);
    let mut opt = Adam::new(net.param_count(), lit::<S>(config.lr));
    let mut smooth: Option<f64> = None;
    let mut losses = Vec::new();
    let mut xt = vec![S::zero(); config.batch * d];
    let mut ts = vec![0usize; config.batch];
    let mut ema = (config.ema_decay > 0.0).then(|| net.params().to_vec());
    let decay: S = lit(config.ema_decay);
    for step in 0..config.steps {
        let eps: Vec<S> = normal_vec(&mut rng, config.batch * d);
        for b in 0..config.batch {
            let row = rng.gen_range(0..n);
            let t = rng.gen_range(0..t_max);
            ts[b] = t;
            let ab = schedule.alpha_bar(t);
            let (s0, s1) = (ab.sqrt(), (S::one() - ab).sqrt());
            for i in 0..d {
                xt[b * d + i] = s0 * data[row * d + i] + s1 * eps[b * d + i];
            }
        }
        let (loss, grad) = net.loss_and_grad(&xt, &ts, &eps)?;
        let loss = crate::real::to_f64(loss);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite training loss at step {step}")));
        }
        let progress = step as f64 / config.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.lr = lit(config.lr * (config.lr_floor + (1.0 - config.lr_floor) * cosine));
        opt.update(net.params_mut(), &grad);
        if let Some(avg) = ema.as_mut() {
            for (a, &p) in avg.iter_mut().zip(net.params()) {
                *a = decay * *a + (S::one() - decay) * p;
            }
        }
        let s = smooth.map_or(loss, |s| 0.98 * s + 0.02 * loss);
        smooth = Some(s);
        if (step + 1) % config.log_every == 0 {
            losses.push((step + 1, s));
        }
    }
    if let Some(avg) = ema {
        net.params_mut().copy_from_slice(&avg);
    }
    Ok(TrainReport {
        losses,
        final_loss: smooth.unwrap_or(f64::NAN),
    })
}
