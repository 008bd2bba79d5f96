//! Time-conditioned noise-prediction networks with exact forward-mode
//! (Jacobian-vector) and reverse-mode (vector-Jacobian) products.

mod image16;
pub(crate) mod layers;
mod point2d;
mod train;

pub use train::{train_denoiser, Adam, TrainConfig, TrainReport};

use rand::Rng as _;

use crate::error::{check_len, Error, Result};
use crate::model::{digest_reals, fnv1a, NoisePredictor};
use crate::real::{cast_vec, Real};
use crate::rng::{stream, Stream};
use crate::schedule::NoiseSchedule;

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 16;

/// Supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetMode {
    /// MLP on 2-D points.
    Point2d,
    /// U-Net on 16x16 single-channel images in [-1, 1].
    Image16,
}

impl NetMode {
    pub fn ambient_dim(self) -> usize {
        match self {
            NetMode::Point2d => point2d::DIM,
            NetMode::Image16 => image16::SIDE * image16::SIDE,
        }
    }

    /// Names of the hidden activations exposed as feature taps.
    pub fn tap_ids(self) -> &'static [&'static str] {
        match self {
            NetMode::Point2d => &point2d::TAPS,
            NetMode::Image16 => &image16::TAPS,
        }
    }

    pub fn tap_dims(self) -> Vec<usize> {
        match self {
            NetMode::Point2d => point2d::WIDTHS[..2].to_vec(),
            NetMode::Image16 => (0..3)
                .map(|l| image16::CHANNELS[l] * image16::SIDES[l] * image16::SIDES[l])
                .collect(),
        }
    }

    /// The default bottleneck tap: the deepest encoder activation.
    pub fn default_bottleneck(self) -> &'static str {
        match self {
            NetMode::Point2d => "hidden2",
            NetMode::Image16 => "enc3",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetMode::Point2d => "point2d",
            NetMode::Image16 => "image16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point2d" => Ok(NetMode::Point2d),
            "image16" => Ok(NetMode::Image16),
            other => Err(Error::param(format!("unknown network mode `{other}`"))),
        }
    }

    fn layout(self) -> Vec<(String, Vec<usize>)> {
        match self {
            NetMode::Point2d => point2d::layout(TIME_EMBED_DIM),
            NetMode::Image16 => image16::layout(TIME_EMBED_DIM),
        }
    }
}

/// Network output selected for differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// The predicted noise.
    Eps,
    /// The configured bottleneck tap.
    Bottleneck,
    /// A feature tap by index into [`NetMode::tap_ids`].
    Tap(usize),
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a single forward evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutput<S> {
    pub eps: Vec<S>,
    pub bottleneck: Vec<S>,
    pub taps: Vec<Vec<S>>,
}

pub(crate) struct Seeds<'a, S> {
    pub out: Option<&'a [S]>,
    pub taps: Vec<Option<&'a [S]>>,
}

enum Cache<S> {
    Point(point2d::Cache<S>),
    Image(image16::Cache<S>),
}

impl<S> Cache<S> {
    fn out(&self) -> &[S] {
        match self {
            Cache::Point(c) => &c.out,
            Cache::Image(c) => &c.out,
        }
    }

    fn tap(&self, i: usize) -> &[S] {
        match self {
            Cache::Point(c) => &c.a[i],
            Cache::Image(c) => &c.a[i],
        }
    }
}

/// A noise-prediction network with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct ScoreNetwork<S> {
    mode: NetMode,
    params: Vec<S>,
    manifest: Vec<ParamEntry>,
    time_embed_dim: usize,
    bottleneck: usize,
}

fn build_manifest(mode: NetMode) -> Vec<ParamEntry> {
    let mut offset = 0;
    mode.layout()
        .into_iter()
        .map(|(name, shape)| {
            let e = ParamEntry { name, shape, offset };
            offset += e.len();
            e
        })
        .collect()
}

impl<S: Real> ScoreNetwork<S> {
    /// All parameters zero; predicts zero noise everywhere.
    pub fn zeros(mode: NetMode) -> Self {
        let manifest = build_manifest(mode);
        let n = manifest.iter().map(ParamEntry::len).sum();
        let bottleneck = mode
            .tap_ids()
            .iter()
            .position(|&id| id == mode.default_bottleneck())
            .expect("default bottleneck is a tap");
        Self {
            mode,
            params: vec![S::zero(); n],
            manifest,
            time_embed_dim: TIME_EMBED_DIM,
            bottleneck,
        }
    }

    /// Weights uniform in +-1/sqrt(fan_in) from the init stream, biases zero.
    pub fn init(mode: NetMode, seed: u64) -> Self {
        let mut net = Self::zeros(mode);
        let mut rng = stream(seed, Stream::Init);
        for e in &net.manifest {
            if !e.name.ends_with(".weight") {
                continue;
            }
            let fan_in = if e.name.starts_with("dec") {
                // Transposed conv: [cin, cout, 2, 2]; each output sees cin inputs.
                e.shape[0]
            } else {
                e.shape[1..].iter().product()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[e.offset..e.offset + e.len()] {
                *p = S::from_f64(rng.gen_range(-bound..bound)).expect("finite");
            }
        }
        net
    }

    /// Rebuilds a network from named tensors, inferring the architecture
    /// from the tensor names.
    pub fn from_tensors(tensors: &[(String, Vec<usize>, Vec<S>)]) -> Result<Self> {
        let mode = if tensors.iter().any(|(n, _, _)| n.starts_with("enc1.")) {
            NetMode::Image16
        } else if tensors.iter().any(|(n, _, _)| n.starts_with("dense1.")) {
            NetMode::Point2d
        } else {
            return Err(Error::param("cannot infer network mode from tensor names"));
        };
        let mut net = Self::zeros(mode);
        if tensors.len() != net.manifest.len() {
            return Err(Error::param(format!(
                "expected {} tensors for {}, found {}",
                net.manifest.len(),
                mode.name(),
                tensors.len()
            )));
        }
        for (name, shape, data) in tensors {
            let e = net
                .manifest
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::param(format!("unexpected tensor `{name}`")))?
                .clone();
            if &e.shape != shape {
                return Err(Error::param(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    e.shape
                )));
            }
            check_len(e.len(), data.len())?;
            net.params[e.offset..e.offset + e.len()].copy_from_slice(data);
        }
        Ok(net)
    }

    /// Named tensors in manifest order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        self.manifest
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), self.params[e.offset..e.offset + e.len()].to_vec()))
            .collect()
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn manifest(&self) -> &[ParamEntry] {
        &self.manifest
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.mode.ambient_dim()
    }

    pub fn bottleneck_id(&self) -> &'static str {
        self.mode.tap_ids()[self.bottleneck]
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.mode.tap_dims()[self.bottleneck]
    }

    /// Selects which tap serves as the bottleneck.
    pub fn set_bottleneck(&mut self, id: &str) -> Result<()> {
        self.bottleneck = self
            .mode
            .tap_ids()
            .iter()
            .position(|&t| t == id)
            .ok_or_else(|| Error::param(format!("unknown tap `{id}` for {}", self.mode.name())))?;
        Ok(())
    }

    pub fn tap_ids(&self) -> &'static [&'static str] {
        self.mode.tap_ids()
    }

    /// Output dimension of a head.
    pub fn head_dim(&self, head: Head) -> usize {
        match self.resolve(head) {
            Head::Tap(i) => self.mode.tap_dims()[i],
            _ => self.ambient_dim(),
        }
    }

    pub fn cast<T: Real>(&self) -> ScoreNetwork<T> {
        ScoreNetwork {
            mode: self.mode,
            params: cast_vec(&self.params),
            manifest: self.manifest.clone(),
            time_embed_dim: self.time_embed_dim,
            bottleneck: self.bottleneck,
        }
    }

    /// Content digest over mode, bottleneck choice and parameter values.
    pub fn digest(&self) -> u64 {
        let head = fnv1a(self.mode.name().bytes().chain([self.bottleneck as u8]));
        head ^ digest_reals(&self.params).rotate_left(1)
    }

    pub(crate) fn pair(&self, i: usize) -> (&[S], &[S]) {
        let (w, b) = (&self.manifest[2 * i], &self.manifest[2 * i + 1]);
        (
            &self.params[w.offset..w.offset + w.len()],
            &self.params[b.offset..b.offset + b.len()],
        )
    }

    pub(crate) fn pair_grad<'g>(&self, g: &'g mut [S], i: usize) -> (&'g mut [S], &'g mut [S]) {
        let (w, b) = (&self.manifest[2 * i], &self.manifest[2 * i + 1]);
        debug_assert_eq!(w.offset + w.len(), b.offset);
        let span = &mut g[w.offset..b.offset + b.len()];
        span.split_at_mut(w.len())
    }

    fn resolve(&self, head: Head) -> Head {
        match head {
            Head::Bottleneck => Head::Tap(self.bottleneck),
            h => h,
        }
    }

    fn check_head(&self, head: Head) -> Result<Head> {
        let h = self.resolve(head);
        if let Head::Tap(i) = h {
            if i >= self.mode.tap_ids().len() {
                return Err(Error::param(format!("tap index {i} out of range")));
            }
        }
        Ok(h)
    }

    fn forward(&self, x: &[S], ts: &[usize], full: bool) -> Result<Cache<S>> {
        check_len(ts.len() * self.ambient_dim(), x.len())?;
        Ok(match self.mode {
            NetMode::Point2d => Cache::Point(self.point_forward(x, ts, full)),
            NetMode::Image16 => Cache::Image(self.image_forward(x, ts, full)),
        })
    }

    fn backward(
        &self,
        cache: &Cache<S>,
        seeds: &Seeds<'_, S>,
        k: usize,
        want_input: bool,
        grads: Option<&mut [S]>,
    ) -> Option<Vec<S>> {
        match cache {
            Cache::Point(c) => self.point_backward(c, seeds, k, want_input, grads),
            Cache::Image(c) => self.image_backward(c, seeds, k, want_input, grads),
        }
    }

    /// Noise prediction plus all taps at a single state.
    pub fn eval(&self, x: &[S], t: usize) -> Result<EvalOutput<S>> {
        let cache = self.forward(x, &[t], true)?;
        let taps: Vec<Vec<S>> = (0..self.mode.tap_ids().len())
            .map(|i| cache.tap(i).to_vec())
            .collect();
        Ok(EvalOutput {
            eps: cache.out().to_vec(),
            bottleneck: taps[self.bottleneck].clone(),
            taps,
        })
    }

    /// Noise predictions for a batch of states stacked row-wise.
    pub fn predict_noise_batch(&self, xs: &[S], ts: &[usize]) -> Result<Vec<S>> {
        Ok(self.forward(xs, ts, true)?.out().to_vec())
    }

    /// Value of one head at a single state.
    pub fn head_value(&self, x: &[S], t: usize, head: Head) -> Result<Vec<S>> {
        let head = self.check_head(head)?;
        let cache = self.forward(x, &[t], head == Head::Eps)?;
        Ok(match head {
            Head::Tap(i) => cache.tap(i).to_vec(),
            _ => cache.out().to_vec(),
        })
    }

    /// Jacobian-vector product of `head` at `(x, t)` along `v`.
    pub fn jvp(&self, x: &[S], t: usize, head: Head, v: &[S]) -> Result<Vec<S>> {
        Ok(self.jvp_many(x, t, head, std::slice::from_ref(&v.to_vec()))?.remove(0))
    }

    /// Jacobian-vector products along several tangents sharing one primal pass.
    pub fn jvp_many(&self, x: &[S], t: usize, head: Head, vs: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let head = self.check_head(head)?;
        let d = self.ambient_dim();
        for v in vs {
            check_len(d, v.len())?;
        }
        if vs.is_empty() {
            return Ok(Vec::new());
        }
        let cache = self.forward(x, &[t], head == Head::Eps)?;
        let k = vs.len();
        let flat: Vec<S> = vs.concat();
        let out = match &cache {
            Cache::Point(c) => self.point_jvp(c, &flat, k, head),
            Cache::Image(c) => self.image_jvp(c, &flat, k, head),
        };
        let m = out.len() / k;
        Ok(out.chunks_exact(m).map(<[S]>::to_vec).collect())
    }

    /// Vector-Jacobian product `J^T u` of `head` at `(x, t)`.
    pub fn vjp(&self, x: &[S], t: usize, head: Head, u: &[S]) -> Result<Vec<S>> {
        Ok(self.vjp_many(x, t, head, std::slice::from_ref(&u.to_vec()))?.remove(0))
    }

    /// Vector-Jacobian products for several cotangents sharing one primal pass.
    pub fn vjp_many(&self, x: &[S], t: usize, head: Head, us: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let head = self.check_head(head)?;
        let m = self.head_dim(head);
        for u in us {
            check_len(m, u.len())?;
        }
        if us.is_empty() {
            return Ok(Vec::new());
        }
        let cache = self.forward(x, &[t], head == Head::Eps)?;
        let k = us.len();
        let flat: Vec<S> = us.concat();
        let n_taps = self.mode.tap_ids().len();
        let mut seeds = Seeds {
            out: None,
            taps: vec![None; n_taps],
        };
        match head {
            Head::Tap(i) => seeds.taps[i] = Some(&flat),
            _ => seeds.out = Some(&flat),
        }
        let gx = self.backward(&cache, &seeds, k, true, None).expect("input cotangent");
        let d = self.ambient_dim();
        Ok(gx.chunks_exact(d).map(<[S]>::to_vec).collect())
    }

    /// Evaluates `head` on a batch of states, builds cotangents from the
    /// values with `seed`, and returns the values with the per-state input
    /// cotangents `J_b^T u_b`.
    pub fn head_with_vjp<F>(&self, xs: &[S], ts: &[usize], head: Head, seed: F) -> Result<(Vec<S>, Vec<S>)>
    where
        F: FnOnce(&[S]) -> Result<Vec<S>>,
    {
        let head = self.check_head(head)?;
        let cache = self.forward(xs, ts, head == Head::Eps)?;
        let values = match head {
            Head::Tap(i) => cache.tap(i).to_vec(),
            _ => cache.out().to_vec(),
        };
        let us = seed(&values)?;
        check_len(values.len(), us.len())?;
        let mut seeds = Seeds {
            out: None,
            taps: vec![None; self.mode.tap_ids().len()],
        };
        match head {
            Head::Tap(i) => seeds.taps[i] = Some(&us),
            _ => seeds.out = Some(&us),
        }
        let gx = self.backward(&cache, &seeds, ts.len(), true, None).expect("input cotangent");
        Ok((values, gx))
    }

    /// All taps at one state together with a closure-built tap cotangent
    /// pulled back to the input.
    pub fn taps_with_vjp<F>(&self, x: &[S], t: usize, seed: F) -> Result<(Vec<Vec<S>>, Vec<S>)>
    where
        F: FnOnce(&[Vec<S>]) -> Result<Vec<Option<Vec<S>>>>,
    {
        let cache = self.forward(x, &[t], false)?;
        let n = self.mode.tap_ids().len();
        let taps: Vec<Vec<S>> = (0..n).map(|i| cache.tap(i).to_vec()).collect();
        let us = seed(&taps)?;
        if us.len() != n {
            return Err(Error::param("one seed slot per tap required"));
        }
        for (u, tap) in us.iter().zip(&taps) {
            if let Some(u) = u {
                check_len(tap.len(), u.len())?;
            }
        }
        if us.iter().all(Option::is_none) {
            return Ok((taps, vec![S::zero(); self.ambient_dim()]));
        }
        let seeds = Seeds {
            out: None,
            taps: us.iter().map(|s| s.as_deref()).collect(),
        };
        let gx = self.backward(&cache, &seeds, 1, true, None).expect("input cotangent");
        Ok((taps, gx))
    }

    /// Sum over taps of `J_tap^T u_tap` at a single state; `None` seeds are skipped.
    pub fn vjp_taps(&self, x: &[S], t: usize, seeds: &[Option<Vec<S>>]) -> Result<Vec<S>> {
        let dims = self.mode.tap_dims();
        if seeds.len() != dims.len() {
            return Err(Error::param("one seed slot per tap required"));
        }
        for (s, &d) in seeds.iter().zip(&dims) {
            if let Some(s) = s {
                check_len(d, s.len())?;
            }
        }
        if seeds.iter().all(Option::is_none) {
            return Ok(vec![S::zero(); self.ambient_dim()]);
        }
        let cache = self.forward(x, &[t], false)?;
        let seeds = Seeds {
            out: None,
            taps: seeds.iter().map(|s| s.as_deref()).collect(),
        };
        Ok(self.backward(&cache, &seeds, 1, true, None).expect("input cotangent"))
    }

    /// Mean squared error between predicted and target noise over a batch,
    /// with its gradient in the flat parameter layout.
    pub fn loss_and_grad(&self, xt: &[S], ts: &[usize], target: &[S]) -> Result<(S, Vec<S>)> {
        check_len(xt.len(), target.len())?;
        let cache = self.forward(xt, ts, true)?;
        let n = S::from_usize(target.len()).expect("size");
        let resid = crate::real::sub(cache.out(), target);
        let loss = crate::real::dot(&resid, &resid) / n;
        let two = S::one() + S::one();
        let gout: Vec<S> = resid.iter().map(|&r| two * r / n).collect();
        let mut grads = vec![S::zero(); self.params.len()];
        let seeds = Seeds {
            out: Some(&gout),
            taps: vec![None; self.mode.tap_ids().len()],
        };
        self.backward(&cache, &seeds, ts.len(), false, Some(&mut grads));
        Ok((loss, grads))
    }
}

impl<S: Real> NoisePredictor<S> for ScoreNetwork<S> {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn predict_noise(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<Vec<S>> {
        schedule.check_t(t)?;
        self.predict_noise_batch(x, &[t])
    }
}
