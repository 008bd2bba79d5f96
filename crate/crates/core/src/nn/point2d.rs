//! Time-conditioned MLP for two-dimensional point clouds.

use super::layers::{dense_backward, dense_forward, swish, swish_grad, time_embedding};
use super::{Head, ScoreNetwork, Seeds};
use crate::real::Real;

pub(super) const DIM: usize = 2;
pub(super) const WIDTHS: [usize; 3] = [128, 64, 128];
pub(super) const TAPS: [&str; 2] = ["hidden1", "hidden2"];

pub(super) fn layout(emb: usize) -> Vec<(String, Vec<usize>)> {
    let dims = [DIM + emb, WIDTHS[0], WIDTHS[1], WIDTHS[2], DIM];
    let mut v = Vec::new();
    for l in 0..4 {
        v.push((format!("dense{}.weight", l + 1), vec![dims[l + 1], dims[l]]));
        v.push((format!("dense{}.bias", l + 1), vec![dims[l + 1]]));
    }
    v
}

pub(super) struct Cache<S> {
    pub batch: usize,
    input: Vec<S>,
    /// Pre-activations of the three hidden layers.
    z: Vec<Vec<S>>,
    /// Hidden activations; the first two are the taps.
    pub a: Vec<Vec<S>>,
    pub out: Vec<S>,
}

impl<S: Real> ScoreNetwork<S> {
    fn in_width(&self) -> usize {
        DIM + self.time_embed_dim
    }

    pub(super) fn point_forward(&self, x: &[S], ts: &[usize], full: bool) -> Cache<S> {
        let batch = ts.len();
        let n0 = self.in_width();
        let mut input = Vec::with_capacity(batch * n0);
        for (b, &t) in ts.iter().enumerate() {
            input.extend_from_slice(&x[b * DIM..(b + 1) * DIM]);
            input.extend(time_embedding::<S>(t, self.time_embed_dim));
        }
        let layers = if full { 3 } else { 2 };
        let mut z = Vec::new();
        let mut a: Vec<Vec<S>> = Vec::new();
        let mut n_in = n0;
        for l in 0..layers {
            let (w, b) = self.pair(l);
            let prev = if l == 0 { &input } else { &a[l - 1] };
            let zl = dense_forward(w, Some(b), prev, batch, n_in, WIDTHS[l]);
            a.push(zl.iter().map(|&u| swish(u)).collect());
            z.push(zl);
            n_in = WIDTHS[l];
        }
        let out = if full {
            let (w, b) = self.pair(3);
            dense_forward(w, Some(b), &a[2], batch, WIDTHS[2], DIM)
        } else {
            Vec::new()
        };
        Cache {
            batch,
            input,
            z,
            a,
            out,
        }
    }

    pub(super) fn point_jvp(&self, cache: &Cache<S>, v: &[S], k: usize, head: Head) -> Vec<S> {
        debug_assert_eq!(cache.batch, 1);
        // The time embedding is constant, so only the first DIM input columns carry tangent.
        let n0 = self.in_width();
        let mut tin = vec![S::zero(); k * n0];
        for b in 0..k {
            tin[b * n0..b * n0 + DIM].copy_from_slice(&v[b * DIM..(b + 1) * DIM]);
        }
        let mut t = tin;
        let mut n_in = n0;
        for l in 0..3 {
            let (w, _) = self.pair(l);
            let mut tz = dense_forward(w, None, &t, k, n_in, WIDTHS[l]);
            for row in tz.chunks_exact_mut(WIDTHS[l]) {
                for (x, &p) in row.iter_mut().zip(&cache.z[l]) {
                    *x *= swish_grad(p);
                }
            }
            if head == Head::Tap(l) {
                return tz;
            }
            t = tz;
            n_in = WIDTHS[l];
        }
        dense_forward(self.pair(3).0, None, &t, k, WIDTHS[2], DIM)
    }

    pub(super) fn point_backward(
        &self,
        cache: &Cache<S>,
        seeds: &Seeds<'_, S>,
        k: usize,
        want_input: bool,
        mut grads: Option<&mut [S]>,
    ) -> Option<Vec<S>> {
        let bp = cache.batch;
        if grads.is_some() {
            assert_eq!(bp, k, "parameter gradients need matching batches");
        }
        let mut ga: Vec<Vec<S>> = (0..3).map(|l| vec![S::zero(); k * WIDTHS[l]]).collect();
        for (l, seed) in seeds.taps.iter().enumerate() {
            if let Some(s) = seed {
                crate::real::axpy(S::one(), s, &mut ga[l]);
            }
        }
        let top = if let Some(gout) = seeds.out {
            let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, 3));
            let g = dense_backward(self.pair(3).0, &cache.a[2], gout, k, WIDTHS[2], DIM, pg);
            crate::real::axpy(S::one(), &g, &mut ga[2]);
            2
        } else {
            seeds.taps.iter().rposition(|s| s.is_some())?
        };
        let n0 = self.in_width();
        let mut gin = Vec::new();
        for l in (0..=top).rev() {
            let w_l = WIDTHS[l];
            let mut gz = std::mem::take(&mut ga[l]);
            for (b, row) in gz.chunks_exact_mut(w_l).enumerate() {
                let pb = if bp == 1 { 0 } else { b };
                for (g, &p) in row.iter_mut().zip(&cache.z[l][pb * w_l..(pb + 1) * w_l]) {
                    *g *= swish_grad(p);
                }
            }
            let (prev, n_in) = if l == 0 { (&cache.input, n0) } else { (&cache.a[l - 1], WIDTHS[l - 1]) };
            if l == 0 && !want_input && grads.is_none() {
                break;
            }
            let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, l));
            let g = dense_backward(self.pair(l).0, prev, &gz, k, n_in, w_l, pg);
            if l == 0 {
                gin = g;
            } else {
                crate::real::axpy(S::one(), &g, &mut ga[l - 1]);
            }
        }
        if !want_input {
            return None;
        }
        let mut gx = vec![S::zero(); k * DIM];
        for b in 0..k {
            gx[b * DIM..(b + 1) * DIM].copy_from_slice(&gin[b * n0..b * n0 + DIM]);
        }
        Some(gx)
    }
}
