//! 16x16 single-channel U-Net: three encoder levels (the last one is the
//! bottleneck), an upsampling decoder with additive skips, and per-level
//! time-conditioned scale-and-shift.

use super::layers::{dense_backward, dense_forward, swish, swish_grad, time_embedding, Conv3, Up2};
use super::{Head, ScoreNetwork, Seeds};
use crate::real::Real;

pub(super) const SIDE: usize = 16;
pub(super) const CHANNELS: [usize; 5] = [16, 32, 64, 32, 16];
pub(super) const SIDES: [usize; 5] = [16, 8, 4, 8, 16];
pub(super) const TAPS: [&str; 3] = ["enc1", "enc2", "enc3"];

const ENC1: Conv3 = Conv3 { cin: 1, cout: 16, h: 16, w: 16, stride: 1 };
const ENC2: Conv3 = Conv3 { cin: 16, cout: 32, h: 16, w: 16, stride: 2 };
const ENC3: Conv3 = Conv3 { cin: 32, cout: 64, h: 8, w: 8, stride: 2 };
const DEC1: Up2 = Up2 { cin: 64, cout: 32, h: 4, w: 4 };
const DEC2: Up2 = Up2 { cin: 32, cout: 16, h: 8, w: 8 };
const OUT: Conv3 = Conv3 { cin: 16, cout: 1, h: 16, w: 16, stride: 1 };

// Manifest pair indices (weight at 2 * i, bias at 2 * i + 1).
const FILM: [usize; 5] = [0, 1, 2, 3, 4];
const P_ENC1: usize = 5;
const P_ENC2: usize = 6;
const P_ENC3: usize = 7;
const P_DEC1: usize = 8;
const P_DEC2: usize = 9;
const P_OUT: usize = 10;

pub(super) fn layout(emb: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for (name, c) in ["enc1", "enc2", "enc3", "dec1", "dec2"].iter().zip(CHANNELS) {
        v.push((format!("time.{name}.weight"), vec![2 * c, emb]));
        v.push((format!("time.{name}.bias"), vec![2 * c]));
    }
    for (name, conv) in [("enc1", ENC1), ("enc2", ENC2), ("enc3", ENC3)] {
        v.push((format!("{name}.weight"), vec![conv.cout, conv.cin, 3, 3]));
        v.push((format!("{name}.bias"), vec![conv.cout]));
    }
    for (name, up) in [("dec1", DEC1), ("dec2", DEC2)] {
        v.push((format!("{name}.weight"), vec![up.cin, up.cout, 2, 2]));
        v.push((format!("{name}.bias"), vec![up.cout]));
    }
    v.push(("out.weight".into(), vec![1, 16, 3, 3]));
    v.push(("out.bias".into(), vec![1]));
    v
}

pub(super) struct Cache<S> {
    pub batch: usize,
    input: Vec<S>,
    emb: Vec<S>,
    film: Vec<Vec<S>>,
    /// Conv outputs before the time modulation.
    z: Vec<Vec<S>>,
    /// Modulated pre-activations.
    zf: Vec<Vec<S>>,
    /// Level activations; the first three are the encoder taps.
    pub a: Vec<Vec<S>>,
    d1: Vec<S>,
    d2: Vec<S>,
    pub out: Vec<S>,
}

fn level_len(l: usize) -> usize {
    CHANNELS[l] * SIDES[l] * SIDES[l]
}

impl<S: Real> ScoreNetwork<S> {
    fn modulate(&self, l: usize, z: &[S], film: &[S], batch: usize) -> (Vec<S>, Vec<S>) {
        let c = CHANNELS[l];
        let npix = SIDES[l] * SIDES[l];
        let mut zf = vec![S::zero(); z.len()];
        let mut a = vec![S::zero(); z.len()];
        for b in 0..batch {
            let f = &film[b * 2 * c..(b + 1) * 2 * c];
            for ch in 0..c {
                let (g, sh) = (S::one() + f[ch], f[c + ch]);
                let off = (b * c + ch) * npix;
                for i in off..off + npix {
                    zf[i] = z[i] * g + sh;
                    a[i] = swish(zf[i]);
                }
            }
        }
        (zf, a)
    }

    pub(super) fn image_forward(&self, x: &[S], ts: &[usize], full: bool) -> Cache<S> {
        let batch = ts.len();
        let e = self.time_embed_dim;
        let mut emb = Vec::with_capacity(batch * e);
        for &t in ts {
            emb.extend(time_embedding::<S>(t, e));
        }
        let levels = if full { 5 } else { 3 };
        let film: Vec<Vec<S>> = (0..levels)
            .map(|l| {
                let (w, b) = self.pair(FILM[l]);
                dense_forward(w, Some(b), &emb, batch, e, 2 * CHANNELS[l])
            })
            .collect();
        let mut z = Vec::new();
        let mut zf = Vec::new();
        let mut a: Vec<Vec<S>> = Vec::new();
        let push = |l: usize, zl: Vec<S>, z: &mut Vec<Vec<S>>, zf: &mut Vec<Vec<S>>, a: &mut Vec<Vec<S>>| {
            let (f, al) = self.modulate(l, &zl, &film[l], batch);
            z.push(zl);
            zf.push(f);
            a.push(al);
        };
        let (w, b) = self.pair(P_ENC1);
        push(0, ENC1.forward(w, Some(b), x, batch), &mut z, &mut zf, &mut a);
        let (w, b) = self.pair(P_ENC2);
        let zl = ENC2.forward(w, Some(b), &a[0], batch);
        push(1, zl, &mut z, &mut zf, &mut a);
        let (w, b) = self.pair(P_ENC3);
        let zl = ENC3.forward(w, Some(b), &a[1], batch);
        push(2, zl, &mut z, &mut zf, &mut a);
        let (mut d1, mut d2, mut out) = (Vec::new(), Vec::new(), Vec::new());
        if full {
            let (w, b) = self.pair(P_DEC1);
            let zl = DEC1.forward(w, Some(b), &a[2], batch);
            push(3, zl, &mut z, &mut zf, &mut a);
            d1 = crate::real::add(&a[3], &a[1]);
            let (w, b) = self.pair(P_DEC2);
            let zl = DEC2.forward(w, Some(b), &d1, batch);
            push(4, zl, &mut z, &mut zf, &mut a);
            d2 = crate::real::add(&a[4], &a[0]);
            let (w, b) = self.pair(P_OUT);
            out = OUT.forward(w, Some(b), &d2, batch);
        }
        Cache {
            batch,
            input: x.to_vec(),
            emb,
            film,
            z,
            zf,
            a,
            d1,
            d2,
            out,
        }
    }

    /// Tangent of level `l`'s activation given the tangent of its conv output,
    /// for `k` tangents through a batch-1 primal.
    fn level_tangent(&self, cache: &Cache<S>, l: usize, dz: &mut [S], k: usize) {
        let c = CHANNELS[l];
        let npix = SIDES[l] * SIDES[l];
        let f = &cache.film[l][..2 * c];
        let zf = &cache.zf[l];
        for b in 0..k {
            for ch in 0..c {
                let g = S::one() + f[ch];
                let prim = &zf[ch * npix..(ch + 1) * npix];
                let tan = &mut dz[(b * c + ch) * npix..(b * c + ch + 1) * npix];
                for (t, &p) in tan.iter_mut().zip(prim) {
                    *t = *t * g * swish_grad(p);
                }
            }
        }
    }

    pub(super) fn image_jvp(&self, cache: &Cache<S>, v: &[S], k: usize, head: Head) -> Vec<S> {
        debug_assert_eq!(cache.batch, 1);
        let mut t1 = ENC1.forward(self.pair(P_ENC1).0, None, v, k);
        self.level_tangent(cache, 0, &mut t1, k);
        if head == Head::Tap(0) {
            return t1;
        }
        let mut t2 = ENC2.forward(self.pair(P_ENC2).0, None, &t1, k);
        self.level_tangent(cache, 1, &mut t2, k);
        if head == Head::Tap(1) {
            return t2;
        }
        let mut t3 = ENC3.forward(self.pair(P_ENC3).0, None, &t2, k);
        self.level_tangent(cache, 2, &mut t3, k);
        if head == Head::Tap(2) {
            return t3;
        }
        let mut t4 = DEC1.forward(self.pair(P_DEC1).0, None, &t3, k);
        self.level_tangent(cache, 3, &mut t4, k);
        crate::real::axpy(S::one(), &t2, &mut t4);
        let mut t5 = DEC2.forward(self.pair(P_DEC2).0, None, &t4, k);
        self.level_tangent(cache, 4, &mut t5, k);
        crate::real::axpy(S::one(), &t1, &mut t5);
        OUT.forward(self.pair(P_OUT).0, None, &t5, k)
    }

    /// Backpropagates `ga` (cotangent of level `l`'s activation) to the
    /// cotangent of the level's conv output, accumulating time-modulation
    /// gradients when `film_grad` is given.
    fn level_backward(&self, cache: &Cache<S>, l: usize, ga: &[S], k: usize, film_grad: Option<&mut Vec<S>>) -> Vec<S> {
        let c = CHANNELS[l];
        let npix = SIDES[l] * SIDES[l];
        let bp = cache.batch;
        let mut gz = vec![S::zero(); ga.len()];
        let mut fg = film_grad;
        for b in 0..k {
            let pb = if bp == 1 { 0 } else { b };
            let f = &cache.film[l][pb * 2 * c..(pb + 1) * 2 * c];
            for ch in 0..c {
                let g = S::one() + f[ch];
                let off = (b * c + ch) * npix;
                let poff = (pb * c + ch) * npix;
                let (mut sg, mut sb) = (S::zero(), S::zero());
                for i in 0..npix {
                    let gzf = ga[off + i] * swish_grad(cache.zf[l][poff + i]);
                    gz[off + i] = gzf * g;
                    sg += gzf * cache.z[l][poff + i];
                    sb += gzf;
                }
                if let Some(fg) = fg.as_mut() {
                    fg[b * 2 * c + ch] += sg;
                    fg[b * 2 * c + c + ch] += sb;
                }
            }
        }
        gz
    }

    /// Reverse-mode pass from cotangents on the output and/or encoder taps.
    /// Returns the input cotangent when `want_input` is set.
    pub(super) fn image_backward(
        &self,
        cache: &Cache<S>,
        seeds: &Seeds<'_, S>,
        k: usize,
        want_input: bool,
        mut grads: Option<&mut [S]>,
    ) -> Option<Vec<S>> {
        let training = grads.is_some();
        if training {
            assert_eq!(cache.batch, k, "parameter gradients need matching batches");
        }
        let mut film_g: Vec<Option<Vec<S>>> = (0..5)
            .map(|l| training.then(|| vec![S::zero(); k * 2 * CHANNELS[l]]))
            .collect();
        let mut ga: Vec<Vec<S>> = (0..3).map(|l| vec![S::zero(); k * level_len(l)]).collect();
        for (l, seed) in seeds.taps.iter().enumerate() {
            if let Some(s) = seed {
                crate::real::axpy(S::one(), s, &mut ga[l]);
            }
        }

        if let Some(gout) = seeds.out {
            let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_OUT));
            let gd2 = OUT.backward(self.pair(P_OUT).0, &cache.d2, gout, k, true, pg).expect("input");
            crate::real::axpy(S::one(), &gd2, &mut ga[0]);
            let gz5 = self.level_backward(cache, 4, &gd2, k, film_g[4].as_mut());
            let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_DEC2));
            let gd1 = DEC2.backward(self.pair(P_DEC2).0, &cache.d1, &gz5, k, pg);
            crate::real::axpy(S::one(), &gd1, &mut ga[1]);
            let gz4 = self.level_backward(cache, 3, &gd1, k, film_g[3].as_mut());
            let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_DEC1));
            let gu3 = DEC1.backward(self.pair(P_DEC1).0, &cache.a[2], &gz4, k, pg);
            crate::real::axpy(S::one(), &gu3, &mut ga[2]);
        }

        let gz3 = self.level_backward(cache, 2, &ga[2], k, film_g[2].as_mut());
        let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_ENC3));
        let gu2 = ENC3.backward(self.pair(P_ENC3).0, &cache.a[1], &gz3, k, true, pg).expect("input");
        crate::real::axpy(S::one(), &gu2, &mut ga[1]);
        let gz2 = self.level_backward(cache, 1, &ga[1], k, film_g[1].as_mut());
        let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_ENC2));
        let gu1 = ENC2.backward(self.pair(P_ENC2).0, &cache.a[0], &gz2, k, true, pg).expect("input");
        crate::real::axpy(S::one(), &gu1, &mut ga[0]);
        let gz1 = self.level_backward(cache, 0, &ga[0], k, film_g[0].as_mut());
        let pg = grads.as_deref_mut().map(|g| self.pair_grad(g, P_ENC1));
        let gx = ENC1.backward(self.pair(P_ENC1).0, &cache.input, &gz1, k, want_input, pg);

        if let Some(g) = grads {
            let e = self.time_embed_dim;
            for (l, fg) in film_g.iter().enumerate() {
                if let Some(fg) = fg {
                    let (gw, gb) = self.pair_grad(g, FILM[l]);
                    let w = self.pair(FILM[l]).0;
                    dense_backward(w, &cache.emb, fg, k, e, 2 * CHANNELS[l], Some((gw, gb)));
                }
            }
        }
        gx
    }
}
