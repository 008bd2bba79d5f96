//! Batched layer kernels with hand-written backward passes.
//!
//! Activations are stored sample-major: dense activations as `[batch, features]`,
//! feature maps as `[batch, channels, height, width]`. Backward kernels accept a
//! cotangent batch that may be larger than the primal batch when the primal batch
//! is 1 (several directions through one point).

use crate::real::{lit, Real};

pub(crate) fn dense_forward<S: Real>(
    w: &[S],
    bias: Option<&[S]>,
    x: &[S],
    batch: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<S> {
    let mut y = vec![S::zero(); batch * n_out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(n_out) {
            row.copy_from_slice(b);
        }
    }
    S::gemm(
        batch,
        n_in,
        n_out,
        S::one(),
        x,
        (n_in as isize, 1),
        w,
        (1, n_in as isize),
        S::one(),
        &mut y,
        (n_out as isize, 1),
    );
    y
}

/// Returns the input cotangent; accumulates parameter gradients when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<S: Real>(
    w: &[S],
    x: &[S],
    gy: &[S],
    batch: usize,
    n_in: usize,
    n_out: usize,
    param_grads: Option<(&mut [S], &mut [S])>,
) -> Vec<S> {
    let mut gx = vec![S::zero(); batch * n_in];
    S::gemm(
        batch,
        n_out,
        n_in,
        S::one(),
        gy,
        (n_out as isize, 1),
        w,
        (n_in as isize, 1),
        S::zero(),
        &mut gx,
        (n_in as isize, 1),
    );
    if let Some((gw, gb)) = param_grads {
        S::gemm(
            n_out,
            batch,
            n_in,
            S::one(),
            gy,
            (1, n_out as isize),
            x,
            (n_in as isize, 1),
            S::one(),
            gw,
            (n_in as isize, 1),
        );
        for row in gy.chunks_exact(n_out) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    gx
}

/// 3x3 convolution with zero padding 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl Conv3 {
    pub fn ho(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn wo(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.ho() * self.wo()
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn im2col<S: Real>(&self, x: &[S], cols: &mut [S]) {
        let (ho, wo, s) = (self.ho(), self.wo(), self.stride);
        let npix = ho * wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 3 + ky) * 3 + kx) * npix..][..npix];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            *d = if ix < 0 || ix >= self.w as isize {
                                S::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Real>(&self, cols: &[S], gx: &mut [S]) {
        let (ho, wo, s) = (self.ho(), self.wo(), self.stride);
        let npix = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 3 + ky) * 3 + kx) * npix..][..npix];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Real>(&self, w: &[S], bias: Option<&[S]>, x: &[S], batch: usize) -> Vec<S> {
        let npix = self.ho() * self.wo();
        let k = self.cin * 9;
        let mut cols = vec![S::zero(); k * npix];
        let mut y = vec![S::zero(); batch * self.out_len()];
        for (xb, yb) in x.chunks_exact(self.in_len()).zip(y.chunks_exact_mut(self.out_len())) {
            self.im2col(xb, &mut cols);
            if let Some(b) = bias {
                for (row, &bv) in yb.chunks_exact_mut(npix).zip(b) {
                    row.iter_mut().for_each(|v| *v = bv);
                }
            }
            S::gemm(
                self.cout,
                k,
                npix,
                S::one(),
                w,
                (k as isize, 1),
                &cols,
                (npix as isize, 1),
                S::one(),
                yb,
                (npix as isize, 1),
            );
        }
        y
    }

    /// Input cotangent (if `want_input`) and parameter gradients (if given).
    /// Parameter gradients require the primal batch to match the cotangent batch.
    pub fn backward<S: Real>(
        &self,
        w: &[S],
        x: &[S],
        gy: &[S],
        batch: usize,
        want_input: bool,
        param_grads: Option<(&mut [S], &mut [S])>,
    ) -> Option<Vec<S>> {
        let npix = self.ho() * self.wo();
        let k = self.cin * 9;
        let mut cols = vec![S::zero(); k * npix];
        let mut gx = want_input.then(|| vec![S::zero(); batch * self.in_len()]);
        let mut pg = param_grads;
        for b in 0..batch {
            let gyb = &gy[b * self.out_len()..(b + 1) * self.out_len()];
            if let Some((gw, gb)) = pg.as_mut() {
                self.im2col(&x[b * self.in_len()..(b + 1) * self.in_len()], &mut cols);
                S::gemm(
                    self.cout,
                    npix,
                    k,
                    S::one(),
                    gyb,
                    (npix as isize, 1),
                    &cols,
                    (1, npix as isize),
                    S::one(),
                    gw,
                    (k as isize, 1),
                );
                for (g, row) in gb.iter_mut().zip(gyb.chunks_exact(npix)) {
                    *g += row.iter().copied().sum::<S>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                S::gemm(
                    k,
                    self.cout,
                    npix,
                    S::one(),
                    w,
                    (1, k as isize),
                    gyb,
                    (npix as isize, 1),
                    S::zero(),
                    &mut cols,
                    (npix as isize, 1),
                );
                self.col2im(&cols, &mut gx[b * self.in_len()..(b + 1) * self.in_len()]);
            }
        }
        gx
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
/// Weights are laid out `[cin, cout, 2, 2]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Up2 {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl Up2 {
    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * 4 * self.h * self.w
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * 4
    }

    pub fn forward<S: Real>(&self, w: &[S], bias: Option<&[S]>, x: &[S], batch: usize) -> Vec<S> {
        let hw = self.h * self.w;
        let r = self.cout * 4;
        let mut p = vec![S::zero(); r * hw];
        let mut y = vec![S::zero(); batch * self.out_len()];
        let wo = 2 * self.w;
        for (xb, yb) in x.chunks_exact(self.in_len()).zip(y.chunks_exact_mut(self.out_len())) {
            S::gemm(
                r,
                self.cin,
                hw,
                S::one(),
                w,
                (1, r as isize),
                xb,
                (hw as isize, 1),
                S::zero(),
                &mut p,
                (hw as isize, 1),
            );
            for co in 0..self.cout {
                let b = bias.map_or(S::zero(), |b| b[co]);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let prow = &p[(co * 4 + dy * 2 + dx) * hw..][..hw];
                        for y0 in 0..self.h {
                            for x0 in 0..self.w {
                                yb[co * 4 * hw + (2 * y0 + dy) * wo + 2 * x0 + dx] =
                                    prow[y0 * self.w + x0] + b;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<S: Real>(
        &self,
        w: &[S],
        x: &[S],
        gy: &[S],
        batch: usize,
        param_grads: Option<(&mut [S], &mut [S])>,
    ) -> Vec<S> {
        let hw = self.h * self.w;
        let r = self.cout * 4;
        let wo = 2 * self.w;
        let mut gp = vec![S::zero(); r * hw];
        let mut gx = vec![S::zero(); batch * self.in_len()];
        let mut pg = param_grads;
        for b in 0..batch {
            let gyb = &gy[b * self.out_len()..(b + 1) * self.out_len()];
            for co in 0..self.cout {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let prow = &mut gp[(co * 4 + dy * 2 + dx) * hw..][..hw];
                        for y0 in 0..self.h {
                            for x0 in 0..self.w {
                                prow[y0 * self.w + x0] =
                                    gyb[co * 4 * hw + (2 * y0 + dy) * wo + 2 * x0 + dx];
                            }
                        }
                    }
                }
            }
            S::gemm(
                self.cin,
                r,
                hw,
                S::one(),
                w,
                (r as isize, 1),
                &gp,
                (hw as isize, 1),
                S::zero(),
                &mut gx[b * self.in_len()..(b + 1) * self.in_len()],
                (hw as isize, 1),
            );
            if let Some((gw, gbias)) = pg.as_mut() {
                let xb = &x[b * self.in_len()..(b + 1) * self.in_len()];
                S::gemm(
                    self.cin,
                    hw,
                    r,
                    S::one(),
                    xb,
                    (hw as isize, 1),
                    &gp,
                    (1, hw as isize),
                    S::one(),
                    gw,
                    (r as isize, 1),
                );
                for co in 0..self.cout {
                    *gbias.get_mut(co).expect("bias") += gyb[co * 4 * hw..(co + 1) * 4 * hw]
                        .iter()
                        .copied()
                        .sum::<S>();
                }
            }
        }
        gx
    }
}

#[inline]
pub(crate) fn sigmoid<S: Real>(u: S) -> S {
    S::one() / (S::one() + (-u).exp())
}

#[inline]
pub(crate) fn swish<S: Real>(u: S) -> S {
    u * sigmoid(u)
}

#[inline]
pub(crate) fn swish_grad<S: Real>(u: S) -> S {
    let s = sigmoid(u);
    s * (S::one() + u * (S::one() - s))
}

/// Sinusoidal embedding of an integer timestep: `[sin(t f_i)..., cos(t f_i)...]`.
pub(crate) fn time_embedding<S: Real>(t: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut e = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = lit(arg.sin());
        e[half + i] = lit(arg.cos());
    }
    e
}
