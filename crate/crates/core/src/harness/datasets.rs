//! Synthetic datasets: 2D point clouds and 16x16 blob images whose salient
//! and non-salient pixels are known by construction.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};

pub const IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointsKind {
    TwoMoons,
    Ring,
    Gmm8,
}

impl PointsKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(PointsKind::TwoMoons),
            "ring" => Ok(PointsKind::Ring),
            "gmm8" => Ok(PointsKind::Gmm8),
            other => Err(Error::param(format!("unknown point dataset `{other}`"))),
        }
    }
}

/// Standard deviation of each octagon component.
pub const GMM8_SIGMA: f64 = 0.1;
pub const GMM8_RADIUS: f64 = 2.0;

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` points in the plane, flattened row-major as `[x0, y0, x1, y1, ...]`.
/// `noise_sigma` is ignored by `Gmm8`, whose components have fixed width.
pub fn gen_points(kind: PointsKind, n: usize, noise_sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::param("point dataset needs n >= 1"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::param("noise_sigma must be non-negative"));
    }
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match kind {
            PointsKind::TwoMoons => {
                let th = std::f64::consts::PI * rng.gen::<f64>();
                let (x, y) = if rng.gen::<bool>() {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                (x + noise_sigma * gauss(rng), y + noise_sigma * gauss(rng))
            }
            PointsKind::Ring => {
                let th = std::f64::consts::TAU * rng.gen::<f64>();
                let r = 1.0 + noise_sigma * gauss(rng);
                (r * th.cos(), r * th.sin())
            }
            PointsKind::Gmm8 => {
                let th = std::f64::consts::TAU * rng.gen_range(0..8) as f64 / 8.0;
                (
                    GMM8_RADIUS * th.cos() + GMM8_SIGMA * gauss(rng),
                    GMM8_RADIUS * th.sin() + GMM8_SIGMA * gauss(rng),
                )
            }
        };
        out.push(x);
        out.push(y);
    }
    Ok(out)
}

pub fn gen_points_dataset(kind: PointsKind, n: usize, noise_sigma: f64, seed: u64) -> Result<Vec<f64>> {
    gen_points(kind, n, noise_sigma, &mut stream(seed, Stream::Dataset))
}

/// A `(row, col)` position in a 16x16 image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn index(self) -> usize {
        self.row * IMAGE_SIDE + self.col
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            row: i / IMAGE_SIDE,
            col: i % IMAGE_SIDE,
        }
    }
}

/// Square checkerboard patch with top-left corner `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Patch {
    pub fn contains(&self, p: PixelCoord) -> bool {
        (self.row..self.row + self.size).contains(&p.row) && (self.col..self.col + self.size).contains(&p.col)
    }

    /// Chebyshev distance from `p` to the nearest patch pixel.
    pub fn distance(&self, p: PixelCoord) -> usize {
        let gap = |x: usize, lo: usize, len: usize| {
            if x < lo {
                lo - x
            } else if x >= lo + len {
                x + 1 - (lo + len)
            } else {
                0
            }
        };
        gap(p.row, self.row, self.size).max(gap(p.col, self.col, self.size))
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| self.contains(PixelCoord::from_index(i)))
            .collect()
    }

    pub fn pixels(&self) -> Vec<usize> {
        (0..IMAGE_SIDE * IMAGE_SIDE)
            .filter(|&i| self.contains(PixelCoord::from_index(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSample {
    /// Row-major 16x16 image in [-1, 1].
    pub image: Vec<f64>,
    pub salient: PixelCoord,
    pub nonsalient: PixelCoord,
    pub patch: Patch,
    pub background: f64,
}

const CHECKER_LEVEL: f64 = 0.8;
const BLOB_NOISE: f64 = 0.02;

fn blob(rng: &mut Rng) -> BlobSample {
    let background = rng.gen_range(-0.2..=0.2);
    let size = rng.gen_range(4..=6);
    // At least one background pixel on every side.
    let row = rng.gen_range(1..=IMAGE_SIDE - size - 1);
    let col = rng.gen_range(1..=IMAGE_SIDE - size - 1);
    let patch = Patch { row, col, size };
    let phase = rng.gen_range(0..2);
    let mut image = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (i, px) in image.iter_mut().enumerate() {
        let p = PixelCoord::from_index(i);
        let base = if patch.contains(p) {
            if (p.row + p.col + phase) % 2 == 0 {
                CHECKER_LEVEL
            } else {
                -CHECKER_LEVEL
            }
        } else {
            background
        };
        *px = (base + BLOB_NOISE * gauss(rng)).clamp(-1.0, 1.0);
    }
    let salient = PixelCoord {
        row: row + size / 2,
        col: col + size / 2,
    };
    let nonsalient = (0..IMAGE_SIDE * IMAGE_SIDE)
        .map(PixelCoord::from_index)
        .max_by_key(|&p| (patch.distance(p), std::cmp::Reverse(p.index())))
        .expect("non-empty image");
    BlobSample {
        image,
        salient,
        nonsalient,
        patch,
        background,
    }
}

pub fn gen_blob_dataset(n_images: usize, seed: u64) -> Result<Vec<BlobSample>> {
    if n_images == 0 {
        return Err(Error::param("blob dataset needs n_images >= 1"));
    }
    let mut rng = stream(seed, Stream::Dataset);
    Ok((0..n_images).map(|_| blob(&mut rng)).collect())
}

/// Standard deviation over the 3x3 neighbourhood of `p`, clipped at borders.
pub fn local_contrast(image: &[f64], p: PixelCoord) -> f64 {
    let mut vals = Vec::with_capacity(9);
    for r in p.row.saturating_sub(1)..=(p.row + 1).min(IMAGE_SIDE - 1) {
        for c in p.col.saturating_sub(1)..=(p.col + 1).min(IMAGE_SIDE - 1) {
            vals.push(image[r * IMAGE_SIDE + c]);
        }
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_ring_has_unit_radius() {
        let p = gen_points_dataset(PointsKind::Ring, 500, 0.0, 3).unwrap();
        for xy in p.chunks(2) {
            assert!((xy[0].hypot(xy[1]) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let p = gen_points_dataset(PointsKind::TwoMoons, 500, 0.0, 4).unwrap();
        for xy in p.chunks(2) {
            let outer = (xy[0].hypot(xy[1]) - 1.0).abs() < 1e-9 && xy[1] >= 0.0;
            let inner = ((xy[0] - 1.0).hypot(xy[1] - 0.5) - 1.0).abs() < 1e-9 && xy[1] <= 0.5;
            assert!(outer || inner, "{xy:?}");
        }
    }

    #[test]
    fn gmm8_mean_is_near_origin() {
        let n = 100_000;
        let p = gen_points_dataset(PointsKind::Gmm8, n, 0.0, 5).unwrap();
        // Per-coordinate variance of the mixture: R^2/2 + sigma^2.
        let sd = (GMM8_RADIUS * GMM8_RADIUS / 2.0 + GMM8_SIGMA * GMM8_SIGMA).sqrt();
        for axis in 0..2 {
            let m = p.iter().skip(axis).step_by(2).sum::<f64>() / n as f64;
            assert!(m.abs() <= 3.0 * sd / (n as f64).sqrt(), "axis {axis}: {m}");
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        assert_eq!(
            gen_points_dataset(PointsKind::TwoMoons, 64, 0.1, 9).unwrap(),
            gen_points_dataset(PointsKind::TwoMoons, 64, 0.1, 9).unwrap()
        );
        assert_eq!(gen_blob_dataset(8, 9).unwrap(), gen_blob_dataset(8, 9).unwrap());
        assert_ne!(gen_blob_dataset(2, 9).unwrap(), gen_blob_dataset(2, 10).unwrap());
        assert!(PointsKind::parse("spiral").is_err());
        assert!(gen_points_dataset(PointsKind::Ring, 0, 0.1, 0).is_err());
        assert!(gen_blob_dataset(0, 0).is_err());
    }

    #[test]
    fn blob_labels_hold_by_construction() {
        for s in gen_blob_dataset(200, 11).unwrap() {
            assert!((4..=6).contains(&s.patch.size));
            assert!(s.patch.contains(s.salient));
            assert!(!s.patch.contains(s.nonsalient));
            assert!(s.patch.distance(s.nonsalient) >= 2);
            assert!(s.background.abs() <= 0.2);
            assert!(s.image.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(local_contrast(&s.image, s.salient) > local_contrast(&s.image, s.nonsalient));
            assert_eq!(s.patch.pixels().len(), s.patch.size * s.patch.size);
        }
    }
}
