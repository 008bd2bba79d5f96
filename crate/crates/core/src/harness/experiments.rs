//! Saliency separation, approximation agreement, state-curve agreement and
//! sample-quality statistics.

use rand::seq::index::sample;

use crate::curve::{fluctuation, normalize_curve, spearman, CurveEngine, CurveMethod, Direction, GenerationCurve, PixelSet};
use crate::error::{Error, Result};
use crate::harness::datasets::BlobSample;
use crate::model::NoisePredictor;
use crate::real::{cast_vec, Real};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRow {
    pub index: usize,
    pub salient: f64,
    pub nonsalient: f64,
}

impl SaliencyRow {
    /// Ties count as failures.
    pub fn separated(&self) -> bool {
        self.salient > self.nonsalient
    }
}

#[derive(Debug, Clone, Default)]
pub struct SaliencyReport {
    pub rows: Vec<SaliencyRow>,
    pub ties: usize,
}

impl SaliencyReport {
    pub fn fraction_separated(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.separated()).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,salient_fluctuation,nonsalient_fluctuation,separated\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.index, r.salient, r.nonsalient, r.separated() as u8));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "images,separated,ties,fraction\n{},{},{},{}\n",
            self.rows.len(),
            self.rows.iter().filter(|r| r.separated()).count(),
            self.ties,
            self.fraction_separated()
        )
    }
}

/// Fluctuation of the raw bottleneck curves at each image's salient and
/// non-salient pixel.
pub fn saliency_experiment<S: Real>(
    engine: &CurveEngine<'_, S>,
    samples: &[BlobSample],
    window_k: usize,
    t_min: usize,
) -> Result<SaliencyReport> {
    let mut report = SaliencyReport::default();
    for (index, s) in samples.iter().enumerate() {
        let x0: Vec<S> = cast_vec(&s.image);
        let dirs = [Direction::UnitPixel(s.salient.index()), Direction::UnitPixel(s.nonsalient.index())];
        let curves = engine.curves(&x0, &dirs, CurveMethod::DhRaw)?;
        let row = SaliencyRow {
            index,
            salient: fluctuation(&curves[0], window_k, t_min)?,
            nonsalient: fluctuation(&curves[1], window_k, t_min)?,
        };
        if s.salient == s.nonsalient || row.salient == row.nonsalient {
            report.ties += 1;
        }
        report.rows.push(row);
    }
    Ok(report)
}

/// Unordered method pairs in [`CurveMethod::RATES`] order.
pub fn method_pairs() -> Vec<(usize, usize)> {
    let n = CurveMethod::RATES.len();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

#[derive(Debug, Clone)]
pub struct AgreementRow {
    pub image: usize,
    pub pixel: usize,
    /// Normalized curves in [`CurveMethod::RATES`] order.
    pub curves: Vec<GenerationCurve>,
}

impl AgreementRow {
    pub fn argmax_t(&self, method: usize) -> usize {
        let c = &self.curves[method];
        c.steps[c.argmax()]
    }

    pub fn rho(&self, a: usize, b: usize) -> f64 {
        spearman(&self.curves[a].values, &self.curves[b].values)
    }

    /// Combined `step,t,<method>...` table.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step,t");
        for m in CurveMethod::RATES {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        for i in 0..self.curves[0].len() {
            s.push_str(&format!("{},{}", i + 1, self.curves[0].steps[i]));
            for c in &self.curves {
                s.push_str(&format!(",{}", c.values[i]));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct AgreementReport {
    pub rows: Vec<AgreementRow>,
}

fn method_index(m: CurveMethod) -> usize {
    CurveMethod::RATES.iter().position(|&r| r == m).expect("rate method")
}

impl AgreementReport {
    pub fn mean_rho(&self, a: CurveMethod, b: CurveMethod) -> f64 {
        let (i, j) = (method_index(a), method_index(b));
        self.rows.iter().map(|r| r.rho(i, j)).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Fraction of pixels whose curve peaks under `a` and `b` lie within `tol` timesteps.
    pub fn argmax_agreement(&self, a: CurveMethod, b: CurveMethod, tol: usize) -> f64 {
        let (i, j) = (method_index(a), method_index(b));
        let hits = self
            .rows
            .iter()
            .filter(|r| r.argmax_t(i).abs_diff(r.argmax_t(j)) <= tol)
            .count();
        hits as f64 / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,pixel");
        for m in CurveMethod::RATES {
            s.push_str(&format!(",argmax_{}", m.name()));
        }
        for (i, j) in method_pairs() {
            s.push_str(&format!(",rho_{}_{}", CurveMethod::RATES[i].name(), CurveMethod::RATES[j].name()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.image, r.pixel));
            for m in 0..CurveMethod::RATES.len() {
                s.push_str(&format!(",{}", r.argmax_t(m)));
            }
            for (i, j) in method_pairs() {
                s.push_str(&format!(",{}", r.rho(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self, tol: usize) -> String {
        let mut s = String::from("method_a,method_b,mean_rho,argmax_within_tol\n");
        for (i, j) in method_pairs() {
            let (a, b) = (CurveMethod::RATES[i], CurveMethod::RATES[j]);
            s.push_str(&format!(
                "{},{},{},{}\n",
                a.name(),
                b.name(),
                self.mean_rho(a, b),
                self.argmax_agreement(a, b, tol)
            ));
        }
        s
    }
}

/// All four normalized rate curves at `n_pixels` random pixels, spread
/// round-robin over `images` and distinct within each image.
pub fn agreement_experiment<S: Real>(
    engine: &CurveEngine<'_, S>,
    images: &[Vec<S>],
    n_pixels: usize,
    seed: u64,
) -> Result<AgreementReport> {
    if images.is_empty() || n_pixels == 0 {
        return Err(Error::param("agreement needs at least one image and one pixel"));
    }
    let dim = engine.model().dim();
    let mut rng = stream(seed, Stream::Experiment);
    let mut report = AgreementReport::default();
    for (img, x0) in images.iter().enumerate() {
        let count = n_pixels / images.len() + usize::from(img < n_pixels % images.len());
        if count == 0 {
            continue;
        }
        if count > dim {
            return Err(Error::param("more pixels requested than the image has"));
        }
        let mut pixels = sample(&mut rng, dim, count).into_vec();
        pixels.sort_unstable();
        let dirs: Vec<Direction<S>> = pixels.iter().map(|&p| Direction::UnitPixel(p)).collect();
        let per_method: Vec<Vec<GenerationCurve>> = CurveMethod::RATES
            .iter()
            .map(|&m| engine.curves(x0, &dirs, m))
            .collect::<Result<_>>()?;
        for (k, &pixel) in pixels.iter().enumerate() {
            let curves = per_method
                .iter()
                .map(|cs| normalize_curve(&cs[k]))
                .collect::<Result<Vec<_>>>()?;
            report.rows.push(AgreementRow { image: img, pixel, curves });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateAgreementRow {
    pub index: usize,
    pub state_argmax_t: usize,
    pub rate_argmax_t: usize,
}

/// Peak of the state curve against the peak of the marginalized raw rate
/// curve over each object's patch.
pub fn state_agreement<S: Real>(engine: &CurveEngine<'_, S>, samples: &[BlobSample]) -> Result<Vec<StateAgreementRow>> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let x0: Vec<S> = cast_vec(&s.image);
            let set = PixelSet::uniform(s.patch.pixels())?;
            let state = engine.state_curve(&x0, &set)?;
            let rate = engine.marginalized_curve(&x0, &set, CurveMethod::DhRaw)?;
            Ok(StateAgreementRow {
                index,
                state_argmax_t: state.steps[state.argmax()],
                rate_argmax_t: rate.steps[rate.argmax()],
            })
        })
        .collect()
}

/// Energy distance (V-statistic) between two point sets of dimension `dim`,
/// both flattened row-major.
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.is_empty() || b.is_empty() || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::param("energy distance needs non-empty sets of whole points"));
    }
    let mean_dist = |x: &[f64], y: &[f64]| -> f64 {
        let mut total = 0.0;
        for p in x.chunks_exact(dim) {
            for q in y.chunks_exact(dim) {
                total += p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        total / ((x.len() / dim) * (y.len() / dim)) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}
