//! Desk-scale evaluation: template detection, object-presence score, box
//! alignment, layout diversity and saturation statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BBox, PrototypeLibrary, Templates};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no images to score")]
    Empty,
    #[error("layout diversity needs groups of at least two images, got {0}")]
    SingletonGroup(usize),
    #[error("prompt has {entities} entities but {boxes} boxes")]
    BoxCount { entities: usize, boxes: usize },
    #[error("latent shape {0:?} does not match the detector")]
    Shape(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub entity: usize,
    /// `(x, y)` in cells, sub-cell refined.
    pub centroid: (f64, f64),
    pub score: f64,
}

/// Matched-filter detector for the library's blob entities.
#[derive(Debug, Clone)]
pub struct Detector {
    templates: Templates,
    /// Unit-peak blob kernel, `(2r + 1)^2`.
    kernel: Vec<f64>,
    radius: usize,
    pub threshold: f64,
}

impl Detector {
    pub fn new(templates: Templates, blob_sigma: f64, threshold: f64) -> Self {
        let radius = (3.0 * blob_sigma).ceil() as usize;
        let n = 2 * radius + 1;
        let inv = 1.0 / (2.0 * blob_sigma * blob_sigma);
        let kernel = (0..n * n)
            .map(|i| {
                let dx = (i % n) as f64 - radius as f64;
                let dy = (i / n) as f64 - radius as f64;
                (-(dx * dx + dy * dy) * inv).exp()
            })
            .collect();
        Self {
            templates,
            kernel,
            radius,
            threshold,
        }
    }

    /// Threshold at half the clean self-response.
    pub fn from_library(library: &PrototypeLibrary) -> Self {
        Self::new(
            library.templates.clone(),
            library.config.blob_sigma,
            0.5 * library.self_response(),
        )
    }

    /// Response map of one entity: template projection correlated with the
    /// blob kernel and normalized by the in-grid kernel energy, so a clean
    /// isolated blob of peak `A` responds with exactly `A` at its center.
    fn response(&self, z0: &Tensor, entity: usize) -> Vec<f64> {
        let (c, h, w) = (z0.shape()[0], z0.shape()[1], z0.shape()[2]);
        let g = self.templates.signature(entity);
        let hw = h * w;
        let proj: Vec<f64> = (0..hw)
            .map(|p| (0..c).map(|k| z0.data()[k * hw + p] * g[k]).sum())
            .collect();
        let r = self.radius as isize;
        let n = 2 * self.radius + 1;
        let mut out = vec![0.0; hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let k = self.kernel[((dy + r) as usize) * n + (dx + r) as usize];
                        num += k * proj[yy as usize * w + xx as usize];
                        den += k * k;
                    }
                }
                out[y as usize * w + x as usize] = num / den;
            }
        }
        out
    }

    /// Local maxima (3x3) above threshold for every vocabulary entity. At a
    /// location claimed by several entities within one cell only the
    /// strongest survives, so fused blobs count once.
    pub fn detect(&self, z0: &Tensor) -> Result<Vec<Detection>> {
        let shape = z0.shape();
        if shape.len() != 3 || shape[0] != self.templates.channels() {
            return Err(MetricsError::Shape(shape.to_vec()));
        }
        let (h, w) = (shape[1], shape[2]);
        let responses: Vec<Vec<f64>> = (0..self.templates.vocab())
            .map(|e| self.response(z0, e))
            .collect();
        let mut peaks = Vec::new();
        for (e, r) in responses.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let v = r[y * w + x];
                    if v < self.threshold || !is_local_max(r, h, w, x, y) {
                        continue;
                    }
                    peaks.push(Detection {
                        entity: e,
                        centroid: refine(r, h, w, x, y),
                        score: v,
                    });
                }
            }
        }
        let kept = peaks
            .iter()
            .filter(|d| {
                !peaks.iter().any(|o| {
                    o.entity != d.entity
                        && (o.centroid.0.round() - d.centroid.0.round()).abs() <= 1.0
                        && (o.centroid.1.round() - d.centroid.1.round()).abs() <= 1.0
                        && (o.score > d.score || (o.score == d.score && o.entity < d.entity))
                })
            })
            .copied()
            .collect();
        Ok(kept)
    }

    /// Strongest detection of each listed entity.
    pub fn best(&self, z0: &Tensor, entities: &[usize]) -> Result<Vec<Option<Detection>>> {
        let dets = self.detect(z0)?;
        Ok(entities
            .iter()
            .map(|&e| {
                dets.iter()
                    .filter(|d| d.entity == e)
                    .copied()
                    .max_by(|a, b| a.score.total_cmp(&b.score))
            })
            .collect())
    }
}

fn is_local_max(r: &[f64], h: usize, w: usize, x: usize, y: usize) -> bool {
    let v = r[y * w + x];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (xx, yy) = (x as isize + dx, y as isize + dy);
            if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                continue;
            }
            let o = r[yy as usize * w + xx as usize];
            // plateaus keep only their first cell in row-major order
            let earlier = (dy, dx) < (0, 0);
            if o > v || (o == v && earlier) {
                return false;
            }
        }
    }
    true
}

/// Parabolic sub-cell offset along each axis, clamped to half a cell.
fn refine(r: &[f64], h: usize, w: usize, x: usize, y: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| r[yy * w + xx];
    let offset = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) => {
            let den = a - 2.0 * mid + b;
            if den < 0.0 {
                (0.5 * (a - b) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let v = at(x, y);
    let dx = offset(
        (x > 0).then(|| at(x - 1, y)),
        v,
        (x + 1 < w).then(|| at(x + 1, y)),
    );
    let dy = offset(
        (y > 0).then(|| at(x, y - 1)),
        v,
        (y + 1 < h).then(|| at(x, y + 1)),
    );
    (x as f64 + dx, y as f64 + dy)
}

/// Fraction of images in which every prompt entity is detected.
pub fn tiam_score<'a, I>(detector: &Detector, images: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [usize], &'a Tensor)>,
{
    let (mut n, mut hits) = (0usize, 0usize);
    for (entities, z0) in images {
        n += 1;
        if detector.best(z0, entities)?.iter().all(Option::is_some) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(hits as f64 / n as f64)
}

/// Mean over entities and images of 1 when the entity's strongest detection
/// lies inside its box, 0 otherwise (including when undetected).
pub fn box_alignment<'a, I>(detector: &Detector, images: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [usize], &'a [BBox], &'a Tensor)>,
{
    let (mut n, mut hits) = (0usize, 0usize);
    for (entities, boxes, z0) in images {
        if boxes.len() != entities.len() {
            return Err(MetricsError::BoxCount {
                entities: entities.len(),
                boxes: boxes.len(),
            });
        }
        for (det, b) in detector.best(z0, entities)?.iter().zip(boxes) {
            n += 1;
            if let Some(d) = det {
                if b.contains(d.centroid.0, d.centroid.1) {
                    hits += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutDiversity {
    /// Mean over groups of the mean pairwise centroid distance.
    pub mean: f64,
    pub pairs_used: usize,
    /// Pairs dropped because an entity went undetected in either image.
    pub pairs_skipped: usize,
}

/// Layout spread within groups of images of the same prompt.
pub fn layout_diversity<'a, G>(detector: &Detector, groups: G) -> Result<LayoutDiversity>
where
    G: IntoIterator<Item = (&'a [usize], Vec<&'a Tensor>)>,
{
    let mut group_means = Vec::new();
    let (mut used, mut skipped) = (0usize, 0usize);
    for (entities, images) in groups {
        if images.len() < 2 {
            return Err(MetricsError::SingletonGroup(images.len()));
        }
        let found = images
            .iter()
            .map(|z| detector.best(z, entities))
            .collect::<Result<Vec<_>>>()?;
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..found.len() {
            for j in i + 1..found.len() {
                let pairs: Option<Vec<_>> = found[i]
                    .iter()
                    .zip(&found[j])
                    .map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
                    .collect();
                match pairs {
                    Some(p) if !p.is_empty() => {
                        let d: f64 = p
                            .iter()
                            .map(|(a, b)| {
                                (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1)
                            })
                            .sum::<f64>()
                            / p.len() as f64;
                        total += d;
                        count += 1;
                    }
                    _ => skipped += 1,
                }
            }
        }
        used += count;
        if count > 0 {
            group_means.push(total / count as f64);
        }
    }
    if group_means.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(LayoutDiversity {
        mean: group_means.iter().sum::<f64>() / group_means.len() as f64,
        pairs_used: used,
        pairs_skipped: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of elements with `|v| > 3 sigma_ref`.
    pub beyond: f64,
}

pub fn saturation_stats(t: &Tensor, sigma_ref: f64) -> Saturation {
    let lim = 3.0 * sigma_ref;
    let beyond = t.data().iter().filter(|v| v.abs() > lim).count() as f64 / t.len().max(1) as f64;
    Saturation {
        std: t.std(),
        min: t.min(),
        max: t.max(),
        beyond,
    }
}
