//! Template-matching detector for blob presence in a generated latent.

use serde::{Deserialize, Serialize};

use crate::nursing::Latent;

/// Presence threshold on the correlation score.
pub const OCCURRENCE_THRESHOLD: f64 = 0.5;

/// Isotropic Gaussian bump of unit amplitude on one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobTemplate {
    pub channel: usize,
    pub radius: usize,
    pub sigma: f64,
}

impl BlobTemplate {
    pub fn new(channel: usize, radius: usize) -> Self {
        Self { channel, radius, sigma: radius as f64 / 2.0 }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Bump value at offset `(di, dj)` from the center.
    pub fn value_at(&self, di: f64, dj: f64) -> f64 {
        (-(di * di + dj * dj) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn patch(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let mut out = Vec::with_capacity(self.side() * self.side());
        for di in -r..=r {
            for dj in -r..=r {
                out.push(self.value_at(di as f64, dj as f64));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub present: bool,
    pub score: f64,
    pub center: Option<(usize, usize)>,
}

fn centered(values: &[f64]) -> (Vec<f64>, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let c: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (c, norm)
}

/// Correlation score at every admissible center, row-major.
///
/// The score is the zero-mean inner product divided by
/// `|T| * max(|P|, |T|)`, so faint patches score proportionally lower
/// instead of being amplified to full correlation.
fn score_map(image: &Latent, template: &BlobTemplate) -> Vec<(usize, usize, f64)> {
    let (c, h, w) = image.shape();
    let side = template.side();
    if template.channel >= c || side > h || side > w {
        return Vec::new();
    }
    let (t, t_norm) = centered(&template.patch());
    let plane = image.channel(template.channel);
    let r = template.radius;
    let mut out = Vec::with_capacity((h - side + 1) * (w - side + 1));
    let mut patch = vec![0.0; side * side];
    for ci in r..h - r {
        for cj in r..w - r {
            for a in 0..side {
                let row = (ci - r + a) * w + cj - r;
                patch[a * side..(a + 1) * side].copy_from_slice(&plane[row..row + side]);
            }
            let (p, p_norm) = centered(&patch);
            let denom = t_norm * p_norm.max(t_norm);
            let score = if denom > 0.0 {
                p.iter().zip(&t).map(|(x, y)| x * y).sum::<f64>() / denom
            } else {
                0.0
            };
            out.push((ci, cj, score));
        }
    }
    out
}

/// Best correlation over all centers; present iff the peak reaches the threshold.
pub fn blob_occurrence(image: &Latent, template: &BlobTemplate) -> Occurrence {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, j, s) in score_map(image, template) {
        if best.is_none_or(|b| s > b.2) {
            best = Some((i, j, s));
        }
    }
    match best {
        Some((i, j, s)) if s > 0.0 => Occurrence { present: s >= OCCURRENCE_THRESHOLD, score: s, center: Some((i, j)) },
        _ => Occurrence { present: false, score: 0.0, center: None },
    }
}

/// Distinct detections at or above `threshold`, strongest first.
///
/// Centers within `radius` (Chebyshev) of a stronger detection are suppressed.
pub fn count_occurrences(image: &Latent, template: &BlobTemplate, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut candidates: Vec<_> = score_map(image, template).into_iter().filter(|c| c.2 >= threshold).collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
    let r = template.radius;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.0.abs_diff(c.0) > r || k.1.abs_diff(c.1) > r) {
            kept.push(c);
        }
    }
    kept
}
