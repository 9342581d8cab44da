//! Grayscale heatmaps, latent frames and loss plots as PGM (P5) or PNG.
//!
//! Heatmaps are scaled per map: `floor(255 * (v - min) / (max - min))`,
//! and a constant map renders as uniform mid-gray 128.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::attention::{Grid2D, NormalizedMap, TokenMap};
use crate::error::{Error, Result};
use crate::nursing::Latent;

/// An 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pgm") => Ok(ImageFormat::Pgm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::InvalidInput(format!(
                "cannot infer image format from '{}' (use .pgm or .png)",
                path.display()
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

impl GrayImage {
    pub fn encode(&self, format: ImageFormat) -> Result<Vec<u8>> {
        match format {
            ImageFormat::Pgm => {
                let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
                out.extend_from_slice(&self.pixels);
                Ok(out)
            }
            ImageFormat::Png => {
                let mut out = Vec::new();
                PngEncoder::new(&mut out)
                    .write_image(&self.pixels, self.width as u32, self.height as u32, ExtendedColorType::L8)
                    .map_err(|e| Error::InvalidInput(format!("png encoding failed: {e}")))?;
                Ok(out)
            }
        }
    }

    /// Writes with the format implied by the path's extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode(ImageFormat::from_path(path)?)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Per-map min-max scaling to bytes, rounding down.
pub fn scale_to_bytes(values: &[f64]) -> Vec<u8> {
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(max > min) {
        return vec![128; values.len()];
    }
    values
        .iter()
        // Dividing first keeps the maximum at exactly 255.
        .map(|&v| (255.0 * ((v - min) / (max - min))).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Anything that can be drawn as a heatmap.
pub trait Heatmap {
    fn grid(&self) -> &Grid2D;
}

impl Heatmap for Grid2D {
    fn grid(&self) -> &Grid2D {
        self
    }
}

impl Heatmap for TokenMap {
    fn grid(&self) -> &Grid2D {
        &self.grid
    }
}

impl Heatmap for NormalizedMap {
    fn grid(&self) -> &Grid2D {
        &self.grid
    }
}

pub fn heatmap_image(map: &impl Heatmap) -> GrayImage {
    let g = map.grid();
    GrayImage { width: g.width(), height: g.height(), pixels: scale_to_bytes(g.values()) }
}

pub fn render_heatmap(map: &impl Heatmap, path: &Path) -> Result<()> {
    heatmap_image(map).save(path)
}

/// Channels side by side with a one-pixel gap, scaled together.
pub fn latent_image(z: &Latent) -> GrayImage {
    let (c, h, w) = z.shape();
    let width = c * w + c.saturating_sub(1);
    let min = z.values().iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let mut values = vec![min; width * h];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                values[i * width + ch * (w + 1) + j] = z.get(ch, i, j);
            }
        }
    }
    GrayImage { width, height: h, pixels: scale_to_bytes(&values) }
}

fn plot_line(pixels: &mut [u8], width: usize, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        pixels[y as usize * width + x as usize] = 0;
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Black polyline on white; the vertical range spans the finite values.
pub fn loss_plot(values: &[f64], width: usize, height: usize) -> Result<GrayImage> {
    if width < 2 || height < 2 {
        return Err(Error::Parameter("plot needs at least 2x2 pixels".into()));
    }
    let mut pixels = vec![255u8; width * height];
    let finite: Vec<(usize, f64)> = values.iter().copied().enumerate().filter(|(_, v)| v.is_finite()).collect();
    if !finite.is_empty() {
        let (min, max) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, v)| (a.min(v), b.max(v)));
        let n = values.len().max(2) - 1;
        let point = |k: usize, v: f64| -> (i64, i64) {
            let x = (k as f64 / n as f64 * (width - 1) as f64).round() as i64;
            let frac = if max > min { (v - min) / (max - min) } else { 0.5 };
            let y = ((1.0 - frac) * (height - 1) as f64).round() as i64;
            (x, y)
        };
        let mut prev = point(finite[0].0, finite[0].1);
        plot_line(&mut pixels, width, prev, prev);
        for &(k, v) in &finite[1..] {
            let p = point(k, v);
            plot_line(&mut pixels, width, prev, p);
            prev = p;
        }
    }
    Ok(GrayImage { width, height, pixels })
}
