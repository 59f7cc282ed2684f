//! Minimal RGB image type with PPM export and a couple of image metrics.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets, nominally in [0, 1].
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_ppm(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn mean_abs_error(&self, other: &RgbImage) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Peak signal-to-noise ratio in dB for a peak value of 1.
    pub fn psnr(&self, other: &RgbImage) -> f64 {
        let n = self.data.len().max(1) as f64;
        let mse = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// Sum of squared 4-neighbour discrete Laplacian responses over interior pixels.
    pub fn laplacian_energy(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        if w < 3 || h < 3 {
            return 0.0;
        }
        let at = |x: usize, y: usize, c: usize| self.data[(y * w + x) * 3 + c];
        let mut e = 0.0;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let l = at(x - 1, y, c) + at(x + 1, y, c) + at(x, y - 1, c) + at(x, y + 1, c)
                        - 4.0 * at(x, y, c);
                    e += l * l;
                }
            }
        }
        e
    }
}
