//! The preprocessing operator: Hann window, 2D DFT, squared modulus.
//!
//! Output spectra use the centered (DC at `side/2`) layout so that the
//! point-symmetry of real-input spectra is an index mirror. The squared
//! modulus is symmetrized over exact mirror pairs, which pins the
//! conjugate-symmetry identity down to the last bit without affecting
//! anything above rounding level.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::fft_2d;
use crate::grid::{fftshift, idx, mirror_index};
use crate::optics::Ronchigram;

/// Preprocessed Fourier power spectrum of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub values: Vec<f64>,
    pub side: usize,
}

impl PowerSpectrum {
    pub fn new(values: Vec<f64>, side: usize) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::Shape(format!(
                "spectrum has {} values for side {}",
                values.len(),
                side
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape("spectrum values must be finite and >= 0".into()));
        }
        Ok(Self { values, side })
    }

    /// Relative L2 distance to another spectrum of the same shape.
    pub fn relative_l2(&self, other: &PowerSpectrum) -> f64 {
        assert_eq!(self.side, other.side);
        let diff: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let norm: f64 = self.values.iter().map(|v| v * v).sum();
        if norm == 0.0 {
            return if diff == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (diff / norm).sqrt()
    }
}

/// Preprocessing options. `log_compress` applies log1p to the spectrum for
/// dynamic-range compression before encoding; the window and transform are
/// fixed.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    pub log_compress: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { log_compress: true }
    }
}

/// Hann taper weight for index `i` on an axis of length `side`:
/// w(i) = 0.5 (1 - cos(2 pi i / (side - 1))). Zero at both borders.
pub fn hann_weight(i: usize, side: usize) -> f64 {
    if side < 2 {
        return 1.0;
    }
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (side - 1) as f64).cos())
}

/// Element-wise separable Hann window: out[i,j] = in[i,j] w(i) w(j).
pub fn hann_window(image: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows != cols {
        return Err(Error::Shape(format!("hann window needs a square grid, got {rows}x{cols}")));
    }
    if image.len() != rows * cols {
        return Err(Error::Shape(format!(
            "image has {} values for {rows}x{cols}",
            image.len()
        )));
    }
    let side = rows;
    let w: Vec<f64> = (0..side).map(|i| hann_weight(i, side)).collect();
    let mut out = vec![0.0; image.len()];
    for r in 0..side {
        for c in 0..side {
            out[idx(r, c, side)] = image[idx(r, c, side)] * w[r] * w[c];
        }
    }
    Ok(out)
}

/// Squared modulus of the unnormalized 2D DFT, DC centered. Mirror bins are
/// averaged into exact equality (they already agree up to rounding for real
/// inputs).
pub fn power_spectrum(image: &[f64], rows: usize, cols: usize) -> Result<PowerSpectrum> {
    if rows != cols {
        return Err(Error::Shape(format!("power spectrum needs a square grid, got {rows}x{cols}")));
    }
    if image.len() != rows * cols {
        return Err(Error::Shape(format!(
            "image has {} values for {rows}x{cols}",
            image.len()
        )));
    }
    let side = rows;
    let mut buf: Vec<Complex<f64>> = image.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_2d(&mut buf, side);
    let mut values: Vec<f64> = fftshift(&buf, side).iter().map(|v| v.norm_sqr()).collect();
    symmetrize_mirror_pairs(&mut values, side);
    PowerSpectrum::new(values, side)
}

fn symmetrize_mirror_pairs(values: &mut [f64], side: usize) {
    for r in 0..side {
        for c in 0..side {
            let i = idx(r, c, side);
            let j = idx(mirror_index(r, side), mirror_index(c, side), side);
            if i < j {
                let m = 0.5 * (values[i] + values[j]);
                values[i] = m;
                values[j] = m;
            }
        }
    }
}

/// The composite operator: Hann window, 2D DFT, squared modulus, then
/// optional log1p compression.
pub fn preprocess(y: &Ronchigram, config: &PreprocessConfig) -> Result<PowerSpectrum> {
    let as_real: Vec<f64> = y.counts.iter().map(|&c| c as f64).collect();
    let windowed = hann_window(&as_real, y.side, y.side)?;
    let mut spectrum = power_spectrum(&windowed, y.side, y.side)?;
    if config.log_compress {
        for v in &mut spectrum.values {
            *v = v.ln_1p();
        }
    }
    Ok(spectrum)
}
