//! Thin 2D FFT wrappers over `rustfft` for square complex buffers.
//!
//! Transforms are unnormalized in the forward direction; the inverse divides
//! by the pixel count so that `ifft_2d(fft_2d(x)) == x` up to rounding.

use num_complex::Complex;
use rustfft::FftPlanner;

/// In-place forward 2D FFT of a row-major `side x side` buffer.
pub fn fft_2d(data: &mut [Complex<f64>], side: usize) {
    transform(data, side, rustfft::FftDirection::Forward);
}

/// In-place inverse 2D FFT, normalized by `1 / side^2`.
pub fn ifft_2d(data: &mut [Complex<f64>], side: usize) {
    transform(data, side, rustfft::FftDirection::Inverse);
    let scale = 1.0 / (side * side) as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

fn transform(data: &mut [Complex<f64>], side: usize, dir: rustfft::FftDirection) {
    assert_eq!(data.len(), side * side);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft(side, dir);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    // Rows.
    for row in data.chunks_exact_mut(side) {
        fft.process_with_scratch(row, &mut scratch);
    }
    // Columns, via transpose-process-transpose.
    let mut t = transpose(data, side);
    for row in t.chunks_exact_mut(side) {
        fft.process_with_scratch(row, &mut scratch);
    }
    let back = transpose(&t, side);
    data.copy_from_slice(&back);
}

fn transpose(data: &[Complex<f64>], side: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::default(); data.len()];
    for r in 0..side {
        for c in 0..side {
            out[c * side + r] = data[r * side + c];
        }
    }
    out
}
