//! Helpers for square grids with a centered (DC-at-center) frequency layout.
//!
//! All image-like buffers in this crate are row-major `side * side` slices.
//! Frequency grids put DC at index `side / 2` on each axis, so the lattice
//! coordinate of index `i` is `i - side/2` and runs over
//! `-side/2 ..= side/2 - 1` for even `side`.

/// Lattice coordinates of a centered frequency axis.
pub fn centered_freqs(side: usize) -> Vec<f64> {
    let half = (side / 2) as f64;
    (0..side).map(|i| i as f64 - half).collect()
}

/// Row-major flat index.
#[inline]
pub fn idx(row: usize, col: usize, side: usize) -> usize {
    row * side + col
}

/// Mirror of a centered-layout index through DC. Maps the bin at frequency
/// `k` to the bin at `-k`; the Nyquist row/column (index 0) maps to itself.
#[inline]
pub fn mirror_index(i: usize, side: usize) -> usize {
    (2 * (side / 2)).wrapping_sub(i) % side
}

/// Swap quadrants so that the DC bin moves from index 0 to `side / 2`.
/// Self-inverse for even `side`.
pub fn fftshift<T: Copy>(data: &[T], side: usize) -> Vec<T> {
    assert_eq!(data.len(), side * side);
    let half = side / 2;
    let mut out = data.to_vec();
    for r in 0..side {
        for c in 0..side {
            let rs = (r + half) % side;
            let cs = (c + half) % side;
            out[idx(rs, cs, side)] = data[idx(r, c, side)];
        }
    }
    out
}

/// Block-average a `side x side` grid down to `out_side x out_side`.
/// `side` must be a multiple of `out_side`.
pub fn avg_pool(data: &[f64], side: usize, out_side: usize) -> Vec<f64> {
    assert_eq!(data.len(), side * side);
    assert!(out_side > 0 && side % out_side == 0);
    let f = side / out_side;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; out_side * out_side];
    for r in 0..side {
        for c in 0..side {
            out[idx(r / f, c / f, out_side)] += data[idx(r, c, side)];
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}

pub fn is_power_of_two(v: usize) -> bool {
    v != 0 && (v & (v - 1)) == 0
}
