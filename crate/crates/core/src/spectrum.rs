//! 2-D discrete Fourier transforms with a centred (fft-shifted) layout.
//!
//! Forward transforms are unnormalized; inverses divide by the sample count
//! so that `inverse(forward(x)) == x`.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::scalar::Real;

pub type Cx<T> = Complex<T>;

/// In-place 2-D transform of a row-major `width × height` buffer.
pub fn fft2<T: Real>(buf: &mut [Cx<T>], width: usize, height: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(width, direction);
    let mut scratch = vec![Cx::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let col_fft = planner.plan_fft(height, direction);
    let mut col = vec![Cx::default(); height];
    scratch.resize(col_fft.get_inplace_scratch_len(), Cx::default());
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    if direction == FftDirection::Inverse {
        let norm = T::one() / T::from_count(width * height);
        buf.iter_mut().for_each(|v| *v = *v * norm);
    }
}

/// Swaps quadrants so that the zero frequency lands at `(side/2, side/2)`.
/// For even sides the shift is its own inverse.
pub fn fftshift<V: Copy>(buf: &[V], side: usize) -> Vec<V> {
    debug_assert!(side % 2 == 0);
    let h = side / 2;
    let mut out = buf.to_vec();
    for y in 0..side {
        for x in 0..side {
            out[((y + h) % side) * side + (x + h) % side] = buf[y * side + x];
        }
    }
    out
}

/// Centred spectrum of a real square field. Entry `(row, col)` holds
/// frequency `(row − side/2, col − side/2)`.
pub fn centered_spectrum<T: Real>(field: &[T], side: usize) -> Vec<Cx<T>> {
    let mut buf: Vec<Cx<T>> = field.iter().map(|&v| Cx::new(v, T::zero())).collect();
    fft2(&mut buf, side, side, FftDirection::Forward);
    fftshift(&buf, side)
}

/// Inverse of [`centered_spectrum`]; returns the real part and the largest
/// imaginary residue.
pub fn inverse_centered<T: Real>(spectrum: &[Cx<T>], side: usize) -> (Vec<T>, T) {
    let mut buf = fftshift(spectrum, side);
    fft2(&mut buf, side, side, FftDirection::Inverse);
    let residue = buf.iter().fold(T::zero(), |m, c| m.max(c.im.abs()));
    (buf.into_iter().map(|c| c.re).collect(), residue)
}

/// Index of the Hermitian mirror of centred bin `(row, col)`.
#[inline]
pub fn mirror_index(row: usize, col: usize, side: usize) -> usize {
    ((side - row) % side) * side + (side - col) % side
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(field: &[f64], side: usize) -> Vec<Cx<f64>> {
        let n = side as f64;
        let mut out = vec![Cx::new(0.0, 0.0); side * side];
        for ky in 0..side {
            for kx in 0..side {
                let mut acc = Cx::new(0.0, 0.0);
                for y in 0..side {
                    for x in 0..side {
                        let phase = -2.0 * std::f64::consts::PI * ((ky * y) as f64 + (kx * x) as f64) / n;
                        acc += Cx::from_polar(field[y * side + x], phase);
                    }
                }
                out[ky * side + kx] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft_and_centres_dc() {
        let side = 8;
        let field: Vec<f64> = (0..side * side).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let spec = centered_spectrum(&field, side);
        let naive = fftshift(&naive_dft(&field, side), side);
        for (a, b) in spec.iter().zip(&naive) {
            assert!((a - b).norm() < 1e-9);
        }
        let dc: f64 = field.iter().sum();
        assert!((spec[(side / 2) * side + side / 2].re - dc).abs() < 1e-9);
    }

    #[test]
    fn round_trip_is_identity() {
        let side = 16;
        let field: Vec<f32> = (0..side * side).map(|i| (i as f32 * 0.37).sin()).collect();
        let (back, residue) = inverse_centered(&centered_spectrum(&field, side), side);
        assert!(residue < 1e-4);
        for (a, b) in field.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn real_fields_are_hermitian() {
        let side = 8;
        let field: Vec<f64> = (0..side * side).map(|i| (i as f64).cos()).collect();
        let spec = centered_spectrum(&field, side);
        for r in 0..side {
            for c in 0..side {
                let m = spec[mirror_index(r, c, side)];
                assert!((spec[r * side + c] - m.conj()).norm() < 1e-9);
            }
        }
    }
}
