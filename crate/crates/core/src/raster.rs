//! Single-plane raster primitives: resampling, separable filtering and
//! block averaging. Planes are row-major `width × height` slices.

use crate::scalar::Real;

/// Half-sample symmetric boundary (`d c b a | a b c d | d c b a`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Normalized 1-D Gaussian taps with half-width `ceil(3σ)`.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    gaussian_kernel_with_radius(sigma, radius as usize)
}

pub(crate) fn gaussian_kernel_with_radius<T: Real>(sigma: f64, radius: usize) -> Vec<T> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::lit(w / sum)).collect()
}

/// Separable convolution with a symmetric odd-length kernel, reflected edges.
pub fn convolve_separable<T: Real>(plane: &[T], width: usize, height: usize, kernel: &[T]) -> Vec<T> {
    debug_assert_eq!(plane.len(), width * height);
    debug_assert!(kernel.len() % 2 == 1);
    let r = (kernel.len() / 2) as isize;
    let ru = r as usize;
    let mut tmp = vec![T::zero(); plane.len()];
    let mut padded = vec![T::zero(); width + 2 * ru];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = row[reflect(j as isize - r, width)];
        }
        let out = &mut tmp[y * width..(y + 1) * width];
        for (k, &w) in kernel.iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(&padded[k..k + width]) {
                *o = *o + w * s;
            }
        }
    }
    let mut out = vec![T::zero(); plane.len()];
    for y in 0..height {
        let yi = y as isize;
        let dst = &mut out[y * width..(y + 1) * width];
        for (k, &w) in kernel.iter().enumerate() {
            let sy = reflect(yi + k as isize - r, height);
            let src = &tmp[sy * width..(sy + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + w * s;
            }
        }
    }
    out
}

/// Gaussian blur where `radius` is the standard deviation in pixels.
pub fn gaussian_blur<T: Real>(plane: &[T], width: usize, height: usize, radius: f64) -> Vec<T> {
    convolve_separable(plane, width, height, &gaussian_kernel::<T>(radius))
}

/// 3×3 mean filter with reflected edges.
pub fn box3<T: Real>(plane: &[T], width: usize, height: usize) -> Vec<T> {
    let third = T::one() / T::lit(3.0);
    convolve_separable(plane, width, height, &[third, third, third])
}

/// Bilinear resampling with pixel-centre alignment and clamped edges.
pub fn resize_bilinear<T: Real>(
    plane: &[T],
    width: usize,
    height: usize,
    out_width: usize,
    out_height: usize,
) -> Vec<T> {
    if width == out_width && height == out_height {
        return plane.to_vec();
    }
    let xs = sample_positions(width, out_width);
    let ys = sample_positions(height, out_height);
    let mut out = Vec::with_capacity(out_width * out_height);
    for &(y0, y1, fy) in &ys {
        let fy = T::lit(fy);
        let r0 = &plane[y0 * width..(y0 + 1) * width];
        let r1 = &plane[y1 * width..(y1 + 1) * width];
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

/// Averages non-overlapping `factor × factor` blocks.
pub fn block_mean<T: Real>(plane: &[T], width: usize, height: usize, factor: usize) -> Vec<T> {
    let (ow, oh) = (width / factor, height / factor);
    let norm = T::from_count(factor * factor);
    let mut out = vec![T::zero(); ow * oh];
    for y in 0..oh * factor {
        let row = &plane[y * width..y * width + ow * factor];
        let dst = &mut out[(y / factor) * ow..(y / factor + 1) * ow];
        for (bx, chunk) in row.chunks_exact(factor).enumerate() {
            dst[bx] = chunk.iter().fold(dst[bx], |a, &v| a + v);
        }
    }
    out.iter_mut().for_each(|v| *v = *v / norm);
    out
}

pub fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &v| a + v) / T::from_count(xs.len())
}

/// Population variance.
pub fn variance<T: Real>(xs: &[T]) -> T {
    let m = mean(xs);
    xs.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / T::from_count(xs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        // kernel wider than the signal wraps through more than one mirror
        assert_eq!(reflect(-9, 4), 0);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel::<f64>(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let plane = vec![0.3f64; 20 * 10];
        for v in gaussian_blur(&plane, 20, 10, 7.65) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_matches_direct_2d_sum() {
        // brute-force 2-D convolution oracle with explicit reflection
        let (w, h) = (9usize, 7usize);
        let plane: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 11) as f64) / 11.0).collect();
        let k = gaussian_kernel::<f64>(1.0);
        let r = (k.len() / 2) as isize;
        let fast = convolve_separable(&plane, w, h, &k);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = reflect(x as isize + dx, w);
                        let sy = reflect(y as isize + dy, h);
                        acc += k[(dy + r) as usize] * k[(dx + r) as usize] * plane[sy * w + sx];
                    }
                }
                assert!((acc - fast[y * w + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_identity_and_dimensions() {
        let plane: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        assert_eq!(resize_bilinear(&plane, 4, 4, 4, 4), plane);
        assert_eq!(resize_bilinear(&plane, 4, 4, 8, 8).len(), 64);
        assert_eq!(resize_bilinear(&plane, 4, 4, 2, 2).len(), 4);
    }

    #[test]
    fn upsample_then_block_mean_interior_filter() {
        // a single impulse through ×4 bilinear + 4×4 box average spreads as
        // [1/8, 3/4, 1/8] per axis away from the borders
        let mut plane = vec![0.0f64; 64];
        plane[3 * 8 + 3] = 1.0;
        let up = resize_bilinear(&plane, 8, 8, 32, 32);
        let down = block_mean(&up, 32, 32, 4);
        let taps = [0.125, 0.75, 0.125];
        for dy in 0..3 {
            for dx in 0..3 {
                let v = down[(2 + dy) * 8 + 2 + dx];
                assert!((v - taps[dy] * taps[dx]).abs() < 1e-12, "{dy} {dx} {v}");
            }
        }
    }

    #[test]
    fn block_mean_averages() {
        let plane = vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0];
        assert_eq!(block_mean(&plane, 4, 2, 2), vec![2.0, 6.0]);
    }
}
