//! Canny edge detection on a single-channel image.

use super::{BinaryMask, RasterImage};

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn convolve_separable(img: &RasterImage, kernel: &[f64]) -> RasterImage {
    let radius = kernel.len() / 2;
    let (w, h) = (img.width as isize, img.height as isize);
    let clamp = |v: isize, max: isize| v.clamp(0, max - 1) as usize;
    let mut tmp = RasterImage::new(img.width, img.height, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut sum = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + i as isize - radius as isize, w);
                sum += k * img.get(sx, y, 0) as f64;
            }
            tmp.set(x, y, 0, sum as f32);
        }
    }
    let mut out = RasterImage::new(img.width, img.height, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut sum = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + i as isize - radius as isize, h);
                sum += k * tmp.get(x, sy, 0) as f64;
            }
            out.set(x, y, 0, sum as f32);
        }
    }
    out
}

/// Canny: Gaussian smooth, Sobel gradients, non-max suppression, hysteresis.
/// Thresholds apply to Sobel magnitude normalized so a unit step edge reads
/// as 1.0.
pub fn detect_edges(luminance: &RasterImage, sigma: f64, low: f64, high: f64) -> BinaryMask {
    assert_eq!(luminance.channels, 1);
    assert!(low >= 0.0 && low <= high);
    let (w, h) = (luminance.width, luminance.height);
    let mut out = BinaryMask::new(w, h);
    if w < 3 || h < 3 {
        return out;
    }
    let smooth = convolve_separable(luminance, &gaussian_kernel(sigma));

    let mut mag = vec![0.0f64; w * h];
    let mut dir = vec![0u8; w * h];
    let at = |x: usize, y: usize| smooth.get(x.min(w - 1), y.min(h - 1), 0) as f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1))
                / 4.0;
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1))
                / 4.0;
            let m = (gx * gx + gy * gy).sqrt();
            mag[y * w + x] = m;
            // Quantize gradient direction into 4 sectors.
            let angle = gy.atan2(gx).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            dir[y * w + x] = if !(22.5..157.5).contains(&a) {
                0 // horizontal gradient: compare left/right
            } else if a < 67.5 {
                1 // diagonal
            } else if a < 112.5 {
                2 // vertical gradient: compare up/down
            } else {
                3 // anti-diagonal
            };
        }
    }

    // Non-maximum suppression.
    let mut strong = Vec::new();
    let mut candidate = vec![false; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = mag[y * w + x];
            if m < low {
                continue;
            }
            let (n1, n2) = match dir[y * w + x] {
                0 => (mag[y * w + x - 1], mag[y * w + x + 1]),
                1 => (mag[(y - 1) * w + x - 1], mag[(y + 1) * w + x + 1]),
                2 => (mag[(y - 1) * w + x], mag[(y + 1) * w + x]),
                _ => (mag[(y - 1) * w + x + 1], mag[(y + 1) * w + x - 1]),
            };
            if m >= n1 && m >= n2 {
                candidate[y * w + x] = true;
                if m >= high {
                    strong.push(y * w + x);
                    out.bits[y * w + x] = true;
                }
            }
        }
    }

    // Hysteresis: grow strong edges through weak candidates.
    while let Some(i) = strong.pop() {
        let x = (i % w) as isize;
        let y = (i / w) as isize;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if candidate[j] && !out.bits[j] {
                    out.bits[j] = true;
                    strong.push(j);
                }
            }
        }
    }
    out
}
