//! Raster primitives shared by every stage: color conversion, histograms,
//! edges, contours, shape descriptors and pyramids.
//!
//! Images hold per-channel intensities in `[0,1]`, row-major, channels
//! interleaved. All operations here are pure.

mod canny;
mod contour;
mod morph;
mod png_io;

pub use canny::detect_edges;
pub use contour::{efd_of_mask, efd_of_polygon, trace_outer_contour, ShapeDescriptor};
pub use morph::{dilate, erode, morphological_open};
pub use png_io::{
    encode_png_bytes, list_frame_files, load_frames, load_label_png, load_png, save_label_png,
    save_png,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Length `width * height * channels`, row-major, interleaved.
    pub data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    /// Solid-color image; `color` length must equal `channels`.
    pub fn filled(width: usize, height: usize, color: &[f32]) -> Self {
        let channels = color.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Self { width, height, channels, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 709 luminance of the first three channels, as a 1-channel image.
    pub fn luminance(&self) -> RasterImage {
        assert!(self.channels >= 3);
        let mut out = RasterImage::new(self.width, self.height, 1);
        for i in 0..self.width * self.height {
            let p = &self.data[i * self.channels..i * self.channels + 3];
            out.data[i] = 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2];
        }
        out
    }

    /// Alpha-thresholded support of an RGBA image.
    pub fn alpha_mask(&self, threshold: f32) -> BinaryMask {
        assert_eq!(self.channels, 4);
        let mut mask = BinaryMask::new(self.width, self.height);
        for i in 0..self.width * self.height {
            mask.bits[i] = self.data[i * self.channels + 3] > threshold;
        }
        mask
    }

    /// Extends RGB to RGBA with the mask as a hard alpha channel.
    pub fn with_alpha_from_mask(&self, mask: &BinaryMask) -> RasterImage {
        assert!(self.channels >= 3);
        assert_eq!((self.width, self.height), (mask.width, mask.height));
        let mut out = RasterImage::new(self.width, self.height, 4);
        for i in 0..self.width * self.height {
            let p = &self.data[i * self.channels..i * self.channels + 3];
            out.data[i * 4..i * 4 + 3].copy_from_slice(p);
            out.data[i * 4 + 3] = if mask.bits[i] { 1.0 } else { 0.0 };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        assert!(self.same_dims(other));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &BinaryMask) -> usize {
        assert!(self.same_dims(other));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        assert!(self.same_dims(other));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive max, or None if empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Connected components as label image + count. Labels start at 1.
    pub fn connected_components(&self, eight_connected: bool) -> (Vec<u32>, usize) {
        let mut labels = vec![0u32; self.width * self.height];
        let mut next = 0u32;
        let mut stack = Vec::new();
        let w = self.width as isize;
        let h = self.height as isize;
        let neighbors: &[(isize, isize)] = if eight_connected {
            &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        } else {
            &[(0, -1), (-1, 0), (1, 0), (0, 1)]
        };
        for start in 0..self.bits.len() {
            if !self.bits[start] || labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let x = (i % self.width) as isize;
                let y = (i / self.width) as isize;
                for (dx, dy) in neighbors {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if self.bits[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        (labels, next as usize)
    }

    /// Mask of the largest 8-connected component, or an error when empty.
    pub fn largest_component(&self) -> Result<BinaryMask> {
        let (labels, n) = self.connected_components(true);
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        let mut areas = vec![0usize; n + 1];
        for &l in &labels {
            areas[l as usize] += 1;
        }
        areas[0] = 0;
        let best = areas
            .iter()
            .enumerate()
            .max_by_key(|(i, a)| (**a, std::cmp::Reverse(*i)))
            .map(|(i, _)| i as u32)
            .unwrap();
        let mut out = BinaryMask::new(self.width, self.height);
        for (o, &l) in out.bits.iter_mut().zip(&labels) {
            *o = l == best;
        }
        Ok(out)
    }
}

// -- CIE Lab conversion (sRGB, D65) --------------------------------------

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB triple in [0,1] to CIE Lab rescaled per channel to [0,1]:
/// `L/100, (a+128)/255, (b+128)/255`.
pub fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let fx = lab_f(x / D65[0]);
    let fy = lab_f(y / D65[1]);
    let fz = lab_f(z / D65[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    [l / 100.0, (a + 128.0) / 255.0, (bb + 128.0) / 255.0]
}

/// Inverse of [`rgb_pixel_to_lab`]; results clamped to [0,1].
pub fn lab_pixel_to_rgb(l: f64, a: f64, b: f64) -> [f64; 3] {
    let l = l * 100.0;
    let a = a * 255.0 - 128.0;
    let b = b * 255.0 - 128.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = D65[0] * lab_f_inv(fx);
    let y = D65[1] * lab_f_inv(fy);
    let z = D65[2] * lab_f_inv(fz);
    let rl = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    let gl = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    let bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    [
        linear_to_srgb(rl).clamp(0.0, 1.0),
        linear_to_srgb(gl).clamp(0.0, 1.0),
        linear_to_srgb(bl).clamp(0.0, 1.0),
    ]
}

/// Converts an sRGB image to rescaled CIE Lab; alpha passes through.
pub fn rgb_to_lab(img: &RasterImage) -> RasterImage {
    assert!(img.channels == 3 || img.channels == 4);
    let mut out = img.clone();
    for i in 0..img.width * img.height {
        let p = &img.data[i * img.channels..(i + 1) * img.channels];
        let lab = rgb_pixel_to_lab(p[0] as f64, p[1] as f64, p[2] as f64);
        let q = &mut out.data[i * img.channels..(i + 1) * img.channels];
        q[0] = lab[0] as f32;
        q[1] = lab[1] as f32;
        q[2] = lab[2] as f32;
    }
    out
}

/// Inverse of [`rgb_to_lab`].
pub fn lab_to_rgb(img: &RasterImage) -> RasterImage {
    assert!(img.channels == 3 || img.channels == 4);
    let mut out = img.clone();
    for i in 0..img.width * img.height {
        let p = &img.data[i * img.channels..(i + 1) * img.channels];
        let rgb = lab_pixel_to_rgb(p[0] as f64, p[1] as f64, p[2] as f64);
        let q = &mut out.data[i * img.channels..(i + 1) * img.channels];
        q[0] = rgb[0] as f32;
        q[1] = rgb[1] as f32;
        q[2] = rgb[2] as f32;
    }
    out
}

// -- LAB histograms -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LabHistogram {
    pub bins_per_channel: usize,
    /// Normalized frequencies, `3 * bins_per_channel` values (L, a, b).
    pub counts: Vec<f64>,
}

/// Per-channel normalized histogram of a Lab image over masked pixels.
pub fn lab_histogram(img: &RasterImage, mask: &BinaryMask, bins: usize) -> Result<LabHistogram> {
    assert!(bins >= 2);
    assert!(img.channels >= 3);
    if !mask.same_dims(&BinaryMask { width: img.width, height: img.height, bits: vec![] })
        && (mask.width != img.width || mask.height != img.height)
    {
        return Err(Error::dims(
            format!("{}x{}", img.width, img.height),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    let mut counts = vec![0.0f64; 3 * bins];
    let mut total = 0usize;
    for i in 0..img.width * img.height {
        if !mask.bits[i] {
            continue;
        }
        total += 1;
        let p = &img.data[i * img.channels..i * img.channels + 3];
        for c in 0..3 {
            let v = (p[c] as f64).clamp(0.0, 1.0);
            let b = ((v * bins as f64) as usize).min(bins - 1);
            counts[c * bins + b] += 1.0;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    for v in &mut counts {
        *v /= total as f64;
    }
    Ok(LabHistogram { bins_per_channel: bins, counts })
}

/// Mean over channels of the Hellinger distance between two histograms.
pub fn hellinger_distance(h1: &LabHistogram, h2: &LabHistogram) -> Result<f64> {
    if h1.bins_per_channel != h2.bins_per_channel {
        return Err(Error::BinMismatch(h1.bins_per_channel, h2.bins_per_channel));
    }
    let bins = h1.bins_per_channel;
    let mut sum = 0.0;
    for c in 0..3 {
        let mut bc = 0.0;
        for b in 0..bins {
            bc += (h1.counts[c * bins + b] * h2.counts[c * bins + b]).sqrt();
        }
        sum += (1.0 - bc.min(1.0)).sqrt();
    }
    Ok(sum / 3.0)
}

// -- Image pyramid --------------------------------------------------------

/// Level 0 is the input; each further level is a 2x2 box-filtered downsample.
/// Odd dimensions floor-divide, with the last row/column averaged over the
/// available pixels.
pub fn image_pyramid(img: &RasterImage, levels: usize) -> Result<Vec<RasterImage>> {
    assert!(levels >= 1);
    let min_dim = img.width.min(img.height);
    if levels > 1 && min_dim >> (levels - 1) < 4 {
        return Err(Error::TooManyLevels { levels, min_dim });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let prev = out.last().unwrap();
        out.push(downsample_2x2(prev));
    }
    Ok(out)
}

pub(crate) fn downsample_2x2(img: &RasterImage) -> RasterImage {
    let w = (img.width / 2).max(1);
    let h = (img.height / 2).max(1);
    let c = img.channels;
    let mut out = RasterImage::new(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0.0f64;
                let mut n = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sx = 2 * x + dx;
                        let sy = 2 * y + dy;
                        if sx < img.width && sy < img.height {
                            sum += img.get(sx, sy, ch) as f64;
                            n += 1.0;
                        }
                    }
                }
                out.set(x, y, ch, (sum / n) as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lab_achromatic_axis() {
        let black = rgb_pixel_to_lab(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(black[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(black[1], 128.0 / 255.0, epsilon = 1e-4);
        assert_abs_diff_eq!(black[2], 128.0 / 255.0, epsilon = 1e-4);
        let white = rgb_pixel_to_lab(1.0, 1.0, 1.0);
        assert_abs_diff_eq!(white[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(white[1], 128.0 / 255.0, epsilon = 1e-4);
        assert_abs_diff_eq!(white[2], 128.0 / 255.0, epsilon = 1e-4);
    }

    #[test]
    fn lab_reference_red() {
        // Reference values from an independent D65 colorimetry computation.
        let lab = rgb_pixel_to_lab(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(lab[0] * 100.0, 53.2408, epsilon = 0.01);
        assert_abs_diff_eq!(lab[1] * 255.0 - 128.0, 80.0925, epsilon = 0.01);
        assert_abs_diff_eq!(lab[2] * 255.0 - 128.0, 67.2032, epsilon = 0.01);
    }

    #[test]
    fn lab_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.33, 0.33, 0.33), (0.9, 0.8, 0.1)]
        {
            let lab = rgb_pixel_to_lab(r, g, b);
            let rgb = lab_pixel_to_rgb(lab[0], lab[1], lab[2]);
            assert_abs_diff_eq!(rgb[0], r, epsilon = 1e-3);
            assert_abs_diff_eq!(rgb[1], g, epsilon = 1e-3);
            assert_abs_diff_eq!(rgb[2], b, epsilon = 1e-3);
        }
    }

    #[test]
    fn histogram_uniform_patch() {
        let img = RasterImage::filled(4, 4, &[0.5, 0.5, 0.5]);
        let mut mask = BinaryMask::new(4, 4);
        mask.bits.fill(true);
        let h = lab_histogram(&img, &mask, 64).unwrap();
        for c in 0..3 {
            let ch = &h.counts[c * 64..(c + 1) * 64];
            assert_abs_diff_eq!(ch.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(ch.iter().cloned().fold(0.0, f64::max), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn histogram_two_color_counts() {
        // 2x2 image: two pixels at 0.05, two at 0.95 in every channel.
        let mut img = RasterImage::new(2, 2, 3);
        for (i, v) in [0.05f32, 0.05, 0.95, 0.95].iter().enumerate() {
            for c in 0..3 {
                img.data[i * 3 + c] = *v;
            }
        }
        let mut mask = BinaryMask::new(2, 2);
        mask.bits.fill(true);
        let h = lab_histogram(&img, &mask, 10).unwrap();
        for c in 0..3 {
            let ch = &h.counts[c * 10..(c + 1) * 10];
            assert_abs_diff_eq!(ch[0], 0.5, epsilon = 1e-9);
            assert_abs_diff_eq!(ch[9], 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn histogram_empty_mask_errors() {
        let img = RasterImage::filled(4, 4, &[0.5, 0.5, 0.5]);
        let mask = BinaryMask::new(4, 4);
        assert!(matches!(lab_histogram(&img, &mask, 64), Err(Error::EmptyMask)));
    }

    #[test]
    fn hellinger_identity_and_disjoint() {
        let h1 = LabHistogram { bins_per_channel: 4, counts: {
            let mut c = vec![0.0; 12];
            c[0] = 1.0; c[4] = 1.0; c[8] = 1.0;
            c
        }};
        assert_abs_diff_eq!(hellinger_distance(&h1, &h1).unwrap(), 0.0, epsilon = 1e-12);
        let h2 = LabHistogram { bins_per_channel: 4, counts: {
            let mut c = vec![0.0; 12];
            c[1] = 1.0; c[5] = 1.0; c[9] = 1.0;
            c
        }};
        assert_abs_diff_eq!(hellinger_distance(&h1, &h2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hellinger_hand_value() {
        // Per-channel (.5,.5) vs (.25,.75): sqrt(1 - (sqrt(.125)+sqrt(.375)))
        // = 0.184592 in every channel.
        let mk = |a: f64, b: f64| LabHistogram {
            bins_per_channel: 2,
            counts: vec![a, b, a, b, a, b],
        };
        let d = hellinger_distance(&mk(0.5, 0.5), &mk(0.25, 0.75)).unwrap();
        assert_abs_diff_eq!(d, 0.18459191128251476, epsilon = 1e-9);
    }

    #[test]
    fn hellinger_bin_mismatch() {
        let h1 = LabHistogram { bins_per_channel: 2, counts: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0] };
        let h2 = LabHistogram { bins_per_channel: 4, counts: vec![0.0; 12] };
        assert!(matches!(hellinger_distance(&h1, &h2), Err(Error::BinMismatch(2, 4))));
    }

    #[test]
    fn pyramid_single_level_is_input() {
        let img = RasterImage::filled(8, 8, &[0.3, 0.4, 0.5]);
        let pyr = image_pyramid(&img, 1).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(pyr[0], img);
    }

    #[test]
    fn pyramid_constant_preserved() {
        let img = RasterImage::filled(16, 16, &[0.25, 0.5, 0.75]);
        let pyr = image_pyramid(&img, 3).unwrap();
        for level in &pyr {
            for i in 0..level.width * level.height {
                assert_abs_diff_eq!(level.data[i * 3], 0.25, epsilon = 1e-6);
                assert_abs_diff_eq!(level.data[i * 3 + 1], 0.5, epsilon = 1e-6);
                assert_abs_diff_eq!(level.data[i * 3 + 2], 0.75, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_checkerboard_averages_to_half() {
        let mut img = RasterImage::new(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, 0, ((x + y) % 2) as f32);
            }
        }
        let pyr = image_pyramid(&img, 2).unwrap();
        for v in &pyr[1].data {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn pyramid_too_many_levels() {
        let img = RasterImage::new(8, 8, 1);
        assert!(matches!(image_pyramid(&img, 3), Err(Error::TooManyLevels { .. })));
    }

    #[test]
    fn mask_bbox_centroid() {
        let mut m = BinaryMask::new(10, 10);
        m.set(2, 3, true);
        m.set(4, 5, true);
        assert_eq!(m.bbox(), Some((2, 3, 5, 6)));
        assert_eq!(m.centroid(), Some((3.0, 4.0)));
        assert_eq!(m.area(), 2);
    }
}
