//! Contour tracing and elliptic Fourier shape descriptors.

use super::BinaryMask;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDescriptor {
    /// `4 * orders` elliptic Fourier coefficients, DC term dropped,
    /// unit-normalized.
    pub coefficients: Vec<f64>,
}

impl ShapeDescriptor {
    pub fn cosine_similarity(&self, other: &ShapeDescriptor) -> f64 {
        let n = self.coefficients.len().min(other.coefficients.len());
        self.coefficients[..n]
            .iter()
            .zip(&other.coefficients[..n])
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Outer contour of the mask's largest 8-connected component, as pixel
/// centers in trace order (Moore-neighbor tracing, clockwise in image
/// coordinates).
pub fn trace_outer_contour(mask: &BinaryMask) -> Result<Vec<(f64, f64)>> {
    let comp = mask.largest_component()?;
    let (w, h) = (comp.width as isize, comp.height as isize);
    let at = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && comp.bits[(y * w + x) as usize];

    // Topmost-leftmost pixel.
    let start_idx = comp.bits.iter().position(|b| *b).unwrap();
    let sx = (start_idx % comp.width) as isize;
    let sy = (start_idx / comp.width) as isize;

    // Moore neighborhood in clockwise order starting east.
    const NB: [(isize, isize); 8] =
        [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

    let mut contour = vec![(sx as f64, sy as f64)];
    // Entered the start pixel from the west (it is leftmost in the top row).
    let (mut px, mut py) = (sx, sy);
    let mut backtrack = 4usize; // index of the neighbor we came from (west)
    let first_exit;

    // Find the first boundary neighbor, clockwise from the backtrack.
    let mut found = None;
    for step in 1..=8 {
        let d = (backtrack + step) % 8;
        let (nx, ny) = (px + NB[d].0, py + NB[d].1);
        if at(nx, ny) {
            found = Some(d);
            break;
        }
    }
    match found {
        None => return Ok(contour), // isolated pixel
        Some(d) => {
            first_exit = d;
            px += NB[d].0;
            py += NB[d].1;
            backtrack = (d + 4) % 8;
        }
    }

    let max_steps = 4 * comp.bits.len() + 8;
    for _ in 0..max_steps {
        if px == sx && py == sy {
            // Jacob's stopping criterion: re-enter the start pixel and leave
            // it in the same direction as the first time.
            let mut d = (backtrack + 1) % 8;
            loop {
                let (nx, ny) = (px + NB[d].0, py + NB[d].1);
                if at(nx, ny) {
                    break;
                }
                d = (d + 1) % 8;
            }
            if d == first_exit {
                break;
            }
        }
        contour.push((px as f64, py as f64));
        let mut d = (backtrack + 1) % 8;
        loop {
            let (nx, ny) = (px + NB[d].0, py + NB[d].1);
            if at(nx, ny) {
                px = nx;
                py = ny;
                backtrack = (d + 4) % 8;
                break;
            }
            d = (d + 1) % 8;
        }
    }
    Ok(contour)
}

/// Elliptic Fourier descriptor of a closed polygon. The DC (position) term
/// is dropped and the coefficient vector unit-normalized, which makes the
/// descriptor translation- and size-insensitive but keeps orientation.
///
/// The start point and winding direction of the input are canonicalized
/// (lexicographically smallest `(y, x)` vertex first, positive shoelace
/// orientation), so descriptors do not depend on where tracing began.
pub fn efd_of_polygon(points: &[(f64, f64)], orders: usize) -> ShapeDescriptor {
    assert!(orders >= 1);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &p in points {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        // Degenerate contour: use the bounding unit square of the first point.
        let (x, y) = pts.first().copied().unwrap_or((0.0, 0.0));
        pts = vec![
            (x - 0.5, y - 0.5),
            (x + 0.5, y - 0.5),
            (x + 0.5, y + 0.5),
            (x - 0.5, y + 0.5),
        ];
    }

    // Canonical winding: positive shoelace area.
    let n = pts.len();
    let area: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    if area < 0.0 {
        pts.reverse();
    }

    // Canonical start: lexicographically smallest (y, x).
    let k = pts
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    pts.rotate_left(k);

    // Kuhl-Giardina coefficients on the polygon chain.
    let n = pts.len();
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    let mut dt = Vec::with_capacity(n);
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        let (ddx, ddy) = (x1 - x0, y1 - y0);
        let len = (ddx * ddx + ddy * ddy).sqrt();
        if len > 1e-12 {
            dx.push(ddx);
            dy.push(ddy);
            dt.push(len);
        }
    }
    let total: f64 = dt.iter().sum();
    let mut t = Vec::with_capacity(dt.len() + 1);
    t.push(0.0);
    for &d in &dt {
        t.push(t.last().unwrap() + d);
    }
    let phi: Vec<f64> = t.iter().map(|v| 2.0 * std::f64::consts::PI * v / total).collect();

    let mut coeffs = Vec::with_capacity(4 * orders);
    for order in 1..=orders {
        let nf = order as f64;
        let c = total / (2.0 * nf * nf * std::f64::consts::PI * std::f64::consts::PI);
        let (mut a, mut b, mut cc, mut d) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..dt.len() {
            let dcos = (nf * phi[i + 1]).cos() - (nf * phi[i]).cos();
            let dsin = (nf * phi[i + 1]).sin() - (nf * phi[i]).sin();
            a += dx[i] / dt[i] * dcos;
            b += dx[i] / dt[i] * dsin;
            cc += dy[i] / dt[i] * dcos;
            d += dy[i] / dt[i] * dsin;
        }
        coeffs.extend_from_slice(&[c * a, c * b, c * cc, c * d]);
    }

    let norm: f64 = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-15 {
        for v in &mut coeffs {
            *v /= norm;
        }
    }
    ShapeDescriptor { coefficients: coeffs }
}

/// Shape descriptor of a mask: EFD of the largest component's outer contour.
pub fn efd_of_mask(mask: &BinaryMask, orders: usize) -> Result<ShapeDescriptor> {
    let contour = trace_outer_contour(mask)?;
    Ok(efd_of_polygon(&contour, orders))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use approx::assert_abs_diff_eq;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    fn disc_mask(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn empty_mask_errors() {
        let m = BinaryMask::new(8, 8);
        assert!(matches!(efd_of_mask(&m, 10), Err(Error::EmptyMask)));
    }

    #[test]
    fn contour_of_square_has_perimeter_points() {
        let m = square_mask(16, 16, 4, 4, 6);
        let c = trace_outer_contour(&m).unwrap();
        // 6x6 square boundary = 20 pixels.
        assert_eq!(c.len(), 20);
    }

    #[test]
    fn identical_masks_full_similarity() {
        let m = disc_mask(32, 32, 16.0, 16.0, 9.0);
        let d1 = efd_of_mask(&m, 36).unwrap();
        let d2 = efd_of_mask(&m, 36).unwrap();
        assert_abs_diff_eq!(d1.cosine_similarity(&d2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn translation_invariance_exact() {
        let m1 = square_mask(32, 32, 4, 6, 9);
        let m2 = square_mask(32, 32, 11, 13, 9);
        let d1 = efd_of_mask(&m1, 36).unwrap();
        let d2 = efd_of_mask(&m2, 36).unwrap();
        assert_abs_diff_eq!(d1.cosine_similarity(&d2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn start_point_invariance() {
        let m = disc_mask(64, 64, 32.0, 32.0, 16.0);
        let contour = trace_outer_contour(&m).unwrap();
        let base = efd_of_polygon(&contour, 36);
        for offset in [1usize, 5, 17, contour.len() / 2] {
            let mut rolled = contour.clone();
            rolled.rotate_left(offset % contour.len());
            let d = efd_of_polygon(&rolled, 36);
            assert!(
                (base.cosine_similarity(&d) - 1.0).abs() < 1e-6,
                "offset {offset}: {}",
                base.cosine_similarity(&d)
            );
        }
    }

    #[test]
    fn square_vs_circle_dissimilar() {
        // Independent polygon-integration oracle puts |cos| near 0.70.
        let sq = square_mask(64, 64, 16, 16, 32);
        let circle = disc_mask(64, 64, 32.0, 32.0, 16.0);
        let ds = efd_of_mask(&sq, 36).unwrap();
        let dc = efd_of_mask(&circle, 36).unwrap();
        let sim = ds.cosine_similarity(&dc).abs();
        assert!(sim < 0.95, "similarity {sim}");
    }

    #[test]
    fn descriptor_length() {
        let m = square_mask(16, 16, 4, 4, 6);
        let d = efd_of_mask(&m, 36).unwrap();
        assert_eq!(d.coefficients.len(), 4 * 36);
        let norm: f64 = d.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
    }
}
