//! Motion initialization: classical block-matching optical flow, mask
//! advection, coarse object/region correspondence weights, RANSAC affine
//! estimation from flow, and the rotation-search template fallback.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FlowConfig;
use crate::error::{Error, Result};
use crate::geom::{Affine, AffineParams, Mat2};
use crate::imaging::{
    efd_of_mask, hellinger_distance, lab_histogram, rgb_to_lab, BinaryMask, RasterImage,
};
use crate::parallel;

/// Dense per-pixel displacement field mapping a source frame onto a target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Row-major (dx, dy) in pixels.
    pub vectors: Vec<(f32, f32)>,
}

impl FlowField {
    pub fn zero(width: usize, height: usize) -> Self {
        Self { width, height, vectors: vec![(0.0, 0.0); width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        self.vectors[y * self.width + x]
    }
}

/// Product-form correspondence weight between an object and a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseWeight {
    pub w_shape: f64,
    pub w_color: f64,
    pub w_flow: f64,
    pub w: f64,
}

// ---------------------------------------------------------------------------
// Block-matching flow

fn sad_block(
    prev: &RasterImage,
    next: &RasterImage,
    bx: usize,
    by: usize,
    bw: usize,
    bh: usize,
    dx: isize,
    dy: isize,
) -> f64 {
    let c = prev.channels.min(3);
    let mut cost = 0.0;
    for y in by..by + bh {
        for x in bx..bx + bw {
            let (tx, ty) = (x as isize + dx, y as isize + dy);
            if tx < 0 || ty < 0 || tx >= next.width as isize || ty >= next.height as isize {
                // Out-of-frame candidates pay the maximum per-channel cost.
                cost += c as f64;
                continue;
            }
            for ch in 0..c {
                cost +=
                    (prev.get(x, y, ch) - next.get(tx as usize, ty as usize, ch)).abs() as f64;
            }
        }
    }
    cost
}

/// Coarse-to-fine block matching. Integer displacements; each pyramid level
/// searches a window around the upsampled coarser estimate.
pub fn compute_flow(
    prev: &RasterImage,
    next: &RasterImage,
    cfg: &FlowConfig,
) -> Result<FlowField> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(Error::dims(
            format!("{}x{}", prev.width, prev.height),
            format!("{}x{}", next.width, next.height),
        ));
    }
    let mut levels = cfg.levels.max(1);
    while levels > 1 && (prev.width.min(prev.height) >> (levels - 1)) < cfg.block_size {
        levels -= 1;
    }
    let prev_pyr = crate::imaging::image_pyramid(prev, levels)?;
    let next_pyr = crate::imaging::image_pyramid(next, levels)?;

    let mut flow: Option<FlowField> = None;
    for level in (0..levels).rev() {
        let (p, n) = (&prev_pyr[level], &next_pyr[level]);
        let (w, h) = (p.width, p.height);
        let bs = cfg.block_size;
        let r = cfg.search_radius as isize;
        let carried = flow.take();
        let blocks_y = h.div_ceil(bs);
        let blocks_x = w.div_ceil(bs);

        // One row of blocks per work item; deterministic assembly.
        let rows: Vec<Vec<(f32, f32)>> = parallel::map_indexed(blocks_y, |byi| {
            let by = byi * bs;
            let bh = bs.min(h - by);
            let mut out = Vec::with_capacity(blocks_x);
            for bxi in 0..blocks_x {
                let bx = bxi * bs;
                let bw = bs.min(w - bx);
                let (cx, cy) = (bx + bw / 2, by + bh / 2);
                let init = carried
                    .as_ref()
                    .map(|f| {
                        let (dx, dy) = f.at((cx / 2).min(f.width - 1), (cy / 2).min(f.height - 1));
                        (2.0 * dx, 2.0 * dy)
                    })
                    .unwrap_or((0.0, 0.0));
                let (ix, iy) = (init.0.round() as isize, init.1.round() as isize);
                let mut best = (ix, iy);
                let mut best_cost = sad_block(p, n, bx, by, bw, bh, ix, iy);
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let cost = sad_block(p, n, bx, by, bw, bh, ix + dx, iy + dy);
                        if cost < best_cost {
                            best_cost = cost;
                            best = (ix + dx, iy + dy);
                        }
                    }
                }
                out.push((best.0 as f32, best.1 as f32));
            }
            out
        });

        let mut field = FlowField::zero(w, h);
        for y in 0..h {
            for x in 0..w {
                field.vectors[y * w + x] = rows[y / bs][x / bs];
            }
        }
        flow = Some(field);
    }
    Ok(flow.expect("at least one level"))
}

/// Reads a Middlebury .flo file (magic 202021.25, little-endian f32 pairs).
pub fn load_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    if bytes.len() < 12 {
        return Err(Error::parse(ctx, "file too short for .flo header"));
    }
    let f32le = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let magic = f32le(0);
    if magic != 202021.25 {
        return Err(Error::parse(ctx, format!("bad .flo magic {magic}")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::parse(ctx, format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() < 12 + w * h * 8 {
        return Err(Error::parse(ctx, "truncated .flo payload"));
    }
    let mut vectors = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let dx = f32le(12 + i * 8);
        let dy = f32le(16 + i * 8);
        if !dx.is_finite() || !dy.is_finite() {
            return Err(Error::parse(ctx, format!("non-finite flow at index {i}")));
        }
        vectors.push((dx, dy));
    }
    Ok(FlowField { width: w, height: h, vectors })
}

/// Moves every set pixel to `round(p + flow(p))`; out-of-frame pixels drop.
pub fn advect_mask(mask: &BinaryMask, flow: &FlowField) -> BinaryMask {
    assert_eq!((mask.width, mask.height), (flow.width, flow.height));
    let mut out = BinaryMask::new(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            let (dx, dy) = flow.at(x, y);
            let tx = x as isize + dx.round() as isize;
            let ty = y as isize + dy.round() as isize;
            if tx >= 0 && ty >= 0 && (tx as usize) < mask.width && (ty as usize) < mask.height {
                out.set(tx as usize, ty as usize, true);
            }
        }
    }
    out
}

/// Shape/color/bidirectional-flow agreement between an object instance and a
/// candidate region, each given as an image plus support mask.
#[allow(clippy::too_many_arguments)]
pub fn coarse_weight(
    obj_img: &RasterImage,
    obj_mask: &BinaryMask,
    region_img: &RasterImage,
    region_mask: &BinaryMask,
    fwd: &FlowField,
    bwd: &FlowField,
    histogram_bins: usize,
    efd_orders: usize,
) -> Result<CoarseWeight> {
    if obj_mask.is_empty() || region_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let w_shape = efd_of_mask(obj_mask, efd_orders)?
        .cosine_similarity(&efd_of_mask(region_mask, efd_orders)?)
        .abs()
        .clamp(0.0, 1.0);
    let oh = lab_histogram(&rgb_to_lab(obj_img), obj_mask, histogram_bins)?;
    let rh = lab_histogram(&rgb_to_lab(region_img), region_mask, histogram_bins)?;
    let w_color = (1.0 - hellinger_distance(&oh, &rh)?).clamp(0.0, 1.0);
    let fwd_obj = advect_mask(obj_mask, fwd);
    let bwd_region = advect_mask(region_mask, bwd);
    let denom = (fwd_obj.area() + bwd_region.area()) as f64;
    let w_flow = if denom > 0.0 {
        (fwd_obj.intersection_area(region_mask) + obj_mask.intersection_area(&bwd_region)) as f64
            / denom
    } else {
        0.0
    };
    let w_flow = w_flow.clamp(0.0, 1.0);
    Ok(CoarseWeight { w_shape, w_color, w_flow, w: w_shape * w_color * w_flow })
}

// ---------------------------------------------------------------------------
// Affine estimation

/// Solves the 3x3 system `m x = b` by Gaussian elimination with partial
/// pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &bb| m[a][col].abs().partial_cmp(&m[bb][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut v = b[row];
        for k in row + 1..3 {
            v -= m[row][k] * x[k];
        }
        x[row] = v / m[row][row];
    }
    Some(x)
}

/// Least-squares affine from point correspondences (normal equations, solved
/// independently per output coordinate).
fn fit_affine_ls(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Affine> {
    let n = src.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in src {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let m = [[sxx, sxy, sx], [sxy, syy, sy], [sx, sy, n]];
    let mut rhs_u = [0.0; 3];
    let mut rhs_v = [0.0; 3];
    for (&(x, y), &(u, v)) in src.iter().zip(dst) {
        rhs_u[0] += x * u;
        rhs_u[1] += y * u;
        rhs_u[2] += u;
        rhs_v[0] += x * v;
        rhs_v[1] += y * v;
        rhs_v[2] += v;
    }
    let ru = solve3(m, rhs_u)?;
    let rv = solve3(m, rhs_v)?;
    Some(Affine { m: Mat2::new(ru[0], ru[1], rv[0], rv[1]), b: [ru[2], rv[2]] })
}

fn triangle_area2(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
    ((q.0 - p.0) * (r.1 - p.1) - (r.0 - p.0) * (q.1 - p.1)).abs()
}

/// RANSAC affine fit to a flow field restricted to a mask: repeated 3-point
/// exact fits, inlier counting, then a least-squares refit on the best
/// inlier set. The frame-space map (absolute coordinates) is returned.
pub fn ransac_affine_map(flow: &FlowField, mask: &BinaryMask, cfg: &FlowConfig) -> Result<Affine> {
    assert_eq!((mask.width, mask.height), (flow.width, flow.height));
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let (dx, dy) = flow.at(x, y);
                src.push((x as f64, y as f64));
                dst.push((x as f64 + dx as f64, y as f64 + dy as f64));
            }
        }
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut best_inliers: Vec<usize> = Vec::new();
    let mut found_sample = false;
    let thr2 = cfg.ransac_threshold * cfg.ransac_threshold;
    for _ in 0..cfg.ransac_iters {
        let (i, j, k) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
        if i == j || j == k || i == k {
            continue;
        }
        if triangle_area2(src[i], src[j], src[k]) < 1e-9 {
            continue;
        }
        found_sample = true;
        let aff = match fit_affine_ls(
            &[src[i], src[j], src[k]],
            &[dst[i], dst[j], dst[k]],
        ) {
            Some(a) => a,
            None => continue,
        };
        let mut inliers = Vec::new();
        for idx in 0..n {
            let (px, py) = aff.apply(src[idx].0, src[idx].1);
            let (ex, ey) = (px - dst[idx].0, py - dst[idx].1);
            if ex * ex + ey * ey < thr2 {
                inliers.push(idx);
            }
        }
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }
    if !found_sample {
        return Err(Error::DegenerateGeometry);
    }
    if (best_inliers.len() as f64) < cfg.ransac_min_inlier_ratio * n as f64 {
        return Err(Error::NoConsensus);
    }
    let s: Vec<(f64, f64)> = best_inliers.iter().map(|&i| src[i]).collect();
    let d: Vec<(f64, f64)> = best_inliers.iter().map(|&i| dst[i]).collect();
    fit_affine_ls(&s, &d).ok_or(Error::DegenerateGeometry)
}

/// [`ransac_affine_map`] decomposed into transform parameters (frame-space,
/// zero anchors, ky = 0).
pub fn ransac_affine(
    flow: &FlowField,
    mask: &BinaryMask,
    cfg: &FlowConfig,
) -> Result<AffineParams> {
    let aff = ransac_affine_map(flow, mask, cfg)?;
    AffineParams::from_affine(&aff, (0.0, 0.0), (0.0, 0.0))
}

// ---------------------------------------------------------------------------
// Template fallback

/// Rotation-search initialization: tries every angle at the configured
/// stride, uniformly scaling the rotated object to fit the target bbox and
/// aligning centroids, scoring masked RGB L2 against the target image. The
/// winning angle gets an anisotropic scale refit from the bbox ratio.
pub fn template_init(
    obj_img: &RasterImage,
    obj_mask: &BinaryMask,
    target_img: &RasterImage,
    target_mask: &BinaryMask,
    stride_deg: f64,
) -> Result<AffineParams> {
    if obj_mask.is_empty() || target_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    assert!(stride_deg > 0.0);
    let oc = obj_mask.centroid().ok_or(Error::EmptyMask)?;
    let tc = target_mask.centroid().ok_or(Error::EmptyMask)?;
    let (tb0, tb1) = target_bbox_f(target_mask);
    let (tw, th) = (tb1.0 - tb0.0 + 1.0, tb1.1 - tb0.1 + 1.0);

    let pts: Vec<(f64, f64)> = mask_points(obj_mask);
    let steps = (360.0 / stride_deg).round() as usize;
    let costs: Vec<(f64, f64)> = parallel::map_indexed(steps, |si| {
        let theta = (-180.0 + si as f64 * stride_deg).to_radians();
        let rot = Mat2::rotation(theta);
        // Rotated-bbox uniform fit.
        let (mut x0, mut y0, mut x1, mut y1) =
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            let (rx, ry) = rot.apply(x - oc.0, y - oc.1);
            x0 = x0.min(rx);
            y0 = y0.min(ry);
            x1 = x1.max(rx);
            y1 = y1.max(ry);
        }
        let (rw, rh) = (x1 - x0 + 1.0, y1 - y0 + 1.0);
        let s = (tw / rw).min(th / rh);
        let mut cost = 0.0;
        for &(x, y) in &pts {
            let (rx, ry) = rot.apply(x - oc.0, y - oc.1);
            let (qx, qy) = (tc.0 + s * rx, tc.1 + s * ry);
            let (xi, yi) = (qx.round(), qy.round());
            if xi < 0.0
                || yi < 0.0
                || xi >= target_img.width as f64
                || yi >= target_img.height as f64
            {
                cost += 3.0;
                continue;
            }
            let (xi, yi) = (xi as usize, yi as usize);
            for ch in 0..3 {
                let d = (obj_img.get(x as usize, y as usize, ch)
                    - target_img.get(xi, yi, ch)) as f64;
                cost += d * d;
            }
        }
        (cost / pts.len() as f64, theta)
    });
    // Cost ties (common for near-identity poses, where every sample rounds
    // to the same pixel) break toward the smallest rotation magnitude.
    let (_, theta) = costs
        .iter()
        .copied()
        .min_by(|a, b| (a.0, a.1.abs()).partial_cmp(&(b.0, b.1.abs())).unwrap())
        .expect("at least one angle");

    // Anisotropic refit from the rotated bbox at the winning angle. The
    // linear part is S(sx, sy) * R(theta): scale along the target axes.
    let rot = Mat2::rotation(theta);
    let (mut x0, mut y0, mut x1, mut y1) =
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        let (rx, ry) = rot.apply(x - oc.0, y - oc.1);
        x0 = x0.min(rx);
        y0 = y0.min(ry);
        x1 = x1.max(rx);
        y1 = y1.max(ry);
    }
    let sx = tw / (x1 - x0 + 1.0);
    let sy = th / (y1 - y0 + 1.0);
    let lin = Mat2::new(sx, 0.0, 0.0, sy).mul(&rot);
    let b = [tc.0 - lin.a * oc.0 - lin.b * oc.1, tc.1 - lin.c * oc.0 - lin.d * oc.1];
    AffineParams::from_affine(&Affine { m: lin, b }, (0.0, 0.0), (0.0, 0.0))
}

fn mask_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    pts
}

fn target_bbox_f(mask: &BinaryMask) -> ((f64, f64), (f64, f64)) {
    let (x0, y0, x1, y1) = mask.bbox().expect("nonempty mask");
    ((x0 as f64, y0 as f64), ((x1 - 1) as f64, (y1 - 1) as f64))
}
