//! Differentiable compositing: soft z-layered rendering of affinely
//! transformed RGBA sources with analytic gradients through bilinear
//! sampling and the layering softmax, plus the momentum optimizer that fits
//! transform parameters and depth against a target image.
//!
//! Per pixel, layer `i` gets weight `alpha_i * exp(z_i / tau)` and the
//! background (fixed `z = -1`) gets `exp(z_bg / tau)`; the output color is
//! the weight-normalized sum. As `tau -> 0` this reproduces hard back-to-
//! front compositing. All internal arithmetic is f64 so that analytic
//! gradients match finite differences tightly.

use crate::config::DcConfig;
use crate::error::{Error, Result};
use crate::geom::{Affine, AffineParams, Mat2};
use crate::imaging::{BinaryMask, RasterImage};
use crate::parallel;

/// Depth assigned to the background layer.
pub const BACKGROUND_Z: f64 = -1.0;

/// A source image placed on the canvas with a 7-parameter transform and a
/// continuous depth value.
#[derive(Debug, Clone)]
pub struct SourceElement {
    pub id: u64,
    /// RGBA canonical image (RGB accepted, treated as fully opaque).
    pub image: RasterImage,
    pub params: AffineParams,
    pub z: f64,
}

impl SourceElement {
    /// Transform anchor: center of the canonical image's pixel grid.
    pub fn src_anchor(&self) -> (f64, f64) {
        ((self.image.width as f64 - 1.0) / 2.0, (self.image.height as f64 - 1.0) / 2.0)
    }
}

/// A set of placed elements over a canvas.
#[derive(Debug, Clone)]
pub struct PlacementSet {
    /// (width, height) in pixels.
    pub canvas: (usize, usize),
    pub elements: Vec<SourceElement>,
}

impl PlacementSet {
    pub fn canvas_anchor(&self) -> (f64, f64) {
        ((self.canvas.0 as f64 - 1.0) / 2.0, (self.canvas.1 as f64 - 1.0) / 2.0)
    }

    pub fn element(&self, id: u64) -> Result<&SourceElement> {
        self.elements.iter().find(|e| e.id == id).ok_or(Error::UnknownElement(id))
    }

    /// Canvas-frame affine of one element (source coords -> canvas coords).
    pub fn element_affine(&self, el: &SourceElement) -> Affine {
        el.params.to_affine(el.src_anchor(), self.canvas_anchor())
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Premultiplied bilinear sample and its spatial derivative. Texels outside
/// the source count as fully transparent, so alpha fades linearly across the
/// source boundary.
#[derive(Debug, Clone, Copy, Default)]
struct Sample {
    /// Premultiplied RGB.
    p: [f64; 3],
    a: f64,
    dp_du: [f64; 3],
    dp_dv: [f64; 3],
    da_du: f64,
    da_dv: f64,
}

fn texel_premul(img: &RasterImage, x: isize, y: isize) -> [f64; 4] {
    if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
        return [0.0; 4];
    }
    let (x, y) = (x as usize, y as usize);
    if img.channels >= 4 {
        let a = img.get(x, y, 3) as f64;
        [
            img.get(x, y, 0) as f64 * a,
            img.get(x, y, 1) as f64 * a,
            img.get(x, y, 2) as f64 * a,
            a,
        ]
    } else {
        [img.get(x, y, 0) as f64, img.get(x, y, 1) as f64, img.get(x, y, 2) as f64, 1.0]
    }
}

fn sample_premul(img: &RasterImage, u: f64, v: f64) -> Sample {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let t00 = texel_premul(img, xi, yi);
    let t10 = texel_premul(img, xi + 1, yi);
    let t01 = texel_premul(img, xi, yi + 1);
    let t11 = texel_premul(img, xi + 1, yi + 1);
    let mut s = Sample::default();
    for c in 0..4 {
        let top = t00[c] + (t10[c] - t00[c]) * fx;
        let bot = t01[c] + (t11[c] - t01[c]) * fx;
        let val = top + (bot - top) * fy;
        let du = (t10[c] - t00[c]) * (1.0 - fy) + (t11[c] - t01[c]) * fy;
        let dv = bot - top;
        if c < 3 {
            s.p[c] = val;
            s.dp_du[c] = du;
            s.dp_dv[c] = dv;
        } else {
            s.a = val;
            s.da_du = du;
            s.da_dv = dv;
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Per-element render context

struct ElemCtx {
    /// Canvas -> source map.
    inv: Affine,
    /// `L^-1 * dL/dp` for theta, sx, sy, kx, ky.
    g_lin: [Mat2; 5],
    /// du/dtx and du/dty (constant over the canvas).
    du_dt: [(f64, f64); 2],
    anchor: (f64, f64),
    /// Conservative canvas-space pixel bounds (x0, y0, x1, y1), x1/y1
    /// exclusive; empty when the element projects off-canvas.
    bbox: (usize, usize, usize, usize),
}

impl ElemCtx {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox.0 && x < self.bbox.2 && y >= self.bbox.1 && y < self.bbox.3
    }

    fn covers_row(&self, y: usize) -> bool {
        y >= self.bbox.1 && y < self.bbox.3
    }
}

fn element_ctx(ps: &PlacementSet, el: &SourceElement) -> Result<ElemCtx> {
    let aff = ps.element_affine(el);
    let inv = aff.inverse()?;
    let linv = inv.m;
    let mut g_lin = [Mat2::identity(); 5];
    for (k, g) in g_lin.iter_mut().enumerate() {
        *g = linv.mul(&el.params.linear_derivative(k));
    }
    let du_dt = [(-linv.a, -linv.c), (-linv.b, -linv.d)];

    let (w, h) = (el.image.width as f64, el.image.height as f64);
    let corners = [(-1.0, -1.0), (w, -1.0), (w, h), (-1.0, h)];
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (cx, cy) in corners {
        let (qx, qy) = aff.apply(cx, cy);
        x0 = x0.min(qx);
        y0 = y0.min(qy);
        x1 = x1.max(qx);
        y1 = y1.max(qy);
    }
    let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    let bbox = (
        clampi(x0.floor() - 1.0, ps.canvas.0),
        clampi(y0.floor() - 1.0, ps.canvas.1),
        clampi(x1.ceil() + 2.0, ps.canvas.0),
        clampi(y1.ceil() + 2.0, ps.canvas.1),
    );
    Ok(ElemCtx { inv, g_lin, du_dt, anchor: el.src_anchor(), bbox })
}

fn contexts(ps: &PlacementSet) -> Result<Vec<ElemCtx>> {
    ps.elements.iter().map(|el| element_ctx(ps, el)).collect()
}

fn bg_pixel(background: &RasterImage, x: usize, y: usize) -> [f64; 3] {
    if background.channels == 1 {
        let v = background.get(x, y, 0) as f64;
        [v, v, v]
    } else {
        [
            background.get(x, y, 0) as f64,
            background.get(x, y, 1) as f64,
            background.get(x, y, 2) as f64,
        ]
    }
}

fn check_canvas(ps: &PlacementSet, img: &RasterImage) -> Result<()> {
    if (img.width, img.height) != ps.canvas {
        return Err(Error::dims(
            format!("{}x{}", ps.canvas.0, ps.canvas.1),
            format!("{}x{}", img.width, img.height),
        ));
    }
    Ok(())
}

/// Composites one pixel given pre-gathered samples. Weights are normalized
/// by the largest covering depth so exponents never overflow. Returns the
/// color, the normalized weight sum, and the per-element normalized scales.
fn composite_pixel(
    ps: &PlacementSet,
    samples: &[(usize, Sample)],
    bg: [f64; 3],
    tau: f64,
    scales: &mut Vec<f64>,
) -> ([f64; 3], f64) {
    scales.clear();
    let mut zmax = BACKGROUND_Z;
    for &(i, ref s) in samples {
        if s.a > 0.0 {
            zmax = zmax.max(ps.elements[i].z);
        }
    }
    let wbg = ((BACKGROUND_Z - zmax) / tau).exp();
    let mut wsum = wbg;
    let mut num = [bg[0] * wbg, bg[1] * wbg, bg[2] * wbg];
    for &(i, ref s) in samples {
        let sc = ((ps.elements[i].z - zmax) / tau).exp();
        scales.push(sc);
        wsum += sc * s.a;
        for c in 0..3 {
            num[c] += sc * s.p[c];
        }
    }
    ([num[0] / wsum, num[1] / wsum, num[2] / wsum], wsum)
}

/// Full-canvas soft composite in f64 (row-parallel, deterministic).
fn render_rgb_f64(
    ps: &PlacementSet,
    ctxs: &[ElemCtx],
    background: &RasterImage,
    tau: f64,
) -> Vec<f64> {
    let (w, h) = ps.canvas;
    let mut out = vec![0.0f64; w * h * 3];
    parallel::for_each_chunk_mut(&mut out, w * 3, |y, row| {
        let mut samples: Vec<(usize, Sample)> = Vec::new();
        let mut scales: Vec<f64> = Vec::new();
        for x in 0..w {
            samples.clear();
            for (i, ctx) in ctxs.iter().enumerate() {
                if ctx.covers(x, y) {
                    let (u, v) = ctx.inv.apply(x as f64, y as f64);
                    let s = sample_premul(&ps.elements[i].image, u, v);
                    if s.a > 0.0 {
                        samples.push((i, s));
                    }
                }
            }
            let (rgb, _) = composite_pixel(ps, &samples, bg_pixel(background, x, y), tau, &mut scales);
            row[x * 3..x * 3 + 3].copy_from_slice(&rgb);
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Public compositing operations

/// Resamples a source onto the canvas under the given transform
/// (inverse-mapped bilinear; outside-source samples get alpha 0).
pub fn apply_affine(
    src: &RasterImage,
    params: &AffineParams,
    canvas: (usize, usize),
) -> Result<RasterImage> {
    assert!(canvas.0 > 0 && canvas.1 > 0);
    if params.linear().det().abs() < 1e-9 {
        return Err(Error::SingularTransform);
    }
    let ps = PlacementSet {
        canvas,
        elements: vec![SourceElement { id: 0, image: src.clone(), params: *params, z: 0.0 }],
    };
    let ctx = element_ctx(&ps, &ps.elements[0])?;
    let mut out = RasterImage::new(canvas.0, canvas.1, 4);
    for y in 0..canvas.1 {
        for x in 0..canvas.0 {
            if !ctx.covers(x, y) {
                continue;
            }
            let (u, v) = ctx.inv.apply(x as f64, y as f64);
            let s = sample_premul(src, u, v);
            if s.a > 0.0 {
                for c in 0..3 {
                    out.set(x, y, c, (s.p[c] / s.a) as f32);
                }
                out.set(x, y, 3, s.a as f32);
            }
        }
    }
    Ok(out)
}

/// Hard back-to-front compositing: sort by rounded z (ties by id) and apply
/// `I = alpha * fg + (1 - alpha) * bg` per layer.
pub fn composite_hard(ps: &PlacementSet, background: &RasterImage) -> Result<RasterImage> {
    check_canvas(ps, background)?;
    let (w, h) = ps.canvas;
    let mut order: Vec<usize> = (0..ps.elements.len()).collect();
    order.sort_by_key(|&i| (ps.elements[i].z.round() as i64, ps.elements[i].id));
    let mut out = RasterImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let bg = bg_pixel(background, x, y);
            for c in 0..3 {
                out.set(x, y, c, bg[c] as f32);
            }
        }
    }
    for i in order {
        let ctx = element_ctx(ps, &ps.elements[i])?;
        for y in ctx.bbox.1..ctx.bbox.3 {
            for x in ctx.bbox.0..ctx.bbox.2 {
                let (u, v) = ctx.inv.apply(x as f64, y as f64);
                let s = sample_premul(&ps.elements[i].image, u, v);
                if s.a > 0.0 {
                    for c in 0..3 {
                        let prev = out.get(x, y, c) as f64;
                        out.set(x, y, c, (s.p[c] + (1.0 - s.a) * prev) as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Soft z-layered compositing at temperature `tau` (see module docs).
pub fn composite_soft(
    ps: &PlacementSet,
    background: &RasterImage,
    tau: f64,
) -> Result<RasterImage> {
    assert!(tau > 0.0);
    check_canvas(ps, background)?;
    let ctxs = contexts(ps)?;
    let data = render_rgb_f64(ps, &ctxs, background, tau);
    Ok(RasterImage::from_data(ps.canvas.0, ps.canvas.1, 3, data.iter().map(|&v| v as f32).collect()))
}

/// Pixels where the element's transformed alpha exceeds 0.5 and no
/// higher-depth element (ties broken by id) is opaque there.
pub fn visibility_mask(ps: &PlacementSet, element_id: u64) -> Result<BinaryMask> {
    let idx = ps
        .elements
        .iter()
        .position(|e| e.id == element_id)
        .ok_or(Error::UnknownElement(element_id))?;
    let ctxs = contexts(ps)?;
    let me = &ps.elements[idx];
    let (w, h) = ps.canvas;
    let mut mask = BinaryMask::new(w, h);
    let above: Vec<usize> = (0..ps.elements.len())
        .filter(|&j| {
            let e = &ps.elements[j];
            j != idx && (e.z, e.id) > (me.z, me.id)
        })
        .collect();
    for y in ctxs[idx].bbox.1..ctxs[idx].bbox.3 {
        for x in ctxs[idx].bbox.0..ctxs[idx].bbox.2 {
            let (u, v) = ctxs[idx].inv.apply(x as f64, y as f64);
            if sample_premul(&me.image, u, v).a <= 0.5 {
                continue;
            }
            let occluded = above.iter().any(|&j| {
                ctxs[j].covers(x, y) && {
                    let (u, v) = ctxs[j].inv.apply(x as f64, y as f64);
                    sample_premul(&ps.elements[j].image, u, v).a > 0.5
                }
            });
            mask.set(x, y, !occluded);
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Multi-scale loss

/// 2x downsampling of a 3-channel f64 buffer matching the image pyramid's
/// semantics (trailing odd row/column dropped).
fn pool_f64(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let dw = (w / 2).max(1);
    let dh = (h / 2).max(1);
    let mut out = vec![0.0f64; dw * dh * 3];
    for y in 0..dh {
        for x in 0..dw {
            for c in 0..3 {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < w && sy < h {
                            sum += src[(sy * w + sx) * 3 + c];
                            n += 1.0;
                        }
                    }
                }
                out[(y * dw + x) * 3 + c] = sum / n;
            }
        }
    }
    (out, dw, dh)
}

/// Adjoint of [`pool_f64`]: distributes a coarse gradient back to the fine
/// grid with the same averaging weights.
fn unpool_add(coarse: &[f64], cw: usize, ch: usize, fine_w: usize, fine_h: usize, out: &mut [f64]) {
    for y in 0..ch {
        for x in 0..cw {
            let mut n = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    if 2 * x + dx < fine_w && 2 * y + dy < fine_h {
                        n += 1.0;
                    }
                }
            }
            for c in 0..3 {
                let g = coarse[(y * cw + x) * 3 + c] / n;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < fine_w && sy < fine_h {
                            out[(sy * fine_w + sx) * 3 + c] += g;
                        }
                    }
                }
            }
        }
    }
}

fn effective_levels(w: usize, h: usize, requested: usize) -> usize {
    let mut levels = requested.max(1);
    while levels > 1 && (w.min(h) >> (levels - 1)) < 4 {
        levels -= 1;
    }
    levels
}

/// RMS pyramid loss and (optionally) its gradient w.r.t. the full-resolution
/// rendered image.
fn pyramid_loss(
    render: &[f64],
    target: &RasterImage,
    levels: usize,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let (w0, h0) = (target.width, target.height);
    let mut diffs: Vec<(Vec<f64>, usize, usize)> = Vec::with_capacity(levels);
    let mut cur: Vec<f64> = (0..w0 * h0 * 3)
        .map(|i| {
            let (px, c) = (i / 3, i % 3);
            render[i] - target.get(px % w0, px / w0, c) as f64
        })
        .collect();
    let (mut cw, mut chh) = (w0, h0);
    for level in 0..levels {
        if level > 0 {
            let (next, nw, nh) = pool_f64(&cur, cw, chh);
            cur = next;
            cw = nw;
            chh = nh;
        }
        diffs.push((cur.clone(), cw, chh));
    }

    let mut total = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(levels);
    for (d, lw, lh) in &diffs {
        let n = (lw * lh * 3) as f64;
        let mse = d.iter().map(|v| v * v).sum::<f64>() / n;
        let l = mse.sqrt();
        total += l;
        if want_grad && l > 1e-12 {
            grads.push(Some(d.iter().map(|v| v / (n * l)).collect()));
        } else {
            grads.push(None);
        }
    }
    if !want_grad {
        return (total, None);
    }

    // Accumulate level gradients back onto the full-resolution grid.
    let mut acc: Vec<f64> = grads[levels - 1]
        .clone()
        .unwrap_or_else(|| vec![0.0; diffs[levels - 1].1 * diffs[levels - 1].2 * 3]);
    for level in (0..levels - 1).rev() {
        let (_, fw, fh) = diffs[level];
        let (_, cw, chh) = diffs[level + 1];
        let mut fine = vec![0.0f64; fw * fh * 3];
        unpool_add(&acc, cw, chh, fw, fh, &mut fine);
        if let Some(g) = &grads[level] {
            for (f, gv) in fine.iter_mut().zip(g) {
                *f += gv;
            }
        }
        acc = fine;
    }
    (total, Some(acc))
}

fn param_array(p: &AffineParams, z: f64) -> [f64; 8] {
    [p.tx, p.ty, p.theta, p.sx, p.sy, p.kx, p.ky, z]
}

fn params_from_array(a: &[f64; 8]) -> (AffineParams, f64) {
    (
        AffineParams { tx: a[0], ty: a[1], theta: a[2], sx: a[3], sy: a[4], kx: a[5], ky: a[6] },
        a[7],
    )
}

/// L1 drift penalty; translation is measured in canvas widths so all seven
/// parameters share a scale. Depth is not penalized.
fn reg_loss(ps: &PlacementSet, prev: &[AffineParams], gamma: f64) -> f64 {
    let w = ps.canvas.0 as f64;
    ps.elements
        .iter()
        .zip(prev)
        .map(|(el, pp)| {
            let (p, q) = (&el.params, pp);
            ((p.tx - q.tx).abs() + (p.ty - q.ty).abs()) / w
                + (p.theta - q.theta).abs()
                + (p.sx - q.sx).abs()
                + (p.sy - q.sy).abs()
                + (p.kx - q.kx).abs()
                + (p.ky - q.ky).abs()
        })
        .sum::<f64>()
        * gamma
}

fn loss_impl(
    ps: &PlacementSet,
    target: &RasterImage,
    background: &RasterImage,
    prev: &[AffineParams],
    cfg: &DcConfig,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<[f64; 8]>>)> {
    check_canvas(ps, target)?;
    check_canvas(ps, background)?;
    if prev.len() != ps.elements.len() {
        return Err(Error::dims(
            format!("{} elements", ps.elements.len()),
            format!("{} prev params", prev.len()),
        ));
    }
    let ctxs = contexts(ps)?;
    let render = render_rgb_f64(ps, &ctxs, background, tau);
    let levels = effective_levels(ps.canvas.0, ps.canvas.1, cfg.pyramid_levels);
    let (pyr, grad_i) = pyramid_loss(&render, target, levels, want_grad);
    let total = pyr + reg_loss(ps, prev, cfg.reg_weight);
    if !want_grad {
        return Ok((total, None));
    }
    let grad_i = grad_i.expect("gradient requested");

    let (w, h) = ps.canvas;
    let n = ps.elements.len();
    // Per-row partial gradients, folded in row order for determinism.
    let partials: Vec<Vec<[f64; 8]>> = parallel::map_indexed(h, |y| {
        let mut g = vec![[0.0f64; 8]; n];
        let active: Vec<usize> =
            (0..n).filter(|&i| ctxs[i].covers_row(y)).collect();
        if active.is_empty() {
            return g;
        }
        let x_lo = active.iter().map(|&i| ctxs[i].bbox.0).min().unwrap();
        let x_hi = active.iter().map(|&i| ctxs[i].bbox.2).max().unwrap();
        let mut samples: Vec<(usize, Sample)> = Vec::new();
        let mut scales: Vec<f64> = Vec::new();
        for x in x_lo..x_hi {
            samples.clear();
            for &i in &active {
                if ctxs[i].covers(x, y) {
                    let (u, v) = ctxs[i].inv.apply(x as f64, y as f64);
                    let s = sample_premul(&ps.elements[i].image, u, v);
                    if s.a > 0.0 {
                        samples.push((i, s));
                    }
                }
            }
            if samples.is_empty() {
                continue;
            }
            let (_, wsum) =
                composite_pixel(ps, &samples, bg_pixel(background, x, y), tau, &mut scales);
            let base = (y * w + x) * 3;
            let r = [grad_i[base], grad_i[base + 1], grad_i[base + 2]];
            let i_px = [render[base], render[base + 1], render[base + 2]];
            let r_dot_i = r[0] * i_px[0] + r[1] * i_px[1] + r[2] * i_px[2];
            for (k, &(i, ref s)) in samples.iter().enumerate() {
                let sc = scales[k];
                let ginv = sc / wsum;
                // d/dalpha and d/dz of the normalized composite.
                let ga = -r_dot_i * ginv;
                let pz =
                    r[0] * (s.p[0] - i_px[0] * s.a) + r[1] * (s.p[1] - i_px[1] * s.a)
                        + r[2] * (s.p[2] - i_px[2] * s.a);
                g[i][7] += pz * ginv / tau;
                // Spatial gradient in source coordinates.
                let mut gu = ga * s.da_du;
                let mut gv = ga * s.da_dv;
                for c in 0..3 {
                    gu += r[c] * ginv * s.dp_du[c];
                    gv += r[c] * ginv * s.dp_dv[c];
                }
                // Chain through the inverse transform.
                let ctx = &ctxs[i];
                g[i][0] += gu * ctx.du_dt[0].0 + gv * ctx.du_dt[0].1;
                g[i][1] += gu * ctx.du_dt[1].0 + gv * ctx.du_dt[1].1;
                let (u, v) = ctx.inv.apply(x as f64, y as f64);
                let rel = (u - ctx.anchor.0, v - ctx.anchor.1);
                for (kp, gmat) in ctx.g_lin.iter().enumerate() {
                    let (du, dv) = gmat.apply(rel.0, rel.1);
                    g[i][2 + kp] += -(gu * du + gv * dv);
                }
            }
        }
        g
    });
    let mut grad = vec![[0.0f64; 8]; n];
    for row in partials {
        for (acc, part) in grad.iter_mut().zip(row) {
            for k in 0..8 {
                acc[k] += part[k];
            }
        }
    }
    // Regularizer gradient (subgradient 0 at exact zero drift).
    let wf = ps.canvas.0 as f64;
    for (i, (el, pp)) in ps.elements.iter().zip(prev).enumerate() {
        let d = param_array(&el.params, 0.0);
        let q = param_array(pp, 0.0);
        for k in 0..7 {
            let diff = d[k] - q[k];
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[i][k] += cfg.reg_weight * s * if k < 2 { 1.0 / wf } else { 1.0 };
        }
    }
    Ok((total, Some(grad)))
}

/// Multi-scale RMS reconstruction loss plus the L1 drift regularizer.
pub fn dc_loss(
    ps: &PlacementSet,
    target: &RasterImage,
    background: &RasterImage,
    prev_params: &[AffineParams],
    cfg: &DcConfig,
) -> Result<f64> {
    Ok(loss_impl(ps, target, background, prev_params, cfg, cfg.tau, false)?.0)
}

/// [`dc_loss`] with its analytic gradient per element:
/// `[tx, ty, theta, sx, sy, kx, ky, z]`.
pub fn dc_loss_grad(
    ps: &PlacementSet,
    target: &RasterImage,
    background: &RasterImage,
    prev_params: &[AffineParams],
    cfg: &DcConfig,
) -> Result<(f64, Vec<[f64; 8]>)> {
    let (loss, grad) = loss_impl(ps, target, background, prev_params, cfg, cfg.tau, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone)]
pub struct DcResult {
    pub placements: PlacementSet,
    pub final_loss: f64,
    /// Accepted losses, one segment per temperature stage. Within a segment
    /// the sequence never increases.
    pub loss_trace: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn set_params(ps: &mut PlacementSet, x: &[[f64; 8]]) {
    for (el, a) in ps.elements.iter_mut().zip(x) {
        let (p, z) = params_from_array(a);
        el.params = p;
        el.z = z;
    }
}

fn params_valid(x: &[[f64; 8]]) -> bool {
    x.iter().all(|a| {
        let (p, z) = params_from_array(a);
        p.is_valid() && z.is_finite()
    })
}

/// Fits all transform parameters and depths by momentum gradient descent
/// with per-group step sizes, step-halving on loss increase, and temperature
/// annealing. Depths are rounded to ranks (ties by id) on return.
pub fn dc_optimize(
    init: &PlacementSet,
    target: &RasterImage,
    background: &RasterImage,
    cfg: &DcConfig,
) -> Result<DcResult> {
    assert!(!init.elements.is_empty());
    let n = init.elements.len();
    let prev: Vec<AffineParams> = init.elements.iter().map(|e| e.params).collect();
    let steps: [f64; 8] = [
        cfg.step_translation,
        cfg.step_translation,
        cfg.step_angle,
        cfg.step_scale,
        cfg.step_scale,
        cfg.step_shear,
        cfg.step_shear,
        cfg.step_z,
    ];

    let mut ps = init.clone();
    let mut x: Vec<[f64; 8]> = ps.elements.iter().map(|e| param_array(&e.params, e.z)).collect();
    let mut tau = cfg.tau;
    let max_anneals = if cfg.tau_anneal_every > 0 { cfg.max_iters / cfg.tau_anneal_every } else { 0 };
    let mut anneals = 0usize;

    let eval = |ps: &PlacementSet, tau: f64| -> Result<(f64, Vec<[f64; 8]>)> {
        let (l, g) = loss_impl(ps, target, background, &prev, cfg, tau, true)?;
        Ok((l, g.expect("gradient requested")))
    };

    let (mut loss, mut grad) = eval(&ps, tau)?;
    let mut trace: Vec<Vec<f64>> = vec![vec![loss]];
    let mut vel = vec![[0.0f64; 8]; n];
    let mut mult = 1.0f64;
    let mut stall = 0usize;
    let mut iters = 0usize;

    let mut iter = 0usize;
    while iter < cfg.max_iters {
        iter += 1;
        iters = iter;
        let mut anneal_now =
            cfg.tau_anneal_every > 0 && iter % cfg.tau_anneal_every == 0 && anneals < max_anneals;

        if !anneal_now {
            for (v, g) in vel.iter_mut().zip(&grad) {
                for k in 0..8 {
                    v[k] = cfg.momentum * v[k] + g[k];
                }
            }
            let mut cand = x.clone();
            for (c, v) in cand.iter_mut().zip(&vel) {
                for k in 0..8 {
                    c[k] -= mult * steps[k] * v[k];
                }
            }
            let accepted = if params_valid(&cand) {
                let mut cps = ps.clone();
                set_params(&mut cps, &cand);
                match eval(&cps, tau) {
                    Ok((cl, cg)) if cl <= loss => {
                        let delta = loss - cl;
                        x = cand;
                        ps = cps;
                        loss = cl;
                        grad = cg;
                        trace.last_mut().unwrap().push(cl);
                        mult = (mult * 1.2).min(1.0);
                        stall = if delta < cfg.convergence_tol { stall + 1 } else { 0 };
                        true
                    }
                    // Singular or worse candidates reject the step.
                    _ => false,
                }
            } else {
                false
            };
            if !accepted {
                mult *= 0.5;
                vel = vec![[0.0f64; 8]; n];
            }
            if stall >= 3 || mult < 1e-8 {
                if anneals < max_anneals {
                    anneal_now = true;
                } else {
                    break;
                }
            }
        }

        if anneal_now {
            tau *= cfg.tau_anneal_factor;
            anneals += 1;
            let (l, g) = eval(&ps, tau)?;
            loss = l;
            grad = g;
            trace.push(vec![loss]);
            vel = vec![[0.0f64; 8]; n];
            mult = 1.0;
            stall = 0;
        }
    }

    // Round depths to ranks, ties broken by id.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (ps.elements[a].z, ps.elements[a].id)
            .partial_cmp(&(ps.elements[b].z, ps.elements[b].id))
            .unwrap()
    });
    for (rank, &i) in order.iter().enumerate() {
        ps.elements[i].z = rank as f64;
    }
    let final_loss = loss_impl(&ps, target, background, &prev, cfg, tau, false)?.0;
    Ok(DcResult { placements: ps, final_loss, loss_trace: trace, iterations: iters })
}
