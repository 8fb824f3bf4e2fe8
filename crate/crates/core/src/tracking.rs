//! Stages 2–3: candidate mapping graphs between previous-frame objects and
//! current-frame regions, visibility-loss scoring, greedy conflict-free
//! selection, ID propagation, and canonical image maintenance.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::diffcomp::{composite_hard, dc_optimize, visibility_mask, PlacementSet, SourceElement};
use crate::error::{Error, Result};
use crate::flow::{compute_flow, coarse_weight, ransac_affine_map, template_init, FlowField};
use crate::geom::{Affine, AffineParams, Mat2};
use crate::imaging::{detect_edges, BinaryMask, RasterImage};
use crate::segmentation::{
    estimate_background, extract_regions, foreground_mask, BackgroundKind, BackgroundModel, Region,
};

/// One frame of an object's presence: canonical-to-frame transform, depth
/// rank, and the set of frame pixels carrying the object's ID.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub params: AffineParams,
    pub z: i64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObject {
    pub object_id: u64,
    /// RGBA; alpha support defines the object's shape.
    pub canonical: RasterImage,
    pub canonical_area: usize,
    pub timeline: BTreeMap<usize, Placement>,
    pub alive: bool,
}

impl TrackedObject {
    pub fn first_frame(&self) -> usize {
        *self.timeline.keys().next().expect("nonempty timeline")
    }

    pub fn last_frame(&self) -> usize {
        *self.timeline.keys().next_back().expect("nonempty timeline")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingEdge {
    pub object_id: u64,
    pub region_id: u32,
    /// Fraction of the source's visible area covered by the target.
    pub w_src: f64,
    /// Fraction of the target's area covered by the source.
    pub w_tgt: f64,
}

/// Candidate graph for one frame transition. Sources are objects (forward)
/// or regions (backward); `placements` holds the jointly optimized source
/// elements, `target`/`target_masks` what they were optimized against.
#[derive(Debug, Clone)]
pub struct MappingGraph {
    pub direction: Direction,
    pub edges: Vec<MappingEdge>,
    pub placements: PlacementSet,
    pub target: RasterImage,
    /// Target-node support masks, keyed by region id (forward) or object id
    /// (backward).
    pub target_masks: Vec<(u64, BinaryMask)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingType {
    OneToOne,
    OneToManyNoSplit,
    ManyToOneNoMerge,
    ManyToOneMerge,
    OneToManySplit,
    Disappear,
    Appear,
}

#[derive(Debug, Clone)]
pub struct CandidateMapping {
    pub direction: Direction,
    pub objects: Vec<u64>,
    pub regions: Vec<u32>,
    pub mtype: MappingType,
    pub score: f64,
    /// Optimized source placements: (source element id, params, depth).
    pub transforms: Vec<(u64, AffineParams, f64)>,
}

impl CandidateMapping {
    fn conflicts_with(&self, other: &CandidateMapping) -> bool {
        self.objects.iter().any(|o| other.objects.contains(o))
            || self.regions.iter().any(|r| other.regions.contains(r))
    }
}

// ---------------------------------------------------------------------------
// Coverage weights

/// Eq. 2 / Eq. 3 pair: fraction of the source's visible pixels inside the
/// target, and fraction of the target's pixels covered by the source.
pub fn coverage_weights(src_vis: &BinaryMask, tgt_vis: &BinaryMask) -> (f64, f64) {
    let inter = src_vis.intersection_area(tgt_vis) as f64;
    let sa = src_vis.area() as f64;
    let ta = tgt_vis.area() as f64;
    (if sa > 0.0 { inter / sa } else { 0.0 }, if ta > 0.0 { inter / ta } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Helpers

/// Tight RGBA crop of the frame's masked pixels, plus the crop origin.
pub fn crop_rgba(frame: &RasterImage, mask: &BinaryMask) -> Result<(RasterImage, (usize, usize))> {
    let (x0, y0, x1, y1) = mask.bbox().ok_or(Error::EmptyMask)?;
    let mut out = RasterImage::new(x1 - x0, y1 - y0, 4);
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.get(x, y) {
                for c in 0..3 {
                    out.set(x - x0, y - y0, c, frame.get(x, y, c));
                }
                out.set(x - x0, y - y0, 3, 1.0);
            }
        }
    }
    Ok((out, (x0, y0)))
}

fn anchor_of(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Canonical-to-frame params that place a crop at its original position.
pub fn placement_for_crop(
    crop: &RasterImage,
    origin: (usize, usize),
    canvas: (usize, usize),
) -> Result<AffineParams> {
    let aff = Affine {
        m: crate::geom::Mat2::identity(),
        b: [origin.0 as f64, origin.1 as f64],
    };
    AffineParams::from_affine(&aff, anchor_of(crop.width, crop.height), anchor_of(canvas.0, canvas.1))
}

fn element_for_object(obj: &TrackedObject, params: AffineParams, z: f64) -> SourceElement {
    SourceElement { id: obj.object_id, image: obj.canonical.clone(), params, z }
}

fn bg_image(bg: &BackgroundModel, w: usize, h: usize) -> RasterImage {
    match &bg.kind {
        BackgroundKind::StaticImage(img) => img.clone(),
        BackgroundKind::SolidColor(lab) => {
            let rgb = crate::imaging::lab_pixel_to_rgb(lab[0], lab[1], lab[2]);
            RasterImage::filled(w, h, &[rgb[0] as f32, rgb[1] as f32, rgb[2] as f32])
        }
    }
}

/// Renders the objects' placements at frame `t` over the background.
pub fn render_tracked(
    objects: &[TrackedObject],
    t: usize,
    background: &RasterImage,
) -> Result<(RasterImage, PlacementSet)> {
    let canvas = (background.width, background.height);
    let mut elements = Vec::new();
    for obj in objects {
        if let Some(p) = obj.timeline.get(&t) {
            elements.push(element_for_object(obj, p.params, p.z as f64));
        }
    }
    let ps = PlacementSet { canvas, elements };
    let img = composite_hard(&ps, background)?;
    Ok((img, ps))
}

// ---------------------------------------------------------------------------
// Graph construction

/// Full-canvas RMS of the hard composite against a target frame.
fn hard_composite_rms(
    ps: &PlacementSet,
    background: &RasterImage,
    target: &RasterImage,
) -> Result<f64> {
    let img = composite_hard(ps, background)?;
    let n = target.width * target.height;
    let c = target.channels.min(3);
    let mut sum = 0.0f64;
    for i in 0..n {
        let mut px = 0.0;
        for ch in 0..c {
            let d = (img.data[i * img.channels + ch] - target.data[i * target.channels + ch]) as f64;
            px += d * d;
        }
        sum += px / c as f64;
    }
    Ok((sum / n as f64).sqrt())
}

/// Componentwise median flow vector over a mask.
fn median_flow(flow: &FlowField, mask: &BinaryMask) -> Option<(f64, f64)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let (dx, dy) = flow.at(x, y);
                xs.push(dx);
                ys.push(dy);
            }
        }
    }
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f32::total_cmp);
    ys.sort_by(f32::total_cmp);
    let mid = xs.len() / 2;
    Some((xs[mid] as f64, ys[mid] as f64))
}

/// Mean squared RGB error of carrying the source support through `step` into
/// the target frame; pixels mapped out of bounds count as maximal error.
fn step_photo_cost(
    step: &Affine,
    mask: &BinaryMask,
    src_frame: &RasterImage,
    target_img: &RasterImage,
) -> f64 {
    let c = src_frame.channels.min(3).min(target_img.channels);
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            n += 1;
            let (px, py) = step.apply(x as f64, y as f64);
            let (tx, ty) = (px.round() as isize, py.round() as isize);
            if tx < 0 || ty < 0 || tx as usize >= target_img.width || ty as usize >= target_img.height
            {
                acc += c as f64;
                continue;
            }
            for ch in 0..c {
                let d = (src_frame.get(x, y, ch) - target_img.get(tx as usize, ty as usize, ch))
                    as f64;
                acc += d * d;
            }
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        acc / n as f64
    }
}

/// Flow-based initialization of one source's canonical-to-target transform:
/// RANSAC on the flow restricted to the source's current support, composed
/// onto its current placement; falls back to a rotation-search template fit
/// against the best-matching target mask, then to the current placement.
#[allow(clippy::too_many_arguments)]
fn init_source_params(
    cur_affine: &Affine,
    cur_mask: &BinaryMask,
    src_image: &RasterImage,
    src_frame: &RasterImage,
    flow: &FlowField,
    flow_back: &FlowField,
    targets: &[(u64, BinaryMask)],
    target_img: &RasterImage,
    cfg: &Config,
) -> AffineParams {
    let canvas_anchor = anchor_of(flow.width, flow.height);
    let src_anchor = anchor_of(src_image.width, src_image.height);
    // Two flow-derived candidate steps: the RANSAC affine and a pure
    // median-flow translation. Uniform sprite interiors leave block matching
    // ambiguous, which RANSAC can fit as a spurious scale ramp; the direct
    // photometric cost picks whichever step actually lands on the target.
    let mut steps: Vec<Affine> = Vec::new();
    if let Ok(step) = ransac_affine_map(flow, cur_mask, &cfg.flow) {
        steps.push(step);
    }
    // Translation candidate: the photometrically best integer offset near
    // either the median flow or a target-centroid displacement. Block
    // matching drifts inside uniform regions, so neither center is trusted
    // on its own.
    let mut centers: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    if let Some((dx, dy)) = median_flow(flow, cur_mask) {
        centers.push((dx.round(), dy.round()));
    }
    if let Some(sc) = cur_mask.centroid() {
        for (_, tmask) in targets {
            if let Some(tc) = tmask.centroid() {
                centers.push(((tc.0 - sc.0).round(), (tc.1 - sc.1).round()));
            }
        }
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &(cx, cy) in &centers {
        for oy in -3..=3 {
            for ox in -3..=3 {
                let cand =
                    Affine { m: Mat2::identity(), b: [cx + ox as f64, cy + oy as f64] };
                let cost = step_photo_cost(&cand, cur_mask, src_frame, target_img);
                if best.map_or(true, |(bc, _, _)| cost < bc) {
                    best = Some((cost, cand.b[0], cand.b[1]));
                }
            }
        }
    }
    if let Some((_, bx, by)) = best {
        steps.push(Affine { m: Mat2::identity(), b: [bx, by] });
    }
    let best_step = steps.into_iter().min_by(|a, b| {
        step_photo_cost(a, cur_mask, src_frame, target_img)
            .total_cmp(&step_photo_cost(b, cur_mask, src_frame, target_img))
    });
    if let Some(step) = best_step {
        let composed = step.compose(cur_affine);
        if let Ok(p) = AffineParams::from_affine(&composed, src_anchor, canvas_anchor) {
            if p.is_valid() {
                return p;
            }
        }
    }
    // Template fallback against the most compatible target mask.
    let mut best: Option<(f64, &BinaryMask)> = None;
    for (_, tmask) in targets {
        if tmask.is_empty() {
            continue;
        }
        let w = coarse_weight(
            src_frame,
            cur_mask,
            target_img,
            tmask,
            flow,
            flow_back,
            cfg.imaging.histogram_bins,
            cfg.imaging.efd_orders,
        )
        .map(|cw| cw.w_shape * cw.w_color)
        .unwrap_or(0.0);
        if best.map_or(true, |(bw, _)| w > bw) {
            best = Some((w, tmask));
        }
    }
    if let Some((_, tmask)) = best {
        let obj_mask = src_image.alpha_mask(0.5);
        if let Ok(p) = template_init(src_image, &obj_mask, target_img, tmask, cfg.flow.template_stride_deg)
        {
            let aff = p.to_affine((0.0, 0.0), (0.0, 0.0));
            if let Ok(p2) = AffineParams::from_affine(&aff, src_anchor, canvas_anchor) {
                if p2.is_valid() {
                    return p2;
                }
            }
        }
    }
    AffineParams::from_affine(cur_affine, src_anchor, canvas_anchor)
        .unwrap_or_else(|_| AffineParams::identity())
}

struct GraphSource {
    id: u64,
    image: RasterImage,
    /// Support mask in the source frame, for flow restriction and pruning.
    frame_mask: BinaryMask,
    init: AffineParams,
    /// Pose carried over from the source frame, the no-motion hypothesis.
    prev: AffineParams,
    /// Constant-velocity extrapolation of the last step, when history exists.
    extrap: Option<AffineParams>,
    z: f64,
}

/// Shared machinery: jointly optimizes all sources against the target and
/// keeps, per source, its best w_src edge and, per target, its best w_tgt
/// edge (both nonzero).
#[allow(clippy::too_many_arguments)]
fn build_graph_from_sources(
    direction: Direction,
    sources: Vec<GraphSource>,
    src_frame: &RasterImage,
    target: &RasterImage,
    target_masks: Vec<(u64, BinaryMask)>,
    background: &RasterImage,
    flow: &FlowField,
    flow_back: &FlowField,
    cfg: &Config,
) -> Result<MappingGraph> {
    let canvas = (target.width, target.height);
    let init = PlacementSet {
        canvas,
        elements: sources
            .iter()
            .map(|s| SourceElement { id: s.id, image: s.image.clone(), params: s.init, z: s.z })
            .collect(),
    };
    let mut placements = if init.elements.is_empty() {
        init
    } else {
        dc_optimize(&init, target, background, &cfg.dc)?.placements
    };
    // The soft sigmoid can trade shape fidelity for loss; per element, keep
    // whichever of {optimized, flow init} renders better under the hard
    // compositor.
    // Relative depth only becomes observable once supports overlap, and the
    // soft z gradient rarely crosses an existing gap; accept pairwise z swaps
    // that improve the hard render.
    let z_swap_pass = |placements: &mut PlacementSet| -> Result<()> {
        if placements.elements.len() < 2 {
            return Ok(());
        }
        let mut cur = hard_composite_rms(placements, background, target)?;
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..placements.elements.len() {
                for j in i + 1..placements.elements.len() {
                    let (zi, zj) = (placements.elements[i].z, placements.elements[j].z);
                    if zi == zj {
                        continue;
                    }
                    placements.elements[i].z = zj;
                    placements.elements[j].z = zi;
                    let swapped = hard_composite_rms(placements, background, target)?;
                    if swapped + 1e-9 < cur {
                        cur = swapped;
                        improved = true;
                    } else {
                        placements.elements[i].z = zi;
                        placements.elements[j].z = zj;
                    }
                }
            }
        }
        Ok(())
    };
    z_swap_pass(&mut placements)?;
    // The soft sigmoid can trade shape fidelity for loss; per element, keep
    // whichever of {carried pose, flow init, optimized} renders best in the
    // context of the full joint composite (solo comparison would let occluded
    // elements drift out from under their occluders). Ties favor the carried
    // pose so hidden elements hold still instead of following flow noise.
    for i in 0..placements.elements.len() {
        let id = placements.elements[i].id;
        let src = sources.iter().find(|s| s.id == id).expect("element has a source");
        let opt = placements.elements[i].params;
        let mut cands = vec![src.prev];
        cands.extend(src.extrap);
        cands.push(src.init);
        cands.push(opt);
        let mut best = 0;
        let mut best_rms = f64::INFINITY;
        // A later candidate must clear the margin: sub-millirms wins are AA
        // noise, and the earlier hypotheses are the more conservative ones.
        for (k, cand) in cands.iter().enumerate() {
            placements.elements[i].params = *cand;
            let rms = hard_composite_rms(&placements, background, target)?;
            if rms + 1e-3 < best_rms {
                best_rms = rms;
                best = k;
            }
        }
        placements.elements[i].params = cands[best];
        if std::env::var("MV_DBG").is_ok() {
            let rmss: Vec<f64> = cands
                .iter()
                .map(|c| {
                    placements.elements[i].params = *c;
                    hard_composite_rms(&placements, background, target).unwrap_or(f64::NAN)
                })
                .collect();
            placements.elements[i].params = cands[best];
            eprintln!(
                "GUARD dir={:?} id={id} best={best} rms={rmss:.4?} cands_tx={:?}",
                direction,
                cands.iter().map(|c| (c.tx * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
    }
    z_swap_pass(&mut placements)?;

    let mut edges: Vec<MappingEdge> = Vec::new();
    let mut vis = Vec::with_capacity(sources.len());
    for s in &sources {
        vis.push(visibility_mask(&placements, s.id)?);
    }
    // A fully occluded source still needs its graph edge (it shares the
    // occluder's region); stand in its un-occluded support.
    for (i, s) in sources.iter().enumerate() {
        if vis[i].is_empty() {
            if let Some(el) = placements.elements.iter().find(|e| e.id == s.id) {
                let solo = PlacementSet { canvas, elements: vec![el.clone()] };
                vis[i] = visibility_mask(&solo, s.id)?;
            }
        }
    }
    if std::env::var("MV_DBG").is_ok() {
        for (i, s) in sources.iter().enumerate() {
            eprintln!(
                "SRC dir={:?} id={} fm_area={} vis_area={} init=({:.2},{:.2})",
                direction, s.id, s.frame_mask.area(), vis[i].area(), s.init.tx, s.init.ty
            );
        }
    }
    // All (source, target) coverage pairs, with optional coarse pruning.
    let mut w = vec![vec![(0.0f64, 0.0f64); target_masks.len()]; sources.len()];
    for (si, s) in sources.iter().enumerate() {
        for (ti, (_, tmask)) in target_masks.iter().enumerate() {
            if tmask.is_empty() {
                continue;
            }
            // Mostly-occluded sources show a sliver whose shape and colors no
            // longer resemble anything; pruning on them would sever the edge
            // to their occluder's region.
            let occluded = s.frame_mask.area() * 2 < s.image.alpha_mask(0.5).area();
            if cfg.tracker.coarse_prune && !s.frame_mask.is_empty() && !occluded {
                let cw = coarse_weight(
                    src_frame,
                    &s.frame_mask,
                    target,
                    tmask,
                    flow,
                    flow_back,
                    cfg.imaging.histogram_bins,
                    cfg.imaging.efd_orders,
                )?;
                if std::env::var("MV_DBG").is_ok() {
                    eprintln!(
                        "EDGE dir={:?} src={} tgt={} w_shape={:.3} w_color={:.3} w_flow={:.3} w={:.4} cov={:?}",
                        direction, s.id, target_masks[ti].0, cw.w_shape, cw.w_color, cw.w_flow, cw.w,
                        coverage_weights(&vis[si], tmask)
                    );
                }
                if cw.w == 0.0 {
                    continue;
                }
            }
            w[si][ti] = coverage_weights(&vis[si], tmask);
        }
    }
    let mut push_edge = |si: usize, ti: usize| {
        let (ws, wt) = w[si][ti];
        let (oid, rid) = match direction {
            Direction::Forward => (sources[si].id, target_masks[ti].0 as u32),
            Direction::Backward => (target_masks[ti].0, sources[si].id as u32),
        };
        if !edges.iter().any(|e| e.object_id == oid && e.region_id == rid) {
            edges.push(MappingEdge { object_id: oid, region_id: rid, w_src: ws, w_tgt: wt });
        }
    };
    for si in 0..sources.len() {
        if let Some(ti) = (0..target_masks.len())
            .filter(|&ti| w[si][ti].0 > 0.0)
            .max_by(|&a, &b| w[si][a].0.partial_cmp(&w[si][b].0).unwrap())
        {
            push_edge(si, ti);
        }
    }
    for ti in 0..target_masks.len() {
        if let Some(si) = (0..sources.len())
            .filter(|&si| w[si][ti].1 > 0.0)
            .max_by(|&a, &b| w[a][ti].1.partial_cmp(&w[b][ti].1).unwrap())
        {
            push_edge(si, ti);
        }
    }
    Ok(MappingGraph { direction, edges, placements, target: target.clone(), target_masks })
}

/// Builds the forward (objects against frame t) or backward (regions against
/// the rendered frame t−1) candidate graph for the transition t−1 → t.
#[allow(clippy::too_many_arguments)]
pub fn build_mapping_graph(
    objects: &[TrackedObject],
    prev_frame: &RasterImage,
    frame: &RasterImage,
    regions: &[Region],
    t: usize,
    direction: Direction,
    background: &RasterImage,
    cfg: &Config,
) -> Result<MappingGraph> {
    let alive: Vec<&TrackedObject> =
        objects.iter().filter(|o| o.alive && o.timeline.contains_key(&(t - 1))).collect();
    match direction {
        Direction::Forward => {
            let flow = compute_flow(prev_frame, frame, &cfg.flow)?;
            let flow_back = compute_flow(frame, prev_frame, &cfg.flow)?;
            let target_masks: Vec<(u64, BinaryMask)> =
                regions.iter().map(|r| (r.region_id as u64, r.mask.clone())).collect();
            let canvas_anchor = anchor_of(frame.width, frame.height);
            let sources = alive
                .iter()
                .map(|o| {
                    let p = &o.timeline[&(t - 1)];
                    let src_anchor = anchor_of(o.canonical.width, o.canonical.height);
                    let cur = p.params.to_affine(src_anchor, canvas_anchor);
                    let init = init_source_params(
                        &cur, &p.mask, &o.canonical, prev_frame, &flow, &flow_back,
                        &target_masks, frame, cfg,
                    );
                    let extrap = o.timeline.get(&t.wrapping_sub(2)).and_then(|q| {
                        let p1 = p.params.to_affine(src_anchor, canvas_anchor);
                        let p2 = q.params.to_affine(src_anchor, canvas_anchor);
                        let step = p1.compose(&p2.inverse().ok()?);
                        AffineParams::from_affine(&step.compose(&p1), src_anchor, canvas_anchor)
                            .ok()
                            .filter(|p| p.is_valid())
                    });
                    GraphSource {
                        id: o.object_id,
                        image: o.canonical.clone(),
                        frame_mask: p.mask.clone(),
                        init,
                        prev: p.params,
                        extrap,
                        z: p.z as f64,
                    }
                })
                .collect();
            build_graph_from_sources(
                direction, sources, prev_frame, frame, target_masks, background, &flow,
                &flow_back, cfg,
            )
        }
        Direction::Backward => {
            let owned: Vec<TrackedObject> = alive.iter().map(|o| (*o).clone()).collect();
            let (rendered, prev_ps) = render_tracked(&owned, t - 1, background)?;
            let flow = compute_flow(frame, &rendered, &cfg.flow)?;
            let flow_back = compute_flow(&rendered, frame, &cfg.flow)?;
            let mut target_masks = Vec::new();
            for o in &owned {
                target_masks.push((o.object_id, visibility_mask(&prev_ps, o.object_id)?));
            }
            let canvas = (frame.width, frame.height);
            let mut sources = Vec::new();
            for (i, r) in regions.iter().enumerate() {
                let (crop, origin) = crop_rgba(frame, &r.mask)?;
                let place = placement_for_crop(&crop, origin, canvas)?;
                let src_anchor = anchor_of(crop.width, crop.height);
                let cur = place.to_affine(src_anchor, anchor_of(canvas.0, canvas.1));
                let init = init_source_params(
                    &cur, &r.mask, &crop, frame, &flow, &flow_back, &target_masks, &rendered,
                    cfg,
                );
                sources.push(GraphSource {
                    id: r.region_id as u64,
                    image: crop,
                    frame_mask: r.mask.clone(),
                    init,
                    prev: place,
                    extrap: None,
                    z: i as f64,
                });
            }
            build_graph_from_sources(
                direction, sources, frame, &rendered, target_masks, background, &flow,
                &flow_back, cfg,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Candidate extraction

fn mtype_for(direction: Direction, n_objects: usize, n_regions: usize) -> MappingType {
    match (n_objects, n_regions) {
        (1, 1) => MappingType::OneToOne,
        (1, _) => match direction {
            Direction::Forward => MappingType::OneToManyNoSplit,
            Direction::Backward => MappingType::OneToManySplit,
        },
        (_, 1) => match direction {
            Direction::Forward => MappingType::ManyToOneNoMerge,
            Direction::Backward => MappingType::ManyToOneMerge,
        },
        _ => unreachable!("many-to-many candidates are never emitted"),
    }
}

/// Connected components of the bipartite graph become candidates directly;
/// many-to-many components are broken into per-node stars.
pub fn extract_candidates(graph: &MappingGraph) -> Vec<CandidateMapping> {
    let edges = &graph.edges;
    if edges.is_empty() {
        return Vec::new();
    }
    // Union-find over edge indices via node keys.
    let mut comp: Vec<usize> = (0..edges.len()).collect();
    fn find(comp: &mut Vec<usize>, i: usize) -> usize {
        if comp[i] != i {
            let r = find(comp, comp[i]);
            comp[i] = r;
        }
        comp[i]
    }
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            if edges[i].object_id == edges[j].object_id || edges[i].region_id == edges[j].region_id
            {
                let (a, b) = (find(&mut comp, i), find(&mut comp, j));
                if a != b {
                    comp[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..edges.len() {
        let r = find(&mut comp, i);
        groups.entry(r).or_default().push(i);
    }

    let make = |edge_ids: &[usize]| -> CandidateMapping {
        let mut objects: Vec<u64> = edge_ids.iter().map(|&i| edges[i].object_id).collect();
        let mut regions: Vec<u32> = edge_ids.iter().map(|&i| edges[i].region_id).collect();
        objects.sort_unstable();
        objects.dedup();
        regions.sort_unstable();
        regions.dedup();
        let source_ids: Vec<u64> = match graph.direction {
            Direction::Forward => objects.clone(),
            Direction::Backward => regions.iter().map(|&r| r as u64).collect(),
        };
        let transforms = source_ids
            .iter()
            .filter_map(|&id| {
                graph
                    .placements
                    .elements
                    .iter()
                    .find(|e| e.id == id)
                    .map(|e| (id, e.params, e.z))
            })
            .collect();
        let mtype = mtype_for(graph.direction, objects.len(), regions.len());
        CandidateMapping {
            direction: graph.direction,
            objects,
            regions,
            mtype,
            score: f64::INFINITY,
            transforms,
        }
    };

    let mut out = Vec::new();
    for ids in groups.values() {
        let n_obj = {
            let mut o: Vec<u64> = ids.iter().map(|&i| edges[i].object_id).collect();
            o.sort_unstable();
            o.dedup();
            o.len()
        };
        let n_reg = {
            let mut r: Vec<u32> = ids.iter().map(|&i| edges[i].region_id).collect();
            r.sort_unstable();
            r.dedup();
            r.len()
        };
        if n_obj == 1 || n_reg == 1 {
            out.push(make(ids));
        } else {
            // Star decomposition: one candidate per node over its incident
            // edges.
            let mut obj_ids: Vec<u64> = ids.iter().map(|&i| edges[i].object_id).collect();
            obj_ids.sort_unstable();
            obj_ids.dedup();
            for o in obj_ids {
                let star: Vec<usize> =
                    ids.iter().copied().filter(|&i| edges[i].object_id == o).collect();
                out.push(make(&star));
            }
            let mut reg_ids: Vec<u32> = ids.iter().map(|&i| edges[i].region_id).collect();
            reg_ids.sort_unstable();
            reg_ids.dedup();
            for r in reg_ids {
                let star: Vec<usize> =
                    ids.iter().copied().filter(|&i| edges[i].region_id == r).collect();
                out.push(make(&star));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scoring

/// L^vis: RMS RGB error between the candidate's sources composited over the
/// background and the target, over the union of source visibility masks and
/// target-node masks.
pub fn score_candidate(
    c: &CandidateMapping,
    graph: &MappingGraph,
    background: &RasterImage,
) -> Result<f64> {
    let source_ids: Vec<u64> = c.transforms.iter().map(|(id, _, _)| *id).collect();
    let mut m_all = BinaryMask::new(graph.target.width, graph.target.height);
    for &id in &source_ids {
        m_all.union_with(&visibility_mask(&graph.placements, id)?);
    }
    let target_ids: Vec<u64> = match c.direction {
        Direction::Forward => c.regions.iter().map(|&r| r as u64).collect(),
        Direction::Backward => c.objects.clone(),
    };
    for (id, mask) in &graph.target_masks {
        if target_ids.contains(id) {
            m_all.union_with(mask);
        }
    }
    if m_all.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sub = PlacementSet {
        canvas: graph.placements.canvas,
        elements: graph
            .placements
            .elements
            .iter()
            .filter(|e| source_ids.contains(&e.id))
            .cloned()
            .collect(),
    };
    let rendered = composite_hard(&sub, background)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..m_all.height {
        for x in 0..m_all.width {
            if !m_all.get(x, y) {
                continue;
            }
            let mut px = 0.0;
            for ch in 0..3 {
                let d = (rendered.get(x, y, ch) - graph.target.get(x, y, ch)) as f64;
                px += d * d;
            }
            sum += px / 3.0;
            n += 1;
        }
    }
    if std::env::var("MV_DBG").is_ok() {
        let mut bad = 0usize;
        for y in 0..m_all.height {
            for x in 0..m_all.width {
                if !m_all.get(x, y) {
                    continue;
                }
                let mut px = 0.0;
                for ch in 0..3 {
                    let d = (rendered.get(x, y, ch) - graph.target.get(x, y, ch)) as f64;
                    px += d * d;
                }
                if px / 3.0 > 0.05 {
                    bad += 1;
                }
            }
        }
        eprintln!(
            "SCORE dir={:?} objects={:?} regions={:?} n={n} bad={bad}",
            c.direction, c.objects, c.regions
        );
        if c.objects.len() > 1 {
            let tag = format!("{:?}_n{n}_bad{bad}", c.direction);
            let _ = crate::imaging::save_png(
                std::path::Path::new(&format!("/root/crate/tmpdbg/score_{tag}_render.png")),
                &rendered,
            );
            let _ = crate::imaging::save_png(
                std::path::Path::new(&format!("/root/crate/tmpdbg/score_{tag}_target.png")),
                &graph.target,
            );
        }
    }
    Ok((sum / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Selection

fn selection_key(c: &CandidateMapping) -> (f64, u8, Vec<u64>, Vec<u32>) {
    (
        c.score,
        match c.direction {
            Direction::Forward => 0,
            Direction::Backward => 1,
        },
        c.objects.clone(),
        c.regions.clone(),
    )
}

/// Greedy minimum-score selection with conflict removal; stops at the first
/// candidate whose score exceeds `epsilon`.
pub fn select_mappings(candidates: &[CandidateMapping], epsilon: f64) -> Vec<CandidateMapping> {
    let mut pool: Vec<CandidateMapping> =
        candidates.iter().filter(|c| c.score.is_finite()).cloned().collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| selection_key(a).partial_cmp(&selection_key(b)).unwrap())
            .map(|(i, _)| i)
            .expect("pool nonempty");
        if pool[best].score > epsilon {
            break;
        }
        let chosen = pool.swap_remove(best);
        pool.retain(|c| !c.conflicts_with(&chosen));
        out.push(chosen);
    }
    out
}

// ---------------------------------------------------------------------------
// ID propagation

/// Per-frame label assignment: each object id with its pixel mask. Pixels
/// may carry multiple ids (many-to-one without merge).
pub type FrameLabels = Vec<(u64, BinaryMask)>;

pub struct PropagationOutcome {
    pub labels: FrameLabels,
    pub log: Vec<String>,
}

fn fresh_object_from_region(
    id: u64,
    frame: &RasterImage,
    region: &Region,
    t: usize,
    z: i64,
) -> Result<TrackedObject> {
    let (crop, origin) = crop_rgba(frame, &region.mask)?;
    let params = placement_for_crop(&crop, origin, (frame.width, frame.height))?;
    let area = crop.alpha_mask(0.5).area();
    let mut timeline = BTreeMap::new();
    timeline.insert(t, Placement { params, z, mask: region.mask.clone() });
    Ok(TrackedObject { object_id: id, canonical: crop, canonical_area: area, timeline, alive: true })
}

/// Applies the selected mappings at frame `t`: assigns region pixels to
/// object ids, creates/merges/retires objects, and records placements.
#[allow(clippy::too_many_arguments)]
pub fn propagate_ids(
    selected: &[CandidateMapping],
    objects: &mut Vec<TrackedObject>,
    regions: &[Region],
    frame: &RasterImage,
    history: &mut [FrameLabels],
    t: usize,
    next_id: &mut u64,
    forward_graph: &MappingGraph,
) -> Result<PropagationOutcome> {
    for (i, a) in selected.iter().enumerate() {
        for b in &selected[i + 1..] {
            if a.conflicts_with(b) {
                return Err(Error::InconsistentSelection(format!(
                    "objects {:?}/{:?} regions {:?}/{:?}",
                    a.objects, b.objects, a.regions, b.regions
                )));
            }
        }
    }
    let region_by_id = |rid: u32| -> Result<&Region> {
        regions.iter().find(|r| r.region_id == rid).ok_or(Error::UnknownObject(rid as u64))
    };
    let canvas_anchor = anchor_of(frame.width, frame.height);
    let mut labels: FrameLabels = Vec::new();
    let mut log = Vec::new();
    let mut used_regions: Vec<u32> = Vec::new();
    let mut mapped_objects: Vec<u64> = Vec::new();
    let mut next_z: i64 = 0;

    let mut alloc_z = |objects: &Vec<TrackedObject>| -> i64 {
        let max_existing = objects
            .iter()
            .filter_map(|o| o.timeline.get(&t).map(|p| p.z))
            .max()
            .unwrap_or(-1);
        next_z = next_z.max(max_existing + 1);
        let z = next_z;
        next_z += 1;
        z
    };

    for c in selected {
        used_regions.extend(&c.regions);
        mapped_objects.extend(&c.objects);
        let kind = match c.mtype {
            MappingType::OneToOne | MappingType::OneToManyNoSplit => {
                // All region pixels take the object's id.
                let oid = c.objects[0];
                let mut mask = BinaryMask::new(frame.width, frame.height);
                for &rid in &c.regions {
                    mask.union_with(&region_by_id(rid)?.mask);
                }
                let obj =
                    objects.iter_mut().find(|o| o.object_id == oid).ok_or(Error::UnknownObject(oid))?;
                let (params, zf) = match c.direction {
                    Direction::Forward => {
                        let (_, p, z) = c
                            .transforms
                            .iter()
                            .find(|(id, _, _)| *id == oid)
                            .copied()
                            .ok_or(Error::UnknownElement(oid))?;
                        (p, z)
                    }
                    Direction::Backward => {
                        // Region-to-prev transform; invert and compose onto
                        // the object's previous pose to get its new pose.
                        let rid = c.regions[0] as u64;
                        let el = forward_graph
                            .placements
                            .elements
                            .iter()
                            .find(|e| e.id == oid);
                        match (el, c.transforms.iter().find(|(id, _, _)| *id == rid)) {
                            (Some(e), _) => (e.params, e.z),
                            (None, Some((_, p, z))) => {
                                let src_anchor =
                                    anchor_of(obj.canonical.width, obj.canonical.height);
                                let prev = obj.timeline[&(t - 1)]
                                    .params
                                    .to_affine(src_anchor, canvas_anchor);
                                // p maps region(t) -> rendered(t-1); its
                                // inverse advances t-1 poses to t.
                                let crop_rgn = region_by_id(c.regions[0])?;
                                let (crop, origin) = crop_rgba(frame, &crop_rgn.mask)?;
                                let ca = anchor_of(crop.width, crop.height);
                                let step = p
                                    .to_affine(ca, canvas_anchor)
                                    .compose(&placement_for_crop(&crop, origin, (frame.width, frame.height))?
                                        .to_affine(ca, canvas_anchor)
                                        .inverse()?)
                                    .inverse()?;
                                let pose = step.compose(&prev);
                                (
                                    AffineParams::from_affine(&pose, src_anchor, canvas_anchor)?,
                                    *z,
                                )
                            }
                            _ => {
                                let prev = &obj.timeline[&(t - 1)];
                                (prev.params, prev.z as f64)
                            }
                        }
                    }
                };
                let z = zf.round() as i64;
                obj.timeline.insert(t, Placement { params, z, mask: mask.clone() });
                labels.push((oid, mask));
                "propagate"
            }
            MappingType::ManyToOneNoMerge => {
                // Each object keeps its id on its visible pixels within the
                // region; pixels may carry several ids.
                let rmask = &region_by_id(c.regions[0])?.mask;
                for &oid in &c.objects {
                    let vis = visibility_mask(&forward_graph.placements, oid)
                        .unwrap_or_else(|_| BinaryMask::new(frame.width, frame.height));
                    let mut mask = vis.clone();
                    for (b, r) in mask.bits.iter_mut().zip(&rmask.bits) {
                        *b &= *r;
                    }
                    let (params, zf) = c
                        .transforms
                        .iter()
                        .find(|(id, _, _)| *id == oid)
                        .map(|(_, p, z)| (*p, *z))
                        .ok_or(Error::UnknownElement(oid))?;
                    let obj = objects
                        .iter_mut()
                        .find(|o| o.object_id == oid)
                        .ok_or(Error::UnknownObject(oid))?;
                    if mask.is_empty() {
                        // Fully occluded within the region this frame: carry
                        // the optimized pose with an empty support.
                        obj.timeline.insert(
                            t,
                            Placement { params, z: zf.round() as i64, mask: mask.clone() },
                        );
                    } else {
                        obj.timeline.insert(
                            t,
                            Placement { params, z: zf.round() as i64, mask: mask.clone() },
                        );
                    }
                    labels.push((oid, mask));
                }
                "share"
            }
            MappingType::ManyToOneMerge => {
                // Fresh id; relabel every historical instance of the merged
                // objects.
                let new_id = *next_id;
                *next_id += 1;
                let region = region_by_id(c.regions[0])?;
                let z = alloc_z(objects);
                let merged = fresh_object_from_region(new_id, frame, region, t, z)?;
                for &oid in &c.objects {
                    if let Some(o) = objects.iter_mut().find(|o| o.object_id == oid) {
                        o.alive = false;
                    }
                    for frame_labels in history.iter_mut() {
                        for (id, _) in frame_labels.iter_mut() {
                            if *id == oid {
                                *id = new_id;
                            }
                        }
                    }
                }
                labels.push((new_id, region.mask.clone()));
                objects.push(merged);
                "merge"
            }
            MappingType::OneToManySplit => {
                // The object splits: each region becomes a fresh object.
                let oid = c.objects[0];
                if let Some(o) = objects.iter_mut().find(|o| o.object_id == oid) {
                    o.alive = false;
                }
                for &rid in &c.regions {
                    let new_id = *next_id;
                    *next_id += 1;
                    let region = region_by_id(rid)?;
                    let z = alloc_z(objects);
                    let obj = fresh_object_from_region(new_id, frame, region, t, z)?;
                    labels.push((new_id, region.mask.clone()));
                    objects.push(obj);
                }
                "split"
            }
            MappingType::Disappear | MappingType::Appear => unreachable!("not scored candidates"),
        };
        log.push(format!(
            "t={t} type={kind} objects={:?} regions={:?} score={:.6}",
            c.objects, c.regions, c.score
        ));
    }

    // Unmapped regions appear as new objects; unmapped objects disappear.
    for r in regions {
        if !used_regions.contains(&r.region_id) {
            let new_id = *next_id;
            *next_id += 1;
            let z = alloc_z(objects);
            let obj = fresh_object_from_region(new_id, frame, r, t, z)?;
            labels.push((new_id, r.mask.clone()));
            log.push(format!(
                "t={t} type=appear objects=[] regions=[{}] score=-",
                r.region_id
            ));
            objects.push(obj);
        }
    }
    for o in objects.iter_mut() {
        if o.alive && o.timeline.contains_key(&(t - 1)) && !o.timeline.contains_key(&t) {
            o.alive = false;
            log.push(format!(
                "t={t} type=disappear objects=[{}] regions=[] score=-",
                o.object_id
            ));
        }
    }
    labels.sort_by_key(|(id, _)| *id);
    Ok(PropagationOutcome { labels, log })
}

// ---------------------------------------------------------------------------
// Canonical maintenance

/// Replaces the canonical image when the object shows more pixels than ever
/// before and is not occluded this frame.
pub fn update_canonical(
    obj: &mut TrackedObject,
    frame: &RasterImage,
    t: usize,
    occluded: bool,
) -> Result<bool> {
    let Some(p) = obj.timeline.get(&t) else { return Ok(false) };
    if occluded || p.mask.area() <= obj.canonical_area {
        return Ok(false);
    }
    let (crop, origin) = crop_rgba(frame, &p.mask)?;
    let params = placement_for_crop(&crop, origin, (frame.width, frame.height))?;
    obj.canonical_area = crop.alpha_mask(0.5).area();
    obj.canonical = crop;
    let (z, mask) = (p.z, p.mask.clone());
    obj.timeline.insert(t, Placement { params, z, mask });
    Ok(true)
}

fn is_occluded(objects: &[TrackedObject], idx: usize, t: usize) -> bool {
    let Some(p) = objects[idx].timeline.get(&t) else { return false };
    objects.iter().enumerate().any(|(j, o)| {
        j != idx
            && o.timeline.get(&t).is_some_and(|q| {
                (q.z, o.object_id) > (p.z, objects[idx].object_id)
                    && q.mask.intersection_area(&p.mask) > 0
            })
    })
}

// ---------------------------------------------------------------------------
// Full tracking loop

pub struct TrackResult {
    pub objects: Vec<TrackedObject>,
    pub background: BackgroundModel,
    /// Per-frame (object id, mask) label assignments.
    pub labels: Vec<FrameLabels>,
    /// One line per mapping decision.
    pub log: Vec<String>,
}

fn frame_regions(frame: &RasterImage, bg: &BackgroundModel, cfg: &Config, t: usize) -> Result<Vec<Region>> {
    let fg = foreground_mask(frame, bg)?;
    let edges = detect_edges(
        &frame.luminance(),
        cfg.imaging.canny_sigma,
        cfg.imaging.canny_low,
        cfg.imaging.canny_high,
    );
    Ok(extract_regions(frame, &fg, &edges, &cfg.segmentation, t))
}

/// End-to-end tracker: regions of the first frame seed the object table;
/// each subsequent frame is linked by forward+backward candidate graphs.
pub fn track_video(frames: &[RasterImage], cfg: &Config) -> Result<TrackResult> {
    assert!(!frames.is_empty());
    let sample_n = cfg.segmentation.background_sample_frames.max(1).min(frames.len());
    let stride = frames.len().div_ceil(sample_n);
    let sampled: Vec<&RasterImage> = frames.iter().step_by(stride).collect();
    let background = estimate_background(&sampled, &cfg.segmentation);
    let bg_img = bg_image(&background, frames[0].width, frames[0].height);

    let mut objects: Vec<TrackedObject> = Vec::new();
    let mut labels: Vec<FrameLabels> = Vec::new();
    let mut log: Vec<String> = Vec::new();
    let mut next_id: u64 = 1;

    let first_regions = frame_regions(&frames[0], &background, cfg, 0)?;
    let mut frame0_labels: FrameLabels = Vec::new();
    for (i, r) in first_regions.iter().enumerate() {
        let obj = fresh_object_from_region(next_id, &frames[0], r, 0, i as i64)?;
        frame0_labels.push((next_id, r.mask.clone()));
        next_id += 1;
        objects.push(obj);
    }
    labels.push(frame0_labels);

    for t in 1..frames.len() {
        let regions = frame_regions(&frames[t], &background, cfg, t)?;
        let fwd = build_mapping_graph(
            &objects, &frames[t - 1], &frames[t], &regions, t, Direction::Forward, &bg_img, cfg,
        )?;
        let bwd = build_mapping_graph(
            &objects, &frames[t - 1], &frames[t], &regions, t, Direction::Backward, &bg_img, cfg,
        )?;
        let mut candidates = extract_candidates(&fwd);
        candidates.extend(extract_candidates(&bwd));
        for c in &mut candidates {
            let graph = match c.direction {
                Direction::Forward => &fwd,
                Direction::Backward => &bwd,
            };
            c.score = score_candidate(c, graph, &bg_img).unwrap_or(f64::INFINITY);
            if std::env::var("MV_DBG").is_ok() {
                eprintln!(
                    "CAND t={t} dir={:?} mtype={:?} objects={:?} regions={:?} score={:.4}",
                    c.direction, c.mtype, c.objects, c.regions, c.score
                );
            }
        }
        let selected = select_mappings(&candidates, cfg.tracker.epsilon);
        let outcome = propagate_ids(
            &selected, &mut objects, &regions, &frames[t], &mut labels, t, &mut next_id, &fwd,
        )?;
        labels.push(outcome.labels);
        log.extend(outcome.log);
        for i in 0..objects.len() {
            if objects[i].alive && objects[i].timeline.contains_key(&t) {
                let occ = is_occluded(&objects, i, t);
                update_canonical(&mut objects[i], &frames[t], t, occ)?;
            }
        }
        if let Some(dir) = &cfg.tracker.debug_labels_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
            let mut img = vec![0u16; frames[t].width * frames[t].height];
            for (id, mask) in labels[t].iter().rev() {
                for (px, &m) in img.iter_mut().zip(&mask.bits) {
                    if m {
                        *px = *id as u16;
                    }
                }
            }
            let path = dir.join(format!("labels_{t:05}.png"));
            crate::imaging::save_label_png(&path, frames[t].width, frames[t].height, &img)?;
        }
    }
    Ok(TrackResult { objects, background, labels, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SegmentationMode;

    fn mask_rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn coverage_weight_arithmetic() {
        let a = mask_rect(32, 32, 4, 4, 12, 12);
        assert_eq!(coverage_weights(&a, &a), (1.0, 1.0));
        // src 60 px, tgt 90 px, overlap 30 px.
        let src = mask_rect(32, 32, 0, 0, 10, 6);
        let tgt = mask_rect(32, 32, 5, 0, 20, 6);
        assert_eq!(coverage_weights(&src, &tgt), (0.5, 1.0 / 3.0));
        let empty = BinaryMask::new(32, 32);
        assert_eq!(coverage_weights(&empty, &a), (0.0, 1.0_f64.min(0.0)));
        assert_eq!(coverage_weights(&a, &empty), (0.0, 0.0));
        // Subset with half the area.
        let sub = mask_rect(32, 32, 4, 4, 12, 8);
        assert_eq!(coverage_weights(&sub, &a), (1.0, 0.5));
    }

    fn dummy_graph(direction: Direction, edges: Vec<MappingEdge>) -> MappingGraph {
        MappingGraph {
            direction,
            edges,
            placements: PlacementSet { canvas: (8, 8), elements: vec![] },
            target: RasterImage::new(8, 8, 3),
            target_masks: vec![],
        }
    }

    fn edge(o: u64, r: u32) -> MappingEdge {
        MappingEdge { object_id: o, region_id: r, w_src: 0.5, w_tgt: 0.5 }
    }

    #[test]
    fn extract_single_components() {
        let g = dummy_graph(Direction::Forward, vec![edge(1, 1)]);
        let c = extract_candidates(&g);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].mtype, MappingType::OneToOne);

        let g = dummy_graph(Direction::Forward, vec![edge(1, 1), edge(1, 2)]);
        let c = extract_candidates(&g);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].mtype, MappingType::OneToManyNoSplit);
        assert_eq!(c[0].regions, vec![1, 2]);

        let g = dummy_graph(Direction::Backward, vec![edge(1, 1), edge(1, 2)]);
        let c = extract_candidates(&g);
        assert_eq!(c[0].mtype, MappingType::OneToManySplit);

        let g = dummy_graph(Direction::Forward, vec![edge(1, 1), edge(2, 1)]);
        let c = extract_candidates(&g);
        assert_eq!(c[0].mtype, MappingType::ManyToOneNoMerge);

        let g = dummy_graph(Direction::Backward, vec![edge(1, 1), edge(2, 1)]);
        let c = extract_candidates(&g);
        assert_eq!(c[0].mtype, MappingType::ManyToOneMerge);
    }

    #[test]
    fn extract_star_decomposition() {
        // O1-R1, O2-R1, O2-R2: a many-to-many component. Stars: O1->{R1},
        // O2->{R1,R2}, R1<-{O1,O2}, R2<-{O2}.
        let g = dummy_graph(Direction::Forward, vec![edge(1, 1), edge(2, 1), edge(2, 2)]);
        let cands = extract_candidates(&g);
        assert_eq!(cands.len(), 4);
        let sig: Vec<(Vec<u64>, Vec<u32>)> =
            cands.iter().map(|c| (c.objects.clone(), c.regions.clone())).collect();
        assert!(sig.contains(&(vec![1], vec![1])));
        assert!(sig.contains(&(vec![2], vec![1, 2])));
        assert!(sig.contains(&(vec![1, 2], vec![1])));
        assert!(sig.contains(&(vec![2], vec![2])));
        for c in &cands {
            assert!(c.objects.len() == 1 || c.regions.len() == 1);
        }
    }

    fn cand(objects: Vec<u64>, regions: Vec<u32>, score: f64) -> CandidateMapping {
        let mtype = mtype_for(Direction::Forward, objects.len().max(1), regions.len().max(1));
        CandidateMapping {
            direction: Direction::Forward,
            objects,
            regions,
            mtype,
            score,
            transforms: vec![],
        }
    }

    #[test]
    fn greedy_selection_examples() {
        // A (0.02) conflicts with B (0.05); C (0.07) disjoint.
        let cands = vec![
            cand(vec![1], vec![1], 0.02),
            cand(vec![1], vec![2], 0.05),
            cand(vec![2], vec![3], 0.07),
        ];
        let sel = select_mappings(&cands, 0.1);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0].score, 0.02);
        assert_eq!(sel[1].score, 0.07);

        // Above threshold: nothing selected.
        let sel = select_mappings(&[cand(vec![1], vec![1], 0.5)], 0.1);
        assert!(sel.is_empty());
    }

    fn brute_force_select(cands: &[CandidateMapping], eps: f64) -> Vec<(Vec<u64>, Vec<u32>)> {
        let mut pool: Vec<CandidateMapping> =
            cands.iter().filter(|c| c.score.is_finite()).cloned().collect();
        let mut out = Vec::new();
        loop {
            pool.sort_by(|a, b| selection_key(a).partial_cmp(&selection_key(b)).unwrap());
            let Some(first) = pool.first().cloned() else { break };
            if first.score > eps {
                break;
            }
            pool.retain(|c| !c.conflicts_with(&first));
            // first conflicts with itself, so it is already removed.
            out.push((first.objects, first.regions));
        }
        out
    }

    #[test]
    fn selection_matches_brute_force_and_is_conflict_free() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=12);
            let cands: Vec<CandidateMapping> = (0..n)
                .map(|_| {
                    let n_obj = rng.gen_range(1..=3usize);
                    let n_reg = rng.gen_range(1..=3usize);
                    // Keep one side singleton per the mtype invariant.
                    let (n_obj, n_reg) =
                        if rng.gen_bool(0.5) { (1, n_reg) } else { (n_obj, 1) };
                    let mut objects: Vec<u64> =
                        (0..n_obj).map(|_| rng.gen_range(1..6)).collect();
                    objects.sort_unstable();
                    objects.dedup();
                    let mut regions: Vec<u32> =
                        (0..n_reg).map(|_| rng.gen_range(1..6)).collect();
                    regions.sort_unstable();
                    regions.dedup();
                    cand(objects, regions, rng.gen_range(0.0..0.2))
                })
                .collect();
            let sel = select_mappings(&cands, 0.1);
            for (i, a) in sel.iter().enumerate() {
                for b in &sel[i + 1..] {
                    assert!(!a.conflicts_with(b), "conflicting selection");
                }
            }
            let got: Vec<(Vec<u64>, Vec<u32>)> =
                sel.iter().map(|c| (c.objects.clone(), c.regions.clone())).collect();
            assert_eq!(got, brute_force_select(&cands, 0.1));
        }
    }

    #[test]
    fn score_extremes() {
        // Source renders black over white background inside its mask; target
        // white: RMS 1. Then identical target: RMS 0.
        let mut sprite = RasterImage::new(4, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                sprite.set(x, y, 3, 1.0);
            }
        }
        let params = placement_for_crop(&sprite, (2, 2), (8, 8)).unwrap();
        let placements = PlacementSet {
            canvas: (8, 8),
            elements: vec![SourceElement { id: 1, image: sprite, params, z: 0.0 }],
        };
        let white = RasterImage::filled(8, 8, &[1.0, 1.0, 1.0]);
        let tmask = mask_rect(8, 8, 2, 2, 6, 6);
        let graph = MappingGraph {
            direction: Direction::Forward,
            edges: vec![edge(1, 1)],
            placements,
            target: white.clone(),
            target_masks: vec![(1, tmask)],
        };
        let c = CandidateMapping {
            direction: Direction::Forward,
            objects: vec![1],
            regions: vec![1],
            mtype: MappingType::OneToOne,
            score: 0.0,
            transforms: vec![(1, graph.placements.elements[0].params, 0.0)],
        };
        let s = score_candidate(&c, &graph, &white).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "score {s}");

        let mut black_target = white.clone();
        for y in 2..6 {
            for x in 2..6 {
                for ch in 0..3 {
                    black_target.set(x, y, ch, 0.0);
                }
            }
        }
        let mut g2 = graph.clone();
        g2.target = black_target;
        let s = score_candidate(&c, &g2, &white).unwrap();
        assert!(s < 1e-6, "score {s}");
    }

    #[test]
    fn merge_relabels_history() {
        let frame = RasterImage::filled(32, 32, &[0.3, 0.3, 0.3]);
        let r1 = Region {
            frame_index: 1,
            region_id: 1,
            mask: mask_rect(32, 32, 4, 4, 16, 16),
            bbox: (4, 4, 16, 16),
            centroid: (9.5, 9.5),
            area: 144,
        };
        let mut objects = vec![
            fresh_object_from_region(3, &frame, &r1, 0, 0).unwrap(),
            fresh_object_from_region(
                4,
                &frame,
                &Region {
                    frame_index: 0,
                    region_id: 2,
                    mask: mask_rect(32, 32, 20, 20, 28, 28),
                    bbox: (20, 20, 28, 28),
                    centroid: (23.5, 23.5),
                    area: 64,
                },
                0,
                1,
            )
            .unwrap(),
        ];
        let mut history: Vec<FrameLabels> = vec![vec![
            (3, mask_rect(32, 32, 4, 4, 16, 16)),
            (4, mask_rect(32, 32, 20, 20, 28, 28)),
        ]];
        let merge = CandidateMapping {
            direction: Direction::Backward,
            objects: vec![3, 4],
            regions: vec![1],
            mtype: MappingType::ManyToOneMerge,
            score: 0.01,
            transforms: vec![],
        };
        let graph = dummy_graph(Direction::Forward, vec![]);
        let mut next_id = 9;
        let outcome = propagate_ids(
            &[merge], &mut objects, &[r1], &frame, &mut history, 1, &mut next_id, &graph,
        )
        .unwrap();
        assert_eq!(next_id, 10);
        // New id 9 owns the region; history frames relabeled 3,4 -> 9.
        assert_eq!(outcome.labels.len(), 1);
        assert_eq!(outcome.labels[0].0, 9);
        assert!(history[0].iter().all(|(id, _)| *id == 9));
        assert!(!objects.iter().find(|o| o.object_id == 3).unwrap().alive);
        assert!(!objects.iter().find(|o| o.object_id == 4).unwrap().alive);
        let merged = objects.iter().find(|o| o.object_id == 9).unwrap();
        assert!(merged.alive);
        assert_eq!(merged.first_frame(), 1);
    }

    #[test]
    fn unmapped_become_appear_and_disappear() {
        let frame = RasterImage::filled(24, 24, &[0.2; 3]);
        let seed = Region {
            frame_index: 0,
            region_id: 1,
            mask: mask_rect(24, 24, 2, 2, 8, 8),
            bbox: (2, 2, 8, 8),
            centroid: (4.5, 4.5),
            area: 36,
        };
        let mut objects = vec![fresh_object_from_region(1, &frame, &seed, 0, 0).unwrap()];
        let new_region = Region {
            frame_index: 1,
            region_id: 1,
            mask: mask_rect(24, 24, 12, 12, 20, 20),
            bbox: (12, 12, 20, 20),
            centroid: (15.5, 15.5),
            area: 64,
        };
        let graph = dummy_graph(Direction::Forward, vec![]);
        let mut history = vec![vec![(1u64, mask_rect(24, 24, 2, 2, 8, 8))]];
        let mut next_id = 2;
        let outcome = propagate_ids(
            &[], &mut objects, &[new_region], &frame, &mut history, 1, &mut next_id, &graph,
        )
        .unwrap();
        assert_eq!(outcome.labels.len(), 1);
        assert_eq!(outcome.labels[0].0, 2);
        assert!(!objects[0].alive, "unmapped object should disappear");
        assert_eq!(objects.len(), 2);
        assert!(outcome.log.iter().any(|l| l.contains("type=appear")));
        assert!(outcome.log.iter().any(|l| l.contains("type=disappear")));
    }

    #[test]
    fn canonical_updates_only_when_growing_and_unoccluded() {
        let mut frame = RasterImage::filled(24, 24, &[0.0; 3]);
        for y in 4..14 {
            for x in 4..14 {
                frame.set(x, y, 0, 0.9);
            }
        }
        let small = Region {
            frame_index: 0,
            region_id: 1,
            mask: mask_rect(24, 24, 4, 4, 10, 10),
            bbox: (4, 4, 10, 10),
            centroid: (6.5, 6.5),
            area: 36,
        };
        let mut obj = fresh_object_from_region(1, &frame, &small, 0, 0).unwrap();
        assert_eq!(obj.canonical_area, 36);
        // Larger support at t=1.
        obj.timeline.insert(
            1,
            Placement {
                params: obj.timeline[&0].params,
                z: 0,
                mask: mask_rect(24, 24, 4, 4, 14, 14),
            },
        );
        assert!(!update_canonical(&mut obj, &frame, 1, true).unwrap(), "occluded blocks update");
        assert_eq!(obj.canonical_area, 36);
        assert!(update_canonical(&mut obj, &frame, 1, false).unwrap());
        assert_eq!(obj.canonical_area, 100);
        // Shrinking support never updates.
        obj.timeline.insert(
            2,
            Placement {
                params: obj.timeline[&1].params,
                z: 0,
                mask: mask_rect(24, 24, 4, 4, 9, 9),
            },
        );
        assert!(!update_canonical(&mut obj, &frame, 2, false).unwrap());
        assert_eq!(obj.canonical_area, 100);
    }

    fn quick_config() -> Config {
        let mut cfg = Config::default();
        cfg.segmentation.mode = SegmentationMode::Components;
        cfg.segmentation.min_region_area = 8;
        cfg.dc.max_iters = 40;
        cfg.dc.pyramid_levels = 3;
        cfg.dc.tau_anneal_every = 0;
        cfg.dc.reg_weight = 1e-3;
        cfg.tracker.epsilon = 0.2;
        cfg
    }

    fn two_square_frame(w: usize, h: usize, ax: usize, bx: usize) -> RasterImage {
        let mut img = RasterImage::filled(w, h, &[1.0, 1.0, 1.0]);
        for y in 8..20 {
            for x in ax..ax + 12 {
                img.set(x, y, 0, 0.9);
                img.set(x, y, 1, 0.15);
                img.set(x, y, 2, 0.1);
            }
        }
        for y in 28..40 {
            for x in bx..bx + 12 {
                img.set(x, y, 0, 0.1);
                img.set(x, y, 1, 0.2);
                img.set(x, y, 2, 0.85);
            }
        }
        img
    }

    #[test]
    fn static_scene_tracks_identity() {
        let frame = two_square_frame(56, 56, 6, 30);
        let frames = vec![frame.clone(), frame.clone(), frame];
        let res = track_video(&frames, &quick_config()).unwrap();
        let alive: Vec<&TrackedObject> = res.objects.iter().filter(|o| o.alive).collect();
        assert_eq!(alive.len(), 2);
        for o in &alive {
            assert_eq!(o.first_frame(), 0);
            assert_eq!(o.last_frame(), 2);
            let p0 = &o.timeline[&0];
            for t in 1..=2 {
                let p = &o.timeline[&t];
                assert!((p.params.tx - p0.params.tx).abs() < 0.5, "tx drift {}", p.params.tx);
                assert!((p.params.ty - p0.params.ty).abs() < 0.5);
                assert!(p.params.theta.abs() < 0.02);
            }
        }
        // Every frame's regions carry labels.
        for fl in &res.labels {
            assert_eq!(fl.len(), 2);
        }
    }

    #[test]
    fn translating_object_tracks_motion() {
        let frames: Vec<RasterImage> =
            (0..3).map(|t| two_square_frame(64, 64, 6 + 4 * t, 30)).collect();
        let res = track_video(&frames, &quick_config()).unwrap();
        let alive: Vec<&TrackedObject> = res.objects.iter().filter(|o| o.alive).collect();
        assert_eq!(alive.len(), 2, "log: {:?}", res.log);
        // The red square's tx advances ~4 px per frame; the blue one is
        // static.
        let moving = alive
            .iter()
            .find(|o| o.timeline[&0].mask.get(8, 10))
            .expect("red square tracked");
        let tx0 = moving.timeline[&0].params.tx;
        for t in 1..=2 {
            let dx = moving.timeline[&t].params.tx - tx0;
            assert!(
                (dx - 4.0 * t as f64).abs() <= 0.5,
                "t={t} dx={dx} log: {:?}",
                res.log
            );
        }
        let still = alive
            .iter()
            .find(|o| o.timeline[&0].mask.get(32, 30))
            .expect("blue square tracked");
        for t in 1..=2 {
            assert!((still.timeline[&t].params.tx - still.timeline[&0].params.tx).abs() <= 0.5);
        }
    }
}
