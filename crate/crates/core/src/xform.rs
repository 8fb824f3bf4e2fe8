//! Program transformation API: property and event queries over a motion
//! program, retiming, local/global motion adjustment, appearance changes
//! (plain and collision-preserving), scene-graph CRUD, easing functions,
//! and a declarative ops-file interpreter.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::XformConfig;
use crate::diffcomp::apply_affine;
use crate::error::{Error, Result};
use crate::geom::AffineParams;
use crate::imaging::{BinaryMask, RasterImage};
use crate::program::{Keyframe, MotionProgram, ProgramObject};
use crate::segmentation::kmeans;

// ---------------------------------------------------------------------------
// Property queries

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    All,
    Color,
    Position,
    Size,
    Velocity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropertyValue {
    /// sRGB triple.
    Color([f64; 3]),
    /// Transformed canonical center, frame coordinates (px).
    Position(f64, f64),
    /// Transformed bounding-box extent (w, h) in px.
    Size(f64, f64),
    /// Central-difference position change (px/frame).
    Velocity(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertySeries {
    pub object_id: u64,
    pub prop: Property,
    /// First frame covered; values[i] belongs to frame `start + i`.
    pub start: usize,
    pub values: Vec<PropertyValue>,
}

fn find_object<'a>(p: &'a MotionProgram, id: u64) -> Result<&'a ProgramObject> {
    p.objects.iter().find(|o| o.object_id == id).ok_or(Error::UnknownObject(id))
}

fn find_object_mut<'a>(p: &'a mut MotionProgram, id: u64) -> Result<&'a mut ProgramObject> {
    p.objects.iter_mut().find(|o| o.object_id == id).ok_or(Error::UnknownObject(id))
}

fn check_range(p: &MotionProgram, range: &Range<usize>) -> Result<()> {
    if range.start >= range.end || range.end > p.num_frames {
        return Err(Error::RangeError(range.start, range.end));
    }
    Ok(())
}

fn src_anchor(img: &RasterImage) -> (f64, f64) {
    ((img.width as f64 - 1.0) / 2.0, (img.height as f64 - 1.0) / 2.0)
}

fn canvas_anchor(p: &MotionProgram) -> (f64, f64) {
    ((p.width as f64 - 1.0) / 2.0, (p.height as f64 - 1.0) / 2.0)
}

fn keyframe<'a>(obj: &'a ProgramObject, frame: usize) -> Option<&'a Keyframe> {
    obj.keyframes.iter().find(|k| k.frame == frame)
}

/// Dominant color: center of the largest k-means (k = 4) cluster over the
/// canonical's opaque pixels, in sRGB.
pub fn dominant_color(canonical: &RasterImage) -> Result<[f64; 3]> {
    let mut samples = Vec::new();
    for y in 0..canonical.height {
        for x in 0..canonical.width {
            let px = canonical.pixel(x, y);
            if canonical.channels < 4 || px[3] > 0.5 {
                samples.push([px[0] as f64, px[1] as f64, px[2] as f64]);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyImage);
    }
    let k = 4.min(samples.len());
    let (centers, assign) = kmeans(&samples, k);
    let mut counts = vec![0usize; centers.len()];
    for &a in &assign {
        counts[a] += 1;
    }
    let best = (0..centers.len()).max_by_key(|&i| counts[i]).unwrap();
    Ok(centers[best])
}

fn frame_position(p: &MotionProgram, kf: &Keyframe) -> (f64, f64) {
    // The canonical anchor maps to canvas_anchor + t for any linear part.
    let (cx, cy) = canvas_anchor(p);
    (cx + kf.params.tx, cy + kf.params.ty)
}

fn frame_size(p: &MotionProgram, obj: &ProgramObject, kf: &Keyframe) -> (f64, f64) {
    let bbox = obj
        .canonical
        .alpha_mask(0.5)
        .bbox()
        .unwrap_or((0, 0, obj.canonical.width, obj.canonical.height));
    let (x0, y0, x1, y1) = bbox;
    let aff = kf.params.to_affine(src_anchor(&obj.canonical), canvas_anchor(p));
    let corners = [
        (x0 as f64, y0 as f64),
        (x1 as f64 - 1.0, y0 as f64),
        (x0 as f64, y1 as f64 - 1.0),
        (x1 as f64 - 1.0, y1 as f64 - 1.0),
    ];
    let pts: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| aff.apply(x, y)).collect();
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    (max_x - min_x, max_y - min_y)
}

fn positions_over(p: &MotionProgram, obj: &ProgramObject, range: &Range<usize>) -> Vec<(usize, (f64, f64))> {
    range
        .clone()
        .filter_map(|f| keyframe(obj, f).map(|kf| (f, frame_position(p, kf))))
        .collect()
}

/// Per-frame velocities by central difference (one-sided at ends).
fn velocities(pos: &[(usize, (f64, f64))]) -> Vec<(f64, f64)> {
    let n = pos.len();
    (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            if hi == lo {
                return (0.0, 0.0);
            }
            let dt = (pos[hi].0 - pos[lo].0) as f64;
            (((pos[hi].1).0 - (pos[lo].1).0) / dt, ((pos[hi].1).1 - (pos[lo].1).1) / dt)
        })
        .collect()
}

fn series_for(
    p: &MotionProgram,
    obj: &ProgramObject,
    prop: Property,
    range: &Range<usize>,
) -> Result<Vec<PropertySeries>> {
    let frames: Vec<&Keyframe> =
        range.clone().filter_map(|f| keyframe(obj, f)).collect();
    if frames.is_empty() {
        return Err(Error::RangeError(range.start, range.end));
    }
    let start = frames[0].frame;
    let mk = |prop, values| PropertySeries { object_id: obj.object_id, prop, start, values };
    let out = match prop {
        Property::Color => {
            let c = dominant_color(&obj.canonical)?;
            vec![mk(Property::Color, frames.iter().map(|_| PropertyValue::Color(c)).collect())]
        }
        Property::Position => vec![mk(
            Property::Position,
            frames.iter().map(|kf| { let (x, y) = frame_position(p, kf); PropertyValue::Position(x, y) }).collect(),
        )],
        Property::Size => vec![mk(
            Property::Size,
            frames.iter().map(|kf| { let (w, h) = frame_size(p, obj, kf); PropertyValue::Size(w, h) }).collect(),
        )],
        Property::Velocity => {
            let pos = positions_over(p, obj, range);
            vec![mk(
                Property::Velocity,
                velocities(&pos).into_iter().map(|(dx, dy)| PropertyValue::Velocity(dx, dy)).collect(),
            )]
        }
        Property::All => {
            let mut all = Vec::new();
            for q in [Property::Color, Property::Position, Property::Size, Property::Velocity] {
                all.extend(series_for(p, obj, q, range)?);
            }
            all
        }
    };
    Ok(out)
}

/// Per-frame property series for `obj`, or for every object appearing in
/// the range when `obj` is `None`.
pub fn prop_query(
    p: &MotionProgram,
    obj: Option<u64>,
    prop: Property,
    range: Range<usize>,
) -> Result<Vec<PropertySeries>> {
    check_range(p, &range)?;
    match obj {
        Some(id) => series_for(p, find_object(p, id)?, prop, &range),
        None => {
            let mut out = Vec::new();
            for o in &p.objects {
                if range.clone().any(|f| keyframe(o, f).is_some()) {
                    out.extend(series_for(p, o, prop, &range)?);
                }
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Event queries

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Held,
    Collision,
    MotionCycle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub frames: Vec<usize>,
    /// Collision only: the other participant and per-participant contact
    /// points `(object_id, (x, y))` in frame coordinates.
    pub other: Option<u64>,
    pub contacts: Vec<(u64, (f64, f64))>,
    /// Motion cycle only: period in frames.
    pub period: Option<usize>,
}

fn params_close(a: &AffineParams, b: &AffineParams, tol: f64) -> bool {
    (a.tx - b.tx).abs() <= tol
        && (a.ty - b.ty).abs() <= tol
        && (a.theta - b.theta).abs() <= tol
        && (a.sx - b.sx).abs() <= tol
        && (a.sy - b.sy).abs() <= tol
        && (a.kx - b.kx).abs() <= tol
        && (a.ky - b.ky).abs() <= tol
}

fn held_events(obj: &ProgramObject, range: &Range<usize>) -> Vec<Event> {
    let frames: Vec<&Keyframe> = range.clone().filter_map(|f| keyframe(obj, f)).collect();
    let mut events = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for w in 0..frames.len() {
        if let Some(&last) = run.last() {
            let prev = frames.iter().find(|k| k.frame == last).unwrap();
            let contiguous = frames[w].frame == last + 1;
            if contiguous && params_close(&prev.params, &frames[w].params, 1e-6) {
                run.push(frames[w].frame);
                continue;
            }
            if run.len() >= 2 {
                events.push(Event {
                    kind: EventKind::Held,
                    frames: run.clone(),
                    other: None,
                    contacts: Vec::new(),
                    period: None,
                });
            }
        }
        run = vec![frames[w].frame];
    }
    if run.len() >= 2 {
        events.push(Event { kind: EventKind::Held, frames: run, other: None, contacts: Vec::new(), period: None });
    }
    events
}

/// Support mask of an object's placement at a frame (alpha > 0.5 of the
/// transformed canonical).
fn support_mask(p: &MotionProgram, obj: &ProgramObject, kf: &Keyframe) -> Result<BinaryMask> {
    let img = apply_affine(&obj.canonical, &kf.params, (p.width, p.height))?;
    Ok(img.alpha_mask(0.5))
}

fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == mask.width
                || y + 1 == mask.height
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Closest boundary-pixel pair between two masks: (distance, point on a,
/// point on b).
fn boundary_distance(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, (f64, f64), (f64, f64))> {
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    let mut best: Option<(f64, (f64, f64), (f64, f64))> = None;
    for &(ax, ay) in &ba {
        for &(bx, by) in &bb {
            let d = (((ax as f64 - bx as f64).powi(2)) + ((ay as f64 - by as f64).powi(2))).sqrt();
            if best.map_or(true, |(bd, _, _)| d < bd) {
                best = Some((d, (ax as f64, ay as f64), (bx as f64, by as f64)));
            }
        }
    }
    best
}

fn velocity_at(pos: &[(usize, (f64, f64))], frame: usize, window: usize) -> Option<((f64, f64), (f64, f64))> {
    let idx = pos.iter().position(|&(f, _)| f == frame)?;
    let lo = idx.saturating_sub(window);
    let hi = (idx + window).min(pos.len() - 1);
    if lo == idx || hi == idx {
        return None;
    }
    let pre = (
        ((pos[idx].1).0 - (pos[lo].1).0) / (idx - lo) as f64,
        ((pos[idx].1).1 - (pos[lo].1).1) / (idx - lo) as f64,
    );
    let post = (
        ((pos[hi].1).0 - (pos[idx].1).0) / (hi - idx) as f64,
        ((pos[hi].1).1 - (pos[idx].1).1) / (hi - idx) as f64,
    );
    Some((pre, post))
}

fn velocity_breaks(pre: (f64, f64), post: (f64, f64), max_speed: f64, frac: f64) -> bool {
    let sign_flip = (pre.0 * post.0 < 0.0 && (pre.0.abs().max(post.0.abs()) > 0.1))
        || (pre.1 * post.1 < 0.0 && (pre.1.abs().max(post.1.abs()) > 0.1));
    let dv = ((post.0 - pre.0).powi(2) + (post.1 - pre.1).powi(2)).sqrt();
    sign_flip || dv > frac * max_speed
}

fn collision_events(
    p: &MotionProgram,
    obj: &ProgramObject,
    range: &Range<usize>,
    cfg: &XformConfig,
) -> Result<Vec<Event>> {
    let full: Range<usize> = 0..p.num_frames;
    let pos = positions_over(p, obj, &full);
    let max_speed = velocities(&pos)
        .iter()
        .map(|v| (v.0 * v.0 + v.1 * v.1).sqrt())
        .fold(0.0, f64::max);
    let mut events = Vec::new();
    for other in &p.objects {
        if other.object_id == obj.object_id {
            continue;
        }
        let other_pos = positions_over(p, other, &full);
        let other_max = velocities(&other_pos)
            .iter()
            .map(|v| (v.0 * v.0 + v.1 * v.1).sqrt())
            .fold(0.0, f64::max);
        for f in range.clone() {
            let (Some(ka), Some(kb)) = (keyframe(obj, f), keyframe(other, f)) else { continue };
            if !ka.visible || !kb.visible {
                continue;
            }
            let ma = support_mask(p, obj, ka)?;
            let mb = support_mask(p, other, kb)?;
            let Some((d, ca, cb)) = boundary_distance(&ma, &mb) else { continue };
            if d >= cfg.collision_distance {
                continue;
            }
            let breaks = [(&pos, max_speed), (&other_pos, other_max)].iter().any(|(ps, ms)| {
                velocity_at(ps, f, cfg.collision_window)
                    .map_or(false, |(pre, post)| velocity_breaks(pre, post, *ms, cfg.collision_velocity_change))
            });
            if breaks {
                events.push(Event {
                    kind: EventKind::Collision,
                    frames: vec![f],
                    other: Some(other.object_id),
                    contacts: vec![(obj.object_id, ca), (other.object_id, cb)],
                    period: None,
                });
            }
        }
    }
    Ok(events)
}

fn cycle_events(obj: &ProgramObject, range: &Range<usize>, cfg: &XformConfig) -> Vec<Event> {
    let frames: Vec<&Keyframe> = range.clone().filter_map(|f| keyframe(obj, f)).collect();
    let n = frames.len();
    if n < 6 {
        return Vec::new();
    }
    // Normalize each parameter channel to zero mean / unit variance and
    // stack into a multichannel series; constant channels drop out.
    let channels: Vec<Vec<f64>> = (0..7)
        .filter_map(|c| {
            let raw: Vec<f64> = frames
                .iter()
                .map(|k| match c {
                    0 => k.params.tx,
                    1 => k.params.ty,
                    2 => k.params.theta,
                    3 => k.params.sx,
                    4 => k.params.sy,
                    5 => k.params.kx,
                    _ => k.params.ky,
                })
                .collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            if var < 1e-12 {
                return None;
            }
            Some(raw.iter().map(|v| (v - mean) / var.sqrt()).collect())
        })
        .collect();
    if channels.is_empty() {
        return Vec::new();
    }
    let energy: f64 = channels.iter().map(|ch| ch.iter().map(|v| v * v).sum::<f64>()).sum();
    let autocorr = |lag: usize| -> f64 {
        let mut num = 0.0;
        for ch in &channels {
            for t in 0..n - lag {
                num += ch[t] * ch[t + lag];
            }
        }
        // Rescale by overlap so long lags are comparable.
        num / energy * n as f64 / (n - lag) as f64
    };
    let rs: Vec<f64> = (0..n / 2 + 1).map(autocorr).collect();
    for lag in 2..rs.len() - 1 {
        if rs[lag] > cfg.cycle_peak_threshold && rs[lag] >= rs[lag - 1] && rs[lag] >= rs[lag + 1] {
            return vec![Event {
                kind: EventKind::MotionCycle,
                frames: frames.iter().map(|k| k.frame).collect(),
                other: None,
                contacts: Vec::new(),
                period: Some(lag),
            }];
        }
    }
    Vec::new()
}

pub fn event_query(
    p: &MotionProgram,
    obj: u64,
    kind: EventKind,
    range: Range<usize>,
    cfg: &XformConfig,
) -> Result<Vec<Event>> {
    check_range(p, &range)?;
    let o = find_object(p, obj)?;
    Ok(match kind {
        EventKind::Held => held_events(o, &range),
        EventKind::Collision => collision_events(p, o, &range, cfg)?,
        EventKind::MotionCycle => cycle_events(o, &range, cfg),
    })
}

// ---------------------------------------------------------------------------
// Easing

pub fn ease_linear(u: f64) -> f64 {
    u
}

pub fn ease_in_out_cubic(u: f64) -> f64 {
    if u < 0.5 {
        4.0 * u * u * u
    } else {
        1.0 - (-2.0 * u + 2.0).powi(3) / 2.0
    }
}

pub fn ease_in_cubic(u: f64) -> f64 {
    u * u * u
}

pub fn ease_out_cubic(u: f64) -> f64 {
    1.0 - (1.0 - u).powi(3)
}

/// Quantizing ease: holds each of `n` equal steps ("animating on n's").
pub fn ease_step(n: usize) -> impl Fn(f64) -> f64 {
    move |u| {
        if u >= 1.0 {
            1.0
        } else {
            (u * n as f64).floor() / n as f64
        }
    }
}

fn check_ease(ease: &dyn Fn(f64) -> f64) -> Result<()> {
    const SAMPLES: usize = 64;
    let mut prev = ease(0.0);
    if prev.abs() > 1e-9 {
        return Err(Error::NonMonotoneEase);
    }
    for i in 1..=SAMPLES {
        let v = ease(i as f64 / SAMPLES as f64);
        if v < prev - 1e-9 {
            return Err(Error::NonMonotoneEase);
        }
        prev = v;
    }
    if (prev - 1.0).abs() > 1e-9 {
        return Err(Error::NonMonotoneEase);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Retiming

fn lerp_params(a: &AffineParams, b: &AffineParams, u: f64) -> AffineParams {
    // Angles are unwrapped so interpolation takes the short way around.
    let mut db = b.theta - a.theta;
    while db > std::f64::consts::PI {
        db -= 2.0 * std::f64::consts::PI;
    }
    while db < -std::f64::consts::PI {
        db += 2.0 * std::f64::consts::PI;
    }
    AffineParams {
        tx: a.tx + u * (b.tx - a.tx),
        ty: a.ty + u * (b.ty - a.ty),
        theta: a.theta + u * db,
        sx: a.sx + u * (b.sx - a.sx),
        sy: a.sy + u * (b.sy - a.sy),
        kx: a.kx + u * (b.kx - a.kx),
        ky: a.ky + u * (b.ky - a.ky),
    }
}

/// Remaps the motion inside `src` onto `tgt`, sampling source parameters at
/// `ease`-warped normalized time; frames before/after the target range
/// shift with the range boundaries and hold at the lifetime edges.
pub fn retime(
    p: &mut MotionProgram,
    obj: u64,
    src: Range<usize>,
    tgt: Range<usize>,
    ease: &dyn Fn(f64) -> f64,
) -> Result<()> {
    check_range(p, &src)?;
    check_range(p, &tgt)?;
    check_ease(ease)?;
    let num_frames = p.num_frames;
    let o = find_object_mut(p, obj)?;
    let old: BTreeMap<usize, Keyframe> = o.keyframes.iter().map(|k| (k.frame, k.clone())).collect();
    if old.is_empty() {
        return Ok(());
    }
    let (first, last) = (*old.keys().next().unwrap(), *old.keys().last().unwrap());
    // Continuous-time source sample with boundary hold.
    let sample = |t: f64| -> Keyframe {
        let t = t.clamp(first as f64, last as f64);
        let f0 = (t.floor() as usize).clamp(first, last);
        let f1 = (f0 + 1).min(last);
        let a = old.range(..=f0).next_back().map(|(_, k)| k).unwrap();
        let b = old.range(f1..).next().map(|(_, k)| k).unwrap_or(a);
        let u = if b.frame > a.frame { (t - a.frame as f64) / (b.frame - a.frame) as f64 } else { 0.0 };
        let nearest = if u < 0.5 { a } else { b };
        Keyframe { frame: 0, params: lerp_params(&a.params, &b.params, u), z: nearest.z, visible: nearest.visible }
    };
    let shift_pre = src.start as i64 - tgt.start as i64;
    let shift_post = src.end as i64 - tgt.end as i64;
    let src_len = (src.end - src.start - 1).max(1) as f64;
    let tgt_len = (tgt.end - tgt.start - 1).max(1) as f64;
    let mut fresh = Vec::new();
    for f in 0..num_frames {
        let (s, exact): (f64, bool) = if f < tgt.start {
            ((f as i64 + shift_pre) as f64, true)
        } else if f < tgt.end {
            let u = (f - tgt.start) as f64 / tgt_len;
            (src.start as f64 + ease(u) * src_len, false)
        } else {
            ((f as i64 + shift_post) as f64, true)
        };
        // Shifted frames outside the old lifetime disappear rather than
        // hold, so the object's span is preserved under pure shifts.
        if exact {
            if s < first as f64 || s > last as f64 {
                continue;
            }
            if let Some(k) = old.get(&(s as usize)) {
                fresh.push(Keyframe { frame: f, ..k.clone() });
            }
            continue;
        }
        let mut k = sample(s);
        k.frame = f;
        fresh.push(k);
    }
    o.keyframes = fresh;
    Ok(())
}

// ---------------------------------------------------------------------------
// Motion adjustment

fn range_u(range: &Range<usize>, f: usize) -> f64 {
    if range.end - range.start <= 1 {
        0.0
    } else {
        (f - range.start) as f64 / (range.end - 1 - range.start) as f64
    }
}

/// Post-multiplies each in-range transform by `xform(u)` expressed in
/// canonical coordinates about the canonical anchor.
pub fn adj_local_motion(
    p: &mut MotionProgram,
    obj: u64,
    xform: &dyn Fn(f64) -> AffineParams,
    range: Range<usize>,
) -> Result<()> {
    check_range(p, &range)?;
    let ca = canvas_anchor(p);
    let o = find_object_mut(p, obj)?;
    let a = src_anchor(&o.canonical);
    for kf in o.keyframes.iter_mut().filter(|k| range.contains(&k.frame)) {
        let u = range_u(&range, kf.frame);
        let local = xform(u).to_affine(a, a);
        let cur = kf.params.to_affine(a, ca);
        kf.params = AffineParams::from_affine(&cur.compose(&local), a, ca)?;
    }
    Ok(())
}

/// Pre-multiplies each in-range transform by `xform(u)` expressed in frame
/// coordinates about the canvas anchor.
pub fn adj_global_motion(
    p: &mut MotionProgram,
    obj: u64,
    xform: &dyn Fn(f64) -> AffineParams,
    range: Range<usize>,
) -> Result<()> {
    check_range(p, &range)?;
    let ca = canvas_anchor(p);
    let o = find_object_mut(p, obj)?;
    let a = src_anchor(&o.canonical);
    for kf in o.keyframes.iter_mut().filter(|k| range.contains(&k.frame)) {
        let u = range_u(&range, kf.frame);
        let global = xform(u).to_affine(ca, ca);
        let cur = kf.params.to_affine(a, ca);
        kf.params = AffineParams::from_affine(&global.compose(&cur), a, ca)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Appearance

fn check_nonempty(img: &RasterImage) -> Result<()> {
    let opaque = img.channels < 4
        || img.data.iter().skip(3).step_by(img.channels).any(|&a| a > 0.5);
    if img.width == 0 || img.height == 0 || !opaque {
        return Err(Error::EmptyImage);
    }
    Ok(())
}

fn next_object_id(p: &MotionProgram) -> u64 {
    p.objects.iter().map(|o| o.object_id).max().unwrap_or(0) + 1
}

/// Replaces the canonical image over `range`. A partial range splits the
/// object: the in-range keyframes move to a fresh object carrying the new
/// image. Returns the id that now renders `new_image`.
pub fn change_appearance(
    p: &mut MotionProgram,
    obj: u64,
    new_image: &RasterImage,
    range: Range<usize>,
) -> Result<u64> {
    check_range(p, &range)?;
    check_nonempty(new_image)?;
    find_object(p, obj)?;
    let covers_all = {
        let o = find_object(p, obj)?;
        o.keyframes.iter().all(|k| range.contains(&k.frame))
    };
    if covers_all {
        find_object_mut(p, obj)?.canonical = new_image.clone();
        return Ok(obj);
    }
    let fresh_id = next_object_id(p);
    let o = find_object_mut(p, obj)?;
    let (moved, kept): (Vec<Keyframe>, Vec<Keyframe>) =
        o.keyframes.drain(..).partition(|k| range.contains(&k.frame));
    o.keyframes = kept;
    p.objects.push(ProgramObject {
        object_id: fresh_id,
        canonical: new_image.clone(),
        keyframes: moved,
    });
    Ok(fresh_id)
}

// ---------------------------------------------------------------------------
// Collision-preserving appearance change

/// Swaps the canonical image while keeping the original contact points: at
/// each detected collision frame the new shape is locally translated so its
/// nearest boundary point lands on the old contact point, with offsets
/// blended linearly to zero over `collision_blend_window` frames (or toward
/// the next collision's offset when windows overlap).
pub fn collision_preserving_change(
    p: &mut MotionProgram,
    obj: u64,
    new_image: &RasterImage,
    cfg: &XformConfig,
) -> Result<u64> {
    check_nonempty(new_image)?;
    let collisions = event_query(p, obj, EventKind::Collision, 0..p.num_frames, cfg)?;
    let id = change_appearance(p, obj, new_image, 0..p.num_frames)?;
    if collisions.is_empty() {
        return Ok(id);
    }
    // Frame-space offset per collision frame: old contact minus the new
    // shape's nearest boundary point to that contact.
    let mut offsets: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    {
        let o = find_object(p, id)?;
        for ev in &collisions {
            let f = ev.frames[0];
            let Some(kf) = keyframe(o, f) else { continue };
            let (_, target) = ev.contacts.iter().find(|(oid, _)| *oid == obj).cloned().unwrap();
            let mask = support_mask(p, o, kf)?;
            let near = boundary_pixels(&mask)
                .into_iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - target.0).powi(2) + (a.1 as f64 - target.1).powi(2);
                    let db = (b.0 as f64 - target.0).powi(2) + (b.1 as f64 - target.1).powi(2);
                    da.partial_cmp(&db).unwrap()
                });
            if let Some((nx, ny)) = near {
                let d = (target.0 - nx as f64, target.1 - ny as f64);
                let cur = offsets.entry(f).or_insert((0.0, 0.0));
                // Two simultaneous contacts: keep the larger correction.
                if d.0 * d.0 + d.1 * d.1 > cur.0 * cur.0 + cur.1 * cur.1 {
                    *cur = d;
                }
            }
        }
    }
    if offsets.is_empty() {
        return Ok(id);
    }
    let w = cfg.collision_blend_window as f64;
    let keys: Vec<usize> = offsets.keys().copied().collect();
    let offset_at = |f: usize| -> (f64, f64) {
        if let Some(d) = offsets.get(&f) {
            return *d;
        }
        let left = keys.iter().rev().find(|&&k| k < f).copied();
        let right = keys.iter().find(|&&k| k > f).copied();
        let fade = |k: usize, d: (f64, f64)| -> (f64, f64) {
            let dist = (f as f64 - k as f64).abs();
            let t = (1.0 - dist / w).max(0.0);
            (d.0 * t, d.1 * t)
        };
        match (left, right) {
            (Some(l), Some(r)) if (r - l) as f64 <= 2.0 * w => {
                // Overlapping windows: interpolate between the collisions.
                let u = (f - l) as f64 / (r - l) as f64;
                let dl = offsets[&l];
                let dr = offsets[&r];
                (dl.0 + u * (dr.0 - dl.0), dl.1 + u * (dr.1 - dl.1))
            }
            (Some(l), _) if left.is_some() && (f - l) as f64 <= w => fade(l, offsets[&l]),
            (_, Some(r)) if (r - f) as f64 <= w => fade(r, offsets[&r]),
            _ => (0.0, 0.0),
        }
    };
    let ca = canvas_anchor(p);
    let o = find_object_mut(p, id)?;
    let a = src_anchor(&o.canonical);
    for kf in o.keyframes.iter_mut() {
        let (dx, dy) = offset_at(kf.frame);
        if dx == 0.0 && dy == 0.0 {
            continue;
        }
        // A frame-space offset d realized as a local translation L^-1 d.
        let inv = kf.params.linear().inverse()?;
        let (lx, ly) = inv.apply(dx, dy);
        let cur = kf.params.to_affine(a, ca);
        let local = AffineParams::translation(lx, ly).to_affine(a, a);
        kf.params = AffineParams::from_affine(&cur.compose(&local), a, ca)?;
    }
    Ok(id)
}

// ---------------------------------------------------------------------------
// Scene-graph CRUD

pub fn create_object(p: &mut MotionProgram, obj: ProgramObject) -> Result<()> {
    if p.objects.iter().any(|o| o.object_id == obj.object_id) {
        return Err(Error::IdCollision(obj.object_id));
    }
    check_nonempty(&obj.canonical)?;
    p.objects.push(obj);
    p.validate()
}

/// Removes an object and re-ranks the remaining per-frame z values to a
/// dense 0..n-1 order.
pub fn delete_object(p: &mut MotionProgram, obj: u64) -> Result<()> {
    find_object(p, obj)?;
    p.objects.retain(|o| o.object_id != obj);
    for f in 0..p.num_frames {
        let mut present: Vec<(i64, u64)> = p
            .objects
            .iter()
            .filter_map(|o| keyframe(o, f).map(|k| (k.z, o.object_id)))
            .collect();
        present.sort();
        for o in p.objects.iter_mut() {
            if let Some(kf) = o.keyframes.iter_mut().find(|k| k.frame == f) {
                kf.z = present.iter().position(|&(_, id)| id == o.object_id).unwrap() as i64;
            }
        }
    }
    p.validate()
}

/// Copies the source's keyframe timeline (frames, transforms, z, visibility)
/// onto the destination; appearances stay distinct.
pub fn copy_motion(p: &mut MotionProgram, src: u64, dst: u64) -> Result<()> {
    let keyframes = find_object(p, src)?.keyframes.clone();
    find_object_mut(p, dst)?.keyframes = keyframes;
    p.validate()
}

pub fn set_transforms(p: &mut MotionProgram, obj: u64, keyframes: Vec<Keyframe>) -> Result<()> {
    find_object_mut(p, obj)?.keyframes = keyframes;
    p.validate()
}

// ---------------------------------------------------------------------------
// Ops files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpsFile {
    pub ops: Vec<OpBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpBlock {
    pub select: Select,
    pub apply: Apply,
}

/// Object selector: exact id, nearest dominant color, or every object.
#[derive(Debug, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Select {
    Object { object: u64 },
    Color { color: [f64; 3] },
    All { all: bool },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Apply {
    Retime {
        src: [usize; 2],
        tgt: [usize; 2],
        ease: String,
        #[serde(default)]
        steps: usize,
    },
    GlobalTranslate { dx: f64, dy: f64, range: Option<[usize; 2]> },
    LocalRotate { degrees: f64, range: Option<[usize; 2]> },
    LocalScale { factor: f64, range: Option<[usize; 2]> },
    ChangeAppearance { image: PathBuf, range: Option<[usize; 2]> },
    CollisionPreservingChange { image: PathBuf },
    Delete,
    CopyMotion { to: u64 },
}

fn resolve_select(p: &MotionProgram, sel: &Select) -> Result<Vec<u64>> {
    match sel {
        Select::Object { object } => {
            find_object(p, *object)?;
            Ok(vec![*object])
        }
        Select::Color { color } => {
            let mut best: Option<(f64, u64)> = None;
            for o in &p.objects {
                let c = dominant_color(&o.canonical)?;
                let d = (0..3).map(|i| (c[i] - color[i]).powi(2)).sum::<f64>();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, o.object_id));
                }
            }
            best.map(|(_, id)| vec![id])
                .ok_or_else(|| Error::ScriptError("color selector on empty program".into()))
        }
        Select::All { all } => {
            if !all {
                return Err(Error::ScriptError("select.all must be true".into()));
            }
            Ok(p.objects.iter().map(|o| o.object_id).collect())
        }
    }
}

fn named_ease(name: &str, steps: usize) -> Result<Box<dyn Fn(f64) -> f64>> {
    Ok(match name {
        "linear" => Box::new(ease_linear),
        "ease-in-cubic" => Box::new(ease_in_cubic),
        "ease-out-cubic" => Box::new(ease_out_cubic),
        "ease-in-out-cubic" => Box::new(ease_in_out_cubic),
        "step" => {
            if steps == 0 {
                return Err(Error::ScriptError("step ease requires steps >= 1".into()));
            }
            Box::new(ease_step(steps))
        }
        other => return Err(Error::ScriptError(format!("unknown ease '{other}'"))),
    })
}

fn load_rgba(path: &Path) -> Result<RasterImage> {
    crate::imaging::load_png(path)
}

/// Runs an ops-file script (ordered select/apply blocks, TOML) against a
/// program. Relative image paths resolve against `base_dir`.
pub fn run_script(p: &mut MotionProgram, text: &str, base_dir: &Path, cfg: &XformConfig) -> Result<()> {
    let file: OpsFile =
        toml::from_str(text).map_err(|e| Error::ScriptError(format!("ops file: {e}")))?;
    let full = |r: &Option<[usize; 2]>, p: &MotionProgram| -> Range<usize> {
        r.map(|[a, b]| a..b).unwrap_or(0..p.num_frames)
    };
    for block in &file.ops {
        let ids = resolve_select(p, &block.select)?;
        for id in ids {
            match &block.apply {
                Apply::Retime { src, tgt, ease, steps } => {
                    let ef = named_ease(ease, *steps)?;
                    retime(p, id, src[0]..src[1], tgt[0]..tgt[1], &ef)?;
                }
                Apply::GlobalTranslate { dx, dy, range } => {
                    let (dx, dy) = (*dx, *dy);
                    adj_global_motion(p, id, &move |_| AffineParams::translation(dx, dy), full(range, p))?;
                }
                Apply::LocalRotate { degrees, range } => {
                    let th = degrees.to_radians();
                    adj_local_motion(
                        p,
                        id,
                        &move |_| AffineParams { theta: th, ..AffineParams::identity() },
                        full(range, p),
                    )?;
                }
                Apply::LocalScale { factor, range } => {
                    let s = *factor;
                    adj_local_motion(
                        p,
                        id,
                        &move |_| AffineParams { sx: s, sy: s, ..AffineParams::identity() },
                        full(range, p),
                    )?;
                }
                Apply::ChangeAppearance { image, range } => {
                    let img = load_rgba(&base_dir.join(image))?;
                    change_appearance(p, id, &img, full(range, p))?;
                }
                Apply::CollisionPreservingChange { image } => {
                    let img = load_rgba(&base_dir.join(image))?;
                    collision_preserving_change(p, id, &img, cfg)?;
                }
                Apply::Delete => delete_object(p, id)?,
                Apply::CopyMotion { to } => copy_motion(p, id, *to)?,
            }
            p.validate()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::render_frame;
    use crate::segmentation::{BackgroundKind, BackgroundModel};
    use approx::assert_relative_eq;

    fn solid_sprite(w: usize, h: usize, color: [f32; 3]) -> RasterImage {
        let mut img = RasterImage::new(w, h, 4);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.set(x, y, c, color[c]);
                }
                img.set(x, y, 3, 1.0);
            }
        }
        img
    }

    fn test_program(keyframes: Vec<Keyframe>) -> MotionProgram {
        let n = keyframes.iter().map(|k| k.frame).max().unwrap() + 1;
        MotionProgram {
            width: 64,
            height: 64,
            num_frames: n,
            fps: 10.0,
            background: BackgroundModel {
                kind: BackgroundKind::SolidColor(crate::imaging::rgb_pixel_to_lab(1.0, 1.0, 1.0)),
                tolerance: 0.08,
            },
            objects: vec![ProgramObject {
                object_id: 1,
                canonical: solid_sprite(10, 10, [0.9, 0.1, 0.1]),
                keyframes,
            }],
        }
    }

    fn kf(frame: usize, tx: f64, ty: f64) -> Keyframe {
        Keyframe {
            frame,
            params: AffineParams { tx, ty, ..AffineParams::identity() },
            z: 0,
            visible: true,
        }
    }

    #[test]
    fn color_query_returns_dominant_color() {
        let p = test_program(vec![kf(0, 0.0, 0.0), kf(1, 1.0, 0.0)]);
        let s = prop_query(&p, Some(1), Property::Color, 0..2).unwrap();
        assert_eq!(s.len(), 1);
        for v in &s[0].values {
            match v {
                PropertyValue::Color(c) => {
                    assert_relative_eq!(c[0], 0.9, epsilon = 1e-6);
                    assert_relative_eq!(c[1], 0.1, epsilon = 1e-6);
                }
                _ => panic!("wrong payload"),
            }
        }
    }

    #[test]
    fn velocity_of_linear_ramp() {
        let p = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 0.0), kf(2, 4.0, 0.0)]);
        let s = prop_query(&p, Some(1), Property::Velocity, 0..3).unwrap();
        match s[0].values[1] {
            PropertyValue::Velocity(dx, dy) => {
                assert_relative_eq!(dx, 2.0, epsilon = 1e-9);
                assert_relative_eq!(dy, 0.0, epsilon = 1e-9);
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn size_doubles_under_sx_2() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0)]);
        p.objects[0].keyframes[0].params.sx = 2.0;
        let s = prop_query(&p, Some(1), Property::Size, 0..1).unwrap();
        match s[0].values[0] {
            // 10-px sprite: alpha bbox spans 9 px of pixel centers; sx = 2
            // doubles it while height stays put.
            PropertyValue::Size(w, h) => {
                assert_relative_eq!(w, 18.0, epsilon = 1e-9);
                assert_relative_eq!(h, 9.0, epsilon = 1e-9);
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn unknown_object_and_bad_range() {
        let p = test_program(vec![kf(0, 0.0, 0.0)]);
        assert!(matches!(
            prop_query(&p, Some(9), Property::Color, 0..1),
            Err(Error::UnknownObject(9))
        ));
        assert!(matches!(
            prop_query(&p, Some(1), Property::Color, 0..5),
            Err(Error::RangeError(0, 5))
        ));
    }

    #[test]
    fn constant_transform_is_one_held_event() {
        let frames: Vec<Keyframe> = (0..10).map(|f| kf(f, 3.0, -2.0)).collect();
        let p = test_program(frames);
        let cfg = XformConfig::default();
        let evs = event_query(&p, 1, EventKind::Held, 0..10, &cfg).unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].frames, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn moving_object_has_no_held_event() {
        let frames: Vec<Keyframe> = (0..10).map(|f| kf(f, f as f64, 0.0)).collect();
        let p = test_program(frames);
        let cfg = XformConfig::default();
        assert!(event_query(&p, 1, EventKind::Held, 0..10, &cfg).unwrap().is_empty());
    }

    /// Ball drops toward a floor, touches at frame 17, and bounces back up.
    fn bounce_program() -> MotionProgram {
        let mut keyframes = Vec::new();
        for f in 0..35 {
            let ty = if f <= 17 { -20.0 + f as f64 * 1.25 } else { 1.25 - (f - 17) as f64 * 1.25 };
            keyframes.push(kf(f, 0.0, ty));
        }
        let mut p = test_program(keyframes);
        // Floor strip directly below the ball's lowest position.
        let floor_kfs: Vec<Keyframe> = (0..35)
            .map(|f| Keyframe {
                frame: f,
                params: AffineParams { tx: 0.0, ty: 9.0, ..AffineParams::identity() },
                z: 1,
                visible: true,
            })
            .collect();
        p.objects.push(ProgramObject {
            object_id: 2,
            canonical: solid_sprite(40, 6, [0.2, 0.2, 0.2]),
            keyframes: floor_kfs,
        });
        p
    }

    #[test]
    fn bounce_is_detected_as_collision() {
        let p = bounce_program();
        let cfg = XformConfig::default();
        let evs = event_query(&p, 1, EventKind::Collision, 0..35, &cfg).unwrap();
        assert!(!evs.is_empty(), "no collision found");
        let frames: Vec<usize> = evs.iter().map(|e| e.frames[0]).collect();
        assert!(
            frames.iter().any(|&f| (16..=18).contains(&f)),
            "collision at {frames:?}, expected near 17"
        );
        let ev = evs.iter().find(|e| (16..=18).contains(&e.frames[0])).unwrap();
        assert_eq!(ev.other, Some(2));
        // Contact near the ball's bottom edge against the floor top.
        let (_, (cx, cy)) = ev.contacts[0];
        assert!((20.0..44.0).contains(&cx), "contact x = {cx}");
        assert!((35.0..42.0).contains(&cy), "contact y = {cy}");
    }

    #[test]
    fn sinusoid_cycle_period_recovered() {
        let frames: Vec<Keyframe> = (0..96)
            .map(|f| kf(f, 10.0 * (2.0 * std::f64::consts::PI * f as f64 / 24.0).sin(), 0.0))
            .collect();
        let mut p = test_program(frames);
        p.num_frames = 96;
        let cfg = XformConfig::default();
        let evs = event_query(&p, 1, EventKind::MotionCycle, 0..96, &cfg).unwrap();
        assert_eq!(evs.len(), 1);
        let period = evs[0].period.unwrap() as i64;
        assert!((period - 24).abs() <= 1, "period = {period}");
    }

    #[test]
    fn retime_identity_is_structural_identity() {
        let p0 = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 1.0), kf(2, 4.0, 2.0), kf(3, 6.0, 3.0)]);
        let mut p = p0.clone();
        retime(&mut p, 1, 0..4, 0..4, &ease_linear).unwrap();
        assert_eq!(p, p0);
        p.validate().unwrap();
    }

    #[test]
    fn retime_double_length_halves_speed() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 0.0), kf(2, 4.0, 0.0), kf(3, 6.0, 0.0)]);
        p.num_frames = 7;
        retime(&mut p, 1, 0..4, 0..7, &ease_linear).unwrap();
        let o = &p.objects[0];
        assert_eq!(o.keyframes.len(), 7);
        for (i, k) in o.keyframes.iter().enumerate() {
            assert_relative_eq!(k.params.tx, i as f64, epsilon = 1e-9);
        }
        p.validate().unwrap();
    }

    #[test]
    fn retime_step_ease_holds_frames() {
        let mut p = test_program((0..8).map(|f| kf(f, f as f64, 0.0)).collect());
        retime(&mut p, 1, 0..8, 0..8, &ease_step(4)).unwrap();
        let txs: Vec<f64> = p.objects[0].keyframes.iter().map(|k| k.params.tx).collect();
        // 4 steps over 8 frames: params advance every other frame (the
        // final frame snaps to the range end since ease(1) = 1).
        for pair in txs[..6].chunks(2) {
            assert_relative_eq!(pair[0], pair[1], epsilon = 1e-9);
        }
        assert_relative_eq!(txs[7], 7.0, epsilon = 1e-9);
        p.validate().unwrap();
    }

    #[test]
    fn non_monotone_ease_rejected() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0), kf(1, 1.0, 0.0)]);
        let bad = |u: f64| 1.0 - u;
        assert!(matches!(retime(&mut p, 1, 0..2, 0..2, &bad), Err(Error::NonMonotoneEase)));
    }

    #[test]
    fn adj_local_identity_is_identity() {
        let p0 = test_program(vec![kf(0, 1.0, 2.0), kf(1, 3.0, 4.0)]);
        let mut p = p0.clone();
        adj_local_motion(&mut p, 1, &|_| AffineParams::identity(), 0..2).unwrap();
        for (a, b) in p.objects[0].keyframes.iter().zip(&p0.objects[0].keyframes) {
            assert!(params_close(&a.params, &b.params, 1e-9));
        }
    }

    #[test]
    fn local_rotation_spins_in_place() {
        let mut p = test_program(vec![kf(0, 5.0, -3.0), kf(1, 8.0, 2.0)]);
        let before: Vec<(f64, f64)> = p.objects[0].keyframes.iter().map(|k| frame_position(&p, k)).collect();
        let th = 10f64.to_radians();
        adj_local_motion(&mut p, 1, &move |_| AffineParams { theta: th, ..AffineParams::identity() }, 0..2)
            .unwrap();
        let after: Vec<(f64, f64)> = p.objects[0].keyframes.iter().map(|k| frame_position(&p, k)).collect();
        for (b, a) in before.iter().zip(&after) {
            assert_relative_eq!(b.0, a.0, epsilon = 1e-9);
            assert_relative_eq!(b.1, a.1, epsilon = 1e-9);
        }
        assert_relative_eq!(p.objects[0].keyframes[0].params.theta, th, epsilon = 1e-9);
    }

    #[test]
    fn pulsing_scale_oscillates_bbox() {
        let mut p = test_program((0..9).map(|f| kf(f, 0.0, 0.0)).collect());
        let pulse = |u: f64| {
            let s = 1.0 + 0.1 * (2.0 * std::f64::consts::PI * u).sin();
            AffineParams { sx: s, sy: s, ..AffineParams::identity() }
        };
        adj_local_motion(&mut p, 1, &pulse, 0..9).unwrap();
        let s = prop_query(&p, Some(1), Property::Size, 0..9).unwrap();
        let widths: Vec<f64> = s[0]
            .values
            .iter()
            .map(|v| match v {
                PropertyValue::Size(w, _) => *w,
                _ => unreachable!(),
            })
            .collect();
        let (min, max) = widths.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
        assert!(max / min > 1.15, "widths {widths:?}");
        p.validate().unwrap();
    }

    #[test]
    fn global_translate_shifts_trajectory() {
        let p0 = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 1.0)]);
        let mut p = p0.clone();
        adj_global_motion(&mut p, 1, &|_| AffineParams::translation(50.0, 0.0), 0..2).unwrap();
        for (a, b) in p.objects[0].keyframes.iter().zip(&p0.objects[0].keyframes) {
            assert_relative_eq!(a.params.tx, b.params.tx + 50.0, epsilon = 1e-9);
            assert_relative_eq!(a.params.ty, b.params.ty, epsilon = 1e-9);
        }
    }

    #[test]
    fn integer_global_translate_is_pixel_exact() {
        let p0 = test_program(vec![kf(0, -4.0, 0.0)]);
        let mut p = p0.clone();
        adj_global_motion(&mut p, 1, &|_| AffineParams::translation(7.0, 3.0), 0..1).unwrap();
        let f0 = render_frame(&p0, 0).unwrap();
        let f1 = render_frame(&p, 0).unwrap();
        for y in 0..64usize {
            for x in 0..64usize {
                let src = (x as i64 - 7, y as i64 - 3);
                if (0..64).contains(&src.0) && (0..64).contains(&src.1) {
                    for c in 0..3 {
                        assert_eq!(f1.get(x, y, c), f0.get(src.0 as usize, src.1 as usize, c));
                    }
                }
            }
        }
    }

    #[test]
    fn change_appearance_identical_image_renders_identically() {
        let p0 = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 0.0)]);
        let mut p = p0.clone();
        let img = p0.objects[0].canonical.clone();
        let id = change_appearance(&mut p, 1, &img, 0..2).unwrap();
        assert_eq!(id, 1);
        for t in 0..2 {
            assert_eq!(render_frame(&p, t).unwrap().data, render_frame(&p0, t).unwrap().data);
        }
    }

    #[test]
    fn partial_range_splits_object() {
        let mut p = test_program((0..6).map(|f| kf(f, f as f64, 0.0)).collect());
        let green = solid_sprite(10, 10, [0.1, 0.8, 0.1]);
        let id = change_appearance(&mut p, 1, &green, 3..6).unwrap();
        assert_ne!(id, 1);
        assert_eq!(p.objects.len(), 2);
        let old = p.objects.iter().find(|o| o.object_id == 1).unwrap();
        let new = p.objects.iter().find(|o| o.object_id == id).unwrap();
        assert_eq!(old.keyframes.iter().map(|k| k.frame).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(new.keyframes.iter().map(|k| k.frame).collect::<Vec<_>>(), vec![3, 4, 5]);
        // Motion is untouched across the split.
        assert_relative_eq!(new.keyframes[0].params.tx, 3.0, epsilon = 1e-9);
        p.validate().unwrap();
    }

    #[test]
    fn empty_image_rejected() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0)]);
        let blank = RasterImage::new(8, 8, 4);
        assert!(matches!(change_appearance(&mut p, 1, &blank, 0..1), Err(Error::EmptyImage)));
    }

    #[test]
    fn collision_preserving_shrink_keeps_contact() {
        let mut p = bounce_program();
        let cfg = XformConfig::default();
        let evs = event_query(&p, 1, EventKind::Collision, 0..35, &cfg).unwrap();
        let ev = evs.iter().find(|e| (16..=18).contains(&e.frames[0])).unwrap().clone();
        let small = solid_sprite(5, 5, [0.9, 0.7, 0.1]);
        let id = collision_preserving_change(&mut p, 1, &small, &cfg).unwrap();
        p.validate().unwrap();
        // At the original collision frame the shrunken shape's boundary
        // still reaches the original contact point.
        let o = p.objects.iter().find(|x| x.object_id == id).unwrap();
        let kf = keyframe(o, ev.frames[0]).unwrap();
        let mask = support_mask(&p, o, kf).unwrap();
        let (_, target) = ev.contacts.iter().find(|(oid, _)| *oid == 1).unwrap();
        let min_d = boundary_pixels(&mask)
            .iter()
            .map(|&(x, y)| ((x as f64 - target.0).powi(2) + (y as f64 - target.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(min_d <= 1.0, "contact drift {min_d}");
    }

    #[test]
    fn same_size_replacement_keeps_params() {
        let mut p = bounce_program();
        let p0 = p.clone();
        let cfg = XformConfig::default();
        let same = solid_sprite(10, 10, [0.1, 0.1, 0.9]);
        collision_preserving_change(&mut p, 1, &same, &cfg).unwrap();
        for (a, b) in p.objects[0].keyframes.iter().zip(&p0.objects[0].keyframes) {
            assert!(params_close(&a.params, &b.params, 1e-6), "frame {}", a.frame);
        }
    }

    #[test]
    fn delete_reranks_z() {
        let mut p = bounce_program();
        delete_object(&mut p, 1).unwrap();
        assert_eq!(p.objects.len(), 1);
        assert!(p.objects[0].keyframes.iter().all(|k| k.z == 0));
        assert!(matches!(delete_object(&mut p, 1), Err(Error::UnknownObject(1))));
    }

    #[test]
    fn copy_motion_duplicates_trajectory() {
        let mut p = bounce_program();
        copy_motion(&mut p, 1, 2).unwrap();
        let a = &p.objects[0].keyframes;
        let b = &p.objects[1].keyframes;
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(params_close(&x.params, &y.params, 1e-12));
            assert_eq!(x.frame, y.frame);
        }
    }

    #[test]
    fn create_object_rejects_id_collision() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0)]);
        let dup = ProgramObject {
            object_id: 1,
            canonical: solid_sprite(4, 4, [0.0, 0.0, 0.0]),
            keyframes: vec![kf(0, 0.0, 0.0)],
        };
        assert!(matches!(create_object(&mut p, dup), Err(Error::IdCollision(1))));
        let fresh = ProgramObject {
            object_id: 7,
            canonical: solid_sprite(4, 4, [0.0, 0.0, 0.0]),
            keyframes: vec![kf(0, 12.0, 12.0)],
        };
        create_object(&mut p, fresh).unwrap();
        assert_eq!(p.objects.len(), 2);
    }

    #[test]
    fn script_application_is_deterministic() {
        let script = r#"
            [[ops]]
            select = { object = 1 }
            apply = { op = "global-translate", dx = 5.0, dy = -2.0 }

            [[ops]]
            select = { object = 1 }
            apply = { op = "retime", src = [0, 4], tgt = [0, 4], ease = "ease-in-out-cubic" }
        "#;
        let base = test_program(vec![kf(0, 0.0, 0.0), kf(1, 2.0, 1.0), kf(2, 4.0, 2.0), kf(3, 6.0, 3.0)]);
        let cfg = XformConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let mut outs = Vec::new();
        for i in 0..2 {
            let mut p = base.clone();
            run_script(&mut p, script, dir.path(), &cfg).unwrap();
            let path = dir.path().join(format!("out{i}.svg"));
            crate::program::write_program(&p, &path).unwrap();
            outs.push(std::fs::read(path.with_extension("json")).unwrap());
        }
        assert_eq!(outs[0], outs[1], "sidecars differ between runs");
    }

    #[test]
    fn script_color_selector_picks_nearest() {
        let mut p = bounce_program();
        let script = r#"
            [[ops]]
            select = { color = [0.2, 0.2, 0.2] }
            apply = { op = "delete" }
        "#;
        run_script(&mut p, script, Path::new("."), &XformConfig::default()).unwrap();
        // The dark floor (object 2) is the nearest match and is removed.
        assert_eq!(p.objects.len(), 1);
        assert_eq!(p.objects[0].object_id, 1);
    }

    #[test]
    fn script_rejects_unknown_op() {
        let mut p = test_program(vec![kf(0, 0.0, 0.0)]);
        let script = r#"
            [[ops]]
            select = { object = 1 }
            apply = { op = "explode" }
        "#;
        assert!(matches!(
            run_script(&mut p, script, Path::new("."), &XformConfig::default()),
            Err(Error::ScriptError(_))
        ));
    }
}
