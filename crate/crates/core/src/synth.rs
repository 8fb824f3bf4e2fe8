//! Ground-truth scene generation: procedurally rendered motion-graphics
//! clips with a known motion program and a known mapping log, used to
//! validate segmentation, tracking, and reconstruction end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::AffineParams;
use crate::imaging::{rgb_pixel_to_lab, RasterImage};
use crate::program::{render_frame, Keyframe, MotionProgram, ProgramObject};
use crate::segmentation::{BackgroundKind, BackgroundModel};
use crate::tracking::MappingType;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shape {
    Rect,
    Disc,
    /// Closed polygon in unit coordinates ([0,1]^2), scaled by `size`.
    Polygon { points: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum MotionTrack {
    Static { x: f64, y: f64 },
    Linear { from: (f64, f64), to: (f64, f64) },
    Sine { center: (f64, f64), amplitude: (f64, f64), period: f64 },
    /// Piecewise-linear through (frame, x, y) waypoints.
    Waypoints { points: Vec<(usize, f64, f64)> },
}

impl MotionTrack {
    fn position(&self, t: usize, num_frames: usize) -> (f64, f64) {
        let u = if num_frames > 1 { t as f64 / (num_frames - 1) as f64 } else { 0.0 };
        match self {
            MotionTrack::Static { x, y } => (*x, *y),
            MotionTrack::Linear { from, to } => {
                (from.0 + u * (to.0 - from.0), from.1 + u * (to.1 - from.1))
            }
            MotionTrack::Sine { center, amplitude, period } => {
                let ph = 2.0 * std::f64::consts::PI * t as f64 / period;
                (center.0 + amplitude.0 * ph.sin(), center.1 + amplitude.1 * ph.sin())
            }
            MotionTrack::Waypoints { points } => {
                assert!(!points.is_empty());
                if t <= points[0].0 {
                    return (points[0].1, points[0].2);
                }
                for w in points.windows(2) {
                    let (t0, x0, y0) = w[0];
                    let (t1, x1, y1) = w[1];
                    if t <= t1 {
                        let u = (t - t0) as f64 / (t1 - t0).max(1) as f64;
                        return (x0 + u * (x1 - x0), y0 + u * (y1 - y0));
                    }
                }
                let last = points[points.len() - 1];
                (last.1, last.2)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteSpec {
    pub name: String,
    pub shape: Shape,
    /// sRGB fill color.
    pub color: [f32; 3],
    /// Width and height in pixels.
    pub size: (f64, f64),
    pub track: MotionTrack,
    /// Rotation in radians per frame.
    pub spin: f64,
    pub z: i64,
    /// First frame the sprite is visible.
    pub enter: usize,
    /// First frame the sprite is no longer visible (exclusive end).
    pub exit: Option<usize>,
    /// Rendered but excluded from the truth log (e.g. background-colored
    /// occluders a tracker is not expected to discover).
    pub untracked: bool,
}

impl Default for SpriteSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            shape: Shape::Rect,
            color: [0.5, 0.5, 0.5],
            size: (10.0, 10.0),
            track: MotionTrack::Static { x: 0.0, y: 0.0 },
            spin: 0.0,
            z: 0,
            enter: 0,
            exit: None,
            untracked: false,
        }
    }
}

/// Scripted tracking-transition annotation used only for the truth log
/// (e.g. a merge or split the tracker is expected to report).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub t: usize,
    /// One of the mapping-type names (kebab-case).
    pub kind: String,
    pub sprites: Vec<String>,
    /// Extra sprites consumed by this event without being participants
    /// (e.g. the hidden twin in a scripted split); they get no default
    /// one-to-one record at this transition.
    #[serde(default)]
    pub covers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub num_frames: usize,
    /// sRGB background color.
    pub background: [f32; 3],
    pub seed: u64,
    pub sprites: Vec<SpriteSpec>,
    pub events: Vec<ScriptEvent>,
}

impl Default for SceneScript {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fps: 10.0,
            num_frames: 8,
            background: [1.0, 1.0, 1.0],
            seed: 0,
            sprites: Vec::new(),
            events: Vec::new(),
        }
    }
}

impl SceneScript {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::ScriptError(format!("{}: {e}", path.display())))
    }
}

/// One expected (or observed) mapping decision at a frame transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRecord {
    pub t: usize,
    pub kind: MappingType,
    /// Participating object ids (truth uses sprite indices + 1).
    pub objects: Vec<u64>,
}

pub struct GeneratedScene {
    pub frames: Vec<RasterImage>,
    pub program: MotionProgram,
    pub truth_log: Vec<MappingRecord>,
    /// Sprite name -> ground-truth object id.
    pub id_map: Vec<(String, u64)>,
}

// ---------------------------------------------------------------------------
// Sprite rasterization

const SUPERSAMPLE: usize = 4;

fn inside(shape: &Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Rect => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
        Shape::Disc => {
            let (du, dv) = (u - 0.5, v - 0.5);
            du * du + dv * dv <= 0.25
        }
        Shape::Polygon { points } => {
            // Even-odd ray cast.
            let mut hit = false;
            let n = points.len();
            for i in 0..n {
                let (x0, y0) = points[i];
                let (x1, y1) = points[(i + 1) % n];
                if (y0 > v) != (y1 > v) {
                    let xi = x0 + (v - y0) / (y1 - y0) * (x1 - x0);
                    if u < xi {
                        hit = !hit;
                    }
                }
            }
            hit
        }
    }
}

/// Analytic-coverage RGBA raster of a sprite at its native size, with a 1-px
/// transparent margin so transformed edges stay inside the bitmap.
pub fn rasterize_sprite(spec: &SpriteSpec) -> Result<RasterImage> {
    let (w, h) = (spec.size.0.ceil() as usize + 2, spec.size.1.ceil() as usize + 2);
    if spec.size.0 < 1.0 || spec.size.1 < 1.0 {
        return Err(Error::ScriptError(format!("sprite '{}' smaller than 1 px", spec.name)));
    }
    let mut img = RasterImage::new(w, h, 4);
    let ss = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut cover = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / ss - 1.0;
                    let py = y as f64 + (sy as f64 + 0.5) / ss - 1.0;
                    if inside(&spec.shape, px / spec.size.0, py / spec.size.1) {
                        cover += 1;
                    }
                }
            }
            if cover > 0 {
                let a = cover as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    img.set(x, y, c, spec.color[c]);
                }
                img.set(x, y, 3, a);
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Scene generation

pub fn kind_name(k: MappingType) -> &'static str {
    match k {
        MappingType::OneToOne => "one-to-one",
        MappingType::OneToManyNoSplit => "one-to-many-no-split",
        MappingType::ManyToOneNoMerge => "many-to-one-no-merge",
        MappingType::ManyToOneMerge => "many-to-one-merge",
        MappingType::OneToManySplit => "one-to-many-split",
        MappingType::Disappear => "disappear",
        MappingType::Appear => "appear",
    }
}

fn parse_kind(s: &str) -> Result<MappingType> {
    Ok(match s {
        "one-to-one" => MappingType::OneToOne,
        "one-to-many-no-split" => MappingType::OneToManyNoSplit,
        "many-to-one-no-merge" => MappingType::ManyToOneNoMerge,
        "many-to-one-merge" => MappingType::ManyToOneMerge,
        "one-to-many-split" => MappingType::OneToManySplit,
        "disappear" => MappingType::Disappear,
        "appear" => MappingType::Appear,
        other => return Err(Error::ScriptError(format!("unknown mapping kind '{other}'"))),
    })
}

/// Renders a script into frames plus its exact motion program and the
/// expected mapping log (one-to-one transitions by default; enters, exits,
/// and scripted events override).
pub fn generate_scene(script: &SceneScript) -> Result<GeneratedScene> {
    if script.num_frames == 0 || script.width == 0 || script.height == 0 {
        return Err(Error::ScriptError("empty canvas or zero frames".into()));
    }
    let mut objects = Vec::new();
    let mut id_map = Vec::new();
    for (i, spec) in script.sprites.iter().enumerate() {
        let id = i as u64 + 1;
        let exit = spec.exit.unwrap_or(script.num_frames).min(script.num_frames);
        if spec.enter >= exit {
            return Err(Error::ScriptError(format!("sprite '{}' never visible", spec.name)));
        }
        let canonical = rasterize_sprite(spec)?;
        let canvas_anchor =
            ((script.width as f64 - 1.0) / 2.0, (script.height as f64 - 1.0) / 2.0);
        let keyframes = (spec.enter..exit)
            .map(|t| {
                let (x, y) = spec.track.position(t, script.num_frames);
                Keyframe {
                    frame: t,
                    params: AffineParams {
                        tx: x - canvas_anchor.0,
                        ty: y - canvas_anchor.1,
                        theta: spec.spin * (t - spec.enter) as f64,
                        ..AffineParams::identity()
                    },
                    z: spec.z,
                    visible: true,
                }
            })
            .collect();
        id_map.push((spec.name.clone(), id));
        objects.push(ProgramObject { object_id: id, canonical, keyframes });
    }
    let bg = script.background;
    let program = MotionProgram {
        width: script.width,
        height: script.height,
        num_frames: script.num_frames,
        fps: script.fps,
        background: BackgroundModel {
            kind: BackgroundKind::SolidColor(rgb_pixel_to_lab(
                bg[0] as f64,
                bg[1] as f64,
                bg[2] as f64,
            )),
            tolerance: 0.08,
        },
        objects,
    };
    program.validate()?;

    let frames: Result<Vec<RasterImage>> =
        (0..script.num_frames).map(|t| render_frame(&program, t)).collect();

    // Truth log: default one-to-one per alive sprite per transition, with
    // enter/exit and scripted events taking precedence.
    let name_id = |n: &str| -> Result<u64> {
        id_map
            .iter()
            .find(|(name, _)| name == n)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::ScriptError(format!("event names unknown sprite '{n}'")))
    };
    let mut truth_log = Vec::new();
    for t in 1..script.num_frames {
        let scripted: Vec<&ScriptEvent> = script.events.iter().filter(|e| e.t == t).collect();
        let mut covered: Vec<u64> = Vec::new();
        for ev in &scripted {
            let ids: Result<Vec<u64>> = ev.sprites.iter().map(|n| name_id(n)).collect();
            let ids = ids?;
            covered.extend(&ids);
            for n in &ev.covers {
                covered.push(name_id(n)?);
            }
            truth_log.push(MappingRecord { t, kind: parse_kind(&ev.kind)?, objects: ids });
        }
        for (i, spec) in script.sprites.iter().enumerate() {
            let id = i as u64 + 1;
            if spec.untracked || covered.contains(&id) {
                continue;
            }
            let exit = spec.exit.unwrap_or(script.num_frames).min(script.num_frames);
            let was = (spec.enter..exit).contains(&(t - 1));
            let is = (spec.enter..exit).contains(&t);
            let kind = match (was, is) {
                (true, true) => MappingType::OneToOne,
                (true, false) => MappingType::Disappear,
                (false, true) => MappingType::Appear,
                (false, false) => continue,
            };
            truth_log.push(MappingRecord { t, kind, objects: vec![id] });
        }
    }
    Ok(GeneratedScene { frames: frames?, program, truth_log, id_map })
}

// ---------------------------------------------------------------------------
// Tracking comparison

fn kind_bucket(k: MappingType) -> usize {
    match k {
        MappingType::OneToOne => 0,
        MappingType::OneToManyNoSplit => 1,
        MappingType::ManyToOneNoMerge => 2,
        MappingType::ManyToOneMerge => 3,
        MappingType::OneToManySplit => 4,
        MappingType::Disappear => 5,
        MappingType::Appear => 6,
        // Bucket 7 is reserved for anything outside the taxonomy.
    }
}

/// Parses the tracker's mapping-log lines back into records.
pub fn parse_tracker_log(lines: &[String]) -> Result<Vec<MappingRecord>> {
    let mut out = Vec::new();
    for line in lines {
        // Scalar fields stop at whitespace; bracketed fields run to `]`.
        let field = |key: &str| -> Result<&str> {
            let start = line
                .find(key)
                .ok_or_else(|| Error::parse(line.clone(), format!("missing {key}")))?
                + key.len();
            let rest = &line[start..];
            let end = if rest.starts_with('[') {
                rest.find(']').map(|i| i + 1).unwrap_or(rest.len())
            } else {
                rest.find(char::is_whitespace).unwrap_or(rest.len())
            };
            Ok(&rest[..end])
        };
        let t: usize = field("t=")?
            .parse()
            .map_err(|e| Error::parse(line.clone(), format!("bad frame: {e}")))?;
        let kind = match field("type=")? {
            "propagate" => {
                // Cardinality disambiguates propagate lines.
                let regions = field("regions=")?;
                if regions.matches(',').count() > 0 {
                    MappingType::OneToManyNoSplit
                } else {
                    MappingType::OneToOne
                }
            }
            "share" => MappingType::ManyToOneNoMerge,
            "merge" => MappingType::ManyToOneMerge,
            "split" => MappingType::OneToManySplit,
            "disappear" => MappingType::Disappear,
            "appear" => MappingType::Appear,
            other => return Err(Error::parse(line.clone(), format!("unknown type {other}"))),
        };
        // Appear lines name no prior object; the fresh regions stand in as
        // the participants so multiplicity comparison still works.
        let objs = if kind == MappingType::Appear { field("regions=")? } else { field("objects=")? };
        let objects: Vec<u64> = objs
            .trim_matches(['[', ']'])
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|e| Error::parse(line.clone(), format!("{e}"))))
            .collect::<Result<_>>()?;
        out.push(MappingRecord { t, kind, objects });
    }
    Ok(out)
}

/// Counts ground-truth mapping decisions the prediction missed, bucketed by
/// the true mapping type (8-tuple; bucket 7 collects out-of-taxonomy
/// predictions with no matching truth record).
pub fn compare_tracking(
    predicted: &[MappingRecord],
    truth: &[MappingRecord],
) -> Result<(usize, [usize; 8])> {
    let frames = |log: &[MappingRecord]| -> Option<(usize, usize)> {
        let min = log.iter().map(|r| r.t).min()?;
        let max = log.iter().map(|r| r.t).max()?;
        Some((min, max))
    };
    if let (Some(p), Some(g)) = (frames(predicted), frames(truth)) {
        if p.1 > g.1 {
            return Err(Error::LogMismatch(format!(
                "predicted covers up to t={}, truth up to t={}",
                p.1, g.1
            )));
        }
    }
    let mut buckets = [0usize; 8];
    let mut used = vec![false; predicted.len()];
    for rec in truth {
        // A truth record is matched by an unused prediction at the same
        // frame with the same type (participant ids are tracker-assigned
        // and compared by multiplicity only).
        let hit = predicted.iter().enumerate().find(|(i, p)| {
            !used[*i] && p.t == rec.t && p.kind == rec.kind && p.objects.len() == rec.objects.len()
        });
        match hit {
            Some((i, _)) => used[i] = true,
            None => buckets[kind_bucket(rec.kind)] += 1,
        }
    }
    Ok((buckets.iter().sum(), buckets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_script() -> SceneScript {
        SceneScript {
            width: 64,
            height: 48,
            num_frames: 5,
            sprites: vec![SpriteSpec {
                name: "square".into(),
                shape: Shape::Rect,
                color: [0.8, 0.2, 0.1],
                size: (12.0, 12.0),
                track: MotionTrack::Linear { from: (16.0, 24.0), to: (32.0, 24.0) },
                ..Default::default()
            }],
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = simple_script();
        let a = generate_scene(&s).unwrap();
        let b = generate_scene(&s).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
        assert_eq!(a.truth_log, b.truth_log);
    }

    #[test]
    fn single_sprite_log_is_one_to_one() {
        let scene = generate_scene(&simple_script()).unwrap();
        assert_eq!(scene.truth_log.len(), 4);
        assert!(scene
            .truth_log
            .iter()
            .all(|r| r.kind == MappingType::OneToOne && r.objects == vec![1]));
        assert_eq!(scene.frames.len(), 5);
        // The sprite actually moves: frames 0 and 4 differ.
        assert_ne!(scene.frames[0].data, scene.frames[4].data);
    }

    #[test]
    fn enter_exit_produce_appear_disappear() {
        let mut s = simple_script();
        s.sprites[0].enter = 1;
        s.sprites[0].exit = Some(4);
        s.sprites.push(SpriteSpec {
            name: "static".into(),
            shape: Shape::Disc,
            color: [0.1, 0.3, 0.8],
            size: (10.0, 10.0),
            track: MotionTrack::Static { x: 48.0, y: 12.0 },
            z: 1,
            ..Default::default()
        });
        let scene = generate_scene(&s).unwrap();
        let kinds: Vec<(usize, MappingType)> = scene
            .truth_log
            .iter()
            .filter(|r| r.objects == vec![1])
            .map(|r| (r.t, r.kind))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (1, MappingType::Appear),
                (2, MappingType::OneToOne),
                (3, MappingType::OneToOne),
                (4, MappingType::Disappear),
            ]
        );
    }

    #[test]
    fn scripted_merge_overrides_default() {
        let mut s = simple_script();
        s.sprites.push(SpriteSpec {
            name: "other".into(),
            shape: Shape::Rect,
            color: [0.2, 0.7, 0.2],
            size: (8.0, 8.0),
            track: MotionTrack::Static { x: 50.0, y: 30.0 },
            z: 1,
            ..Default::default()
        });
        s.events.push(ScriptEvent {
            t: 3,
            kind: "many-to-one-merge".into(),
            sprites: vec!["square".into(), "other".into()],
            covers: vec![],
        });
        let scene = generate_scene(&s).unwrap();
        let at3: Vec<&MappingRecord> = scene.truth_log.iter().filter(|r| r.t == 3).collect();
        assert_eq!(at3.len(), 1);
        assert_eq!(at3[0].kind, MappingType::ManyToOneMerge);
        assert_eq!(at3[0].objects, vec![1, 2]);
    }

    #[test]
    fn sprite_edges_are_antialiased() {
        let spec = SpriteSpec {
            name: "d".into(),
            shape: Shape::Disc,
            color: [1.0, 0.0, 0.0],
            size: (9.0, 9.0),
            ..Default::default()
        };
        let img = rasterize_sprite(&spec).unwrap();
        let alphas: Vec<f32> = img.data.iter().skip(3).step_by(4).copied().collect();
        assert!(alphas.iter().any(|&a| a == 1.0), "solid interior");
        assert!(
            alphas.iter().any(|&a| a > 0.0 && a < 1.0),
            "fractional-coverage boundary"
        );
    }

    #[test]
    fn polygon_shape_renders() {
        let spec = SpriteSpec {
            name: "tri".into(),
            shape: Shape::Polygon { points: vec![(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)] },
            color: [0.0, 0.5, 1.0],
            size: (12.0, 12.0),
            ..Default::default()
        };
        let img = rasterize_sprite(&spec).unwrap();
        // Apex area covered, top corners empty.
        assert!(img.get(7, 2, 3) > 0.0);
        assert_eq!(img.get(1, 1, 3), 0.0);
        assert_eq!(img.get(12, 1, 3), 0.0);
        assert!(img.get(7, 10, 3) > 0.0);
    }

    #[test]
    fn compare_identical_logs_is_zero() {
        let scene = generate_scene(&simple_script()).unwrap();
        let (total, buckets) = compare_tracking(&scene.truth_log, &scene.truth_log).unwrap();
        assert_eq!(total, 0);
        assert_eq!(buckets, [0; 8]);
    }

    #[test]
    fn compare_counts_mismatched_split() {
        let truth = vec![
            MappingRecord { t: 1, kind: MappingType::OneToOne, objects: vec![1] },
            MappingRecord { t: 2, kind: MappingType::OneToManySplit, objects: vec![1] },
        ];
        let mut predicted = truth.clone();
        predicted[1].kind = MappingType::OneToOne;
        let (total, buckets) = compare_tracking(&predicted, &truth).unwrap();
        assert_eq!(total, 1);
        assert_eq!(buckets[4], 1, "split bucket");
        assert!(buckets.iter().enumerate().all(|(i, &b)| i == 4 || b == 0));
    }

    #[test]
    fn tracker_log_lines_parse() {
        let lines = vec![
            "t=1 type=propagate objects=[3] regions=[1] score=0.004210".to_string(),
            "t=2 type=merge objects=[3, 4] regions=[2] score=0.010000".to_string(),
            "t=3 type=appear objects=[] regions=[5] score=-".to_string(),
        ];
        let recs = parse_tracker_log(&lines).unwrap();
        assert_eq!(recs[0], MappingRecord { t: 1, kind: MappingType::OneToOne, objects: vec![3] });
        assert_eq!(
            recs[1],
            MappingRecord { t: 2, kind: MappingType::ManyToOneMerge, objects: vec![3, 4] }
        );
        assert_eq!(recs[2], MappingRecord { t: 3, kind: MappingType::Appear, objects: vec![] });
    }

    #[test]
    fn end_to_end_tracking_on_generated_scene() {
        // Two well-separated sprites translating: the tracker should produce
        // a log matching the generated truth with zero errors.
        let script = SceneScript {
            width: 64,
            height: 64,
            num_frames: 3,
            sprites: vec![
                SpriteSpec {
                    name: "red".into(),
                    shape: Shape::Rect,
                    color: [0.85, 0.15, 0.1],
                    size: (12.0, 12.0),
                    track: MotionTrack::Linear { from: (14.0, 14.0), to: (22.0, 14.0) },
                    ..Default::default()
                },
                SpriteSpec {
                    name: "blue".into(),
                    shape: Shape::Rect,
                    color: [0.1, 0.2, 0.85],
                    size: (12.0, 12.0),
                    track: MotionTrack::Static { x: 44.0, y: 44.0 },
                    z: 1,
                    ..Default::default()
                },
            ],
            ..Default::default()
        };
        let scene = generate_scene(&script).unwrap();
        let mut cfg = crate::config::Config::default();
        cfg.segmentation.mode = crate::config::SegmentationMode::Components;
        cfg.dc.max_iters = 40;
        cfg.dc.pyramid_levels = 3;
        cfg.dc.tau_anneal_every = 0;
        cfg.dc.reg_weight = 1e-3;
        cfg.tracker.epsilon = 0.2;
        let res = crate::tracking::track_video(&scene.frames, &cfg).unwrap();
        let predicted = parse_tracker_log(&res.log).unwrap();
        let (total, _) = compare_tracking(&predicted, &scene.truth_log).unwrap();
        assert_eq!(total, 0, "log: {:?}", res.log);
    }
}
