//! Stage 4: the motion program artifact. Refactors per-frame motion into
//! canonical-to-frame transforms, writes/parses the SVG document plus its
//! lossless sidecar, renders programs, and measures reconstruction error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::DcConfig;
use crate::diffcomp::{composite_hard, dc_loss, dc_optimize, PlacementSet, SourceElement};
use crate::error::{Error, Result};
use crate::geom::{Affine, AffineParams};
use crate::imaging::{encode_png_bytes, lab_pixel_to_rgb, RasterImage};
use crate::segmentation::{BackgroundKind, BackgroundModel};
use crate::tracking::TrackedObject;

pub const PROGRAM_VERSION: &str = "motionvec-program/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    /// Canonical-to-frame transform (pixel-center anchors on both sides).
    pub params: AffineParams,
    pub z: i64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramObject {
    pub object_id: u64,
    /// RGBA canonical appearance.
    pub canonical: RasterImage,
    /// Sorted by frame; one entry per frame of the object's lifetime.
    pub keyframes: Vec<Keyframe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionProgram {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub fps: f64,
    pub background: BackgroundModel,
    pub objects: Vec<ProgramObject>,
}

impl MotionProgram {
    pub fn background_image(&self) -> RasterImage {
        match &self.background.kind {
            BackgroundKind::StaticImage(img) => img.clone(),
            BackgroundKind::SolidColor(lab) => {
                let rgb = lab_pixel_to_rgb(lab[0], lab[1], lab[2]);
                RasterImage::filled(
                    self.width,
                    self.height,
                    &[rgb[0] as f32, rgb[1] as f32, rgb[2] as f32],
                )
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        assert!(self.num_frames >= 1);
        for obj in &self.objects {
            for kf in &obj.keyframes {
                if kf.frame >= self.num_frames {
                    return Err(Error::FrameOutOfRange {
                        frame: kf.frame,
                        num_frames: self.num_frames,
                    });
                }
                if !kf.params.is_valid() {
                    return Err(Error::SingularTransform);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Motion refactoring

/// Composes a frame-to-frame transform chain into cumulative
/// canonical-to-frame transforms: identity at the capture frame, then each
/// delta applied on top, re-parameterized with ky = 0. All transforms are in
/// absolute frame coordinates (zero anchors).
pub fn refactor_motion(deltas: &[AffineParams]) -> Result<Vec<AffineParams>> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut acc = Affine::identity();
    out.push(AffineParams::identity());
    for d in deltas {
        acc = d.to_affine((0.0, 0.0), (0.0, 0.0)).compose(&acc);
        out.push(AffineParams::from_affine(&acc, (0.0, 0.0), (0.0, 0.0))?);
    }
    Ok(out)
}

/// Per-frame DC refinement of an object's stored poses: each frame is
/// re-optimized with the canonical image as the sole source against the
/// object's labeled pixels over the background; a refinement is kept only if
/// it lowers the loss. Returns (params, refined) per frame.
pub fn refine_motion(
    obj: &TrackedObject,
    frames: &[RasterImage],
    background: &RasterImage,
    cfg: &DcConfig,
) -> Result<Vec<(usize, AffineParams, bool)>> {
    let mut out = Vec::new();
    for (&t, p) in &obj.timeline {
        let frame = &frames[t];
        // Target: the object's labeled pixels over the clean background.
        let mut target = background.clone();
        for y in 0..frame.height {
            for x in 0..frame.width {
                if p.mask.get(x, y) {
                    for c in 0..3 {
                        target.set(x, y, c, frame.get(x, y, c));
                    }
                }
            }
        }
        let init = PlacementSet {
            canvas: (frame.width, frame.height),
            elements: vec![SourceElement {
                id: obj.object_id,
                image: obj.canonical.clone(),
                params: p.params,
                z: 0.0,
            }],
        };
        let prev = vec![p.params];
        // Acceptance requires both the soft loss and the hard-composite RMS
        // to improve; the soft sigmoid alone can favor slight shape warps
        // that worsen the actual render.
        let hard_rms = |params: AffineParams| -> Result<f64> {
            let ps = PlacementSet {
                canvas: (frame.width, frame.height),
                elements: vec![SourceElement {
                    id: obj.object_id,
                    image: obj.canonical.clone(),
                    params,
                    z: 0.0,
                }],
            };
            let img = composite_hard(&ps, background)?;
            let n = frame.width * frame.height;
            let mut sum = 0.0f64;
            for i in 0..n {
                let mut px = 0.0;
                for c in 0..3 {
                    let d = (img.data[i * 3 + c] - target.data[i * target.channels + c]) as f64;
                    px += d * d;
                }
                sum += px / 3.0;
            }
            Ok((sum / n as f64).sqrt())
        };
        let init_loss = dc_loss(&init, &target, background, &prev, cfg)?;
        let res = dc_optimize(&init, &target, background, cfg)?;
        let refined = res.placements.elements[0].params;
        if res.final_loss < init_loss && hard_rms(refined)? <= hard_rms(p.params)? {
            out.push((t, refined, true));
        } else {
            out.push((t, p.params, false));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rendering and error

fn anchor_of(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Hard composite of all objects visible at frame `t` over the background.
pub fn render_frame(p: &MotionProgram, t: usize) -> Result<RasterImage> {
    if t >= p.num_frames {
        return Err(Error::FrameOutOfRange { frame: t, num_frames: p.num_frames });
    }
    let mut elements = Vec::new();
    for obj in &p.objects {
        if let Some(kf) = obj.keyframes.iter().find(|k| k.frame == t) {
            if kf.visible {
                elements.push(SourceElement {
                    id: obj.object_id,
                    image: obj.canonical.clone(),
                    params: kf.params,
                    z: kf.z as f64,
                });
            }
        }
    }
    let ps = PlacementSet { canvas: (p.width, p.height), elements };
    composite_hard(&ps, &p.background_image())
}

/// Per-frame RMS RGB error (mean over channels, RMS over pixels) plus the
/// overall mean across frames.
pub fn reconstruction_error(
    p: &MotionProgram,
    frames: &[RasterImage],
) -> Result<(Vec<f64>, f64)> {
    if frames.len() != p.num_frames {
        return Err(Error::dims(
            format!("{} frames", p.num_frames),
            format!("{} frames", frames.len()),
        ));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        if frame.width != p.width || frame.height != p.height {
            return Err(Error::dims(
                format!("{}x{}", p.width, p.height),
                format!("{}x{}", frame.width, frame.height),
            ));
        }
        let rendered = render_frame(p, t)?;
        let mut sum = 0.0f64;
        for i in 0..p.width * p.height {
            let mut px = 0.0;
            for c in 0..3 {
                let d = (rendered.data[i * 3 + c]
                    - frame.data[i * frame.channels + c]) as f64;
                px += d * d;
            }
            sum += px / 3.0;
        }
        per_frame.push((sum / (p.width * p.height) as f64).sqrt());
    }
    let overall = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((per_frame, overall))
}

// ---------------------------------------------------------------------------
// Sidecar (authoritative serialization)

#[derive(Debug, Serialize, Deserialize)]
struct SidecarImage {
    width: usize,
    height: usize,
    /// Base64 PNG (RGBA8).
    png: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarKeyframe {
    frame: usize,
    params: AffineParams,
    z: i64,
    #[serde(default = "default_true")]
    visible: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarObject {
    object_id: u64,
    canonical: SidecarImage,
    keyframes: Vec<SidecarKeyframe>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum SidecarBackground {
    SolidColor { color: [f64; 3], tolerance: f64 },
    StaticImage { image: SidecarImage, tolerance: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarDoc {
    version: String,
    width: usize,
    height: usize,
    num_frames: usize,
    fps: f64,
    background: SidecarBackground,
    objects: Vec<SidecarObject>,
}

fn encode_image(img: &RasterImage) -> SidecarImage {
    SidecarImage {
        width: img.width,
        height: img.height,
        png: base64::engine::general_purpose::STANDARD.encode(encode_png_bytes(img)),
    }
}

fn decode_image(ctx: &str, s: &SidecarImage) -> Result<RasterImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&s.png)
        .map_err(|e| Error::parse(ctx, format!("bad base64 image: {e}")))?;
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader =
        decoder.read_info().map_err(|e| Error::parse(ctx, format!("bad embedded png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info =
        reader.next_frame(&mut buf).map_err(|e| Error::parse(ctx, format!("bad png data: {e}")))?;
    let channels = match info.color_type {
        png::ColorType::Rgba => 4,
        png::ColorType::Rgb => 3,
        other => return Err(Error::parse(ctx, format!("unsupported color type {other:?}"))),
    };
    if (info.width as usize, info.height as usize) != (s.width, s.height) {
        return Err(Error::parse(ctx, "embedded image dimensions disagree with header"));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(RasterImage::from_data(s.width, s.height, channels, data))
}

fn to_sidecar(p: &MotionProgram) -> SidecarDoc {
    SidecarDoc {
        version: PROGRAM_VERSION.to_string(),
        width: p.width,
        height: p.height,
        num_frames: p.num_frames,
        fps: p.fps,
        background: match &p.background.kind {
            BackgroundKind::SolidColor(c) => SidecarBackground::SolidColor {
                color: *c,
                tolerance: p.background.tolerance,
            },
            BackgroundKind::StaticImage(img) => SidecarBackground::StaticImage {
                image: encode_image(img),
                tolerance: p.background.tolerance,
            },
        },
        objects: p
            .objects
            .iter()
            .map(|o| SidecarObject {
                object_id: o.object_id,
                canonical: encode_image(&o.canonical),
                keyframes: o
                    .keyframes
                    .iter()
                    .map(|k| SidecarKeyframe {
                        frame: k.frame,
                        params: k.params,
                        z: k.z,
                        visible: k.visible,
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn from_sidecar(ctx: &str, doc: SidecarDoc) -> Result<MotionProgram> {
    if doc.version != PROGRAM_VERSION {
        return Err(Error::VersionMismatch {
            found: doc.version,
            expected: PROGRAM_VERSION.to_string(),
        });
    }
    let background = match doc.background {
        SidecarBackground::SolidColor { color, tolerance } => {
            BackgroundModel { kind: BackgroundKind::SolidColor(color), tolerance }
        }
        SidecarBackground::StaticImage { image, tolerance } => BackgroundModel {
            kind: BackgroundKind::StaticImage(decode_image(ctx, &image)?),
            tolerance,
        },
    };
    let mut objects = Vec::with_capacity(doc.objects.len());
    for o in doc.objects {
        let canonical = decode_image(ctx, &o.canonical)?;
        let mut keyframes: Vec<Keyframe> = o
            .keyframes
            .into_iter()
            .map(|k| Keyframe { frame: k.frame, params: k.params, z: k.z, visible: k.visible })
            .collect();
        keyframes.sort_by_key(|k| k.frame);
        objects.push(ProgramObject { object_id: o.object_id, canonical, keyframes });
    }
    let p = MotionProgram {
        width: doc.width,
        height: doc.height,
        num_frames: doc.num_frames,
        fps: doc.fps,
        background,
        objects,
    };
    p.validate()?;
    Ok(p)
}

fn sidecar_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    }
}

// ---------------------------------------------------------------------------
// SVG writer

fn fmt_num(v: f64) -> String {
    // Shortest representation that round-trips is irrelevant for SVG (the
    // sidecar is authoritative); six decimals keeps the file readable.
    format!("{v:.6}")
}

fn key_times(frames: &[usize], num_frames: usize) -> String {
    let mut s = String::new();
    for (i, &f) in frames.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}", fmt_num(f as f64 / num_frames as f64));
    }
    s
}

fn animate_transform(
    ttype: &str,
    values: &str,
    key_times: &str,
    dur_s: f64,
) -> String {
    format!(
        "      <animateTransform attributeName=\"transform\" type=\"{ttype}\" \
         additive=\"sum\" calcMode=\"discrete\" dur=\"{}s\" repeatCount=\"indefinite\" \
         keyTimes=\"{key_times}\" values=\"{values}\"/>\n",
        fmt_num(dur_s)
    )
}

fn svg_text(p: &MotionProgram) -> String {
    let (cw, ch) = (p.width, p.height);
    let canvas_anchor = anchor_of(cw, ch);
    let dur = p.num_frames as f64 / p.fps;
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" \
         width=\"{cw}\" height=\"{ch}\" viewBox=\"0 0 {cw} {ch}\">\n"
    );
    match &p.background.kind {
        BackgroundKind::SolidColor(lab) => {
            let rgb = lab_pixel_to_rgb(lab[0], lab[1], lab[2]);
            let hex = |v: f64| ((v * 255.0).round() as u8).max(0);
            let _ = write!(
                s,
                "  <rect width=\"{cw}\" height=\"{ch}\" fill=\"#{:02x}{:02x}{:02x}\"/>\n",
                hex(rgb[0]),
                hex(rgb[1]),
                hex(rgb[2])
            );
        }
        BackgroundKind::StaticImage(img) => {
            let b64 = base64::engine::general_purpose::STANDARD.encode(encode_png_bytes(img));
            let _ = write!(
                s,
                "  <image width=\"{cw}\" height=\"{ch}\" \
                 xlink:href=\"data:image/png;base64,{b64}\"/>\n"
            );
        }
    }
    // Depth order approximated by the objects' first-frame z; per-frame
    // changes live in the sidecar (documented limitation).
    let mut order: Vec<usize> = (0..p.objects.len()).collect();
    order.sort_by_key(|&i| {
        p.objects[i]
            .keyframes
            .first()
            .map(|k| (k.z, p.objects[i].object_id))
            .unwrap_or((0, p.objects[i].object_id))
    });
    for &oi in &order {
        let obj = &p.objects[oi];
        if obj.keyframes.is_empty() {
            continue;
        }
        let frames: Vec<usize> = obj.keyframes.iter().map(|k| k.frame).collect();
        let kt = key_times(&frames, p.num_frames);
        let mut tr = String::new();
        let mut rot = String::new();
        let mut skx = String::new();
        let mut sky = String::new();
        let mut sc = String::new();
        let mut vis = String::new();
        for (i, kf) in obj.keyframes.iter().enumerate() {
            let sep = if i > 0 { ";" } else { "" };
            let q = &kf.params;
            let _ = write!(
                tr,
                "{sep}{} {}",
                fmt_num(canvas_anchor.0 + q.tx),
                fmt_num(canvas_anchor.1 + q.ty)
            );
            let _ = write!(rot, "{sep}{}", fmt_num(q.theta.to_degrees()));
            let _ = write!(skx, "{sep}{}", fmt_num(q.kx.atan().to_degrees()));
            let _ = write!(sky, "{sep}{}", fmt_num(q.ky.atan().to_degrees()));
            let _ = write!(sc, "{sep}{} {}", fmt_num(q.sx), fmt_num(q.sy));
            let _ = write!(vis, "{sep}{}", if kf.visible { "visible" } else { "hidden" });
        }
        let b64 = base64::engine::general_purpose::STANDARD.encode(encode_png_bytes(&obj.canonical));
        let src_anchor = anchor_of(obj.canonical.width, obj.canonical.height);
        let _ = write!(s, "  <g id=\"object-{}\" visibility=\"hidden\">\n", obj.object_id);
        s.push_str(&animate_transform("translate", &tr, &kt, dur));
        s.push_str(&animate_transform("rotate", &rot, &kt, dur));
        s.push_str(&animate_transform("skewX", &skx, &kt, dur));
        s.push_str(&animate_transform("skewY", &sky, &kt, dur));
        s.push_str(&animate_transform("scale", &sc, &kt, dur));
        let _ = write!(
            s,
            "      <animate attributeName=\"visibility\" calcMode=\"discrete\" dur=\"{}s\" \
             repeatCount=\"indefinite\" keyTimes=\"{kt}\" values=\"{vis}\"/>\n",
            fmt_num(dur)
        );
        let _ = write!(
            s,
            "    <image width=\"{}\" height=\"{}\" transform=\"translate({} {})\" \
             xlink:href=\"data:image/png;base64,{b64}\"/>\n",
            obj.canonical.width,
            obj.canonical.height,
            fmt_num(-src_anchor.0),
            fmt_num(-src_anchor.1)
        );
        s.push_str("  </g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the display SVG at `path` and the authoritative sidecar next to it
/// (same stem, `.json` extension).
pub fn write_program(p: &MotionProgram, path: &Path) -> Result<()> {
    p.validate()?;
    let svg = svg_text(p);
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let doc = to_sidecar(p);
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::parse(side.display().to_string(), e.to_string()))?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(side.clone(), e))?;
    Ok(())
}

/// Reads a program back from its sidecar (`path` may point at the SVG or the
/// sidecar itself).
pub fn parse_program(path: &Path) -> Result<MotionProgram> {
    let side = sidecar_path(path);
    let ctx = side.display().to_string();
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(side.clone(), e))?;
    let doc: SidecarDoc = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&ctx, format!("line {}: {e}", e.line())))?;
    from_sidecar(&ctx, doc)
}

// ---------------------------------------------------------------------------
// Program assembly from tracking output

/// Builds a program from tracked objects: one keyframe per timeline entry,
/// canonical-to-frame params as stored.
pub fn program_from_objects(
    objects: &[TrackedObject],
    background: BackgroundModel,
    width: usize,
    height: usize,
    num_frames: usize,
    fps: f64,
) -> Result<MotionProgram> {
    let mut out = Vec::new();
    for obj in objects {
        if obj.timeline.is_empty() {
            continue;
        }
        let keyframes = obj
            .timeline
            .iter()
            .map(|(&t, p)| Keyframe { frame: t, params: p.params, z: p.z, visible: true })
            .collect();
        out.push(ProgramObject {
            object_id: obj.object_id,
            canonical: obj.canonical.clone(),
            keyframes,
        });
    }
    let p = MotionProgram { width, height, num_frames, fps, background, objects: out };
    p.validate()?;
    Ok(p)
}
