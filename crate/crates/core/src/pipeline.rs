//! End-to-end vectorization: frames in, motion program out.

use crate::config::Config;
use crate::error::Result;
use crate::imaging::{lab_pixel_to_rgb, RasterImage};
use crate::program::{program_from_objects, refine_motion, MotionProgram};
use crate::segmentation::{BackgroundKind, BackgroundModel};
use crate::tracking::{track_video, TrackResult};

pub struct VectorizeResult {
    pub program: MotionProgram,
    pub track: TrackResult,
}

fn background_image(bg: &BackgroundModel, width: usize, height: usize) -> RasterImage {
    match &bg.kind {
        BackgroundKind::StaticImage(img) => img.clone(),
        BackgroundKind::SolidColor(lab) => {
            let rgb = lab_pixel_to_rgb(lab[0], lab[1], lab[2]);
            RasterImage::filled(width, height, &[rgb[0] as f32, rgb[1] as f32, rgb[2] as f32])
        }
    }
}

/// Full pipeline: segmentation + tracking, optional per-frame transform
/// refinement, then program assembly.
pub fn vectorize(frames: &[RasterImage], cfg: &Config, fps: f64) -> Result<VectorizeResult> {
    let track = track_video(frames, cfg)?;
    let (w, h) = (frames[0].width, frames[0].height);
    let mut objects = track.objects.clone();
    if cfg.tracker.refine {
        let bg = background_image(&track.background, w, h);
        for obj in objects.iter_mut() {
            let refined = refine_motion(obj, frames, &bg, &cfg.dc)?;
            for (t, params, accepted) in refined {
                if accepted {
                    obj.timeline.get_mut(&t).unwrap().params = params;
                }
            }
        }
    }
    let program =
        program_from_objects(&objects, track.background.clone(), w, h, frames.len(), fps)?;
    Ok(VectorizeResult { program, track })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::reconstruction_error;
    use crate::synth::{generate_scene, MotionTrack, SceneScript, Shape, SpriteSpec};

    fn quick_config() -> Config {
        let mut cfg = Config::default();
        cfg.segmentation.mode = crate::config::SegmentationMode::Components;
        cfg.dc.max_iters = 40;
        cfg.dc.pyramid_levels = 3;
        cfg.dc.tau_anneal_every = 0;
        cfg.dc.reg_weight = 1e-3;
        cfg.tracker.epsilon = 0.2;
        cfg
    }

    fn scene() -> SceneScript {
        SceneScript {
            width: 64,
            height: 64,
            num_frames: 3,
            sprites: vec![SpriteSpec {
                name: "square".into(),
                shape: Shape::Rect,
                color: [0.85, 0.15, 0.1],
                size: (12.0, 12.0),
                track: MotionTrack::Linear { from: (16.0, 24.0), to: (28.0, 24.0) },
                ..Default::default()
            }],
            ..Default::default()
        }
    }

    #[test]
    fn vectorize_reconstructs_synth_scene() {
        let gen = generate_scene(&scene()).unwrap();
        let res = vectorize(&gen.frames, &quick_config(), 10.0).unwrap();
        res.program.validate().unwrap();
        assert_eq!(res.program.objects.len(), 1);
        let (_, mean) = reconstruction_error(&res.program, &gen.frames).unwrap();
        assert!(mean <= 0.01, "mean reconstruction error {mean}");
    }

    #[test]
    fn vectorize_is_deterministic() {
        let gen = generate_scene(&scene()).unwrap();
        let a = vectorize(&gen.frames, &quick_config(), 10.0).unwrap();
        let b = vectorize(&gen.frames, &quick_config(), 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.svg");
        let pb = dir.path().join("b.svg");
        crate::program::write_program(&a.program, &pa).unwrap();
        crate::program::write_program(&b.program, &pb).unwrap();
        assert_eq!(
            std::fs::read(pa.with_extension("json")).unwrap(),
            std::fs::read(pb.with_extension("json")).unwrap()
        );
    }
}
