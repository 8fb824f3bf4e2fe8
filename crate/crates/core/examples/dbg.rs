//! Scratch harness: runs the pipeline on scene fixtures and reports tracking
//! mismatches and reconstruction error per scene.

use std::path::Path;

use motionvec::config::Config;
use motionvec::pipeline::vectorize;
use motionvec::program::reconstruction_error;
use motionvec::synth::{compare_tracking, generate_scene, parse_tracker_log, SceneScript};

fn main() {
    let cfg = Config::load(Path::new("/root/crate/fixtures/config_fast.toml")).unwrap();
    let scenes: Vec<String> = std::env::args().skip(1).collect();
    let mut grand_total = 0usize;
    for name in &scenes {
        let path = format!("/root/crate/fixtures/scenes/{name}.toml");
        let script = SceneScript::load(Path::new(&path)).unwrap();
        let scene = generate_scene(&script).unwrap();
        let start = std::time::Instant::now();
        let res = vectorize(&scene.frames, &cfg, script.fps).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let pred = parse_tracker_log(&res.track.log).unwrap();
        let cmp = compare_tracking(&pred, &scene.truth_log);
        let (recon_pf, recon) = reconstruction_error(&res.program, &scene.frames).unwrap();
        let worst = recon_pf.iter().cloned().fold(0.0f64, f64::max);
        if scenes.len() == 1 {
            for (t, e) in recon_pf.iter().enumerate() {
                println!("  frame {t}: recon {e:.4}");
            }
            for obj in &res.track.objects {
                for (t, p) in &obj.timeline {
                    let q = p.params;
                    println!(
                        "  obj {} t={t}: tx={:.3} ty={:.3} th={:.4} sx={:.4} sy={:.4} kx={:.4}",
                        obj.object_id, q.tx, q.ty, q.theta, q.sx, q.sy, q.kx
                    );
                }
            }
        }
        match cmp {
            Ok((total, buckets)) => {
                grand_total += total;
                println!(
                    "{name}: errors={total} buckets={buckets:?} recon_mean={recon:.4} recon_worst={worst:.4} time={secs:.1}s"
                );
                if total > 0 {
                    for l in &res.track.log {
                        println!("    {l}");
                    }
                }
            }
            Err(e) => {
                grand_total += 99;
                println!("{name}: LOG MISMATCH {e} (recon {recon:.4})");
                for l in &res.track.log {
                    println!("    {l}");
                }
            }
        }
    }
    println!("TOTAL errors={grand_total}");
}
