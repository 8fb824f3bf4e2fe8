//! Command-line surface for the motion-vectorization pipeline.
//!
//! Exit codes: 0 success, 2 usage, 3 input parse failure, 4 pipeline failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use motionvec::config::Config;
use motionvec::error::Error;
use motionvec::imaging::{load_frames, save_png, RasterImage};
use motionvec::pipeline::vectorize;
use motionvec::program::{parse_program, reconstruction_error, render_frame, write_program};
use motionvec::synth::{generate_scene, kind_name, SceneScript};
use motionvec::xform::{dominant_color, run_script};

#[derive(Parser)]
#[command(name = "motionvec", version, about = "Convert frame sequences into SVG motion programs and transform them")]
struct Cli {
    /// Print progress details to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline: frames directory -> SVG program + JSON sidecar.
    Vectorize {
        /// Directory of numbered PNG frames.
        frames_dir: PathBuf,
        /// Output program path (.svg; sidecar written alongside as .json).
        #[arg(short, long)]
        out: PathBuf,
        /// TOML config file overriding pipeline tunables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        fps: f64,
        /// Directory to dump per-frame object-label PNGs for inspection.
        #[arg(long)]
        labels_dir: Option<PathBuf>,
        /// File to write the mapping decision log to (defaults to stdout).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render every frame of a program to PNGs.
    Render {
        program: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
    },
    /// Compare a program's render against reference frames.
    Diff {
        program: PathBuf,
        frames_dir: PathBuf,
        /// Directory for per-frame absolute-error heatmap PNGs.
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
    },
    /// Apply an ops-file script to a program.
    Transform {
        program: PathBuf,
        ops: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic scene: frames, ground-truth program, truth log.
    Synth {
        script: PathBuf,
        #[arg(short, long)]
        out_dir: PathBuf,
    },
    /// Print the object table of a program.
    Inspect { program: PathBuf },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_frames(dir: &Path, frames: &[RasterImage]) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(format!("frame_{i:04}.png")), f)?;
    }
    Ok(())
}

fn heatmap(rendered: &RasterImage, reference: &RasterImage) -> RasterImage {
    let mut out = RasterImage::new(rendered.width, rendered.height, 1);
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            let mut d = 0.0f32;
            for c in 0..3 {
                d += (rendered.get(x, y, c) - reference.get(x, y, c)).abs();
            }
            out.set(x, y, 0, (d / 3.0).min(1.0));
        }
    }
    out
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Vectorize { frames_dir, out, config, fps, labels_dir, log } => {
            let mut cfg = load_config(config)?;
            if let Some(dir) = labels_dir {
                cfg.tracker.debug_labels_dir = Some(dir.clone());
            }
            let frames = load_frames(frames_dir)?;
            if cli.verbose {
                eprintln!("loaded {} frames from {}", frames.len(), frames_dir.display());
            }
            let res = vectorize(&frames, &cfg, *fps)?;
            write_program(&res.program, out)?;
            let log_text = res.track.log.join("\n") + "\n";
            match log {
                Some(p) => std::fs::write(p, log_text).map_err(|e| Error::io(p, e))?,
                None => print!("{log_text}"),
            }
            if cli.verbose {
                eprintln!("wrote {} ({} objects)", out.display(), res.program.objects.len());
            }
        }
        Cmd::Render { program, out_dir } => {
            let p = parse_program(program)?;
            let frames: Result<Vec<RasterImage>, Error> =
                (0..p.num_frames).map(|t| render_frame(&p, t)).collect();
            write_frames(out_dir, &frames?)?;
        }
        Cmd::Diff { program, frames_dir, heatmap_dir } => {
            let p = parse_program(program)?;
            let frames = load_frames(frames_dir)?;
            let (per_frame, mean) = reconstruction_error(&p, &frames)?;
            for (t, e) in per_frame.iter().enumerate() {
                println!("frame {t:04}: {e:.6}");
            }
            println!("mean: {mean:.6}");
            if let Some(dir) = heatmap_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                for t in 0..p.num_frames {
                    let r = render_frame(&p, t)?;
                    save_png(&dir.join(format!("heatmap_{t:04}.png")), &heatmap(&r, &frames[t]))?;
                }
            }
        }
        Cmd::Transform { program, ops, out, config } => {
            let cfg = load_config(config)?;
            let mut p = parse_program(program)?;
            let text = std::fs::read_to_string(ops).map_err(|e| Error::io(ops, e))?;
            let base = ops.parent().unwrap_or(Path::new("."));
            run_script(&mut p, &text, base, &cfg.xform)?;
            write_program(&p, out)?;
        }
        Cmd::Synth { script, out_dir } => {
            let s = SceneScript::load(script)?;
            let scene = generate_scene(&s)?;
            write_frames(&out_dir.join("frames"), &scene.frames)?;
            write_program(&scene.program, &out_dir.join("truth.svg"))?;
            let mut log = String::new();
            for r in &scene.truth_log {
                log.push_str(&format!(
                    "t={} kind={} objects={:?}\n",
                    r.t,
                    kind_name(r.kind),
                    r.objects
                ));
            }
            let log_path = out_dir.join("truth_log.txt");
            std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        }
        Cmd::Inspect { program } => {
            let p = parse_program(program)?;
            println!(
                "{}x{} px, {} frames @ {} fps, {} objects",
                p.width, p.height, p.num_frames, p.fps, p.objects.len()
            );
            println!("{:>6} {:>11} {:>9} {:>24} {:>3}", "id", "frames", "size", "color", "z");
            for o in &p.objects {
                let first = o.keyframes.first();
                let last = o.keyframes.last();
                let (f0, f1, z) = match (first, last) {
                    (Some(a), Some(b)) => (a.frame as i64, b.frame as i64, a.z),
                    _ => (-1, -1, 0),
                };
                let c = dominant_color(&o.canonical)?;
                println!(
                    "{:>6} {:>5}..{:>4} {:>4}x{:<4} ({:.2}, {:.2}, {:.2}) {:>7}",
                    o.object_id, f0, f1, o.canonical.width, o.canonical.height, c[0], c[1], c[2], z
                );
            }
        }
    }
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::ParseError { .. }
        | Error::VersionMismatch { .. }
        | Error::ScriptError(_)
        | Error::Config(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    motionvec::parallel::init_thread_pool_from_env();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
