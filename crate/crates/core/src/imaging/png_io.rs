//! PNG frame ingestion and emission. Frames are 8-bit sRGB decoded to
//! [0,1]; label images are 16-bit grayscale (pixel value = region id,
//! 0 = background).

use std::path::{Path, PathBuf};

use super::RasterImage;
use crate::error::{Error, Result};

pub fn load_png(path: &Path) -> Result<RasterImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Png {
                path: path.into(),
                message: format!("unsupported color type {other:?}"),
            })
        }
    };
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h * channels].iter().map(|&v| v as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..w * h * channels * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        depth => {
            return Err(Error::Png {
                path: path.into(),
                message: format!("unsupported bit depth {depth:?}"),
            })
        }
    };
    // Normalize 2-channel gray+alpha to RGBA for a uniform in-memory model.
    if channels == 2 {
        let mut rgba = Vec::with_capacity(w * h * 4);
        for p in data.chunks_exact(2) {
            rgba.extend_from_slice(&[p[0], p[0], p[0], p[1]]);
        }
        return Ok(RasterImage::from_data(w, h, 4, rgba));
    }
    Ok(RasterImage::from_data(w, h, channels, data))
}

pub fn save_png(path: &Path, img: &RasterImage) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => {
            return Err(Error::Png { path: path.into(), message: format!("{n} channels") });
        }
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.width as u32,
        img.height as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })
}

/// Writes PNG bytes (8-bit) for an image without touching the filesystem.
pub fn encode_png_bytes(img: &RasterImage) -> Vec<u8> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => panic!("cannot encode {n}-channel image"),
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header");
        let bytes: Vec<u8> =
            img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).expect("png data");
    }
    out
}

/// 16-bit grayscale label image, pixel value = region/object id.
pub fn load_label_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Png {
            path: path.into(),
            message: "label images must be 16-bit grayscale".into(),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let labels =
        buf[..w * h * 2].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, labels))
}

pub fn save_label_png(path: &Path, width: usize, height: usize, labels: &[u16]) -> Result<()> {
    assert_eq!(labels.len(), width * height);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder =
        png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })?;
    let bytes: Vec<u8> = labels.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png { path: path.into(), message: e.to_string() })
}

/// Lists `frame_%05d.png` files in ascending index order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".png")) {
            if let Ok(idx) = stem.parse::<usize>() {
                frames.push((idx, entry.path()));
            }
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Loads all frames from a directory of `frame_%05d.png` files.
pub fn load_frames(dir: &Path) -> Result<Vec<RasterImage>> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frame_*.png files"),
        ));
    }
    files.iter().map(|p| load_png(p)).collect()
}
