//! Stage 1: background modeling and per-frame region extraction.
//!
//! Frames are split against a background model (dominant-color k-means or a
//! user-supplied static image), and the foreground is carved into regions by
//! trapped-ball filling bounded by edge pixels, or by plain connected
//! components for textured inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{SegmentationConfig, SegmentationMode};
use crate::error::{Error, Result};
use crate::imaging::{dilate, erode, morphological_open, rgb_pixel_to_lab, BinaryMask, RasterImage};
use crate::parallel;

/// One foreground region of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub frame_index: usize,
    /// Unique within the frame; ids are assigned 1.. in descending-area order.
    pub region_id: u32,
    pub mask: BinaryMask,
    /// Tight bounds `(x0, y0, x1, y1)`, exclusive max.
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
    pub area: usize,
}

impl Region {
    fn from_mask(frame_index: usize, region_id: u32, mask: BinaryMask) -> Self {
        let bbox = mask.bbox().expect("region mask is nonempty");
        let centroid = mask.centroid().expect("region mask is nonempty");
        let area = mask.area();
        Self { frame_index, region_id, mask, bbox, centroid, area }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackgroundKind {
    /// Rescaled-Lab triple.
    SolidColor([f64; 3]),
    StaticImage(RasterImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    pub kind: BackgroundKind,
    /// Rescaled-Lab Euclidean distance below which a pixel is background.
    pub tolerance: f64,
}

impl BackgroundModel {
    pub fn from_image(image: RasterImage, tolerance: f64) -> Self {
        Self { kind: BackgroundKind::StaticImage(image), tolerance }
    }
}

// ---------------------------------------------------------------------------
// Background estimation

const MAX_BG_SAMPLES: usize = 20_000;

/// Dominant color over the sampled frames via k-means in rescaled Lab.
pub fn estimate_background(frames: &[&RasterImage], cfg: &SegmentationConfig) -> BackgroundModel {
    assert!(!frames.is_empty());
    let total_px: usize = frames.iter().map(|f| f.width * f.height).sum();
    let stride = total_px.div_ceil(MAX_BG_SAMPLES).max(1);
    let mut samples: Vec<[f64; 3]> = Vec::new();
    let mut i = 0usize;
    for f in frames {
        for p in 0..f.width * f.height {
            if i % stride == 0 {
                let px = &f.data[p * f.channels..p * f.channels + 3];
                samples.push(rgb_pixel_to_lab(px[0] as f64, px[1] as f64, px[2] as f64));
            }
            i += 1;
        }
    }
    let k = cfg.background_clusters.max(1).min(samples.len());
    let (centers, assign) = kmeans(&samples, k);
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    let best = (0..k).max_by_key(|&c| counts[c]).expect("k >= 1");
    BackgroundModel {
        kind: BackgroundKind::SolidColor(centers[best]),
        tolerance: cfg.background_tolerance,
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Lloyd's algorithm with k-means++ seeding from a fixed RNG seed.
pub(crate) fn kmeans(samples: &[[f64; 3]], k: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB6);
    let mut centers: Vec<[f64; 3]> = vec![samples[rng.gen_range(0..samples.len())]];
    let mut d2: Vec<f64> = samples.iter().map(|s| dist2(s, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            samples[rng.gen_range(0..samples.len())]
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                t -= d;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
            samples[pick]
        };
        centers.push(next);
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(dist2(s, &next));
        }
    }
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..25 {
        let mut changed = false;
        for (i, s) in samples.iter().enumerate() {
            let best = (0..centers.len())
                .min_by(|&a, &b| dist2(s, &centers[a]).partial_cmp(&dist2(s, &centers[b])).unwrap())
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, s) in samples.iter().enumerate() {
            for c in 0..3 {
                sums[assign[i]][c] += s[c];
            }
            counts[assign[i]] += 1;
        }
        for c in 0..centers.len() {
            if counts[c] > 0 {
                centers[c] = [
                    sums[c][0] / counts[c] as f64,
                    sums[c][1] / counts[c] as f64,
                    sums[c][2] / counts[c] as f64,
                ];
            }
        }
        if !changed {
            break;
        }
    }
    (centers, assign)
}

// ---------------------------------------------------------------------------
// Foreground extraction

/// Pixels whose rescaled-Lab distance to the background exceeds the model
/// tolerance, cleaned with a 1-px morphological open.
pub fn foreground_mask(frame: &RasterImage, bg: &BackgroundModel) -> Result<BinaryMask> {
    if let BackgroundKind::StaticImage(img) = &bg.kind {
        if !frame.same_dims(img) {
            return Err(Error::dims(
                format!("{}x{}", img.width, img.height),
                format!("{}x{}", frame.width, frame.height),
            ));
        }
    }
    let (w, h) = (frame.width, frame.height);
    let rows: Vec<Vec<bool>> = parallel::map_indexed(h, |y| {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let p = frame.pixel(x, y);
            let lab = rgb_pixel_to_lab(p[0] as f64, p[1] as f64, p[2] as f64);
            let ref_lab = match &bg.kind {
                BackgroundKind::SolidColor(c) => *c,
                BackgroundKind::StaticImage(img) => {
                    let q = img.pixel(x, y);
                    rgb_pixel_to_lab(q[0] as f64, q[1] as f64, q[2] as f64)
                }
            };
            row.push(dist2(&lab, &ref_lab).sqrt() > bg.tolerance);
        }
        row
    });
    let mut mask = BinaryMask::new(w, h);
    for (y, row) in rows.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            mask.set(x, y, v);
        }
    }
    Ok(morphological_open(&mask, 1))
}

// ---------------------------------------------------------------------------
// Region extraction

/// Splits the foreground into regions. Trapped-ball mode fills the
/// edge-bounded foreground with shrinking ball radii so regions do not leak
/// across small edge gaps; components mode ignores edges entirely.
pub fn extract_regions(
    frame: &RasterImage,
    fg: &BinaryMask,
    edges: &BinaryMask,
    cfg: &SegmentationConfig,
    frame_index: usize,
) -> Vec<Region> {
    assert!(fg.width == frame.width && fg.height == frame.height);
    assert!(fg.same_dims(edges));
    if fg.is_empty() {
        return Vec::new();
    }
    let masks = match cfg.mode {
        SegmentationMode::Components => component_masks(fg),
        SegmentationMode::TrappedBall => trapped_ball_masks(frame, fg, edges, cfg),
    };
    finalize_regions(masks, cfg.min_region_area, frame_index)
}

fn component_masks(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (labels, count) = mask.connected_components(false);
    let mut out = vec![BinaryMask::new(mask.width, mask.height); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            out[l as usize - 1].bits[i] = true;
        }
    }
    out
}

fn trapped_ball_masks(
    frame: &RasterImage,
    fg: &BinaryMask,
    edges: &BinaryMask,
    cfg: &SegmentationConfig,
) -> Vec<BinaryMask> {
    let (w, h) = (fg.width, fg.height);
    // Edge pixels outside the foreground carry no information.
    let mut work = fg.clone();
    for (b, e) in work.bits.iter_mut().zip(&edges.bits) {
        *b &= !e;
    }

    let mut labels: Vec<u32> = vec![0; w * h];
    let mut next_label = 1u32;
    for r in (1..=cfg.ball_radius_max.max(1)).rev() {
        let mut remaining = work.clone();
        for (b, &l) in remaining.bits.iter_mut().zip(&labels) {
            *b &= l == 0;
        }
        if remaining.is_empty() {
            continue;
        }
        // A ball of radius r fits wherever the erosion survives; each seed
        // component grows back by r but only into still-unlabeled pixels.
        let seeds = erode(&remaining, r);
        for comp in component_masks(&seeds) {
            let grown = dilate(&comp, r);
            let mut any = false;
            for i in 0..w * h {
                if grown.bits[i] && remaining.bits[i] && labels[i] == 0 {
                    labels[i] = next_label;
                    any = true;
                }
            }
            if any {
                next_label += 1;
            }
        }
    }

    // Structures thinner than the smallest ball never survive erosion; keep
    // them as their own components so edge-free inputs reduce exactly to
    // connected-components labeling.
    let mut residual = work.clone();
    for (b, &l) in residual.bits.iter_mut().zip(&labels) {
        *b &= l == 0;
    }
    for comp in component_masks(&residual) {
        let touches = comp.bits.iter().enumerate().any(|(i, &v)| {
            v && neighbors4(i, w, h).into_iter().flatten().any(|j| labels[j] != 0)
        });
        if !touches {
            for (i, &v) in comp.bits.iter().enumerate() {
                if v {
                    labels[i] = next_label;
                }
            }
            next_label += 1;
        }
    }

    // Remaining foreground pixels (edge pixels and ball-shadow slivers) join
    // the touching region with the closest mean color, front advancing one
    // ring per pass.
    let lab = lab_image(frame);
    loop {
        let means = region_means(&lab, &labels, next_label);
        let mut updates: Vec<(usize, u32)> = Vec::new();
        for i in 0..w * h {
            if !fg.bits[i] || labels[i] != 0 {
                continue;
            }
            let mut best: Option<(f64, u32)> = None;
            for j in neighbors4(i, w, h).into_iter().flatten() {
                let l = labels[j];
                if l == 0 {
                    continue;
                }
                let d = dist2(&lab[i], &means[l as usize]);
                if best.map_or(true, |(bd, bl)| d < bd || (d == bd && l < bl)) {
                    best = Some((d, l));
                }
            }
            if let Some((_, l)) = best {
                updates.push((i, l));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (i, l) in updates {
            labels[i] = l;
        }
    }

    let mut out = vec![BinaryMask::new(w, h); (next_label - 1) as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            out[l as usize - 1].bits[i] = true;
        }
    }
    out.retain(|m| !m.is_empty());
    out
}

fn neighbors4(i: usize, w: usize, h: usize) -> [Option<usize>; 4] {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
}

fn lab_image(frame: &RasterImage) -> Vec<[f64; 3]> {
    (0..frame.width * frame.height)
        .map(|p| {
            let px = &frame.data[p * frame.channels..p * frame.channels + 3];
            rgb_pixel_to_lab(px[0] as f64, px[1] as f64, px[2] as f64)
        })
        .collect()
}

fn region_means(lab: &[[f64; 3]], labels: &[u32], label_count: u32) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0f64; 3]; label_count as usize];
    let mut counts = vec![0usize; label_count as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            for c in 0..3 {
                sums[l as usize][c] += lab[i][c];
            }
            counts[l as usize] += 1;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for c in s.iter_mut() {
                *c /= n as f64;
            }
        }
    }
    sums
}

/// Merges undersized masks into their largest 4-adjacent neighbor (dropping
/// isolated ones), then orders by descending area with topmost-leftmost
/// tie-break and assigns ids.
fn finalize_regions(
    mut masks: Vec<BinaryMask>,
    min_area: usize,
    frame_index: usize,
) -> Vec<Region> {
    loop {
        let small = masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.area() < min_area)
            .min_by_key(|(_, m)| m.area())
            .map(|(i, _)| i);
        let Some(si) = small else { break };
        let grown = dilate(&masks[si], 1);
        let target = masks
            .iter()
            .enumerate()
            .filter(|&(j, m)| j != si && m.intersection_area(&grown) > 0)
            .max_by_key(|(_, m)| m.area())
            .map(|(j, _)| j);
        let small_mask = masks.remove(si);
        if let Some(mut t) = target {
            if t > si {
                t -= 1;
            }
            masks[t].union_with(&small_mask);
        }
    }
    masks.sort_by_key(|m| {
        let first = m.bits.iter().position(|&b| b).expect("nonempty");
        (usize::MAX - m.area(), first)
    });
    masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| Region::from_mask(frame_index, i as u32 + 1, m))
        .collect()
}

/// Manual override: builds regions from a label image (0 = background).
pub fn regions_from_labels(
    width: usize,
    height: usize,
    labels: &[u16],
    frame_index: usize,
) -> Result<Vec<Region>> {
    if labels.len() != width * height {
        return Err(Error::dims(
            format!("{}x{}", width, height),
            format!("{} labels", labels.len()),
        ));
    }
    let mut ids: Vec<u16> = labels.iter().copied().filter(|&l| l > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut mask = BinaryMask::new(width, height);
        for (i, &l) in labels.iter().enumerate() {
            if l == id {
                mask.bits[i] = true;
            }
        }
        out.push(Region::from_mask(frame_index, id as u32, mask));
    }
    Ok(out)
}
