//! Morphological operations with a disk structuring element.

use super::BinaryMask;

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let offsets = disk_offsets(radius);
    let mut out = BinaryMask::new(mask.width, mask.height);
    let (w, h) = (mask.width as isize, mask.height as isize);
    for y in 0..h {
        for x in 0..w {
            let ok = offsets.iter().all(|(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0 && ny >= 0 && nx < w && ny < h && mask.bits[(ny * w + nx) as usize]
            });
            out.bits[(y * w + x) as usize] = ok;
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let offsets = disk_offsets(radius);
    let mut out = BinaryMask::new(mask.width, mask.height);
    let (w, h) = (mask.width as isize, mask.height as isize);
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[(y * w + x) as usize] {
                continue;
            }
            for (dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.bits[(ny * w + nx) as usize] = true;
                }
            }
        }
    }
    out
}

/// Erosion followed by dilation; kills speckle smaller than the disk.
pub fn morphological_open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_removes_single_pixel() {
        let mut m = BinaryMask::new(10, 10);
        m.set(5, 5, true);
        assert!(morphological_open(&m, 1).is_empty());
    }

    #[test]
    fn open_keeps_square_body() {
        let mut m = BinaryMask::new(12, 12);
        for y in 3..9 {
            for x in 3..9 {
                m.set(x, y, true);
            }
        }
        let opened = morphological_open(&m, 1);
        // Anti-extensive, and only the 4 corners may be lost to the disk.
        for i in 0..m.bits.len() {
            assert!(!opened.bits[i] || m.bits[i]);
        }
        assert!(opened.area() >= m.area() - 4);
        for y in 4..8 {
            for x in 4..8 {
                assert!(opened.get(x, y));
            }
        }
    }
}
