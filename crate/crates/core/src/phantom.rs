//! Deterministic synthetic test images.

use crate::image::{Image, Mask};

/// (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees)
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Subsamples per pixel side when rendering the head phantom.
pub const SUPERSAMPLE: usize = 4;

/// Modified (high-contrast) Shepp-Logan head phantom, clamped to `[0,1]`.
///
/// Each pixel is the area average of `SUPERSAMPLE`² point samples, so edges
/// are anti-aliased rather than staircased.
pub fn shepp_logan(size: usize) -> Image {
    let s = size as f64;
    let k = SUPERSAMPLE as f64;
    Image::from_fn(size, size, |r, c| {
        let mut acc = 0.0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let x = 2.0 * (c as f64 + (j as f64 + 0.5) / k) / s - 1.0;
                let y = 1.0 - 2.0 * (r as f64 + (i as f64 + 0.5) / k) / s;
                acc += shepp_logan_at(x, y);
            }
        }
        acc / (k * k)
    })
}

/// Point value at `(x, y)` in `[-1,1]²`, y pointing up.
fn shepp_logan_at(x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for &(amp, a, b, x0, y0, deg) in &SHEPP_LOGAN {
        let (sn, cs) = deg.to_radians().sin_cos();
        let (dx, dy) = (x - x0, y - y0);
        let u = dx * cs + dy * sn;
        let w = -dx * sn + dy * cs;
        if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
            v += amp;
        }
    }
    v.clamp(0.0, 1.0)
}

pub fn disk(size: usize, radius: f64) -> Image {
    let centre = (size as f64 - 1.0) / 2.0;
    Image::from_fn(size, size, |r, c| {
        let d2 = (r as f64 - centre).powi(2) + (c as f64 - centre).powi(2);
        if d2 <= radius * radius {
            1.0
        } else {
            0.0
        }
    })
}

// 5x7 glyphs, one row per byte, most significant of the low 5 bits on the left.
const GLYPHS: [(char, [u8; 7]); 5] = [
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
];

const TEXT: &str = "TEMPEST";

/// Occlusion mask of overlaid text lines; text pixels are unobserved.
pub fn text_mask(size: usize) -> Mask {
    let scale = (size / 64).max(1);
    let glyph = |ch: char| GLYPHS.iter().find(|(g, _)| *g == ch).map(|(_, rows)| rows);
    let line_height = 16 * scale;
    Mask::from_fn(size, size, |r, c| {
        let (line, y) = (r / line_height, r % line_height);
        let top = 4 * scale;
        if y < top || y >= top + 7 * scale {
            return true;
        }
        let gy = (y - top) / scale;
        // alternate lines are shifted so occlusions are not column-aligned
        let x = c + (line % 2) * 3 * scale;
        let cell = 6 * scale;
        let idx = (x / cell) % (TEXT.len() + 1);
        let gx = (x % cell) / scale;
        match TEXT.chars().nth(idx).and_then(glyph) {
            Some(rows) if gx < 5 => rows[gy] & (0b10000 >> gx) == 0,
            _ => true,
        }
    })
}
