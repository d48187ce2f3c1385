//! Seeded synthetic handwritten-style digits.
//!
//! Each class is a fixed set of pen strokes. Every sample draws a random
//! affine jitter (rotation, scale, shear, shift) and pen width, then renders
//! anti-aliased strokes into a 20×20 box centred in a 28×28 raster, the
//! same layout MNIST uses. Intensities are quantized to the 8-bit grid.

use crate::error::{Error, Result};
use crate::image::{Dataset, Image, LabeledExample};
use crate::keyed::KeyStream;

pub const DIGIT_SIZE: usize = 28;
const BOX: f64 = 20.0;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, segments: usize) -> Stroke {
    (0..=segments)
        .map(|i| {
            let t = from + (to - from) * i as f64 / segments as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Pen strokes for `digit` in unit-box coordinates, y pointing down.
fn strokes(digit: usize) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 2.0 * PI, 24)],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.08), (0.55, 0.92)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.35, 0.12),
            (0.55, 0.08),
            (0.72, 0.2),
            (0.72, 0.38),
            (0.25, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.6, 0.08),
            (0.72, 0.25),
            (0.48, 0.48),
            (0.75, 0.65),
            (0.65, 0.88),
            (0.25, 0.88),
        ]],
        4 => vec![
            vec![(0.62, 0.92), (0.62, 0.08), (0.2, 0.65), (0.8, 0.65)],
        ],
        5 => vec![vec![
            (0.75, 0.1),
            (0.3, 0.1),
            (0.27, 0.45),
            (0.6, 0.42),
            (0.75, 0.62),
            (0.62, 0.88),
            (0.25, 0.85),
        ]],
        6 => vec![vec![
            (0.68, 0.1),
            (0.38, 0.38),
            (0.28, 0.7),
            (0.45, 0.9),
            (0.68, 0.78),
            (0.66, 0.55),
            (0.42, 0.52),
            (0.3, 0.65),
        ]],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.45, 0.92)]],
        8 => vec![
            ellipse(0.5, 0.28, 0.2, 0.19, 0.0, 2.0 * PI, 18),
            ellipse(0.5, 0.7, 0.25, 0.22, 0.0, 2.0 * PI, 20),
        ],
        _ => vec![
            ellipse(0.48, 0.32, 0.21, 0.22, 0.0, 2.0 * PI, 18),
            vec![(0.69, 0.32), (0.62, 0.92)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn uniform(rng: &mut KeyStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_unit()
}

/// Renders one jittered sample of `digit`.
pub fn render_digit(digit: usize, seed: u64) -> Image {
    let mut rng = KeyStream::new(seed);
    let angle = uniform(&mut rng, -0.25, 0.25);
    let scale = uniform(&mut rng, 0.85, 1.1);
    let aspect = uniform(&mut rng, 0.85, 1.15);
    let shear = uniform(&mut rng, -0.25, 0.25);
    let shift = (uniform(&mut rng, -1.5, 1.5), uniform(&mut rng, -1.5, 1.5));
    let pen = uniform(&mut rng, 0.9, 1.6);

    let (s, c) = angle.sin_cos();
    let centre = DIGIT_SIZE as f64 / 2.0;
    let map = |(u, v): (f64, f64)| {
        let x = (u - 0.5) * BOX * scale * aspect;
        let y = (v - 0.5) * BOX * scale;
        let x = x + shear * y;
        (c * x - s * y + centre + shift.0, s * x + c * y + centre + shift.1)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = strokes(digit % 10)
        .into_iter()
        .flat_map(|stroke| {
            let pts: Vec<_> = stroke.into_iter().map(map).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();

    let mut pixels = vec![0.0; DIGIT_SIZE * DIGIT_SIZE];
    for (i, px) in pixels.iter_mut().enumerate() {
        let p = ((i % DIGIT_SIZE) as f64 + 0.5, (i / DIGIT_SIZE) as f64 + 0.5);
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min);
        // one-pixel soft edge around the pen
        let v = (pen + 0.5 - d).clamp(0.0, 1.0);
        *px = (v * 255.0).round() / 255.0;
    }
    Image::new(DIGIT_SIZE, DIGIT_SIZE, pixels).expect("fixed size")
}

/// `count` samples with balanced labels `i mod 10`.
pub fn synthetic_digits(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset needs at least one example".into()));
    }
    let mut master = KeyStream::new(seed);
    let examples = (0..count)
        .map(|i| LabeledExample {
            image: render_digit(i % 10, master.next_value()),
            label: i % 10,
        })
        .collect();
    Dataset::new(format!("synthetic-digits-{seed:x}"), 10, examples)
}
