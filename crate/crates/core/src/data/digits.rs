//! Procedurally rendered handwritten-style digits, 28x28 grayscale bytes.
//!
//! Each class is a fixed set of strokes in a unit box; every rendered
//! instance applies a seeded random affine jitter, stroke thickness and ink
//! level, then rasterizes with distance-based antialiasing and a light
//! blur. Output matches the IDX image layout, so generated corpora flow
//! through the same loader as real digit files.

use super::synthetic::stream;
use rand::Rng;

pub const DIGIT_SIZE: usize = 28;

#[derive(Clone, Copy)]
struct Pt(f64, f64);

enum Stroke {
    Polyline(&'static [(f64, f64)]),
    /// center, radii
    Ellipse(f64, f64, f64, f64),
}

fn strokes(class: u8) -> Vec<Stroke> {
    use Stroke::*;
    match class {
        0 => vec![Ellipse(0.5, 0.5, 0.22, 0.33)],
        1 => vec![
            Polyline(&[(0.38, 0.28), (0.54, 0.15), (0.54, 0.85)]),
        ],
        2 => vec![Polyline(&[
            (0.28, 0.30),
            (0.33, 0.18),
            (0.52, 0.14),
            (0.68, 0.21),
            (0.71, 0.36),
            (0.58, 0.52),
            (0.40, 0.64),
            (0.28, 0.82),
            (0.74, 0.82),
        ])],
        3 => vec![Polyline(&[
            (0.30, 0.20),
            (0.52, 0.14),
            (0.69, 0.25),
            (0.62, 0.42),
            (0.46, 0.48),
            (0.63, 0.55),
            (0.71, 0.69),
            (0.55, 0.84),
            (0.30, 0.79),
        ])],
        4 => vec![
            Polyline(&[(0.58, 0.14), (0.27, 0.58), (0.76, 0.58)]),
            Polyline(&[(0.60, 0.34), (0.60, 0.86)]),
        ],
        5 => vec![Polyline(&[
            (0.70, 0.15),
            (0.32, 0.15),
            (0.29, 0.46),
            (0.55, 0.42),
            (0.71, 0.55),
            (0.67, 0.74),
            (0.46, 0.85),
            (0.29, 0.77),
        ])],
        6 => vec![
            Polyline(&[(0.62, 0.16), (0.42, 0.34), (0.31, 0.58)]),
            Ellipse(0.48, 0.66, 0.18, 0.190),
        ],
        7 => vec![Polyline(&[(0.27, 0.16), (0.73, 0.16), (0.45, 0.85)])],
        8 => vec![
            Ellipse(0.5, 0.32, 0.17, 0.17),
            Ellipse(0.5, 0.66, 0.20, 0.19),
        ],
        9 => vec![
            Ellipse(0.52, 0.34, 0.18, 0.19),
            Polyline(&[(0.69, 0.42), (0.58, 0.66), (0.40, 0.84)]),
        ],
        other => panic!("digit class {other} out of range"),
    }
}

fn dist_to_segment(p: Pt, a: Pt, b: Pt) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx) * (p.0 - cx) + (p.1 - cy) * (p.1 - cy)).sqrt()
}

struct Jitter {
    cos: f64,
    sin: f64,
    scale: f64,
    dx: f64,
    dy: f64,
    thickness: f64,
    ink: f64,
}

fn apply(j: &Jitter, p: (f64, f64)) -> Pt {
    // rotate and scale around the box center, then translate
    let (x, y) = (p.0 - 0.5, p.1 - 0.5);
    let rx = j.scale * (x * j.cos - y * j.sin);
    let ry = j.scale * (x * j.sin + y * j.cos);
    Pt(rx + 0.5 + j.dx, ry + 0.5 + j.dy)
}

/// One digit instance as DIGIT_SIZE^2 grayscale bytes, ink bright on black.
pub fn render_digit(class: u8, rng: &mut impl Rng) -> Vec<u8> {
    let angle: f64 = rng.gen_range(-0.21..0.21);
    let jitter = Jitter {
        cos: angle.cos(),
        sin: angle.sin(),
        scale: rng.gen_range(0.85..1.1),
        dx: rng.gen_range(-0.07..0.07),
        dy: rng.gen_range(-0.07..0.07),
        thickness: rng.gen_range(0.045..0.075),
        ink: rng.gen_range(0.75..1.0),
    };

    // collect stroke segments in jittered unit coordinates
    let mut segments: Vec<(Pt, Pt)> = Vec::new();
    for stroke in strokes(class) {
        match stroke {
            Stroke::Polyline(points) => {
                for pair in points.windows(2) {
                    segments.push((apply(&jitter, pair[0]), apply(&jitter, pair[1])));
                }
            }
            Stroke::Ellipse(cx, cy, r1, r2) => {
                const ARC_STEPS: usize = 24;
                let mut prev = None;
                for i in 0..=ARC_STEPS {
                    let t = i as f64 / ARC_STEPS as f64 * 2.0 * std::f64::consts::PI;
                    let p = apply(&jitter, (cx + r1 * t.cos(), cy + r2 * t.sin()));
                    if let Some(q) = prev {
                        segments.push((q, p));
                    }
                    prev = Some(p);
                }
            }
        }
    }

    let n = DIGIT_SIZE;
    let mut field = vec![0.0f64; n * n];
    let soft = 0.035; // antialiasing width in unit coordinates
    for y in 0..n {
        for x in 0..n {
            let p = Pt((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let mut best = f64::INFINITY;
            for &(a, b) in &segments {
                best = best.min(dist_to_segment(p, a, b));
            }
            let v = 1.0 - ((best - jitter.thickness / 2.0) / soft).clamp(0.0, 1.0);
            field[y * n + x] = v * jitter.ink;
        }
    }

    // light 3x3 blur softens the staircase edges
    let mut out = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= n as i64 || nx >= n as i64 {
                        continue;
                    }
                    let w = if dy == 0 && dx == 0 { 4.0 } else if dy == 0 || dx == 0 { 2.0 } else { 1.0 };
                    acc += w * field[ny as usize * n + nx as usize];
                    wsum += w;
                }
            }
            out[y * n + x] = ((acc / wsum) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

const PURPOSE_DIGITS: u64 = 0x6469_6769;

/// `count` instances of one class, deterministically derived from the seed.
pub fn digit_images(class: u8, count: usize, seed: u64) -> Vec<Vec<u8>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, PURPOSE_DIGITS + class as u64, i as u64);
            render_digit(class, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_classes_render_with_ink() {
        for class in 0..10u8 {
            let imgs = digit_images(class, 3, 7);
            for img in imgs {
                assert_eq!(img.len(), DIGIT_SIZE * DIGIT_SIZE);
                let ink: usize = img.iter().filter(|&&b| b > 64).count();
                assert!(ink > 20, "class {class} has only {ink} ink pixels");
                assert!(ink < 500, "class {class} has {ink} ink pixels");
            }
        }
    }

    #[test]
    fn rendering_is_seed_deterministic() {
        assert_eq!(digit_images(3, 2, 5), digit_images(3, 2, 5));
        assert_ne!(digit_images(3, 2, 5), digit_images(3, 2, 6));
    }

    #[test]
    fn ones_are_thinner_than_eights() {
        let ink = |class: u8| -> f64 {
            let imgs = digit_images(class, 8, 11);
            imgs.iter()
                .map(|img| img.iter().map(|&b| b as f64).sum::<f64>())
                .sum::<f64>()
                / 8.0
        };
        assert!(ink(1) < ink(8) * 0.7);
    }
}
