//! Procedural 10-class texture/shape images.
//!
//! Each class is a pattern family (stripes at four orientations, a
//! checkerboard, a disc, a ring, a cross, a dot grid, a square outline)
//! rendered at a random position, scale, phase and contrast over a noisy
//! background. Class identity does not depend on where the pattern sits,
//! which is what makes spatially rigid feature matching a weak baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIZE: usize = 32;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "antidiagonal_stripes",
    "checkerboard",
    "disc",
    "ring",
    "cross",
    "dot_grid",
    "square_outline",
];

/// `per_class` images of every class in a seeded random order.
pub fn generate(per_class: usize, seed: u64) -> Dataset {
    let mut rng = crate::seed::rng(seed);
    let mut labels: Vec<usize> = (0..NUM_CLASSES)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(labels.len() * IMAGE_SIZE * IMAGE_SIZE);
    for &label in &labels {
        pixels.extend(render(label, &mut rng));
    }
    Dataset::new(IMAGE_SIZE, IMAGE_SIZE, NUM_CLASSES, pixels, labels).expect("generator produces a valid dataset")
}

/// One `IMAGE_SIZE²` image of `class`, quantised to multiples of 1/255.
pub fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE as f64;
    let bg: f64 = rng.gen_range(0.05..0.35);
    let contrast = rng.gen_range(0.12..0.3);
    let half = rng.gen_range(5.0..8.0);
    let period = rng.gen_range(3.5..5.5);
    let phase = rng.gen_range(0.0..period);
    let radius = rng.gen_range(3.5..5.5);
    let width = rng.gen_range(1.0..1.6);
    let extent = f64::max(half, radius + 1.0 + width) + 1.0;
    let cx = rng.gen_range(extent..n - extent);
    let cy = rng.gen_range(extent..n - extent);

    let in_window = |x: f64, y: f64| (x - cx).abs() <= half && (y - cy).abs() <= half;
    let stripe = |u: f64| ((u + phase).rem_euclid(period)) < period / 2.0;

    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for yi in 0..IMAGE_SIZE {
        for xi in 0..IMAGE_SIZE {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let (dx, dy) = (x - cx, y - cy);
            let dist = (dx * dx + dy * dy).sqrt();
            let on = match class {
                0 => in_window(x, y) && stripe(y),
                1 => in_window(x, y) && stripe(x),
                2 => in_window(x, y) && stripe((x + y) / std::f64::consts::SQRT_2),
                3 => in_window(x, y) && stripe((x - y) / std::f64::consts::SQRT_2),
                4 => {
                    let cell = period / 2.0;
                    in_window(x, y)
                        && (((dx + phase) / cell).floor() as i64 + ((dy + phase) / cell).floor() as i64) % 2 == 0
                }
                5 => dist <= radius,
                6 => (dist - radius - 1.0).abs() <= width,
                7 => (dx.abs() <= width && dy.abs() <= half) || (dy.abs() <= width && dx.abs() <= half),
                8 => {
                    let gx = (dx + half + phase).rem_euclid(period);
                    let gy = (dy + half + phase).rem_euclid(period);
                    in_window(x, y) && gx < 2.0 && gy < 2.0
                }
                9 => {
                    let edge = dx.abs().max(dy.abs());
                    edge <= half && edge >= half - 2.0 * width
                }
                _ => panic!("class {class} out of range"),
            };
            let noise = rng.gen_range(-0.06..0.06);
            let v: f64 = bg + if on { contrast } else { 0.0 } + noise;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    out
}
