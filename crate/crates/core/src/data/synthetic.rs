//! Procedural grayscale shape corpus with known object boxes.
//!
//! Each class is one shape family drawn inside a square box of random
//! size (nominal half-side 7 px, scaled by up to +-30%) whose center is
//! shifted from the image center by up to 15% of the side on each axis, with
//! additive Gaussian noise of standard deviation 0.05 and clamping to
//! `[0, 1]`. Coverage is anti-aliased with 4x4 supersampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::dataset::{BoundingBox, ClassRecord, Dataset, Image};

pub const NOISE_STD: f64 = 0.05;
pub const SCALE_JITTER: f64 = 0.3;
/// Nominal half-side of the object box as a fraction of the image side.
pub const HALF_SIDE_FRACTION: f64 = 0.25;
/// Largest center offset per axis as a fraction of the image side.
pub const SHIFT_FRACTION: f64 = 0.15;

type ShapeFn = fn(f64, f64) -> bool;

/// Shape families on the box-normalized square `[-1, 1]^2` (v points down).
pub const FAMILIES: &[(&str, ShapeFn)] = &[
    ("disk", |u, v| u * u + v * v <= 1.0),
    ("ring", |u, v| (0.3..=1.0).contains(&(u * u + v * v))),
    ("square", |u, v| u.abs() <= 0.85 && v.abs() <= 0.85),
    ("frame", |u, v| (0.6..=1.0).contains(&u.abs().max(v.abs()))),
    ("plus", |u, v| u.abs() <= 0.25 || v.abs() <= 0.25),
    ("saltire", |u, v| (u.abs() - v.abs()).abs() <= 0.3),
    ("triangle_up", |u, v| u.abs() <= (v + 1.0) / 2.0),
    ("triangle_down", |u, v| u.abs() <= (1.0 - v) / 2.0),
    ("bar_horizontal", |_u, v| v.abs() <= 0.3),
    ("bar_vertical", |u, _v| u.abs() <= 0.3),
    ("bar_rising", |u, v| (u + v).abs() <= 0.45),
    ("bar_falling", |u, v| (u - v).abs() <= 0.45),
    ("checker", |u, v| {
        let (i, j) = (((u + 1.0) * 2.0).floor() as i64, ((v + 1.0) * 2.0).floor() as i64);
        (i + j) % 2 == 0
    }),
    ("corner", |u, v| u <= -0.35 || v >= 0.35),
    ("tee", |u, v| v <= -0.45 || u.abs() <= 0.25),
    ("double_horizontal", |_u, v| (0.3..=0.75).contains(&v.abs())),
    ("double_vertical", |u, _v| (0.3..=0.75).contains(&u.abs())),
    ("diamond", |u, v| u.abs() + v.abs() <= 1.0),
    ("diamond_outline", |u, v| (0.55..=1.0).contains(&(u.abs() + v.abs()))),
    ("dome_down", |u, v| {
        let w = (v + 1.0) / 2.0;
        u * u + w * w <= 1.0
    }),
    ("dome_up", |u, v| {
        let w = (1.0 - v) / 2.0;
        u * u + w * w <= 1.0
    }),
    ("four_dots", |u, v| {
        let (du, dv) = (u.abs() - 0.55, v.abs() - 0.55);
        du * du + dv * dv <= 0.16
    }),
    ("target", |u, v| {
        let r = u * u + v * v;
        r <= 0.1 || (0.45..=1.0).contains(&r)
    }),
    ("chevron_right", |u, v| (u - (0.5 - v.abs())).abs() <= 0.3),
    ("chevron_left", |u, v| (u + (0.5 - v.abs())).abs() <= 0.3),
    ("letter_h", |u, v| u.abs() >= 0.6 || v.abs() <= 0.2),
    ("hourglass", |u, v| u.abs() <= v.abs()),
    ("stripes", |u, _v| (((u + 1.0) * 2.5).floor() as i64) % 2 == 0),
];

fn render(shape: ShapeFn, side: usize, bbox: &BoundingBox, noise: &Normal<f64>, rng: &mut impl Rng) -> Image {
    const SS: usize = 4;
    let cx = (bbox.x0 + bbox.x1) as f64 / 2.0;
    let cy = (bbox.y0 + bbox.y1) as f64 / 2.0;
    let half = (bbox.x1 - bbox.x0) as f64 / 2.0;
    let mut img = Image::filled(1, side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let (u, v) = ((px - cx) / half, (py - cy) / half);
                    if u.abs() <= 1.0 && v.abs() <= 1.0 && shape(u, v) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (SS * SS) as f64;
            let value = coverage + noise.sample(rng);
            *img.at_mut(0, y, x) = value.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// `num_classes` shape families, `images_per_class` noisy renderings each.
/// Fully determined by `seed`.
pub fn synthetic_shapes_generate(
    num_classes: usize,
    images_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes > FAMILIES.len() {
        return Err(Error::Config(format!(
            "{num_classes} classes requested, only {} shape families exist",
            FAMILIES.len()
        )));
    }
    if images_per_class == 0 || image_size < 8 {
        return Err(Error::Config(format!(
            "need at least one image of side >= 8, got {images_per_class} of {image_size}"
        )));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let side = image_size as f64;
    let nominal = HALF_SIDE_FRACTION * side;
    let mut classes = Vec::with_capacity(num_classes);
    for (index, &(name, shape)) in FAMILIES.iter().take(num_classes).enumerate() {
        // Per-class stream: adding classes never perturbs earlier ones.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
        let mut images = Vec::with_capacity(images_per_class);
        let mut boxes = Vec::with_capacity(images_per_class);
        for _ in 0..images_per_class {
            let half = nominal * rng.gen_range(1.0 - SCALE_JITTER..=1.0 + SCALE_JITTER);
            let shift = SHIFT_FRACTION * side;
            let (lo, hi) = ((side / 2.0 - shift).max(half), (side / 2.0 + shift).min(side - half));
            let cx = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(lo..=hi);
            let bbox = BoundingBox {
                x0: (cx - half) as f32,
                y0: (cy - half) as f32,
                x1: (cx + half) as f32,
                y1: (cy + half) as f32,
            };
            images.push(render(shape, image_size, &bbox, &noise, &mut rng));
            boxes.push(bbox);
        }
        classes.push(ClassRecord {
            name: name.to_string(),
            images,
            boxes: Some(boxes),
        });
    }
    Dataset::new(classes)
}

/// Train/test class split of the full synthetic corpus: every third family
/// (indices 1, 4, 7, ...) is held out for evaluation.
pub fn synthetic_benchmark(images_per_class: usize, image_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let all = synthetic_shapes_generate(FAMILIES.len(), images_per_class, image_size, seed)?;
    let (test, train) = all.split_by(|i| i % 3 == 1)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        let d = synthetic_shapes_generate(10, 40, 28, 7).unwrap();
        assert_eq!(d.num_classes(), 10);
        assert!(d.classes().iter().all(|c| c.images.len() == 40));
        assert_eq!(d.image_shape(), Some([1, 28, 28]));
        for c in d.classes() {
            for img in &c.images {
                assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synthetic_shapes_generate(6, 5, 28, 42).unwrap();
        let b = synthetic_shapes_generate(6, 5, 28, 42).unwrap();
        assert_eq!(a, b);
        let c = synthetic_shapes_generate(6, 5, 28, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_lie_inside_the_image_and_hold_the_ink() {
        let d = synthetic_shapes_generate(FAMILIES.len(), 3, 28, 1).unwrap();
        for c in d.classes() {
            for (img, b) in c.images.iter().zip(c.boxes.as_ref().unwrap()) {
                assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 28.0 && b.y1 <= 28.0);
                let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0, 0);
                for y in 0..28 {
                    for x in 0..28 {
                        if b.contains_pixel(x, y) {
                            inside += img.at(0, y, x);
                            n_in += 1;
                        } else {
                            outside += img.at(0, y, x);
                            n_out += 1;
                        }
                    }
                }
                assert!(inside / n_in as f32 > 2.0 * outside / n_out as f32, "{}", c.name);
            }
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        assert!(synthetic_shapes_generate(FAMILIES.len() + 1, 1, 28, 0).is_err());
    }

    #[test]
    fn benchmark_split_is_disjoint() {
        let (train, test) = synthetic_benchmark(2, 28, 0).unwrap();
        assert_eq!(train.num_classes() + test.num_classes(), FAMILIES.len());
        for c in test.classes() {
            assert!(train.classes().iter().all(|t| t.name != c.name));
        }
    }
}
