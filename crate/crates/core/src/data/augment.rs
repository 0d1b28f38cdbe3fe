//! Resampling, crops, flips and rotation-based class augmentation.
//!
//! Bilinear resampling is corner-aligned: output pixel `i` of `n` samples
//! source coordinate `i * (m - 1) / (n - 1)` of an `m`-pixel axis, so the
//! first and last pixels map exactly onto each other and a same-size resample
//! is the identity.

use rand::Rng;

use crate::error::{Error, Result};

use super::dataset::{ClassRecord, Dataset, Image};

/// Random crop and flip policy for test-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Fraction of each side length kept by the crop, in `(0, 1]`.
    pub crop_ratio: f64,
    pub flip_horizontal: bool,
}

impl AugmentSpec {
    pub const DEFAULT_CROP: f64 = 0.875;

    pub fn new(crop_ratio: f64, flip_horizontal: bool) -> Result<Self> {
        if !(crop_ratio > 0.0 && crop_ratio <= 1.0) {
            return Err(Error::Config(format!("crop ratio {crop_ratio} not in (0, 1]")));
        }
        Ok(Self {
            crop_ratio,
            flip_horizontal,
        })
    }
}

fn axis_coord(i: usize, out: usize, src: usize) -> (usize, usize, f64) {
    if out <= 1 || src <= 1 {
        return (0, 0, 0.0);
    }
    let s = i as f64 * (src - 1) as f64 / (out - 1) as f64;
    let lo = (s.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resample of the `w x h` window at `(x0, y0)` to `out_h x out_w`.
pub fn resample_region(image: &Image, x0: usize, y0: usize, w: usize, h: usize, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::filled(image.channels, out_h, out_w, 0.0);
    for c in 0..image.channels {
        for oy in 0..out_h {
            let (ya, yb, fy) = axis_coord(oy, out_h, h);
            for ox in 0..out_w {
                let (xa, xb, fx) = axis_coord(ox, out_w, w);
                let p = |y: usize, x: usize| image.at(c, y0 + y, x0 + x) as f64;
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                *out.at_mut(c, oy, ox) = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    resample_region(image, 0, 0, image.width, image.height, out_h, out_w)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                *out.at_mut(c, y, x) = image.at(c, y, image.width - 1 - x);
            }
        }
    }
    out
}

/// Exact 90 degree clockwise rotation of a square image.
pub fn rotate90(image: &Image) -> Result<Image> {
    if image.height != image.width {
        return Err(Error::Contract(format!(
            "rotation needs a square image, got {}x{}",
            image.height, image.width
        )));
    }
    let n = image.width;
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..n {
            for x in 0..n {
                *out.at_mut(c, x, n - 1 - y) = image.at(c, y, x);
            }
        }
    }
    Ok(out)
}

/// Crop of `crop_ratio` of each side at a uniform offset, resized back to
/// the original size, then flipped with probability 0.5 when enabled.
pub fn random_crop_flip(image: &Image, spec: &AugmentSpec, rng: &mut impl Rng) -> Image {
    let cw = ((spec.crop_ratio * image.width as f64).floor() as usize).clamp(1, image.width);
    let ch = ((spec.crop_ratio * image.height as f64).floor() as usize).clamp(1, image.height);
    let x0 = rng.gen_range(0..=image.width - cw);
    let y0 = rng.gen_range(0..=image.height - ch);
    let out = resample_region(image, x0, y0, cw, ch, image.height, image.width);
    if spec.flip_horizontal && rng.gen_bool(0.5) {
        flip_horizontal(&out)
    } else {
        out
    }
}

/// Every class becomes four classes: the original and its 90, 180 and 270
/// degree rotations, kept adjacent in that order.
pub fn rotation_class_augment(dataset: &Dataset) -> Result<Dataset> {
    let mut classes = Vec::with_capacity(dataset.num_classes() * 4);
    for class in dataset.classes() {
        let mut current = class.images.clone();
        for quarter in 0..4 {
            if quarter > 0 {
                current = current.iter().map(rotate90).collect::<Result<_>>()?;
            }
            classes.push(ClassRecord {
                name: format!("{}@rot{:03}", class.name, quarter * 90),
                images: current.clone(),
                boxes: None,
            });
        }
    }
    Dataset::new(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(side: usize) -> Image {
        let px = (0..side * side).map(|i| i as f32 / (side * side) as f32).collect();
        Image::new(1, side, side, px).unwrap()
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(7);
        assert_eq!(resize_bilinear(&img, 7, 7), img);
    }

    #[test]
    fn corner_aligned_upsample_hits_known_values() {
        let img = Image::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(&img, 3, 3);
        assert_eq!(up.pixels, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = ramp(28);
        let spec = AugmentSpec::new(1.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_crop_flip(&img, &spec, &mut rng), img);
    }

    #[test]
    fn augmentation_is_seeded_and_shape_preserving() {
        let img = ramp(28);
        let spec = AugmentSpec::new(0.875, true).unwrap();
        let a = random_crop_flip(&img, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_crop_flip(&img, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
    }

    #[test]
    fn four_quarter_turns_restore_the_image() {
        let img = ramp(5);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r).unwrap();
        }
        assert_eq!(r, img);
        assert_ne!(rotate90(&img).unwrap(), img);
    }

    #[test]
    fn rotation_needs_square_images() {
        let img = Image::filled(1, 2, 3, 0.0);
        assert!(matches!(rotate90(&img), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_crop_ratio_is_rejected() {
        assert!(AugmentSpec::new(0.0, false).is_err());
        assert!(AugmentSpec::new(1.5, false).is_err());
    }
}
