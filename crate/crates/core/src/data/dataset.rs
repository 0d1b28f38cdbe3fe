use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-major image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels * height * width != pixels.len() || pixels.is_empty() {
            return Err(Error::Dataset(format!(
                "{channels}x{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.pixels.iter().map(|&p| T::from_f64_lossy(p as f64)).collect(),
        )
        .expect("image shape")
    }
}

/// Stacks images into a `[B, C, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dataset("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::dim(
                "batch_tensor",
                format!("{:?} vs {:?}", img.shape(), first.shape()),
            ));
        }
        data.extend(img.pixels.iter().map(|&p| T::from_f64_lossy(p as f64)));
    }
    Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
}

/// Axis-aligned box in pixel units; `x1`/`y1` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BoundingBox {
    /// Whether the pixel centred at `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        px >= self.x0 && px < self.x1 && py >= self.y0 && py < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub images: Vec<Image>,
    /// Object boxes per image, when known by construction.
    pub boxes: Option<Vec<BoundingBox>>,
}

/// Labelled image collection. Every image shares one shape; every class has
/// at least one image and a unique name.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    classes: Vec<ClassRecord>,
}

impl Dataset {
    pub fn new(classes: Vec<ClassRecord>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut shape = None;
        for c in &classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Dataset(format!("duplicate class name '{}'", c.name)));
            }
            if c.images.is_empty() {
                return Err(Error::Dataset(format!("class '{}' has no images", c.name)));
            }
            if let Some(b) = &c.boxes {
                if b.len() != c.images.len() {
                    return Err(Error::Dataset(format!("class '{}' box count mismatch", c.name)));
                }
            }
            for img in &c.images {
                match shape {
                    None => shape = Some(img.shape()),
                    Some(s) if s != img.shape() => {
                        return Err(Error::Dataset(format!(
                            "class '{}' has a {:?} image, expected {:?}",
                            c.name,
                            img.shape(),
                            s
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// `[C, H, W]` shared by every image, `None` for an empty dataset.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.classes.first().map(|c| c.images[0].shape())
    }

    pub fn image(&self, class: usize, index: usize) -> &Image {
        &self.classes[class].images[index]
    }

    /// Classes at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let classes = indices
            .iter()
            .map(|&i| {
                self.classes
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("class index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Dataset::new(classes)
    }

    /// Splits classes into (selected, rest) by index predicate.
    pub fn split_by(&self, mut pick: impl FnMut(usize) -> bool) -> Result<(Dataset, Dataset)> {
        let (a, b): (Vec<usize>, Vec<usize>) = (0..self.classes.len()).partition(|&i| pick(i));
        Ok((self.subset(&a)?, self.subset(&b)?))
    }
}
