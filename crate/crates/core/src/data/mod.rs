//! Datasets, image I/O and augmentation.

mod augment;
mod dataset;
mod loader;
pub mod pnm;
pub mod synthetic;

pub use augment::{
    flip_horizontal, random_crop_flip, resample_region, resize_bilinear, rotate90, rotation_class_augment, AugmentSpec,
};
pub use dataset::{batch_tensor, BoundingBox, ClassRecord, Dataset, Image};
pub use loader::load_directory_dataset;
pub use synthetic::{synthetic_benchmark, synthetic_shapes_generate};
