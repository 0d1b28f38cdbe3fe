use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::augment::resize_bilinear;
use super::dataset::{ClassRecord, Dataset};
use super::pnm::read_pnm;

fn is_pnm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/<image>.{pgm,ppm}`, classes and files in
/// lexicographic order, every image resized to `image_size` square.
pub fn load_directory_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut classes = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non-UTF-8 class directory {}", dir.display())))?
            .to_string();
        let mut images = Vec::new();
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_pnm(p)) {
            let img = read_pnm(&file)?;
            images.push(if img.height == image_size && img.width == image_size {
                img
            } else {
                resize_bilinear(&img, image_size, image_size)
            });
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no PGM/PPM images",
                dir.display()
            )));
        }
        classes.push(ClassRecord {
            name,
            images,
            boxes: None,
        });
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    Dataset::new(classes)
}
