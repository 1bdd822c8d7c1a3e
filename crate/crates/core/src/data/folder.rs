use std::path::Path;

use anchor_nn::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{DomainImage, DomainKind};
use super::io::load_png;
use crate::error::IoContext;
use crate::{AnchorError, Result};

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

/// In-memory images of one domain, all the same size.
#[derive(Clone, Debug)]
pub struct DomainDataset<T> {
    pub domain_id: String,
    pub kind: DomainKind,
    images: Vec<DomainImage<T>>,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn from_images(domain_id: &str, kind: DomainKind, images: Vec<DomainImage<T>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| AnchorError::Data(format!("domain `{domain_id}` has no images")))?;
        let shape = first.pixels.shape().to_vec();
        for img in &images {
            if img.kind != kind || img.pixels.shape() != shape.as_slice() {
                return Err(AnchorError::Data(format!(
                    "image of kind {} and shape {:?} does not match {kind} {shape:?}",
                    img.kind,
                    img.pixels.shape()
                )));
            }
        }
        Ok(Self {
            domain_id: domain_id.to_string(),
            kind,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[DomainImage<T>] {
        &self.images
    }

    pub fn get(&self, i: usize) -> &DomainImage<T> {
        &self.images[i]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images[0].height(), self.images[0].width())
    }

    /// Network-facing batch `(n, C, H, W)` of the given indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        let planes: Vec<_> = indices.iter().map(|&i| self.images[i].network_input()).collect();
        Tensor::stack(&planes.iter().collect::<Vec<_>>())
    }

    /// Stored-pixel batch `(n, stored_channels, H, W)`.
    pub fn raw_batch(&self, indices: &[usize]) -> Tensor<T> {
        let planes: Vec<_> = indices.iter().map(|&i| self.images[i].pixels.clone()).collect();
        Tensor::stack(&planes.iter().collect::<Vec<_>>())
    }

    pub fn shuffle(&mut self, seed: u64) {
        self.images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
}

/// Loads every decodable image directly inside `path`.
///
/// Files are read in name order, then shuffled with `shuffle_seed`. Files that
/// fail to decode are skipped with a warning.
pub fn load_folder<T: Scalar>(
    path: &Path,
    domain_id: &str,
    kind: DomainKind,
    resolution: usize,
    shuffle_seed: u64,
) -> Result<DomainDataset<T>> {
    kind.validate()?;
    let mut files: Vec<_> = std::fs::read_dir(path)
        .at(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AnchorError::Data(format!("no images in {}", path.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        match load_png(f, domain_id, kind, resolution) {
            Ok(img) => images.push(img),
            Err(AnchorError::Image { path, reason }) => {
                log::warn!("skipping undecodable {}: {reason}", path.display());
            }
            Err(e) => return Err(e),
        }
    }
    if images.is_empty() {
        return Err(AnchorError::Data(format!(
            "none of the {} files in {} decoded",
            files.len(),
            path.display()
        )));
    }
    let mut ds = DomainDataset::from_images(domain_id, kind, images)?;
    ds.shuffle(shuffle_seed);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn loads_resizes_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10u8 {
            let img = RgbImage::from_fn(20, 12, |x, y| Rgb([i * 20, x as u8 * 10, y as u8 * 20]));
            img.save(dir.path().join(format!("{i}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let kind = DomainKind::Continuous { channels: 3 };
        let ds = load_folder::<f32>(dir.path(), "photo", kind, 16, 1).unwrap();
        assert_eq!(ds.len(), 10);
        for img in ds.images() {
            assert_eq!(img.pixels.shape(), &[3, 16, 16]);
            assert!(img.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let again = load_folder::<f32>(dir.path(), "photo", kind, 16, 1).unwrap();
        assert_eq!(ds.images(), again.images());
    }

    #[test]
    fn out_of_range_class_index_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_fn(8, 8, |x, _| Luma([if x == 3 { 7 } else { 1 }]))
            .save(dir.path().join("a.png"))
            .unwrap();
        let kind = DomainKind::Categorical { classes: 4 };
        assert!(matches!(
            load_folder::<f32>(dir.path(), "seg", kind, 8, 0),
            Err(AnchorError::Data(_))
        ));
    }

    #[test]
    fn empty_or_undecodable_folder_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let kind = DomainKind::Continuous { channels: 1 };
        assert!(matches!(
            load_folder::<f32>(dir.path(), "x", kind, 8, 0),
            Err(AnchorError::Data(_))
        ));
        std::fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        assert!(matches!(
            load_folder::<f32>(dir.path(), "x", kind, 8, 0),
            Err(AnchorError::Data(_))
        ));
    }
}
