//! Lossless raster encoding of domain images.

use std::path::Path;

use anchor_nn::{Scalar, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use super::image::{DomainImage, DomainKind};
use crate::error::IoContext;
use crate::{AnchorError, Result};

/// Maps `[-1, 1]` to a byte.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let x = ((v.as_f64().clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
    x as u8
}

pub fn dequantize<T: Scalar>(b: u8) -> T {
    T::lit(b as f64 / 255.0 * 2.0 - 1.0)
}

/// Converts an image to 8-bit raster form: RGB for 3 planes, gray otherwise.
/// Categorical maps store raw class indices.
pub fn to_raster<T: Scalar>(img: &DomainImage<T>) -> Result<DynamicImage> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let d = img.pixels.data();
    let plane = (h * w) as usize;
    match img.kind {
        DomainKind::Categorical { classes } => {
            if classes > 256 {
                return Err(AnchorError::Data(format!(
                    "{classes} classes do not fit an 8-bit map"
                )));
            }
            let bytes = img.class_indices().into_iter().map(|c| c as u8).collect();
            Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("sized buffer"),
            ))
        }
        DomainKind::Continuous { channels: 1 } => {
            let bytes = d.iter().map(|&v| quantize(v)).collect();
            Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("sized buffer"),
            ))
        }
        DomainKind::Continuous { channels: 3 } => {
            let mut bytes = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    bytes.push(quantize(d[ch * plane + i]));
                }
            }
            Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, bytes).expect("sized buffer"),
            ))
        }
        DomainKind::Continuous { channels } => Err(AnchorError::Data(format!(
            "cannot rasterize {channels}-channel continuous images"
        ))),
    }
}

pub fn save_png<T: Scalar>(img: &DomainImage<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    to_raster(img)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AnchorError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Decodes `path` as a `kind` image, resizing to `resolution x resolution`
/// when needed (nearest neighbour for categorical maps).
pub fn load_png<T: Scalar>(
    path: &Path,
    domain_id: &str,
    kind: DomainKind,
    resolution: usize,
) -> Result<DomainImage<T>> {
    let decoded = image::open(path).map_err(|e| AnchorError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_raster(decoded, domain_id, kind, resolution).map_err(|e| match e {
        AnchorError::Data(reason) => AnchorError::Data(format!("{}: {reason}", path.display())),
        other => other,
    })
}

pub fn from_raster<T: Scalar>(
    decoded: DynamicImage,
    domain_id: &str,
    kind: DomainKind,
    resolution: usize,
) -> Result<DomainImage<T>> {
    let r = resolution as u32;
    let needs_resize = decoded.width() != r || decoded.height() != r;
    let filter = if kind.is_categorical() {
        FilterType::Nearest
    } else {
        FilterType::Triangle
    };
    let img = if needs_resize {
        decoded.resize_exact(r, r, filter)
    } else {
        decoded
    };
    let plane = resolution * resolution;
    let pixels = match kind {
        DomainKind::Categorical { classes } => {
            let gray = img.to_luma8();
            let mut data = Vec::with_capacity(plane);
            for &b in gray.as_raw() {
                if b as usize >= classes {
                    return Err(AnchorError::Data(format!("class index {b} >= {classes}")));
                }
                data.push(T::lit(b as f64));
            }
            Tensor::new(&[1, resolution, resolution], data)
        }
        DomainKind::Continuous { channels: 1 } => {
            let gray = img.to_luma8();
            Tensor::new(
                &[1, resolution, resolution],
                gray.as_raw().iter().map(|&b| dequantize(b)).collect(),
            )
        }
        DomainKind::Continuous { channels: 3 } => {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            let mut data = vec![T::zero(); 3 * plane];
            for i in 0..plane {
                for ch in 0..3 {
                    data[ch * plane + i] = dequantize(raw[3 * i + ch]);
                }
            }
            Tensor::new(&[3, resolution, resolution], data)
        }
        DomainKind::Continuous { channels } => {
            return Err(AnchorError::Data(format!(
                "cannot decode {channels}-channel continuous images"
            )))
        }
    };
    DomainImage::new(domain_id, pixels, kind)
}

/// Display colours for class indices; classes past the table wrap around.
pub const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 24],
    [230, 80, 60],
    [70, 170, 90],
    [60, 110, 220],
    [235, 200, 60],
    [170, 80, 200],
    [60, 200, 210],
    [240, 240, 240],
];

/// Human-viewable RGB rendering: class maps through [`PALETTE`], gray planes replicated.
pub fn display_rgb<T: Scalar>(img: &DomainImage<T>) -> Result<RgbImage> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    match img.kind {
        DomainKind::Categorical { .. } => {
            let bytes = img
                .class_indices()
                .into_iter()
                .flat_map(|c| PALETTE[c % PALETTE.len()])
                .collect();
            Ok(RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
        }
        _ => Ok(to_raster(img)?.to_rgb8()),
    }
}

/// Tiles rows of images into one PNG with a 2 px gutter. Cells may differ in size;
/// each row and column takes the largest cell it holds.
pub fn save_grid<T: Scalar>(rows: &[Vec<&DomainImage<T>>], path: &Path) -> Result<RgbImage> {
    const GUTTER: u32 = 2;
    let cells: Vec<Vec<RgbImage>> = rows
        .iter()
        .map(|r| r.iter().map(|img| display_rgb(img)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let ncols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let col_w: Vec<u32> = (0..ncols)
        .map(|c| {
            cells
                .iter()
                .filter_map(|r| r.get(c))
                .map(|i| i.width())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let row_h: Vec<u32> = cells
        .iter()
        .map(|r| r.iter().map(|i| i.height()).max().unwrap_or(0))
        .collect();
    let total_w = col_w.iter().sum::<u32>() + GUTTER * ncols.saturating_sub(1) as u32;
    let total_h = row_h.iter().sum::<u32>() + GUTTER * row_h.len().saturating_sub(1) as u32;
    let mut grid = RgbImage::from_pixel(total_w.max(1), total_h.max(1), image::Rgb([255, 255, 255]));
    let mut y = 0;
    for (r, row) in cells.iter().enumerate() {
        let mut x = 0;
        for (c, cell) in row.iter().enumerate() {
            image::imageops::replace(&mut grid, cell, x as i64, y as i64);
            x += col_w[c] + GUTTER;
        }
        y += row_h[r] + GUTTER;
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    grid.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AnchorError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(grid)
}
