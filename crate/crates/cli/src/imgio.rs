//! Image ingestion and saliency-map output.
//!
//! All inputs are resized bilinearly to 256×256 and normalized to [0,1];
//! ground-truth masks are binarized at 0.5. Saliency maps are written as
//! 8-bit grayscale PNG.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma};

use dfmnet_core::model::Sample;
use dfmnet_core::Tensor;

use crate::error::{CliError, Result};

pub const INPUT_HW: u32 = 256;

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| CliError::Decode(format!("{}: {e}", path.display())))
}

/// 3×256×256 tensor in [0,1] from any decodable color image.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?
        .resize_exact(INPUT_HW, INPUT_HW, FilterType::Triangle)
        .to_rgb8();
    let hw = (INPUT_HW * INPUT_HW) as usize;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, INPUT_HW as usize, INPUT_HW as usize], data).expect("shape"))
}

/// 1×256×256 depth tensor; 8- and 16-bit single-channel inputs normalize by
/// their full range.
pub fn load_depth(path: &Path) -> Result<Tensor> {
    let img = open(path)?.resize_exact(INPUT_HW, INPUT_HW, FilterType::Triangle);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        other => other.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
    };
    Ok(Tensor::new(vec![1, INPUT_HW as usize, INPUT_HW as usize], data).expect("shape"))
}

/// 3×256×256 optical-flow tensor stored as a color image.
pub fn load_flow(path: &Path) -> Result<Tensor> {
    load_rgb(path)
}

/// Binary 1×256×256 ground truth (threshold 0.5 after grayscale conversion).
pub fn load_gt(path: &Path) -> Result<Tensor> {
    let img = open(path)?
        .resize_exact(INPUT_HW, INPUT_HW, FilterType::Triangle)
        .to_luma8();
    let data: Vec<f32> =
        img.pixels().map(|p| if p.0[0] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![1, INPUT_HW as usize, INPUT_HW as usize], data).expect("shape"))
}

pub fn load_sample(rgb: &Path, aux: &Path, gt: &Path, flow: bool) -> Result<Sample> {
    Ok(Sample {
        rgb: load_rgb(rgb)?,
        aux: if flow { load_flow(aux)? } else { load_depth(aux)? },
        gt: load_gt(gt)?,
    })
}

/// Grayscale map from a saliency PNG, kept at its stored extents.
pub fn load_map(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    Ok(Tensor::new(vec![h, w], data).expect("shape"))
}

/// Write a single-channel map in [0,1] as 8-bit grayscale PNG.
pub fn save_map(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = match map.rank() {
        2 => (map.dim(0), map.dim(1)),
        3 if map.dim(0) == 1 => (map.dim(1), map.dim(2)),
        4 if map.dim(0) == 1 && map.dim(1) == 1 => (map.dim(2), map.dim(3)),
        _ => {
            return Err(CliError::Data(format!(
                "cannot write map of shape {:?}",
                map.shape()
            )))
        }
    };
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.data()[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}
