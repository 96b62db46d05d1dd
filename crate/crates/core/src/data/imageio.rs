//! PNG reading and writing for images, masks and label maps.

use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, ImageReader, RgbImage};

use super::LabelEncoding;
use crate::domain::{BinaryChangeMap, ClassVocabulary, RasterImage, SemanticLabelMap};
use crate::error::{io_err, validation, RcdError, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| RcdError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn save<E>(path: &Path, res: std::result::Result<(), E>) -> Result<()>
where
    E: Into<image::ImageError>,
{
    res.map_err(|e| RcdError::Image {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

pub fn read_rgb_png(path: &Path) -> Result<RasterImage> {
    let img = open(path)?.to_rgb8();
    RasterImage::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn write_rgb_png(path: &Path, image: &RasterImage) -> Result<()> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .ok_or_else(|| validation("image buffer size mismatch"))?;
    save(path, buf.save(path))
}

/// `{0, 255}` single-channel mask.
pub fn read_mask_png(path: &Path) -> Result<BinaryChangeMap> {
    let img = open(path)?;
    if img.color().has_color() {
        return Err(validation("binary mask must be single-channel"));
    }
    let img = img.to_luma8();
    let mask = img
        .as_raw()
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(validation(format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryChangeMap::new(img.height() as usize, img.width() as usize, mask)
}

pub fn write_mask_png(path: &Path, mask: &BinaryChangeMap) -> Result<()> {
    let bytes = mask.mask().iter().map(|&m| m * 255).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .ok_or_else(|| validation("mask buffer size mismatch"))?;
    save(path, buf.save(path))
}

pub fn read_label_png(path: &Path, encoding: &LabelEncoding, vocab: Arc<ClassVocabulary>) -> Result<SemanticLabelMap> {
    let img = open(path)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let labels: Vec<u16> = match encoding {
        LabelEncoding::Index => {
            if img.color().has_color() {
                return Err(validation("index label map must be single-channel"));
            }
            img.to_luma8().as_raw().iter().map(|&v| u16::from(v)).collect()
        }
        LabelEncoding::Palette(palette) => img
            .to_rgb8()
            .pixels()
            .map(|p| {
                palette
                    .iter()
                    .find(|(c, _)| *c == p.0)
                    .map(|&(_, i)| i)
                    .ok_or_else(|| validation(format!("colour {:?} is not in the palette", p.0)))
            })
            .collect::<Result<_>>()?,
    };
    SemanticLabelMap::new(h, w, labels, vocab)
}

/// 8-bit index map; every label must fit in a byte.
pub fn write_label_png(path: &Path, map: &SemanticLabelMap) -> Result<()> {
    let bytes = map
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| validation(format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    let buf = GrayImage::from_raw(map.width() as u32, map.height() as u32, bytes)
        .ok_or_else(|| validation("label buffer size mismatch"))?;
    save(path, buf.save(path))
}
