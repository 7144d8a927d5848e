//! 8-bit grayscale PNG reading and writing.
//!
//! Images map `[-1, 1]` to `0..=255` through `v / 127.5 - 1`. Mask files
//! hold 255 on the reconstructed region (`m = 0`) and 0 on kept pixels.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn save(path: &Path, img: GrayImage) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn load(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(img.into_luma8())
}

fn gray(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([f(y as usize, x as usize)]))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    save(path, gray(img.height(), img.width(), |r, c| to_u8(img[(r, c)])))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let g = load(path)?;
    let (w, h) = g.dimensions();
    Image::new(h as usize, w as usize, g.pixels().map(|p| from_u8(p.0[0])).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    save(path, gray(mask.height(), mask.width(), |r, c| if mask.get(r, c) { 0 } else { 255 }))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = load(path)?;
    let (w, h) = g.dimensions();
    let mut kept = Vec::with_capacity((w * h) as usize);
    for (index, p) in g.pixels().enumerate() {
        match p.0[0] {
            0 => kept.push(true),
            255 => kept.push(false),
            v => {
                return Err(Error::NonBinaryMask {
                    index,
                    value: v as f64,
                })
            }
        }
    }
    Mask::from_bools(h as usize, w as usize, kept)
}

/// Writes a non-negative map with `[0, 1]` spread over `0..=255`.
pub fn write_heatmap(path: &Path, heat: &Image) -> Result<()> {
    save(
        path,
        gray(heat.height(), heat.width(), |r, c| {
            (heat[(r, c)] * 255.0).round().clamp(0.0, 255.0) as u8
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |r, c| from_u8((r * 40 + c * 3) as u8));
        let p = dir.path().join("a/img.png");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);

        let mask = Mask::from_fn(5, 7, |r, c| r > c);
        let p = dir.path().join("mask.png");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);

        let p = dir.path().join("gray.png");
        write_image(&p, &Image::filled(3, 3, 0.0)).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::NonBinaryMask { .. })));
        assert!(matches!(read_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
