//! PNG datasets, image grids, masks and the raw tensor format.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::pyramid::downscale;
use crate::tensor::{Shape, Tensor};

/// 8-bit value to `[-1, 1]`.
pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `[-1, 1]` to 8 bits: `clamp((v + 1) * 127.5, 0, 255)` rounded.
pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetReport {
    pub loaded: usize,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

/// Center crop to a square, resize to `side`, and convert to a
/// `1 x channels x side x side` tensor. Integer ratios use block
/// averaging; other sizes use bilinear resampling.
pub fn prepare_image(img: &DynamicImage, side: usize, channels: usize) -> Result<Tensor<f32>> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("images must have 1 or 3 channels, got {channels}")));
    }
    let (w, h) = (img.width(), img.height());
    let crop = w.min(h);
    if crop == 0 {
        return Err(Error::Empty("image has no pixels".into()));
    }
    let img = img.crop_imm((w - crop) / 2, (h - crop) / 2, crop, crop);
    let crop = crop as usize;
    let (img, factor) = if crop % side == 0 {
        (img, crop / side)
    } else {
        (img.resize_exact(side as u32, side as u32, FilterType::Triangle), 1)
    };
    let full = img.width() as usize;
    let t = if channels == 1 {
        let g = img.to_luma8();
        Tensor::from_fn(Shape::new(1, 1, full, full), |_, _, y, x| to_unit(g.get_pixel(x as u32, y as u32)[0]))
    } else {
        let c = img.to_rgb8();
        Tensor::from_fn(Shape::new(1, 3, full, full), |_, ch, y, x| to_unit(c.get_pixel(x as u32, y as u32)[ch]))
    };
    if factor > 1 {
        downscale(&t, factor)
    } else {
        Ok(t)
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_files(paths: &[PathBuf], side: usize, channels: usize, report: &mut DatasetReport) -> Result<Vec<Tensor<f32>>> {
    let mut items = Vec::with_capacity(paths.len());
    for p in paths {
        match image::open(p) {
            Ok(img) => {
                items.push(prepare_image(&img, side, channels)?);
                report.loaded += 1;
            }
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                report.skipped.push(p.clone());
            }
        }
    }
    Ok(items)
}

/// Loads every `.png` in `dir` (sorted by name). Undecodable files are
/// skipped with a warning; an empty result is an error.
pub fn load_dataset(dir: &Path, side: usize, channels: usize) -> Result<(Tensor<f32>, DatasetReport)> {
    let mut report = DatasetReport { loaded: 0, skipped: Vec::new() };
    let items = load_files(&png_files(dir)?, side, channels, &mut report)?;
    if items.is_empty() {
        return Err(Error::Empty(format!("no readable PNG images in {}", dir.display())));
    }
    Ok((Tensor::concat(&items)?, report))
}

/// Images with class labels.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Class names, indexed by label.
    pub classes: Vec<String>,
    pub report: DatasetReport,
}

/// Loads `dir/<class>/*.png`, one label per subdirectory in name order.
/// A directory without subdirectories is a single unnamed class.
pub fn load_labeled(dir: &Path, side: usize, channels: usize) -> Result<LabeledImages> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", dir.display())))?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    if subdirs.is_empty() {
        let (images, report) = load_dataset(dir, side, channels)?;
        let n = images.shape().n;
        return Ok(LabeledImages { images, labels: vec![0; n], classes: vec![String::new()], report });
    }
    let mut report = DatasetReport { loaded: 0, skipped: Vec::new() };
    let (mut items, mut labels, mut classes) = (Vec::new(), Vec::new(), Vec::new());
    for (label, sub) in subdirs.iter().enumerate() {
        let loaded = load_files(&png_files(sub)?, side, channels, &mut report)?;
        labels.extend(std::iter::repeat_n(label, loaded.len()));
        items.extend(loaded);
        classes.push(sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    if items.is_empty() {
        return Err(Error::Empty(format!("no readable PNG images under {}", dir.display())));
    }
    Ok(LabeledImages { images: Tensor::concat(&items)?, labels, classes, report })
}

/// `index,label,class` rows.
pub fn labels_csv(labels: &[usize], classes: &[String]) -> String {
    let mut out = String::from("index,label,class\n");
    for (i, &l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l},{}\n", classes.get(l).map_or("", |c| c.as_str())));
    }
    out
}

/// Writes item `i` of `t` (1 or 3 channels) as a PNG.
pub fn save_png(t: &Tensor<f32>, i: usize, path: &Path) -> Result<()> {
    save_grid(&t.item_tensor(i), 1, path)
}

/// Tiles every item of `t` into a grid with `cols` columns and a 1-pixel
/// gap, and writes it as a PNG.
pub fn save_grid(t: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n == 0 || (s.c != 1 && s.c != 3) {
        return Err(Error::dim(format!("cannot write {s} as an image grid")));
    }
    let cols = cols.clamp(1, s.n);
    let rows = s.n.div_ceil(cols);
    let (gw, gh) = ((cols * (s.w + 1) - 1) as u32, (rows * (s.h + 1) - 1) as u32);
    let pixel = |n: usize, c: usize, y: usize, x: usize| to_byte(t.at(n, c, y, x));
    let place = |n: usize| ((n % cols) * (s.w + 1), (n / cols) * (s.h + 1));
    let result = if s.c == 1 {
        let mut img: GrayImage = ImageBuffer::from_pixel(gw, gh, Luma([255]));
        for n in 0..s.n {
            let (ox, oy) = place(n);
            for y in 0..s.h {
                for x in 0..s.w {
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([pixel(n, 0, y, x)]));
                }
            }
        }
        img.save(path)
    } else {
        let mut img: RgbImage = ImageBuffer::from_pixel(gw, gh, Rgb([255, 255, 255]));
        for n in 0..s.n {
            let (ox, oy) = place(n);
            for y in 0..s.h {
                for x in 0..s.w {
                    let p = Rgb([pixel(n, 0, y, x), pixel(n, 1, y, x), pixel(n, 2, y, x)]);
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, p);
                }
            }
        }
        img.save(path)
    };
    result.map_err(|e| image_err(path, e))
}

/// Reads a mask PNG: pixels brighter than mid-gray are missing. The image
/// is resized to `side` with nearest-neighbour sampling if needed.
pub fn load_mask(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let img = if img.width() as usize != side || img.height() as usize != side {
        imageops::resize(&img, side as u32, side as u32, FilterType::Nearest)
    } else {
        img
    };
    Ok(Tensor::from_fn(Shape::new(1, 1, side, side), |_, _, y, x| {
        if img.get_pixel(x as u32, y as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Writes a mask as a black-and-white PNG (white = missing).
pub fn save_mask(mask: &Tensor<f32>, i: usize, path: &Path) -> Result<()> {
    let s = mask.shape();
    let img: GrayImage = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([if mask.at(i, 0, y as usize, x as usize) != 0.0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub const TENSOR_MAGIC: &[u8; 4] = b"MGTN";

/// Raw tensor file: magic `MGTN`, four little-endian `u64` dimensions
/// (N, C, H, W), then the `f32` values.
pub fn save_tensor(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let mut out = Vec::with_capacity(36 + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 36 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("{} is not a tensor file", path.display())));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let body = &bytes[36..];
    if body.len() != shape.len() * 4 {
        return Err(Error::Format(format!("tensor file holds {} bytes, shape {shape} needs {}", body.len(), shape.len() * 4)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_map_endpoints() {
        assert_eq!(to_unit(255), 1.0);
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(7.0), 255);
        for v in 0..=255u8 {
            assert_eq!(to_byte(to_unit(v)), v);
        }
    }

    #[test]
    fn integer_ratio_uses_block_average() {
        // 4x4 gray image, target 2: each output is the mean of a 2x2 block.
        let img = GrayImage::from_fn(4, 4, |x, y| Luma([((y * 4 + x) * 10) as u8]));
        let t = prepare_image(&DynamicImage::ImageLuma8(img), 2, 1).unwrap();
        let block = |vals: [u8; 4]| vals.iter().map(|&v| to_unit(v)).sum::<f32>() / 4.0;
        assert!((t.at(0, 0, 0, 0) - block([0, 10, 40, 50])).abs() < 1e-6);
        assert!((t.at(0, 0, 1, 1) - block([100, 110, 140, 150])).abs() < 1e-6);
    }

    #[test]
    fn center_crop_of_wide_image() {
        // 6x2 image whose middle 2x2 is white.
        let img = GrayImage::from_fn(6, 2, |x, _| Luma([if (2..4).contains(&x) { 255 } else { 0 }]));
        let t = prepare_image(&DynamicImage::ImageLuma8(img), 2, 1).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }
}
