//! PNG rasters and the on-disk dataset layout `<root>/{A,B,label,hardness}/NNNNN.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use hsonet_core::raster::{Grid, HardnessMap, HardnessTag, ImagePair, LabeledPair, Mask, RgbImage};

use crate::error::{Error, Result};

/// Label pixels at or above this 8-bit value count as changed.
pub const LABEL_THRESHOLD: u8 = 128;

pub const DIR_T1: &str = "A";
pub const DIR_T2: &str = "B";
pub const DIR_LABEL: &str = "label";
pub const DIR_HARDNESS: &str = "hardness";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::load(path, "file not found"));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn save_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    GrayImage::from_raw(width as u32, height as u32, data)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w, h, px)?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| image_err(path, e))
}

fn read_gray(path: &Path) -> Result<Grid<u8>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_vec(w, h, img.into_raw())?)
}

/// 8-bit mask binarized at [`LABEL_THRESHOLD`] into `{0, 1}`.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.map(|v| u8::from(v >= LABEL_THRESHOLD)))
}

/// Writes a `{0, 1}` mask as an 8-bit `{0, 255}` PNG.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.pixels().iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    save_gray(path, mask.width(), mask.height(), data)
}

pub fn read_hardness(path: &Path) -> Result<HardnessMap> {
    let codes = read_gray(path)?;
    let mut out = Vec::with_capacity(codes.pixels().len());
    for &c in codes.pixels() {
        out.push(HardnessTag::from_code(c).ok_or_else(|| Error::load(path, format!("unknown hardness code {c}")))?);
    }
    Ok(Grid::from_vec(codes.width(), codes.height(), out)?)
}

/// Hardness tags stored as their 8-bit codes.
pub fn write_hardness(path: &Path, tags: &HardnessMap) -> Result<()> {
    let data = tags.pixels().iter().map(|t| t.code()).collect();
    save_gray(path, tags.width(), tags.height(), data)
}

/// Quantizes probabilities in `[0, 1]` to 16 bits.
pub fn quantize_prob(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_prob16(path: &Path, probs: &Grid<f64>) -> Result<()> {
    ensure_parent(path)?;
    let data = probs.pixels().iter().map(|&p| quantize_prob(p)).collect();
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(probs.width() as u32, probs.height() as u32, data)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn read_prob16(path: &Path) -> Result<Grid<f64>> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Ok(Grid::from_vec(w, h, px)?)
}

/// Labeled pairs in filename order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub pairs: Vec<LabeledPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads `<root>/A`, `<root>/B` and `<root>/label`, plus `<root>/hardness`
/// when that directory exists. A root without an `A` directory, or with an
/// empty one, yields an empty dataset.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::load(root, "dataset directory not found"));
    }
    let dir_a = root.join(DIR_T1);
    if !dir_a.is_dir() {
        return Ok(Dataset::default());
    }
    let names = png_names(&dir_a)?;
    let hardness_dir = root.join(DIR_HARDNESS);
    let with_hardness = hardness_dir.is_dir();
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let counterpart = |dir: &str| -> Result<PathBuf> {
            let p = root.join(dir).join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::load(&p, format!("missing counterpart of {}", dir_a.join(name).display())))
            }
        };
        let t1 = read_rgb(&dir_a.join(name))?;
        let b_path = counterpart(DIR_T2)?;
        let t2 = read_rgb(&b_path)?;
        let label_path = counterpart(DIR_LABEL)?;
        let mask = read_mask(&label_path)?;
        let (w, h) = t1.dims();
        let check = |path: &Path, dims: (usize, usize)| -> Result<()> {
            if dims != (w, h) {
                return Err(Error::load(
                    path,
                    format!("size {}x{} differs from {w}x{h} of {}", dims.0, dims.1, dir_a.join(name).display()),
                ));
            }
            Ok(())
        };
        check(&b_path, t2.dims())?;
        check(&label_path, mask.dims())?;
        let pair = ImagePair::new(t1, t2)?;
        let lp = if with_hardness {
            let hp = counterpart(DIR_HARDNESS)?;
            let tags = read_hardness(&hp)?;
            check(&hp, tags.dims())?;
            LabeledPair::new(pair, mask, tags)?
        } else {
            LabeledPair::untagged(pair, mask)?
        };
        pairs.push(lp);
    }
    Ok(Dataset { names, pairs })
}

/// File name of the `index`-th sample.
pub fn sample_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes one labeled pair under `root` with the given file name.
pub fn write_sample(root: &Path, name: &str, lp: &LabeledPair) -> Result<()> {
    write_rgb(&root.join(DIR_T1).join(name), &lp.pair.t1)?;
    write_rgb(&root.join(DIR_T2).join(name), &lp.pair.t2)?;
    write_mask(&root.join(DIR_LABEL).join(name), &lp.mask)?;
    write_hardness(&root.join(DIR_HARDNESS).join(name), &lp.hardness)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_quantization_bound() {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            assert!((quantize_prob(p) as f64 / 65535.0 - p).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn empty_root_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder(dir.path()).unwrap().is_empty());
        fs::create_dir(dir.path().join(DIR_T1)).unwrap();
        assert!(load_folder(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_folder(&dir.path().join("nope")).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
