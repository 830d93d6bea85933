use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::synth::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// `[0, 1]` to 8-bit, rounding to nearest.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(t: &Tensor<f64>, channels: usize, path: &Path) -> Result<(u32, u32)> {
    let s = t.shape();
    let ok = (s.len() == 2 && channels == 1) || (s.len() == 3 && s[2] == channels);
    if !ok {
        return Err(image_err(path, format!("tensor {s:?} is not a {channels}-channel image")));
    }
    let conv = |v: usize| u32::try_from(v).map_err(|e| image_err(path, e));
    Ok((conv(s[1])?, conv(s[0])?))
}

fn write_pnm(path: &Path, t: &Tensor<f64>, rgb: bool) -> Result<()> {
    let (w, h) = dims(t, if rgb { 3 } else { 1 }, path)?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(&bytes, w, h, color)
        .map_err(|e| image_err(path, e))?;
    fs::write(path, buf)?;
    Ok(())
}

/// Binary PGM (P5) of a `[H, W]` or `[H, W, 1]` map in `[0, 1]`.
pub fn write_gray(path: &Path, t: &Tensor<f64>) -> Result<()> {
    write_pnm(path, t, false)
}

/// Binary PPM (P6) of a `[H, W, 3]` image in `[0, 1]`.
pub fn write_rgb(path: &Path, t: &Tensor<f64>) -> Result<()> {
    write_pnm(path, t, true)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| image_err(path, e))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Gray image as `[H, W]` values `k/255`.
pub fn read_gray(path: &Path) -> Result<Tensor<f64>> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Groundtruth masks are binarized at mid-gray.
pub fn read_mask(path: &Path) -> Result<Tensor<f64>> {
    Ok(read_gray(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub const INDEX_FILE: &str = "index.txt";

pub fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    [
        root.join(format!("{id}_rgb.ppm")),
        root.join(format!("{id}_depth.pgm")),
        root.join(format!("{id}_gt.pgm")),
    ]
}

/// Writes `<root>/index.txt` and `<id>_{rgb,depth,gt}` images.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut index = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(char::is_whitespace) || s.id.contains(['/', '\\']) {
            return Err(Error::Dataset(format!("unusable sample id {:?}", s.id)));
        }
        let [rgb, depth, gt] = sample_paths(root, &s.id);
        write_rgb(&rgb, &s.rgb)?;
        write_gray(&depth, &s.depth)?;
        write_gray(&gt, &s.gt)?;
        index.push_str(&s.id);
        index.push('\n');
    }
    fs::write(root.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn read_index(root: &Path) -> Result<Vec<String>> {
    let path = root.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Dataset(format!("{} lists no samples", path.display())));
    }
    Ok(ids)
}

pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    read_index(root)?
        .into_iter()
        .map(|id| {
            let [rgb, depth, gt] = sample_paths(root, &id);
            let rgb = read_rgb(&rgb)?;
            let d = read_gray(&depth)?;
            let (h, w) = (d.shape()[0], d.shape()[1]);
            let depth = d.reshape(&[h, w, 1])?;
            Sample::new(id, rgb, depth, read_mask(&gt)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth_dataset;

    #[test]
    fn dataset_round_trip_is_quantized_copy() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(1, 2, 16).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.gt, b.gt);
            assert!(a.rgb.max_abs_diff(&b.rgb) <= 0.5 / 255.0 + 1e-12);
            assert!(a.depth.max_abs_diff(&b.depth) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_bytes_are_plain_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_gray(&p, &Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
    }
}
