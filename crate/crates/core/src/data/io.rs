//! PNG images, raw float grids and airlight sidecars.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::fogmodel::{AtmosphericLight, ImageTensor, RangeTag};
use crate::tensor::{Real, Shape, Tensor};

/// Magic prefix of the raw float grid format.
pub const DPTH_MAGIC: &[u8; 4] = b"DPTH";
const DPTH_HEADER: usize = 16;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes any 8- or 16-bit image as unit-range RGB; alpha is dropped and
/// gray is replicated.
pub fn load_image(path: &Path) -> Result<ImageTensor<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    image_to_tensor(img).map_err(|e| match e {
        Error::Shape(reason) => format_err(path, reason),
        other => other,
    })
}

fn image_to_tensor(img: DynamicImage) -> Result<ImageTensor<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            planar(img.to_rgb8().as_raw(), h, w, |v: u8| v as f64 / 255.0)
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            planar(img.to_rgb16().as_raw(), h, w, |v: u16| v as f64 / 65535.0)
        }
        _ => planar(img.to_rgb32f().as_raw(), h, w, |v: f32| v as f64),
    };
    ImageTensor::new(Tensor::from_vec(Shape::new(3, h, w), data)?, RangeTag::Unit)
}

/// Interleaved RGB samples to channel-major planes.
fn planar<P: Copy>(raw: &[P], h: usize, w: usize, f: impl Fn(P) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            out[c * h * w + i] = f(raw[i * 3 + c]);
        }
    }
    out
}

/// `round(v·255)` of a unit-range value.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG from an image in either range.
pub fn save_png<T: Real>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    let unit = image.to_unit();
    let p = unit.pixels();
    let (h, w) = (p.height(), p.width());
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| quantize8(p.at(c, y as usize, x as usize).as_f64())))
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resize of a unit-range image.
pub fn resize_bilinear(image: &ImageTensor<f64>, h: usize, w: usize) -> Result<ImageTensor<f64>> {
    if image.height() == h && image.width() == w {
        return Ok(image.clone());
    }
    let p = image.to_unit();
    let px = p.pixels();
    let (ih, iw) = (px.height(), px.width());
    let buf = ImageBuffer::<Rgb<f32>, _>::from_fn(iw as u32, ih as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| px.at(c, y as usize, x as usize) as f32))
    });
    let out = image::imageops::resize(&buf, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let data = planar(out.as_raw(), h, w, |v: f32| v as f64);
    ImageTensor::new(Tensor::from_vec(Shape::new(3, h, w), data)?, RangeTag::Unit)
}

/// Writes a single-channel grid: `DPTH`, u32 height, u32 width, u32 zero,
/// then little-endian f32 values in row-major order.
pub fn write_dpth(path: &Path, grid: &Tensor<f64>) -> Result<()> {
    if grid.channels() != 1 {
        return Err(Error::Shape(format!("grid must be single-channel, got {}", grid.shape())));
    }
    let mut bytes = Vec::with_capacity(DPTH_HEADER + 4 * grid.len());
    bytes.extend_from_slice(DPTH_MAGIC);
    bytes.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_dpth(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DPTH_HEADER || &bytes[..4] != DPTH_MAGIC {
        return Err(format_err(path, "missing DPTH header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    if word(12) != 0 {
        return Err(format_err(path, "reserved header word must be zero"));
    }
    let expect = DPTH_HEADER + 4 * h * w;
    if bytes.len() != expect {
        return Err(format_err(path, format!("expected {expect} bytes for {h}x{w}, found {}", bytes.len())));
    }
    let data = bytes[DPTH_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(Shape::new(1, h, w), data)
}

/// Depth grid from a DPTH file or, for `.png`, the first channel of a
/// single-channel image mapped linearly to `[0, 1]`.
pub fn read_depth(path: &Path) -> Result<Tensor<f64>> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return read_dpth(path);
    }
    let img = load_image(path)?;
    let p = img.pixels();
    Tensor::from_vec(Shape::new(1, p.height(), p.width()), p.channel(0).to_vec())
}

/// Three whitespace-separated values on one line.
pub fn write_airlight(path: &Path, a: &AtmosphericLight) -> Result<()> {
    let [r, g, b] = a.rgb;
    write_atomic(path, format!("{r:?} {g:?} {b:?}\n").as_bytes())
}

pub fn read_airlight(path: &Path) -> Result<AtmosphericLight> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format_err(path, format!("{t:?}: {e}"))))
        .collect::<Result<_>>()?;
    let rgb: [f64; 3] = vals
        .try_into()
        .map_err(|v: Vec<f64>| format_err(path, format!("expected 3 values, found {}", v.len())))?;
    AtmosphericLight::new(rgb).map_err(|e| format_err(path, e.to_string()))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_unit_fn(9, 12, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f64 / 255.0).unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_and_gray_inputs_decode() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("b.png");
        ImageBuffer::<Rgb<u16>, _>::from_fn(8, 8, |x, _| Rgb([x as u16 * 8000, 65535, 0])).save(&p16).unwrap();
        let img = load_image(&p16).unwrap();
        assert_eq!(img.pixels().at(1, 3, 3), 1.0);
        assert_eq!(img.pixels().at(0, 0, 2), 16000.0 / 65535.0);
        let pg = dir.path().join("g.png");
        image::GrayImage::from_pixel(8, 8, image::Luma([51])).save(&pg).unwrap();
        let g = load_image(&pg).unwrap();
        assert!((0..3).all(|c| g.pixels().at(c, 2, 2) == 0.2));
    }

    #[test]
    fn resize_hits_requested_size() {
        let img = ImageTensor::from_unit_fn(48, 64, |c, y, x| (c + y + x) as f64 / 120.0).unwrap();
        let r = resize_bilinear(&img, 32, 32).unwrap();
        assert_eq!((r.height(), r.width()), (32, 32));
        let up = resize_bilinear(&img, 80, 96).unwrap();
        assert_eq!((up.height(), up.width()), (80, 96));
    }

    #[test]
    fn dpth_and_airlight_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Tensor::from_fn(Shape::new(1, 5, 7), |_, y, x| (y * 7 + x) as f64 * 0.125);
        let p = dir.path().join("t.dpth");
        write_dpth(&p, &grid).unwrap();
        assert_eq!(read_dpth(&p).unwrap(), grid);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dpth(&p), Err(Error::Format { .. })));

        let a = AtmosphericLight::new([0.7123456789, 0.8, 0.99]).unwrap();
        let pa = dir.path().join("a.txt");
        write_airlight(&pa, &a).unwrap();
        assert_eq!(read_airlight(&pa).unwrap(), a);
        fs::write(&pa, "0.1 0.2").unwrap();
        assert!(read_airlight(&pa).is_err());
    }
}
