//! Minimal float image containers and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "RGB image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample at continuous image coordinates `(u, v)`; texel
    /// `(i, j)` is centered at `(i + 0.5, j + 0.5)` and lookups outside the
    /// image clamp to the border texels.
    pub fn bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        std::array::from_fn(|k| {
            (1.0 - ty) * ((1.0 - tx) * a[k] + tx * b[k]) + ty * ((1.0 - tx) * c[k] + tx * d[k])
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads a PNG as RGB plus its alpha channel when the file has one.
pub fn load_png(path: impl AsRef<Path>) -> Result<(RgbImage, Option<Vec<u8>>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for p in rgba.pixels() {
        data.extend(p.0[..3].iter().map(|v| *v as f64 / 255.0));
        alpha.push(p.0[3]);
    }
    Ok((RgbImage { width: w, height: h, data }, has_alpha.then_some(alpha)))
}

/// Loads a PNG as 8-bit grayscale.
pub fn load_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

fn save(path: &Path, buf: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    image::save_buffer(path, buf, w as u32, h as u32, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_png_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    save(path.as_ref(), &buf, img.width, img.height, image::ExtendedColorType::Rgb8)
}

/// RGB plus an 8-bit alpha channel.
pub fn save_png_rgba(img: &RgbImage, alpha: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if alpha.len() != img.width * img.height {
        return Err(Error::ShapeMismatch("alpha channel size".into()));
    }
    let mut buf = Vec::with_capacity(alpha.len() * 4);
    for (px, a) in img.data.chunks_exact(3).zip(alpha) {
        buf.extend(px.iter().map(|v| to_u8(*v)));
        buf.push(*a);
    }
    save(path.as_ref(), &buf, img.width, img.height, image::ExtendedColorType::Rgba8)
}

/// Single-channel PNG from values in `[0, 1]`.
pub fn save_png_gray(values: &[f64], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch("gray image size".into()));
    }
    let buf: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    save(path.as_ref(), &buf, width, height, image::ExtendedColorType::L8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_half_texel() {
        // black texel at x=0, white at x=1
        let img = RgbImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(img.bilinear(1.0, 0.5), [0.5; 3]);
        assert_eq!(img.bilinear(0.5, 0.5), [0.0; 3]);
        // clamped beyond the border
        assert_eq!(img.bilinear(-3.0, 9.0), [0.0; 3]);
        assert_eq!(img.bilinear(7.0, 0.2), [1.0; 3]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = RgbImage::new(3, 2, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let alpha = vec![0, 255, 128, 0, 0, 255];
        save_png_rgba(&img, &alpha, &p).unwrap();
        let (back, a) = load_png(&p).unwrap();
        assert_eq!(a.unwrap(), alpha);
        for (x, y) in back.data.iter().zip(&img.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
        save_png_rgb(&img, &p).unwrap();
        assert!(load_png(&p).unwrap().1.is_none());
    }
}
