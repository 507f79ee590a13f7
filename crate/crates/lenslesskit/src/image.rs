//! Image tensors and PNG import/export.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An H x W x C real image. Values are expected in `[0, 1]` for images proper;
/// intermediates produced by the forward model may leave that range.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Validates shape and finiteness.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("channel count {c} not in {{1, 3}}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(ImageTensor { data })
    }

    /// For internally produced values whose invariants are known to hold.
    pub(crate) fn from_valid(data: Array3<f32>) -> Self {
        ImageTensor { data }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Channel-first copy `[C, H, W]` in the requested precision.
    pub fn to_chw<T: Scalar>(&self) -> ArrayD<T> {
        let (h, w, c) = self.data.dim();
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
            T::cast(self.data[[ix[1], ix[2], ix[0]]] as f64)
        })
    }

    /// Inverse of [`Self::to_chw`].
    pub fn from_chw<T: Scalar>(chw: &ArrayD<T>) -> Result<Self> {
        let s = chw.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected CHW tensor, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| chw[[k, i, j]].as_f64() as f32);
        ImageTensor::new(data)
    }

    pub fn clip01(&self) -> ImageTensor {
        ImageTensor::from_valid(self.data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Area-average resample to `new_h x new_w`.
    pub fn resize_area(&self, new_h: usize, new_w: usize) -> ImageTensor {
        let (h, w, c) = self.data.dim();
        if (h, w) == (new_h, new_w) {
            return self.clone();
        }
        let mut out = Array3::<f32>::zeros((new_h, new_w, c));
        let sy = h as f64 / new_h as f64;
        let sx = w as f64 / new_w as f64;
        for oi in 0..new_h {
            let y0 = oi as f64 * sy;
            let y1 = (oi as f64 + 1.0) * sy;
            for oj in 0..new_w {
                let x0 = oj as f64 * sx;
                let x1 = (oj as f64 + 1.0) * sx;
                let mut acc = vec![0.0f64; c];
                let mut area = 0.0f64;
                let iy0 = y0.floor() as usize;
                let iy1 = (y1.ceil() as usize).min(h);
                let ix0 = x0.floor() as usize;
                let ix1 = (x1.ceil() as usize).min(w);
                for iy in iy0..iy1 {
                    let cov_y = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                    for ix in ix0..ix1 {
                        let cov = cov_y * (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                        if cov > 0.0 {
                            area += cov;
                            for (k, a) in acc.iter_mut().enumerate() {
                                *a += cov * self.data[[iy, ix, k]] as f64;
                            }
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    out[[oi, oj, k]] = (*a / area.max(f64::MIN_POSITIVE)) as f32;
                }
            }
        }
        ImageTensor::from_valid(out)
    }

    /// Center crop to `ch x cw`.
    pub fn center_crop(&self, ch: usize, cw: usize) -> Result<ImageTensor> {
        let (h, w, c) = self.data.dim();
        if ch > h || cw > w {
            return Err(Error::Shape(format!(
                "crop {ch}x{cw} larger than image {h}x{w}"
            )));
        }
        let (r0, c0) = ((h - ch) / 2, (w - cw) / 2);
        let mut out = Array3::<f32>::zeros((ch, cw, c));
        for i in 0..ch {
            for j in 0..cw {
                for k in 0..c {
                    out[[i, j, k]] = self.data[[r0 + i, c0 + j, k]];
                }
            }
        }
        Ok(ImageTensor::from_valid(out))
    }

    /// Standard ingestion policy: area-downsample the short side to `res`
    /// (preserving aspect), then center-crop the long side.
    pub fn to_resolution(&self, res: usize) -> Result<ImageTensor> {
        let (h, w, _) = self.data.dim();
        let (nh, nw) = if h <= w {
            (res, ((w as f64 * res as f64 / h as f64).round() as usize).max(res))
        } else {
            (((h as f64 * res as f64 / w as f64).round() as usize).max(res), res)
        };
        self.resize_area(nh, nw).center_crop(res, res)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Sidecar metadata stored next to every exported PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub dtype: String,
    pub range: [f32; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = Array3::from_shape_fn((h, w, 3), |(i, j, k)| rgb.get_pixel(j as u32, i as u32)[k]);
    ImageTensor::new(data.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Write a PNG at the requested bit depth plus its JSON sidecar. Values are
/// clipped to `[0, 1]` on export.
pub fn save_png(img: &ImageTensor, path: &Path, depth: PngDepth, seed: Option<u64>) -> Result<()> {
    let clipped = img.clip01();
    let (h, w, c) = clipped.data().dim();
    let take = |i: usize, j: usize, k: usize| clipped.data()[[i, j, if c == 1 { 0 } else { k }]];
    match depth {
        PngDepth::Eight => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for i in 0..h {
                for j in 0..w {
                    let px = [0, 1, 2].map(|k| (take(i, j, k) * 255.0).round() as u8);
                    buf.put_pixel(j as u32, i as u32, image::Rgb(px));
                }
            }
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::ImageDecode {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
        }
        PngDepth::Sixteen => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
            for i in 0..h {
                for j in 0..w {
                    let px = [0, 1, 2].map(|k| (take(i, j, k) * 65535.0).round() as u16);
                    buf.put_pixel(j as u32, i as u32, image::Rgb(px));
                }
            }
            image::DynamicImage::ImageRgb16(buf)
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::ImageDecode {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
        }
    }
    let sidecar = ImageSidecar {
        dtype: match depth {
            PngDepth::Eight => "u8".into(),
            PngDepth::Sixteen => "u16".into(),
        },
        range: [0.0, 1.0],
        seed,
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )
    .map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

/// Compose images into a single row-major contact sheet with a margin.
pub fn contact_sheet(rows: &[Vec<&ImageTensor>], cell: usize) -> Result<ImageTensor> {
    let nrows = rows.len();
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(Error::InvalidArgument("empty contact sheet".into()));
    }
    let margin = 2usize;
    let (sh, sw) = (
        nrows * cell + (nrows + 1) * margin,
        ncols * cell + (ncols + 1) * margin,
    );
    let mut sheet = Array3::<f32>::from_elem((sh, sw, 3), 0.08);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let tile = img.resize_area(cell, cell);
            let (r0, c0) = (margin + ri * (cell + margin), margin + ci * (cell + margin));
            for i in 0..cell {
                for j in 0..cell {
                    for k in 0..3 {
                        let v = tile.data()[[i, j, if img.channels() == 1 { 0 } else { k }]];
                        sheet[[r0 + i, c0 + j, k]] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(ImageTensor::from_valid(sheet))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_count() {
        let data = Array3::<f32>::zeros((4, 4, 2));
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn resize_preserves_mean() {
        let data = Array3::from_shape_fn((8, 8, 3), |(i, j, _)| ((i * 8 + j) as f32) / 64.0);
        let img = ImageTensor::new(data).unwrap();
        let small = img.resize_area(4, 4);
        assert!((img.mean() - small.mean()).abs() < 1e-6);
    }

    #[test]
    fn resize_idempotent_at_target() {
        let data = Array3::from_shape_fn((6, 6, 1), |(i, j, _)| (i + j) as f32 / 12.0);
        let img = ImageTensor::new(data).unwrap();
        let same = img.resize_area(6, 6);
        assert_eq!(img.data(), same.data());
    }

    #[test]
    fn chw_roundtrip() {
        let data = Array3::from_shape_fn((3, 5, 3), |(i, j, k)| (i + 2 * j + 3 * k) as f32 / 40.0);
        let img = ImageTensor::new(data).unwrap();
        let chw = img.to_chw::<f64>();
        assert_eq!(chw.shape(), &[3, 3, 5]);
        let back = ImageTensor::from_chw(&chw).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
