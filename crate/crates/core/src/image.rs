//! The dense image type and PNG/TIFF I/O.

use std::path::Path;

use haze_tensor::{DType, Tensor};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// `height x width x channels` intensities, row-major with interleaved
/// channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        ImageTensor::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidImage(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        ImageTensor::new(height, width, c, data)
    }

    /// Rotate counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (h, w, c) = self.dims();
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => ImageTensor::from_fn(w, h, c, |y, x, ch| self.get(x, w - 1 - y, ch)).unwrap(),
            2 => ImageTensor::from_fn(h, w, c, |y, x, ch| self.get(h - 1 - y, w - 1 - x, ch)).unwrap(),
            _ => ImageTensor::from_fn(w, h, c, |y, x, ch| self.get(h - 1 - x, y, ch)).unwrap(),
        }
    }

    /// Upload as a `[height, width, channels]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::from_f32_as(self.data.clone(), &[self.height, self.width, self.channels], dtype)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => ImageTensor::new(h, w, c, t.to_vec_f32()),
            ref s => Err(Error::Shape(format!("expected [H, W, C] tensor, got {s:?}"))),
        }
    }

    /// Loads an 8- or 16-bit PNG/TIFF, mapping intensities linearly onto
    /// `[0, 1]`. Alpha is dropped; gray images load with one channel.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, data): (usize, Vec<f32>) = match &img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
                (1, img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
            }
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => (
                1,
                img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            ),
            DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
                (3, img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
            }
            DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => (
                3,
                img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            ),
            _ => (3, img.to_rgb32f().into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect()),
        };
        let out = ImageTensor::new(h, w, channels, data).map_err(|e| Error::format(path, e))?;
        if !out.is_finite() {
            return Err(Error::format(path, "non-finite pixel values"));
        }
        Ok(out)
    }

    /// Writes PNG or TIFF (by extension). Values are clamped to `[0, 1]`
    /// and quantized with round-half-to-even.
    pub fn save(&self, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
        let path = path.as_ref();
        let format = ImageFormat::from_path(path).map_err(|e| Error::format(path, e))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Tiff) {
            return Err(Error::format(path, "only PNG and TIFF output is supported"));
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let result = match (depth, self.channels) {
            (BitDepth::Eight, 1) => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, quantize(&self.data, 255.0))
                .expect("buffer size")
                .save_with_format(path, format),
            (BitDepth::Eight, _) => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, quantize(&self.data, 255.0))
                .expect("buffer size")
                .save_with_format(path, format),
            (BitDepth::Sixteen, 1) => {
                ImageBuffer::<Luma<u16>, _>::from_raw(w, h, quantize(&self.data, 65535.0))
                    .expect("buffer size")
                    .save_with_format(path, format)
            }
            (BitDepth::Sixteen, _) => {
                ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, quantize(&self.data, 65535.0))
                    .expect("buffer size")
                    .save_with_format(path, format)
            }
        };
        result.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })
    }
}

fn quantize<T: TryFrom<u32>>(values: &[f32], max: f32) -> Vec<T>
where
    T::Error: std::fmt::Debug,
{
    values
        .iter()
        .map(|&v| {
            let q = (v.clamp(0.0, 1.0) * max).round_ties_even() as u32;
            T::try_from(q).expect("quantized value in range")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |y, x, ch| ((y * 7 + x * 3 + ch * 11) % 256) as f32 / 255.0).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new(0, 4, 3, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn eight_and_sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(5, 7, 3);
        for (name, depth) in [
            ("a.png", BitDepth::Eight),
            ("b.png", BitDepth::Sixteen),
            ("c.tif", BitDepth::Eight),
            ("d.tiff", BitDepth::Sixteen),
        ] {
            let p = dir.path().join(name);
            img.save(&p, depth).unwrap();
            let back = ImageTensor::load(&p).unwrap();
            assert_eq!(back.dims(), img.dims());
            // Values on the 8-bit grid survive both depths exactly.
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6, "{name}: {a} vs {b}");
            }
        }
        let gray = ramp(3, 4, 1);
        let p = dir.path().join("g.png");
        gray.save(&p, BitDepth::Sixteen).unwrap();
        assert_eq!(ImageTensor::load(&p).unwrap().channels(), 1);
    }

    #[test]
    fn quantization_rounds_half_to_even() {
        let q: Vec<u8> = quantize(&[0.125, 0.375, 0.625, 1.2, -0.1], 4.0);
        assert_eq!(q, vec![0, 2, 2, 4, 0]);
    }

    #[test]
    fn rotation_composes() {
        let img = ramp(3, 5, 3);
        let r1 = img.rotate90(1);
        assert_eq!(r1.dims(), (5, 3, 3));
        assert_eq!(r1.rotate90(3), img);
        assert_eq!(img.rotate90(2).rotate90(2), img);
        assert_eq!(img.rotate90(1).rotate90(1), img.rotate90(2));
    }
}
