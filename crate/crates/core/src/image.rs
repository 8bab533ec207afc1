use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::nn::resample::resize_planar;

/// A 3-channel planar image with every value finite and in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Wraps a `[3, H, W]` tensor after checking the value invariants.
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != Self::CHANNELS {
            return Err(Error::InvalidImage(format!(
                "expected [3, H, W], got {dims:?}"
            )));
        }
        let data = data.to_dtype(DType::F32)?.to_device(&Device::Cpu)?;
        let values = data.flatten_all()?.to_vec1::<f32>()?;
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn from_vec(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if values.len() != Self::CHANNELS * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a 3x{height}x{width} image",
                values.len()
            )));
        }
        Self::new(Tensor::from_vec(values, (Self::CHANNELS, height, width), &Device::Cpu)?)
    }

    pub fn constant(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::from_vec(vec![value; Self::CHANNELS * height * width], height, width)
    }

    /// Clamps a `[3, H, W]` tensor into range and wraps it.
    pub fn from_clamped(data: &Tensor) -> Result<Self> {
        Self::new(data.to_dtype(DType::F32)?.clamp(0f32, 1f32)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `[1, 3, H, W]` in the requested dtype.
    pub fn batch(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?.to_dtype(dtype)?)
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (Self::CHANNELS, self.height(), self.width())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data
            .flatten_all()
            .and_then(|t| t.to_vec1::<f32>())
            .expect("validated f32 cpu tensor")
    }

    /// Decodes a PNG/JPEG file; 8-bit samples divide by 255, 16-bit by 65535.
    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::DecodeError {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut planar = vec![0f32; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                planar[c * h * w + y as usize * w + x as usize] = px.0[c].clamp(0.0, 1.0);
            }
        }
        Self::from_vec(planar, h, w)
    }

    /// Decodes and bilinearly resizes to `size × size`.
    pub fn load_resized(path: &Path, size: usize) -> Result<Self> {
        Self::load(path)?.resized(size, size)
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let out = resize_planar(&self.to_vec(), 3, self.height(), self.width(), height, width);
        // Bilinear weights are convex, so only rounding can leave [0, 1].
        let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::from_vec(out, height, width)
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let (h, w) = (self.height(), self.width());
        let v = self.to_vec();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let idx = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|c| (v[c * h * w + idx] * 255.0).round() as u8))
        })
    }

    /// Writes an 8-bit PNG (format chosen by extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::InvalidImage(other.to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_wrong_channels() {
        assert!(ImageTensor::from_vec(vec![1.5; 12], 2, 2).is_err());
        assert!(ImageTensor::from_vec(vec![f32::NAN; 12], 2, 2).is_err());
        let t = Tensor::zeros((1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(ImageTensor::new(t).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let vals: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4 % 256) as f32 / 255.0).collect();
        let img = ImageTensor::from_vec(vals.clone(), 4, 5).unwrap();
        img.save(&p).unwrap();
        let back = ImageTensor::load(&p).unwrap();
        assert_eq!(back.dims(), (3, 4, 5));
        for (a, b) in vals.iter().zip(back.to_vec()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn sixteen_bit_input_stays_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_fn(6, 3, |x, y| Rgb([65535, (x * 1000) as u16, (y * 20000) as u16]));
        buf.save(&p).unwrap();
        let img = ImageTensor::load_resized(&p, 16).unwrap();
        assert_eq!(img.dims(), (3, 16, 16));
        assert!(img.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
