use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` intensities in `[0, 1]`, row-major, channels last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("raster dimensions must be positive, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("raster value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Like [`RasterImage::new`] but clips values into `[0, 1]` (NaN becomes 0).
    pub fn from_clipped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![v; height * width * channels])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, v: &[f64]) {
        let i = (y * self.width + x) * self.channels;
        for (d, s) in self.data[i..i + self.channels].iter_mut().zip(v) {
            *d = s.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_8bit(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        Self { data, ..*self }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Channel mean as a single-channel raster.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        Self { channels: 1, data, ..*self }
    }

    /// Replicates a single channel into three.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { channels: 3, data, ..*self }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("resize target must be positive, got {height}x{width}")));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let src = |dst: usize, dn: usize, sn: usize| (((dst as f64 + 0.5) * sn as f64 / dn as f64).floor() as usize).min(sn - 1);
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let sy = src(y, height, self.height);
            for x in 0..width {
                let sx = src(x, width, self.width);
                data.extend_from_slice(self.pixel(sy, sx));
            }
        }
        Ok(Self { height, width, channels: self.channels, data })
    }

    pub fn mse(&self, other: &RasterImage) -> Result<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::Shape("mse between rasters of different shape".into()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(RasterImage::new(0, 1, 1, vec![]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert_eq!(RasterImage::from_clipped(1, 1, 1, vec![1.5]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn resize_examples() {
        let r = RasterImage::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(r.resize_nearest(2, 2).unwrap(), r);
        let big = r.resize_nearest(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(big.pixel(y, x)[0], r.pixel(y / 2, x / 2)[0]);
            }
        }
        let c = RasterImage::filled(3, 5, 3, 0.25).unwrap();
        assert!(c.resize_nearest(7, 2).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(c.resize_nearest(0, 2).is_err());
    }
}
