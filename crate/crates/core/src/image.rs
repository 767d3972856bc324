use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted side length in pixels.
pub const MIN_SIDE: usize = 8;

/// Row-major `H x W x C` pixel grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height}x{channels} below minimum {MIN_SIDE}x{MIN_SIDE}x1"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Samples clamped to `[0, 1]` and rounded to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Round every sample to the nearest multiple of 1/255.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(4, 16, 3, vec![0.0; 4 * 16 * 3]).is_err());
        assert!(Image::new(16, 16, 3, vec![0.0; 10]).is_err());
        assert!(Image::new(16, 16, 0, vec![]).is_err());
    }

    #[test]
    fn u8_round_trip_matches_quantize() {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|i| (i as f32 * 0.0137) % 1.0).collect();
        let mut img = Image::new(8, 8, 3, data).unwrap();
        let back = Image::from_u8(8, 8, 3, &img.to_u8()).unwrap();
        img.quantize_u8();
        assert_eq!(img, back);
    }

    #[test]
    fn indexing_is_hwc() {
        let mut img = Image::filled(8, 9, 2, 0.0).unwrap();
        img.set(3, 5, 1, 0.75);
        assert_eq!(img.data()[(5 * 8 + 3) * 2 + 1], 0.75);
        assert_eq!(img.pixel(3, 5), &[0.0, 0.75]);
    }
}
