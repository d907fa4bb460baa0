use std::ops::Deref;

use crate::error::{Error, Result};

/// Channel-major `C x H x W` array of `f32` with no range constraint.
///
/// Generator inputs/outputs, noise maps and response maps use this type;
/// [`Image`] wraps it when the values are known to be valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation(format!(
                "expected {}x{}x{} = {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Planes {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let a = self.area();
        &self.data[c * a..(c + 1) * a]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let a = self.area();
        &mut self.data[c * a..(c + 1) * a]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Planes) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Planes) -> Result<Planes> {
        if !self.same_shape(other) {
            return Err(Error::validation("shape mismatch in elementwise sum"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Planes { data, ..*self })
    }

    pub fn clamp_unit(mut self) -> Planes {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Mean squared difference over all entries, accumulated in `f64`.
    pub fn mse(&self, other: &Planes) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::validation(format!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len().max(1) as f64)
    }
}

/// A pixel image: `channels` in {1, 3}, non-empty, every value finite and
/// inside `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Planes);

impl Image {
    pub fn new(planes: Planes) -> Result<Self> {
        if planes.channels != 1 && planes.channels != 3 {
            return Err(Error::validation(format!(
                "images have 1 or 3 channels, got {}",
                planes.channels
            )));
        }
        if planes.height == 0 || planes.width == 0 {
            return Err(Error::validation("image has zero size"));
        }
        if let Some(v) = planes
            .data
            .iter()
            .find(|v| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::validation(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Image(planes))
    }

    /// Clamps into range (non-finite values become 0) before validating shape.
    pub fn from_clamped(mut planes: Planes) -> Result<Self> {
        for v in &mut planes.data {
            *v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        }
        Image::new(planes)
    }

    pub fn filled(channels: usize, size: usize, value: f32) -> Result<Self> {
        Image::new(Planes::filled(channels, size, size, value))
    }

    pub fn as_planes(&self) -> &Planes {
        &self.0
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }
}

impl Deref for Image {
    type Target = Planes;

    fn deref(&self) -> &Planes {
        &self.0
    }
}
