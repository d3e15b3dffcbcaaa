//! Row-major RGB float image.

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values, row-major, channels interleaved.
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, Vec3::zero())
    }

    pub fn filled(width: usize, height: usize, color: Vec3<T>) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend(color.to_array());
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3<T> {
        let i = self.index(x, y);
        Vec3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Vec3<T>) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&c.to_array());
    }

    pub fn num_values(&self) -> usize {
        self.data.len()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Channel `c` as a dense `height * width` plane.
    pub fn channel(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}
