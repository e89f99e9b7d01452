use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H x W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask data length {}", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_size(&self, other: &MaskMap) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                got: vec![other.height, other.width],
            })
        }
    }

    /// Pixelwise AND.
    pub fn and(&self, other: &MaskMap) -> Result<MaskMap> {
        self.zip(other, |a, b| a && b)
    }

    /// Pixelwise OR.
    pub fn or(&self, other: &MaskMap) -> Result<MaskMap> {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &MaskMap, f: impl Fn(bool, bool) -> bool) -> Result<MaskMap> {
        self.same_size(other)?;
        Ok(MaskMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// True iff every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &MaskMap) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// `1 x H x W` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// 8-bit grayscale image, foreground 255.
    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}
