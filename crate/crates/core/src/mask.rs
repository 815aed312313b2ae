//! Per-pixel sky/cloud/ignore masks, used for ground truth and predictions.
//!
//! On disk a mask is a grayscale PNG: 0 = sky, 255 = cloud, 128 = ignore.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::imaging::decode_gray;

/// A site or pixel label. `Sky < Cloud`, matching the 0/1 encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Label {
    Sky = 0,
    Cloud = 1,
}

impl Label {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Label::Cloud
        } else {
            Label::Sky
        }
    }

    pub fn is_cloud(self) -> bool {
        self == Label::Cloud
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Sky => Label::Cloud,
            Label::Cloud => Label::Sky,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskValue {
    Sky,
    Cloud,
    Ignore,
}

impl MaskValue {
    pub fn label(self) -> Option<Label> {
        match self {
            MaskValue::Sky => Some(Label::Sky),
            MaskValue::Cloud => Some(Label::Cloud),
            MaskValue::Ignore => None,
        }
    }

    pub fn to_gray(self) -> u8 {
        match self {
            MaskValue::Sky => 0,
            MaskValue::Cloud => 255,
            MaskValue::Ignore => 128,
        }
    }

    // Anything not clearly black or white is treated as ignore so that
    // resampled or lossy masks degrade safely.
    pub fn from_gray(v: u8) -> Self {
        match v {
            0..=63 => MaskValue::Sky,
            192..=255 => MaskValue::Cloud,
            _ => MaskValue::Ignore,
        }
    }
}

impl From<Label> for MaskValue {
    fn from(l: Label) -> Self {
        match l {
            Label::Sky => MaskValue::Sky,
            Label::Cloud => MaskValue::Cloud,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<MaskValue>,
}

impl Mask {
    pub fn new(width: u32, height: u32, values: Vec<MaskValue>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::Contract(format!(
                "{} mask values for a {width}x{height} mask",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: u32, height: u32, value: MaskValue) -> Self {
        Self {
            width,
            height,
            values: vec![value; width as usize * height as usize],
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn count(&self, value: MaskValue) -> usize {
        self.values.iter().filter(|&&v| v == value).count()
    }

    /// Complement sky and cloud, leaving ignore untouched.
    pub fn complement(&self) -> Mask {
        let values = self
            .values
            .iter()
            .map(|v| match v {
                MaskValue::Sky => MaskValue::Cloud,
                MaskValue::Cloud => MaskValue::Sky,
                MaskValue::Ignore => MaskValue::Ignore,
            })
            .collect();
        Mask { values, ..*self }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let gray = decode_gray(path)?;
        let (w, h) = gray.dimensions();
        let values = gray.pixels().map(|p| MaskValue::from_gray(p.0[0])).collect();
        Mask::new(w, h, values)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width, self.height);
        for (px, v) in img.pixels_mut().zip(&self.values) {
            *px = Luma([v.to_gray()]);
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Decode {
                    path: path.to_path_buf(),
                    reason: other.to_string(),
                },
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Mask::new(
            3,
            1,
            vec![MaskValue::Sky, MaskValue::Cloud, MaskValue::Ignore],
        )
        .unwrap();
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load(&path).unwrap(), m);
    }

    #[test]
    fn complement_keeps_ignore() {
        let m = Mask::new(2, 1, vec![MaskValue::Sky, MaskValue::Ignore]).unwrap();
        assert_eq!(
            m.complement().values,
            vec![MaskValue::Cloud, MaskValue::Ignore]
        );
    }
}
